"""Evaluation: PR-AUC, a stand-in linear classifier, link ranking, smoothing, gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .graph import KnowledgeGraph, Triple
from .transe import EmbeddingTable

TIE_SEED = 20211


@dataclass
class PrResult:
    pr_auc: float
    num_positives: int
    num_total: int
    precision: np.ndarray
    recall: np.ndarray


def ranking_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep the order of a fixed-seed shuffle."""
    scores = np.asarray(scores, dtype=np.float64)
    perm = np.random.default_rng(TIE_SEED).permutation(len(scores))
    return perm[np.argsort(-scores[perm], kind="stable")]


def pr_auc(scores, labels) -> PrResult:
    """Average precision: mean over positives of the precision at their rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("PR-AUC needs at least one positive")
    ranked = (labels[ranking_order(scores)] == 1).astype(np.int64)
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, len(ranked) + 1)
    recall = hits / n_pos
    ap = float(precision[ranked == 1].sum() / n_pos)
    return PrResult(ap, n_pos, len(labels), precision, recall)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ClassifierConfig:
    l2: float = 1e-4
    iterations: int = 500
    learning_rate: float = 0.1


def logistic_loss(X, y, w, b, l2) -> float:
    z = X @ w + b
    # log(1 + exp(-z)) for y=1 and log(1 + exp(z)) for y=0
    per = np.logaddexp(0.0, np.where(y == 1, -z, z))
    return float(per.mean() + 0.5 * l2 * w @ w)


def train_linear_classifier(features, labels, cfg: ClassifierConfig | None = None):
    """L2-penalized logistic regression by full-batch gradient descent from zero."""
    cfg = cfg or ClassifierConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.isfinite(X).all():
        raise ValueError("features must be finite")
    w = np.zeros(X.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(cfg.iterations):
        p = _sigmoid(X @ w + b)
        err = p - y
        w -= cfg.learning_rate * (X.T @ err / n + cfg.l2 * w)
        b -= cfg.learning_rate * err.mean()
    if not np.isfinite(logistic_loss(X, y, w, b, cfg.l2)):
        raise ValueError("classifier loss is not finite")
    return w, b


def predict_proba(features, w, b) -> np.ndarray:
    return _sigmoid(np.asarray(features) @ w + b)


@dataclass
class LinkRankResult:
    hits_at_k: float
    mean_rank: float
    ranks: np.ndarray


def link_rank_eval(emb: EmbeddingTable, held_out: Iterable[Triple], k: int,
                   known: Iterable[Triple] = ()) -> LinkRankResult:
    """Filtered tail ranking by L1 score.

    Candidates are all entities; other true tails of ``(h, r)`` listed in
    ``known`` or ``held_out`` are removed. A tie with the true tail counts
    half a position.
    """
    held = [tuple(t) for t in held_out]
    true_tails: dict[tuple[int, int], set[int]] = {}
    for h, r, t in list(known) + held:
        true_tails.setdefault((h, r), set()).add(t)
    ranks = np.empty(len(held))
    for j, (h, r, t) in enumerate(held):
        q = emb.entities[h] + emb.relations[r]
        sc = np.abs(q[None, :] - emb.entities).sum(axis=1)
        mask = np.ones(emb.num_entities, dtype=bool)
        others = list(true_tails[(h, r)] - {t})
        mask[others] = False
        mask[t] = False
        cand = sc[mask]
        ranks[j] = 1 + (cand < sc[t]).sum() + 0.5 * (cand == sc[t]).sum()
    if len(held) == 0:
        return LinkRankResult(float("nan"), float("nan"), ranks)
    return LinkRankResult(float((ranks <= k).mean()), float(ranks.mean()), ranks)


@dataclass
class SmoothingReport:
    query_distance: float
    neighbor_cosine: float
    num_edges: int


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def smoothing_report(kg: KnowledgeGraph, state) -> SmoothingReport:
    """Query-to-destination L1 distance on unit entity rows, and head/tail cosine.

    Both are averaged over the forward edges (one per triple). ``state`` is
    a ``LayerState`` or an ``EmbeddingTable``.
    """
    t = kg.triple_array()
    if len(t) == 0:
        return SmoothingReport(float("nan"), float("nan"), 0)
    if isinstance(state, EmbeddingTable):
        node_h, rel_h = state.entities, state.relations
    else:
        node_h, rel_h = state.node_h, state.rel_h
    node = _unit_rows(np.asarray(node_h, dtype=np.float64))
    rel = np.asarray(rel_h, dtype=np.float64)
    if node.shape[1] != rel.shape[1]:
        raise ValueError("node and relation dimensions differ")
    src, dst = node[t[:, 0]], node[t[:, 2]]
    dist = np.abs(src + rel[t[:, 1]] - dst).sum(axis=1)
    cos = (src * dst).sum(axis=1)
    return SmoothingReport(float(dist.mean()), float(cos.mean()), len(t))


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tol


def grad_check(loss_eval: Callable, point, step: float = 1e-5, tol: float = 1e-4,
               kinks: Callable | None = None, kink_margin: float = 1e-3) -> GradCheckResult:
    """Compare an analytic gradient with central differences.

    ``loss_eval(x)`` returns ``(loss, grad)``. When ``kinks(x)`` is given it
    returns the inner expressions of the non-smooth pieces (L1 arguments,
    hinge arguments); a coordinate is skipped when moving it by
    ``±kink_margin`` flips the sign of any of them.

    The error of a coordinate is ``|a - n| / max(1, |a|, |n|)``: relative
    for large entries, absolute for entries below 1.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    x = np.array(point, dtype=np.float64)
    _, g = loss_eval(x)
    g = np.asarray(g, dtype=np.float64).ravel()
    base = None if kinks is None else np.sign(kinks(x))
    worst, checked, skipped = 0.0, 0, 0
    for i in range(len(x)):
        if base is not None:
            near = False
            for d in (kink_margin, -kink_margin):
                xs = x.copy()
                xs[i] += d
                if np.any(np.sign(kinks(xs)) != base):
                    near = True
                    break
            if near:
                skipped += 1
                continue
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        num = (loss_eval(xp)[0] - loss_eval(xm)[0]) / (2 * step)
        worst = max(worst, abs(g[i] - num) / max(1.0, abs(g[i]), abs(num)))
        checked += 1
    return GradCheckResult(worst, checked, skipped, tol)
