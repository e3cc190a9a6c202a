"""TransE pre-training with an L1 score and a max-margin loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import KnowledgeGraph, Triple

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class EmbeddingTable:
    entities: np.ndarray
    relations: np.ndarray

    def __post_init__(self):
        self.entities = np.ascontiguousarray(self.entities, dtype=np.float64)
        self.relations = np.ascontiguousarray(self.relations, dtype=np.float64)
        if self.entities.ndim != 2 or self.relations.ndim != 2:
            raise ValueError("embedding matrices must be 2-D")
        if self.entities.shape[1] != self.relations.shape[1]:
            raise ValueError("entity and relation dimensions differ")

    @property
    def dim(self) -> int:
        return self.entities.shape[1]

    @property
    def num_entities(self) -> int:
        return self.entities.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relations.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.entities.copy(), self.relations.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.entities).all() and np.isfinite(self.relations).all())


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 0.01
    margin: float = 1.0
    neg_ratio: int = 1
    dim: int = 32
    seed: int = 0
    checkpoint_every: int = 0
    normalize_entities: bool = True
    fanout: int = 10

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.batch_size < 1 or self.neg_ratio < 1 or self.epochs < 0:
            raise ValueError("batch_size and neg_ratio must be >= 1, epochs >= 0")


@dataclass
class KgeGrad:
    """Row-sparse gradient: only rows touched by the batch are present."""

    entity_rows: np.ndarray
    entity_grad: np.ndarray
    relation_rows: np.ndarray
    relation_grad: np.ndarray

    def dense(self, num_entities: int, num_relations: int) -> tuple[np.ndarray, np.ndarray]:
        h = self.entity_grad.shape[1]
        ge = np.zeros((num_entities, h))
        gr = np.zeros((num_relations, h))
        ge[self.entity_rows] = self.entity_grad
        gr[self.relation_rows] = self.relation_grad
        return ge, gr


def score_triple(emb: EmbeddingTable, t: Triple) -> float:
    h, r, tl = t
    for idx, n in ((h, emb.num_entities), (tl, emb.num_entities), (r, emb.num_relations)):
        if not 0 <= idx < n:
            raise IndexError(f"index {idx} out of range in {tuple(t)}")
    return float(np.abs(emb.entities[h] + emb.relations[r] - emb.entities[tl]).sum())


def score_batch(emb: EmbeddingTable, triples: np.ndarray) -> np.ndarray:
    """L1 scores for an (M, 3) array of triples."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    d = emb.entities[triples[:, 0]] + emb.relations[triples[:, 1]] - emb.entities[triples[:, 2]]
    return np.abs(d).sum(axis=1)


def corrupt_batch(triples: np.ndarray, rng: np.random.Generator, num_entities: int) -> np.ndarray:
    """Replace head or tail (chosen uniformly) of each triple with a different random entity."""
    if num_entities < 2:
        raise ValueError("corruption needs at least 2 entities")
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    m = len(triples)
    side = np.where(rng.integers(0, 2, size=m) == 0, 0, 2)
    draw = rng.integers(0, num_entities - 1, size=m)
    rows = np.arange(m)
    orig = triples[rows, side]
    # shift past the original so the draw is uniform over the other N-1 entities
    draw = draw + (draw >= orig)
    out = triples.copy()
    out[rows, side] = draw
    return out


def corrupt_triple(t: Triple, rng: np.random.Generator, num_entities: int) -> Triple:
    h, r, tl = corrupt_batch(np.array([tuple(t)]), rng, num_entities)[0]
    return Triple(int(h), int(r), int(tl))


def _hinge_terms(emb: EmbeddingTable, pos: np.ndarray, neg: np.ndarray, margin: float):
    ratio = len(neg) // len(pos)
    pos_rep = np.repeat(pos, ratio, axis=0)
    dp = emb.entities[pos_rep[:, 0]] + emb.relations[pos_rep[:, 1]] - emb.entities[pos_rep[:, 2]]
    dn = emb.entities[neg[:, 0]] + emb.relations[neg[:, 1]] - emb.entities[neg[:, 2]]
    arg = margin + np.abs(dp).sum(axis=1) - np.abs(dn).sum(axis=1)
    return pos_rep, dp, dn, arg


def _check_batches(pos, neg):
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(neg, dtype=np.int64).reshape(-1, 3)
    if len(pos) == 0 or len(neg) % len(pos) != 0:
        raise ValueError(
            f"negative batch ({len(neg)}) must be a positive multiple of positive batch ({len(pos)})"
        )
    return pos, neg


def kge_loss_and_grad(emb: EmbeddingTable, pos, neg, margin: float) -> tuple[float, KgeGrad]:
    """Summed hinge loss and its exact L1 subgradient.

    ``neg`` holds ``neg_ratio`` corruptions per positive, stored
    contiguously: rows ``i*ratio:(i+1)*ratio`` belong to ``pos[i]``.
    ``sign(0)`` is taken as 0.
    """
    pos, neg = _check_batches(pos, neg)
    pos_rep, dp, dn, arg = _hinge_terms(emb, pos, neg, margin)
    active = arg > 0
    # np.maximum keeps NaN so a diverged batch is reported, not silently zero
    loss = float(np.maximum(arg, 0.0).sum())

    sp = np.sign(dp[active])
    sn = np.sign(dn[active])
    pa, na = pos_rep[active], neg[active]
    ent_idx = np.concatenate([pa[:, 0], pa[:, 2], na[:, 0], na[:, 2]])
    ent_val = np.concatenate([sp, -sp, -sn, sn])
    rel_idx = np.concatenate([pa[:, 1], na[:, 1]])
    rel_val = np.concatenate([sp, -sn])
    return loss, KgeGrad(*_reduce_rows(ent_idx, ent_val), *_reduce_rows(rel_idx, rel_val))


def _reduce_rows(idx: np.ndarray, vals: np.ndarray):
    rows, inv = np.unique(idx, return_inverse=True)
    out = np.zeros((len(rows), vals.shape[1]))
    np.add.at(out, inv, vals)
    return rows, out


def kge_kinks(emb: EmbeddingTable, pos, neg, margin: float) -> np.ndarray:
    """Inner expressions whose sign flips mark kinks of the loss (L1 coordinates, hinge args)."""
    pos, neg = _check_batches(pos, neg)
    _, dp, dn, arg = _hinge_terms(emb, pos, neg, margin)
    return np.concatenate([dp.ravel(), dn.ravel(), arg])


def normalize_entities(emb: EmbeddingTable) -> EmbeddingTable:
    """Scale entity rows to unit L2 norm in place; zero rows become ``e1``."""
    norms = np.linalg.norm(emb.entities, axis=1)
    zero = norms == 0
    emb.entities[~zero] /= norms[~zero, None]
    if zero.any():
        emb.entities[zero] = 0.0
        emb.entities[zero, 0] = 1.0
    return emb


def init_embeddings(num_entities: int, num_relations: int, dim: int, rng: np.random.Generator) -> EmbeddingTable:
    """Uniform in ``±6/sqrt(dim)``, then unit rows.

    Relation rows are normalized once here and never again, as in the
    original TransE recipe; unnormalized they start so long that with few
    entities every corruption already clears the margin.
    """
    bound = 6.0 / np.sqrt(dim)
    ent = rng.uniform(-bound, bound, size=(num_entities, dim))
    rel = rng.uniform(-bound, bound, size=(num_relations, dim))
    rel /= np.linalg.norm(rel, axis=1, keepdims=True)
    return normalize_entities(EmbeddingTable(ent, rel))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # per-epoch streams make a resumed run identical to an uninterrupted one
    return np.random.default_rng([seed, epoch])


@dataclass
class KgeRun:
    table: EmbeddingTable
    checkpoints: dict[int, EmbeddingTable] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)
    epoch: int = 0


def train_kge(
    kg: KnowledgeGraph,
    cfg: TrainConfig,
    init: EmbeddingTable | None = None,
    start_epoch: int = 0,
    on_checkpoint: Callable[[int, EmbeddingTable], None] | None = None,
) -> KgeRun:
    """Minibatch SGD on the summed hinge loss.

    Each epoch shuffles the triples, draws ``cfg.neg_ratio`` corruptions per
    positive, and after every minibatch re-normalizes the entity rows (when
    ``cfg.normalize_entities``). Snapshots are taken every
    ``cfg.checkpoint_every`` epochs; ``on_checkpoint`` sees each one.

    Pass ``init``/``start_epoch`` to resume; epoch numbering continues.
    """
    if not kg.triples:
        raise ValueError("cannot train on an empty knowledge graph")
    triples = kg.triple_array()
    if init is None:
        table = init_embeddings(kg.num_entities, kg.num_relations, cfg.dim, np.random.default_rng([cfg.seed]))
    else:
        if init.entities.shape != (kg.num_entities, cfg.dim) or init.num_relations != kg.num_relations:
            raise ValueError("initial table does not match graph/config shape")
        table = init.copy()

    run = KgeRun(table=table, epoch=start_epoch)
    n = len(triples)
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        rng = epoch_rng(cfg.seed, epoch)
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            pos = triples[order[start:start + cfg.batch_size]]
            neg = corrupt_batch(np.repeat(pos, cfg.neg_ratio, axis=0), rng, kg.num_entities)
            loss, grad = kge_loss_and_grad(table, pos, neg, cfg.margin)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite KGE loss at epoch {epoch}, batch {b}")
            table.entities[grad.entity_rows] -= cfg.learning_rate * grad.entity_grad
            table.relations[grad.relation_rows] -= cfg.learning_rate * grad.relation_grad
            if cfg.normalize_entities:
                normalize_entities(table)
            total += loss
        run.losses.append(total)
        run.epoch = epoch
        log.debug("kge epoch %d loss %.6f", epoch, total)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            snap = table.copy()
            run.checkpoints[epoch] = snap
            if on_checkpoint is not None:
                on_checkpoint(epoch, snap)
    return run


def batch_loss(emb: EmbeddingTable, pos: Sequence, neg: Sequence, margin: float) -> float:
    pos, neg = _check_batches(pos, neg)
    *_, arg = _hinge_terms(emb, pos, neg, margin)
    return float(np.maximum(arg, 0.0).sum())
