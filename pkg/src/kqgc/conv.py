"""Knowledge-query graph convolution over a frozen pre-trained embedding.

A layer builds one *knowledge query* per incoming message edge
(``h_src + h_r`` for forward edges, ``h_src - h_r`` for reverse ones),
aggregates them per destination, and applies a shared linear map to the
destination-plus-message sum and to every relation row. There is no
nonlinearity, so stacked layers stay linear in the input embedding.

Gradients are hand-derived; ``backward`` mirrors ``forward`` step by step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import EdgeArrays, KnowledgeGraph, MessageEdge, sample_edges
from .transe import EmbeddingTable, TrainConfig, TrainingDivergedError, epoch_rng

log = logging.getLogger(__name__)

AGGREGATORS = ("mean", "attn_dot", "attn_learned")
ALIASES = {"attn1": "attn_dot", "attn2": "attn_learned"}
GUARD_EPS = 1e-8


def canonical_aggregator(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in AGGREGATORS:
        raise ValueError(f"unknown aggregator {name!r}")
    return name


@dataclass
class LayerParams:
    W: np.ndarray
    b: np.ndarray
    aggregator: str = "mean"
    a: np.ndarray | None = None
    leaky_slope: float = 0.01
    normalization: str = "ratio"

    def __post_init__(self):
        self.aggregator = canonical_aggregator(self.aggregator)
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"bias shape {self.b.shape} does not match W {self.W.shape}")
        if self.aggregator == "attn_learned":
            if self.a is None:
                raise ValueError("attn_learned needs an attention vector a")
            self.a = np.asarray(self.a, dtype=np.float64)
            if self.a.shape != (2 * self.h_in,):
                raise ValueError(f"attention vector must have length {2 * self.h_in}")
        elif self.a is not None:
            raise ValueError("attention vector a is only used by attn_learned")
        if self.normalization not in ("ratio", "softmax"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def h_in(self) -> int:
        return self.W.shape[1]

    @property
    def h_out(self) -> int:
        return self.W.shape[0]


@dataclass
class KqgcParams:
    layers: list[LayerParams]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.h_out != nxt.h_in:
                raise ValueError("layer output/input dimensions do not chain")

    def copy(self) -> "KqgcParams":
        return KqgcParams([
            replace(lp, W=lp.W.copy(), b=lp.b.copy(), a=None if lp.a is None else lp.a.copy())
            for lp in self.layers
        ])

    def flat(self) -> np.ndarray:
        parts = []
        for lp in self.layers:
            parts += [lp.W.ravel(), lp.b]
            if lp.a is not None:
                parts.append(lp.a)
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> "KqgcParams":
        out = self.copy()
        off = 0
        for lp in out.layers:
            for name in ("W", "b", "a"):
                arr = getattr(lp, name)
                if arr is None:
                    continue
                arr[...] = np.reshape(vec[off:off + arr.size], arr.shape)
                off += arr.size
        if off != len(vec):
            raise ValueError("parameter vector length mismatch")
        return out


@dataclass
class LayerState:
    node_h: np.ndarray
    rel_h: np.ndarray

    @classmethod
    def from_table(cls, emb: EmbeddingTable) -> "LayerState":
        return cls(emb.entities.copy(), emb.relations.copy())

    def to_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.node_h, self.rel_h)


@dataclass
class PairDataset:
    positives: np.ndarray
    purchase_relation: int

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.int64).reshape(-1, 2)

    @classmethod
    def from_kg(cls, kg: KnowledgeGraph, purchase_relation: int) -> "PairDataset":
        t = kg.triple_array()
        sel = t[t[:, 1] == purchase_relation]
        return cls(sel[:, [0, 2]], purchase_relation)

    @property
    def item_pool(self) -> np.ndarray:
        return np.unique(self.positives[:, 1])


# --- single-node building blocks ------------------------------------------

def knowledge_query(state: LayerState, edge: MessageEdge) -> np.ndarray:
    src, rel, direction = edge
    if direction == 0:
        return state.node_h[src] + state.rel_h[rel]
    return state.node_h[src] - state.rel_h[rel]


def _weighted_sum(coef: np.ndarray, queries: np.ndarray) -> np.ndarray:
    # same kernel as the vectorized per-destination reduction in _layer_forward
    return np.add.reduceat(coef[:, None] * queries, [0], axis=0)[0]


def aggregate_mean(queries, dim: int | None = None) -> np.ndarray:
    """Average of the queries; an empty neighborhood gives the zero vector."""
    q = np.asarray(queries, dtype=np.float64)
    if q.size == 0:
        if dim is None:
            dim = q.shape[1] if q.ndim == 2 else 0
        return np.zeros(dim)
    k = len(q)
    return _weighted_sum(np.full(k, 1.0 / k), q)


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _raw_scores(q: np.ndarray, h_dst: np.ndarray, aggregator: str, a, slope):
    if aggregator == "attn_dot":
        return (q * h_dst).sum(axis=1), None
    h = q.shape[1]
    z = q @ a[:h] + h_dst @ a[h:]
    return _leaky(z, slope), z


def attention_coefficients(
    queries,
    h_v,
    mode: str,
    a=None,
    leaky_slope: float = 0.01,
    normalization: str = "ratio",
) -> np.ndarray:
    """Normalized attention weights of one destination's queries.

    ``ratio`` divides each raw score by the sum of raw scores (no
    exponential); when that sum is within ``1e-8`` of zero the weights fall
    back to uniform. ``softmax`` is the conventional alternative.
    """
    mode = canonical_aggregator(mode)
    q = np.asarray(queries, dtype=np.float64)
    if q.size == 0:
        raise ValueError("attention over an empty neighborhood")
    if mode == "mean":
        raise ValueError("mean aggregation has no attention coefficients")
    if mode == "attn_learned" and a is None:
        raise ValueError("attn_learned needs an attention vector a")
    h_v = np.asarray(h_v, dtype=np.float64)
    s, _ = _raw_scores(q, np.broadcast_to(h_v, q.shape), mode, a, leaky_slope)
    k = len(s)
    if normalization == "softmax":
        e = np.exp(s - s.max())
        return e / e.sum()
    total = np.add.reduceat(s, [0])[0]
    if abs(total) < GUARD_EPS:
        return np.full(k, 1.0 / k)
    return s / total


def aggregate_attention(queries, coefficients) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(coefficients, dtype=np.float64)
    if len(q) != len(c):
        raise ValueError(f"{len(q)} queries but {len(c)} coefficients")
    if len(q) == 0:
        raise ValueError("attention over an empty neighborhood")
    return _weighted_sum(c, q)


def update_node(h_v, m, W, b) -> np.ndarray:
    h_v, m, W, b = (np.asarray(x, dtype=np.float64) for x in (h_v, m, W, b))
    if h_v.shape != m.shape or W.shape != (b.shape[0], h_v.shape[-1]):
        raise ValueError("shape mismatch in node update")
    return (h_v + m) @ W.T + b


def update_relations(rel_h, W, b) -> np.ndarray:
    rel_h, W, b = (np.asarray(x, dtype=np.float64) for x in (rel_h, W, b))
    if rel_h.ndim != 2 or W.shape != (b.shape[0], rel_h.shape[1]):
        raise ValueError("shape mismatch in relation update")
    return rel_h @ W.T + b


# --- vectorized layer -----------------------------------------------------

@dataclass
class _Cache:
    x: np.ndarray
    r: np.ndarray
    edges: EdgeArrays
    q: np.ndarray
    alpha: np.ndarray
    zin: np.ndarray
    starts: np.ndarray
    nonempty: np.ndarray
    s: np.ndarray | None = None
    z: np.ndarray | None = None
    total: np.ndarray | None = None
    guarded: np.ndarray | None = None


def _segment_sum(vals: np.ndarray, starts: np.ndarray, nonempty: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + vals.shape[1:])
    if len(starts):
        out[nonempty] = np.add.reduceat(vals, starts, axis=0)
    return out


def _layer_forward(x: np.ndarray, r: np.ndarray, edges: EdgeArrays, lp: LayerParams):
    n = x.shape[0]
    if x.shape[1] != lp.h_in or r.shape[1] != lp.h_in:
        raise ValueError(f"state dimension {x.shape[1]} does not match layer input {lp.h_in}")
    deg = edges.degree
    nonempty = deg > 0
    starts = edges.indptr[:-1][nonempty]
    sign = edges.sign
    q = x[edges.src] + sign[:, None] * r[edges.rel]
    cache = _Cache(x, r, edges, q, np.empty(0), np.empty(0), starts, nonempty)

    if lp.aggregator == "mean":
        alpha = 1.0 / deg[edges.dst]
    else:
        s, z = _raw_scores(q, x[edges.dst], lp.aggregator, lp.a, lp.leaky_slope)
        cache.s, cache.z = s, z
        if lp.normalization == "softmax":
            vmax = np.full(n, -np.inf)
            np.maximum.at(vmax, edges.dst, s)
            e = np.exp(s - vmax[edges.dst])
            alpha = e / _segment_sum(e, starts, nonempty, n)[edges.dst]
        else:
            total = _segment_sum(s, starts, nonempty, n)
            guarded = np.abs(total) < GUARD_EPS
            denom = np.where(guarded, 1.0, total)[edges.dst]
            alpha = np.where(guarded[edges.dst], 1.0 / deg[edges.dst].clip(min=1), s / denom)
            cache.total, cache.guarded = total, guarded
    cache.alpha = alpha
    m = _segment_sum(alpha[:, None] * q, starts, nonempty, n)
    zin = x + m
    cache.zin = zin
    y = zin @ lp.W.T + lp.b
    r_out = r @ lp.W.T + lp.b
    return y, r_out, cache


def _layer_backward(dy: np.ndarray, dr_out: np.ndarray, cache: _Cache, lp: LayerParams):
    """Gradients w.r.t. (W, b, a) and the layer inputs (x, r)."""
    e = cache.edges
    n = cache.x.shape[0]
    h = lp.h_in
    dW = dy.T @ cache.zin + dr_out.T @ cache.r
    db = dy.sum(axis=0) + dr_out.sum(axis=0)
    dzin = dy @ lp.W
    dx = dzin.copy()
    dr = dr_out @ lp.W
    dm_e = dzin[e.dst]
    dq = cache.alpha[:, None] * dm_e
    da = None

    if lp.aggregator != "mean":
        dalpha = (dm_e * cache.q).sum(axis=1)
        t = _segment_sum(dalpha * cache.alpha, cache.starts, cache.nonempty, n)
        if lp.normalization == "softmax":
            ds = cache.alpha * (dalpha - t[e.dst])
        else:
            guarded_e = cache.guarded[e.dst]
            denom = np.where(guarded_e, 1.0, cache.total[e.dst])
            ds = np.where(guarded_e, 0.0, (dalpha - t[e.dst]) / denom)
        x_dst = cache.x[e.dst]
        if lp.aggregator == "attn_dot":
            dq += ds[:, None] * x_dst
            np.add.at(dx, e.dst, ds[:, None] * cache.q)
        else:
            dz = ds * np.where(cache.z > 0, 1.0, lp.leaky_slope)
            da = np.concatenate([dz @ cache.q, dz @ x_dst])
            dq += dz[:, None] * lp.a[:h]
            np.add.at(dx, e.dst, dz[:, None] * lp.a[h:])

    np.add.at(dx, e.src, dq)
    np.add.at(dr, e.rel, e.sign[:, None] * dq)
    return dW, db, da, dx, dr


def _edges_for_layers(kg: KnowledgeGraph, n_layers: int, sampling):
    full = kg.edge_arrays()
    if sampling is None:
        return [full] * n_layers
    k, rng = sampling
    return [sample_edges(full, k, rng) for _ in range(n_layers)]


def _forward_cached(kg, state0: LayerState, params: KqgcParams, sampling=None):
    if kg.incoming is None:
        raise ValueError("message graph not built")
    if state0.node_h.shape[0] != kg.num_entities or state0.rel_h.shape[0] != kg.num_relations:
        raise ValueError("state rows do not match the graph")
    x, r = state0.node_h, state0.rel_h
    caches = []
    for lp, edges in zip(params.layers, _edges_for_layers(kg, len(params.layers), sampling)):
        x, r, cache = _layer_forward(x, r, edges, lp)
        caches.append(cache)
    return LayerState(x, r), caches


def forward(kg: KnowledgeGraph, state0: LayerState, params: KqgcParams, sampling=None) -> LayerState:
    """Run every layer; ``sampling=(fanout, rng)`` subsamples incoming edges per layer."""
    return _forward_cached(kg, state0, params, sampling)[0]


# --- downstream loss -------------------------------------------------------

def sample_negative_pairs(pos: np.ndarray, rng: np.random.Generator, item_pool: np.ndarray, ratio: int = 1) -> np.ndarray:
    """``ratio`` negatives per positive, replacing the item by another pool item."""
    pool = np.asarray(item_pool, dtype=np.int64)
    if len(pool) < 2:
        raise ValueError("item pool needs at least 2 items")
    pos = np.repeat(np.asarray(pos, dtype=np.int64).reshape(-1, 2), ratio, axis=0)
    where = np.searchsorted(pool, pos[:, 1])
    if np.any(where >= len(pool)) or np.any(pool[where.clip(max=len(pool) - 1)] != pos[:, 1]):
        raise ValueError("positive item not in pool")
    draw = rng.integers(0, len(pool) - 1, size=len(pos))
    draw = draw + (draw >= where)
    out = pos.copy()
    out[:, 1] = pool[draw]
    return out


def sample_negative_pair(pos, rng: np.random.Generator, item_pool) -> tuple[int, int]:
    u, i = sample_negative_pairs(np.array([pos]), rng, np.unique(np.asarray(item_pool)))[0]
    return int(u), int(i)


def _cf_terms(state: LayerState, pos, neg, purchase_rel: int, margin: float):
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg, dtype=np.int64).reshape(-1, 2)
    if len(pos) == 0 or len(neg) % len(pos):
        raise ValueError(f"negative batch ({len(neg)}) must be a positive multiple of positives ({len(pos)})")
    pos = np.repeat(pos, len(neg) // len(pos), axis=0)
    y, rp = state.node_h, state.rel_h[purchase_rel]
    dp = y[pos[:, 0]] + rp - y[pos[:, 1]]
    dn = y[neg[:, 0]] + rp - y[neg[:, 1]]
    arg = margin + np.abs(dp).sum(axis=1) - np.abs(dn).sum(axis=1)
    return pos, neg, dp, dn, arg


def cf_loss_and_grad(kg, state0: LayerState, params: KqgcParams, pos, neg, purchase_rel: int,
                     margin: float, sampling=None) -> tuple[float, KqgcParams]:
    """Summed user-item hinge loss on the convolution output and its parameter gradient.

    The loss compares ``|h_u + h_purchase - h_i|_1`` of each positive pair
    with that of its aligned negatives. ``state0`` is the frozen input
    embedding; its gradient is computed on the way back but dropped. The
    gradient is returned as a :class:`KqgcParams` of the same layout.
    """
    out, caches = _forward_cached(kg, state0, params, sampling)
    pos, neg, dp, dn, arg = _cf_terms(out, pos, neg, purchase_rel, margin)
    loss = float(np.maximum(arg, 0.0).sum())
    if not np.isfinite(loss):
        raise TrainingDivergedError("non-finite CF loss")

    act = arg > 0
    sp, sn = np.sign(dp[act]), np.sign(dn[act])
    dy = np.zeros_like(out.node_h)
    np.add.at(dy, pos[act, 0], sp)
    np.add.at(dy, pos[act, 1], -sp)
    np.add.at(dy, neg[act, 0], -sn)
    np.add.at(dy, neg[act, 1], sn)
    dr = np.zeros_like(out.rel_h)
    dr[purchase_rel] = sp.sum(axis=0) - sn.sum(axis=0)

    grads = []
    for lp, cache in zip(reversed(params.layers), reversed(caches)):
        dW, db, da, dy, dr = _layer_backward(dy, dr, cache, lp)
        grads.append(replace(lp, W=dW, b=db, a=da))
    return loss, KqgcParams(grads[::-1])


def cf_kinks(kg, state0: LayerState, params: KqgcParams, pos, neg, purchase_rel: int, margin: float) -> np.ndarray:
    """Expressions whose sign changes mark non-smooth points of the CF loss.

    Includes L1 coordinates, hinge arguments, LeakyReLU inputs and the
    ratio-attention denominators (a pole and a guard switch sit at zero).
    """
    out, caches = _forward_cached(kg, state0, params)
    _, _, dp, dn, arg = _cf_terms(out, pos, neg, purchase_rel, margin)
    parts = [dp.ravel(), dn.ravel(), arg]
    for c in caches:
        if c.z is not None:
            parts.append(c.z)
        if c.total is not None:
            parts.append(c.total[c.nonempty])
    return np.concatenate(parts)


def cf_loss(kg, state0, params, pos, neg, purchase_rel, margin) -> float:
    out = forward(kg, state0, params)
    *_, arg = _cf_terms(out, pos, neg, purchase_rel, margin)
    return float(np.maximum(arg, 0.0).sum())


# --- training ---------------------------------------------------------------

def init_params(dims: list[int], aggregator: str, rng: np.random.Generator,
                leaky_slope: float = 0.01, normalization: str = "ratio") -> KqgcParams:
    """Xavier-normal initialization; ``dims`` lists layer widths, input first."""
    aggregator = canonical_aggregator(aggregator)
    layers = []
    for h_in, h_out in zip(dims, dims[1:]):
        std = np.sqrt(2.0 / (h_in + h_out))
        W = rng.normal(0.0, std, size=(h_out, h_in))
        b = rng.normal(0.0, std, size=h_out)
        a = None
        if aggregator == "attn_learned":
            a = rng.normal(0.0, np.sqrt(2.0 / (2 * h_in + 1)), size=2 * h_in)
        layers.append(LayerParams(W, b, aggregator, a, leaky_slope, normalization))
    return KqgcParams(layers)


@dataclass
class KqgcRun:
    params: KqgcParams
    state: LayerState
    losses: list[float] = field(default_factory=list)
    epoch: int = 0


def train_kqgc(kg: KnowledgeGraph, pretrained: EmbeddingTable, pairs: PairDataset,
               params0: KqgcParams, cfg: TrainConfig, neg_ratio: int | None = None,
               start_epoch: int = 0) -> KqgcRun:
    """SGD on the CF loss with the input embedding frozen.

    Training forwards use ``cfg.fanout`` sampled neighbors per layer; the
    returned state is a full-neighborhood forward of the final parameters.
    """
    if kg.incoming is None:
        raise ValueError("message graph not built")
    if params0.layers[0].h_in != pretrained.dim:
        raise ValueError("pretrained dimension does not match first layer")
    ratio = neg_ratio or cfg.neg_ratio
    state0 = LayerState.from_table(pretrained)
    params = params0.copy()
    pool = pairs.item_pool
    positives = pairs.positives
    losses = []
    epoch = start_epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        rng = epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(positives))
        total = 0.0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            pos = positives[order[start:start + cfg.batch_size]]
            neg = sample_negative_pairs(pos, rng, pool, ratio)
            try:
                loss, grad = cf_loss_and_grad(kg, state0, params, pos, neg, pairs.purchase_relation,
                                              cfg.margin, sampling=(cfg.fanout, rng))
            except TrainingDivergedError:
                raise TrainingDivergedError(f"non-finite CF loss at epoch {epoch}, batch {bi}") from None
            for lp, g in zip(params.layers, grad.layers):
                lp.W -= cfg.learning_rate * g.W
                lp.b -= cfg.learning_rate * g.b
                if lp.a is not None:
                    lp.a -= cfg.learning_rate * g.a
            total += loss
        losses.append(total)
        log.debug("kqgc epoch %d loss %.6f", epoch, total)
    final = forward(kg, state0, params)
    return KqgcRun(params, final, losses, epoch)
