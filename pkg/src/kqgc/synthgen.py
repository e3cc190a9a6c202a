"""Synthetic knowledge graphs with planted structure.

Two generators:

* ``generate_cluster_kg`` builds a user/item/attribute purchase graph whose
  clusters stand in for brands, plus one labeled user dataset per cluster.
* ``generate_translation_kg`` plants an embedding table and emits exactly
  the triples it (nearly) translates, for checking TransE and the
  convolution against known geometry.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .graph import KnowledgeGraph, Triple
from .transe import EmbeddingTable, score_batch

PURCHASE, HAS_ATTRIBUTE, USER_ATTRIBUTE = 0, 1, 2
RELATION_NAMES = ("purchase", "has_attribute", "user_attribute")
SPLITS = ("train", "validation", "test")


class SpecError(ValueError):
    """Infeasible generator parameters; ``field`` names the offending one."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


@dataclass
class SyntheticSpec:
    num_users: int = 200
    num_items: int = 400
    num_attributes: int = 50
    num_clusters: int = 5
    intra_cluster_purchase_prob: float = 0.05
    cross_cluster_purchase_prob: float = 0.005
    attr_per_item: int = 2
    attr_cross_prob: float = 0.1
    noise_std: float = 1.0
    baseline_dim: int = 8
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_users", "num_items", "num_attributes", "num_clusters", "attr_per_item", "baseline_dim"):
            if getattr(self, name) < 1:
                raise SpecError(name, "must be >= 1")
        for name in ("intra_cluster_purchase_prob", "cross_cluster_purchase_prob", "attr_cross_prob", "test_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(name, f"must lie in [0, 1], got {v}")
        if self.intra_cluster_purchase_prob <= self.cross_cluster_purchase_prob:
            raise SpecError("intra_cluster_purchase_prob", "must exceed cross_cluster_purchase_prob")
        if self.noise_std < 0:
            raise SpecError("noise_std", "must be >= 0")
        c = self.num_clusters
        for name in ("num_users", "num_items", "num_attributes"):
            if getattr(self, name) < c:
                raise SpecError(name, f"needs at least one per cluster ({c})")
        if self.attr_per_item > self.num_attributes // c:
            raise SpecError("attr_per_item", f"exceeds the per-cluster attribute pool ({self.num_attributes // c})")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LabeledDataset:
    brand: int
    users: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # values index SPLITS

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == SPLITS.index(split)
        return self.users[m], self.labels[m]


@dataclass
class ClusterBenchmark:
    kg: KnowledgeGraph
    clusters: np.ndarray  # per-entity cluster id
    datasets: list[LabeledDataset]
    baseline: np.ndarray  # per-user stand-in baseline features
    users: np.ndarray
    items: np.ndarray
    attributes: np.ndarray
    spec: SyntheticSpec


def _balanced_assignment(n: int, c: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def generate_cluster_kg(spec: SyntheticSpec) -> ClusterBenchmark:
    """Planted-cluster purchase graph plus per-cluster ("brand") user datasets.

    Entities are laid out users, then items, then attributes. Purchase
    edges follow the intra/cross probabilities (every user buys at least one
    in-cluster item); items and users link to attributes from their own
    cluster's pool except with probability ``attr_cross_prob``.

    For cluster c the positives are its users and the negatives three times
    as many users of other clusters. A ``test_fraction`` of users is held
    out as a disjoint test pool; the rest splits 6:4 train:validation.
    """
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x5EED])
    nu, ni, na, c = spec.num_users, spec.num_items, spec.num_attributes, spec.num_clusters
    users = np.arange(nu)
    items = nu + np.arange(ni)
    attrs = nu + ni + np.arange(na)
    u_cl = _balanced_assignment(nu, c, rng)
    i_cl = _balanced_assignment(ni, c, rng)
    a_cl = np.arange(na) % c
    pools = [attrs[a_cl == k] for k in range(c)]

    triples: set[tuple[int, int, int]] = set()
    p = np.where(u_cl[:, None] == i_cl[None, :], spec.intra_cluster_purchase_prob,
                 spec.cross_cluster_purchase_prob)
    buys = rng.random((nu, ni)) < p
    for u in range(nu):
        if not buys[u, i_cl == u_cl[u]].any():
            own = np.flatnonzero(i_cl == u_cl[u])
            buys[u, rng.choice(own)] = True
    for u, i in zip(*np.nonzero(buys)):
        triples.add((int(users[u]), PURCHASE, int(items[i])))

    def pick_attr(cluster: int) -> np.ndarray:
        k = cluster
        if c > 1 and rng.random() < spec.attr_cross_prob:
            k = (cluster + 1 + rng.integers(c - 1)) % c
        return pools[k]

    for idx, i in enumerate(items):
        chosen: set[int] = set()
        while len(chosen) < spec.attr_per_item:
            pool = pick_attr(i_cl[idx])
            chosen.add(int(rng.choice(pool)))
        for a in sorted(chosen):
            triples.add((int(i), HAS_ATTRIBUTE, a))
    for idx, u in enumerate(users):
        triples.add((int(u), USER_ATTRIBUTE, int(rng.choice(pick_attr(u_cl[idx])))))

    kinds = ["user"] * nu + ["item"] * ni + ["attribute"] * na
    kg = KnowledgeGraph(nu + ni + na, 3, [Triple(*t) for t in sorted(triples)], kinds,
                        relation_names=list(RELATION_NAMES))
    clusters = np.concatenate([u_cl, i_cl, a_cl])

    is_test = np.zeros(nu, dtype=bool)
    for k in range(c):
        members = rng.permutation(np.flatnonzero(u_cl == k))
        is_test[members[: int(round(spec.test_fraction * len(members)))]] = True
    datasets = [_brand_dataset(k, u_cl, is_test, rng) for k in range(c)]
    baseline = _baseline_features(u_cl, spec, rng)
    return ClusterBenchmark(kg, clusters, datasets, baseline, users, items, attrs, spec)


def _pick_users(k: int, u_cl: np.ndarray, mask: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Positives of cluster k and three times as many negatives, within ``mask``.

    Positives are subsampled when other clusters cannot supply enough negatives.
    """
    pos = np.flatnonzero(mask & (u_cl == k))
    cand = np.flatnonzero(mask & (u_cl != k))
    n_pos = min(len(pos), len(cand) // 3)
    if n_pos < 1:
        raise SpecError("num_users", f"cluster {k} has too few users for a 1:3 labeled set")
    if n_pos < len(pos):
        pos = np.sort(rng.choice(pos, size=n_pos, replace=False))
    neg = np.sort(rng.choice(cand, size=3 * n_pos, replace=False))
    return pos, neg


def _brand_dataset(k: int, u_cl: np.ndarray, is_test: np.ndarray, rng) -> LabeledDataset:
    pos, neg = _pick_users(k, u_cl, ~is_test, rng)
    tv_users = np.concatenate([pos, neg])
    tv_labels = np.concatenate([np.ones(len(pos), int), np.zeros(len(neg), int)])
    perm = rng.permutation(len(tv_users))
    n_train = int(round(0.6 * len(tv_users)))
    tv_split = np.where(np.arange(len(tv_users)) < n_train, 0, 1)
    tv_users, tv_labels = tv_users[perm], tv_labels[perm]

    tpos, tneg = _pick_users(k, u_cl, is_test, rng)
    users = np.concatenate([tv_users, tpos, tneg])
    labels = np.concatenate([tv_labels, np.ones(len(tpos), int), np.zeros(len(tneg), int)])
    split = np.concatenate([tv_split, np.full(len(tpos) + len(tneg), 2)])
    return LabeledDataset(k, users, labels, split)


def _baseline_features(u_cl: np.ndarray, spec: SyntheticSpec, rng) -> np.ndarray:
    """Weakly informative per-user features: a noisy random cluster code."""
    centers = rng.normal(0.0, 1.0, size=(spec.num_clusters, spec.baseline_dim))
    return centers[u_cl] + rng.normal(0.0, spec.noise_std, size=(len(u_cl), spec.baseline_dim))


def write_labels(bench: ClusterBenchmark, path) -> None:
    lines = ["# user_index\tlabel\tsplit\tbrand"]
    for ds in bench.datasets:
        for u, y, s in zip(ds.users, ds.labels, ds.split):
            lines.append(f"{u}\t{y}\t{SPLITS[s]}\t{ds.brand}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path) -> list[LabeledDataset]:
    rows: dict[int, list[tuple[int, int, int]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        if len(f) != 4 or f[2] not in SPLITS:
            raise ValueError(f"{path}: line {lineno}: expected user<TAB>label<TAB>split<TAB>brand")
        rows.setdefault(int(f[3]), []).append((int(f[0]), int(f[1]), SPLITS.index(f[2])))
    out = []
    for brand in sorted(rows):
        arr = np.array(rows[brand], dtype=np.int64)
        out.append(LabeledDataset(brand, arr[:, 0], arr[:, 1], arr[:, 2]))
    return out


def write_features(features: np.ndarray, users: np.ndarray, path) -> None:
    lines = ["\t".join([str(u)] + [repr(float(v)) for v in row]) for u, row in zip(users, features)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_features(path) -> dict[int, np.ndarray]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            f = line.split("\t")
            out[int(f[0])] = np.array([float(v) for v in f[1:]])
    return out


# --- planted translation fixture --------------------------------------------

def generate_translation_kg(num_entities: int, num_relations: int, H: int, noise_std: float = 0.0,
                            seed: int = 0, target_degree: float = 4.0) -> tuple[KnowledgeGraph, EmbeddingTable]:
    """Emit every triple that a planted table translates within a threshold.

    Entities sit on distinct vertices of the cube ``{-s, +s}^H`` with
    ``s = 1/sqrt(H)``, so every row has unit norm. Relation ``k`` is
    ``-2s`` on coordinate ``k`` and zero elsewhere: it moves a vertex with
    ``+s`` there to the vertex with ``-s``. These sums are exact in floating
    point, so with ``noise_std == 0`` every emitted triple (and its reverse
    query) is translated exactly.

    With noise, entity rows are perturbed and re-normalized, and the
    threshold is the score quantile that keeps a mean out-degree of
    ``target_degree``.
    """
    if H < 2:
        raise ValueError("H must be >= 2")
    if num_relations > H:
        raise ValueError(f"at most H={H} relations (one per coordinate)")
    if num_entities > 2 ** min(H, 62):
        raise ValueError(f"{num_entities} entities do not fit on the {H}-cube")
    rng = np.random.default_rng([seed, 0x7A55])
    s = 1.0 / np.sqrt(H)
    codes: set[tuple[int, ...]] = set()
    ent = []
    while len(ent) < num_entities:
        bits = tuple(int(b) for b in rng.integers(0, 2, size=H))
        if bits not in codes:
            codes.add(bits)
            ent.append(bits)
    E = np.where(np.array(ent, dtype=np.int64) == 1, s, -s)
    R = np.zeros((num_relations, H))
    R[np.arange(num_relations), np.arange(num_relations)] = -2.0 * s
    if noise_std > 0:
        E = E + rng.normal(0.0, noise_std, size=E.shape)
        E /= np.linalg.norm(E, axis=1, keepdims=True)
    table = EmbeddingTable(E, R)

    n = num_entities
    cand = np.array([(h, r, t) for r in range(num_relations) for h in range(n) for t in range(n) if h != t],
                    dtype=np.int64).reshape(-1, 3)
    scores = score_batch(table, cand)
    if noise_std == 0:
        threshold = 1e-9
    else:
        want = int(round(target_degree * n))
        if want >= len(cand):
            raise ValueError("target degree too high; lower target_degree or add entities")
        threshold = float(np.partition(scores, want)[want])
    keep = scores < threshold
    degree = keep.sum() / n
    if not 2.0 <= degree <= 10.0:
        raise ValueError(
            f"threshold search gave mean out-degree {degree:.2f} outside [2, 10]; "
            "change num_entities/num_relations/H (denser cube or more relations)"
        )
    triples = [Triple(*map(int, t)) for t in cand[keep]]
    return KnowledgeGraph(n, num_relations, triples), table


def spec_as_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
