"""Knowledge-graph data model: triple ingestion, message graph, neighbor sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

FORWARD = 0
REVERSE = 1

ENTITY_KINDS = ("user", "item", "attribute")


class KgFormatError(ValueError):
    """Raised for malformed triple files."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class MessageEdge(NamedTuple):
    """An incoming edge of some destination node ``v``.

    ``direction == FORWARD`` means the triple is ``(source, relation, v)``;
    ``REVERSE`` means it is ``(v, relation, source)``.
    """

    source: int
    relation: int
    direction: int


@dataclass
class KnowledgeGraph:
    num_entities: int
    num_relations: int
    triples: list[Triple]
    entity_kind: list[str] = field(default_factory=list)
    entity_names: list[str] | None = None
    relation_names: list[str] | None = None
    incoming: list[list[MessageEdge]] | None = None

    def __post_init__(self):
        if not self.entity_kind:
            self.entity_kind = ["item"] * self.num_entities
        for t in self.triples:
            if not (0 <= t.head < self.num_entities and 0 <= t.tail < self.num_entities):
                raise ValueError(f"entity index out of range in {t}")
            if not 0 <= t.relation < self.num_relations:
                raise ValueError(f"relation index out of range in {t}")
            if t.head == t.tail:
                raise ValueError(f"self-loop triple {t}")

    @property
    def has_message_graph(self) -> bool:
        return self.incoming is not None

    def triple_array(self) -> np.ndarray:
        """Triples as an int64 array of shape (T, 3)."""
        if not self.triples:
            return np.zeros((0, 3), dtype=np.int64)
        return np.asarray(self.triples, dtype=np.int64)

    def entities_of_kind(self, kind: str) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.entity_kind) if k == kind], dtype=np.int64)

    def edge_arrays(self) -> "EdgeArrays":
        """Flat arrays of the message graph, grouped by destination."""
        if self.incoming is None:
            raise ValueError("message graph not built; call build_message_graph first")
        cached = getattr(self, "_edge_arrays", None)
        if cached is None:
            cached = EdgeArrays.from_incoming(self.incoming)
            self._edge_arrays = cached
        return cached


@dataclass(frozen=True)
class EdgeArrays:
    """CSR-style view of ``incoming``: edges of node v are ``indptr[v]:indptr[v+1]``."""

    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    direction: np.ndarray
    indptr: np.ndarray

    @classmethod
    def from_incoming(cls, incoming: list[list[MessageEdge]]) -> "EdgeArrays":
        counts = np.array([len(lst) for lst in incoming], dtype=np.int64)
        indptr = np.zeros(len(incoming) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        flat = [e for lst in incoming for e in lst]
        arr = np.asarray(flat, dtype=np.int64).reshape(-1, 3)
        dst = np.repeat(np.arange(len(incoming), dtype=np.int64), counts)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), dst, arr[:, 2].copy(), indptr)

    @property
    def sign(self) -> np.ndarray:
        return np.where(self.direction == FORWARD, 1.0, -1.0)

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def __len__(self) -> int:
        return len(self.src)

    def take(self, idx: np.ndarray) -> "EdgeArrays":
        """Sub-selection of edges; ``idx`` must keep the grouping by destination."""
        dst = self.dst[idx]
        counts = np.bincount(dst, minlength=len(self.indptr) - 1)
        indptr = np.zeros(len(self.indptr), dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return EdgeArrays(self.src[idx], self.rel[idx], dst, self.direction[idx], indptr)


def _parse_kind(tag: str, lineno: int) -> tuple[str | None, str | None]:
    # "kind" tags the head; "headkind:tailkind" tags both ends.
    parts = tag.split(":")
    if len(parts) > 2:
        raise KgFormatError(f"line {lineno}: bad kind tag {tag!r}")
    for p in parts:
        if p and p not in ENTITY_KINDS:
            raise KgFormatError(f"line {lineno}: unknown entity kind {p!r}")
    head = parts[0] or None
    tail = parts[1] or None if len(parts) == 2 else None
    return head, tail


def load_triples(path, id_mode: str = "string") -> KnowledgeGraph:
    """Read a tab-separated triple file into a :class:`KnowledgeGraph`.

    With ``id_mode="string"`` entity and relation names are interned to
    dense indices in order of first appearance. With ``id_mode="integer"``
    the fields are taken as indices verbatim, and the entity count is the
    largest index plus one (so entities with no triples keep their slot).

    Duplicate triples are dropped; self-loops are rejected and counted.
    The message graph is not built.
    """
    if id_mode not in ("string", "integer"):
        raise ValueError(f"unknown id_mode {id_mode!r}")
    path = Path(path)
    text = path.read_text(encoding="utf-8")

    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    kinds: dict[int, str] = {}
    seen: set[Triple] = set()
    triples: list[Triple] = []
    self_loops = 0
    n_lines = 0

    def ent(tok: str, lineno: int) -> int:
        if id_mode == "integer":
            return _as_index(tok, lineno)
        return ent_ids.setdefault(tok, len(ent_ids))

    def rel(tok: str, lineno: int) -> int:
        if id_mode == "integer":
            return _as_index(tok, lineno)
        return rel_ids.setdefault(tok, len(rel_ids))

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        n_lines += 1
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) not in (3, 4) or not all(f.strip() for f in fields[:3]):
            raise KgFormatError(
                f"{path}: line {lineno}: expected 3 or 4 tab-separated fields, got {len(fields)}"
            )
        h, r, t = (f.strip() for f in fields[:3])
        hi, ri, ti = ent(h, lineno), rel(r, lineno), ent(t, lineno)
        if len(fields) == 4 and fields[3].strip():
            hk, tk = _parse_kind(fields[3].strip(), lineno)
            if hk:
                kinds[hi] = hk
            if tk:
                kinds[ti] = tk
        if hi == ti:
            self_loops += 1
            continue
        trip = Triple(hi, ri, ti)
        if trip in seen:
            continue
        seen.add(trip)
        triples.append(trip)

    if n_lines == 0:
        raise KgFormatError(f"{path}: no triples found")
    if self_loops:
        log.warning("%s: rejected %d self-loop triple(s)", path, self_loops)

    if id_mode == "integer":
        n_ent = 1 + max([max(t.head, t.tail) for t in triples] + list(kinds) + [-1])
        n_rel = 1 + max([t.relation for t in triples] + [-1])
        names = rel_names = None
    else:
        n_ent, n_rel = len(ent_ids), len(rel_ids)
        names, rel_names = list(ent_ids), list(rel_ids)
    entity_kind = [kinds.get(i, "item") for i in range(n_ent)]
    return KnowledgeGraph(n_ent, n_rel, triples, entity_kind, names, rel_names)


def _as_index(tok: str, lineno: int) -> int:
    try:
        v = int(tok)
    except ValueError:
        raise KgFormatError(f"line {lineno}: expected integer id, got {tok!r}") from None
    if v < 0:
        raise KgFormatError(f"line {lineno}: negative id {v}")
    return v


def save_triples(kg: KnowledgeGraph, path) -> None:
    """Write ``kg`` with integer ids and ``headkind:tailkind`` tags."""
    lines = ["# head\trelation\ttail\tkind"]
    for h, r, t in kg.triples:
        lines.append(f"{h}\t{r}\t{t}\t{kg.entity_kind[h]}:{kg.entity_kind[t]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_message_graph(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Populate ``kg.incoming`` with both directions of every triple.

    Triple ``(h, r, t)`` contributes ``(h, r, FORWARD)`` to ``incoming[t]``
    and ``(t, r, REVERSE)`` to ``incoming[h]``. Lists are sorted, so the
    result does not depend on triple order and rebuilding is a no-op.
    """
    incoming: list[list[MessageEdge]] = [[] for _ in range(kg.num_entities)]
    for h, r, t in kg.triples:
        incoming[t].append(MessageEdge(h, r, FORWARD))
        incoming[h].append(MessageEdge(t, r, REVERSE))
    for lst in incoming:
        lst.sort()
    kg.incoming = incoming
    kg.__dict__.pop("_edge_arrays", None)
    return kg


def neighbor_sample(kg: KnowledgeGraph, v: int, k: int, rng: np.random.Generator) -> list[MessageEdge]:
    """Uniformly sample at most ``k`` incoming edges of ``v`` without replacement."""
    if kg.incoming is None:
        raise ValueError("message graph not built")
    if k < 1:
        raise ValueError("fan-out k must be >= 1")
    if not 0 <= v < kg.num_entities:
        raise IndexError(f"entity {v} out of range [0, {kg.num_entities})")
    edges = kg.incoming[v]
    if len(edges) <= k:
        return list(edges)
    keep = np.sort(rng.choice(len(edges), size=k, replace=False))
    return [edges[i] for i in keep]


def sample_edges(edges: EdgeArrays, k: int, rng: np.random.Generator) -> EdgeArrays:
    """Vectorized per-destination sampling of at most ``k`` incoming edges.

    Each edge draws a uniform key; a destination keeps its ``k`` smallest
    keys, which is a uniform sample without replacement.
    """
    if k < 1:
        raise ValueError("fan-out k must be >= 1")
    n = len(edges)
    if n == 0:
        return edges
    keys = rng.random(n)
    order = np.lexsort((keys, edges.dst))
    pos = np.arange(n) - edges.indptr[edges.dst[order]]
    kept = np.sort(order[pos < k])
    return edges.take(kept)
