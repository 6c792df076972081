"""Graph data model: skeletons, annotated graphs, permutations, batching and JSON I/O.

Undirected edges are stored once as rows ``(i, j)`` with ``i < j``; edge
feature rows are aligned with the edge rows.  Both orientations only exist
inside a :class:`GraphBatch`, where message passing needs them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graphs or documents; the message names the field."""


def _as_edges(edges, n: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GraphError(f"edges: expected shape (m, 2), got {arr.shape}")
    if (arr < 0).any() or (arr >= n).any():
        bad = arr[((arr < 0) | (arr >= n)).any(axis=1)][0]
        raise GraphError(f"edges: pair {bad.tolist()} references a node outside [0, {n})")
    if (arr[:, 0] == arr[:, 1]).any():
        raise GraphError("edges: self-loops are not allowed")
    arr = np.sort(arr, axis=1)
    keys = arr[:, 0] * n + arr[:, 1]
    if len(np.unique(keys)) != len(keys):
        raise GraphError("edges: duplicate undirected edge")
    return arr


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Node count plus undirected edge list, no features."""

    n: int
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        if int(self.n) < 1:
            raise GraphError(f"n: node count must be >= 1, got {self.n}")
        object.__setattr__(self, "n", int(self.n))
        edges = _as_edges(self.edges, self.n)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def m(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges.tolist():
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return self.n == other.n and self.edge_set() == other.edge_set()

    def __hash__(self):
        return hash((self.n, frozenset(self.edge_set())))


@dataclass(frozen=True, eq=False)
class AnnotatedGraph:
    """A skeleton with node features ``(n, d)`` and edge features ``(m, c)``."""

    skeleton: Skeleton
    node_feats: np.ndarray
    edge_feats: np.ndarray

    def __post_init__(self):
        s = self.skeleton
        v = np.array(self.node_feats, dtype=np.float64, copy=True)
        e = np.array(self.edge_feats, dtype=np.float64, copy=True)
        if v.ndim != 2 or v.shape[0] != s.n:
            raise GraphError(f"node_feats: expected {s.n} rows, got shape {v.shape}")
        if e.ndim == 1 and e.size == 0:
            e = e.reshape(0, 0)
        if e.ndim != 2 or e.shape[0] != s.m:
            raise GraphError(f"edge_feats: expected {s.m} rows, got shape {e.shape}")
        if not np.isfinite(v).all():
            raise GraphError("node_feats: non-finite value")
        if not np.isfinite(e).all():
            raise GraphError("edge_feats: non-finite value")
        v.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "node_feats", v)
        object.__setattr__(self, "edge_feats", e)

    @property
    def n(self) -> int:
        return self.skeleton.n

    @property
    def edges(self) -> np.ndarray:
        return self.skeleton.edges

    @property
    def node_dim(self) -> int:
        return self.node_feats.shape[1]

    @property
    def edge_dim(self) -> int:
        return self.edge_feats.shape[1]

    def edge_map(self) -> dict[tuple[int, int], np.ndarray]:
        return {(int(i), int(j)): self.edge_feats[k] for k, (i, j) in enumerate(self.edges)}

    def with_edge_dim(self, c: int) -> "AnnotatedGraph":
        """Return self, fixing the edge feature width of an edgeless graph."""
        if self.skeleton.m == 0 and self.edge_dim != c:
            return AnnotatedGraph(self.skeleton, self.node_feats, np.zeros((0, c)))
        return self

    def __eq__(self, other):
        if not isinstance(other, AnnotatedGraph):
            return NotImplemented
        if self.skeleton != other.skeleton or self.node_feats.shape != other.node_feats.shape:
            return False
        if not np.array_equal(self.node_feats, other.node_feats):
            return False
        if self.edge_dim != other.edge_dim and self.skeleton.m:
            return False
        mine, theirs = self.edge_map(), other.edge_map()
        return all(np.array_equal(mine[k], theirs[k]) for k in mine)

    __hash__ = None  # type: ignore[assignment]


# --- permutations ---------------------------------------------------------------


def check_permutation(perm) -> np.ndarray:
    p = np.asarray(perm, dtype=np.int64)
    if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(len(p))):
        raise GraphError("perm: not a bijection on {0..n-1}")
    return p


def inverse_permutation(perm) -> np.ndarray:
    p = check_permutation(perm)
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return inv


def random_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n).astype(np.int64)


def permute_skeleton(s: Skeleton, perm) -> Skeleton:
    p = check_permutation(perm)
    if len(p) != s.n:
        raise GraphError(f"perm: size {len(p)} does not match node count {s.n}")
    inv = inverse_permutation(p)
    return Skeleton(s.n, inv[s.edges])


def apply_permutation(g: AnnotatedGraph, perm) -> AnnotatedGraph:
    """Relabel nodes so that output node ``i`` is input node ``perm[i]``.

    Edge rows keep their order; only their endpoints are renamed.
    """
    p = check_permutation(perm)
    if len(p) != g.n:
        raise GraphError(f"perm: size {len(p)} does not match node count {g.n}")
    return AnnotatedGraph(permute_skeleton(g.skeleton, p), g.node_feats[p], g.edge_feats)


# --- batching ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of graphs.

    ``edges`` holds each undirected edge once in global indexing; the two
    orientations are exposed by :attr:`edge_index` with the feature rows
    repeated in :attr:`directed_edge_feats`.
    """

    node_feats: np.ndarray
    edges: np.ndarray
    edge_feats: np.ndarray
    graph_indicator: np.ndarray
    edge_graph: np.ndarray
    node_offsets: np.ndarray
    edge_offsets: np.ndarray

    @property
    def num_graphs(self) -> int:
        return len(self.node_offsets) - 1

    @property
    def total_nodes(self) -> int:
        return int(self.node_offsets[-1])

    @property
    def total_edges(self) -> int:
        return int(self.edge_offsets[-1])

    @property
    def edge_index(self) -> np.ndarray:
        return np.concatenate([self.edges, self.edges[:, ::-1]], axis=0)

    @property
    def directed_edge_feats(self) -> np.ndarray:
        return np.concatenate([self.edge_feats, self.edge_feats], axis=0)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.total_nodes)

    def skeletons(self) -> list[Skeleton]:
        out = []
        for g in range(self.num_graphs):
            a, b = self.node_offsets[g], self.node_offsets[g + 1]
            ea, eb = self.edge_offsets[g], self.edge_offsets[g + 1]
            out.append(Skeleton(int(b - a), self.edges[ea:eb] - a))
        return out


def batch_skeletons(skeletons: Sequence[Skeleton]) -> GraphBatch:
    """Batch featureless skeletons (zero-width feature matrices)."""
    graphs = [AnnotatedGraph(s, np.zeros((s.n, 0)), np.zeros((s.m, 0))) for s in skeletons]
    return batch(graphs)


def batch(graphs: Sequence[AnnotatedGraph]) -> GraphBatch:
    if not graphs:
        raise GraphError("batch: empty graph list")
    d = graphs[0].node_dim
    edge_dims = {g.edge_dim for g in graphs if g.skeleton.m}
    c = edge_dims.pop() if edge_dims else graphs[0].edge_dim
    for k, g in enumerate(graphs):
        if g.node_dim != d:
            raise GraphError(f"batch: graph {k} has node dim {g.node_dim}, expected {d}")
        if g.skeleton.m and g.edge_dim != c:
            raise GraphError(f"batch: graph {k} has edge dim {g.edge_dim}, expected {c}")
    ns = np.array([g.n for g in graphs], dtype=np.int64)
    ms = np.array([g.skeleton.m for g in graphs], dtype=np.int64)
    node_offsets = np.concatenate([[0], np.cumsum(ns)])
    edge_offsets = np.concatenate([[0], np.cumsum(ms)])
    edges = np.concatenate(
        [g.edges + node_offsets[k] for k, g in enumerate(graphs)] + [np.zeros((0, 2), np.int64)]
    )
    edge_feats = np.concatenate(
        [g.edge_feats.reshape(g.skeleton.m, c) for g in graphs] + [np.zeros((0, c))]
    )
    return GraphBatch(
        node_feats=np.concatenate([g.node_feats for g in graphs]),
        edges=edges.astype(np.int64),
        edge_feats=edge_feats,
        graph_indicator=np.repeat(np.arange(len(graphs)), ns),
        edge_graph=np.repeat(np.arange(len(graphs)), ms),
        node_offsets=node_offsets,
        edge_offsets=edge_offsets,
    )


def unbatch(b: GraphBatch) -> list[AnnotatedGraph]:
    out = []
    for g, s in enumerate(b.skeletons()):
        a, z = b.node_offsets[g], b.node_offsets[g + 1]
        ea, ez = b.edge_offsets[g], b.edge_offsets[g + 1]
        out.append(AnnotatedGraph(s, b.node_feats[a:z], b.edge_feats[ea:ez]))
    return out


# --- JSON interchange ---------------------------------------------------------------


def to_dict(g: AnnotatedGraph) -> dict:
    return {
        "n": g.n,
        "edges": g.edges.tolist(),
        "node_feats": g.node_feats.tolist(),
        "edge_feats": g.edge_feats.tolist(),
    }


def from_dict(doc) -> AnnotatedGraph:
    if not isinstance(doc, dict):
        raise GraphError("document: expected a JSON object")
    for key in ("n", "edges", "node_feats", "edge_feats"):
        if key not in doc:
            raise GraphError(f"{key}: missing field")
    n = doc["n"]
    if not isinstance(n, int) or isinstance(n, bool):
        raise GraphError(f"n: expected an integer, got {n!r}")
    if not isinstance(doc["edges"], list):
        raise GraphError("edges: expected a list of pairs")
    for pair in doc["edges"]:
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(x, int) for x in pair)):
            raise GraphError(f"edges: malformed pair {pair!r}")
    s = Skeleton(n, doc["edges"])
    try:
        v = np.array(doc["node_feats"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise GraphError(f"node_feats: {exc}") from None
    try:
        e = np.array(doc["edge_feats"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise GraphError(f"edge_feats: {exc}") from None
    if v.ndim == 1 and v.size == 0:
        v = v.reshape(n, 0)
    if e.ndim == 1 and e.size == 0:
        e = e.reshape(0, 0)
    return AnnotatedGraph(s, v, e)


def write_json(g: AnnotatedGraph) -> str:
    # repr-precision floats: json uses repr, which round-trips exactly
    return json.dumps(to_dict(g), separators=(",", ":"))


def read_json(text: str) -> AnnotatedGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"document: invalid JSON ({exc})") from None
    return from_dict(doc)


def write_ndjson(graphs: Iterable[AnnotatedGraph], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(write_json(g) + "\n")


def iter_ndjson(path) -> Iterator[AnnotatedGraph]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield read_json(line)
            except GraphError as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from None


def read_ndjson(path) -> list[AnnotatedGraph]:
    return list(iter_ndjson(path))


def strip_features(g: AnnotatedGraph) -> Skeleton:
    return g.skeleton


def edge_width(graphs: Iterable[AnnotatedGraph]) -> int:
    """Edge feature width of a collection; edgeless graphs carry no information."""
    widths = {g.edge_dim for g in graphs if g.skeleton.m}
    if len(widths) > 1:
        raise GraphError(f"edge_feats: inconsistent widths {sorted(widths)}")
    return widths.pop() if widths else 0
