"""Evaluation: chemistry-free validity, canonical hashing, validity /
uniqueness / novelty scores, Jensen-Shannon distances and histogram export.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .graph import AnnotatedGraph, Skeleton
from .smiles import MolSpec, QM9, _bridges
from .structure import count_cycles, degrees

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


# --- validity --------------------------------------------------------------------------


@dataclass(frozen=True)
class ValenceModel:
    max_valence: dict
    bond_orders: dict
    atom_vocab: tuple
    bond_vocab: tuple

    @classmethod
    def from_spec(cls, spec: MolSpec) -> "ValenceModel":
        return cls(dict(zip(spec.atom_vocab, spec.max_valence)),
                   dict(zip(spec.bond_vocab, spec.bond_orders)),
                   tuple(spec.atom_vocab), tuple(spec.bond_vocab))


def _one_hot_index(feats: np.ndarray, what: str) -> np.ndarray:
    if len(feats) == 0:
        return np.zeros(0, dtype=np.int64)
    ok = ((feats == 0) | (feats == 1)).all(axis=1) & (feats.sum(axis=1) == 1)
    if not ok.all():
        raise EvaluationError(f"{what}: row {int(np.argmin(ok))} is not one-hot")
    return feats.argmax(axis=1)


def is_connected(s: Skeleton) -> bool:
    if s.n <= 1:
        return True
    adj = s.adjacency()
    seen = {0}
    stack = [0]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == s.n


def is_valid(g: AnnotatedGraph, vm: ValenceModel) -> bool:
    """Valence budget respected, aromatic bonds on cycles, and connected."""
    atoms = _one_hot_index(g.node_feats, "node_feats")
    bonds = _one_hot_index(g.edge_feats, "edge_feats") if g.skeleton.m else np.zeros(0, int)
    load = np.zeros(g.n)
    orders = np.array([vm.bond_orders[b] for b in vm.bond_vocab])
    if g.skeleton.m:
        np.add.at(load, g.edges[:, 0], orders[bonds])
        np.add.at(load, g.edges[:, 1], orders[bonds])
    caps = np.array([vm.max_valence[a] for a in vm.atom_vocab])[atoms]
    if (load > caps + 1e-9).any():
        return False
    if "aromatic" in vm.bond_vocab:
        arom = [k for k in range(g.skeleton.m) if bonds[k] == vm.bond_vocab.index("aromatic")]
        if arom:
            bridges = _bridges(g.n, [tuple(e) for e in g.edges.tolist()])
            if any(k in bridges for k in arom):
                return False
    return is_connected(g.skeleton)


# --- canonical hashing ---------------------------------------------------------------------


def _digest(text: str) -> str:
    return hashlib.blake2b(text.encode(), digest_size=16).hexdigest()


def _quantize(row: np.ndarray) -> str:
    q = np.round(row, 6) + 0.0  # folds -0.0 into 0.0
    return ",".join(f"{x:.6f}" for x in q)


def canonical_hash(g: AnnotatedGraph, cycle_lengths=(3, 4, 5, 6)) -> str:
    """Order-independent digest via colour refinement.

    Initial colours combine quantized node features with degree and
    per-node cycle counts; each round folds in the multiset of
    ``(edge features, neighbour colour)``.  Rounds stop once the colour
    partition no longer splits (at most ``n`` rounds).
    """
    n = g.n
    lengths = [k for k in cycle_lengths if k <= max(n, 3)]
    cyc = count_cycles(g.skeleton, lengths) if lengths else np.zeros((n, 0), int)
    deg = degrees(g.skeleton)
    colour = [_digest(f"{_quantize(g.node_feats[i])}|{deg[i]}|{cyc[i].tolist()}") for i in range(n)]
    nbrs: list[list[tuple[int, str]]] = [[] for _ in range(n)]
    for k, (i, j) in enumerate(g.edges.tolist()):
        lab = _quantize(g.edge_feats[k])
        nbrs[i].append((j, lab))
        nbrs[j].append((i, lab))
    classes = len(set(colour))
    for _ in range(n):
        colour_next = [
            _digest(colour[i] + "|" + ";".join(sorted(f"{lab}/{colour[j]}" for j, lab in nbrs[i])))
            for i in range(n)
        ]
        new_classes = len(set(colour_next))
        colour = colour_next
        if new_classes == classes:
            break
        classes = new_classes
    edge_terms = sorted(
        "/".join(sorted((colour[i], colour[j]))) + "/" + _quantize(g.edge_feats[k])
        for k, (i, j) in enumerate(g.edges.tolist())
    )
    return _digest(f"{n}|{g.skeleton.m}|{';'.join(sorted(colour))}|{';'.join(edge_terms)}")


# --- scoring --------------------------------------------------------------------------------


@dataclass
class EvalReport:
    validity: float
    uniqueness: float
    novelty: float
    overall: float
    n_samples: int
    n_valid: int
    n_unique: int
    n_novel: int
    degenerate: bool = False
    jsd: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for key in ("validity", "uniqueness", "novelty", "overall",
                        "n_samples", "n_valid", "n_unique", "n_novel"):
                w.writerow([key, getattr(self, key)])
            for name, val in sorted(self.jsd.items()):
                w.writerow([f"jsd/{name}", val])


def score_samples(generated: Sequence[AnnotatedGraph], training_hashes: set,
                  vm: ValenceModel | None) -> EvalReport:
    """Validity over all samples, uniqueness over valid ones, novelty over
    valid-and-unique ones; overall is their product.  ``vm=None`` treats
    every sample as valid (non-molecular data)."""
    if not generated:
        raise EvaluationError("score_samples: no samples")
    valid = [g for g in generated if vm is None or is_valid(g, vm)]
    hashes = {canonical_hash(g) for g in valid}
    novel = hashes - set(training_hashes)
    n = len(generated)
    v = len(valid) / n
    u = len(hashes) / len(valid) if valid else 0.0
    nov = len(novel) / len(hashes) if hashes else 0.0
    return EvalReport(
        validity=100 * v, uniqueness=100 * u, novelty=100 * nov, overall=100 * v * u * nov,
        n_samples=n, n_valid=len(valid), n_unique=len(hashes), n_novel=len(novel),
        degenerate=not valid,
    )


# --- distribution distances ----------------------------------------------------------------------


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Base-2 Jensen-Shannon divergence of two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    total = 0.0
    for a in (p, q):
        nz = a > 0
        total += 0.5 * float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))
    return min(max(total, 0.0), 1.0)


def histogram(sample: np.ndarray, edges: np.ndarray) -> np.ndarray:
    counts, _ = np.histogram(sample, bins=edges)
    return counts


def bin_edges(a: np.ndarray, b: np.ndarray, bins: int) -> np.ndarray:
    both = np.concatenate([a, b])
    lo, hi = float(both.min()), float(both.max())
    if hi == lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, bins + 1)


def jsd_from_counts(ca: np.ndarray, cb: np.ndarray) -> float:
    ca = np.asarray(ca, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64)
    if ca.sum() == 0 or cb.sum() == 0:
        raise EvaluationError("jsd: empty sample")
    p, q = ca / ca.sum(), cb / cb.sum()
    if np.array_equal(p, q):
        return 0.0
    if not ((p > 0) & (q > 0)).any():
        return 1.0
    return math.sqrt(js_divergence(p, q))


def jsd(sample_a, sample_b, bins: int = 200, categories: int | None = None) -> float:
    """Jensen-Shannon distance (square root of the base-2 divergence).

    Pass ``categories`` for categorical samples (integer codes); otherwise
    both samples share ``bins`` equal-width bins over their joint range.
    """
    a = np.asarray(sample_a)
    b = np.asarray(sample_b)
    if a.size == 0 or b.size == 0:
        raise EvaluationError("jsd: empty sample")
    if categories is not None:
        ca = np.bincount(a.astype(np.int64), minlength=categories)
        cb = np.bincount(b.astype(np.int64), minlength=categories)
    else:
        edges = bin_edges(a.astype(float), b.astype(float), bins)
        ca, cb = histogram(a, edges), histogram(b, edges)
    return jsd_from_counts(ca, cb)


def connected_distance_distribution(graphs: Iterable[AnnotatedGraph], kind: str = "continuous") -> np.ndarray:
    """Euclidean distance between the first two node features across every edge."""
    if kind != "continuous":
        raise EvaluationError("connected-node distances need continuous node features")
    out = []
    for g in graphs:
        if g.node_dim < 2:
            raise EvaluationError("connected-node distances need at least two node features")
        if g.skeleton.m:
            xy = g.node_feats[:, :2]
            out.append(np.linalg.norm(xy[g.edges[:, 0]] - xy[g.edges[:, 1]], axis=1))
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class FeatureSample:
    name: str
    values: np.ndarray
    categories: int | None = None


def feature_samples(graphs: Sequence[AnnotatedGraph], node_kind: str, edge_kind: str,
                    node_names=None, edge_names=None) -> list[FeatureSample]:
    """Per-feature marginal samples used for JSD and histogram export."""
    graphs = list(graphs)
    d = graphs[0].node_dim
    c = next((g.edge_dim for g in graphs if g.skeleton.m), 0)
    V = np.concatenate([g.node_feats for g in graphs])
    E = np.concatenate([g.edge_feats.reshape(-1, c) for g in graphs if g.skeleton.m] + [np.zeros((0, c))])
    out = []
    if node_kind == "categorical":
        out.append(FeatureSample("node_type", _one_hot_index(V, "node_feats"), d))
    else:
        names = node_names or [f"v{k + 1}" for k in range(d)]
        out += [FeatureSample(names[k], V[:, k]) for k in range(d)]
        if d >= 2:
            out.append(FeatureSample("d", connected_distance_distribution(graphs)))
    if c:
        if edge_kind == "categorical":
            out.append(FeatureSample("edge_type", _one_hot_index(E, "edge_feats"), c))
        else:
            names = edge_names or [f"e{k + 1}" for k in range(c)]
            out += [FeatureSample(names[k], E[:, k]) for k in range(c)]
    return out


def feature_jsds(generated, reference, node_kind, edge_kind, bins: int = 200) -> dict:
    gen = feature_samples(generated, node_kind, edge_kind)
    ref = {f.name: f for f in feature_samples(reference, node_kind, edge_kind)}
    out = {}
    for f in gen:
        r = ref[f.name]
        if f.values.size and r.values.size:
            out[f.name] = jsd(f.values, r.values, bins, f.categories)
    return out


def write_histograms(path, generated, reference, node_kind, edge_kind, bins: int = 200) -> None:
    """One CSV row per (feature, bin): bin bounds plus probability mass per source."""
    gen = feature_samples(generated, node_kind, edge_kind)
    ref = {f.name: f for f in feature_samples(reference, node_kind, edge_kind)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "bin", "lower", "upper", "generated", "reference"])
        for f in gen:
            r = ref[f.name]
            if not (f.values.size and r.values.size):
                continue
            if f.categories is not None:
                edges = np.arange(f.categories + 1) - 0.5
            else:
                edges = bin_edges(f.values.astype(float), r.values.astype(float), bins)
            ca, cb = histogram(f.values, edges), histogram(r.values, edges)
            pa, pb = ca / max(ca.sum(), 1), cb / max(cb.sum(), 1)
            for k in range(len(edges) - 1):
                w.writerow([f.name, k, repr(float(edges[k])), repr(float(edges[k + 1])),
                            repr(float(pa[k])), repr(float(pb[k]))])


def total_variation(p, q) -> float:
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


# --- fixed-skeleton study ---------------------------------------------------------------------------


@dataclass
class FixedSkeletonResult:
    per_skeleton: list
    validity: float
    uniqueness: float
    valid_unique_per_mille: float
    skeletons_share_conditioning: bool

    def to_dict(self) -> dict:
        return asdict(self)


def fixed_skeleton_study(generate_fn, skeletons: Sequence[Skeleton], n_samples: int,
                         vm: ValenceModel, seed: int = 0) -> FixedSkeletonResult:
    """Generate ``n_samples`` annotations per skeleton and score each group.

    ``generate_fn(skeletons, seed)`` must return one graph per skeleton.
    """
    rows = []
    shared = True
    for k, s in enumerate(skeletons):
        graphs = generate_fn([s] * n_samples, seed + k)
        shared &= all(g.skeleton == s for g in graphs)
        valid = [g for g in graphs if is_valid(g, vm)]
        uniq = {canonical_hash(g) for g in valid}
        rows.append({
            "skeleton": k,
            "n": s.n,
            "validity": 100 * len(valid) / n_samples,
            "uniqueness": 100 * len(uniq) / len(valid) if valid else 0.0,
            "valid_unique_per_mille": 1000 * len(uniq) / n_samples,
        })
    with_valid = [r for r in rows if r["validity"] > 0]
    return FixedSkeletonResult(
        per_skeleton=rows,
        validity=float(np.mean([r["validity"] for r in rows])),
        uniqueness=float(np.mean([r["uniqueness"] for r in with_valid])) if with_valid else 0.0,
        valid_unique_per_mille=float(np.mean([r["valid_unique_per_mille"] for r in rows])),
        skeletons_share_conditioning=bool(shared),
    )
