"""Dataset ingestion (SMILES corpora, TUDataset text files, graph JSON),
feature rescaling, splits, skeleton sampling and the on-disk dataset cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import (AnnotatedGraph, GraphError, Skeleton, edge_width, iter_ndjson, strip_features,
                    write_ndjson)
from .metrics import ValenceModel, canonical_hash, is_valid
from .mpnn import CATEGORICAL, CONTINUOUS, FeatureSpec
from .smiles import PRESETS, MolSpec, SmilesError, parse_smiles, read_smiles_file
from .structure import DEFAULT_CYCLE_LENGTHS, StructScaler, raw_features

log = logging.getLogger(__name__)

FORMATS = ("smiles", "tudataset", "json")


class DatasetError(ValueError):
    pass


@dataclass
class DatasetConfig:
    format: str = "smiles"
    path: str = ""
    mol_spec: str = "qm9"
    node_kind: str = CATEGORICAL
    edge_kind: str = CATEGORICAL
    rescale_range: tuple = (-1.0, 1.0)
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    limit: int | None = None
    tu_prefix: str | None = None
    cycle_lengths: tuple = DEFAULT_CYCLE_LENGTHS

    def __post_init__(self):
        if self.format not in FORMATS:
            raise DatasetError(f"format must be one of {FORMATS}, got {self.format!r}")
        for kind in (self.node_kind, self.edge_kind):
            if kind not in (CATEGORICAL, CONTINUOUS):
                raise DatasetError(f"feature kind must be categorical or continuous, got {kind!r}")
        self.rescale_range = tuple(float(x) for x in self.rescale_range)
        self.split = tuple(float(x) for x in self.split)
        self.cycle_lengths = tuple(int(k) for k in self.cycle_lengths)
        if len(self.rescale_range) != 2 or not self.rescale_range[0] < self.rescale_range[1]:
            raise DatasetError(f"rescale range must be (lo, hi) with lo < hi, got {self.rescale_range}")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1) > 1e-9:
            raise DatasetError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if self.limit is not None and self.limit < 1:
            raise DatasetError("limit must be positive")

    def molspec(self) -> MolSpec | None:
        if self.format != "smiles":
            return None
        if self.mol_spec not in PRESETS:
            raise DatasetError(f"unknown molecule vocabulary {self.mol_spec!r}; choose from {sorted(PRESETS)}")
        return PRESETS[self.mol_spec]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("rescale_range", "split", "cycle_lengths"):
            d[k] = list(d[k])
        return d


# --- rescaling ----------------------------------------------------------------------------


@dataclass
class Rescaler:
    """Column-wise affine map from ``[min, max]`` onto ``[lo, hi]``.

    Constant columns map to the midpoint and invert back to their value.
    """

    min: np.ndarray
    max: np.ndarray
    lo: float = -1.0
    hi: float = 1.0

    @classmethod
    def fit(cls, values: np.ndarray, lo=-1.0, hi=1.0) -> "Rescaler":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            return cls(np.zeros(values.shape[1]), np.zeros(values.shape[1]), lo, hi)
        return cls(values.min(axis=0), values.max(axis=0), lo, hi)

    def _span(self):
        span = self.max - self.min
        return np.where(span > 0, span, 1.0), span > 0

    def transform(self, x: np.ndarray) -> np.ndarray:
        span, live = self._span()
        unit = np.where(live, (x - self.min) / span, 0.5)
        return self.lo + unit * (self.hi - self.lo)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        span, _ = self._span()
        unit = (np.asarray(y, float) - self.lo) / (self.hi - self.lo)
        return self.min + unit * np.where(self.max > self.min, span, 0.0)

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist(), "range": [self.lo, self.hi]}

    @classmethod
    def from_dict(cls, d: dict) -> "Rescaler":
        return cls(np.asarray(d["min"], float), np.asarray(d["max"], float), *map(float, d["range"]))


def _rescale_graphs(graphs, kind_node, kind_edge, lo, hi):
    scalers = {}
    c = edge_width(graphs)
    if kind_node == CONTINUOUS:
        scalers["node"] = Rescaler.fit(np.concatenate([g.node_feats for g in graphs]), lo, hi)
    if kind_edge == CONTINUOUS:
        scalers["edge"] = Rescaler.fit(
            np.concatenate([g.edge_feats.reshape(-1, c) for g in graphs]), lo, hi)
    if not scalers:
        return graphs, scalers
    out = []
    for g in graphs:
        v = scalers["node"].transform(g.node_feats) if "node" in scalers else g.node_feats
        e = scalers["edge"].transform(g.edge_feats) if "edge" in scalers and g.skeleton.m else g.edge_feats
        out.append(AnnotatedGraph(g.skeleton, v, e if g.skeleton.m else np.zeros((0, c))))
    return out, scalers


# --- loaders -----------------------------------------------------------------------------------


def load_smiles_corpus(path, spec: MolSpec) -> tuple[list[AnnotatedGraph], dict]:
    """Parse every line; drop molecules whose heavy-atom graph fails the
    valence check and report how many were dropped.  Syntax errors are
    fatal and name the offending line."""
    vm = ValenceModel.from_spec(spec)
    graphs, filtered, total = [], 0, 0
    try:
        for lineno, text in read_smiles_file(path):
            total += 1
            try:
                g = parse_smiles(text, spec)
            except (SmilesError, GraphError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if is_valid(g, vm):
                graphs.append(g)
            else:
                filtered += 1
    except UnicodeDecodeError as exc:
        raise DatasetError(f"{path}: not UTF-8 text ({exc})") from None
    if not graphs:
        raise DatasetError(f"{path}: no usable molecules")
    return graphs, {"lines": total, "loaded": len(graphs), "filtered_invalid": filtered}


def _read_rows(path: Path, width=None) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(x) for x in line.replace(",", " ").split()]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: not a numeric row: {line!r}") from None
            if width is not None and len(row) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            width = len(row)
            rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), width or 0)


def _tu_prefix(directory: Path, prefix: str | None) -> str:
    if prefix:
        return prefix
    hits = sorted(directory.glob("*_A.txt"))
    if len(hits) != 1:
        raise DatasetError(f"{directory}: expected exactly one *_A.txt file, found {len(hits)}")
    return hits[0].name[:-len("_A.txt")]


def load_tudataset(directory, cfg: DatasetConfig | None = None, rescale: bool = True):
    """Read a TUDataset directory into per-graph annotated graphs.

    Both listed orientations of an edge are merged (their attribute rows
    must agree).  Returns ``(graphs, scalers)`` where ``scalers`` holds the
    dataset-wide rescalers used (empty if ``rescale`` is false).
    """
    cfg = cfg or DatasetConfig(format="tudataset", node_kind=CONTINUOUS, edge_kind=CONTINUOUS)
    directory = Path(directory)
    prefix = _tu_prefix(directory, cfg.tu_prefix)
    f = {k: directory / f"{prefix}_{k}.txt" for k in ("A", "graph_indicator", "node_attributes", "edge_attributes")}
    for k in ("A", "graph_indicator", "node_attributes"):
        if not f[k].exists():
            raise DatasetError(f"missing TUDataset file {f[k]}")
    A = _read_rows(f["A"], 2).astype(np.int64) - 1
    gi = _read_rows(f["graph_indicator"], 1)[:, 0].astype(np.int64)
    V = _read_rows(f["node_attributes"])
    E = _read_rows(f["edge_attributes"]) if f["edge_attributes"].exists() else np.zeros((len(A), 0))
    if len(V) != len(gi):
        raise DatasetError(f"{prefix}: {len(gi)} graph-indicator lines but {len(V)} node-attribute lines")
    if len(E) != len(A):
        raise DatasetError(f"{prefix}: {len(A)} adjacency lines but {len(E)} edge-attribute lines")
    if len(A) and (A.min() < 0 or A.max() >= len(gi)):
        raise DatasetError(f"{prefix}: adjacency references a node outside 1..{len(gi)}")
    if len(gi) and np.any(np.diff(gi) < 0):
        raise DatasetError(f"{prefix}: graph indicator is not grouped by graph")
    graph_ids, starts, sizes = np.unique(gi, return_index=True, return_counts=True)
    local = {int(g): k for k, g in enumerate(graph_ids)}
    per_graph: list[dict] = [dict() for _ in graph_ids]
    for row, (i, j) in enumerate(A.tolist()):
        if gi[i] != gi[j]:
            raise DatasetError(f"{f['A']}:{row + 1}: edge ({i + 1}, {j + 1}) crosses graphs {gi[i]} and {gi[j]}")
        if i == j:
            raise DatasetError(f"{f['A']}:{row + 1}: self-loop on node {i + 1}")
        k = local[int(gi[i])]
        key = (min(i, j), max(i, j))
        prev = per_graph[k].get(key)
        if prev is None:
            per_graph[k][key] = row
        elif not np.array_equal(E[prev], E[row]):
            raise DatasetError(f"{f['A']}:{row + 1}: attributes of ({i + 1}, {j + 1}) differ from "
                               f"its other orientation on line {prev + 1}")
    graphs = []
    for k, (start, size) in enumerate(zip(starts.tolist(), sizes.tolist())):
        keys = sorted(per_graph[k])
        edges = np.asarray(keys, dtype=np.int64).reshape(-1, 2) - start
        rows = [per_graph[k][key] for key in keys]
        graphs.append(AnnotatedGraph(Skeleton(size, edges), V[start:start + size],
                                     E[rows].reshape(len(rows), E.shape[1])))
    scalers = {}
    if rescale and graphs:
        graphs, scalers = _rescale_graphs(graphs, cfg.node_kind, cfg.edge_kind, *cfg.rescale_range)
    return graphs, scalers


def load_json_graphs(path, cfg: DatasetConfig):
    try:
        graphs = list(iter_ndjson(path))
    except GraphError as exc:
        raise DatasetError(str(exc)) from None
    if not graphs:
        raise DatasetError(f"{path}: no graphs")
    dims = {g.node_dim for g in graphs}
    if len(dims) != 1:
        raise DatasetError(f"{path}: inconsistent node feature widths {sorted(dims)}")
    try:
        edge_width(graphs)
    except GraphError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    return _rescale_graphs(graphs, cfg.node_kind, cfg.edge_kind, *cfg.rescale_range)


# --- sampling and splits ----------------------------------------------------------------------------


def sample_skeletons(ds: Sequence, k: int, seed) -> list[Skeleton]:
    """``k`` skeletons drawn uniformly with replacement, features stripped."""
    if k < 1:
        raise DatasetError("k must be at least 1")
    if len(ds) == 0:
        raise DatasetError("cannot sample skeletons from an empty dataset")
    idx = np.random.default_rng(seed).integers(0, len(ds), size=k)
    out = []
    for i in idx.tolist():
        item = ds[i]
        out.append(item if isinstance(item, Skeleton) else strip_features(item))
    return out


def split_indices(n: int, fractions, seed) -> dict[str, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


# --- prepared dataset -----------------------------------------------------------------------------------

GRAPHS_FILE = "graphs.ndjson"
META_FILE = "meta.json"
STRUCT_FILE = "struct_feats.npy"
STRUCT_OFFSETS_FILE = "struct_offsets.npy"
HASHES_FILE = "train_hashes.txt"


@dataclass
class Dataset:
    graphs: list
    feats: FeatureSpec
    splits: dict
    config: DatasetConfig
    scalers: dict = field(default_factory=dict)
    mol_spec: MolSpec | None = None
    counts: dict = field(default_factory=dict)
    struct_scaler: StructScaler | None = None
    struct_raw: list | None = None

    def split(self, name: str) -> list[AnnotatedGraph]:
        return [self.graphs[i] for i in self.splits[name]]

    def struct_for(self, idx) -> list[np.ndarray]:
        """Standardized struct features for the graphs at ``idx``."""
        sc = self.struct_scaler
        return [(self.struct_raw[i] - sc.mean) / sc.std for i in idx]

    def inverse_rescale(self, g: AnnotatedGraph) -> AnnotatedGraph:
        v, e = g.node_feats, g.edge_feats
        if "node" in self.scalers:
            v = self.scalers["node"].inverse(v)
        if "edge" in self.scalers and g.skeleton.m:
            e = self.scalers["edge"].inverse(e)
        return AnnotatedGraph(g.skeleton, v, e)


def build_dataset(cfg: DatasetConfig) -> Dataset:
    spec = cfg.molspec()
    if not cfg.path or not os.path.exists(cfg.path):
        raise DatasetError(f"dataset path not found: {cfg.path!r}")
    if cfg.format == "smiles":
        graphs, counts = load_smiles_corpus(cfg.path, spec)
        scalers = {}
        feats = FeatureSpec(spec.node_dim, spec.edge_dim, CATEGORICAL, CATEGORICAL)
    else:
        loader = load_tudataset if cfg.format == "tudataset" else load_json_graphs
        graphs, scalers = loader(cfg.path, cfg)
        if not graphs:
            raise DatasetError(f"{cfg.path}: no graphs")
        counts = {"loaded": len(graphs), "filtered_invalid": 0}
        feats = FeatureSpec(graphs[0].node_dim, edge_width(graphs), cfg.node_kind, cfg.edge_kind)
    if cfg.limit is not None and cfg.limit < len(graphs):
        keep = np.sort(np.random.default_rng(cfg.seed).choice(len(graphs), cfg.limit, replace=False))
        graphs = [graphs[i] for i in keep]
        counts["subset"] = len(graphs)
    splits = split_indices(len(graphs), cfg.split, cfg.seed)
    counts.update({f"split_{k}": int(len(v)) for k, v in splits.items()})
    raw = [raw_features(g.skeleton, cfg.cycle_lengths) for g in graphs]
    train_raw = [raw[i] for i in splits["train"]] or raw
    feats_all = np.concatenate(train_raw)
    std = feats_all.std(axis=0)
    std[std == 0] = 1.0
    sc = StructScaler(feats_all.mean(axis=0), std, cfg.cycle_lengths)
    return Dataset(graphs, feats, splits, cfg, scalers, spec, counts, sc, raw)


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_cache(ds: Dataset, cache_dir) -> dict:
    """Write graphs, structural features, training-set hashes and metadata.

    Every file is a deterministic function of the dataset, so re-running
    preparation on unchanged inputs yields byte-identical caches.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    write_ndjson(ds.graphs, cache_dir / GRAPHS_FILE)
    offsets = np.cumsum([0] + [len(r) for r in ds.struct_raw]).astype(np.int64)
    np.save(cache_dir / STRUCT_FILE, np.concatenate(ds.struct_raw).astype("<f8"))
    np.save(cache_dir / STRUCT_OFFSETS_FILE, offsets.astype("<i8"))
    hashes = sorted({canonical_hash(ds.graphs[i]) for i in ds.splits["train"]})
    (cache_dir / HASHES_FILE).write_text("".join(h + "\n" for h in hashes))
    meta = {
        "config": ds.config.to_dict(),
        "features": asdict(ds.feats),
        "mol_spec": ds.mol_spec.to_dict() if ds.mol_spec else None,
        "rescale": {k: v.to_dict() for k, v in ds.scalers.items()},
        "splits": {k: v.tolist() for k, v in ds.splits.items()},
        "seed": ds.config.seed,
        "counts": ds.counts,
        "struct_scaler": ds.struct_scaler.to_dict(),
        "digests": {name: _digest_file(cache_dir / name)
                    for name in (GRAPHS_FILE, STRUCT_FILE, STRUCT_OFFSETS_FILE, HASHES_FILE)},
    }
    (cache_dir / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def read_cache(cache_dir) -> Dataset:
    cache_dir = Path(cache_dir)
    meta_path = cache_dir / META_FILE
    if not meta_path.exists():
        raise DatasetError(f"{cache_dir}: no prepared dataset (run `prepare` first)")
    meta = json.loads(meta_path.read_text())
    try:
        graphs = list(iter_ndjson(cache_dir / GRAPHS_FILE))
    except GraphError as exc:
        raise DatasetError(str(exc)) from None
    flat = np.load(cache_dir / STRUCT_FILE)
    offsets = np.load(cache_dir / STRUCT_OFFSETS_FILE)
    if len(offsets) != len(graphs) + 1:
        raise DatasetError(f"{cache_dir}: structural cache does not match the graph cache")
    raw = [flat[offsets[k]:offsets[k + 1]] for k in range(len(graphs))]
    cfg = DatasetConfig(**meta["config"])
    return Dataset(
        graphs=graphs,
        feats=FeatureSpec(**meta["features"]),
        splits={k: np.asarray(v, dtype=np.int64) for k, v in meta["splits"].items()},
        config=cfg,
        scalers={k: Rescaler.from_dict(v) for k, v in meta["rescale"].items()},
        mol_spec=MolSpec.from_dict(meta["mol_spec"]) if meta["mol_spec"] else None,
        counts=meta["counts"],
        struct_scaler=StructScaler.from_dict(meta["struct_scaler"]),
        struct_raw=raw,
    )


def read_training_hashes(cache_dir) -> set:
    path = Path(cache_dir) / HASHES_FILE
    return set(path.read_text().split()) if path.exists() else set()
