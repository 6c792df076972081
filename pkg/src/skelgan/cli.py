"""Command-line entry point: ``prepare | train | generate | evaluate``.

Everything lives under one run directory::

    run/
      config.json      merged configuration echoed by every command
      caches/          prepared dataset, structural features, metadata
      ckpts/<phase>/   step_*.npz, best.npz, latest.npz
      logs/            loss streams, validation estimates, lineage events
      reports/         generated graphs, evaluation reports, histograms

Exit codes: 0 ok, 1 usage, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .datasets import (DatasetConfig, DatasetError, build_dataset, read_cache, read_training_hashes,
                       sample_skeletons, write_cache)
from .graph import AnnotatedGraph, GraphError, Skeleton, from_dict, write_ndjson
from .metrics import (EvaluationError, ValenceModel, feature_jsds, fixed_skeleton_study,
                      score_samples, write_histograms)
from .mpnn import ModelConfig
from .smiles import write_smiles
from .wgan import (CheckpointMismatch, Pipeline, TrainConfig, TrainingDiverged, select_checkpoint,
                   train_phase)

log = logging.getLogger("skelgan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": DatasetConfig().to_dict(),
    "model": dict(ModelConfig().to_dict(), node_update="auto", skip_connections="auto"),
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k not in ("phase", "seed")},
    "eval": {"count": 1000, "bins": 200, "fixed_skeletons": 100, "fixed_samples": 1000,
             "reference_split": "train"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``section.key=value`` override; values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise UsageError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config section {p!r} in override {assignment!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(args) -> dict:
    run = Path(args.run_dir)
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    echo = run / "config.json"
    if echo.exists():
        cfg = deep_merge(cfg, json.loads(echo.read_text()))
    if args.config:
        try:
            cfg = deep_merge(cfg, json.loads(Path(args.config).read_text()))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        cfg["train"]["steps"] = args.steps
    for section in ("dataset", "model", "train", "eval"):
        unknown = set(cfg[section]) - set(DEFAULT_CONFIG[section])
        if unknown:
            raise UsageError(f"unknown {section} config keys: {sorted(unknown)}")
    return cfg


def echo_config(run: Path, cfg: dict) -> None:
    run.mkdir(parents=True, exist_ok=True)
    text = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    path = run / "config.json"
    if not path.exists() or path.read_text() != text:
        path.write_text(text)


def dataset_config(cfg: dict) -> DatasetConfig:
    try:
        return DatasetConfig(**cfg["dataset"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"dataset config: {exc}") from None


# node-update variant per molecule vocabulary when the config says "auto"
VARIANTS = {"qm9": ("sum_of_mlps", False), "zinc": ("concat", True)}


def model_config(cfg: dict) -> ModelConfig:
    m = dict(cfg["model"])
    ds = cfg["dataset"]
    update, skip = VARIANTS.get(ds.get("mol_spec") if ds.get("format") == "smiles" else None, ("concat", False))
    if m.get("node_update") == "auto":
        m["node_update"] = update
    if m.get("skip_connections") == "auto":
        m["skip_connections"] = skip
    try:
        return ModelConfig(**m)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"model config: {exc}") from None


def train_config(cfg: dict, phase: str) -> TrainConfig:
    try:
        return TrainConfig(phase=phase, seed=int(cfg["seed"]), **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from None


def _lineage(run: Path, phase: str, **event) -> None:
    event = dict(event, phase=phase, time=time.strftime("%Y-%m-%dT%H:%M:%S"))
    with open(run / "logs" / f"{phase}_lineage.ndjson", "a") as fh:
        fh.write(json.dumps(event, sort_keys=True) + "\n")


# --- commands ----------------------------------------------------------------------------------


def cmd_prepare(args, cfg, run: Path) -> int:
    ds = build_dataset(dataset_config(cfg))
    meta = write_cache(ds, run / "caches")
    print(json.dumps({"counts": meta["counts"], "digests": meta["digests"]}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg, run: Path) -> int:
    ds = read_cache(run / "caches")
    tcfg = train_config(cfg, args.phase)
    (run / "logs").mkdir(parents=True, exist_ok=True)
    _lineage(run, args.phase, event="start", fresh=bool(args.fresh), steps=tcfg.steps)
    try:
        tr = train_phase(ds, model_config(cfg), tcfg, run, resume=not args.fresh)
    except TrainingDiverged as exc:
        _lineage(run, args.phase, event="diverged", detail=str(exc))
        log.error("%s", exc)
        return EXIT_DIVERGED
    _lineage(run, args.phase, event="done", step=tr.step, best_val_w=tr.best if np.isfinite(tr.best) else None,
             rolled_back=tr.rolled_back)
    print(json.dumps({"phase": args.phase, "step": tr.step,
                      "checkpoint": str(select_checkpoint(run, args.phase, tcfg.selection))}))
    return EXIT_OK


def _load_pipeline(run: Path, cfg: dict) -> Pipeline:
    sel = cfg["train"].get("selection", "best")
    try:
        return Pipeline.from_checkpoints(select_checkpoint(run, "node", sel), select_checkpoint(run, "edge", sel))
    except FileNotFoundError as exc:
        raise DatasetError(f"{exc}; train both phases first") from None


def read_skeleton_file(path, node_dim: int, edge_dim: int) -> list[Skeleton]:
    """Skeletons from a JSON document (object or list) or newline-delimited JSON.

    Entries need ``n`` and ``edges``; feature matrices, when present, must
    match the dataset's widths.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
        docs = doc if isinstance(doc, list) else [doc]
    except json.JSONDecodeError:
        docs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if line.strip():
                try:
                    docs.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    out = []
    for k, d in enumerate(docs):
        if not isinstance(d, dict) or "n" not in d or "edges" not in d:
            raise DatasetError(f"{path}: entry {k} needs 'n' and 'edges'")
        if "node_feats" in d or "edge_feats" in d:
            g = from_dict(d)
            if g.node_dim != node_dim or (g.skeleton.m and g.edge_dim != edge_dim):
                raise DatasetError(f"{path}: entry {k} has feature widths ({g.node_dim}, {g.edge_dim}); "
                                   f"the model expects ({node_dim}, {edge_dim})")
            out.append(g.skeleton)
        else:
            out.append(Skeleton(int(d["n"]), np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2)))
    if not out:
        raise DatasetError(f"{path}: no skeletons")
    return out


def cmd_generate(args, cfg, run: Path) -> int:
    ds = read_cache(run / "caches")
    pipe = _load_pipeline(run, cfg)
    count = args.count if args.count is not None else int(cfg["eval"]["count"])
    if count < 1:
        raise UsageError("--count must be positive")
    seed = int(cfg["seed"])
    if args.skeletons in (None, "sample"):
        skeletons = sample_skeletons(ds.split(cfg["eval"]["reference_split"]), count, seed)
    else:
        user = read_skeleton_file(args.skeletons, ds.feats.node_dim, ds.feats.edge_dim)
        skeletons = [user[k % len(user)] for k in range(count)]
    graphs = pipe.generate(skeletons, seed)
    out = Path(args.out) if args.out else run / "reports" / "generated.ndjson"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ndjson(graphs, out)
    summary = {"generated": len(graphs), "path": str(out)}
    if ds.mol_spec is not None:
        from .metrics import is_valid

        vm = ValenceModel.from_spec(ds.mol_spec)
        smi = out.with_suffix(".smi")
        valid = [write_smiles(g, ds.mol_spec) for g in graphs if is_valid(g, vm)]
        smi.write_text("".join(s + "\n" for s in valid))
        summary.update(valid=len(valid), smiles=str(smi))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _read_graphs(path) -> list[AnnotatedGraph]:
    from .graph import iter_ndjson

    try:
        return list(iter_ndjson(path))
    except FileNotFoundError:
        raise DatasetError(f"file not found: {path}") from None
    except GraphError as exc:
        raise DatasetError(str(exc)) from None


def cmd_evaluate(args, cfg, run: Path) -> int:
    ds = read_cache(run / "caches")
    ev = cfg["eval"]
    reports = run / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    vm = ValenceModel.from_spec(ds.mol_spec) if ds.mol_spec is not None else None
    if args.fixed_skeleton_study:
        if vm is None:
            raise UsageError("the fixed-skeleton study needs a molecular dataset")
        pipe = _load_pipeline(run, cfg)
        skeletons = sample_skeletons(ds.split(ev["reference_split"]), int(ev["fixed_skeletons"]), seed)
        res = fixed_skeleton_study(pipe.generate, skeletons, int(ev["fixed_samples"]), vm, seed)
        (reports / "fixed_skeleton.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
        print(json.dumps({k: v for k, v in res.to_dict().items() if k != "per_skeleton"}, sort_keys=True))
        return EXIT_OK
    gen_path = Path(args.generated) if args.generated else reports / "generated.ndjson"
    generated = _read_graphs(gen_path)
    if args.reference in (None, "train", "val", "test"):
        split = args.reference or ev["reference_split"]
        reference = [ds.inverse_rescale(g) for g in ds.split(split)]
    else:
        reference = _read_graphs(args.reference)
    for name, graphs in (("generated", generated), ("reference", reference)):
        widths = {(g.node_dim, g.edge_dim) for g in graphs if g.skeleton.m}
        if widths - {(ds.feats.node_dim, ds.feats.edge_dim)}:
            raise DatasetError(f"{name} graphs have feature widths {sorted(widths)}; "
                               f"the dataset vocabulary is ({ds.feats.node_dim}, {ds.feats.edge_dim})")
    report = score_samples(generated, read_training_hashes(run / "caches"), vm)
    report.jsd = feature_jsds(generated, reference, ds.feats.node_kind, ds.feats.edge_kind, int(ev["bins"]))
    report.extra = {"generated": str(gen_path), "reference": args.reference or ev["reference_split"]}
    (reports / "eval.json").write_text(report.to_json() + "\n")
    report.write_csv(reports / "eval.csv")
    write_histograms(reports / "histograms.csv", generated, reference, ds.feats.node_kind,
                     ds.feats.edge_kind, int(ev["bins"]))
    print(report.to_json())
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "generate": cmd_generate, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config merged over the run directory's config.json")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--run-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.steps=200 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="skelgan", description="Skeleton-conditioned graph annotation with two conditional WGANs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="build dataset and structural-feature caches")
    t = sub.add_parser("train", parents=[common], help="train one annotation phase")
    t.add_argument("--phase", choices=("node", "edge"), required=True)
    t.add_argument("--steps", type=int, help="total generator steps (overrides train.steps)")
    t.add_argument("--fresh", action="store_true", help="discard existing checkpoints instead of resuming")
    g = sub.add_parser("generate", parents=[common], help="annotate sampled or user-provided skeletons")
    g.add_argument("--skeletons", default="sample", help="'sample' or a JSON/NDJSON file of skeletons")
    g.add_argument("--count", type=int)
    g.add_argument("--out", help="output path (default: reports/generated.ndjson)")
    e = sub.add_parser("evaluate", parents=[common], help="score generated graphs and export histograms")
    e.add_argument("--generated", help="generated NDJSON (default: reports/generated.ndjson)")
    e.add_argument("--reference", help="'train', 'val', 'test' or an NDJSON file")
    e.add_argument("--fixed-skeleton-study", action="store_true",
                   help="annotate each of eval.fixed_skeletons skeletons eval.fixed_samples times")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    run = Path(args.run_dir)
    try:
        cfg = load_config(args)
        run.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(run / ".lock"))
        try:
            lock.acquire(timeout=0)
        except Timeout:
            raise UsageError(f"{run} is locked by another command") from None
        try:
            echo_config(run, cfg)
            return COMMANDS[args.command](args, cfg, run)
        finally:
            lock.release()
    except UsageError as exc:
        print(f"skelgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, GraphError, EvaluationError, CheckpointMismatch, FileNotFoundError) as exc:
        print(f"skelgan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
