"""Conditional Wasserstein GAN training for the two annotation phases and
the two-phase generation pipeline.

The node phase learns ``p(V | S)``; the edge phase learns ``p(E | S, V)``
with real node features as conditioning during training (teacher forcing)
and generated ones at inference.  The phases share nothing and can be
trained in either order or concurrently.
"""

from __future__ import annotations

import copy
import csv
import glob
import logging
import math
import re
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datasets import Dataset
from .graph import AnnotatedGraph, Skeleton, edge_width
from .mpnn import FeatureSpec, ModelConfig, Topology, build_networks
from .nn import (NonFiniteError, NoiseSpec, Optimizer, load_modules, read_checkpoint,
                 save_checkpoint)
from .structure import StructScaler, raw_features

log = logging.getLogger(__name__)

PHASES = ("node", "edge")
LOSS_COLUMNS = ("step", "critic_loss", "gen_loss", "w_estimate")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    phase: str = "node"
    batch_size: int = 128
    n_critic: int = 5
    steps: int = 100_000
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    seed: int = 0
    ckpt_every: int = 1000
    val_every: int = 500
    val_batches: int = 4
    selection: str = "best"  # or "latest"
    warmup_fraction: float = 0.25
    tau_anneal: list | None = None  # [start, end]: linear Gumbel temperature schedule

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be 'node' or 'edge', got {self.phase!r}")
        if self.n_critic < 1:
            raise ValueError("n_critic must be at least 1")
        if self.batch_size < 1 or self.steps < 0 or self.ckpt_every < 1 or self.val_every < 1:
            raise ValueError("batch_size, ckpt_every and val_every must be positive; steps non-negative")
        if self.selection not in ("best", "latest"):
            raise ValueError(f"selection must be 'best' or 'latest', got {self.selection!r}")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.tau_anneal is not None:
            self.tau_anneal = [float(t) for t in self.tau_anneal]
            if len(self.tau_anneal) != 2 or min(self.tau_anneal) <= 0:
                raise ValueError("tau_anneal must be [start, end] with positive temperatures")
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossReport:
    step: int
    critic_loss: float
    gen_loss: float
    w_estimate: float

    def __post_init__(self):
        for name in ("critic_loss", "gen_loss", "w_estimate"):
            if not math.isfinite(getattr(self, name)):
                raise NonFiniteError(f"step {self.step}: non-finite {name}")

    def row(self) -> list:
        return [self.step, repr(self.critic_loss), repr(self.gen_loss), repr(self.w_estimate)]


# --- losses ---------------------------------------------------------------------------------


def critic_loss(real_scores, fake_scores):
    """Critic objective to minimize: mean fake score minus mean real score."""
    return fake_scores.mean() - real_scores.mean()


def generator_loss(fake_scores):
    return -fake_scores.mean()


def critic_loss_node(critic, topo: Topology, v_real, v_fake):
    return critic_loss(critic(topo, v_real), critic(topo, v_fake))


def generator_loss_node(critic, topo: Topology, v_fake):
    return generator_loss(critic(topo, v_fake))


def critic_loss_edge(critic, topo: Topology, v_real, e_real, e_fake):
    return critic_loss(critic(topo, v_real, e_real), critic(topo, v_real, e_fake))


def generator_loss_edge(critic, topo: Topology, v_real, e_fake):
    return generator_loss(critic(topo, v_real, e_fake))


# --- batching ----------------------------------------------------------------------------------


def doubled(topo: Topology) -> Topology:
    """The batch followed by a copy of itself, for one joint real+fake critic pass."""
    n, g = topo.num_nodes, topo.num_graphs
    cat = torch.cat
    return Topology(
        src=cat([topo.src, topo.src + n]), dst=cat([topo.dst, topo.dst + n]),
        coef=cat([topo.coef, topo.coef]), num_nodes=2 * n,
        node_graph=cat([topo.node_graph, topo.node_graph + g]),
        edge_graph=cat([topo.edge_graph, topo.edge_graph + g]),
        num_graphs=2 * g, struct=cat([topo.struct, topo.struct]),
    )


class BatchSource:
    """Pre-extracted arrays for fast collation of training batches."""

    def __init__(self, graphs: Sequence[AnnotatedGraph], struct: Sequence[np.ndarray], dtype=torch.float32):
        self.n = np.array([g.n for g in graphs], dtype=np.int64)
        self.edges = [g.edges for g in graphs]
        self.V = [g.node_feats for g in graphs]
        self.E = [g.edge_feats for g in graphs]
        self.S = list(struct)
        self.edge_dim = edge_width(graphs)
        self.dtype = dtype

    def __len__(self):
        return len(self.n)

    def collate(self, idx):
        ns = self.n[idx]
        offsets = np.concatenate([[0], np.cumsum(ns)])
        edges = np.concatenate([self.edges[i] + offsets[k] for k, i in enumerate(idx)]
                               + [np.zeros((0, 2), np.int64)])
        ms = np.array([len(self.edges[i]) for i in idx], dtype=np.int64)
        total = int(offsets[-1])
        deg = np.bincount(edges.ravel(), minlength=total).astype(np.float64)
        coef = 1.0 / np.sqrt(deg[edges[:, 0]] * deg[edges[:, 1]]) if len(edges) else np.zeros(0)
        dt = self.dtype
        topo = Topology(
            src=torch.from_numpy(edges[:, 0].copy()), dst=torch.from_numpy(edges[:, 1].copy()),
            coef=torch.as_tensor(coef, dtype=dt).unsqueeze(1), num_nodes=total,
            node_graph=torch.from_numpy(np.repeat(np.arange(len(idx)), ns)),
            edge_graph=torch.from_numpy(np.repeat(np.arange(len(idx)), ms)),
            num_graphs=len(idx),
            struct=torch.as_tensor(np.concatenate([self.S[i] for i in idx]), dtype=dt),
        )
        V = torch.as_tensor(np.concatenate([self.V[i] for i in idx]), dtype=dt)
        E = torch.as_tensor(np.concatenate([self.E[i].reshape(len(self.edges[i]), self.edge_dim) for i in idx]
                                           + [np.zeros((0, self.edge_dim))]), dtype=dt)
        return topo, V, E


def skeleton_topology(skeletons: Sequence[Skeleton], scaler: StructScaler, dtype=torch.float32) -> Topology:
    graphs = [AnnotatedGraph(s, np.zeros((s.n, 0)), np.zeros((s.m, 0))) for s in skeletons]
    struct = [(raw_features(s, scaler.lengths) - scaler.mean) / scaler.std for s in skeletons]
    return BatchSource(graphs, struct, dtype).collate(np.arange(len(skeletons)))[0]


# --- training --------------------------------------------------------------------------------------


def _phase_dir(run_dir, phase) -> Path:
    return Path(run_dir) / "ckpts" / phase


def step_checkpoints(run_dir, phase) -> list[tuple[int, Path]]:
    out = []
    for p in glob.glob(str(_phase_dir(run_dir, phase) / "step_*.npz")):
        m = re.search(r"step_(\d+)\.npz$", p)
        if m:
            out.append((int(m.group(1)), Path(p)))
    return sorted(out)


def dataset_signature(ds: Dataset) -> dict:
    return {
        "features": asdict(ds.feats),
        "struct_scaler": ds.struct_scaler.to_dict(),
        "rescale": {k: v.to_dict() for k, v in ds.scalers.items()},
        "mol_spec": ds.mol_spec.to_dict() if ds.mol_spec else None,
    }


class PhaseTrainer:
    """One phase's generator/critic pair, optimizers, RNG streams and logs."""

    def __init__(self, ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, run_dir,
                 dtype=torch.float32):
        self.ds, self.model_cfg, self.cfg = ds, model_cfg, cfg
        self.run_dir = Path(run_dir)
        self.phase = cfg.phase
        self.dtype = dtype
        torch.manual_seed(cfg.seed)
        self.gen, self.critic = build_networks(ds.feats, model_cfg, cfg.phase)
        self.gen.to(dtype)
        self.critic.to(dtype)
        self.opt_g = Optimizer(self.gen.parameters(), cfg.lr, cfg.betas)
        self.opt_c = Optimizer(self.critic.parameters(), cfg.lr, cfg.betas)
        self.noise = NoiseSpec(model_cfg.noise_dim)
        self.torch_rng = torch.Generator().manual_seed(cfg.seed)
        self.np_rng = np.random.default_rng(cfg.seed)
        train_idx = ds.splits["train"] if len(ds.splits["train"]) else np.arange(len(ds.graphs))
        self.train = BatchSource([ds.graphs[i] for i in train_idx], ds.struct_for(train_idx), dtype)
        val_idx = ds.splits["val"] if len(ds.splits["val"]) else train_idx
        self.val = BatchSource([ds.graphs[i] for i in val_idx], ds.struct_for(val_idx), dtype)
        self.step = 0
        self.best = math.inf
        self.rolled_back = False
        self.signature = dataset_signature(ds)

    # -- one step --

    def _fake(self, topo, V, gen_rng):
        z = torch.randn(topo.num_nodes if self.phase == "node" else topo.num_edges,
                        self.noise.dim, generator=gen_rng, dtype=self.dtype)
        if self.phase == "node":
            return self.gen(topo, z, generator=gen_rng)
        return self.gen(topo, V, z, generator=gen_rng)

    def _scores(self, topo, V, E, fake):
        """Joint critic pass; returns (real scores, fake scores)."""
        top2 = doubled(topo)
        if self.phase == "node":
            s = self.critic(top2, torch.cat([V, fake]))
        else:
            s = self.critic(top2, torch.cat([V, V]), torch.cat([E, fake]))
        g = topo.num_graphs
        return s[:g], s[g:]

    def _batch(self):
        idx = self.np_rng.integers(0, len(self.train), size=self.cfg.batch_size)
        return self.train.collate(idx)

    def tau_at(self, step: int) -> float:
        if self.cfg.tau_anneal is None:
            return self.model_cfg.tau
        start, end = self.cfg.tau_anneal
        frac = min(step / max(self.cfg.steps, 1), 1.0)
        return start + frac * (end - start)

    def train_step(self) -> LossReport:
        self.gen.head.tau = self.tau_at(self.step)
        self.gen.train()
        self.critic.train()
        for p in self.critic.parameters():
            p.requires_grad_(True)
        for _ in range(self.cfg.n_critic):
            topo, V, E = self._batch()
            with torch.no_grad():
                fake = self._fake(topo, V, self.torch_rng)
            real_s, fake_s = self._scores(topo, V, E, fake)
            loss_c = critic_loss(real_s, fake_s)
            if not torch.isfinite(loss_c):
                raise NonFiniteError(f"step {self.step + 1}: non-finite critic loss")
            self.opt_c.zero_grad()
            loss_c.backward()
            self.opt_c.step()
        for p in self.critic.parameters():
            p.requires_grad_(False)
        topo, V, E = self._batch()
        fake = self._fake(topo, V, self.torch_rng)
        args = (topo, fake) if self.phase == "node" else (topo, V, fake)
        loss_g = generator_loss(self.critic(*args))
        if not torch.isfinite(loss_g):
            raise NonFiniteError(f"step {self.step + 1}: non-finite generator loss")
        self.opt_g.zero_grad()
        loss_g.backward()
        self.opt_g.step()
        for p in self.critic.parameters():
            p.requires_grad_(True)
        self.step += 1
        lc = float(loss_c.detach())
        return LossReport(self.step, lc, float(loss_g.detach()), -lc)

    @torch.no_grad()
    def validation_w(self, gen=None) -> float:
        """Wasserstein estimate on fixed validation batches with fixed noise,
        for this trainer's generator or for ``gen`` scored by this critic."""
        own = self.gen
        if gen is not None:
            self.gen = gen
        self.gen.eval()
        self.critic.eval()
        rng_np = np.random.default_rng(self.cfg.seed + 1)
        rng_t = torch.Generator().manual_seed(self.cfg.seed + 1)
        total = 0.0
        for _ in range(self.cfg.val_batches):
            idx = rng_np.integers(0, len(self.val), size=min(self.cfg.batch_size, 4 * len(self.val)))
            topo, V, E = self.val.collate(idx)
            fake = self._fake(topo, V, rng_t)
            real_s, fake_s = self._scores(topo, V, E, fake)
            total += float(real_s.mean() - fake_s.mean())
        self.gen.train()
        self.critic.train()
        self.gen = own
        return total / self.cfg.val_batches

    def pick_best(self, candidates) -> tuple[int, Path, float]:
        """Score each candidate checkpoint's generator with the current critic
        and return the (step, path, estimate) with the lowest estimate.

        Estimates logged during training each use that step's critic, so they
        are not comparable across steps; a single critic makes them so.
        """
        gen = copy.deepcopy(self.gen)
        scored = []
        for step, path in candidates:
            _, arrays = read_checkpoint(path)
            load_modules(arrays, {"gen": gen})
            scored.append((self.validation_w(gen), step, path))
        w, step, path = min(scored, key=lambda t: (t[0], t[1]))
        return step, path, w

    # -- persistence --

    def header(self) -> dict:
        return {
            "phase": self.phase,
            "step": self.step,
            "model": self.model_cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "dataset": self.signature,
            "best": self.best if math.isfinite(self.best) else None,
            "rolled_back": self.rolled_back,
            "np_rng": self.np_rng.bit_generator.state,
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.header(), {"gen": self.gen, "critic": self.critic},
                        {"opt_g": self.opt_g, "opt_c": self.opt_c},
                        {"torch_rng": self.torch_rng.get_state().numpy()})

    def load(self, path) -> None:
        header, arrays = read_checkpoint(path)
        if header["phase"] != self.phase:
            raise CheckpointMismatch(f"{path}: checkpoint is for phase {header['phase']!r}")
        if header["dataset"] != self.signature:
            raise CheckpointMismatch(f"{path}: checkpoint was trained on a different dataset configuration")
        load_modules(arrays, {"gen": self.gen, "critic": self.critic},
                     {"opt_g": self.opt_g, "opt_c": self.opt_c})
        self.torch_rng.set_state(torch.from_numpy(arrays["extra/torch_rng"].copy()))
        self.np_rng.bit_generator.state = header["np_rng"]
        self.step = int(header["step"])
        self.best = math.inf if header["best"] is None else float(header["best"])
        self.rolled_back = bool(header["rolled_back"])


def _rewrite_csv(path: Path, header, keep_through: int) -> None:
    rows = []
    if path.exists():
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            rows = [r for r in reader if r and int(r[0]) <= keep_through]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_loss_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([[float(x) for x in r] for r in reader if r]).reshape(-1, len(LOSS_COLUMNS))


def train_phase(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, run_dir,
                resume: bool = True, stop_at: int | None = None, dtype=torch.float32) -> PhaseTrainer:
    """Train one phase, appending to ``logs/<phase>_loss.csv`` and writing
    ``ckpts/<phase>/step_*.npz`` every ``ckpt_every`` steps plus ``latest.npz``.
    When the run completes, ``best.npz`` is a copy of the step checkpoint
    after warmup whose generator has the lowest validation Wasserstein
    estimate under the final critic.

    A non-finite loss rolls back to the latest checkpoint with half the
    learning rate; a second one raises :class:`TrainingDiverged`.
    ``stop_at`` ends the run early (for interruption and resume tests).
    """
    run_dir = Path(run_dir)
    ck_dir = _phase_dir(run_dir, cfg.phase)
    ck_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    loss_path = run_dir / "logs" / f"{cfg.phase}_loss.csv"
    val_path = run_dir / "logs" / f"{cfg.phase}_val.csv"
    tr = PhaseTrainer(ds, model_cfg, cfg, run_dir, dtype)
    existing = step_checkpoints(run_dir, cfg.phase) if resume else []
    if existing:
        tr.load(existing[-1][1])
        log.info("%s phase: resuming from step %d", cfg.phase, tr.step)
    else:
        for _, p in step_checkpoints(run_dir, cfg.phase):
            p.unlink()
        for name in ("best.npz", "latest.npz"):
            if (ck_dir / name).exists():
                (ck_dir / name).unlink()
        tr.save(ck_dir / "step_0000000.npz")
    _rewrite_csv(loss_path, LOSS_COLUMNS, tr.step)
    _rewrite_csv(val_path, ("step", "val_w"), tr.step)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    warmup = int(math.ceil(cfg.warmup_fraction * cfg.steps))
    fh = open(loss_path, "a", newline="")
    vfh = open(val_path, "a", newline="")
    try:
        writer, vwriter = csv.writer(fh), csv.writer(vfh)
        while tr.step < end:
            try:
                report = tr.train_step()
            except NonFiniteError as exc:
                if tr.rolled_back:
                    raise TrainingDiverged(f"{cfg.phase} phase diverged again after rollback: {exc}") from None
                last = step_checkpoints(run_dir, cfg.phase)[-1]
                log.warning("%s; rolling back to step %d and halving the learning rate", exc, last[0])
                tr.load(last[1])
                tr.rolled_back = True
                tr.opt_g.lr *= 0.5
                tr.opt_c.lr *= 0.5
                fh.flush()
                vfh.flush()
                _rewrite_csv(loss_path, LOSS_COLUMNS, tr.step)
                _rewrite_csv(val_path, ("step", "val_w"), tr.step)
                continue
            writer.writerow(report.row())
            if tr.step % cfg.val_every == 0 or tr.step == cfg.steps:
                vwriter.writerow([tr.step, repr(tr.validation_w())])
            if tr.step % cfg.ckpt_every == 0 or tr.step == end:
                fh.flush()
                vfh.flush()
                tr.save(ck_dir / f"step_{tr.step:07d}.npz")
        tr.save(ck_dir / "latest.npz")
        if tr.step == cfg.steps:
            candidates = [(s, p) for s, p in step_checkpoints(run_dir, cfg.phase) if s >= warmup]
            step, path, tr.best = tr.pick_best(candidates)
            shutil.copyfile(path, ck_dir / "best.npz")
            log.info("%s phase: best checkpoint is step %d (validation estimate %.4g)", cfg.phase, step, tr.best)
    finally:
        fh.close()
        vfh.close()
    return tr


def select_checkpoint(run_dir, phase: str, selection: str = "best") -> Path:
    ck_dir = _phase_dir(run_dir, phase)
    for name in (["best.npz"] if selection == "best" else []) + ["latest.npz"]:
        if (ck_dir / name).exists():
            return ck_dir / name
    steps = step_checkpoints(run_dir, phase)
    if not steps:
        raise FileNotFoundError(f"no {phase}-phase checkpoint under {ck_dir}")
    return steps[-1][1]


# --- inference ---------------------------------------------------------------------------------------


class Pipeline:
    """Skeleton -> node features -> edge features, from two phase checkpoints."""

    def __init__(self, node_gen, edge_gen, feats: FeatureSpec, struct_scaler: StructScaler,
                 scalers: dict | None = None, noise_dim: int = 32):
        self.node_gen, self.edge_gen = node_gen.eval(), edge_gen.eval()
        self.feats = feats
        self.struct_scaler = struct_scaler
        self.scalers = scalers or {}
        self.noise = NoiseSpec(noise_dim)

    @classmethod
    def from_checkpoints(cls, node_ckpt, edge_ckpt) -> "Pipeline":
        from .datasets import Rescaler

        hn, an = read_checkpoint(node_ckpt)
        he, ae = read_checkpoint(edge_ckpt)
        if hn["phase"] != "node" or he["phase"] != "edge":
            raise CheckpointMismatch("expected one node-phase and one edge-phase checkpoint")
        if hn["dataset"] != he["dataset"]:
            raise CheckpointMismatch("node and edge checkpoints were trained on different dataset configurations")
        feats = FeatureSpec(**hn["dataset"]["features"])
        gens = []
        for header, arrays in ((hn, an), (he, ae)):
            mcfg = ModelConfig(**header["model"])
            gen, _ = build_networks(feats, mcfg, header["phase"])
            load_modules(arrays, {"gen": gen})
            gens.append(gen)
        return cls(gens[0], gens[1], feats, StructScaler.from_dict(hn["dataset"]["struct_scaler"]),
                   {k: Rescaler.from_dict(v) for k, v in hn["dataset"]["rescale"].items()},
                   ModelConfig(**hn["model"]).noise_dim)

    @torch.no_grad()
    def generate(self, skeletons: Sequence[Skeleton], seed: int = 0, chunk: int = 256) -> list[AnnotatedGraph]:
        rng = torch.Generator().manual_seed(int(seed))
        out = []
        for start in range(0, len(skeletons), chunk):
            part = list(skeletons[start:start + chunk])
            topo = skeleton_topology(part, self.struct_scaler)
            zv = torch.randn(topo.num_nodes, self.noise.dim, generator=rng)
            V = self.node_gen(topo, zv, generator=rng)
            ze = torch.randn(topo.num_edges, self.noise.dim, generator=rng)
            E = self.edge_gen(topo, V, ze, generator=rng) if topo.num_edges else \
                torch.zeros(0, self.feats.edge_dim)
            V = V.double().numpy()
            E = E.double().numpy()
            if "node" in self.scalers:
                V = self.scalers["node"].inverse(V)
            if "edge" in self.scalers and len(E):
                E = self.scalers["edge"].inverse(E)
            nv = ne = 0
            for s in part:
                out.append(AnnotatedGraph(s, V[nv:nv + s.n], E[ne:ne + s.m]))
                nv += s.n
                ne += s.m
        return out


def generate(skeletons, ckpt_node, ckpt_edge, seed: int = 0) -> list[AnnotatedGraph]:
    return Pipeline.from_checkpoints(ckpt_node, ckpt_edge).generate(skeletons, seed)
