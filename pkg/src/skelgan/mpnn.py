"""Permutation-equivariant message passing over a skeleton.

One update step, for every undirected edge ``{i, j}`` and node ``i``::

    r_ij <- 1/2 (phi_r([h_i, h_j, r_ij]) + phi_r([h_j, h_i, r_ij]))
    m_i  <- sum_{j in N(i)} r_ij / sqrt(d_i d_j)
    h_i  <- phi_h([h_i, m_i])            (or phi_a(h_i) + phi_b(m_i))

with optional additive skip connections on both updates.  Averaging the
two orientations keeps edge states independent of how an edge is listed.
The four networks (two generators, two critics) differ only in what seeds
the initial states and in the output head.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .graph import GraphBatch
from .nn import Mlp, gumbel_softmax_st, linear

log = logging.getLogger(__name__)

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"


@dataclass
class ModelConfig:
    width: int = 64
    generator_steps: int = 6
    critic_steps: int = 3
    head_hidden: int = 128
    noise_dim: int = 32
    node_update: str = "concat"  # or "sum_of_mlps"
    skip_connections: bool = False
    tau: float = 1.0
    cycle_lengths: tuple = (3, 4, 5, 6)

    def __post_init__(self):
        if self.node_update not in ("concat", "sum_of_mlps"):
            raise ValueError(f"node_update must be 'concat' or 'sum_of_mlps', got {self.node_update!r}")
        self.cycle_lengths = tuple(self.cycle_lengths)

    @property
    def struct_dim(self) -> int:
        return 1 + len(self.cycle_lengths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cycle_lengths"] = list(self.cycle_lengths)
        return d


@dataclass
class FeatureSpec:
    """Width and kind (categorical one-hot or continuous) of node and edge features."""

    node_dim: int
    edge_dim: int
    node_kind: str = CATEGORICAL
    edge_kind: str = CATEGORICAL

    def __post_init__(self):
        for kind in (self.node_kind, self.edge_kind):
            if kind not in (CATEGORICAL, CONTINUOUS):
                raise ValueError(f"feature kind must be categorical or continuous, got {kind!r}")


@dataclass
class Topology:
    """Tensor view of a batch's skeletons, shared by every network."""

    src: torch.Tensor
    dst: torch.Tensor
    coef: torch.Tensor
    num_nodes: int
    node_graph: torch.Tensor
    edge_graph: torch.Tensor
    num_graphs: int
    struct: torch.Tensor = field(default=None)

    @classmethod
    def from_batch(cls, b: GraphBatch, struct=None, dtype=torch.float32) -> "Topology":
        deg = b.degrees().astype(np.float64)
        src, dst = b.edges[:, 0], b.edges[:, 1]
        coef = 1.0 / np.sqrt(deg[src] * deg[dst]) if len(src) else np.zeros(0)
        return cls(
            src=torch.as_tensor(src, dtype=torch.long),
            dst=torch.as_tensor(dst, dtype=torch.long),
            coef=torch.as_tensor(coef, dtype=dtype).unsqueeze(1),
            num_nodes=b.total_nodes,
            node_graph=torch.as_tensor(b.graph_indicator, dtype=torch.long),
            edge_graph=torch.as_tensor(b.edge_graph, dtype=torch.long),
            num_graphs=b.num_graphs,
            struct=None if struct is None else torch.as_tensor(struct, dtype=dtype),
        )

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def to(self, dtype) -> "Topology":
        return Topology(self.src, self.dst, self.coef.to(dtype), self.num_nodes, self.node_graph,
                        self.edge_graph, self.num_graphs,
                        None if self.struct is None else self.struct.to(dtype))


def aggregate(topo: Topology, r: torch.Tensor) -> torch.Tensor:
    """Degree-normalized sum of incident edge states; isolated nodes get zeros."""
    out = r.new_zeros(topo.num_nodes, r.shape[1])
    msg = topo.coef * r
    out = out.index_add(0, topo.src, msg)
    return out.index_add(0, topo.dst, msg)


def segment_mean(values: torch.Tensor, segment: torch.Tensor, num_segments: int) -> torch.Tensor:
    total = values.new_zeros(num_segments, values.shape[1]).index_add(0, segment, values)
    count = torch.bincount(segment, minlength=num_segments).to(values.dtype).unsqueeze(1)
    return total / count.clamp(min=1)


class MessagePassing(nn.Module):
    """``steps`` rounds of edge update, aggregation and node update."""

    def __init__(self, node_in: int, edge_in: int | None, width: int, steps: int,
                 spectral: bool = False, node_update: str = "concat", skip: bool = False,
                 final_node_update: bool = True):
        super().__init__()
        self.width, self.steps, self.skip = width, steps, skip
        # readouts that only consume edge states have no use for the last node update
        self.final_node_update = final_node_update
        self.node_update = node_update
        self.has_edge_input = edge_in is not None
        self.node_proj = linear(node_in, width, spectral)
        self.edge_proj = linear(edge_in, width, spectral) if edge_in is not None else None
        self.edge_mlps = nn.ModuleList()
        self.node_mlps = nn.ModuleList()
        for step in range(steps):
            edge_w = 2 * width if step == 0 and edge_in is None else 3 * width
            self.edge_mlps.append(Mlp([edge_w, width, width], spectral))
            if step == steps - 1 and not final_node_update:
                break
            if node_update == "concat":
                self.node_mlps.append(Mlp([2 * width, width, width], spectral))
            else:
                self.node_mlps.append(nn.ModuleList(
                    [Mlp([width, width, width], spectral), Mlp([width, width, width], spectral)]
                ))

    def initial_states(self, node_in, edge_in):
        h = self.node_proj(node_in)
        r = self.edge_proj(edge_in) if self.edge_proj is not None else None
        return h, r

    def edge_update(self, step: int, topo: Topology, h, r):
        """Orientation-averaged edge MLP.

        The first affine layer is split by input block so the node terms are
        computed once per node rather than once per edge orientation.
        """
        mlp = self.edge_mlps[step]
        w, bias = mlp.first_layer()
        width = h.shape[1]
        a = h @ w[:, :width].t()
        b = h @ w[:, width:2 * width].t()
        shared = bias if r is None else r @ w[:, 2 * width:].t() + bias
        fwd = a[topo.src] + b[topo.dst] + shared
        rev = a[topo.dst] + b[topo.src] + shared
        both = mlp.tail(torch.cat([fwd, rev], 0))
        m = topo.num_edges
        return 0.5 * (both[:m] + both[m:])

    def mp_step(self, step: int, topo: Topology, h, r):
        r_new = self.edge_update(step, topo, h, r)
        if self.skip and r is not None:
            r_new = r_new + r
        if step >= len(self.node_mlps):
            return h, r_new
        agg = aggregate(topo, r_new)
        if self.node_update == "concat":
            h_new = self.node_mlps[step](torch.cat([h, agg], 1))
        else:
            phi_self, phi_msg = self.node_mlps[step]
            h_new = phi_self(h) + phi_msg(agg)
        if self.skip:
            h_new = h_new + h
        return h_new, r_new

    def forward(self, topo: Topology, node_in, edge_in=None):
        h, r = self.initial_states(node_in, edge_in)
        for step in range(self.steps):
            h, r = self.mp_step(step, topo, h, r)
        return h, r


def _struct(topo: Topology, like: torch.Tensor) -> torch.Tensor:
    if topo.struct is None:
        raise ValueError("topology carries no structural features")
    return topo.struct.to(like.dtype)


class FeatureHead(nn.Module):
    def __init__(self, width: int, out_dim: int, kind: str, tau: float):
        super().__init__()
        self.kind, self.tau = kind, tau
        self.proj = linear(width, out_dim)

    def forward(self, x, generator=None, gumbel=None):
        out = self.proj(x)
        if self.kind == CATEGORICAL:
            return gumbel_softmax_st(out, self.tau, generator=generator, gumbel=gumbel)
        return out


class NodeGenerator(nn.Module):
    """Maps per-node noise and the skeleton to node features."""

    def __init__(self, feats: FeatureSpec, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.mp = MessagePassing(cfg.noise_dim + cfg.struct_dim, None, cfg.width, cfg.generator_steps,
                                 node_update=cfg.node_update, skip=cfg.skip_connections)
        self.head = FeatureHead(cfg.width, feats.node_dim, feats.node_kind, cfg.tau)

    def logits(self, topo: Topology, noise):
        if noise.shape[0] != topo.num_nodes:
            raise ValueError(f"need one noise row per node ({topo.num_nodes}), got {noise.shape[0]}")
        h, _ = self.mp(topo, torch.cat([noise, _struct(topo, noise)], 1))
        return self.head.proj(h)

    def forward(self, topo: Topology, noise, generator=None, gumbel=None):
        if noise.shape[0] != topo.num_nodes:
            raise ValueError(f"need one noise row per node ({topo.num_nodes}), got {noise.shape[0]}")
        h, _ = self.mp(topo, torch.cat([noise, _struct(topo, noise)], 1))
        return self.head(h, generator, gumbel)


class EdgeGenerator(nn.Module):
    """Maps per-edge noise, node features and the skeleton to edge features."""

    def __init__(self, feats: FeatureSpec, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.mp = MessagePassing(feats.node_dim + cfg.struct_dim, cfg.noise_dim, cfg.width,
                                 cfg.generator_steps, node_update=cfg.node_update,
                                 skip=cfg.skip_connections, final_node_update=False)
        self.head = FeatureHead(cfg.width, feats.edge_dim, feats.edge_kind, cfg.tau)

    def _states(self, topo, node_feats, noise):
        if node_feats.shape[0] != topo.num_nodes:
            raise ValueError(f"need one node-feature row per node ({topo.num_nodes}), got {node_feats.shape[0]}")
        if noise.shape[0] != topo.num_edges:
            raise ValueError(f"need one noise row per edge ({topo.num_edges}), got {noise.shape[0]}")
        _, r = self.mp(topo, torch.cat([node_feats, _struct(topo, node_feats)], 1), noise)
        return r

    def logits(self, topo, node_feats, noise):
        return self.head.proj(self._states(topo, node_feats, noise))

    def forward(self, topo: Topology, node_feats, noise, generator=None, gumbel=None):
        return self.head(self._states(topo, node_feats, noise), generator, gumbel)


class NodeCritic(nn.Module):
    """Scores (node features, skeleton); one scalar per graph, mean over nodes."""

    def __init__(self, feats: FeatureSpec, cfg: ModelConfig):
        super().__init__()
        self.mp = MessagePassing(feats.node_dim + cfg.struct_dim, None, cfg.width, cfg.critic_steps,
                                 spectral=True, node_update=cfg.node_update,
                                 skip=cfg.skip_connections)
        self.head = Mlp([cfg.width, cfg.head_hidden, cfg.head_hidden, 1], spectral=True)

    def node_scores(self, topo: Topology, node_feats):
        h, _ = self.mp(topo, torch.cat([node_feats, _struct(topo, node_feats)], 1))
        return self.head(h)

    def forward(self, topo: Topology, node_feats):
        return segment_mean(self.node_scores(topo, node_feats), topo.node_graph, topo.num_graphs)[:, 0]


class EdgeCritic(nn.Module):
    """Scores (edge features, node features, skeleton); mean over edges per graph."""

    def __init__(self, feats: FeatureSpec, cfg: ModelConfig):
        super().__init__()
        self.mp = MessagePassing(feats.node_dim + cfg.struct_dim, feats.edge_dim, cfg.width,
                                 cfg.critic_steps, spectral=True, node_update=cfg.node_update,
                                 skip=cfg.skip_connections, final_node_update=False)
        self.head = Mlp([cfg.width, cfg.head_hidden, cfg.head_hidden, 1], spectral=True)

    def edge_scores(self, topo: Topology, node_feats, edge_feats):
        _, r = self.mp(topo, torch.cat([node_feats, _struct(topo, node_feats)], 1), edge_feats)
        return self.head(r)

    def forward(self, topo: Topology, node_feats, edge_feats):
        scores = self.edge_scores(topo, node_feats, edge_feats)
        counts = torch.bincount(topo.edge_graph, minlength=topo.num_graphs)
        if (counts == 0).any():
            log.debug("%d graph(s) without edges scored 0 by the edge critic", int((counts == 0).sum()))
        return segment_mean(scores, topo.edge_graph, topo.num_graphs)[:, 0]


def build_networks(feats: FeatureSpec, cfg: ModelConfig, phase: str):
    """Return ``(generator, critic)`` for the ``node`` or ``edge`` phase."""
    if phase == "node":
        return NodeGenerator(feats, cfg), NodeCritic(feats, cfg)
    if phase == "edge":
        return EdgeGenerator(feats, cfg), EdgeCritic(feats, cfg)
    raise ValueError(f"phase must be 'node' or 'edge', got {phase!r}")
