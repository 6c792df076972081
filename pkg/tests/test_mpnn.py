import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from skelgan.graph import AnnotatedGraph, Skeleton, apply_permutation, batch
from skelgan.mpnn import (CONTINUOUS, EdgeCritic, EdgeGenerator, FeatureSpec, MessagePassing,
                          ModelConfig, NodeCritic, NodeGenerator, Topology, aggregate,
                          build_networks, segment_mean)
from skelgan.structure import raw_features

from conftest import random_graph

SMALL = ModelConfig(width=16, generator_steps=2, critic_steps=2, head_hidden=16, noise_dim=8)
FEATS = FeatureSpec(4, 4)


def topo_of(graphs, dtype=torch.float32):
    b = batch(graphs)
    struct = np.concatenate([raw_features(g.skeleton) for g in graphs])
    return Topology.from_batch(b, struct, dtype)


def test_aggregate_normalizes_by_degrees_and_zeroes_isolated_nodes():
    g = AnnotatedGraph(Skeleton(4, [[0, 1], [0, 2]]), np.zeros((4, 1)), np.zeros((2, 1)))
    topo = topo_of([g])
    r = torch.tensor([[1.0], [3.0]])
    out = aggregate(topo, r)
    # deg = (2, 1, 1, 0)
    expected = [[(1 + 3) / np.sqrt(2)], [1 / np.sqrt(2)], [3 / np.sqrt(2)], [0.0]]
    assert torch.allclose(out, torch.tensor(expected, dtype=torch.float32))


def test_segment_mean_handles_empty_segments():
    vals = torch.tensor([[1.0], [3.0]])
    assert segment_mean(vals, torch.tensor([0, 0]), 2).tolist() == [[2.0], [0.0]]


def test_edge_update_is_orientation_independent(rng):
    torch.manual_seed(0)
    mp = MessagePassing(5, 3, 8, 2)
    g = random_graph(rng, n_max=7, p=0.6, node_dim=5, edge_dim=3, one_hot=False, n_min=3)
    topo = topo_of([g])
    flipped = Topology(topo.dst, topo.src, topo.coef, topo.num_nodes, topo.node_graph,
                       topo.edge_graph, topo.num_graphs, topo.struct)
    v = torch.tensor(g.node_feats, dtype=torch.float32)
    e = torch.tensor(g.edge_feats, dtype=torch.float32)
    h1, r1 = mp(topo, v, e)
    h2, r2 = mp(flipped, v, e)
    assert torch.allclose(h1, h2, atol=1e-6) and torch.allclose(r1, r2, atol=1e-6)


def test_edge_readouts_skip_final_node_update():
    gen = EdgeGenerator(FEATS, SMALL)
    assert len(gen.mp.node_mlps) == SMALL.generator_steps - 1
    assert len(NodeGenerator(FEATS, SMALL).mp.node_mlps) == SMALL.generator_steps


def test_receptive_field_is_bounded(rng):
    # with L steps, a node's output cannot depend on nodes more than L hops away
    torch.manual_seed(0)
    path = AnnotatedGraph(Skeleton(8, [[i, i + 1] for i in range(7)]), np.zeros((8, 0)), np.zeros((7, 0)))
    gen = NodeGenerator(FEATS, SMALL).eval()
    topo = topo_of([path])
    z = torch.randn(8, SMALL.noise_dim)
    base = gen.logits(topo, z)
    z2 = z.clone()
    z2[7] += 1.0
    changed = (gen.logits(topo, z2) - base).abs().amax(1) > 0
    assert not changed[: 7 - SMALL.generator_steps].any()
    assert changed[7 - SMALL.generator_steps:].all()


def test_critic_locality_on_long_path():
    # L = 3 critic: a perturbation 5 or more hops away leaves a node's score unchanged
    torch.manual_seed(1)
    cfg = ModelConfig(width=16, critic_steps=3, head_hidden=16)
    critic = NodeCritic(FEATS, cfg).eval()
    path = AnnotatedGraph(Skeleton(12, [[i, i + 1] for i in range(11)]), np.eye(4)[[0] * 12], np.zeros((11, 0)))
    topo = topo_of([path])
    v = torch.tensor(path.node_feats, dtype=torch.float32)
    v2 = v.clone()
    v2[0] = torch.tensor([0.0, 0.0, 1.0, 0.0])
    with torch.no_grad():
        diff = (critic.node_scores(topo, v2) - critic.node_scores(topo, v)).abs()[:, 0]
    assert (diff[5:] == 0).all()
    assert (diff[: cfg.critic_steps + 1] > 0).all()


def test_edge_critic_scores_edgeless_graph_zero():
    critic = EdgeCritic(FEATS, SMALL)
    single = AnnotatedGraph(Skeleton(1), np.eye(4)[[0]], np.zeros((0, 4)))
    pair = AnnotatedGraph(Skeleton(2, [[0, 1]]), np.eye(4)[[0, 1]], np.eye(4)[[2]])
    topo = topo_of([single, pair])
    b = batch([single.with_edge_dim(4), pair])
    s = critic(topo, torch.as_tensor(b.node_feats, dtype=torch.float32),
               torch.as_tensor(b.edge_feats, dtype=torch.float32))
    assert s.shape == (2,) and s[0].item() == 0.0


def test_noise_row_counts_checked(rng):
    g = random_graph(rng, n_min=3, p=0.8)
    topo = topo_of([g])
    with pytest.raises(ValueError, match="noise row per node"):
        NodeGenerator(FEATS, SMALL)(topo, torch.zeros(g.n + 1, SMALL.noise_dim))
    with pytest.raises(ValueError, match="noise row per edge"):
        EdgeGenerator(FEATS, SMALL)(topo, torch.zeros(g.n, 4), torch.zeros(g.skeleton.m + 1, SMALL.noise_dim))


def test_generators_emit_one_hots_or_reals(rng):
    g = random_graph(rng, n_min=4, p=0.6)
    topo = topo_of([g])
    v = NodeGenerator(FEATS, SMALL)(topo, torch.randn(g.n, SMALL.noise_dim))
    assert torch.equal(v.sum(1), torch.ones(g.n))
    cont = FeatureSpec(2, 2, CONTINUOUS, CONTINUOUS)
    e = EdgeGenerator(cont, SMALL)(topo, torch.randn(g.n, 2), torch.randn(g.skeleton.m, SMALL.noise_dim))
    assert e.shape == (g.skeleton.m, 2)


def test_critics_are_spectrally_normalized_generators_are_not():
    from skelgan.nn import SpectralNormLinear

    for phase in ("node", "edge"):
        gen, critic = build_networks(FEATS, SMALL, phase)
        assert not any(isinstance(m, SpectralNormLinear) for m in gen.modules())
        linears = [m for m in critic.modules() if isinstance(m, (SpectralNormLinear, torch.nn.Linear))]
        assert linears and all(isinstance(m, SpectralNormLinear) for m in linears)


def test_default_architecture_widths():
    cfg = ModelConfig()
    critic = NodeCritic(FEATS, cfg)
    assert critic.head.widths == (64, 128, 128, 1)
    assert cfg.noise_dim == 32 and cfg.width == 64
    assert all(m.widths == (128, 64, 64) for m in critic.mp.node_mlps)


def test_config_validation():
    with pytest.raises(ValueError, match="node_update"):
        ModelConfig(node_update="max")
    with pytest.raises(ValueError, match="phase"):
        build_networks(FEATS, SMALL, "both")
    with pytest.raises(ValueError, match="kind"):
        FeatureSpec(1, 1, "ordinal")


@pytest.mark.parametrize("variant", [dict(node_update="sum_of_mlps"), dict(skip_connections=True)])
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_property_variants_are_equivariant(variant, seed):
    r = np.random.default_rng(seed)
    cfg = ModelConfig(width=16, generator_steps=2, critic_steps=2, head_hidden=16, noise_dim=8, **variant)
    torch.manual_seed(seed % 1000)
    gen, critic = NodeGenerator(FEATS, cfg).eval(), NodeCritic(FEATS, cfg).eval()
    g = random_graph(r, n_max=9, p=0.4)
    perm = r.permutation(g.n)
    h = apply_permutation(g, perm)
    z = torch.randn(g.n, cfg.noise_dim)
    a = gen.logits(topo_of([g]), z)
    b = gen.logits(topo_of([h]), z[perm])
    assert torch.allclose(a[perm], b, atol=1e-5)
    va = torch.tensor(g.node_feats, dtype=torch.float32)
    assert torch.allclose(critic(topo_of([g]), va), critic(topo_of([h]), va[perm]), atol=1e-5)
