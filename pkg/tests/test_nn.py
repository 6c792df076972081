import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from skelgan.nn import (CHECKPOINT_VERSION, Mlp, NoiseSpec, NonFiniteError, Optimizer,
                        SpectralNormLinear, gumbel_softmax_st, load_modules, read_checkpoint,
                        sample_gumbel, sample_noise, save_checkpoint)


def test_spectral_norm_converges_to_unit_sigma():
    torch.manual_seed(0)
    layer = SpectralNormLinear(16, 12)
    x = torch.randn(4, 16)
    for _ in range(30):
        layer(x)
    w = layer.normalized_weight().detach()
    assert abs(torch.linalg.matrix_norm(w, ord=2).item() - 1) < 1e-3


def test_spectral_norm_fresh_layer_is_warm_started():
    torch.manual_seed(2)
    layer = SpectralNormLinear(64, 64).eval()
    true = torch.linalg.matrix_norm(layer.weight.detach(), ord=2)
    assert abs(layer.sigma().item() / true.item() - 1) < 0.1


def test_spectral_norm_eval_mode_freezes_vectors():
    layer = SpectralNormLinear(8, 8)
    layer.eval()
    u = layer.u.clone()
    layer(torch.randn(3, 8))
    assert torch.equal(u, layer.u)


def test_spectral_norm_survives_repeated_forward_before_backward():
    layer = SpectralNormLinear(8, 8)
    x = torch.randn(3, 8)
    loss = layer(x).sum() + layer(x).sum()
    loss.backward()
    assert torch.isfinite(layer.weight.grad).all()


def test_spectral_norm_zero_weight_passthrough():
    layer = SpectralNormLinear(4, 4)
    with torch.no_grad():
        layer.weight.zero_()
    assert torch.equal(layer.normalized_weight(), layer.weight)


def test_spectral_norm_scaled_identity():
    layer = SpectralNormLinear(4, 4)
    with torch.no_grad():
        layer.weight.copy_(3 * torch.eye(4))
    for _ in range(3):
        w = layer.normalized_weight()
    assert torch.allclose(w, torch.eye(4), atol=1e-6)


def test_spectral_norm_rank_one():
    u, v = torch.tensor([1.0, 2.0, 2.0]), torch.tensor([3.0, 4.0])
    layer = SpectralNormLinear(2, 3)
    with torch.no_grad():
        layer.weight.copy_(torch.outer(u, v))
    for _ in range(3):
        w = layer.normalized_weight()
    assert torch.allclose(w, torch.outer(u, v) / (u.norm() * v.norm()), atol=1e-6)


def test_spectral_norm_keeps_direction():
    torch.manual_seed(2)
    layer = SpectralNormLinear(5, 6)
    w = layer.normalized_weight().detach()
    ratio = w / layer.weight.detach()
    assert torch.allclose(ratio, ratio.flatten()[0].expand_as(ratio))
    assert ratio.flatten()[0] > 0


def test_mlp_zero_weights_give_zero_output():
    m = Mlp([3, 4, 2])
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    assert torch.equal(m(torch.randn(5, 3)), torch.zeros(5, 2))


def test_mlp_identity_layer():
    m = Mlp([3, 3])
    with torch.no_grad():
        m.layers[0].weight.copy_(torch.eye(3))
        m.layers[0].bias.zero_()
    x = torch.randn(4, 3)
    assert torch.equal(m(x), x)


def test_mlp_gradient_matches_finite_differences():
    torch.manual_seed(0)
    m = Mlp([4, 6, 3]).double()
    x = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    m(x).pow(2).sum().backward()
    h = 1e-5
    worst = 0.0
    for t in [x] + list(m.parameters()):
        fd = torch.zeros_like(t)
        flat = t.data.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + h
            up = m(x).pow(2).sum().item()
            flat[k] = old - h
            down = m(x).pow(2).sum().item()
            flat[k] = old
            fd.view(-1)[k] = (up - down) / (2 * h)
        worst = max(worst, ((t.grad - fd).norm() / fd.norm()).item())
    assert worst <= 1e-4


def test_mlp_shape_error():
    with pytest.raises(ValueError, match="expects 5"):
        Mlp([5, 3])(torch.zeros(2, 4))
    with pytest.raises(ValueError):
        Mlp([5])


@pytest.mark.parametrize("spectral", [False, True])
def test_mlp_first_layer_and_tail_reproduce_forward(spectral):
    torch.manual_seed(0)
    m = Mlp([6, 5, 4, 3], spectral).eval()
    x = torch.randn(7, 6)
    w, b = m.first_layer()
    assert torch.allclose(m.tail(x @ w.t() + b), m(x), atol=1e-6)


def test_gumbel_st_forward_is_one_hot():
    logits = torch.randn(50, 5)
    y = gumbel_softmax_st(logits, generator=torch.Generator().manual_seed(0))
    assert torch.equal(y.sum(1), torch.ones(50))
    assert set(y.unique().tolist()) <= {0.0, 1.0}


def test_gumbel_st_gradient_is_soft_gradient():
    logits = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    g = sample_gumbel((4, 3), torch.Generator().manual_seed(1), torch.float64)
    w = torch.randn(4, 3, dtype=torch.float64)
    (gumbel_softmax_st(logits, 0.7, gumbel=g) * w).sum().backward()
    st_grad = logits.grad.clone()
    logits.grad = None
    (torch.softmax((logits + g) / 0.7, -1) * w).sum().backward()
    assert torch.allclose(st_grad, logits.grad)


def test_gumbel_st_rejects_bad_input():
    with pytest.raises(ValueError, match="temperature"):
        gumbel_softmax_st(torch.zeros(1, 2), tau=0)
    with pytest.raises(NonFiniteError):
        gumbel_softmax_st(torch.tensor([[float("nan"), 0.0]]))


def test_gumbel_st_uses_supplied_perturbation():
    logits = torch.zeros(1, 3)
    g = torch.tensor([[0.0, 5.0, 0.0]])
    assert gumbel_softmax_st(logits, gumbel=g).argmax().item() == 1


def test_noise_is_reproducible():
    a = sample_noise(NoiseSpec(), 40, seed=3)
    b = sample_noise(NoiseSpec(), 40, seed=3)
    assert a.shape == (40, 32) and torch.equal(a, b)
    assert a.numpy().tobytes() == b.numpy().tobytes()
    assert sample_noise(NoiseSpec(), 0, seed=3).shape == (0, 32)


def test_noise_moments():
    a = sample_noise(NoiseSpec(), 31250, seed=11, dtype=torch.float64)  # 1e6 draws
    assert abs(a.mean().item()) < 0.01
    assert abs(a.std().item() - 1) < 0.01


def test_gumbel_st_sharp_limit():
    logits = torch.tensor([[10.0, 0.0, 0.0]]).expand(2000, 3)
    y = gumbel_softmax_st(logits, tau=1e-3, generator=torch.Generator().manual_seed(0))
    assert y[:, 0].mean().item() > 0.999


def test_gumbel_st_jacobian_matches_analytic_softmax():
    logits = torch.tensor([[0.3, -1.0, 2.0]], dtype=torch.float64, requires_grad=True)
    g = torch.zeros(1, 3, dtype=torch.float64)
    tau = 0.5
    jac = torch.stack([torch.autograd.grad(gumbel_softmax_st(logits, tau, gumbel=g)[0, k], logits)[0][0]
                       for k in range(3)])
    p = torch.softmax(logits.detach()[0] / tau, 0)
    analytic = (torch.diag(p) - torch.outer(p, p)) / tau
    assert torch.allclose(jac, analytic, atol=1e-12)


def test_adam_matches_hand_computed_update():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = Optimizer([p], lr=0.1)
    b1, b2, eps = 0.5, 0.999, 1e-8
    m = v = np.zeros(2)
    x = np.array([1.0, -2.0])
    for t in range(1, 6):
        g = 2 * x + 1
        p.grad = torch.as_tensor(2 * p.detach() + 1)
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - 0.1 * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert np.allclose(p.detach().numpy(), x, rtol=1e-12, atol=1e-12)
    m_t, v_t = opt.moments(p)
    assert np.allclose(m_t.numpy(), m) and np.allclose(v_t.numpy(), v)


def test_adam_minimizes_quadratic():
    # the default 1e-4 step size cannot travel distance 1 in 500 steps
    w = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = Optimizer([w], lr=1e-2)
    for _ in range(500):
        opt.zero_grad()
        (w ** 2).sum().backward()
        opt.step()
    assert abs(w.item()) < 1e-2


def test_adam_identical_runs_identical_trajectories():
    def run():
        torch.manual_seed(5)
        m = Mlp([3, 4, 1])
        opt = Optimizer(m.parameters(), lr=1e-3)
        x = torch.randn(8, 3, generator=torch.Generator().manual_seed(1))
        for _ in range(20):
            opt.zero_grad()
            m(x).pow(2).sum().backward()
            opt.step()
        return [p.detach().clone() for p in m.parameters()]

    assert all(torch.equal(a, b) for a, b in zip(run(), run()))


def test_adam_zero_gradient_is_a_no_op():
    w = torch.nn.Parameter(torch.tensor([1.5]))
    opt = Optimizer([w])
    w.grad = torch.zeros(1)
    opt.step()
    assert w.item() == 1.5


def test_adam_zero_gradient_decays_moments():
    w = torch.nn.Parameter(torch.tensor([1.5], dtype=torch.float64))
    opt = Optimizer([w])
    w.grad = torch.ones(1, dtype=torch.float64)
    opt.step()
    m1, v1 = (t.clone() for t in opt.moments(w))
    w.grad = torch.zeros(1, dtype=torch.float64)
    opt.step()
    m2, v2 = opt.moments(w)
    assert m2.item() == pytest.approx(0.5 * m1.item())
    assert v2.item() == pytest.approx(0.999 * v1.item())


def test_adam_skips_non_finite_gradient():
    w = torch.nn.Parameter(torch.tensor([1.0]))
    opt = Optimizer([w])
    w.grad = torch.tensor([float("inf")])
    assert opt.step() is False
    assert w.item() == 1.0 and opt.skipped == 1


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    a = torch.nn.Sequential(Mlp([3, 4, 2], spectral=True))
    opt = Optimizer(a.parameters(), lr=0.5)
    a(torch.randn(2, 3)).sum().backward()
    opt.step()
    save_checkpoint(tmp_path / "c.npz", {"step": 7}, {"net": a}, {"opt": opt}, {"rng": np.arange(3)})
    header, arrays = read_checkpoint(tmp_path / "c.npz")
    assert header["step"] == 7 and header["version"] == CHECKPOINT_VERSION
    assert all(arrays[k].dtype.byteorder in "<=|" for k in arrays)
    b = torch.nn.Sequential(Mlp([3, 4, 2], spectral=True))
    opt_b = Optimizer(b.parameters())
    load_modules(arrays, {"net": b}, {"opt": opt_b})
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert opt_b.lr == 0.5
    assert torch.equal(opt.moments(next(a.parameters()))[1], opt_b.moments(next(b.parameters()))[1])


def test_checkpoint_version_checked(tmp_path):
    path = tmp_path / "c.npz"
    np.savez(path, __header__=np.frombuffer(json.dumps({"version": 99}).encode(), np.uint8))
    with pytest.raises(ValueError, match="version"):
        read_checkpoint(path)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(0.2, 3.0))
def test_property_gumbel_st_one_hot_and_argmax_consistent(logits, tau):
    t = torch.tensor([logits], dtype=torch.float64)
    g = sample_gumbel(t.shape, torch.Generator().manual_seed(0), torch.float64)
    y = gumbel_softmax_st(t, tau, gumbel=g)
    assert y.sum().item() == pytest.approx(1.0)
    assert y.argmax().item() == (t + g).argmax().item()
