"""Neural building blocks: MLPs, spectral normalization, straight-through
Gumbel-Softmax, latent noise, the optimizer wrapper and the checkpoint format.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

NOISE_DIM = 32


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where a finite value is required."""


class SpectralNormLinear(nn.Module):
    """Affine layer whose weight is divided by its largest singular value.

    The singular value is estimated with ``iterations`` power-iteration
    steps per training-mode forward pass; the left/right vectors persist as buffers
    (and therefore in checkpoints).  In eval mode the stored vectors are
    used without updating, which makes the forward a pure function.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True, eps: float = 1e-12,
                 iterations: int = 3, init_iterations: int = 10):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.eps = eps
        self.iterations = iterations
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.empty(out_features)) if bias else None
        _fan_in_init(self.weight, self.bias)
        u = F.normalize(torch.randn(out_features), dim=0, eps=eps)
        v = F.normalize(torch.randn(in_features), dim=0, eps=eps)
        self.register_buffer("u", u)
        self.register_buffer("v", v)
        # warm start so that sigma is meaningful even before any training-mode pass
        self.power_iteration(init_iterations)

    @torch.no_grad()
    def power_iteration(self, steps: int = 1) -> None:
        w = self.weight
        for _ in range(steps):
            self.v.copy_(F.normalize(w.t() @ self.u, dim=0, eps=self.eps))
            self.u.copy_(F.normalize(w @ self.v, dim=0, eps=self.eps))

    def sigma(self) -> torch.Tensor:
        # clones: a later power iteration must not clobber vectors saved for backward
        return torch.dot(self.u.clone(), self.weight @ self.v.clone())

    def normalized_weight(self) -> torch.Tensor:
        if self.training:
            self.power_iteration(self.iterations)
        sigma = self.sigma()
        if not torch.isfinite(sigma) or sigma.abs() <= self.eps:
            return self.weight
        return self.weight / sigma

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)

    def extra_repr(self):
        return f"in_features={self.in_features}, out_features={self.out_features}"


def _fan_in_init(weight, bias):
    bound = 1.0 / math.sqrt(weight.shape[1]) if weight.shape[1] else 0.0
    with torch.no_grad():
        weight.uniform_(-bound, bound)
        if bias is not None:
            bias.uniform_(-bound, bound)


def linear(in_features: int, out_features: int, spectral: bool = False) -> nn.Module:
    if spectral:
        return SpectralNormLinear(in_features, out_features)
    layer = nn.Linear(in_features, out_features)
    _fan_in_init(layer.weight, layer.bias)
    return layer


class Mlp(nn.Module):
    """Affine layers with CELU between them (none after the last)."""

    def __init__(self, widths: Sequence[int], spectral: bool = False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        self.spectral = spectral
        self.layers = nn.ModuleList(
            linear(a, b, spectral) for a, b in zip(self.widths[:-1], self.widths[1:])
        )

    def forward(self, x):
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"MLP expects {self.widths[0]} input columns, got {x.shape[-1]}")
        for k, layer in enumerate(self.layers):
            if k:
                x = F.celu(x)
            x = layer(x)
        return x

    def first_layer(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Effective ``(weight, bias)`` of the first affine layer."""
        layer = self.layers[0]
        w = layer.normalized_weight() if isinstance(layer, SpectralNormLinear) else layer.weight
        return w, layer.bias

    def tail(self, pre_activation):
        """Continue the forward pass from the first layer's output."""
        x = pre_activation
        for layer in self.layers[1:]:
            x = layer(F.celu(x))
        return x


def mlp_forward(m: Mlp, x):
    return m(x)


def sample_gumbel(shape, generator=None, dtype=torch.float32, eps: float = 1e-20):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + eps) + eps)


def gumbel_softmax_st(logits, tau: float = 1.0, generator=None, gumbel=None):
    """One-hot samples in the forward pass, softmax-relaxation gradient backward.

    ``gumbel`` may supply pre-drawn perturbations (same shape as logits).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not torch.isfinite(logits).all():
        raise NonFiniteError("gumbel_softmax_st: non-finite logits")
    if gumbel is None:
        gumbel = sample_gumbel(logits.shape, generator, logits.dtype)
    soft = torch.softmax((logits + gumbel) / tau, dim=-1)
    hard = F.one_hot(soft.argmax(dim=-1), logits.shape[-1]).to(soft.dtype)
    return hard - soft.detach() + soft


@dataclass(frozen=True)
class NoiseSpec:
    dim: int = NOISE_DIM


def sample_noise(spec: NoiseSpec, count: int, seed=None, generator=None, dtype=torch.float32):
    """``count x spec.dim`` standard Gaussian draws; reproducible per seed."""
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    return torch.randn(count, spec.dim, generator=generator, dtype=dtype)


class Optimizer:
    """Adam with (0.5, 0.999) moment decays; skips non-finite gradients."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.opt = torch.optim.Adam(self.params, lr=lr, betas=tuple(betas), eps=eps, foreach=True)
        self.skipped = 0

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = value

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=False)

    def step(self) -> bool:
        for p in self.params:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        norms = torch._foreach_norm([p.grad for p in self.params])
        if not torch.isfinite(torch.stack(norms)).all():
            log.warning("non-finite gradient; optimizer step skipped")
            self.skipped += 1
            return False
        self.opt.step()
        return True

    def moments(self, p) -> tuple[torch.Tensor, torch.Tensor]:
        st = self.opt.state[p]
        if not st:
            return torch.zeros_like(p), torch.zeros_like(p)
        return st["exp_avg"], st["exp_avg_sq"]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in enumerate(self.params):
            st = self.opt.state.get(p)
            if st:
                out[f"{k}/exp_avg"] = st["exp_avg"].detach().numpy()
                out[f"{k}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
                out[f"{k}/step"] = np.asarray([float(st["step"])])
        out["lr"] = np.asarray([self.lr])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.opt.state.clear()
        for k, p in enumerate(self.params):
            if f"{k}/exp_avg" in arrays:
                self.opt.state[p] = {
                    "step": torch.tensor(float(arrays[f"{k}/step"][0])),
                    "exp_avg": torch.as_tensor(arrays[f"{k}/exp_avg"], dtype=p.dtype).clone(),
                    "exp_avg_sq": torch.as_tensor(arrays[f"{k}/exp_avg_sq"], dtype=p.dtype).clone(),
                }
        if "lr" in arrays:
            self.lr = float(arrays["lr"][0])


def optimizer_step(opt: Optimizer) -> bool:
    return opt.step()


# --- checkpoints -------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, header: dict, modules: dict[str, nn.Module],
                    optimizers: dict[str, Optimizer] | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write one ``.npz`` archive of little-endian arrays plus a JSON header.

    Keys are ``<module>/param/<name>``, ``<module>/buffer/<name>`` and
    ``<optimizer>/optim/<slot>``; the header sits under ``__header__``.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, mod in modules.items():
        for k, p in mod.named_parameters():
            arrays[f"{name}/param/{k}"] = _le(p.detach().numpy())
        for k, b in mod.named_buffers():
            arrays[f"{name}/buffer/{k}"] = _le(b.detach().numpy())
    for name, opt in (optimizers or {}).items():
        for k, a in opt.state_arrays().items():
            arrays[f"{name}/optim/{k}"] = _le(np.asarray(a))
    for k, a in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(a)
    head = dict(header, version=CHECKPOINT_VERSION)
    arrays["__header__"] = np.frombuffer(json.dumps(head, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.kind == "f":
        return a.astype(a.dtype.newbyteorder("<"), copy=False)
    return a


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(arrays.pop("__header__").tobytes().decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, arrays


def load_modules(arrays: dict[str, np.ndarray], modules: dict[str, nn.Module],
                 optimizers: dict[str, Optimizer] | None = None) -> None:
    with torch.no_grad():
        for name, mod in modules.items():
            for k, p in mod.named_parameters():
                p.copy_(torch.as_tensor(arrays[f"{name}/param/{k}"]))
            for k, b in mod.named_buffers():
                b.copy_(torch.as_tensor(arrays[f"{name}/buffer/{k}"]))
    for name, opt in (optimizers or {}).items():
        prefix = f"{name}/optim/"
        opt.load_state_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
