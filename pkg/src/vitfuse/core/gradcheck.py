"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError
from . import ops
from .tensor import Tensor, autograd_off


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    projection_seed: int = 0,
) -> float:
    """Return the worst relative error between autodiff and central differences.

    ``fn`` maps the given tensors to a tensor of any shape; a fixed random
    projection reduces it to a scalar so one backward pass checks every
    output. Inputs are promoted to float64 copies, so callers can pass
    float32 tensors.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")

    probes = [
        Tensor(t.data.astype(np.float64), requires_grad=True, dtype=np.float64)
        for t in inputs
    ]
    out = fn(*probes)
    proj = np.random.default_rng(projection_seed).standard_normal(out.data.shape)
    loss = ops.sum_(ops.mul(out, Tensor(proj, dtype=np.float64)))
    loss.backward()

    def scalar_loss() -> float:
        with autograd_off():
            return float((fn(*probes).data * proj).sum())

    worst = 0.0
    for t in probes:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = scalar_loss()
            flat[i] = orig - eps
            f_minus = scalar_loss()
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
        err = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
        worst = max(worst, err)
    return worst
