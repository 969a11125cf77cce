"""Central finite-difference oracle for checking reverse-mode gradients.

Deliberately independent of the backward rules it checks: only forward
evaluations are used. The comparison is a relative error with an absolute
floor, since a double-precision central difference on a loss of magnitude
|f| carries noise around eps*|f|/h and cannot resolve gradients below that.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward

FD_STEP = 1e-5


def numerical_grad(f: Callable[[], float], x: np.ndarray,
                   step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. every element of ``x``.

    ``x`` is mutated in place during probing and restored afterwards; ``f``
    must re-read it on each call.
    """
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        f_plus = f()
        x[idx] = orig - step
        f_minus = f()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
        it.iternext()
    return grad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_grads(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
                step: float = FD_STEP, floor: float = 1e-6) -> float:
    """Compare reverse-mode gradients against finite differences.

    ``build_loss`` must construct a fresh scalar loss from the current values
    of ``params`` (leaf tensors, mutated in place while probing). Returns the
    worst relative error over all parameter elements.
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        fd = numerical_grad(lambda: build_loss().item(), p.data, step=step)
        worst = max(worst, rel_err(p.grad, fd, floor=floor))
    return worst


def sampled_param_check(build_loss: Callable[[], Tensor],
                        params: Sequence[Tensor], n_coords: int,
                        rng: np.random.Generator, step: float = FD_STEP,
                        floor: float = 1e-6) -> float:
    """Finite-difference check on ``n_coords`` randomly sampled coordinates.

    Samples uniformly over all scalar entries of ``params``; returns the
    worst relative error among the probed coordinates.
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    backward(loss)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in sorted(picks):
        pi = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        idx = np.unravel_index(offset, p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + step
        f_plus = build_loss().item()
        p.data[idx] = orig - step
        f_minus = build_loss().item()
        p.data[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        assert p.grad is not None
        worst = max(worst, rel_err(np.asarray(p.grad[idx]), np.asarray(fd), floor=floor))
    return worst
