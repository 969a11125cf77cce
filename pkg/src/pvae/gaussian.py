"""Diagonal Gaussian algebra on autodiff tensors.

Every latent posterior and prior in the model is a diagonal Gaussian held as
(mean, log-variance). All functions accept single vectors ([D]) or batches
([N, D]) and reduce over the feature axis only, so a batched call returns one
value per row. Log-densities keep their normalizing constants so bound
comparisons are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .autodiff import ShapeError, Tensor, exp, mul, sub, tsum

LOG_2PI = float(np.log(2.0 * np.pi))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


@dataclass
class DiagGaussian:
    """mean and log_var of equal shape; variance is exp(log_var)."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = _as_tensor(self.mean)
        self.log_var = _as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(
                f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @staticmethod
    def standard(dim: int, batch: int | None = None) -> "DiagGaussian":
        shape = (dim,) if batch is None else (batch, dim)
        return DiagGaussian(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def _check_dims(a, b, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {a.shape} vs {b.shape}")


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) in closed form, summed over the feature axis.

    0.5 * sum_d [ exp(lv_q - lv_p) + (mu_p - mu_q)^2 exp(-lv_p) - 1 + lv_p - lv_q ]
    """
    _check_dims(q.mean, p.mean, "kl_divergence")
    dlv = sub(q.log_var, p.log_var)
    dmu = sub(p.mean, q.mean)
    terms = exp(dlv) + mul(mul(dmu, dmu), exp(-p.log_var)) - 1.0 - dlv
    return tsum(terms, axis=-1) * 0.5


def kl_to_standard(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)): the prior term of the bound."""
    terms = exp(q.log_var) + mul(q.mean, q.mean) - 1.0 - q.log_var
    return tsum(terms, axis=-1) * 0.5


def sample_reparam(q: DiagGaussian, eps) -> Tensor:
    """z = mean + exp(log_var / 2) * eps, differentiable in mean and log_var."""
    eps = _as_tensor(eps)
    _check_dims(q.mean, eps, "sample_reparam")
    return q.mean + mul(exp(q.log_var * 0.5), eps)


def log_prob(x, q: DiagGaussian) -> Tensor:
    """Full Gaussian log-density of x under q, including -(D/2) log(2 pi)."""
    x = _as_tensor(x)
    _check_dims(x, q.mean, "log_prob")
    d = q.dim
    resid = sub(x, q.mean)
    quad = tsum(mul(mul(resid, resid), exp(-q.log_var)), axis=-1)
    return (quad + tsum(q.log_var, axis=-1) + d * LOG_2PI) * -0.5


def rbf_kernel(mu, mu_other) -> Tensor:
    """exp(-||mu - mu'||^2 / 2) in (0, 1]; rowwise for batched inputs."""
    mu = _as_tensor(mu)
    mu_other = _as_tensor(mu_other)
    _check_dims(mu, mu_other, "rbf_kernel")
    d = sub(mu, mu_other)
    return exp(tsum(mul(d, d), axis=-1) * -0.5)
