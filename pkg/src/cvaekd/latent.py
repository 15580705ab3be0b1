"""Diagonal Gaussian heads, reparameterized sampling, KL and precision-weighted fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import MlpParams, mlp2
from .numerics import Tensor, clip, exp, log, sub, tsum

LOG_VAR_MIN, LOG_VAR_MAX = -8.0, 8.0


@dataclass
class GaussianParams:
    """``mu`` and ``log_var`` with a shared shape ``[..., d_z]``."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var.data)

    @classmethod
    def standard(cls, shape) -> "GaussianParams":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def gaussian_head(h: Tensor, mu_mlp: MlpParams, sigma_mlp: MlpParams) -> GaussianParams:
    """Mean and clamped log-variance from two separate MLPs."""
    if mu_mlp.out_dim != sigma_mlp.out_dim:
        raise ValueError("mean and variance heads disagree on latent size")
    return GaussianParams(mlp2(h, mu_mlp), clip(mlp2(h, sigma_mlp), LOG_VAR_MIN, LOG_VAR_MAX))


def reparameterize(g: GaussianParams, eps) -> Tensor:
    """``mu + exp(log_var / 2) * eps`` with ``eps`` supplied by the caller."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != g.mu.shape:
        raise ValueError(f"eps shape {eps.shape} != {g.mu.shape}")
    return g.mu + exp(g.log_var * 0.5) * eps


def kl_divergence(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis.

    Returns a scalar for 1-D inputs and a ``[B]`` tensor for ``[B, d_z]``.
    """
    if q.mu.shape != p.mu.shape:
        raise ValueError(f"KL between shapes {q.mu.shape} and {p.mu.shape}")
    diff = sub(q.mu, p.mu)
    ratio = exp(sub(q.log_var, p.log_var))
    maha = diff * diff * exp(p.log_var * -1.0)
    terms = ratio + maha - 1.0 - sub(q.log_var, p.log_var)
    return tsum(terms, axis=-1) * 0.5


def product_of_experts(gx: GaussianParams, gk: GaussianParams) -> GaussianParams:
    """Fuse two diagonal Gaussians by adding precisions.

    ``1/var = 1/var_x + 1/var_k`` and ``mu = var * (mu_x/var_x + mu_k/var_k)``.
    The result's log-variance is clamped like a head output.
    """
    if gx.mu.shape != gk.mu.shape:
        raise ValueError(f"cannot fuse shapes {gx.mu.shape} and {gk.mu.shape}")
    prec_x = exp(gx.log_var * -1.0)
    prec_k = exp(gk.log_var * -1.0)
    prec = prec_x + prec_k
    log_var = clip(log(prec) * -1.0, LOG_VAR_MIN, LOG_VAR_MAX)
    mu = (gx.mu * prec_x + gk.mu * prec_k) * exp(log(prec) * -1.0)
    return GaussianParams(mu, log_var)
