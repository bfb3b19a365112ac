"""Reparameterizable Gaussian and Weibull posteriors and the Gamma prior.

All parameter containers hold :class:`~cfakit.diffcore.Tensor` values so the
samplers, KL terms and entropies are differentiable. Parameters may be 1-D
(one latent vector) or 2-D (a batch of rows); reductions run over the last
axis, so a batch yields one value per row. A variance or shape parameter of
width 1 broadcasts over the latent dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cfakit import diffcore as dc
from cfakit.diffcore import EULER_GAMMA, Tensor, as_tensor
from cfakit.errors import DimensionError, DomainError

K_MIN = 0.05
K_MAX = 75.0
UNIFORM_EPS = 1e-7

_LOG_2PI = math.log(2.0 * math.pi)


def _broadcast_like(x: Tensor, like: Tensor) -> Tensor:
    if x.shape == like.shape:
        return x
    try:
        np.broadcast_shapes(x.shape, like.shape)
    except ValueError as exc:
        raise DimensionError(f"parameter shapes {x.shape} and {like.shape} disagree") from exc
    return x * np.ones(like.shape)


@dataclass
class GaussianParams:
    mu: Tensor
    sigma2: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.sigma2 = as_tensor(self.sigma2)
        if not np.all(np.isfinite(self.mu.data)):
            raise DomainError("Gaussian mean must be finite")
        if np.any(~(self.sigma2.data > 0)):
            raise DomainError("Gaussian variance must be strictly positive")
        _broadcast_like(self.sigma2, self.mu)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class WeibullParams:
    """Weibull(k, lam) with shape ``k`` clamped into [K_MIN, K_MAX]."""

    k: Tensor
    lam: Tensor

    def __post_init__(self):
        self.k = dc.clip(as_tensor(self.k), K_MIN, K_MAX)
        self.lam = as_tensor(self.lam)
        if np.any(~(self.lam.data > 0)):
            raise DomainError("Weibull scale must be strictly positive")
        _broadcast_like(self.k, self.lam)

    @property
    def dim(self) -> int:
        return self.lam.shape[-1]


@dataclass
class GammaParams:
    """Gamma(alpha, beta) with ``beta`` a rate."""

    alpha: Tensor
    beta: Tensor

    def __post_init__(self):
        self.alpha = as_tensor(self.alpha)
        self.beta = as_tensor(self.beta)
        if np.any(~(self.alpha.data > 0)) or np.any(~(self.beta.data > 0)):
            raise DomainError("Gamma shape and rate must be strictly positive")


# ---------------------------------------------------------------------------
# sampling and moments
# ---------------------------------------------------------------------------


def gaussian_sample(p: GaussianParams, eps) -> Tensor:
    """theta = mu + eps * sqrt(sigma2) with standard-normal ``eps``."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != p.mu.shape:
        raise DimensionError(f"noise shape {eps.shape} != mean shape {p.mu.shape}")
    return p.mu + dc.sqrt(p.sigma2) * eps


def weibull_sample(p: WeibullParams, eps) -> Tensor:
    """Inverse-CDF draw ``lam * (-log(1 - eps)) ** (1 / k)`` from uniforms.

    ``eps`` is clamped into [1e-7, 1 - 1e-7] so the transform stays finite.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != p.lam.shape:
        raise DimensionError(f"noise shape {eps.shape} != scale shape {p.lam.shape}")
    if np.any((eps < 0.0) | (eps > 1.0)) or np.any(np.isnan(eps)):
        raise DomainError("uniform draws must lie in [0, 1]")
    eps = np.clip(eps, UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    log_e = np.log(-np.log1p(-eps))
    return p.lam * dc.exp(log_e / p.k)


def gamma_one_plus_inv(k) -> Tensor:
    """Gamma(1 + 1/k), differentiable in k."""
    return dc.exp(dc.lgamma(1.0 + 1.0 / as_tensor(k)))


def weibull_mean(p: WeibullParams) -> Tensor:
    return p.lam * gamma_one_plus_inv(p.k)


# ---------------------------------------------------------------------------
# KL divergences
# ---------------------------------------------------------------------------


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    s1 = _broadcast_like(q.sigma2, q.mu)
    s2 = _broadcast_like(p.sigma2, q.mu)
    diff = q.mu - p.mu
    terms = 0.5 * dc.log(s2 / s1) + (s1 + diff * diff) / (2.0 * s2) - 0.5
    return terms.sum(axis=-1)


def weibull_gamma_kl(q: WeibullParams, p: GammaParams) -> Tensor:
    """KL(Weibull(k, lam) || Gamma(alpha, beta)), summed over the last axis."""
    k = _broadcast_like(q.k, q.lam)
    lam = q.lam
    alpha = _broadcast_like(p.alpha, lam)
    beta = _broadcast_like(p.beta, lam)
    terms = (
        EULER_GAMMA * alpha / k
        - alpha * dc.log(lam)
        + dc.log(k)
        + beta * lam * gamma_one_plus_inv(k)
        - EULER_GAMMA
        - 1.0
        - alpha * dc.log(beta)
        + dc.lgamma(alpha)
    )
    return terms.sum(axis=-1)


# ---------------------------------------------------------------------------
# entropies
# ---------------------------------------------------------------------------


def gaussian_entropy(p: GaussianParams) -> Tensor:
    """Sum over dimensions of ln(sigma * sqrt(2 pi e))."""
    s2 = _broadcast_like(p.sigma2, p.mu)
    return (0.5 * dc.log(s2) + 0.5 * (_LOG_2PI + 1.0)).sum(axis=-1)


def weibull_entropy(p: WeibullParams) -> Tensor:
    """Sum over dimensions of (k - 1) gamma / k + ln(lam / k) + 1."""
    k = _broadcast_like(p.k, p.lam)
    return ((k - 1.0) * EULER_GAMMA / k + dc.log(p.lam / k) + 1.0).sum(axis=-1)


# ---------------------------------------------------------------------------
# log densities (plain numpy; used by Monte-Carlo oracles)
# ---------------------------------------------------------------------------


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _positive_support(theta: np.ndarray) -> None:
    if np.any(~(theta > 0)):
        raise DomainError("density evaluated outside the positive support")


def gaussian_logpdf(theta, p: GaussianParams) -> np.ndarray:
    theta = _np(theta)
    mu, s2 = np.broadcast_arrays(p.mu.data, p.sigma2.data)
    return np.sum(-0.5 * (_LOG_2PI + np.log(s2)) - (theta - mu) ** 2 / (2.0 * s2), axis=-1)


def weibull_logpdf(theta, p: WeibullParams) -> np.ndarray:
    theta = _np(theta)
    _positive_support(theta)
    k, lam = np.broadcast_arrays(p.k.data, p.lam.data)
    z = theta / lam
    return np.sum(np.log(k / lam) + (k - 1.0) * np.log(z) - z**k, axis=-1)


def gamma_logpdf(theta, p: GammaParams) -> np.ndarray:
    theta = _np(theta)
    _positive_support(theta)
    a = p.alpha.data
    b = p.beta.data
    return np.sum(a * np.log(b) - dc.lgamma_np(a) + (a - 1.0) * np.log(theta) - b * theta, axis=-1)


def weibull_cdf(theta, k, lam) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return -np.expm1(-((np.maximum(theta, 0.0) / lam) ** k))
