"""Contrastive objectives over minibatches of positive pairs.

Negatives for anchor ``i`` are the positives of the other anchors in the
batch (``M = B - 1``). The variational objectives use the spectral loss on
reparameterized samples as reconstruction term and add a KL penalty:

    total = -2 E[theta_x . theta_x+] + E[(theta_x . theta_x-)^2] + beta * KL
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from cfakit import diffcore as dc
from cfakit.augraph import CoMatrix
from cfakit.diffcore import Tensor, as_tensor
from cfakit.distributions import (
    GammaParams,
    GaussianParams,
    gaussian_kl,
    weibull_gamma_kl,
)
from cfakit.encoder import EncoderModel, forward, point_estimate
from cfakit.errors import ContractError, DimensionError


@dataclass
class PairBatch:
    x: np.ndarray
    x_pos: np.ndarray
    natural_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    aug_ids: Optional[np.ndarray] = None
    pos_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.x_pos = np.asarray(self.x_pos, dtype=np.float64)
        if self.x.shape != self.x_pos.shape or self.x.ndim != 2:
            raise DimensionError("anchors and positives must be matching (B, D) arrays")

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class LossValue:
    total: Tensor
    recon_term: Tensor
    kl_term: Tensor

    def as_floats(self) -> tuple[float, float, float]:
        return (float(self.total.data), float(self.recon_term.data), float(self.kl_term.data))


def _check_pair(z: Tensor, z_pos: Tensor) -> None:
    if z.ndim != 2 or z.shape != z_pos.shape:
        raise DimensionError(f"embedding shapes {z.shape} and {z_pos.shape} must match (B, d)")


def _diag(S: Tensor) -> Tensor:
    return (S * np.eye(S.shape[0])).sum(axis=1)


def info_nce(z, z_pos, temperature: float = 0.5) -> Tensor:
    """InfoNCE over L2-normalized rows, in-batch negatives."""
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    z, z_pos = as_tensor(z), as_tensor(z_pos)
    _check_pair(z, z_pos)

    def normalize(t):
        return t / dc.sqrt((t * t).sum(axis=1, keepdims=True) + 1e-12)

    logits = dc.matmul(normalize(z), normalize(z_pos).T) / temperature
    return (dc.logsumexp(logits, axis=1) - _diag(logits)).mean()


def spectral_loss(z, z_pos, z_neg=None) -> Tensor:
    """-2 mean_i z_i.z+_i + mean over negative pairs of (z_i.z-_j)^2.

    Without ``z_neg`` the negatives are ``z_pos[j]`` for ``j != i``; with it
    every row of ``z_neg`` is a negative for every anchor.
    """
    z, z_pos = as_tensor(z), as_tensor(z_pos)
    _check_pair(z, z_pos)
    B = z.shape[0]
    if z_neg is None:
        if B < 2:
            raise ContractError("in-batch negatives need B >= 2")
        S = dc.matmul(z, z_pos.T)
        d = _diag(S)
        pos = d.mean()
        neg = ((S * S).sum() - (d * d).sum()) / (B * (B - 1))
    else:
        z_neg = as_tensor(z_neg)
        pos = (z * z_pos).sum(axis=1).mean()
        N = dc.matmul(z, z_neg.T)
        neg = (N * N).mean()
    return -2.0 * pos + neg


def population_spectral_loss(cm: CoMatrix, f) -> Tensor:
    """Exact spectral loss of embedding table ``f`` (one row per augmented
    sample), with positives from ``A`` and independent negatives from the
    marginal. Equals ``mf_residual(cm, sqrt(P) f) - ||Abar||_F^2``.
    """
    f = as_tensor(f)
    if f.ndim != 2 or f.shape[0] != cm.n:
        raise DimensionError(f"embedding table must have {cm.n} rows")
    G = dc.matmul(f, f.T)
    pp = np.outer(cm.d_marg, cm.d_marg)
    return -2.0 * (G * cm.A).sum() + (G * G * pp).sum()


def _zero() -> Tensor:
    return Tensor(0.0)


def cfa_loss(
    m: EncoderModel,
    batch: PairBatch,
    beta: float = 1.0,
    noise=None,
    mode: str = "stochastic",
) -> LossValue:
    """Gaussian contrastive factor analysis objective with N(0, I) prior.

    ``noise`` is a pair of standard-normal arrays ``(eps, eps_pos)`` shaped
    ``(B, d)``. In deterministic mode the total is exactly the spectral loss
    of the posterior means; the KL term is still reported.
    """
    if m.head_kind != "gaussian":
        raise ContractError("cfa_loss needs a gaussian encoder")
    return _variational_loss(m, batch, beta, noise, mode, _gaussian_kl_to_standard)


def cnfa_loss(
    m: EncoderModel,
    batch: PairBatch,
    beta: float = 1.0,
    noise=None,
    mode: str = "stochastic",
    prior: Optional[GammaParams] = None,
) -> LossValue:
    """Weibull-posterior contrastive non-negative factor analysis objective.

    The prior defaults to Gamma(1, 1); ``noise`` holds uniform draws.
    """
    if m.head_kind != "weibull":
        raise ContractError("cnfa_loss needs a weibull encoder")
    prior = prior if prior is not None else GammaParams(1.0, 1.0)
    return _variational_loss(m, batch, beta, noise, mode, lambda q: weibull_gamma_kl(q, prior))


def _gaussian_kl_to_standard(q: GaussianParams) -> Tensor:
    shape = q.mu.shape
    return gaussian_kl(q, GaussianParams(np.zeros(shape), np.ones(shape)))


def _variational_loss(m, batch, beta, noise, mode, kl_fn) -> LossValue:
    if beta < 0:
        raise ContractError("beta must be non-negative")
    if mode == "stochastic":
        if noise is None:
            raise ContractError("stochastic loss needs noise for anchors and positives")
        eps, eps_pos = noise
    else:
        eps = eps_pos = None
    theta, post = forward(m, batch.x, eps, mode)
    theta_pos, post_pos = forward(m, batch.x_pos, eps_pos, mode)
    recon = spectral_loss(theta, theta_pos)
    B = len(batch)
    kl = (kl_fn(post).sum() + kl_fn(post_pos).sum()) / (2 * B)
    if mode == "deterministic":
        return LossValue(recon, recon, kl)
    return LossValue(recon + beta * kl, recon, kl)


def deterministic_loss(m: EncoderModel, batch: PairBatch, kind: str, temperature: float = 0.5) -> LossValue:
    """Spectral or InfoNCE loss on posterior means (no KL)."""
    z, _ = forward(m, batch.x, mode="deterministic")
    z_pos, _ = forward(m, batch.x_pos, mode="deterministic")
    if kind == "spectral":
        val = spectral_loss(z, z_pos)
    elif kind == "infonce":
        val = info_nce(z, z_pos, temperature)
    else:
        raise ContractError(f"unknown deterministic loss {kind!r}")
    return LossValue(val, val, _zero())


def mean_embeddings(m: EncoderModel, x) -> Tensor:
    _, post = forward(m, x, mode="deterministic")
    return point_estimate(post)
