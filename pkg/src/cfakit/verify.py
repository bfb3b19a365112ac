"""Quick self-checks of the core identities, run by ``cfakit verify``.

Each check recomputes a quantity two independent ways (or against a known
closed-form value) and reports the discrepancy next to its tolerance. The
full pytest suite goes further; this is the subset that runs in seconds
without the test tree installed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from cfakit import diffcore as dc
from cfakit.augraph import build_cooccurrence, eckart_young_residual, jacobi_eigh, mf_residual, random_world
from cfakit.distributions import (
    GammaParams,
    GaussianParams,
    WeibullParams,
    gaussian_entropy,
    gaussian_kl,
    weibull_entropy,
    weibull_gamma_kl,
)
from cfakit.encoder import forward, init_encoder
from cfakit.evalsuite import PavpuCounts
from cfakit.losses import PairBatch, cfa_loss, cnfa_loss, population_spectral_loss, spectral_loss


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tolerance)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def check_mf_identity(seed: int) -> CheckResult:
    rng = _rng(seed)
    world = random_world(6, 20, rng)
    cm = build_cooccurrence(world)
    f = rng.standard_normal((cm.n, 4))
    lhs = float(population_spectral_loss(cm, f).data) + float(np.sum(cm.Abar**2))
    rhs = float(mf_residual(cm, np.sqrt(cm.d_marg)[:, None] * f))
    return CheckResult("population loss + ||Abar||^2 == mf residual", abs(lhs - rhs), 1e-10)


def check_eckart_young(seed: int) -> CheckResult:
    rng = _rng(seed)
    cm = build_cooccurrence(random_world(5, 16, rng))
    vals, vecs = jacobi_eigh(cm.Abar)
    d = 4
    F = vecs[:, :d] * np.sqrt(np.maximum(vals[:d], 0.0))
    gap = abs(float(mf_residual(cm, F)) - eckart_young_residual(vals, d))
    return CheckResult("truncated eigendecomposition attains the Eckart-Young residual", gap, 1e-10)


def check_weibull_gamma_kl_zero(seed: int) -> CheckResult:
    worst = 0.0
    for lam in (0.5, 1.0, 4.0):
        kl = weibull_gamma_kl(WeibullParams([1.0], [lam]), GammaParams([1.0], [1.0 / lam]))
        worst = max(worst, abs(float(kl.data)))
    return CheckResult("KL(Weibull(1,l) || Gamma(1,1/l)) == 0", worst, 1e-12)


def check_gaussian_kl_zero(seed: int) -> CheckResult:
    rng = _rng(seed)
    mu = rng.standard_normal(5)
    s2 = rng.uniform(0.2, 3.0, 5)
    kl = gaussian_kl(GaussianParams(mu, s2), GaussianParams(mu, s2))
    return CheckResult("KL(q || q) == 0 for Gaussians", abs(float(kl.data)), 1e-12)


def check_entropies(seed: int) -> CheckResult:
    h_w = float(weibull_entropy(WeibullParams(np.ones(16), np.ones(16))).data)
    h_g = float(gaussian_entropy(GaussianParams(np.zeros(3), np.ones(3))).data)
    err = max(abs(h_w - 16.0), abs(h_g - 1.5 * math.log(2 * math.pi * math.e)))
    return CheckResult("closed-form entropies at unit parameters", err, 1e-12)


def check_gradients(seed: int) -> CheckResult:
    rng = _rng(seed)

    def fn(x):
        y = dc.softplus(x) + 0.5
        return (dc.lgamma(y) + dc.digamma(y) * dc.sqrt(y)).sum() + dc.logsumexp(x.reshape(2, 3), axis=1).sum()

    worst = max(dc.finite_diff_check(fn, rng.normal(0, 1.5, 6)) for _ in range(5))
    return CheckResult("composite gradient vs central differences", worst, 1e-5)


def check_limit_reductions(seed: int) -> CheckResult:
    rng = _rng(seed)
    x = rng.standard_normal((8, 5))
    batch = PairBatch(x, x + 0.1 * rng.standard_normal(x.shape))
    worst = 0.0
    for head, loss in (("gaussian", cfa_loss), ("weibull", cnfa_loss)):
        m = init_encoder(5, 3, head, hidden=(7,), h_dim=4, seed=seed)
        lv = loss(m, batch, 1.0, mode="deterministic")
        z, _ = forward(m, batch.x, mode="deterministic")
        zp, _ = forward(m, batch.x_pos, mode="deterministic")
        ref = spectral_loss(z, zp)
        worst = max(worst, 0.0 if float(lv.total.data) == float(ref.data) else math.inf)
    return CheckResult("deterministic variational losses equal spectral loss of means", worst, 0.0)


def check_pavpu_identity(seed: int) -> CheckResult:
    c = PavpuCounts(8, 1, 1, 0)
    err = max(abs(c.pavpu - 0.8), abs(c.top1 - 0.9))
    return CheckResult("PAvPU and top-1 from counts (8,1,1,0)", err, 0.0)


CHECKS: tuple[Callable[[int], CheckResult], ...] = (
    check_mf_identity,
    check_eckart_young,
    check_weibull_gamma_kl_zero,
    check_gaussian_kl_zero,
    check_entropies,
    check_gradients,
    check_limit_reductions,
    check_pavpu_identity,
)


def run_checks(seed: int = 0) -> list[CheckResult]:
    return [check(seed) for check in CHECKS]
