"""Finite augmentation worlds, their co-occurrence matrices and the
Eckart-Young oracle for the spectral contrastive objective.

A world has ``n_natural`` natural samples drawn with ``natural_probs`` and
``n_aug`` augmented samples; ``kernel[i, x]`` is the probability that natural
sample ``i`` is augmented into ``x``. The co-occurrence matrix is

    A[x, x'] = sum_i P(i) K[i, x] K[i, x']

and ``Abar = D^{-1/2} A D^{-1/2}`` with ``D`` the diagonal of marginals.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from cfakit import diffcore as dc
from cfakit.diffcore import Tensor
from cfakit.errors import ContractError, DimensionError, DomainError, NumericError

_PROB_TOL = 1e-9


@dataclass
class AugmentationWorld:
    natural_probs: np.ndarray
    kernel: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    # free-form annotations not serialized to CSV (e.g. ground-truth factors)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.natural_probs = np.asarray(self.natural_probs, dtype=np.float64)
        self.kernel = np.atleast_2d(np.asarray(self.kernel, dtype=np.float64))
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n_nat, n_aug = self.kernel.shape
        if self.natural_probs.shape != (n_nat,):
            raise DimensionError("natural_probs length must equal kernel rows")
        if self.features.shape[0] != n_aug or self.labels.shape != (n_aug,):
            raise DimensionError("features and labels need one row per augmented sample")
        if np.any(self.natural_probs < 0) or abs(self.natural_probs.sum() - 1.0) > _PROB_TOL:
            raise DomainError("natural_probs must be non-negative and sum to 1")
        if np.any(self.kernel < 0) or np.any(np.abs(self.kernel.sum(axis=1) - 1.0) > _PROB_TOL):
            raise DomainError("each kernel row must be non-negative and sum to 1")

    @property
    def n_natural(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_aug(self) -> int:
        return self.kernel.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def owner(self) -> np.ndarray:
        """Natural sample contributing the most mass to each augmented sample."""
        return np.argmax(self.natural_probs[:, None] * self.kernel, axis=0)


@dataclass
class CoMatrix:
    A: np.ndarray
    Abar: np.ndarray
    d_marg: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        """Mask of augmented samples with a non-zero marginal."""
        return self.d_marg > 0

    @property
    def n(self) -> int:
        return self.A.shape[0]


def build_cooccurrence(world: AugmentationWorld) -> CoMatrix:
    """Exact co-occurrence matrix and its symmetric normalization.

    Augmented samples with zero marginal get zero rows/columns in ``Abar``
    and trigger a warning; samplers never draw them.
    """
    K = world.kernel
    A = K.T @ (world.natural_probs[:, None] * K)
    A = 0.5 * (A + A.T)
    d_marg = A.sum(axis=1)
    direct = world.natural_probs @ K
    if np.max(np.abs(d_marg - direct)) > 1e-12:
        raise NumericError("row sums of A disagree with the augmentation marginal")
    zero = d_marg <= 0
    if zero.any():
        warnings.warn(
            f"{int(zero.sum())} augmented samples have zero marginal and are excluded",
            RuntimeWarning,
            stacklevel=2,
        )
    inv_sqrt = np.zeros_like(d_marg)
    inv_sqrt[~zero] = 1.0 / np.sqrt(d_marg[~zero])
    Abar = inv_sqrt[:, None] * A * inv_sqrt[None, :]
    return CoMatrix(A=A, Abar=0.5 * (Abar + Abar.T), d_marg=d_marg)


# ---------------------------------------------------------------------------
# symmetric eigensolver
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _jacobi_sweeps(a, v, max_sweeps, tol):
    n = a.shape[0]
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        if off <= tol:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return -1


def jacobi_eigh(S, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns:
        (w, V): eigenvalues in descending order and the matching orthonormal
        eigenvectors as columns, with ``V @ diag(w) @ V.T == S``.

    Raises:
        ContractError: if ``S`` is not symmetric within 1e-12.
        NumericError: if the off-diagonal mass has not vanished after
            ``max_sweeps`` sweeps.
    """
    S = np.array(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"jacobi_eigh needs a square matrix, got {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if S.size and np.max(np.abs(S - S.T)) > 1e-12 * scale:
        raise ContractError("jacobi_eigh input is not symmetric")
    n = S.shape[0]
    a = np.ascontiguousarray(0.5 * (S + S.T))
    v = np.eye(n)
    fro2 = float(np.sum(a * a))
    tol = (np.finfo(np.float64).eps * max(n, 4)) ** 2 * fro2
    if _jacobi_sweeps(a, v, max_sweeps, tol) < 0:
        raise NumericError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


# ---------------------------------------------------------------------------
# spectral oracle
# ---------------------------------------------------------------------------


def spectral_embedding(cm: CoMatrix, d: int, eig=None) -> np.ndarray:
    """Optimal rank-d factor ``F`` minimizing ``||Abar - F F^T||_F^2``.

    Negative eigenvalues are clamped to zero since ``F F^T`` is PSD.
    """
    if not 1 <= d <= cm.n:
        raise ContractError(f"need 1 <= d <= {cm.n}, got {d}")
    w, V = eig if eig is not None else jacobi_eigh(cm.Abar)
    return V[:, :d] * np.sqrt(np.maximum(w[:d], 0.0))[None, :]


def eckart_young_residual(eigenvalues, d: int) -> float:
    """Minimum of ``||S - F F^T||^2`` over rank-d F given the spectrum of S."""
    w = np.sort(np.asarray(eigenvalues, dtype=np.float64))[::-1]
    kept = w[:d]
    return float(np.sum(w[d:] ** 2) + np.sum(kept[kept < 0] ** 2))


def mf_residual(cm: CoMatrix, F):
    """Squared Frobenius norm of ``Abar - F F^T``.

    Returns a float for array input and a tape-aware scalar Tensor when ``F``
    is a Tensor.
    """
    if isinstance(F, Tensor):
        if F.ndim != 2 or F.shape[0] != cm.n:
            raise DimensionError(f"F must have {cm.n} rows, got {F.shape}")
        R = cm.Abar - dc.matmul(F, F.T)
        return (R * R).sum()
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != cm.n:
        raise DimensionError(f"F must have {cm.n} rows, got {F.shape}")
    R = cm.Abar - F @ F.T
    return float(np.sum(R * R))


# ---------------------------------------------------------------------------
# world CSV format
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def world_to_csv(world: AugmentationWorld) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["natural", "id", "prob"])
    for i, p in enumerate(world.natural_probs):
        w.writerow(["natural", i, _fmt(p)])
    w.writerow(["kernel", "natural_id", "aug_id", "prob"])
    rows, cols = np.nonzero(world.kernel)
    for i, x in zip(rows, cols):
        w.writerow(["kernel", int(i), int(x), _fmt(world.kernel[i, x])])
    D = world.feature_dim
    w.writerow(["aug", "id", "label"] + [f"f{j}" for j in range(D)])
    for x in range(world.n_aug):
        w.writerow(["aug", x, int(world.labels[x])] + [_fmt(v) for v in world.features[x]])
    return buf.getvalue()


def write_world(world: AugmentationWorld, path) -> None:
    Path(path).write_bytes(world_to_csv(world).encode("utf-8"))


def world_from_csv(text: str) -> AugmentationWorld:
    naturals: dict[int, float] = {}
    kernel_entries: list[tuple[int, int, float]] = []
    augs: dict[int, tuple[int, list[float]]] = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row:
            continue
        tag = row[0]
        try:
            if tag == "natural":
                if row[1] == "id":
                    continue
                naturals[int(row[1])] = float(row[2])
            elif tag == "kernel":
                if row[1] == "natural_id":
                    continue
                kernel_entries.append((int(row[1]), int(row[2]), float(row[3])))
            elif tag == "aug":
                if row[1] == "id":
                    continue
                augs[int(row[1])] = (int(row[2]), [float(v) for v in row[3:]])
            else:
                raise ContractError(f"line {lineno}: unknown section {tag!r}")
        except (IndexError, ValueError) as exc:
            raise ContractError(f"line {lineno}: malformed {tag} row") from exc
    n_nat = len(naturals)
    n_aug = len(augs)
    if sorted(naturals) != list(range(n_nat)) or sorted(augs) != list(range(n_aug)):
        raise ContractError("natural and aug ids must be contiguous from 0")
    probs = np.array([naturals[i] for i in range(n_nat)])
    K = np.zeros((n_nat, n_aug))
    for i, x, p in kernel_entries:
        K[i, x] = p
    labels = np.array([augs[x][0] for x in range(n_aug)], dtype=np.int64)
    feats = [augs[x][1] for x in range(n_aug)]
    if len({len(f) for f in feats}) > 1:
        raise ContractError("aug rows have inconsistent feature widths")
    return AugmentationWorld(probs, K, np.array(feats, dtype=np.float64), labels)


def read_world(path) -> AugmentationWorld:
    return world_from_csv(Path(path).read_text(encoding="utf-8"))


def random_world(
    n_natural: int, n_aug: int, rng: np.random.Generator, D: int = 2, density: Optional[float] = None
) -> AugmentationWorld:
    """Random dense (or sparse) world, used by oracles and property tests."""
    probs = rng.random(n_natural) + 0.1
    probs /= probs.sum()
    K = rng.random((n_natural, n_aug))
    if density is not None:
        K *= rng.random((n_natural, n_aug)) < density
        for i in range(n_natural):
            if not K[i].any():
                K[i, rng.integers(n_aug)] = 1.0
    K /= K.sum(axis=1, keepdims=True)
    feats = rng.standard_normal((n_aug, D))
    labels = rng.integers(0, 2, size=n_aug)
    return AugmentationWorld(probs, K, feats, labels)
