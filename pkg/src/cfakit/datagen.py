"""Synthetic enumerable worlds: class clusters and factor grids."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from cfakit.augraph import AugmentationWorld
from cfakit.errors import ContractError


@dataclass
class ClusterWorldConfig:
    num_classes: int = 8
    naturals_per_class: int = 32
    augs_per_natural: int = 4
    feature_dim: int = 32
    class_center_scale: float = 6.0
    augmentation_noise: float = 0.5
    heteroscedastic: bool = False
    seed: int = 0
    # within-class spread of natural samples around their center
    natural_noise: float = 1.0
    # classes whose noise is multiplied by ``noise_multiplier`` when heteroscedastic;
    # None means the upper half of the class indices
    noisy_classes: Optional[list] = None
    noise_multiplier: float = 4.0
    # which noise the multiplier scales: "augmentation", "natural" or "both"
    noisy_component: str = "both"
    # when set, every augmented feature vector is rescaled to this L2 norm, so
    # noise level cannot leak into the encoder through input magnitude
    sphere_radius: Optional[float] = None

    def __post_init__(self):
        counts = (self.num_classes, self.naturals_per_class, self.augs_per_natural, self.feature_dim)
        if min(counts) < 1:
            raise ContractError("cluster world counts must be >= 1")
        if min(self.augmentation_noise, self.natural_noise, self.class_center_scale) < 0:
            raise ContractError("noise levels and center scale must be >= 0")
        if self.noisy_component not in ("augmentation", "natural", "both"):
            raise ContractError("noisy_component must be 'augmentation', 'natural' or 'both'")
        if self.sphere_radius is not None and not self.sphere_radius > 0:
            raise ContractError("sphere_radius must be positive")

    def resolved_noisy_classes(self) -> list[int]:
        if not self.heteroscedastic:
            return []
        if self.noisy_classes is not None:
            return sorted(int(c) for c in self.noisy_classes)
        return list(range(self.num_classes // 2, self.num_classes))

    def to_dict(self) -> dict:
        return asdict(self)


REFERENCE_CLUSTER = ClusterWorldConfig()

# half the classes carry x4 noise; inputs projected to a sphere of radius 6 so
# the noise level is not readable from input magnitude
HETEROSCEDASTIC_CLUSTER = ClusterWorldConfig(
    naturals_per_class=128,
    heteroscedastic=True,
    sphere_radius=6.0,
)


def _class_centers(cfg: ClusterWorldConfig, rng: np.random.Generator) -> np.ndarray:
    C, D = cfg.num_classes, cfg.feature_dim
    if C <= D:
        # simplex vertices (scaled basis vectors) under a random rotation
        Q, _ = np.linalg.qr(rng.standard_normal((D, D)))
        centers = Q[:, :C].T
    else:
        centers = rng.standard_normal((C, D))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    return cfg.class_center_scale * centers


def make_cluster_world(cfg: ClusterWorldConfig) -> AugmentationWorld:
    """Gaussian class clusters; each natural sample has ``augs_per_natural``
    jittered copies, chosen uniformly by its kernel row.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    centers = _class_centers(cfg, rng)
    noisy = set(cfg.resolved_noisy_classes())
    n_nat = cfg.num_classes * cfg.naturals_per_class
    n_aug = n_nat * cfg.augs_per_natural
    D = cfg.feature_dim
    features = np.empty((n_aug, D))
    labels = np.empty(n_aug, dtype=np.int64)
    K = np.zeros((n_nat, n_aug))
    nat_label = np.repeat(np.arange(cfg.num_classes), cfg.naturals_per_class)
    for i in range(n_nat):
        c = int(nat_label[i])
        mult = cfg.noise_multiplier if c in noisy else 1.0
        nat_mult = mult if cfg.noisy_component in ("natural", "both") else 1.0
        aug_mult = mult if cfg.noisy_component in ("augmentation", "both") else 1.0
        natural = centers[c] + nat_mult * cfg.natural_noise * rng.standard_normal(D)
        lo = i * cfg.augs_per_natural
        hi = lo + cfg.augs_per_natural
        jitter = rng.standard_normal((cfg.augs_per_natural, D))
        features[lo:hi] = natural + aug_mult * cfg.augmentation_noise * jitter
        labels[lo:hi] = c
        K[i, lo:hi] = 1.0 / cfg.augs_per_natural
    if cfg.sphere_radius is not None:
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        features *= cfg.sphere_radius / np.maximum(norms, 1e-300)
    probs = np.full(n_nat, 1.0 / n_nat)
    meta = {"generator": "cluster", "config": cfg.to_dict(), "noisy_classes": sorted(noisy)}
    return AugmentationWorld(probs, K, features, labels, meta)


def make_factor_world(
    num_factors: int = 2,
    values_per_factor: int = 4,
    D: int = 8,
    seed: int = 0,
    augs_per_natural: int = 4,
    jitter: float = 0.05,
    spacing: float = 1.0,
) -> AugmentationWorld:
    """Naturals enumerate the full factor grid; factor ``f`` is embedded
    linearly along a random unit direction inside its own block of
    coordinates, so different factors occupy disjoint subspaces.

    ``metadata["factors"]`` holds the factor values of every augmented sample
    and ``metadata["factor_entropy"]`` the (uniform) entropy of each factor.
    """
    if num_factors < 2:
        raise ContractError("a factor world needs at least two factors")
    if D < num_factors:
        raise ContractError("need at least one feature coordinate per factor")
    rng = np.random.Generator(np.random.PCG64(seed))
    blocks = np.array_split(np.arange(D), num_factors)
    directions = np.zeros((num_factors, D))
    for f, idx in enumerate(blocks):
        u = rng.standard_normal(len(idx))
        directions[f, idx] = u / np.linalg.norm(u)
    grid = np.array(list(itertools.product(range(values_per_factor), repeat=num_factors)), dtype=np.int64)
    n_nat = grid.shape[0]
    n_aug = n_nat * augs_per_natural
    centered = spacing * (grid - (values_per_factor - 1) / 2.0)
    naturals = centered @ directions
    features = np.repeat(naturals, augs_per_natural, axis=0)
    features = features + jitter * rng.standard_normal((n_aug, D))
    factors = np.repeat(grid, augs_per_natural, axis=0)
    K = np.zeros((n_nat, n_aug))
    for i in range(n_nat):
        K[i, i * augs_per_natural : (i + 1) * augs_per_natural] = 1.0 / augs_per_natural
    probs = np.full(n_nat, 1.0 / n_nat)
    meta = {
        "generator": "factor",
        "factors": factors,
        "directions": directions,
        "blocks": [b.tolist() for b in blocks],
        "factor_entropy": [math.log(values_per_factor)] * num_factors,
    }
    return AugmentationWorld(probs, K, features, factors[:, 0].copy(), meta)
