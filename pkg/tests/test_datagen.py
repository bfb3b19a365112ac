import math

import numpy as np
import pytest

from cfakit.augraph import build_cooccurrence, world_to_csv
from cfakit.datagen import (
    HETEROSCEDASTIC_CLUSTER,
    REFERENCE_CLUSTER,
    ClusterWorldConfig,
    make_cluster_world,
    make_factor_world,
)
from cfakit.errors import ContractError
from cfakit.evalsuite import linear_probe, natural_split


def test_reference_world_shape():
    w = make_cluster_world(REFERENCE_CLUSTER)
    assert (w.n_natural, w.n_aug, w.feature_dim) == (256, 1024, 32)
    assert np.bincount(w.labels).tolist() == [128] * 8


def test_zero_noise_gives_identical_augmentations_and_block_diagonal_abar():
    cfg = ClusterWorldConfig(num_classes=2, naturals_per_class=3, augs_per_natural=2, feature_dim=4, augmentation_noise=0.0)
    w = make_cluster_world(cfg)
    np.testing.assert_array_equal(w.features[0::2], w.features[1::2])
    cm = build_cooccurrence(w)
    owner = w.owner()
    off_block = owner[:, None] != owner[None, :]
    assert np.all(cm.Abar[off_block] == 0.0)


def test_two_separated_classes_are_linearly_separable():
    cfg = ClusterWorldConfig(num_classes=2, class_center_scale=20.0, seed=3)
    w = make_cluster_world(cfg)
    res = linear_probe(w.features, w.labels, natural_split(w, 0.25, 0))
    assert res.accuracy >= 0.99


def test_same_seed_same_bytes():
    a = world_to_csv(make_cluster_world(ClusterWorldConfig(seed=5, naturals_per_class=4)))
    b = world_to_csv(make_cluster_world(ClusterWorldConfig(seed=5, naturals_per_class=4)))
    c = world_to_csv(make_cluster_world(ClusterWorldConfig(seed=6, naturals_per_class=4)))
    assert a == b and a != c


def test_heteroscedastic_noise_is_larger_in_noisy_classes():
    cfg = ClusterWorldConfig(heteroscedastic=True, naturals_per_class=64, sphere_radius=None)
    w = make_cluster_world(cfg)
    assert w.metadata["noisy_classes"] == [4, 5, 6, 7]
    spread = [np.mean(np.var(w.features[w.labels == c], axis=0)) for c in range(8)]
    assert min(spread[4:]) > 4 * max(spread[:4])


def test_heteroscedastic_preset_lies_on_sphere():
    w = make_cluster_world(HETEROSCEDASTIC_CLUSTER)
    np.testing.assert_allclose(np.linalg.norm(w.features, axis=1), 6.0, rtol=1e-12)
    assert w.n_aug == 4096


@pytest.mark.parametrize("component", ["augmentation", "natural"])
def test_noisy_component_selects_noise_source(component):
    cfg = ClusterWorldConfig(heteroscedastic=True, noisy_component=component, naturals_per_class=64, augs_per_natural=8)
    w = make_cluster_world(cfg)
    within = []  # mean variance of augmentations around their natural
    for c in (0, 7):
        feats = w.features[w.labels == c].reshape(64, 8, -1)
        within.append(np.mean(np.var(feats, axis=1)))
    if component == "augmentation":
        assert within[1] > 8 * within[0]
    else:
        assert within[1] < 2 * within[0]


def test_config_validation():
    with pytest.raises(ContractError):
        ClusterWorldConfig(num_classes=0)
    with pytest.raises(ContractError):
        ClusterWorldConfig(augmentation_noise=-1.0)
    with pytest.raises(ContractError):
        ClusterWorldConfig(noisy_component="labels")
    with pytest.raises(ContractError):
        ClusterWorldConfig(sphere_radius=0.0)


def test_factor_world_grid():
    w = make_factor_world()
    assert w.n_natural == 16 and w.n_aug == 64
    assert w.metadata["factor_entropy"] == [math.log(4)] * 2
    assert sorted(map(tuple, np.unique(w.metadata["factors"], axis=0).tolist())) == [
        (a, b) for a in range(4) for b in range(4)
    ]


def test_factor_subspaces_are_disjoint():
    w = make_factor_world(num_factors=3, D=9, seed=2)
    dirs = w.metadata["directions"]
    gram = dirs @ dirs.T
    np.testing.assert_allclose(gram, np.eye(3), atol=1e-15)
    supports = [set(np.flatnonzero(d)) for d in dirs]
    assert all(supports[i].isdisjoint(supports[j]) for i in range(3) for j in range(i + 1, 3))


def test_factor_world_validation():
    with pytest.raises(ContractError):
        make_factor_world(num_factors=1)
    with pytest.raises(ContractError):
        make_factor_world(num_factors=4, D=3)
