import itertools
import math

import numpy as np
import pytest
from scipy import stats

from cfakit.augraph import random_world
from cfakit.distributions import GaussianParams
from cfakit.encoder import SOFTPLUS_INV_ONE, init_encoder
from cfakit.errors import ContractError
from cfakit.evalsuite import (
    CriticConfig,
    PavpuCounts,
    bucket_sizes,
    buckets_csv,
    entropy_buckets,
    entropy_scores,
    extract_features,
    infonce_mi,
    linear_probe,
    make_records,
    mark_uncertain,
    natural_split,
    pavpu,
    pavpu_csv,
    positive_pair_inputs,
    posterior_entropy,
    probe_csv,
    sepin_at_k,
    sepin_csv,
    train_critic,
    uncertainty_csv,
)


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


# --- features and probe ------------------------------------------------------


def test_extract_features_are_posterior_means():
    w = random_world(4, 10, rng(0), D=3)
    g = init_encoder(3, 2, "gaussian", hidden=(5,), h_dim=4)
    f1 = extract_features(g, w)
    assert f1.shape == (10, 2)
    assert f1.tobytes() == extract_features(g, w).tobytes()
    wb = init_encoder(3, 2, "weibull", hidden=(5,), h_dim=4)
    assert np.all(extract_features(wb, w) > 0)


def test_natural_split_keeps_augmentations_together():
    w = random_world(12, 40, rng(1), density=0.2)
    tr, te = natural_split(w, 0.25, seed=3)
    owner = w.owner()
    assert set(owner[tr]).isdisjoint(owner[te])
    assert sorted(np.concatenate([tr, te])) == list(range(40))
    assert len(set(owner[te])) == 3


def test_probe_separable_blobs():
    r = rng(2)
    X = np.vstack([r.normal(-3, 1, (200, 2)), r.normal(3, 1, (200, 2))])
    y = np.repeat([0, 1], 200)
    perm = r.permutation(400)
    res = linear_probe(X, y, (perm[:300], perm[300:]))
    assert res.accuracy >= 0.99


def test_probe_shuffled_labels_near_chance():
    r = rng(3)
    n, C = 4000, 4
    X = r.standard_normal((n, 5))
    y = r.integers(0, C, n)
    res = linear_probe(X, y, (np.arange(2000), np.arange(2000, n)))
    se = math.sqrt((1 / C) * (1 - 1 / C) / 2000)
    assert abs(res.accuracy - 1 / C) <= 3 * se


def test_probe_identical_features_predicts_majority():
    X = np.ones((50, 3))
    y = np.array([0] * 10 + [2] * 25 + [1] * 15)
    idx = np.arange(50)
    res = linear_probe(X, y, (idx, idx))
    assert np.all(res.predictions == 2)
    assert res.accuracy == pytest.approx(0.5)


def test_probe_converges_and_rejects_single_class():
    r = rng(4)
    X = r.standard_normal((60, 2))
    y = (X[:, 0] > 0).astype(int)
    res = linear_probe(X, y, (np.arange(40), np.arange(40, 60)))
    assert res.grad_norm < 1e-6 or res.iterations == 10_000
    with pytest.raises(ContractError):
        linear_probe(X, np.zeros(60, dtype=int), (np.arange(40), np.arange(40, 60)))


# --- entropy -----------------------------------------------------------------


def test_entropy_examples():
    m = init_encoder(3, 16, "gaussian", hidden=(4,), h_dim=4)
    m.params["sigma_W"].data[:] = 0.0
    h = entropy_scores(m, rng(5).standard_normal((3, 3)))
    np.testing.assert_allclose(h, 16 * math.log(math.sqrt(2 * math.pi * math.e)), atol=1e-12)
    assert h[0] == pytest.approx(22.703, abs=1e-3)

    w = init_encoder(3, 16, "weibull", hidden=(4,), h_dim=4)
    w.params["k_W"].data[:] = 0.0
    w.params["lam_W"].data[:] = 0.0
    w.params["lam_b"].data[:] = math.log(math.expm1(1.0 - 1e-6))
    np.testing.assert_allclose(entropy_scores(w, np.zeros((2, 3))), 16.0, atol=1e-10)
    assert SOFTPLUS_INV_ONE == pytest.approx(math.log(math.e - 1))


def test_doubling_sigma_adds_d_log_2():
    mu = np.zeros((4, 16))
    s2 = rng(6).uniform(0.1, 2.0, (4, 16))
    a = posterior_entropy(GaussianParams(mu, s2))
    b = posterior_entropy(GaussianParams(mu, 4 * s2))
    np.testing.assert_allclose(b - a, 16 * math.log(2), atol=1e-12)


def test_entropy_undefined_for_deterministic_head():
    with pytest.raises(ContractError):
        entropy_scores(init_encoder(3, 2, "deterministic", hidden=(4,), h_dim=4), np.zeros((1, 3)))


# --- PAvPU -----------------------------------------------------------------


def test_pavpu_counts_formula():
    c = PavpuCounts(8, 1, 1, 0)
    assert c.pavpu == 0.8
    assert c.top1 == 0.9


def test_pavpu_all_accurate_all_certain():
    recs = make_records(range(10), np.arange(10.0), [1] * 10, [1] * 10)
    counts, value = pavpu(recs, 0)
    assert value == 1.0 and counts.n_ac == 10


def test_pavpu_perfect_calibration():
    ent = np.arange(20.0)
    labels = np.zeros(20, dtype=int)
    preds = labels.copy()
    preds[-5:] = 1  # the five highest-entropy samples are the wrong ones
    counts, value = pavpu(make_records(range(20), ent, preds, labels), 5)
    assert value == 1.0 >= counts.top1
    assert counts.top1 == 0.75


def test_pavpu_anti_calibration_is_below_top1():
    ent = np.arange(20.0)
    labels = np.zeros(20, dtype=int)
    preds = labels.copy()
    preds[:5] = 1  # wrong ones are the least entropic
    counts, value = pavpu(make_records(range(20), ent, preds, labels), 5)
    assert value <= counts.top1


def test_top1_reconstructed_from_counts():
    r = rng(7)
    labels = r.integers(0, 3, 200)
    preds = np.where(r.random(200) < 0.7, labels, r.integers(0, 3, 200))
    recs = make_records(range(200), r.random(200), preds, labels)
    for M in (0, 17, 64, 200):
        counts, _ = pavpu(recs, M)
        assert counts.total == 200
        assert counts.top1 == np.mean(preds == labels)
        # identity between the two scores
        assert counts.pavpu - counts.top1 == pytest.approx((M - 2 * counts.n_au) / 200, abs=1e-15)


def test_pavpu_permutation_invariant():
    r = rng(8)
    labels = r.integers(0, 2, 50)
    preds = r.integers(0, 2, 50)
    ent = r.integers(0, 5, 50).astype(float)  # plenty of ties
    recs = make_records(range(50), ent, preds, labels)
    base = pavpu(recs, 13)
    for seed in range(5):
        perm = rng(100 + seed).permutation(50)
        assert pavpu([recs[i] for i in perm], 13) == base


def test_ties_broken_by_sample_id():
    recs = make_records([5, 2, 9], [1.0, 1.0, 1.0], [0, 0, 0], [0, 0, 0])
    marked = mark_uncertain(recs, 1)
    assert [r.certain for r in marked] == [True, False, True]
    with pytest.raises(ContractError):
        mark_uncertain(recs, 4)


# --- buckets ---------------------------------------------------------------


def test_bucket_sizes_remainder_rule():
    assert bucket_sizes(103, 5) == [21, 21, 21, 20, 20]
    recs = make_records(range(103), np.arange(103.0), [0] * 103, [0] * 103)
    assert [row[1] for row in entropy_buckets(recs).rows] == [21, 21, 21, 20, 20]


def test_buckets_strictly_decreasing_accuracy():
    n = 50
    ent = np.arange(n, dtype=float)
    labels = np.zeros(n, dtype=int)
    preds = np.zeros(n, dtype=int)
    # bucket b has b wrong answers out of 10
    for b in range(5):
        preds[b * 10 : b * 10 + b] = 1
    table = entropy_buckets(make_records(range(n), ent, preds, labels))
    assert [row[3] for row in table.rows] == [1.0, 0.9, 0.8, 0.7, 0.6]
    assert table.spearman == pytest.approx(-1.0, abs=1e-12) and not table.degenerate


def test_buckets_degenerate_when_entropies_equal():
    recs = make_records(range(10), np.ones(10), [0, 1] * 5, [0] * 10)
    table = entropy_buckets(recs)
    assert table.degenerate and table.spearman == 0.0
    with pytest.raises(ContractError):
        entropy_buckets(recs[:3])


# --- SEPIN -----------------------------------------------------------------


def _factors(n, seed):
    r = rng(seed)
    return r.integers(0, 4, n).astype(float), r.integers(0, 4, n).astype(float)


def _finite_batch_optimum(B):
    # best achievable InfoNCE gap between knowing both 4-way factors and one
    k = np.arange(B)
    return float(
        np.sum(stats.binom(B - 1, 1 / 4).pmf(k) * np.log1p(k)) - np.sum(stats.binom(B - 1, 1 / 16).pmf(k) * np.log1p(k))
    )


@pytest.mark.slow
def test_sepin_two_independent_factors():
    a, b = _factors(20_000, 0)
    f = np.stack([a, b], axis=1)
    B = 4096
    res = sepin_at_k(f, f.copy(), 2, CriticConfig(eval_batch=B), rng(1))
    target = _finite_batch_optimum(B)
    assert abs(target - math.log(4)) < 2e-3
    for i in range(2):
        assert abs(res.per_dim[i] - target) <= 3 * res.per_dim_se[i]
        assert res.per_dim[i] <= math.log(B)
    assert res.mi_full <= math.log(B)


def test_sepin_duplicate_dimension_is_near_zero():
    a, b = _factors(4000, 2)
    f = np.stack([a, a, b], axis=1)
    res = sepin_at_k(f, np.stack([a, b], axis=1), 1, CriticConfig(train_steps=400, eval_batch=1024), rng(3))
    assert res.per_dim[0] <= 0.05 and res.per_dim[1] <= 0.05
    assert res.per_dim[2] > 0.5


def test_sepin_constant_dimension_is_zero():
    a, _ = _factors(2000, 4)
    f = np.stack([a, np.full_like(a, 3.0)], axis=1)
    res = sepin_at_k(f, a[:, None], 1, CriticConfig(train_steps=300, eval_batch=512), rng(5))
    assert res.per_dim[1] == 0.0
    assert res.ranking[0] == 0


def test_infonce_never_exceeds_log_batch():
    r = rng(6)
    x = r.standard_normal((300, 3))
    z = x + 0.01 * r.standard_normal((300, 3))
    params = train_critic(x, z, CriticConfig(train_steps=200), r)
    batches = [r.choice(300, 64, replace=False) for _ in range(5)]
    assert np.all(infonce_mi(params, x, z, batches) <= math.log(64) + 1e-12)


def test_sepin_contracts():
    f = np.zeros((10, 2))
    with pytest.raises(ContractError):
        sepin_at_k(f, f, 3)
    with pytest.raises(ContractError):
        sepin_at_k(f, np.zeros((9, 2)), 1)
    with pytest.raises(ContractError):
        sepin_at_k(f, f, 1, eval_inputs=np.zeros((10, 3)))


def test_positive_pair_inputs_come_from_the_same_natural():
    w = random_world(5, 30, rng(7), D=2, density=0.2)
    owner = w.owner()
    partner = positive_pair_inputs(w, rng(8))
    idx = [int(np.flatnonzero((w.features == row).all(axis=1))[0]) for row in partner]
    assert all(w.kernel[owner[x], idx[x]] > 0 for x in range(30))


# --- CSVs ------------------------------------------------------------------


def test_report_csv_headers():
    recs = mark_uncertain(make_records([0, 1], [0.5, 1.5], [1, 0], [1, 1]), 1)
    assert probe_csv({"test": 0.5}) == "split,accuracy\ntest,0.5\n"
    assert uncertainty_csv(recs).splitlines()[0] == "sample_id,entropy,pred,label,certain"
    assert uncertainty_csv(recs).splitlines()[2] == "1,1.5,0,1,0"
    c, _ = pavpu(recs, 1)
    assert pavpu_csv([(1, c)]).splitlines() == ["M,n_ac,n_au,n_ic,n_iu,pavpu,top1", "1,1,0,0,1,1.0,0.5"]
    table = entropy_buckets(make_records(range(5), range(5), [0] * 5, [0] * 5))
    assert buckets_csv(table).splitlines()[0] == "bucket,mean_entropy,accuracy"


def test_sepin_csv_summary_row():
    a, _ = _factors(500, 9)
    res = sepin_at_k(np.stack([a, a], 1), a[:, None], 1, CriticConfig(train_steps=50, eval_batch=128), rng(9))
    lines = sepin_csv(res).splitlines()
    assert lines[0] == "dim,mi_estimate"
    assert lines[-1].startswith("SEPIN@1,")
    assert len(lines) == 4


def test_permutation_identity_exhaustive_small():
    # every labelling of 4 samples with M=2 satisfies PAvPU - Top1 = (M - 2 n_au)/N
    for preds in itertools.product([0, 1], repeat=4):
        recs = make_records(range(4), [0.1, 0.4, 0.2, 0.3], preds, [0, 0, 0, 0])
        c, v = pavpu(recs, 2)
        assert v - c.top1 == pytest.approx((2 - 2 * c.n_au) / 4, abs=1e-15)
