import json
import time

import numpy as np
import pytest

from cfakit.augraph import AugmentationWorld, build_cooccurrence, eckart_young_residual, jacobi_eigh, random_world
from cfakit.datagen import REFERENCE_CLUSTER, make_cluster_world
from cfakit.diffcore import Tensor
from cfakit.encoder import load_encoder
from cfakit.errors import ContractError, NumericError
from cfakit.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    learning_rate_at,
    sample_pair_batch,
    steps_per_epoch,
    train,
)


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture(scope="module")
def reference_world():
    return make_cluster_world(REFERENCE_CLUSTER)


# --- config ----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(loss_kind="hinge")
    with pytest.raises(ContractError):
        TrainConfig(epochs=0)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=1)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ContractError):
        TrainConfig(loss_kind="cfa", free_table=True)


def test_config_json_round_trip(tmp_path):
    cfg = TrainConfig(loss_kind="cnfa", beta_kl=0.25, hidden=[16, 8])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(path) == cfg
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"loss_kind": "cfa", "warmup": 3})


# --- Adam ------------------------------------------------------------------


class Hp:
    learning_rate = 0.01
    adam_beta1 = 0.9
    adam_beta2 = 0.999
    adam_eps = 1e-8


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    adam_step(p, {"w": np.array([3.0, -0.2, 50.0])}, AdamState(), Hp)
    np.testing.assert_allclose(p["w"], [0.99, 1.01, 0.99], atol=1e-8)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([0.5, -2.0])}
    state = AdamState()
    for _ in range(10):
        adam_step(p, {"w": np.zeros(2)}, state, Hp)
    np.testing.assert_array_equal(p["w"], [0.5, -2.0])
    assert state.t == 10


def test_adam_updates_tensor_in_place():
    t = Tensor([1.0], requires_grad=True)
    adam_step({"t": t}, {"t": np.array([1.0])}, AdamState(), Hp)
    assert t.data[0] == pytest.approx(0.99)


def test_adam_rejects_non_finite_gradient_naming_parameter():
    with pytest.raises(NumericError, match="'bias'"):
        adam_step({"bias": np.zeros(2)}, {"bias": np.array([0.0, np.nan])}, AdamState(), Hp)


def test_adam_quadratic_bowl():
    target = np.array([3.0, -1.5, 0.25])
    scale = np.array([1.0, 4.0, 0.5])
    p = {"w": np.zeros(3)}
    state = AdamState()
    for _ in range(5000):
        adam_step(p, {"w": 2 * scale * (p["w"] - target)}, state, Hp)
    assert np.max(np.abs(p["w"] - target)) < 1e-6


def test_cosine_schedule():
    cfg = TrainConfig(lr_schedule="cosine", learning_rate=0.1)
    assert learning_rate_at(cfg, 0, 10) == pytest.approx(0.1)
    assert learning_rate_at(cfg, 5, 10) == pytest.approx(0.05)
    assert learning_rate_at(TrainConfig(), 7, 10) == 1e-3


# --- batches ---------------------------------------------------------------


def test_deterministic_kernel_gives_identical_pairs():
    w = AugmentationWorld([0.5, 0.5], np.eye(2), np.array([[1.0], [2.0]]), [0, 1])
    b = sample_pair_batch(w, rng(0), 64)
    np.testing.assert_array_equal(b.x, b.x_pos)


def test_pair_frequencies_match_cooccurrence():
    w = random_world(3, 5, rng(1))
    A = build_cooccurrence(w).A
    n = 1_000_000
    b = sample_pair_batch(w, rng(2), n)
    counts = np.zeros((5, 5))
    np.add.at(counts, (b.aug_ids, b.pos_ids), 1.0)
    freq = counts / n
    se = np.sqrt(A * (1 - A) / n)
    assert np.all(np.abs(freq - A) <= 3 * se)


def test_same_seed_same_batches():
    w = random_world(4, 9, rng(3), D=3)
    ra, rb = rng(7), rng(7)
    for _ in range(5):
        a, b = sample_pair_batch(w, ra, 16), sample_pair_batch(w, rb, 16)
        assert a.x.tobytes() == b.x.tobytes() and a.x_pos.tobytes() == b.x_pos.tobytes()


# --- training --------------------------------------------------------------


def test_free_table_reaches_eckart_young_within_one_percent():
    w = random_world(16, 64, rng(4), density=0.3)
    cm = build_cooccurrence(w)
    optimum = eckart_young_residual(jacobi_eigh(cm.Abar)[0], 8)
    t0 = time.process_time()
    res = train(TrainConfig(loss_kind="spectral", free_table=True, latent_dim=8, epochs=3000, learning_rate=0.01), w)
    assert time.process_time() - t0 < 60
    assert res.final_mf_residual <= 1.01 * optimum


@pytest.mark.parametrize("loss", ["cfa", "cnfa", "spectral", "infonce"])
def test_training_is_bit_identical(tmp_path, loss):
    w = random_world(8, 24, rng(5), D=4)
    cfg = TrainConfig(loss_kind=loss, epochs=3, batch_size=4, hidden=[8], h_dim=6, latent_dim=3)
    a = train(cfg, w, tmp_path / "a")
    b = train(cfg, w, tmp_path / "b")
    assert (tmp_path / "a" / "ckpt").read_bytes() == (tmp_path / "b" / "ckpt").read_bytes()
    assert (tmp_path / "a" / "loss_trace.csv").read_bytes() == (tmp_path / "b" / "loss_trace.csv").read_bytes()
    assert a.checkpoint == b.checkpoint
    assert len(a.trace) == 3 * steps_per_epoch(cfg, w)
    assert load_encoder(tmp_path / "a" / "ckpt").latent_dim == 3


def test_different_seeds_differ():
    w = random_world(8, 24, rng(5), D=4)
    cfg = dict(loss_kind="cfa", epochs=2, batch_size=4, hidden=[8], h_dim=6, latent_dim=3)
    assert train(TrainConfig(seed=0, **cfg), w).checkpoint != train(TrainConfig(seed=1, **cfg), w).checkpoint


def test_trace_csv_header():
    w = random_world(4, 8, rng(6), D=2)
    res = train(TrainConfig(loss_kind="spectral", epochs=1, batch_size=2, hidden=[4], h_dim=3, latent_dim=2), w)
    lines = res.trace_csv().splitlines()
    assert lines[0] == "step,epoch,total,recon,kl"
    assert len(lines) == 1 + len(res.trace)


@pytest.mark.slow
def test_epoch_mean_loss_non_increasing_in_first_ten_epochs(reference_world):
    # default config; records how many of 10 seeds are monotone
    monotone = 0
    for seed in range(10):
        res = train(TrainConfig(seed=seed, epochs=10), reference_world)
        totals = np.array([t[2] for t in res.trace]).reshape(10, -1).mean(axis=1)
        monotone += bool(np.all(np.diff(totals) <= 0))
    assert monotone >= 9, f"only {monotone}/10 seeds had a non-increasing epoch-mean loss"
