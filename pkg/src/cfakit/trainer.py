"""Seeded training loop with Adam over pair batches drawn from a world.

Randomness comes from numpy's PCG64 bit generator. One seed is expanded with
``SeedSequence(seed).spawn(3)`` into independent streams for weight
initialization, batch sampling and reparameterization noise, so a
``(config, world)`` pair fully determines the run.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from cfakit import diffcore as dc
from cfakit.augraph import AugmentationWorld, CoMatrix, build_cooccurrence, mf_residual
from cfakit.diffcore import Tape, Tensor
from cfakit.encoder import EncoderModel, draw_noise, init_encoder, save_encoder, write_checkpoint
from cfakit.errors import ContractError, NumericError
from cfakit.losses import (
    LossValue,
    PairBatch,
    cfa_loss,
    cnfa_loss,
    deterministic_loss,
    population_spectral_loss,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("infonce", "spectral", "cfa", "cnfa")
HEAD_FOR_LOSS = {"infonce": "deterministic", "spectral": "deterministic", "cfa": "gaussian", "cnfa": "weibull"}


@dataclass
class TrainConfig:
    loss_kind: str = "cfa"
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    beta_kl: float = 1.0
    seed: int = 0
    deterministic_mode: bool = False
    latent_dim: int = 16
    hidden: list = field(default_factory=lambda: [128, 128])
    h_dim: int = 64
    temperature: float = 0.5
    per_dim_scale: bool = False
    strict_relu: bool = False
    free_table: bool = False
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError("lr_schedule must be 'constant' or 'cosine'")
        if self.free_table and self.loss_kind != "spectral":
            raise ContractError("free-table mode trains the spectral loss only")
        self.hidden = [int(h) for h in self.hidden]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def sample_pair_batch(world: AugmentationWorld, rng: np.random.Generator, batch_size: int) -> PairBatch:
    """Draw naturals by ``natural_probs`` and two independent augmentations each."""
    nat = rng.choice(world.n_natural, size=batch_size, p=world.natural_probs)
    cdf = np.cumsum(world.kernel[nat], axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((2, batch_size))
    a = np.sum(cdf <= u[0][:, None], axis=1)
    b = np.sum(cdf <= u[1][:, None], axis=1)
    return PairBatch(world.features[a], world.features[b], nat, a, b)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg, lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update, in place.

    ``params`` maps names to Tensors (or arrays); ``cfg`` supplies
    ``learning_rate``, ``adam_beta1``, ``adam_beta2`` and ``adam_eps``.

    Raises:
        NumericError: naming the first parameter whose gradient is not finite.
    """
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    lr = cfg.learning_rate if lr is None else lr
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = np.asarray(grads[name], dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def learning_rate_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * step / max(1, total)))
    return cfg.learning_rate


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    """One free embedding row per augmented sample (no encoder)."""

    table: Tensor

    @property
    def params(self) -> dict:
        return {"table": self.table}


@dataclass
class TrainResult:
    model: object
    trace: list
    checkpoint: bytes
    config: TrainConfig
    final_mf_residual: Optional[float] = None

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(trace: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "total", "recon", "kl"])
    for step, epoch, total, recon, kl in trace:
        w.writerow([step, epoch, repr(total), repr(recon), repr(kl)])
    return buf.getvalue()


def model_loss(
    m: EncoderModel, batch: PairBatch, cfg: TrainConfig, rng_noise: np.random.Generator
) -> LossValue:
    if cfg.loss_kind in ("infonce", "spectral"):
        return deterministic_loss(m, batch, cfg.loss_kind, cfg.temperature)
    mode = "deterministic" if cfg.deterministic_mode else "stochastic"
    noise = None
    if mode == "stochastic":
        B = len(batch)
        noise = (draw_noise(m, rng_noise, B), draw_noise(m, rng_noise, B))
    fn = cfa_loss if cfg.loss_kind == "cfa" else cnfa_loss
    return fn(m, batch, cfg.beta_kl, noise, mode)


def _streams(seed: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(3)]


def steps_per_epoch(cfg: TrainConfig, world: AugmentationWorld) -> int:
    return max(1, world.n_natural // cfg.batch_size)


def train(
    cfg: TrainConfig,
    world: AugmentationWorld,
    out_dir=None,
    model: Optional[EncoderModel] = None,
) -> TrainResult:
    """Train a model on ``world``; optionally write ``ckpt`` and
    ``loss_trace.csv`` into ``out_dir``.
    """
    if cfg.free_table:
        result = _train_table(cfg, world)
    else:
        result = _train_encoder(cfg, world, model)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ckpt").write_bytes(result.checkpoint)
        (out / "loss_trace.csv").write_bytes(result.trace_csv().encode("utf-8"))
    return result


def _train_encoder(cfg: TrainConfig, world: AugmentationWorld, model: Optional[EncoderModel]) -> TrainResult:
    rng_init, rng_batch, rng_noise = _streams(cfg.seed)
    if model is None:
        init_seed = int(rng_init.integers(0, 2**63 - 1))
        model = init_encoder(
            world.feature_dim,
            cfg.latent_dim,
            HEAD_FOR_LOSS[cfg.loss_kind],
            tuple(cfg.hidden),
            cfg.h_dim,
            seed=init_seed,
            per_dim_scale=cfg.per_dim_scale,
            strict_relu=cfg.strict_relu,
        )
    state = AdamState()
    per_epoch = steps_per_epoch(cfg, world)
    total_steps = cfg.epochs * per_epoch
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(per_epoch):
            batch = sample_pair_batch(world, rng_batch, cfg.batch_size)
            with Tape() as tape:
                lv = model_loss(model, batch, cfg, rng_noise)
            dc.backward(lv.total, tape)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
            adam_step(model.params, grads, state, cfg, learning_rate_at(cfg, step, total_steps))
            step += 1
            trace.append((step, epoch, *lv.as_floats()))
        if log.isEnabledFor(logging.DEBUG):
            log.debug("epoch %d loss %.6f", epoch, trace[-1][2])
    ckpt = save_encoder(model, None, cfg.to_dict())
    return TrainResult(model, trace, ckpt, cfg)


def _train_table(cfg: TrainConfig, world: AugmentationWorld) -> TrainResult:
    """Full-batch Adam on the exact population spectral loss of a free
    embedding table; ``sqrt(P(x)) * table`` is the matrix factor.
    """
    rng_init, _, _ = _streams(cfg.seed)
    cm = build_cooccurrence(world)
    table = Tensor(0.1 * rng_init.standard_normal((cm.n, cfg.latent_dim)), requires_grad=True)
    model = EmbeddingTable(table)
    state = AdamState()
    const = float(np.sum(cm.Abar**2))
    trace = []
    for step in range(cfg.epochs):
        with Tape() as tape:
            loss = population_spectral_loss(cm, table)
        dc.backward(loss, tape)
        adam_step(model.params, {"table": table.grad}, state, cfg, learning_rate_at(cfg, step, cfg.epochs))
        val = float(loss.data)
        trace.append((step + 1, step, val, val, 0.0))
    F = np.sqrt(cm.d_marg)[:, None] * table.data
    header = {"kind": "table", "d": cfg.latent_dim, "seed": cfg.seed, "config": cfg.to_dict()}
    ckpt = write_checkpoint(None, header, {"table": table.data})
    result = TrainResult(model, trace, ckpt, cfg, mf_residual(cm, F))
    log.debug("table residual %.6g (population loss + const %.6g)", result.final_mf_residual, trace[-1][2] + const)
    return result


def table_factor(cm: CoMatrix, table) -> np.ndarray:
    data = table.data if isinstance(table, Tensor) else np.asarray(table)
    return np.sqrt(cm.d_marg)[:, None] * data
