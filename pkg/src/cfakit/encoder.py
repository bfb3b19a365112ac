"""MLP encoder with Gaussian, Weibull or deterministic latent heads.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``x @ W + b``. The variance (Gaussian) and shape (Weibull) heads map the
feature vector to one scalar per sample, broadcast across the latent
dimension, unless ``per_dim_scale`` is set.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from cfakit import diffcore as dc
from cfakit.diffcore import Tensor
from cfakit.distributions import (
    K_MAX,
    K_MIN,
    GaussianParams,
    WeibullParams,
    gaussian_sample,
    gamma_one_plus_inv,
    weibull_mean,
    weibull_sample,
)
from cfakit.errors import ContractError, DimensionError

HEAD_KINDS = ("gaussian", "weibull", "deterministic")
LAMBDA_FLOOR = 1e-6
SOFTPLUS_INV_ONE = math.log(math.e - 1.0)

CKPT_MAGIC = b"CFAK"
CKPT_VERSION = 1

Posterior = Union[GaussianParams, WeibullParams, Tensor]


@dataclass
class EncoderModel:
    arch: list[int]
    head_kind: str
    latent_dim: int
    params: dict[str, Tensor]
    per_dim_scale: bool = False
    strict_relu: bool = False
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ContractError(f"unknown head kind {self.head_kind!r}")
        self._check_shapes()

    @property
    def input_dim(self) -> int:
        return self.arch[0]

    @property
    def feature_dim(self) -> int:
        return self.arch[-1]

    def _expected_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.arch[:-1], self.arch[1:])):
            shapes[f"W{i}"] = (fan_in, fan_out)
            shapes[f"b{i}"] = (1, fan_out)
        h, d = self.feature_dim, self.latent_dim
        scale_w = d if self.per_dim_scale else 1
        if self.head_kind == "gaussian":
            shapes.update(mu_W=(h, d), mu_b=(1, d), sigma_W=(h, scale_w), sigma_b=(1, scale_w))
        elif self.head_kind == "weibull":
            shapes.update(k_W=(h, scale_w), k_b=(1, scale_w), lam_W=(h, d), lam_b=(1, d))
        else:
            shapes.update(mu_W=(h, d), mu_b=(1, d))
        return shapes

    def _check_shapes(self) -> None:
        expected = self._expected_shapes()
        if list(expected) != list(self.params):
            raise ContractError(f"parameter names {list(self.params)} != {list(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def copy(self) -> "EncoderModel":
        return EncoderModel(
            list(self.arch),
            self.head_kind,
            self.latent_dim,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
            self.per_dim_scale,
            self.strict_relu,
            self.seed,
            dict(self.extra),
        )


def init_encoder(
    input_dim: int,
    latent_dim: int,
    head_kind: str = "gaussian",
    hidden: tuple = (128, 128),
    h_dim: int = 64,
    seed: int = 0,
    per_dim_scale: bool = False,
    strict_relu: bool = False,
) -> EncoderModel:
    """Glorot-uniform weights, zero biases, scale-head biases at softplus^-1(1)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    arch = [int(input_dim), *[int(h) for h in hidden], int(h_dim)]
    params: dict[str, Tensor] = {}

    def glorot(fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)

    def zeros(n, value=0.0):
        return Tensor(np.full((1, n), value), requires_grad=True)

    for i, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
        params[f"W{i}"] = glorot(fan_in, fan_out)
        params[f"b{i}"] = zeros(fan_out)
    d = int(latent_dim)
    scale_w = d if per_dim_scale else 1
    if head_kind == "gaussian":
        params["mu_W"] = glorot(h_dim, d)
        params["mu_b"] = zeros(d)
        params["sigma_W"] = glorot(h_dim, scale_w)
        params["sigma_b"] = zeros(scale_w, SOFTPLUS_INV_ONE)
    elif head_kind == "weibull":
        params["k_W"] = glorot(h_dim, scale_w)
        params["k_b"] = zeros(scale_w, SOFTPLUS_INV_ONE)
        params["lam_W"] = glorot(h_dim, d)
        params["lam_b"] = zeros(d)
    elif head_kind == "deterministic":
        params["mu_W"] = glorot(h_dim, d)
        params["mu_b"] = zeros(d)
    else:
        raise ContractError(f"unknown head kind {head_kind!r}")
    return EncoderModel(arch, head_kind, d, params, per_dim_scale, strict_relu, seed)


def _as_rows(x) -> tuple[Tensor, bool]:
    x = dc.as_tensor(x)
    if x.ndim == 1:
        return x.reshape(1, -1), True
    return x, False


def encode(m: EncoderModel, x) -> Tensor:
    """MLP forward pass; relu between layers, none after the last."""
    h, single = _as_rows(x)
    if h.shape[1] != m.input_dim:
        raise DimensionError(f"input width {h.shape[1]} != encoder input {m.input_dim}")
    n_layers = len(m.arch) - 1
    for i in range(n_layers):
        h = dc.matmul(h, m.params[f"W{i}"]) + m.params[f"b{i}"]
        if i < n_layers - 1:
            h = dc.relu(h)
    return h.reshape(-1) if single else h


def _linear(m: EncoderModel, h: Tensor, name: str) -> Tensor:
    return dc.matmul(h, m.params[f"{name}_W"]) + m.params[f"{name}_b"]


def gaussian_head(m: EncoderModel, h) -> GaussianParams:
    if m.head_kind != "gaussian":
        raise ContractError("gaussian_head needs a gaussian encoder")
    h, single = _as_rows(h)
    mu = _linear(m, h, "mu")
    sigma2 = dc.softplus(_linear(m, h, "sigma"))
    if single:
        mu, sigma2 = mu.reshape(-1), sigma2.reshape(-1)
    return GaussianParams(mu, sigma2)


def weibull_head(m: EncoderModel, h) -> WeibullParams:
    """Shape from softplus, scale chosen so the posterior mean is
    ``softplus(f_lam(h)) + 1e-6`` (relu instead of softplus if ``strict_relu``).
    """
    if m.head_kind != "weibull":
        raise ContractError("weibull_head needs a weibull encoder")
    h, single = _as_rows(h)
    k = dc.clip(dc.softplus(_linear(m, h, "k")), K_MIN, K_MAX)
    pre = _linear(m, h, "lam")
    act = dc.relu(pre) if m.strict_relu else dc.softplus(pre)
    lam = (act + LAMBDA_FLOOR) / gamma_one_plus_inv(k)
    if single:
        k, lam = k.reshape(-1), lam.reshape(-1)
    return WeibullParams(k, lam)


def deterministic_head(m: EncoderModel, h) -> Tensor:
    h, single = _as_rows(h)
    out = _linear(m, h, "mu")
    return out.reshape(-1) if single else out


def posterior(m: EncoderModel, x) -> Posterior:
    h = encode(m, x)
    if m.head_kind == "gaussian":
        return gaussian_head(m, h)
    if m.head_kind == "weibull":
        return weibull_head(m, h)
    return deterministic_head(m, h)


def point_estimate(post: Posterior) -> Tensor:
    """Posterior mean (the deterministic-mode latent)."""
    if isinstance(post, GaussianParams):
        return post.mu
    if isinstance(post, WeibullParams):
        return weibull_mean(post)
    return post


def noise_shape(m: EncoderModel, n: int) -> tuple[int, int]:
    return (n, m.latent_dim)


def draw_noise(m: EncoderModel, rng: np.random.Generator, n: int) -> Optional[np.ndarray]:
    """Standard-normal (Gaussian head) or uniform (Weibull head) noise."""
    if m.head_kind == "gaussian":
        return rng.standard_normal(noise_shape(m, n))
    if m.head_kind == "weibull":
        return rng.random(noise_shape(m, n))
    return None


def forward(m: EncoderModel, x, noise=None, mode: str = "stochastic") -> tuple[Tensor, Posterior]:
    """Encode ``x`` and return ``(theta, posterior)``.

    In ``"deterministic"`` mode theta is the posterior mean and ``noise`` is
    ignored; in ``"stochastic"`` mode theta is a reparameterized draw.
    """
    if mode not in ("stochastic", "deterministic"):
        raise ContractError(f"unknown mode {mode!r}")
    post = posterior(m, x)
    if mode == "deterministic" or m.head_kind == "deterministic":
        return point_estimate(post), post
    if noise is None:
        raise ContractError("stochastic forward needs noise")
    if isinstance(post, GaussianParams):
        return gaussian_sample(post, noise), post
    return weibull_sample(post, noise), post


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def write_checkpoint(path, header: dict, params: dict[str, np.ndarray]) -> bytes:
    """Serialize ``header`` and ``params`` and write them to ``path``.

    Layout: ``b"CFAK"``, u32 LE version, u32 LE header length, UTF-8 JSON
    header, then every parameter as little-endian f64 in ``params`` order.
    The header records the names and shapes under ``"params"``.
    """
    header = dict(header)
    header["params"] = [[name, list(np.shape(arr))] for name, arr in params.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob]
    for arr in params.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = b"".join(parts)
    if path is not None:
        Path(path).write_bytes(data)
    return data


def read_checkpoint(path_or_bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = (
        bytes(path_or_bytes)
        if isinstance(path_or_bytes, (bytes, bytearray))
        else Path(path_or_bytes).read_bytes()
    )
    if data[:4] != CKPT_MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
        params[name] = arr.reshape(shape)
        offset += 8 * n
    if offset != len(data):
        raise ContractError("checkpoint has trailing bytes")
    return header, params


def save_encoder(m: EncoderModel, path, config: Optional[dict] = None) -> bytes:
    header = {
        "kind": "encoder",
        "arch": list(m.arch),
        "head_kind": m.head_kind,
        "d": m.latent_dim,
        "seed": m.seed,
        "per_dim_scale": m.per_dim_scale,
        "strict_relu": m.strict_relu,
        "config": config or {},
    }
    return write_checkpoint(path, header, {k: v.data for k, v in m.params.items()})


def encoder_from_checkpoint(header: dict, params: dict[str, np.ndarray]) -> EncoderModel:
    if header.get("kind") != "encoder":
        raise ContractError(f"checkpoint holds a {header.get('kind')!r}, not an encoder")
    return EncoderModel(
        list(header["arch"]),
        header["head_kind"],
        int(header["d"]),
        {k: Tensor(v, requires_grad=True) for k, v in params.items()},
        bool(header.get("per_dim_scale", False)),
        bool(header.get("strict_relu", False)),
        int(header.get("seed", 0)),
        {"config": header.get("config", {})},
    )


def load_encoder(path) -> EncoderModel:
    return encoder_from_checkpoint(*read_checkpoint(path))
