"""Downstream evaluation: linear probing, posterior-entropy uncertainty with
PAvPU and entropy buckets, and the SEPIN@k disentanglement score.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from cfakit import diffcore as dc
from cfakit.augraph import AugmentationWorld
from cfakit.diffcore import Tape, Tensor
from cfakit.distributions import GaussianParams, WeibullParams, gaussian_entropy, weibull_entropy
from cfakit.encoder import EncoderModel, forward, posterior
from cfakit.errors import ContractError, NumericError
from cfakit.trainer import AdamState, adam_step


# ---------------------------------------------------------------------------
# features and probing
# ---------------------------------------------------------------------------


def extract_features(model: EncoderModel, world: AugmentationWorld) -> np.ndarray:
    """Posterior-mean features, one row per augmented sample."""
    theta, _ = forward(model, world.features, mode="deterministic")
    return np.array(theta.data)


def natural_split(world: AugmentationWorld, test_fraction: float = 0.25, seed: int = 0):
    """Train/test indices of augmented samples, split by owning natural sample
    so augmentations of one natural never straddle the split.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    owner = world.owner()
    naturals = rng.permutation(world.n_natural)
    n_test = int(round(test_fraction * world.n_natural))
    test_nat = np.zeros(world.n_natural, dtype=bool)
    test_nat[naturals[:n_test]] = True
    is_test = test_nat[owner]
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


@dataclass
class ProbeConfig:
    l2: float = 1e-4
    max_iter: int = 10_000
    grad_tol: float = 1e-6
    standardize: bool = True


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    predictions: np.ndarray
    test_index: np.ndarray
    iterations: int
    grad_norm: float


def _argmax_low(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(scores, axis=1)


def linear_probe(features, labels, split, probe_cfg: Optional[ProbeConfig] = None) -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent.

    Runs until the gradient norm drops below ``grad_tol`` or ``max_iter``
    iterations; the step size is 1/L for the smooth part of the objective.

    Raises:
        ContractError: if the training split holds fewer than two classes.
    """
    cfg = probe_cfg or ProbeConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    train_idx, test_idx = (np.asarray(s, dtype=np.int64) for s in split)
    if len(np.unique(y[train_idx])) < 2:
        raise ContractError("linear probe needs at least two classes in the training split")
    n_classes = int(y.max()) + 1
    Xtr = X[train_idx]
    if cfg.standardize:
        mean = Xtr.mean(axis=0)
        std = Xtr.std(axis=0)
        std[std < 1e-12] = 1.0
    else:
        mean, std = 0.0, 1.0

    def design(A):
        Z = (A - mean) / std
        return np.hstack([Z, np.ones((Z.shape[0], 1))])

    Ztr = design(Xtr)
    n = Ztr.shape[0]
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y[train_idx]] = 1.0
    lip = 0.5 * np.linalg.norm(Ztr, 2) ** 2 / n + cfg.l2
    step = 1.0 / lip
    W = np.zeros((Ztr.shape[1], n_classes))
    reg = np.ones_like(W)
    reg[-1] = 0.0
    gnorm = math.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        S = Ztr @ W
        S -= S.max(axis=1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(axis=1, keepdims=True)
        G = Ztr.T @ (P - Y) / n + cfg.l2 * reg * W
        gnorm = float(np.linalg.norm(G))
        if gnorm < cfg.grad_tol:
            break
        W -= step * G
    pred_tr = _argmax_low(Ztr @ W)
    preds = _argmax_low(design(X[test_idx]) @ W)
    return ProbeResult(
        accuracy=float(np.mean(preds == y[test_idx])),
        train_accuracy=float(np.mean(pred_tr == y[train_idx])),
        predictions=preds,
        test_index=test_idx,
        iterations=it,
        grad_norm=gnorm,
    )


# ---------------------------------------------------------------------------
# uncertainty
# ---------------------------------------------------------------------------


def entropy_scores(model: EncoderModel, world_or_x) -> np.ndarray:
    """Per-sample differential entropy of the variational posterior.

    Raises:
        ContractError: for deterministic encoders, whose entropy is undefined.
    """
    x = world_or_x.features if isinstance(world_or_x, AugmentationWorld) else world_or_x
    if model.head_kind == "deterministic":
        raise ContractError("entropy is undefined for a deterministic encoder")
    return posterior_entropy(posterior(model, x))


def posterior_entropy(post) -> np.ndarray:
    if isinstance(post, GaussianParams):
        return np.array(gaussian_entropy(post).data)
    if isinstance(post, WeibullParams):
        return np.array(weibull_entropy(post).data)
    raise ContractError("entropy is undefined for a point posterior")


@dataclass
class UncertaintyRecord:
    sample_id: int
    entropy: float
    pred: int
    label: int
    certain: bool = True

    @property
    def accurate(self) -> bool:
        return self.pred == self.label


@dataclass
class PavpuCounts:
    n_ac: int
    n_au: int
    n_ic: int
    n_iu: int

    @property
    def total(self) -> int:
        return self.n_ac + self.n_au + self.n_ic + self.n_iu

    @property
    def top1(self) -> float:
        return (self.n_ac + self.n_au) / self.total

    @property
    def pavpu(self) -> float:
        return (self.n_ac + self.n_iu) / self.total


def make_records(sample_ids, entropies, preds, labels) -> list[UncertaintyRecord]:
    return [
        UncertaintyRecord(int(s), float(h), int(p), int(y))
        for s, h, p, y in zip(sample_ids, entropies, preds, labels)
    ]


def mark_uncertain(records: Sequence[UncertaintyRecord], M: int) -> list[UncertaintyRecord]:
    """Copies of ``records`` with the M highest-entropy samples flagged
    uncertain; ties are broken by ascending ``sample_id``.
    """
    if not 0 <= M <= len(records):
        raise ContractError(f"M must lie in [0, {len(records)}]")
    order = sorted(range(len(records)), key=lambda i: (-records[i].entropy, records[i].sample_id))
    uncertain = set(order[:M])
    return [
        UncertaintyRecord(r.sample_id, r.entropy, r.pred, r.label, i not in uncertain)
        for i, r in enumerate(records)
    ]


def pavpu(records: Sequence[UncertaintyRecord], M: int) -> tuple[PavpuCounts, float]:
    marked = mark_uncertain(records, M)
    n_ac = sum(r.accurate and r.certain for r in marked)
    n_au = sum(r.accurate and not r.certain for r in marked)
    n_ic = sum((not r.accurate) and r.certain for r in marked)
    n_iu = sum((not r.accurate) and not r.certain for r in marked)
    counts = PavpuCounts(n_ac, n_au, n_ic, n_iu)
    return counts, counts.pavpu


@dataclass
class BucketTable:
    rows: list  # (bucket, size, mean_entropy, accuracy)
    spearman: float
    degenerate: bool


def bucket_sizes(n: int, n_buckets: int) -> list[int]:
    base, rem = divmod(n, n_buckets)
    return [base + (1 if b < rem else 0) for b in range(n_buckets)]


def entropy_buckets(records: Sequence[UncertaintyRecord], n_buckets: int = 5) -> BucketTable:
    """Sort by entropy, cut into contiguous near-equal groups, and correlate
    bucket index with bucket accuracy (Spearman).
    """
    if len(records) < n_buckets:
        raise ContractError("need at least one record per bucket")
    ordered = sorted(records, key=lambda r: (r.entropy, r.sample_id))
    rows = []
    start = 0
    for b, size in enumerate(bucket_sizes(len(ordered), n_buckets)):
        chunk = ordered[start : start + size]
        start += size
        rows.append(
            (b, size, float(np.mean([r.entropy for r in chunk])), float(np.mean([r.accurate for r in chunk])))
        )
    ent = np.array([r.entropy for r in records])
    acc = np.array([row[3] for row in rows])
    degenerate = bool(np.all(ent == ent[0]) or np.all(acc == acc[0]))
    rho = 0.0 if degenerate else float(stats.spearmanr(np.arange(n_buckets), acc).statistic)
    return BucketTable(rows, rho, degenerate)


# ---------------------------------------------------------------------------
# SEPIN@k
# ---------------------------------------------------------------------------


@dataclass
class CriticConfig:
    rank: int = 16
    train_steps: int = 1000
    train_batch: int = 256
    learning_rate: float = 5e-2
    eval_batch: int = 1024
    eval_batches: int = 10


@dataclass
class SepinResult:
    value: float
    k: int
    per_dim: np.ndarray
    per_dim_se: np.ndarray
    ranking: np.ndarray
    mi_full: float
    mi_without: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _standardize(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    mu = A.mean(axis=0)
    sd = A.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return (A - mu) / sd


def _critic_scores(params: dict, x: Tensor, z: Tensor) -> Tensor:
    # s(x, z) = -exp(log_scale)/2 * ||P x - Q z||^2; row-only terms cancel in the softmax
    px = dc.matmul(x, params["P"])
    qz = dc.matmul(z, params["Q"])
    cross = dc.matmul(px, qz.T)
    zz = (qz * qz).sum(axis=1).reshape(1, -1)
    return dc.exp(params["log_scale"]) * (cross - 0.5 * zz)


def _infonce_rows(scores: Tensor) -> Tensor:
    n = scores.shape[0]
    diag = (scores * np.eye(n)).sum(axis=1)
    return diag - dc.logsumexp(scores, axis=1)


def train_critic(x: np.ndarray, z: np.ndarray, cfg: CriticConfig, rng: np.random.Generator) -> dict:
    """Fit a Gaussian-kernel critic by maximizing the InfoNCE bound with
    Adam, the step size annealed from ``cfg.learning_rate`` to zero.

    Raises:
        NumericError: if the objective or a gradient becomes non-finite.
    """
    n, D = x.shape
    dz = z.shape[1]
    params = {
        "P": Tensor(rng.standard_normal((D, cfg.rank)) / math.sqrt(D), requires_grad=True),
        "Q": Tensor(rng.standard_normal((dz, cfg.rank)) / math.sqrt(max(dz, 1)), requires_grad=True),
        "log_scale": Tensor(np.zeros((1, 1)), requires_grad=True),
    }
    state = AdamState()
    B = min(cfg.train_batch, n)
    for step in range(cfg.train_steps):
        # cosine anneal to zero so the final critic does not drift with minibatch noise
        opt = _AdamCfg(cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / cfg.train_steps)))
        idx = rng.choice(n, size=B, replace=False)
        with Tape() as tape:
            loss = -_infonce_rows(_critic_scores(params, Tensor(x[idx]), Tensor(z[idx]))).mean()
        if not np.isfinite(loss.data):
            raise NumericError(f"critic objective diverged at step {step} (value {float(loss.data)!r})")
        dc.backward(loss, tape)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, opt)
    return params


@dataclass
class _AdamCfg:
    learning_rate: float
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


def infonce_mi(params: dict, x: np.ndarray, z: np.ndarray, batches: Sequence[np.ndarray]) -> np.ndarray:
    """InfoNCE lower bound ``ln B + mean_i [s_ii - logsumexp_j s_ij]`` on each
    evaluation batch; never exceeds ``ln B``.
    """
    out = []
    for idx in batches:
        rows = _infonce_rows(_critic_scores(params, Tensor(x[idx]), Tensor(z[idx])))
        out.append(math.log(len(idx)) + float(rows.data.mean()))
    return np.array(out)


def sepin_at_k(
    features,
    raw_inputs,
    k: int,
    critic_cfg: Optional[CriticConfig] = None,
    rng: Optional[np.random.Generator] = None,
    eval_inputs=None,
) -> SepinResult:
    """Mean of the k largest per-dimension conditional MI estimates.

    Each estimate is ``I(x; f) - I(x; f without dim i)``, both InfoNCE bounds
    from separately trained critics evaluated on shared batches; negative
    estimates are clamped to zero and constant dimensions score exactly
    zero. Dimensions are ranked by estimate.

    Critics are fit on ``(raw_inputs, features)``. When ``eval_inputs`` is
    given (a second, independent draw of inputs paired row by row with the
    same features) the bounds are scored on it instead, so a critic cannot
    gain by memorizing its training pairs.
    """
    cfg = critic_cfg or CriticConfig()
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
    f = _standardize(features)
    x = _standardize(raw_inputs)
    n, d = f.shape
    if not 1 <= k <= d:
        raise ContractError(f"k must lie in [1, {d}]")
    if x.shape[0] != n:
        raise ContractError("features and raw inputs need the same number of rows")
    if eval_inputs is None:
        x_eval = x
    else:
        raw = np.asarray(raw_inputs, dtype=np.float64).reshape(n, -1)
        ev = np.asarray(eval_inputs, dtype=np.float64).reshape(n, -1)
        if ev.shape != raw.shape:
            raise ContractError("eval_inputs must match the shape of raw_inputs")
        # reuse the training standardization so both draws share one scale
        mu = raw.mean(axis=0)
        sd = raw.std(axis=0)
        sd[sd < 1e-12] = 1.0
        x_eval = (ev - mu) / sd
    B = min(cfg.eval_batch, n) if cfg.eval_batch <= n else cfg.eval_batch
    replace = B > n
    batches = [rng.choice(n, size=B, replace=replace) for _ in range(cfg.eval_batches)]
    seeds = rng.integers(0, 2**63 - 1, size=d + 1)

    def fit_eval(z, seed):
        crng = np.random.Generator(np.random.PCG64(int(seed)))
        return infonce_mi(train_critic(x, z, cfg, crng), x_eval, z, batches)

    full = fit_eval(f, seeds[0])
    per_dim = np.zeros(d)
    se = np.zeros(d)
    without = np.zeros(d)
    constant = np.ptp(np.asarray(features, dtype=np.float64).reshape(n, d), axis=0) == 0
    for i in range(d):
        if constant[i]:
            # carries no information; skip the critic and its estimation noise
            continue
        rest = np.delete(f, i, axis=1)
        if rest.shape[1] == 0:
            part = np.zeros_like(full)
        else:
            part = fit_eval(rest, seeds[i + 1])
        diff = full - part
        without[i] = float(part.mean())
        per_dim[i] = float(diff.mean())
        se[i] = float(diff.std(ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
    clamped = np.maximum(per_dim, 0.0)
    ranking = np.argsort(-clamped, kind="stable")
    value = float(np.mean(clamped[ranking[:k]]))
    return SepinResult(value, k, clamped, se, ranking, float(full.mean()), without)


def positive_pair_inputs(world: AugmentationWorld, rng: np.random.Generator) -> np.ndarray:
    """For each augmented sample, the raw features of an independent
    augmentation of its owning natural sample.
    """
    owner = world.owner()
    cdf = np.cumsum(world.kernel[owner], axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(world.n_aug)
    partner = np.sum(cdf <= u[:, None], axis=1)
    return world.features[partner]


# ---------------------------------------------------------------------------
# report CSVs
# ---------------------------------------------------------------------------


def _csv(header: list, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def probe_csv(results: dict) -> str:
    return _csv(["split", "accuracy"], [(name, float(acc)) for name, acc in results.items()])


def uncertainty_csv(records: Sequence[UncertaintyRecord]) -> str:
    return _csv(
        ["sample_id", "entropy", "pred", "label", "certain"],
        [(r.sample_id, float(r.entropy), r.pred, r.label, int(r.certain)) for r in records],
    )


def pavpu_csv(rows: Sequence[tuple[int, PavpuCounts]]) -> str:
    return _csv(
        ["M", "n_ac", "n_au", "n_ic", "n_iu", "pavpu", "top1"],
        [(M, c.n_ac, c.n_au, c.n_ic, c.n_iu, float(c.pavpu), float(c.top1)) for M, c in rows],
    )


def buckets_csv(table: BucketTable) -> str:
    return _csv(["bucket", "mean_entropy", "accuracy"], [(b, float(h), float(a)) for b, _, h, a in table.rows])


def sepin_csv(result: SepinResult) -> str:
    rows = [(i, float(result.per_dim[i])) for i in range(len(result.per_dim))]
    rows.append((f"SEPIN@{result.k}", float(result.value)))
    return _csv(["dim", "mi_estimate"], rows)
