"""Command-line entry point: ``cfakit <command> [flags]``.

Exit codes: 0 on success, 1 on usage errors (bad flags, missing files),
2 on numeric or contract errors raised by the library. Every invocation
writes a ``run.json`` manifest into its output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata as _md
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from cfakit import plotting
from cfakit.augraph import (
    build_cooccurrence,
    eckart_young_residual,
    jacobi_eigh,
    read_world,
    write_world,
)
from cfakit.datagen import HETEROSCEDASTIC_CLUSTER, REFERENCE_CLUSTER, ClusterWorldConfig, make_cluster_world, make_factor_world
from cfakit.encoder import load_encoder
from cfakit.errors import CfaError, ContractError
from cfakit.evalsuite import (
    CriticConfig,
    buckets_csv,
    entropy_buckets,
    entropy_scores,
    extract_features,
    linear_probe,
    make_records,
    mark_uncertain,
    natural_split,
    pavpu,
    pavpu_csv,
    positive_pair_inputs,
    probe_csv,
    sepin_at_k,
    sepin_csv,
    uncertainty_csv,
)
from cfakit.trainer import LOSS_KINDS, TrainConfig, train
from cfakit.verify import run_checks

log = logging.getLogger("cfakit")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
DEFAULT_M = (32, 64, 128)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for numeric errors here
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _version(pkg: str) -> str:
    try:
        return _md.version(pkg)
    except _md.PackageNotFoundError:
        return "unknown"


def _write(out: Path, name: str, text: str, written: list) -> Path:
    path = out / name
    path.write_bytes(text.encode("utf-8"))
    written.append(path)
    return path


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"missing required flag(s): {', '.join(missing)}")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(_existing(path, "config").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a flat JSON object")
    return data


def _train_config(args) -> TrainConfig:
    data = _load_json(args.config)
    if args.loss is not None:
        data["loss_kind"] = args.loss
    if args.seed is not None:
        data["seed"] = args.seed
    if args.beta is not None:
        data["beta_kl"] = args.beta
    if args.deterministic:
        data["deterministic_mode"] = True
    return TrainConfig.from_dict(data)


# ---------------------------------------------------------------------------
# commands; each returns (resolved config, input paths, output paths)
# ---------------------------------------------------------------------------

PRESETS = {"reference": REFERENCE_CLUSTER, "heteroscedastic": HETEROSCEDASTIC_CLUSTER}


def cmd_world_make(args, out: Path):
    data = _load_json(args.config)
    generator = data.pop("generator", "factor" if args.preset == "factor" else "cluster")
    if args.seed is not None:
        data["seed"] = args.seed
    if generator == "factor":
        world = make_factor_world(**data)
        cfg = {"generator": "factor", **data}
    elif generator == "cluster":
        base = PRESETS.get(args.preset, REFERENCE_CLUSTER).to_dict()
        unknown = set(data) - set(base)
        if unknown:
            raise ContractError(f"unknown cluster config fields: {sorted(unknown)}")
        cfg_obj = ClusterWorldConfig(**{**base, **data})
        world = make_cluster_world(cfg_obj)
        cfg = {"generator": "cluster", **cfg_obj.to_dict()}
    else:
        raise UsageError(f"unknown generator {generator!r}")
    path = out / "world.csv"
    write_world(world, path)
    print(f"wrote {path} ({world.n_natural} naturals, {world.n_aug} augmented, D={world.feature_dim})")
    return cfg, [], [path]


def cmd_world_inspect(args, out: Path):
    _require(args, "world")
    wpath = _existing(args.world, "world")
    world = read_world(wpath)
    cm = build_cooccurrence(world)
    classes, counts = np.unique(world.labels, return_counts=True)
    info = {
        "n_natural": world.n_natural,
        "n_aug": world.n_aug,
        "feature_dim": world.feature_dim,
        "classes": {int(c): int(n) for c, n in zip(classes, counts)},
        "kernel_nonzeros": int(np.count_nonzero(world.kernel)),
        "zero_marginal": int(np.sum(~cm.valid)),
        "abar_fro2": float(np.sum(cm.Abar**2)),
    }
    print(json.dumps(info, indent=2))
    return {"world": str(wpath)}, [wpath], []


def cmd_oracle_spectral(args, out: Path):
    _require(args, "world")
    wpath = _existing(args.world, "world")
    k = 16 if args.k is None else args.k
    world = read_world(wpath)
    cm = build_cooccurrence(world)
    if not 1 <= k <= cm.n:
        raise ContractError(f"rank k must lie in [1, {cm.n}]")
    vals, _ = jacobi_eigh(cm.Abar)
    residual = eckart_young_residual(vals, k)
    written: list = []
    rows = "".join(f"{i},{float(vals[i])!r},{int(i < k)}\n" for i in range(vals.size))
    _write(out, "spectrum.csv", "index,eigenvalue,kept\n" + rows, written)
    written.append(plotting.plot_spectrum(vals, k, out / "spectrum.png", residual))
    print(f"eckart_young_residual(k={k}) = {residual!r}")
    return {"k": k}, [wpath], written


def cmd_train(args, out: Path):
    _require(args, "world")
    wpath = _existing(args.world, "world")
    cfg = _train_config(args)
    world = read_world(wpath)
    result = train(cfg, world, out_dir=out)
    written = [out / "ckpt", out / "loss_trace.csv"]
    written.append(plotting.plot_loss_trace(result.trace, out / "loss_trace.png"))
    last = result.trace[-1]
    print(f"trained {cfg.loss_kind}: {len(result.trace)} steps, final total {last[2]:.6g}")
    if result.final_mf_residual is not None:
        print(f"final mf_residual = {result.final_mf_residual!r}")
    inputs = [wpath] + ([Path(args.config)] if args.config else [])
    return cfg.to_dict(), inputs, written


def _model_and_world(args):
    _require(args, "ckpt", "world")
    cpath = _existing(args.ckpt, "checkpoint")
    wpath = _existing(args.world, "world")
    return load_encoder(cpath), read_world(wpath), [cpath, wpath]


def _probe(args, model, world):
    seed = 0 if args.seed is None else args.seed
    split = natural_split(world, 0.25, seed)
    return linear_probe(extract_features(model, world), world.labels, split)


def cmd_eval_probe(args, out: Path):
    model, world, inputs = _model_and_world(args)
    res = _probe(args, model, world)
    written: list = []
    _write(out, "probe.csv", probe_csv({"train": res.train_accuracy, "test": res.accuracy}), written)
    print(f"linear probe: test {res.accuracy:.4f}, train {res.train_accuracy:.4f}")
    return {"split_seed": args.seed or 0, "test_fraction": 0.25}, inputs, written


def cmd_eval_uncertainty(args, out: Path):
    model, world, inputs = _model_and_world(args)
    res = _probe(args, model, world)
    ent = entropy_scores(model, world)[res.test_index]
    records = make_records(res.test_index, ent, res.predictions, world.labels[res.test_index])
    ms = list(args.m) if args.m else list(DEFAULT_M)
    rows = [(M, pavpu(records, M)[0]) for M in ms]
    table = entropy_buckets(records)
    written: list = []
    _write(out, "uncertainty.csv", uncertainty_csv(mark_uncertain(records, max(ms))), written)
    _write(out, "pavpu.csv", pavpu_csv(rows), written)
    _write(out, "buckets.csv", buckets_csv(table), written)
    written.append(plotting.plot_buckets(table.rows, table.spearman, out / "buckets.png"))
    written.append(plotting.plot_pavpu(rows, out / "pavpu.png"))
    for M, c in rows:
        print(f"PAvPU@{M} = {c.pavpu:.4f} (top-1 {c.top1:.4f})")
    print(f"bucket spearman = {table.spearman:.4f}" + (" (degenerate)" if table.degenerate else ""))
    return {"M": ms, "split_seed": args.seed or 0}, inputs, written


def cmd_eval_sepin(args, out: Path):
    model, world, inputs = _model_and_world(args)
    seed = 0 if args.seed is None else args.seed
    k = 4 if args.k is None else args.k
    rng = np.random.Generator(np.random.PCG64(seed))
    raw = positive_pair_inputs(world, rng)
    held_out = positive_pair_inputs(world, rng)
    critic = CriticConfig()
    res = sepin_at_k(extract_features(model, world), raw, k, critic, rng, eval_inputs=held_out)
    written: list = []
    _write(out, "sepin.csv", sepin_csv(res), written)
    written.append(plotting.plot_sepin(res.per_dim, res.ranking, k, out / "sepin.png"))
    print(f"SEPIN@{k} = {res.value:.6f} nats (I(x;f) = {res.mi_full:.4f})")
    return {"k": k, "seed": seed, "critic": dataclasses.asdict(critic)}, inputs, written


def cmd_verify(args, out: Path):
    seed = 0 if args.seed is None else args.seed
    results = run_checks(seed)
    lines = ["check,value,tolerance,passed"]
    for r in results:
        lines.append(f"\"{r.name}\",{r.value!r},{r.tolerance!r},{int(r.passed)}")
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  ({r.value:.3g} <= {r.tolerance:.0e})")
    written: list = []
    _write(out, "verify.csv", "\n".join(lines) + "\n", written)
    failed = sum(not r.passed for r in results)
    if failed:
        raise ContractError(f"{failed} verification check(s) failed")
    return {"seed": seed}, [], written


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, *flags: str) -> None:
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--seed", type=int, default=None, help="unsigned integer seed")
    spec = {
        "config": dict(help="flat JSON config file"),
        "world": dict(help="world CSV"),
        "ckpt": dict(help="encoder checkpoint"),
        "loss": dict(choices=LOSS_KINDS, help="training objective"),
        "deterministic": dict(action="store_true", help="use posterior means (no sampling)"),
        "beta": dict(type=float, help="KL weight"),
        "m": dict(type=int, action="append", help="PAvPU M; repeatable (default 32 64 128)"),
        "k": dict(type=int, help="rank (oracle) or top-k (SEPIN)"),
        "preset": dict(choices=("reference", "heteroscedastic", "factor"), default="reference",
                       help="starting world before --config overrides"),
    }
    for f in flags:
        p.add_argument(f"--{f}", **spec[f])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfakit", description="Contrastive factor analysis toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    world = sub.add_parser("world", help="make or inspect augmentation worlds")
    wsub = world.add_subparsers(dest="action", required=True, parser_class=_Parser)
    _common(wsub.add_parser("make", help="generate a synthetic world CSV"), "config", "preset")
    _common(wsub.add_parser("inspect", help="summarize a world CSV"), "world")

    oracle = sub.add_parser("oracle", help="exact matrix-factorization oracles")
    osub = oracle.add_subparsers(dest="action", required=True, parser_class=_Parser)
    _common(osub.add_parser("spectral", help="eigenspectrum and Eckart-Young residual"), "world", "k")

    _common(
        sub.add_parser("train", help="train an encoder (or free table) on a world"),
        "config", "world", "loss", "deterministic", "beta",
    )

    ev = sub.add_parser("eval", help="evaluate a trained encoder")
    esub = ev.add_subparsers(dest="action", required=True, parser_class=_Parser)
    _common(esub.add_parser("probe", help="linear probe accuracy"), "ckpt", "world")
    _common(esub.add_parser("uncertainty", help="entropy, PAvPU and entropy buckets"), "ckpt", "world", "m")
    _common(esub.add_parser("sepin", help="SEPIN@k disentanglement score"), "ckpt", "world", "k")

    _common(sub.add_parser("verify", help="run the built-in property checks"))
    return parser


COMMANDS = {
    ("world", "make"): cmd_world_make,
    ("world", "inspect"): cmd_world_inspect,
    ("oracle", "spectral"): cmd_oracle_spectral,
    ("train", None): cmd_train,
    ("eval", "probe"): cmd_eval_probe,
    ("eval", "uncertainty"): cmd_eval_uncertainty,
    ("eval", "sepin"): cmd_eval_sepin,
    ("verify", None): cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and args.seed < 0:
        parser.error("--seed must be a non-negative integer")
    key = (args.group, getattr(args, "action", None))
    command = " ".join(k for k in key if k)
    started = _utc_now()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        config, inputs, outputs = COMMANDS[key](args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cfakit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CfaError, ValueError, ArithmeticError) as exc:
        print(f"cfakit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": args.seed,
        "versions": {
            "cfakit": _version("cfakit"),
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "input_hashes": {str(p): _sha256(Path(p)) for p in inputs},
        "output_files": {str(p): _sha256(Path(p)) for p in outputs},
        "started_at": started,
        "finished_at": _utc_now(),
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2, default=_jsonable) + "\n", encoding="utf-8")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
