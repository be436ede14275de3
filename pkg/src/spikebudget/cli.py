"""Command line entry point.

Subcommands:
    run        train one or more configs/seeds and emit JSON + CSV + figures
    metrics    recompute ACC/F/BWT from an accuracy-matrix CSV
    gradcheck  compare BPTT gradients against finite differences
    encode     dump dataset samples as EVT1 event files

Config values resolve in precedence order: built-in defaults, then --preset,
then the YAML --config file, then explicit CLI flags. Unknown config keys
are rejected outright; a silently ignored typo that changes hyperparameters
is worse than a crash.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .budget import BudgetConfig
from .continual import (
    CONFIG_FLAGS,
    RunConfig,
    acc_metric,
    bwt_metric,
    forgetting_metric,
    parse_schedule,
    run_config,
)
from .datasets import DATA_ENV_VAR, load_dataset
from .encoding import make_events, poisson_encode, write_event_file, FrameImage
from .network import gradcheck, init_fcsnn
from .report import (
    SummaryRow,
    read_matrix_csv,
    save_summary_figure,
    summary_line,
    write_run_artifacts,
    write_summary_csv,
)


@dataclass
class ExperimentConfig:
    """Everything `run` needs; field names double as the YAML key set."""

    dataset: str = "auto"
    data_dir: str | None = None
    schedule: object = "5x2"
    configs: list = dataclasses.field(default_factory=lambda: ["C4"])
    seeds: list = dataclasses.field(default_factory=lambda: [42])
    epochs_per_task: int = 5
    batch_size: int = 64
    timesteps: int = 25
    lr: float = 1e-3
    hidden: int = 128
    buffer_capacity: int = 2000
    reencode: bool = True
    insert_final_epoch_only: bool = True
    r_target: float = 0.10
    eta: float = 0.2
    lambda_min: float = 0.0
    lambda_max: float = 5.0
    window: int = 5
    grad_clip: float = 1.0
    train_per_class: int | None = None
    test_per_class: int | None = None
    out_dir: str = "runs"
    figures: bool = True


PRESETS: dict[str, dict] = {
    # small enough for minutes on a laptop CPU, big enough to preserve the
    # C0 << C1 <= C4 ordering. batch 4 buys enough optimizer steps per task
    # for the learnable dynamics to matter at this scale; the rate target is
    # about half the unconstrained rate of the bundled-digits build, the same
    # pressure ratio the full recipe applies to MNIST.
    "mnist-desk": {
        "dataset": "auto",
        "schedule": "5x2",
        "epochs_per_task": 3,
        "batch_size": 4,
        "timesteps": 25,
        "buffer_capacity": 500,
        "train_per_class": 256,
        "test_per_class": 128,
        "r_target": 0.20,
        "eta": 0.25,
    },
    # the full-data recipe; expects MNIST IDX files to be available
    "mnist-full": {
        "dataset": "mnist",
        "schedule": "5x2",
        "epochs_per_task": 5,
        "timesteps": 25,
        "buffer_capacity": 2000,
        "train_per_class": None,
        "test_per_class": None,
        "r_target": 0.10,
    },
}

_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value):
    """Loose type checking with helpful messages; YAML gives us raw python."""
    if value is None:
        return None
    want_int = key in {"epochs_per_task", "batch_size", "timesteps", "hidden",
                       "buffer_capacity", "window", "train_per_class",
                       "test_per_class"}
    want_float = key in {"lr", "r_target", "eta", "lambda_min", "lambda_max",
                         "grad_clip"}
    want_bool = key in {"reencode", "insert_final_epoch_only", "figures"}
    want_list = key in {"configs", "seeds"}
    if want_int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r}: expected integer, got {value!r}")
        return value
    if want_float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r}: expected number, got {value!r}")
        return float(value)
    if want_bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r}: expected boolean, got {value!r}")
        return value
    if want_list:
        if not isinstance(value, list):
            raise ConfigError(f"config key {key!r}: expected list, got {value!r}")
        return value
    return value


def parse_config_file(path) -> dict:
    """Read a YAML config; unknown keys and type mismatches are errors."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    out = {}
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(
                f"{p}: unknown config key {key!r} "
                f"(valid keys: {', '.join(sorted(_FIELD_TYPES))})"
            )
        out[key] = _coerce(key, value)
    return out


def resolve_experiment(args) -> ExperimentConfig:
    """defaults <- preset <- config file <- CLI flags."""
    merged: dict = {}
    if args.preset:
        merged.update(PRESETS[args.preset])
    if args.config:
        merged.update(parse_config_file(args.config))
    if args.seed is not None:
        merged["seeds"] = [int(s) for s in args.seed.split(",")]
    if args.out is not None:
        merged["out_dir"] = args.out
    if args.dataset is not None:
        merged["dataset"] = args.dataset
    if args.data is not None:
        merged["data_dir"] = args.data
    if args.configs is not None:
        merged["configs"] = [c.strip() for c in args.configs.split(",")]
    if getattr(args, "no_figures", False):
        merged["figures"] = False
    for key in merged:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = ExperimentConfig(**merged)
    for cid in cfg.configs:
        if cid not in CONFIG_FLAGS:
            raise ConfigError(
                f"unknown config id {cid!r} (choose from {sorted(CONFIG_FLAGS)})"
            )
    if not cfg.seeds:
        raise ConfigError("seeds list is empty")
    return cfg


def build_run_config(exp: ExperimentConfig, config_id: str, seed: int) -> RunConfig:
    return RunConfig.named(
        config_id,
        schedule=parse_schedule(exp.schedule, 10),
        epochs_per_task=exp.epochs_per_task,
        batch_size=exp.batch_size,
        timesteps=exp.timesteps,
        lr=exp.lr,
        hidden=exp.hidden,
        seed=seed,
        buffer_capacity=exp.buffer_capacity,
        reencode=exp.reencode,
        insert_final_epoch_only=exp.insert_final_epoch_only,
        budget=BudgetConfig(
            r_target=exp.r_target, eta=exp.eta, lambda_min=exp.lambda_min,
            lambda_max=exp.lambda_max, window=exp.window,
        ),
        grad_clip=exp.grad_clip,
    )


def _execute_one(exp: ExperimentConfig, config_id: str, seed: int) -> str:
    data = load_dataset(exp.dataset, exp.data_dir,
                        exp.train_per_class, exp.test_per_class)
    result = run_config(build_run_config(exp, config_id, seed), data)
    write_run_artifacts(exp.out_dir, result, figures=exp.figures)
    line = summary_line(result) + f" wall={result.wall_time_s:.1f}s"
    return line


def _worker(payload) -> str:
    exp_dict, config_id, seed = payload
    return _execute_one(ExperimentConfig(**exp_dict), config_id, seed)


def cmd_run(args) -> int:
    exp = resolve_experiment(args)
    data = load_dataset(exp.dataset, exp.data_dir,
                        exp.train_per_class, exp.test_per_class)
    print(f"dataset={data.name} train={len(data.train_y)} test={len(data.test_y)} "
          f"out={exp.out_dir}")
    jobs = [(cid, seed) for cid in exp.configs for seed in exp.seeds]
    if args.parallel and len(jobs) > 1:
        payloads = [(dataclasses.asdict(exp), cid, seed) for cid, seed in jobs]
        with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as pool:
            for line in pool.map(_worker, payloads):
                print(line)
    else:
        for cid, seed in jobs:
            result = run_config(build_run_config(exp, cid, seed), data)
            write_run_artifacts(exp.out_dir, result, figures=exp.figures)
            print(summary_line(result) + f" wall={result.wall_time_s:.1f}s")
    if len(jobs) > 1:
        out = Path(exp.out_dir)
        rows = [
            SummaryRow.from_json_file(out / f"{cid}_seed{seed}_result.json")
            for cid, seed in jobs
        ]
        write_summary_csv(out / "summary.csv", rows)
        if exp.figures:
            save_summary_figure(out / "summary.png", rows)
    return 0


def cmd_metrics(args) -> int:
    try:
        matrix = read_matrix_csv(args.matrix_csv)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    acc = acc_metric(matrix)
    f = forgetting_metric(matrix)
    b = bwt_metric(matrix)
    print(f"ACC: {acc:.4f}")
    print(f"F:   {'n/a' if f is None else f'{f:.4f}'}")
    print(f"BWT: {'n/a' if b is None else f'{b:+.4f}'}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    for i in range(args.nets):
        in_dim = int(rng.integers(3, 8))
        hidden = int(rng.integers(2, 6))
        out_dim = int(rng.integers(2, 5))
        T = int(rng.integers(2, 6))
        batch = int(rng.integers(1, 4))
        net = init_fcsnn(in_dim, hidden, out_dim, rng=rng, dtype=np.float64)
        spikes = (rng.random((T, batch, in_dim)) < 0.5).astype(np.uint8)
        active = np.arange(out_dim)
        labels = rng.choice(active, size=batch)
        coeff = float(rng.uniform(-2.0, 2.0))
        errs = gradcheck(net, spikes, labels, active, rate_coeff=coeff)
        worst = max(errs.values())
        ok = worst <= args.tol
        failures += 0 if ok else 1
        print(f"net {i:2d}: in={in_dim} hidden={hidden} out={out_dim} T={T} "
              f"B={batch} max_rel_err={worst:.3e} "
              f"{'PASS' if ok else 'FAIL'}")
    print(f"{args.nets - failures}/{args.nets} nets within tolerance {args.tol:g}")
    return 0 if failures == 0 else 1


def cmd_encode(args) -> int:
    data = load_dataset(args.dataset, args.data, train_per_class=None,
                        test_per_class=None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    h, w = data.image_hw
    count = min(args.count, len(data.train_y))
    labels_path = out / "labels.csv"
    with open(labels_path, "w") as fh:
        fh.write("file,label\n")
        for i in range(count):
            img = FrameImage(data.train_x[i].reshape(h, w),
                             label=int(data.train_y[i]))
            spikes = poisson_encode(img, args.timesteps, rng)
            t_idx, unit_idx = np.nonzero(spikes)
            events = make_events(
                t_idx.astype(np.uint32),
                (unit_idx % w).astype(np.uint16),
                (unit_idx // w).astype(np.uint16),
                np.zeros(len(t_idx), dtype=np.uint8),
            )
            name = f"sample_{i:04d}_class{img.label}.evt"
            with open(out / name, "wb") as evt:
                evt.write(write_event_file(w, h, events))
            fh.write(f"{name},{img.label}\n")
    print(f"wrote {count} EVT1 files + {labels_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikebudget",
        description="Spike-budgeted continual learning for spiking networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train configs and emit result artifacts")
    p_run.add_argument("--config", help="YAML experiment config")
    p_run.add_argument("--preset", choices=sorted(PRESETS),
                       help="named hyperparameter preset")
    p_run.add_argument("--seed", help="comma-separated seed list (overrides config)")
    p_run.add_argument("--configs", help="comma-separated config ids, e.g. C0,C1,C4")
    p_run.add_argument("--out", help="output directory")
    p_run.add_argument("--dataset", choices=["auto", "mnist", "digits"])
    p_run.add_argument("--data", help=f"dataset root (default ${DATA_ENV_VAR})")
    p_run.add_argument("--parallel", action="store_true",
                       help="one process per (config, seed)")
    p_run.add_argument("--no-figures", action="store_true",
                       help="skip PNG rendering")
    p_run.set_defaults(func=cmd_run)

    p_met = sub.add_parser("metrics", help="recompute metrics from a matrix CSV")
    p_met.add_argument("matrix_csv")
    p_met.set_defaults(func=cmd_metrics)

    p_grad = sub.add_parser("gradcheck",
                            help="verify BPTT against finite differences")
    p_grad.add_argument("--nets", type=int, default=20)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_enc = sub.add_parser("encode", help="dump dataset samples as EVT1 files")
    p_enc.add_argument("--dataset", default="auto",
                       choices=["auto", "mnist", "digits"])
    p_enc.add_argument("--data", help=f"dataset root (default ${DATA_ENV_VAR})")
    p_enc.add_argument("--count", type=int, default=8)
    p_enc.add_argument("--timesteps", type=int, default=25)
    p_enc.add_argument("--seed", type=int, default=0)
    p_enc.add_argument("--out", default="encoded")
    p_enc.set_defaults(func=cmd_encode)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
