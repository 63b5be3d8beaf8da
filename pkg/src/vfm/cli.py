"""Command-line entry points: train, sample, reflow, convergence, metrics.

Exit codes: 0 on success, 1 on configuration problems, 2 when non-finite
numbers show up in outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from vfm import experiments, mlp
from vfm.experiments import (
    ConfigError,
    DatasetSpec,
    NumericsError,
    initial_draws,
    make_toy,
    read_samples_csv,
)
from vfm.schedules import SCHEDULE_NAMES, make_schedule
from vfm.solvers import METHODS, SolverMethod, time_grid
from vfm.transforms import TRANSFORM_NAMES


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(what, f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(what, f"invalid JSON in {path}: {exc}") from exc


def _train_config(cfg: dict) -> mlp.TrainConfig:
    fields = {}
    for key, kind in (
        ("loss", str),
        ("iterations", int),
        ("batch", int),
        ("lr", (int, float)),
        ("n_data", int),
        ("seed", int),
    ):
        if key in cfg:
            if not isinstance(cfg[key], kind):
                raise ConfigError(key, f"expected {kind}")
            fields[key] = cfg[key]
    try:
        return mlp.TrainConfig(**fields)
    except ValueError as exc:
        raise ConfigError("<train config>", str(exc)) from exc


def _schedule_from_config(cfg: dict):
    block = cfg.get("schedule")
    if not isinstance(block, dict) or "name" not in block:
        raise ConfigError("schedule", "expected {'name': ..., 'params': {...}}")
    try:
        return make_schedule(block["name"], **block.get("params", {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError("schedule", str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _load_json(args.config, "--config")
    schedule = _schedule_from_config(cfg)
    config = _train_config(cfg)
    spec = DatasetSpec(
        n=max(config.n_data, cfg.get("n_data", config.n_data)),
        seed=cfg.get("data_seed", 0),
    )
    x0, x1 = make_toy(spec)
    field_kind = (
        "noise_model" if config.loss == "noise_matching" else "velocity_model"
    )
    params = mlp.train(config, x0, x1, schedule)
    mlp.save_checkpoint(params, args.out, schedule, field_kind)
    print(f"saved {field_kind} for {schedule.variant} to {args.out}")
    return 0


def cmd_sample(args) -> int:
    if (args.model is None) == (not args.oracle):
        raise ConfigError("--model/--oracle", "give exactly one of them")
    if args.oracle:
        if args.schedule is None:
            raise ConfigError("--schedule", "required with --oracle")
        field_cfg = {"type": "oracle", "output": args.output}
        schedule_cfg = {"name": args.schedule, "params": {}}
    else:
        _, ckpt_schedule, _ = mlp.load_checkpoint(args.model)
        field_cfg = {"type": "model", "path": args.model}
        schedule_cfg = {
            "name": ckpt_schedule.variant.replace("_", "-"),
            "params": ckpt_schedule.params,
        }
    config = {
        "seed": args.seed,
        "count": args.count,
        "schedule": schedule_cfg,
        "field": field_cfg,
        "flows": [args.flow],
        "solvers": [args.solver],
        "steps": [args.steps],
        "svg": args.svg,
    }
    if args.eps is not None:
        config["eps"] = args.eps
    experiments.run_experiment(config, args.out)
    print(f"wrote outputs to {args.out}")
    return 0


def cmd_reflow(args) -> int:
    cfg = _load_json(args.config, "--config")
    config = _train_config(cfg)
    try:
        params, schedule, field_kind = mlp.load_checkpoint(args.teacher)
    except (OSError, mlp.CheckpointError) as exc:
        raise ConfigError("--teacher", str(exc)) from exc
    teacher = experiments.model_field(
        params, field_kind, schedule, cfg.get("teacher_flow", "sc-interp")
    )
    dataset = DatasetSpec(n=config.n_data, seed=cfg.get("data_seed", 0))
    x1 = experiments.sample_mixture(dataset.p1, dataset.n, dataset.seed + 1)
    grid = time_grid(cfg.get("teacher_steps", 100))
    student = mlp.reflow(teacher, grid, SolverMethod("euler"), config, x1)
    mlp.save_checkpoint(
        student, args.out, make_schedule("rectified"), "velocity_model"
    )
    print(f"saved reflowed velocity model to {args.out}")
    return 0


def cmd_convergence(args) -> int:
    if not args.oracle:
        raise ConfigError("--oracle", "only the oracle field is supported")
    schedule = make_schedule(args.schedule)
    dataset = DatasetSpec()
    field = experiments.oracle_field(
        dataset.p0, dataset.p1, schedule, "sc-interp"
    )
    reference = experiments.oracle_field(
        dataset.p0, dataset.p1, schedule, "posterior"
    )
    x_init = initial_draws(dataset.p0, dataset.p1, schedule, args.count, args.seed)
    steps = [10, 20, 40, 80, 160]
    table = experiments.convergence_errors(
        field, list(args.methods), steps, x_init, reference, args.reference_steps
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "convergence.json").write_text(json.dumps(table, sort_keys=True, indent=1))
    with open(out / "convergence.csv", "w") as fh:
        fh.write("method,steps,rmse\n")
        for name in table:
            for n, err in table[name].items():
                fh.write(f"{name},{n},{err!r}\n")
    for name in table:
        errs = table[name]
        orders = [
            np.log2(errs[a] / errs[b])
            for a, b in zip(steps[:-1], steps[1:])
            if errs[b] > 0
        ]
        print(f"{name}: errors {errs}, pairwise orders {[round(o, 2) for o in orders]}")
    return 0


def cmd_metrics(args) -> int:
    a = read_samples_csv(args.a)
    b = read_samples_csv(args.b)
    value = experiments.energy_distance(a, b)
    if not np.isfinite(value):
        raise NumericsError("energy distance is not finite")
    print(json.dumps({"energy_distance": value}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfm",
        description="Straight constant-speed flow transformations and samplers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a velocity or noise model")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(fn=cmd_train)

    p_sample = sub.add_parser("sample", help="sample along a transformed flow")
    p_sample.add_argument("--model")
    p_sample.add_argument("--oracle", action="store_true")
    p_sample.add_argument("--schedule", choices=sorted(SCHEDULE_NAMES))
    p_sample.add_argument("--output", choices=["velocity", "noise"], default="velocity")
    p_sample.add_argument("--flow", choices=sorted(TRANSFORM_NAMES), default="sc-interp")
    p_sample.add_argument("--solver", choices=METHODS, default="euler")
    p_sample.add_argument("--steps", type=int, default=10)
    p_sample.add_argument("--count", type=int, default=2048)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--eps", type=float)
    p_sample.add_argument("--svg", action="store_true")
    p_sample.add_argument("--out", required=True)
    p_sample.set_defaults(fn=cmd_sample)

    p_reflow = sub.add_parser("reflow", help="retrain on a flow's own coupling")
    p_reflow.add_argument("--teacher", required=True)
    p_reflow.add_argument("--config", required=True)
    p_reflow.add_argument("--out", required=True)
    p_reflow.set_defaults(fn=cmd_reflow)

    p_conv = sub.add_parser("convergence", help="empirical solver order study")
    p_conv.add_argument("--oracle", action="store_true")
    p_conv.add_argument("--schedule", choices=sorted(SCHEDULE_NAMES), required=True)
    p_conv.add_argument("--methods", nargs="+", default=["euler", "heun", "ab2", "rk3", "ab3"])
    p_conv.add_argument("--count", type=int, default=256)
    p_conv.add_argument("--seed", type=int, default=0)
    p_conv.add_argument("--reference-steps", type=int, default=4096)
    p_conv.add_argument("--out", required=True)
    p_conv.set_defaults(fn=cmd_convergence)

    p_metrics = sub.add_parser("metrics", help="energy distance between sample CSVs")
    p_metrics.add_argument("--a", required=True)
    p_metrics.add_argument("--b", required=True)
    p_metrics.set_defaults(fn=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
