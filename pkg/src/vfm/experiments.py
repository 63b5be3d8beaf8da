"""Toy dataset, sample-quality metrics, and the experiment runner.

The 2D benchmark couples a three-component Gaussian mixture (the data side)
with a two-component one (the latent side).  Sampling quality is scored with
the energy distance, trajectory geometry with a chord-deviation straightness
statistic, and solver agreement with the RMS distance between paired final
states.  `run_experiment` sweeps (flow kind x solver x step count) cells from
a JSON config and writes CSV/JSON artifacts per cell.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from vfm import mlp
from vfm.gmm import GaussianMixture, marginal_mixture, posterior_moments, \
    posterior_velocity, sample_mixture
from vfm.schedules import Schedule, eval_schedule, make_schedule
from vfm.solvers import SolverMethod, TimeGrid, Trajectory, run, time_grid
from vfm.transforms import TransformedField, VelocitySource, transform_kind
from vfm.velocity import DEFAULT_EPS_NOISE, DEFAULT_EPS_VELOCITY

TOY_P0 = GaussianMixture(
    weights=np.full(3, 1.0 / 3.0),
    means=np.array([[20.0, 20.0], [25.0, 10.0], [10.0, 26.0]]),
    covs=np.array(
        [
            [[0.6**2, 0.7**2], [0.7**2, 1.4**2]],
            [[1.3**2, -(0.9**2)], [-(0.9**2), 1.0**2]],
            [[1.2**2, 0.0], [0.0, 1.2**2]],
        ]
    ),
)

TOY_P1 = GaussianMixture(
    weights=np.array([0.5, 0.5]),
    means=np.array([[5.0, -5.0], [-5.0, 3.0]]),
    covs=np.array([np.eye(2), np.eye(2)]),
)


class ConfigError(ValueError):
    """Invalid experiment configuration; `key` points at the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class NumericsError(RuntimeError):
    """Non-finite values detected while producing experiment outputs."""


@dataclass(frozen=True)
class DatasetSpec:
    p0: GaussianMixture = TOY_P0
    p1: GaussianMixture = TOY_P1
    n: int = 30000
    seed: int = 0


def make_toy(spec: DatasetSpec = DatasetSpec()) -> tuple:
    """Deterministic endpoint datasets (x0 draws, x1 draws)."""
    x0 = sample_mixture(spec.p0, spec.n, spec.seed)
    x1 = sample_mixture(spec.p1, spec.n, spec.seed + 1)
    return x0, x1


def energy_distance(a, b, max_points: int = 2048, seed: int = 0) -> float:
    """2 E|a-b| - E|a-a'| - E|b-b'| over all pairs (subsampled when large).

    Zero exactly for identical multisets; larger sets are subsampled to
    `max_points` rows with a seeded generator so results are reproducible.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both sample sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets must share a dimension")
    rng = np.random.default_rng(seed)
    if a.shape[0] > max_points:
        a = a[rng.choice(a.shape[0], size=max_points, replace=False)]
    if b.shape[0] > max_points:
        b = b[rng.choice(b.shape[0], size=max_points, replace=False)]
    dab = cdist(a, b).mean()
    daa = cdist(a, a).mean()
    dbb = cdist(b, b).mean()
    return float(2.0 * dab - daa - dbb)


def _finals(trajs) -> np.ndarray:
    if isinstance(trajs, np.ndarray):
        return trajs
    return np.stack([tr.final_x for tr in trajs])


def trajectory_rmse(traj_set_a, traj_set_b) -> float:
    """Root-mean-square distance between paired final states."""
    fa, fb = _finals(traj_set_a), _finals(traj_set_b)
    if fa.shape != fb.shape:
        raise ValueError("trajectory sets must have matching counts")
    return float(np.sqrt(np.mean(np.sum((fa - fb) ** 2, axis=-1))))


def straightness(traj) -> float:
    """Mean perpendicular deviation of interior points from the endpoint
    chord, divided by the chord length.  Zero iff the path is straight."""
    pts = traj.xs if isinstance(traj, Trajectory) else np.asarray(traj, float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 records")
    chord = pts[-1] - pts[0]
    length = float(np.linalg.norm(chord))
    rel = pts[1:-1] - pts[0]
    if length == 0.0:
        return 0.0 if np.allclose(rel, 0.0) else float("inf")
    proj = (rel @ chord) / length**2
    perp = np.linalg.norm(rel - proj[:, None] * chord[None, :], axis=1)
    return float(np.mean(perp) / length)


def oracle_field(
    p0: GaussianMixture,
    p1: GaussianMixture,
    schedule: Schedule,
    kind: str,
    eps: float = DEFAULT_EPS_VELOCITY,
    output: str = "velocity",
) -> TransformedField:
    """Exact mixture field wrapped for the transform layer.

    output "velocity" exposes the exact flow velocity; "noise" exposes the
    exact conditional mean of x1, exercising the noise-model code paths.
    """
    if output == "velocity":
        source = VelocitySource(
            "oracle", lambda x, t: posterior_velocity(p0, p1, eval_schedule(schedule, t), x)
        )
    elif output == "noise":
        source = VelocitySource(
            "noise_model",
            lambda x, t: posterior_moments(p0, p1, eval_schedule(schedule, t), x).x1_given_t,
        )
    else:
        raise ValueError(f"unknown oracle output {output!r}")
    return TransformedField(source, schedule, transform_kind(kind), eps)


def model_field(
    params: mlp.MLPParams,
    field_kind: str,
    schedule: Schedule,
    kind: str,
    eps: Optional[float] = None,
) -> TransformedField:
    if eps is None:
        eps = DEFAULT_EPS_NOISE if field_kind == "noise_model" else DEFAULT_EPS_VELOCITY
    return TransformedField(
        mlp.as_source(params, field_kind), schedule, transform_kind(kind), eps
    )


def initial_draws(
    p0: GaussianMixture,
    p1: GaussianMixture,
    schedule: Schedule,
    n: int,
    seed: int,
    t: float = 1.0,
) -> np.ndarray:
    """Starting points for sampling: draws from the exact marginal at t."""
    mix = marginal_mixture(p0, p1, eval_schedule(schedule, t))
    return sample_mixture(mix, n, seed)


@dataclass
class MetricsReport:
    energy_distance: float
    straightness: float
    nfe: int
    trajectory_rmse: Optional[float] = None
    trackers: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "energy_distance": self.energy_distance,
            "straightness": self.straightness,
            "nfe": self.nfe,
            "trajectory_rmse": self.trajectory_rmse,
            "trackers": self.trackers,
        }


def batch_trackers(trajs) -> dict:
    """Per-step maxima over the batch of the per-trajectory diagnostics."""
    return {
        "t": [float(v) for v in trajs[0].ts],
        "max_abs_x": np.max([tr.max_abs_x for tr in trajs], axis=0).tolist(),
        "max_abs_xbar": np.max([tr.max_abs_xbar for tr in trajs], axis=0).tolist(),
        "max_abs_v": np.max([tr.max_abs_v for tr in trajs], axis=0).tolist(),
        "delta_phi": [float(v) for v in trajs[0].delta_phi],
    }


def write_trajectories_csv(path, trajs) -> None:
    dim = trajs[0].xs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["traj_id", "step", "t", "nfe_so_far"]
            + [f"x_{k}" for k in range(dim)]
            + ["max_abs_x", "max_abs_v", "delta_phi"]
        )
        for tid, tr in enumerate(trajs):
            for i in range(tr.ts.size):
                writer.writerow(
                    [tid, i, repr(float(tr.ts[i])), int(tr.nfe_so_far[i])]
                    + [repr(float(v)) for v in tr.xs[i]]
                    + [
                        repr(float(tr.max_abs_x[i])),
                        repr(float(tr.max_abs_v[i])),
                        repr(float(tr.delta_phi[i])),
                    ]
                )


def write_samples_csv(path, samples: np.ndarray) -> None:
    samples = np.asarray(samples, float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj_id"] + [f"x_{k}" for k in range(samples.shape[1])])
        for tid, row in enumerate(samples):
            writer.writerow([tid] + [repr(float(v)) for v in row])


def read_samples_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [i for i, name in enumerate(header) if name.startswith("x_")]
        rows = [[float(row[i]) for i in cols] for row in reader]
    return np.asarray(rows, dtype=float)


def write_scatter_svg(path, groups, size: int = 480) -> None:
    """Minimal deterministic scatter plot: list of (points, color) groups."""
    pts = np.concatenate([np.asarray(g[0], float) for g in groups])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)

    def to_px(p):
        q = (p - lo) / span
        return q[0] * (size - 20) + 10, (1.0 - q[1]) * (size - 20) + 10

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
    ]
    for points, color in groups:
        for p in np.asarray(points, float):
            px, py = to_px(p)
            parts.append(
                f'<circle cx="{px:.2f}" cy="{py:.2f}" r="1.5" fill="{color}"/>'
            )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------

_FLOW_CHOICES = tuple(
    ["posterior", "sn-interp", "sn-scale", "sc-interp", "sc-scale",
     "sc-interp-shift", "sc-scale-shift"]
)


def _cfg_get(config, key, default, kinds, path):
    value = config.get(key, default)
    if value is None:
        raise ConfigError(path, "missing required key")
    if not isinstance(value, kinds):
        raise ConfigError(path, f"expected {kinds}, got {type(value).__name__}")
    return value


def _parse_schedule(config, path) -> Schedule:
    block = _cfg_get(config, "schedule", None, dict, path)
    name = _cfg_get(block, "name", None, str, f"{path}.name")
    params = _cfg_get(block, "params", {}, dict, f"{path}.params")
    try:
        return make_schedule(name, **params)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _parse_field(config, schedule, path):
    """Returns (make_field(flow_kind, eps) factory, default_eps)."""
    block = _cfg_get(config, "field", {"type": "oracle"}, dict, path)
    ftype = _cfg_get(block, "type", None, str, f"{path}.type")
    dataset = DatasetSpec()
    if ftype == "oracle":
        output = _cfg_get(block, "output", "velocity", str, f"{path}.output")
        if output not in ("velocity", "noise"):
            raise ConfigError(f"{path}.output", f"unknown oracle output {output!r}")
        default_eps = (
            DEFAULT_EPS_VELOCITY if output == "velocity" else DEFAULT_EPS_NOISE
        )

        def factory(flow, eps):
            return oracle_field(dataset.p0, dataset.p1, schedule, flow, eps, output)

        return factory, default_eps
    if ftype == "model":
        model_path = _cfg_get(block, "path", None, str, f"{path}.path")
        try:
            params, ckpt_schedule, field_kind = mlp.load_checkpoint(model_path)
        except (OSError, mlp.CheckpointError) as exc:
            raise ConfigError(f"{path}.path", str(exc)) from exc
        if ckpt_schedule.variant != schedule.variant:
            raise ConfigError(
                f"{path}.path",
                f"checkpoint was trained on {ckpt_schedule.variant!r}, "
                f"config asks for {schedule.variant!r}",
            )
        default_eps = (
            DEFAULT_EPS_NOISE if field_kind == "noise_model" else DEFAULT_EPS_VELOCITY
        )

        def factory(flow, eps):
            return model_field(params, field_kind, schedule, flow, eps)

        return factory, default_eps
    raise ConfigError(f"{path}.type", f"unknown field type {ftype!r}")


def run_experiment(config: dict, out_dir) -> Path:
    """Execute every (flow x solver x steps) cell of a config and write
    trajectories.csv, samples.csv, and metrics.json per cell plus a final
    manifest.json.  Outputs are a pure function of the config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not isinstance(config, dict):
        raise ConfigError("<root>", "config must be a JSON object")

    seed = _cfg_get(config, "seed", 0, int, "seed")
    count = _cfg_get(config, "count", 2048, int, "count")
    schedule = _parse_schedule(config, "schedule")
    factory, default_eps = _parse_field(config, schedule, "field")
    eps = _cfg_get(config, "eps", default_eps, (int, float), "eps")
    flows = _cfg_get(config, "flows", ["posterior"], list, "flows")
    for i, flow in enumerate(flows):
        if flow not in _FLOW_CHOICES:
            raise ConfigError(f"flows[{i}]", f"unknown flow kind {flow!r}")
    solver_names = _cfg_get(config, "solvers", ["euler"], list, "solvers")
    for i, name in enumerate(solver_names):
        try:
            SolverMethod(name)
        except ValueError as exc:
            raise ConfigError(f"solvers[{i}]", str(exc)) from exc
    steps_list = _cfg_get(config, "steps", [10], list, "steps")
    for i, n in enumerate(steps_list):
        if not isinstance(n, int) or n < 1:
            raise ConfigError(f"steps[{i}]", "step counts must be integers >= 1")
    svg = _cfg_get(config, "svg", False, bool, "svg")

    dataset = DatasetSpec()
    x_init = initial_draws(dataset.p0, dataset.p1, schedule, count, seed)
    reference = sample_mixture(dataset.p0, count, seed + 1)

    manifest = {"config": config, "cells": []}
    for flow in flows:
        for solver_name in solver_names:
            for n_steps in steps_list:
                cell = f"{flow}_{solver_name}_N{n_steps}"
                cell_dir = out / cell
                cell_dir.mkdir(exist_ok=True)
                field = factory(flow, float(eps))
                trajs = run(
                    field, time_grid(n_steps), SolverMethod(solver_name), x_init
                )
                finals = _finals(trajs)
                if not np.all(np.isfinite(finals)):
                    raise NumericsError(f"non-finite samples in cell {cell}")
                med_straight = float(
                    np.median([straightness(tr) for tr in trajs])
                ) if n_steps >= 2 else 0.0
                report = MetricsReport(
                    energy_distance=energy_distance(finals, reference, seed=seed),
                    straightness=med_straight,
                    nfe=trajs[0].nfe,
                    trackers=batch_trackers(trajs),
                )
                write_trajectories_csv(cell_dir / "trajectories.csv", trajs)
                write_samples_csv(cell_dir / "samples.csv", finals)
                (cell_dir / "metrics.json").write_text(
                    json.dumps(report.to_dict(), sort_keys=True, indent=1)
                )
                if svg:
                    write_scatter_svg(
                        cell_dir / "samples.svg",
                        [(reference, "#999999"), (finals, "#d95f02")],
                    )
                manifest["cells"].append(
                    {
                        "cell": cell,
                        "flow": flow,
                        "solver": solver_name,
                        "steps": n_steps,
                        "energy_distance": report.energy_distance,
                        "nfe": report.nfe,
                    }
                )
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1)
    )
    return out


def convergence_errors(
    field: TransformedField,
    method_names,
    steps_list,
    x_init: np.ndarray,
    reference_field: TransformedField,
    reference_steps: int = 4096,
) -> dict:
    """RMS endpoint error of each (method, N) against a fine reference run."""
    ref = run(
        reference_field, time_grid(reference_steps), SolverMethod("rk4"), x_init
    )
    ref_finals = _finals(ref)
    table = {}
    for name in method_names:
        table[name] = {}
        for n in steps_list:
            trajs = run(field, time_grid(n), SolverMethod(name), x_init)
            table[name][n] = trajectory_rmse(_finals(trajs), ref_finals)
    return table
