"""A 3-layer tanh MLP with hand-written backprop, Adam, and reflow training.

The network maps the concatenation [x, t] through Linear -> tanh -> Linear ->
tanh -> Linear and predicts either the flow velocity (velocity-matching loss)
or the latent endpoint x1 (noise-matching loss).  Everything is plain numpy
in float64; gradients are exact reverse-mode derivatives of the batch loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Optional

import numpy as np

from vfm.schedules import Schedule, eval_schedule
from vfm.solvers import SolverMethod, TimeGrid, run
from vfm.transforms import TransformedField, VelocitySource

HIDDEN = 100

LOSS_KINDS = ("velocity_matching", "noise_matching")

CHECKPOINT_VERSION = 1

_WEIGHT_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")


class CheckpointError(Exception):
    """Malformed or inconsistent checkpoint file."""


@dataclass
class MLPParams:
    W1: np.ndarray  # (hidden, d + 1)
    b1: np.ndarray
    W2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray
    W3: np.ndarray  # (d, hidden)
    b3: np.ndarray

    @property
    def dim(self) -> int:
        return self.W3.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in _WEIGHT_KEYS}

    def copy(self) -> "MLPParams":
        return MLPParams(**{k: getattr(self, k).copy() for k in _WEIGHT_KEYS})


def init_params(dim: int, rng: np.random.Generator, hidden: int = HIDDEN) -> MLPParams:
    """Per-layer uniform initialization in +-1/sqrt(fan_in)."""

    def layer(n_out, n_in):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
        return w, b

    w1, b1 = layer(hidden, dim + 1)
    w2, b2 = layer(hidden, hidden)
    w3, b3 = layer(dim, hidden)
    return MLPParams(w1, b1, w2, b2, w3, b3)


def _forward_parts(p: MLPParams, x: np.ndarray, t) -> tuple:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    tb = np.broadcast_to(np.asarray(t, dtype=float), (xb.shape[0],))
    u = np.concatenate([xb, tb[:, None]], axis=1)
    h1 = np.tanh(u @ p.W1.T + p.b1)
    h2 = np.tanh(h1 @ p.W2.T + p.b2)
    out = h2 @ p.W3.T + p.b3
    return u, h1, h2, out, single


def mlp_forward(p: MLPParams, x, t) -> np.ndarray:
    """Network output at (x, t); x may be (d,) or (n, d), t scalar or (n,)."""
    _, _, _, out, single = _forward_parts(p, x, t)
    return out[0] if single else out


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter shapes."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, p: MLPParams) -> "AdamState":
        zeros = {k: np.zeros_like(getattr(p, k)) for k in _WEIGHT_KEYS}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()})


def adam_update(p: MLPParams, grads: dict, state: AdamState, lr: float) -> None:
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for k in _WEIGHT_KEYS:
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / correction1
        v_hat = state.v[k] / correction2
        setattr(
            p, k, getattr(p, k) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        )


def matching_loss(pred: np.ndarray, target: np.ndarray, weights=None) -> float:
    """Mean over the batch of the (optionally weighted) squared-norm residual."""
    sq = np.sum((pred - target) ** 2, axis=-1)
    if weights is not None:
        sq = sq * weights
    return float(np.mean(sq))


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "velocity_matching"
    iterations: int = 20000
    batch: int = 2048
    lr: float = 0.003
    n_data: int = 30000
    seed: int = 0
    lambda_t: Optional[Callable] = None  # time weight; None means constant 1

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if min(self.iterations, self.batch, self.n_data) <= 0 or self.lr <= 0:
            raise ValueError("iterations, batch, n_data, and lr must be positive")


def _loss_target(sv, x0, x1, loss_kind):
    if loss_kind == "velocity_matching":
        return sv.a_dot[:, None] * x0 + sv.sigma_dot[:, None] * x1
    return x1


def loss_and_gradients(
    p: MLPParams,
    batch: tuple,
    schedule: Schedule,
    loss_kind: str,
    lambda_t: Optional[Callable] = None,
) -> tuple:
    """Batch loss and its exact gradients w.r.t. every parameter.

    batch is (x0, x1, t) with per-sample times; the network input is
    x_t = a*x0 + sigma*x1 and the regression target is the velocity
    a_dot*x0 + sigma_dot*x1 or the noise sample x1 depending on the loss.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {loss_kind!r}")
    x0, x1, t = (np.asarray(v, dtype=float) for v in batch)
    if x0.shape != x1.shape or x0.ndim != 2 or t.shape != (x0.shape[0],):
        raise ValueError("batch must be (x0 (n,d), x1 (n,d), t (n,))")
    n = x0.shape[0]
    sv = eval_schedule(schedule, t)
    xt = sv.a[:, None] * x0 + sv.sigma[:, None] * x1
    target = _loss_target(sv, x0, x1, loss_kind)
    weights = None if lambda_t is None else np.asarray(lambda_t(t), dtype=float)

    u, h1, h2, out, _ = _forward_parts(p, xt, t)
    loss = matching_loss(out, target, weights)

    g_out = 2.0 * (out - target) / n
    if weights is not None:
        g_out = g_out * weights[:, None]
    grads = {}
    grads["W3"] = g_out.T @ h2
    grads["b3"] = g_out.sum(axis=0)
    g_z2 = (g_out @ p.W3) * (1.0 - h2 * h2)
    grads["W2"] = g_z2.T @ h1
    grads["b2"] = g_z2.sum(axis=0)
    g_z1 = (g_z2 @ p.W2) * (1.0 - h1 * h1)
    grads["W1"] = g_z1.T @ u
    grads["b1"] = g_z1.sum(axis=0)
    return loss, grads


def train(
    config: TrainConfig,
    x0_data: np.ndarray,
    x1_data: np.ndarray,
    schedule: Schedule,
    on_step: Optional[Callable] = None,
    coupled: bool = False,
) -> MLPParams:
    """Minibatch Adam training, bit-reproducible for a given config seed.

    Each iteration draws per-sample times uniformly on [0, 1] and a fresh
    minibatch; endpoints are drawn independently unless `coupled`, in which
    case the same row index is used for both datasets (the reflow regime).
    `on_step(iteration, loss)` is called after every update when supplied.
    """
    x0_data = np.asarray(x0_data, dtype=float)
    x1_data = np.asarray(x1_data, dtype=float)
    if x0_data.shape != x1_data.shape:
        raise ValueError("endpoint datasets must have matching shapes")
    if x0_data.shape[0] < config.n_data:
        raise ValueError("datasets smaller than configured n_data")
    rng = np.random.default_rng(config.seed)
    params = init_params(x0_data.shape[1], rng)
    adam = AdamState.for_params(params)
    for it in range(config.iterations):
        idx0 = rng.integers(0, config.n_data, size=config.batch)
        idx1 = idx0 if coupled else rng.integers(0, config.n_data, size=config.batch)
        t = rng.uniform(0.0, 1.0, size=config.batch)
        loss, grads = loss_and_gradients(
            params,
            (x0_data[idx0], x1_data[idx1], t),
            schedule,
            config.loss,
            config.lambda_t,
        )
        adam_update(params, grads, adam, config.lr)
        if on_step is not None:
            on_step(it, loss)
    return params


def reflow(
    teacher: TransformedField,
    grid: TimeGrid,
    method: SolverMethod,
    config: TrainConfig,
    x1_samples: np.ndarray,
) -> MLPParams:
    """Retrain a velocity model on the coupling carried by an existing flow.

    The teacher field is integrated from the given x1 draws down to t=0; the
    resulting (endpoint, x1) pairs form a deterministic coupling, and a fresh
    network is fitted to the straight-line velocity x1 - x0 of that coupling.
    """
    x1_samples = np.asarray(x1_samples, dtype=float)
    trajs = run(teacher, grid, method, x1_samples)
    x0_end = np.stack([tr.final_x for tr in trajs])
    student_config = replace(
        config, loss="velocity_matching", n_data=x1_samples.shape[0]
    )
    return train(
        student_config,
        x0_end,
        x1_samples,
        Schedule("rectified"),
        coupled=True,
    )


def as_source(params: MLPParams, field_kind: str) -> VelocitySource:
    """Wrap trained parameters as a velocity source for the transform layer."""
    return VelocitySource(field_kind, lambda x, t: mlp_forward(params, x, t))


def save_checkpoint(
    p: MLPParams, path, schedule: Schedule, field_kind: str
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "dim": p.dim,
        "hidden": p.hidden,
        "schedule_id": {"variant": schedule.variant, "params": schedule.params},
        "field_kind": field_kind,
        "weights": {k: getattr(p, k).tolist() for k in _WEIGHT_KEYS},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> tuple:
    """Returns (params, schedule, field_kind); raises CheckpointError on damage."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    try:
        if payload["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {payload['version']!r}"
            )
        dim, hidden = payload["dim"], payload["hidden"]
        weights = {
            k: np.asarray(payload["weights"][k], dtype=float) for k in _WEIGHT_KEYS
        }
        schedule = Schedule(
            payload["schedule_id"]["variant"],
            dict(payload["schedule_id"]["params"]),
        )
        field_kind = payload["field_kind"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    expected = {
        "W1": (hidden, dim + 1),
        "b1": (hidden,),
        "W2": (hidden, hidden),
        "b2": (hidden,),
        "W3": (dim, hidden),
        "b3": (dim,),
    }
    for k, shape in expected.items():
        if weights[k].shape != shape:
            raise CheckpointError(
                f"weight {k} has shape {weights[k].shape}, expected {shape}"
            )
    return MLPParams(**weights), schedule, field_kind
