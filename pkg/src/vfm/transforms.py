"""Frame transformations between the original, straight, and constant-speed flows.

The original process x_t = a_t*x0 + sigma_t*x1 can be straightened by
dividing the sample by a_t + sigma_t (interp form) or by a_t (scale form),
giving an "SN" flow whose velocity direction is fixed along a trajectory but
whose speed varies.  Constant speed is then obtained either by stepping in
the scaled time phi instead of t (time adjustment) or by shifting the sample
with (t - phi) times the velocity direction (variable shifting).  This module
implements the sample maps, the velocity maps, the cross-process map that
replays one process's flow along another process's path, and the classic
deterministic denoising update that is the scale/time-adjustment special case.

Velocities are always evaluated in the original frame: trained models are only
reliable on inputs distributed like the process they were fitted on, so every
transformed velocity is computed from the model output at (x_t, t) and then
mapped, never by feeding a transformed sample to the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from vfm.schedules import (
    Schedule,
    ScheduleValues,
    clip_denominator,
    cross_term,
    eval_schedule,
)
from vfm.velocity import FIELD_KINDS, FlowState

TRANSFORM_KINDS = (
    "posterior",
    "sn_interp",
    "sn_scale",
    "sc_interp_time_adjust",
    "sc_scale_time_adjust",
    "sc_interp_shift",
    "sc_scale_shift",
)

# CLI / config spelling -> internal kind name.
TRANSFORM_NAMES = {
    "posterior": "posterior",
    "sn-interp": "sn_interp",
    "sn-scale": "sn_scale",
    "sc-interp": "sc_interp_time_adjust",
    "sc-scale": "sc_scale_time_adjust",
    "sc-interp-shift": "sc_interp_shift",
    "sc-scale-shift": "sc_scale_shift",
}


def transform_kind(name: str) -> str:
    key = name.replace("_", "-") if name not in TRANSFORM_KINDS else name
    if name in TRANSFORM_KINDS:
        return name
    if key in TRANSFORM_NAMES:
        return TRANSFORM_NAMES[key]
    raise ValueError(f"unknown transform kind {name!r}")


def scaling_form(kind: str) -> str | None:
    """Which denominator the kind divides by: "interp", "scale", or None."""
    if kind == "posterior":
        return None
    return "interp" if "interp" in kind else "scale"


def is_sc(kind: str) -> bool:
    return kind.startswith("sc_")


def is_shift(kind: str) -> bool:
    return kind.endswith("_shift")


def is_time_adjust(kind: str) -> bool:
    return kind.endswith("_time_adjust")


def frame_of(kind: str) -> str:
    if kind == "posterior":
        return "original"
    if kind in ("sn_interp", "sn_scale"):
        return kind
    return "sc"


@dataclass(frozen=True)
class VelocitySource:
    """A base model or oracle: fn(x, t) -> model output at original-frame x.

    kind says what fn returns: a velocity ("velocity_model" or "oracle"),
    a noise estimate x1_given_t ("noise_model"), or a data estimate
    x0_given_t ("data_model").
    """

    kind: str
    fn: Callable[[np.ndarray, float], np.ndarray]

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")


@dataclass(frozen=True)
class TransformedField:
    """A base velocity source viewed through one of the transform kinds."""

    base: VelocitySource
    schedule: Schedule
    kind: str
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "kind", transform_kind(self.kind))
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _scale_den(kind: str, sv: ScheduleValues, eps: float) -> float:
    form = scaling_form(kind)
    if form is None:
        return 1.0
    raw = sv.a + sv.sigma if form == "interp" else sv.a
    return clip_denominator(raw, eps)


def _phi_value(kind: str, sv: ScheduleValues, eps: float) -> float:
    return sv.sigma / _scale_den(kind, sv, eps)


def to_transformed(
    state: FlowState, kind: str, sv: ScheduleValues, eps: float, direction=None
) -> FlowState:
    """Map an original-frame sample into the kind's variable space.

    Scaling kinds divide by the (clipped) frame denominator.  Shift kinds
    additionally add (t - phi) times the current velocity direction, which
    the caller must supply (it is the x1 - x0 estimate for interp frames and
    the x1 estimate for scale frames).
    """
    kind = transform_kind(kind)
    if state.frame != "original":
        raise ValueError("to_transformed expects an original-frame state")
    if kind == "posterior":
        return state
    xb = state.x / _scale_den(kind, sv, eps)
    if is_shift(kind):
        if direction is None:
            raise ValueError("shift kinds need a velocity-direction estimate")
        xb = xb + (state.t - _phi_value(kind, sv, eps)) * np.asarray(direction, float)
    return FlowState(xb, state.t, frame_of(kind))


def from_transformed(
    state: FlowState, kind: str, sv: ScheduleValues, eps: float, direction=None
) -> FlowState:
    """Map a transformed sample back to the original frame at its own time.

    Exact inverse of `to_transformed` for scaling kinds.  Shift kinds undo
    the offset with the most recently evaluated direction, which approximates
    the (unavailable) direction at the state's own time.
    """
    kind = transform_kind(kind)
    if kind == "posterior":
        return state
    if state.frame != frame_of(kind):
        raise ValueError(f"state frame {state.frame!r} does not match kind {kind!r}")
    xb = state.x
    if is_shift(kind):
        if direction is None:
            raise ValueError("shift kinds need the previous direction estimate")
        xb = xb - (state.t - _phi_value(kind, sv, eps)) * np.asarray(direction, float)
    return FlowState(xb * _scale_den(kind, sv, eps), state.t, "original")


def scaled_process_velocity(k: float, k_dot: float, x, v) -> np.ndarray:
    """Velocity of the pointwise-scaled process k_t*x_t: k_dot*x + k*v."""
    return k_dot * np.asarray(x, float) + k * np.asarray(v, float)


def _base_outputs(field: TransformedField, x: np.ndarray, t: float, sv):
    """Evaluate the base at the original-frame sample.

    Returns (v, x1) where exactly one of them is None: the velocity for
    velocity-style bases, the noise estimate for noise/data bases.
    """
    raw = np.asarray(field.base.fn(x, t), dtype=float)
    if field.base.kind in ("velocity_model", "oracle"):
        return raw, None
    if field.base.kind == "noise_model":
        return None, raw
    # data_model: convert the x0 estimate to the x1 estimate
    x1 = (x - sv.a * raw) / clip_denominator(sv.sigma, field.eps)
    return None, x1


def transformed_velocity(field: TransformedField, x, t: float) -> np.ndarray:
    """Velocity of the transformed flow at the original-frame sample (x, t).

    Velocity-style bases go through the scaled-process formulas; noise-style
    bases go through the x1-based forms, which avoid multiplying the model
    output by large intermediate factors.
    """
    x = np.asarray(x, dtype=float)
    sv = eval_schedule(field.schedule, t)
    v, x1 = _base_outputs(field, x, t, sv)
    eps = field.eps
    kind = field.kind
    a, s, ad, sd = sv.a, sv.sigma, sv.a_dot, sv.sigma_dot
    cross = cross_term(sv)

    if kind == "posterior":
        if v is not None:
            return v
        return (ad * x + cross * x1) / clip_denominator(a, eps)

    form = scaling_form(kind)
    if not is_sc(kind):  # straight, non-constant-speed
        if form == "interp":
            if v is not None:
                return ((a + s) * v - (ad + sd) * x) / clip_denominator(
                    (a + s) ** 2, eps
                )
            phi_dot = cross / clip_denominator((a + s) ** 2, eps)
            return phi_dot * ((a + s) * x1 - x) / clip_denominator(a, eps)
        if v is not None:
            return (a * v - ad * x) / clip_denominator(a * a, eps)
        phi_dot = cross / clip_denominator(a * a, eps)
        return phi_dot * x1

    # straight constant-speed: the velocity is the fixed direction itself
    if form == "interp":
        if v is not None:
            return ((a + s) * v - (ad + sd) * x) / clip_denominator(cross, eps)
        return ((a + s) * x1 - x) / clip_denominator(a, eps)
    if v is not None:
        return (a * v - ad * x) / clip_denominator(cross, eps)
    return x1


@dataclass(frozen=True)
class TargetSchedulePair:
    """Source process (a, sigma) and target process (b, zeta) for flow replay."""

    source: Schedule
    target: Schedule

    def __post_init__(self):
        for role, sched in (("source", self.source), ("target", self.target)):
            sv0 = eval_schedule(sched, 0.0)
            if sv0.a != 1.0 or sv0.sigma != 0.0:
                raise ValueError(
                    f"{role} schedule {sched.variant!r} violates the t=0 "
                    "boundary conditions a(0)=1, sigma(0)=0"
                )


def flow_to_flow_map(
    pair: TargetSchedulePair, x, t: float, x1_est, eps: float
) -> np.ndarray:
    """Map a source-process sample onto the target process at the same time.

    x_hat = (b/a)*x + (zeta - sigma*b/a)*x1_est, with the source coefficient
    a clipped.
    """
    x = np.asarray(x, float)
    x1_est = np.asarray(x1_est, float)
    svs = eval_schedule(pair.source, t)
    svt = eval_schedule(pair.target, t)
    ratio = svt.a / clip_denominator(svs.a, eps)
    return ratio * x + (svt.sigma - svs.sigma * ratio) * x1_est


def sc_to_target(
    pair: TargetSchedulePair,
    xbar,
    t_prime: float,
    sc_velocity,
    sc_form: str,
    eps: float,
) -> np.ndarray:
    """Map a constant-speed-in-t sample onto the target process.

    xbar is understood as the shifted SC sample ((1-t)*x0 + t*x1 for the
    interp form, x0 + t*x1 for the scale form) and sc_velocity as the most
    recent SC velocity.  Returns k*(xbar - (t' - zeta/k)*sc_velocity) with
    k = b + zeta (interp) or k = b (scale), clipped.
    """
    if sc_form not in ("interp", "scale"):
        raise ValueError(f"unknown sc form {sc_form!r}")
    xbar = np.asarray(xbar, float)
    vel = np.asarray(sc_velocity, float)
    svt = eval_schedule(pair.target, t_prime)
    k = svt.a + svt.sigma if sc_form == "interp" else svt.a
    kc = clip_denominator(k, eps)
    return kc * xbar - (kc * t_prime - svt.sigma) * vel


def ddim_step(
    sv: ScheduleValues, sv_next: ScheduleValues, x, x1_est, eps: float
) -> np.ndarray:
    """Deterministic denoising update x_t' = a'*x0_implied + sigma'*x1_est.

    Algebraically one Euler step of the scale-form, time-adjusted SC flow
    followed by recovery to the original frame.
    """
    x = np.asarray(x, float)
    x1_est = np.asarray(x1_est, float)
    x0 = (x - sv.sigma * x1_est) / clip_denominator(sv.a, eps)
    return sv_next.a * x0 + sv_next.sigma * x1_est
