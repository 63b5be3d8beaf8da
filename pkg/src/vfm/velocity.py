"""Conversions between the three descriptions of a flow state.

A flow at (x_t, t) can be described by its velocity v, by the denoised
estimate x0_given_t = E[X0 | x_t], or by the noise estimate
x1_given_t = E[X1 | x_t].  With the schedule coefficients in hand any one of
them determines the other two:

    v  = (a_dot*x + (a*sigma_dot - a_dot*sigma) * x1_given_t) / a
    v  = (sigma_dot*x - (a*sigma_dot - a_dot*sigma) * x0_given_t) / sigma
    x  = a*x0_given_t + sigma*x1_given_t

All divisions clip their denominator instead of restricting the time range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vfm.schedules import ScheduleValues, clip_denominator, cross_term

FIELD_KINDS = ("velocity_model", "noise_model", "data_model", "oracle")

FRAMES = ("original", "sn_interp", "sn_scale", "sc")

# Clipping defaults that keep sampling stable in the regimes where each model
# type is typically driven.
DEFAULT_EPS_NOISE = 1e-3
DEFAULT_EPS_VELOCITY = 1e-6

KNOWN_FIELDS = ("v", "x0_given_t", "x1_given_t")


@dataclass(frozen=True)
class FlowState:
    """A sample x at time t, tagged with the variable space it lives in."""

    x: np.ndarray
    t: float
    frame: str = "original"

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("time t must lie in [0, 1]")
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))


@dataclass(frozen=True)
class VelocityTriple:
    v: np.ndarray
    x0_given_t: np.ndarray
    x1_given_t: np.ndarray


def target_velocity(sv: ScheduleValues, x0, x1) -> np.ndarray:
    """Per-coupling velocity a_dot*x0 + sigma_dot*x1 of the joined trajectory."""
    return sv.a_dot * np.asarray(x0, float) + sv.sigma_dot * np.asarray(x1, float)


def x0_given_x1(sv: ScheduleValues, x, x1_est, eps: float) -> np.ndarray:
    """Data estimate implied by x and a noise estimate: (x - sigma*x1)/a."""
    x = np.asarray(x, float)
    x1_est = np.asarray(x1_est, float)
    return (x - sv.sigma * x1_est) / clip_denominator(sv.a, eps)


def complete_state(
    sv: ScheduleValues, x, known: str, value, eps: float
) -> VelocityTriple:
    """Fill in the two missing representations from the known one.

    `known` names the given representation ("v", "x0_given_t" or
    "x1_given_t") and `value` carries it.  The remaining two follow from the
    velocity decompositions and the linear relation x = a*x0 + sigma*x1.
    """
    if known not in KNOWN_FIELDS:
        raise ValueError(f"known must be one of {KNOWN_FIELDS}")
    x = np.asarray(x, float)
    value = np.asarray(value, float)
    cross = cross_term(sv)
    if known == "v":
        v = value
        x1 = (sv.a * v - sv.a_dot * x) / clip_denominator(cross, eps)
        x0 = (x - sv.sigma * x1) / clip_denominator(sv.a, eps)
    elif known == "x1_given_t":
        x1 = value
        x0 = (x - sv.sigma * x1) / clip_denominator(sv.a, eps)
        v = (sv.a_dot * x + cross * x1) / clip_denominator(sv.a, eps)
    else:
        x0 = value
        x1 = (x - sv.a * x0) / clip_denominator(sv.sigma, eps)
        v = (sv.sigma_dot * x - cross * x0) / clip_denominator(sv.sigma, eps)
    return VelocityTriple(v=v, x0_given_t=x0, x1_given_t=x1)
