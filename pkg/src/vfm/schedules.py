"""Coefficient schedules of linear interpolation processes x_t = a_t*x0 + sigma_t*x1.

Every supported process is identified by a `Schedule` (variant name plus
parameters).  `eval_schedule` returns the closed-form coefficients and their
time derivatives; everything downstream (velocity conversions, frame
transformations, solvers) consumes only these four numbers per time point.

The scaled time `phi` comes in two forms:

* interp: phi = sigma / (a + sigma), the clock of the frame where
  x~_t = x_t / (a_t + sigma_t) interpolates the two endpoints, and
* scale:  phi = sigma / a, the clock of the frame x~_t = x_t / a_t.

Both are computed with clipped denominators so they stay finite at the
endpoints where `a` or `a + sigma` may vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

ArrayLike = Union[float, np.ndarray]

VARIANTS = ("vp", "sub_vp", "ve", "rectified", "third_degree", "fifth_degree")

# CLI / config spelling -> internal variant name.
SCHEDULE_NAMES = {
    "vp": "vp",
    "sub-vp": "sub_vp",
    "sub_vp": "sub_vp",
    "ve": "ve",
    "rectified": "rectified",
    "third-degree": "third_degree",
    "third_degree": "third_degree",
    "fifth-degree": "fifth_degree",
    "fifth_degree": "fifth_degree",
}

_DEFAULT_PARAMS = {
    "vp": {"beta_min": 0.1, "beta_max": 20.0},
    "sub_vp": {"beta_min": 0.1, "beta_max": 20.0},
    "ve": {"sigma_min": 0.01, "sigma_max": 50.0},
    "rectified": {},
    "third_degree": {"alt_sigma": False},
    "fifth_degree": {},
}


class ScheduleError(ValueError):
    """Bad schedule variant, parameters, or time argument."""


@dataclass(frozen=True)
class Schedule:
    """A named linear process: which coefficient family and its parameters."""

    variant: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ScheduleError(f"unknown schedule variant {self.variant!r}")
        merged = dict(_DEFAULT_PARAMS[self.variant])
        for key, val in self.params.items():
            if key not in merged:
                raise ScheduleError(
                    f"schedule {self.variant!r} does not take parameter {key!r}"
                )
            merged[key] = val
        object.__setattr__(self, "params", merged)
        if self.variant in ("vp", "sub_vp"):
            bmin, bmax = merged["beta_min"], merged["beta_max"]
            if not (bmax > bmin > 0):
                raise ScheduleError("vp/sub_vp require beta_max > beta_min > 0")
        elif self.variant == "ve":
            smin, smax = merged["sigma_min"], merged["sigma_max"]
            if not (smax > smin > 0):
                raise ScheduleError("ve requires sigma_max > sigma_min > 0")


def make_schedule(name: str, **params) -> Schedule:
    """Build a Schedule from its CLI/config spelling, e.g. "third-degree"."""
    if name not in SCHEDULE_NAMES:
        raise ScheduleError(f"unknown schedule name {name!r}")
    return Schedule(SCHEDULE_NAMES[name], params)


@dataclass(frozen=True)
class ScheduleValues:
    """Coefficients (a, sigma) and their derivatives at time t."""

    t: ArrayLike
    a: ArrayLike
    sigma: ArrayLike
    a_dot: ArrayLike
    sigma_dot: ArrayLike


@dataclass(frozen=True)
class PhiPair:
    """Scaled time phi and its derivative, for one of the two frame forms."""

    phi: ArrayLike
    phi_dot: ArrayLike
    form: str  # "interp" or "scale"


def clip_denominator(x: ArrayLike, eps: float) -> ArrayLike:
    """sign(x) * max(|x|, eps), with sign(0) taken as +1."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    sign = np.where(x >= 0.0, 1.0, -1.0)
    out = sign * np.maximum(np.abs(x), eps)
    return float(out) if out.ndim == 0 else out


def _check_time(t: ArrayLike) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ScheduleError("time t must lie in [0, 1]")
    return arr


def _beta(t, bmin, bmax):
    return t * (bmax - bmin) + bmin


def _alpha_bar(t, bmin, bmax):
    # alpha_bar = exp(-integral of beta) with the integral done in closed form.
    return np.exp(-0.5 * t * (_beta(t, bmin, bmax) + bmin))


def eval_schedule(schedule: Schedule, t: ArrayLike) -> ScheduleValues:
    """Closed-form (a, sigma, a_dot, sigma_dot) of the process at time t.

    t may be a scalar or an array; outputs broadcast accordingly.  Derivatives
    are closed forms, never finite differences.  For vp the derivative of
    sigma diverges at t=0 (sigma has a sqrt(t) profile there); the returned
    value is +inf in that case.
    """
    arr = _check_time(t)
    scalar = np.ndim(t) == 0
    p = schedule.params
    if schedule.variant == "vp":
        bmin, bmax = p["beta_min"], p["beta_max"]
        beta = _beta(arr, bmin, bmax)
        ab = _alpha_bar(arr, bmin, bmax)
        a = np.sqrt(ab)
        sigma = np.sqrt(1.0 - ab)
        a_dot = -0.5 * beta * a
        with np.errstate(divide="ignore"):
            sigma_dot = np.where(sigma > 0.0, beta * ab / (2.0 * sigma), np.inf)
    elif schedule.variant == "sub_vp":
        bmin, bmax = p["beta_min"], p["beta_max"]
        beta = _beta(arr, bmin, bmax)
        ab = _alpha_bar(arr, bmin, bmax)
        a = np.sqrt(ab)
        sigma = 1.0 - ab
        a_dot = -0.5 * beta * a
        sigma_dot = ab * beta
    elif schedule.variant == "ve":
        smin, smax = p["sigma_min"], p["sigma_max"]
        lograte = np.log(smax / smin)
        a = np.ones_like(arr)
        a_dot = np.zeros_like(arr)
        sigma = smin * np.exp(arr * lograte)
        sigma_dot = sigma * lograte
    elif schedule.variant == "rectified":
        a = 1.0 - arr
        sigma = arr.copy()
        a_dot = np.full_like(arr, -1.0)
        sigma_dot = np.ones_like(arr)
    elif schedule.variant == "third_degree":
        u = 1.0 - arr
        a = 3.0 * u**3 - 6.0 * u**2 + 4.0 * u
        a_dot = -(9.0 * u**2 - 12.0 * u + 4.0)
        if p["alt_sigma"]:
            # Original cubic whose value at t=0 is 2, kept for comparison runs.
            sigma = 2.0 * arr**3 - 3.0 * arr + 2.0
            sigma_dot = 6.0 * arr**2 - 3.0
        else:
            sigma = 2.0 * arr**3 - 3.0 * arr**2 + 2.0 * arr
            sigma_dot = 6.0 * arr**2 - 6.0 * arr + 2.0
    elif schedule.variant == "fifth_degree":
        u = 1.0 - arr
        a = u**5
        a_dot = -5.0 * u**4
        sigma = arr**5
        sigma_dot = 5.0 * arr**4
    else:  # pragma: no cover - guarded by Schedule.__post_init__
        raise ScheduleError(schedule.variant)

    if scalar:
        return ScheduleValues(
            float(arr), float(a), float(sigma), float(a_dot), float(sigma_dot)
        )
    return ScheduleValues(arr, a, sigma, a_dot, sigma_dot)


def cross_term(sv: ScheduleValues) -> ArrayLike:
    """a*sigma_dot - a_dot*sigma, the common denominator of the SC velocities."""
    return sv.a * sv.sigma_dot - sv.a_dot * sv.sigma


PHI_FORMS = ("interp", "scale")


def phi(schedule: Schedule, t: ArrayLike, form: str, eps: float) -> PhiPair:
    """Scaled time of the straightened frame and its time derivative.

    interp: phi = sigma/(a+sigma),  phi_dot = (a*sigma_dot - a_dot*sigma)/(a+sigma)^2
    scale:  phi = sigma/a,          phi_dot = (a*sigma_dot - a_dot*sigma)/a^2

    Denominators are clipped, so the result is finite for every t in [0, 1].
    """
    if form not in PHI_FORMS:
        raise ValueError(f"unknown phi form {form!r}")
    sv = eval_schedule(schedule, t)
    return phi_from_values(sv, form, eps)


def phi_from_values(sv: ScheduleValues, form: str, eps: float) -> PhiPair:
    """Same as `phi` but starting from already evaluated ScheduleValues."""
    if form not in PHI_FORMS:
        raise ValueError(f"unknown phi form {form!r}")
    den = sv.a + sv.sigma if form == "interp" else sv.a
    value = sv.sigma / clip_denominator(den, eps)
    slope = cross_term(sv) / clip_denominator(den * den, eps)
    return PhiPair(value, slope, form)


@dataclass(frozen=True)
class ScheduleConditionReport:
    """Boundary behaviour of a schedule against a_0=1, sigma_0=0, a_1~0."""

    variant: str
    a0: float
    sigma0: float
    a1: float
    sigma1: float
    a0_exact: bool
    sigma0_exact: bool
    a1_approx_zero: bool
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations


def check_schedule_conditions(
    schedule: Schedule, zero_tol: float = 1e-2
) -> ScheduleConditionReport:
    """Evaluate the boundary conditions of the process coefficients.

    a_0 = 1 and sigma_0 = 0 are required exactly; a_1 only needs to be
    approximately zero (vp-style schedules end at a small positive a_1).
    """
    sv0 = eval_schedule(schedule, 0.0)
    sv1 = eval_schedule(schedule, 1.0)
    violations = []
    a0_exact = sv0.a == 1.0
    sigma0_exact = sv0.sigma == 0.0
    a1_small = abs(sv1.a) <= zero_tol
    if not a0_exact:
        violations.append(f"a(0) = {sv0.a!r}, expected exactly 1")
    if not sigma0_exact:
        violations.append(f"sigma(0) = {sv0.sigma!r}, expected exactly 0")
    return ScheduleConditionReport(
        variant=schedule.variant,
        a0=sv0.a,
        sigma0=sv0.sigma,
        a1=sv1.a,
        sigma1=sv1.sigma,
        a0_exact=a0_exact,
        sigma0_exact=sigma0_exact,
        a1_approx_zero=a1_small,
        violations=tuple(violations),
    )
