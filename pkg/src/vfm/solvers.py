"""Integrators on posterior, straight, and straight constant-speed flows.

Every method follows the same pattern: keep the state in the transformed
frame, evaluate the base model in the original frame (recovering the sample
first), and advance with an increment of the integration clock.  The clock is
the scaled time phi for time-adjusted constant-speed kinds and plain t for
everything else; interpolation weights of the multistep methods are always
computed in t-space, where the grid is uniform.

Because the clock is a nonlinear function of t on time-adjusted flows, the
higher-order methods do all of their bookkeeping in clock units: Runge-Kutta
stages sit at clock fractions c_j of the step (their t values recovered by
inverting the monotone clock), and multistep interpolation runs through the
(clock, velocity) history points.  On every other kind the clock equals t and
this reduces to the familiar formulas.  Skipping this and reusing the t-space
stage times and weights on a time-adjusted flow caps every method at second
order once the clock has curvature.

Multistep methods cache velocities from earlier steps so each update costs a
single model evaluation.  The predictor-corrector variants reuse the velocity
evaluated at the predicted point of one step as the "current" velocity of the
next step, which keeps them at one evaluation per update as well (plus one
evaluation at the very first point).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from vfm.schedules import clip_denominator, eval_schedule, phi_from_values
from vfm.transforms import (
    TransformedField,
    frame_of,
    from_transformed,
    is_shift,
    is_time_adjust,
    scaling_form,
    to_transformed,
    transformed_velocity,
)
from vfm.velocity import FlowState

METHODS = (
    "euler",
    "midpoint",
    "heun",
    "rk3",
    "rk4",
    "ab2",
    "ab3",
    "ab1am2",
    "ab2am2",
    "ab2am3",
    "ab3am3",
)

WARM_UPS = ("increasing_order_ab", "heun", "rk3")

_PC_ORDERS = {"ab1am2": (1, 2), "ab2am2": (2, 2), "ab2am3": (2, 3), "ab3am3": (3, 3)}


@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing sampling times, t[0] = start down to t[-1] = end."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("grid needs at least two points")
        if np.any(np.diff(pts) >= 0):
            raise ValueError("grid points must be strictly decreasing")
        if pts.max() > 1.0 or pts.min() < 0.0:
            raise ValueError("grid points must lie in [0, 1]")
        object.__setattr__(self, "points", pts)

    @property
    def n_steps(self) -> int:
        return self.points.size - 1


def time_grid(n_steps: int, t_start: float = 1.0, t_end: float = 0.0) -> TimeGrid:
    """n_steps + 1 uniformly spaced times from t_start down to t_end."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return TimeGrid(np.linspace(t_start, t_end, n_steps + 1))


@dataclass(frozen=True)
class SolverMethod:
    """Method name plus multistep warm-up policy and velocity-reuse flag."""

    name: str
    warm_up: str = "increasing_order_ab"
    reuse_predicted_velocity: bool = True

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown solver method {self.name!r}")
        if self.warm_up not in WARM_UPS:
            raise ValueError(f"unknown warm-up {self.warm_up!r}")


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, float)
        a = np.asarray(self.a, float)
        b = np.asarray(self.b, float)
        k = c.size
        if a.shape != (k, k) or b.shape != (k,):
            raise ValueError("inconsistent tableau shapes")
        if abs(b.sum() - 1.0) > 1e-12:
            raise ValueError("tableau weights must sum to 1")
        if np.any(np.abs(a.sum(axis=1) - c) > 1e-12):
            raise ValueError("tableau rows must sum to their c values")
        if np.any(np.triu(a) != 0.0):
            raise ValueError("tableau must be explicit (strictly lower triangular)")
        if c.size > 1 and np.any(c[1:] <= 0.0):
            raise ValueError("stage times c_2..c_k must be positive")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def stages(self) -> int:
        return self.c.size


TABLEAUX = {
    "euler": ButcherTableau("euler", [0.0], [[0.0]], [1.0]),
    "midpoint": ButcherTableau(
        "midpoint", [0.0, 0.5], [[0.0, 0.0], [0.5, 0.0]], [0.0, 1.0]
    ),
    "heun": ButcherTableau("heun", [0.0, 1.0], [[0.0, 0.0], [1.0, 0.0]], [0.5, 0.5]),
    "rk3": ButcherTableau(
        "rk3",
        [0.0, 0.5, 1.0],
        [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [-1.0, 2.0, 0.0]],
        [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    ),
    "rk4": ButcherTableau(
        "rk4",
        [0.0, 0.5, 0.5, 1.0],
        [
            [0.0, 0.0, 0.0, 0.0],
            [0.5, 0.0, 0.0, 0.0],
            [0.0, 0.5, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ],
        [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    ),
}


@dataclass
class MultistepCache:
    """Recent (clock, velocity) pairs, newest first, plus the last prediction.

    Clock values decrease along the sampling direction, mirroring the times.
    """

    capacity: int = 3
    times: list = dc_field(default_factory=list)
    velocities: list = dc_field(default_factory=list)
    last_predicted: Optional[np.ndarray] = None

    def push(self, t: float, v: np.ndarray) -> None:
        if self.times and t >= self.times[0]:
            raise ValueError("cached times must be strictly decreasing")
        self.times.insert(0, t)
        self.velocities.insert(0, v)
        del self.times[self.capacity :]
        del self.velocities[self.capacity :]

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class Trajectory:
    """One integrated path: states in the original frame plus step diagnostics.

    Diagnostics are per grid point; entry 0 describes the initial state (no
    step has been taken, so its velocity norm and clock increment are zero).
    """

    ts: np.ndarray
    xs: np.ndarray
    max_abs_x: np.ndarray
    max_abs_xbar: np.ndarray
    max_abs_v: np.ndarray
    delta_phi: np.ndarray
    nfe_so_far: np.ndarray
    nfe: int

    def records(self):
        out = []
        for i in range(self.ts.size):
            out.append(
                (
                    float(self.ts[i]),
                    self.xs[i],
                    {
                        "max_abs_x": float(self.max_abs_x[i]),
                        "max_abs_xbar": float(self.max_abs_xbar[i]),
                        "max_abs_v": float(self.max_abs_v[i]),
                        "delta_phi": float(self.delta_phi[i]),
                        "nfe_so_far": int(self.nfe_so_far[i]),
                    },
                )
            )
        return out

    @property
    def final_x(self) -> np.ndarray:
        return self.xs[-1]


def integration_clock(field: TransformedField, t: float) -> float:
    """The variable whose increments drive the update: phi or plain t."""
    if is_time_adjust(field.kind):
        sv = eval_schedule(field.schedule, t)
        return float(
            phi_from_values(sv, scaling_form(field.kind), field.eps).phi
        )
    return float(t)


def ab_coefficients(t_next, t_cur, t_prev, t_prev2=None) -> np.ndarray:
    """Extrapolation weights integrating the Lagrange polynomial through the
    cached velocities over [t_cur, t_next], normalized by the step length.

    Two history points give the order-2 weights, three give order-3.  Works
    for any strictly monotone times; on an even grid the weights reduce to
    (3/2, -1/2) and (23/12, -16/12, 5/12).
    """
    ts = [t_next, t_cur, t_prev] + ([] if t_prev2 is None else [t_prev2])
    if len(set(ts)) != len(ts):
        raise ValueError("times must be distinct")
    if t_prev2 is None:
        den = 2.0 * (t_cur - t_prev)
        l0 = (t_next + t_cur - 2.0 * t_prev) / den
        l1 = -(t_next - t_cur) / den
        return np.array([l0, l1])
    sq = t_next * t_next + t_next * t_cur + t_cur * t_cur
    l0 = (
        2.0 * sq
        - 3.0 * (t_prev + t_prev2) * (t_next + t_cur)
        + 6.0 * t_prev * t_prev2
    ) / (6.0 * (t_cur - t_prev) * (t_cur - t_prev2))
    l1 = ((t_next - t_cur) * (2.0 * t_next + t_cur - 3.0 * t_prev2)) / (
        6.0 * (t_prev - t_cur) * (t_prev - t_prev2)
    )
    l2 = ((t_next - t_cur) * (2.0 * t_next + t_cur - 3.0 * t_prev)) / (
        6.0 * (t_prev2 - t_cur) * (t_prev2 - t_prev)
    )
    return np.array([l0, l1, l2])


def am_coefficients(t_next, t_cur, t_prev=None) -> np.ndarray:
    """Interpolation weights of the implicit update over [t_cur, t_next].

    Without t_prev this is the trapezoidal rule (1/2, 1/2) for any spacing;
    with it, the order-3 weights attached to the velocities at t_next, t_cur,
    and t_prev.
    """
    if t_next == t_cur or (t_prev is not None and t_prev in (t_next, t_cur)):
        raise ValueError("times must be distinct")
    if t_prev is None:
        return np.array([0.5, 0.5])
    l0 = (2.0 * t_next + t_cur - 3.0 * t_prev) / (6.0 * (t_next - t_prev))
    l1 = (t_next + 2.0 * t_cur - 3.0 * t_prev) / (6.0 * (t_cur - t_prev))
    l2 = -((t_next - t_cur) ** 2) / (
        6.0 * (t_next - t_prev) * (t_cur - t_prev)
    )
    return np.array([l0, l1, l2])


class _Stepper:
    """Batched integration state shared by the public step ops and `run`."""

    def __init__(self, field: TransformedField, xbar: np.ndarray):
        self.field = field
        self.xbar = np.asarray(xbar, dtype=float)
        self.direction = None  # latest velocity, used by shift-kind recovery
        self.nfe = 0
        self._nonlinear_clock = is_time_adjust(field.kind)

    def clock(self, t: float) -> float:
        return integration_clock(self.field, t)

    def invert_clock(self, target: float, t_lo: float, t_hi: float) -> float:
        """Time at which the (monotone) clock reaches `target` in [t_lo, t_hi]."""
        lo, hi = t_lo, t_hi
        for _ in range(70):
            mid = 0.5 * (lo + hi)
            if self.clock(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def recover(self, xbar: np.ndarray, t: float) -> np.ndarray:
        sv = eval_schedule(self.field.schedule, t)
        state = FlowState(xbar, t, frame_of(self.field.kind))
        return from_transformed(
            state, self.field.kind, sv, self.field.eps, self.direction
        ).x

    def velocity(self, xbar: np.ndarray, t: float) -> np.ndarray:
        x = self.recover(xbar, t)
        self.nfe += 1
        return transformed_velocity(self.field, x, t)

    def rebase_shift(self, t: float, v_new: np.ndarray) -> None:
        """Re-anchor a shifted sample on the freshly evaluated direction.

        The shifted frame is defined relative to a direction estimate; each
        step replaces the previous step's estimate by the current one before
        updating, which is what makes shifting and time adjustment walk the
        same path under Euler updates."""
        if self.direction is None:
            self.direction = v_new
            return
        sv = eval_schedule(self.field.schedule, t)
        form = scaling_form(self.field.kind)
        den = sv.a + sv.sigma if form == "interp" else sv.a
        offset = t - sv.sigma / clip_denominator(den, self.field.eps)
        self.xbar = self.xbar + offset * (v_new - self.direction)
        self.direction = v_new

    def rk_step(self, t: float, t_next: float, tableau: ButcherTableau):
        """Advance with an explicit RK scheme; returns the averaged velocity
        and the first-stage velocity (useful to seed multistep caches).

        Stage j sits at clock fraction c_j of the step; its evaluation time is
        the clock preimage of that point (plain t arithmetic when the clock is
        t itself, and exactly t_next when c_j = 1)."""
        clock0 = self.clock(t)
        dclock = self.clock(t_next) - clock0
        dt = t_next - t
        fs = []
        for j in range(tableau.stages):
            if j == 0:
                stage_x = self.xbar
                tau = t
            else:
                cj = tableau.c[j]
                if cj == 1.0:
                    tau = t_next
                elif self._nonlinear_clock:
                    tau = self.invert_clock(clock0 + cj * dclock, t_next, t)
                else:
                    tau = t + cj * dt
                combo = sum(
                    (tableau.a[j, m] / cj) * fs[m] for m in range(j)
                )
                stage_x = self.xbar + cj * dclock * combo
            fs.append(self.velocity(stage_x, tau))
        avg = sum(b * f for b, f in zip(tableau.b, fs))
        self.xbar = self.xbar + dclock * avg
        return avg, fs[0]

    def euler_step(self, t: float, t_next: float, vbar: np.ndarray):
        self.xbar = self.xbar + (self.clock(t_next) - self.clock(t)) * vbar
        if is_shift(self.field.kind):
            self.direction = vbar
        return vbar


def _cache_push(cache: MultistepCache, clk: float, v: np.ndarray) -> None:
    """Push honoring the strictly-decreasing invariant: when the clock made no
    progress (flat stretches near schedule endpoints) keep the fresher
    velocity instead of inserting a duplicate node."""
    if cache.times and clk >= cache.times[0]:
        cache.velocities[0] = v
        return
    cache.push(clk, v)


def _ab_average(cache: MultistepCache, clk_next: float, k: int) -> np.ndarray:
    k = min(k, len(cache))
    if k <= 1 or clk_next == cache.times[0]:
        return cache.velocities[0]
    coeffs = ab_coefficients(clk_next, *cache.times[:k])
    return sum(c * v for c, v in zip(coeffs, cache.velocities[:k]))


def euler_step(
    field: TransformedField, xbar, t_i: float, t_next: float, direction=None
) -> np.ndarray:
    """One Euler update of the transformed state from t_i to t_next < t_i.

    The increment is the clock difference (phi for time-adjusted kinds, t
    otherwise) times the transformed velocity at (xbar, t_i).  For shift
    kinds `direction` is the estimate that produced xbar.
    """
    if t_next >= t_i:
        raise ValueError("t_next must be smaller than t_i")
    stepper = _Stepper(field, xbar)
    stepper.direction = direction
    v = stepper.velocity(stepper.xbar, t_i)
    if is_shift(field.kind):
        stepper.rebase_shift(t_i, v)
    stepper.euler_step(t_i, t_next, v)
    return stepper.xbar


def rk_step(
    field: TransformedField, xbar, t_i: float, t_next: float, tableau: ButcherTableau
) -> np.ndarray:
    """One explicit Runge-Kutta update of the transformed state.

    Each stage recovers the original-frame sample before querying the base
    model; stage offsets use the clock increment up to the stage time.
    """
    if t_next >= t_i:
        raise ValueError("t_next must be smaller than t_i")
    if is_shift(field.kind):
        raise ValueError("shift kinds support Euler updates only")
    stepper = _Stepper(field, xbar)
    stepper.rk_step(t_i, t_next, tableau)
    return stepper.xbar


def run(
    field: TransformedField,
    grid: TimeGrid,
    method: SolverMethod,
    x_init_batch,
    seed: int = 0,
) -> list:
    """Integrate a batch of initial points along the transformed flow.

    Each initial point is mapped into the transformed frame once, advanced
    over the grid with the requested method, and recovered to the original
    frame at every grid point.  Integration is deterministic; `seed` is
    accepted for interface symmetry with the samplers but never used.
    """
    del seed
    x_init = np.asarray(x_init_batch, dtype=float)
    if x_init.ndim != 2:
        raise ValueError("x_init_batch must be (n, d)")
    pts = grid.points
    n_steps = grid.n_steps
    shift = is_shift(field.kind)
    if shift and method.name != "euler":
        raise ValueError("shift kinds support Euler updates only")

    stepper = _Stepper(field, x_init)  # xbar replaced right below
    t0 = pts[0]
    sv0 = eval_schedule(field.schedule, t0)
    pending_v = None
    if shift:
        pending_v = transformed_velocity(field, x_init, t0)
        stepper.nfe += 1
        stepper.direction = pending_v
        stepper.xbar = to_transformed(
            FlowState(x_init, t0), field.kind, sv0, field.eps, pending_v
        ).x
    else:
        stepper.xbar = to_transformed(
            FlowState(x_init, t0), field.kind, sv0, field.eps
        ).x

    n = x_init.shape[0]
    rec_x = [x_init.copy()]
    rec_xbar = [stepper.xbar.copy()]
    rec_v = [np.zeros(n)]
    rec_dphi = [0.0]
    rec_nfe = [stepper.nfe]

    def record(t_next, avg_v, dphi):
        rec_x.append(stepper.recover(stepper.xbar, t_next))
        rec_xbar.append(stepper.xbar.copy())
        rec_v.append(np.max(np.abs(avg_v), axis=-1))
        rec_dphi.append(dphi)
        rec_nfe.append(stepper.nfe)

    name = method.name
    if name in TABLEAUX:
        tableau = TABLEAUX[name]
        for i in range(n_steps):
            t, tn = pts[i], pts[i + 1]
            dphi = stepper.clock(tn) - stepper.clock(t)
            if shift:
                if pending_v is not None:
                    v, pending_v = pending_v, None
                else:
                    v = stepper.velocity(stepper.xbar, t)
                    stepper.rebase_shift(t, v)
                stepper.euler_step(t, tn, v)
                avg = v
            else:
                avg, _ = stepper.rk_step(t, tn, tableau)
            record(tn, avg, dphi)
    elif name in ("ab2", "ab3"):
        order = 2 if name == "ab2" else 3
        cache = MultistepCache(capacity=order)
        rk_warm = None if method.warm_up == "increasing_order_ab" else TABLEAUX[
            method.warm_up
        ]
        for i in range(n_steps):
            t, tn = pts[i], pts[i + 1]
            clk, clk_n = stepper.clock(t), stepper.clock(tn)
            dphi = clk_n - clk
            if rk_warm is not None and i < order - 1:
                avg, f1 = stepper.rk_step(t, tn, rk_warm)
                _cache_push(cache, clk, f1)
            else:
                v = stepper.velocity(stepper.xbar, t)
                _cache_push(cache, clk, v)
                k = min(order, len(cache))
                avg = _ab_average(cache, clk_n, k)
                stepper.xbar = stepper.xbar + dphi * avg
            record(tn, avg, dphi)
    else:
        p_order, c_order = _PC_ORDERS[name]
        reuse = method.reuse_predicted_velocity
        cache = MultistepCache(capacity=3)
        if reuse:
            _cache_push(
                cache, stepper.clock(pts[0]), stepper.velocity(stepper.xbar, pts[0])
            )
        for i in range(n_steps):
            t, tn = pts[i], pts[i + 1]
            clk, clk_n = stepper.clock(t), stepper.clock(tn)
            dphi = clk_n - clk
            if not reuse:
                _cache_push(cache, clk, stepper.velocity(stepper.xbar, t))
            kp = min(p_order, len(cache))
            xbar_pred = stepper.xbar + dphi * _ab_average(cache, clk_n, kp)
            v_pred = stepper.velocity(xbar_pred, tn)
            cache.last_predicted = v_pred
            if clk_n == cache.times[0]:
                avg = v_pred  # no clock progress; the increment vanishes
            else:
                kc = min(c_order, len(cache) + 1)
                if kc > 2 and cache.times[1] == clk_n:
                    kc = 2  # degenerate spacing; drop to the trapezoidal rule
                if kc == 2:
                    coeffs_c = am_coefficients(clk_n, cache.times[0])
                else:
                    coeffs_c = am_coefficients(
                        clk_n, cache.times[0], cache.times[1]
                    )
                avg = coeffs_c[0] * v_pred + sum(
                    c * vj
                    for c, vj in zip(coeffs_c[1:], cache.velocities[: kc - 1])
                )
            stepper.xbar = stepper.xbar + dphi * avg
            if reuse:
                _cache_push(cache, clk_n, v_pred)
            record(tn, avg, dphi)

    xs = np.stack(rec_x)  # (N+1, n, d)
    xbars = np.stack(rec_xbar)
    vmax = np.stack(rec_v)  # (N+1, n)
    dphis = np.asarray(rec_dphi)
    nfes = np.asarray(rec_nfe, dtype=int)
    out = []
    for j in range(n):
        out.append(
            Trajectory(
                ts=pts.copy(),
                xs=xs[:, j],
                max_abs_x=np.max(np.abs(xs[:, j]), axis=-1),
                max_abs_xbar=np.max(np.abs(xbars[:, j]), axis=-1),
                max_abs_v=vmax[:, j],
                delta_phi=dphis.copy(),
                nfe_so_far=nfes.copy(),
                nfe=int(nfes[-1]),
            )
        )
    return out
