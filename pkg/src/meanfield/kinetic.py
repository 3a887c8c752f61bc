"""Kinetic (law of large numbers) equations on the simplex.

The workhorse is a Dormand-Prince 5(4) integrator with step rejection on
loss of positivity. It accepts batched states, so one call can carry a whole
lattice of initial points with a common step size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (NumericalError, PayoffFamily, RateFamily, Trajectory, ValidationError,
                   as_simplex, pressure_resistance_rates)

# Dormand-Prince coefficients
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class SolveResult:
    t: np.ndarray
    y: np.ndarray
    stats: dict = field(default_factory=dict)


def solve_ode(rhs: Callable, t0: float, y0, t1: float, tol: float = 1e-9,
              t_eval=None, positive: bool = False, project: Optional[Callable] = None,
              h0: Optional[float] = None, max_steps: int = 1_000_000,
              record_steps: bool = True, max_step: float = np.inf) -> SolveResult:
    """Integrate y' = rhs(t, y) from t0 to t1 with absolute/relative tolerance ``tol``.

    With ``positive`` a step is rejected (and halved) when a component drops
    below -tol or when a positive component becomes nonpositive. ``project``
    is applied to each accepted state. Samples are taken at every accepted
    step (``record_steps``) and at every time in ``t_eval``.
    """
    y = np.array(y0, dtype=float)
    t = float(t0)
    span = float(t1) - t
    if span < 0:
        raise ValidationError("only forward integration is supported")
    marks = np.array(sorted(set(np.atleast_1d(t_eval).tolist())) if t_eval is not None else [], dtype=float)
    marks = marks[(marks > t) & (marks <= t1)]
    ts, ys = [t], [y.copy()]
    if span == 0:
        return SolveResult(np.array(ts), np.array(ys), {"steps": 0, "rejected": 0})
    k1 = np.asarray(rhs(t, y), dtype=float)
    if h0 is None:
        scale = tol + tol * np.abs(y)
        d0 = np.sqrt(np.mean((y / scale) ** 2)) if y.size else 0.0
        d1 = np.sqrt(np.mean((k1 / scale) ** 2)) if y.size else 0.0
        h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
        h = min(max(h, 1e-8), span)
    else:
        h = min(h0, span)
    steps = rejected = 0
    hmin = 1e-14 * max(1.0, abs(t1))
    mi = 0
    while t < t1:
        if steps + rejected > max_steps:
            raise NumericalError(f"step budget exhausted at t={t}", state=y)
        target = t1 if mi >= len(marks) else marks[mi]
        h = min(h, t1 - t, max_step)
        land = False
        if t + h >= target - 1e-14 * max(1.0, abs(target)):
            h = target - t
            land = True
        ks = [k1]
        for s in range(1, 7):
            ys_ = y + h * sum(a * k for a, k in zip(_A[s], ks))
            ks.append(np.asarray(rhs(t + _C[s] * h, ys_), dtype=float))
        y_new = y + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err_vec = h * sum(e * k for e, k in zip(_E, ks))
        scale = tol + tol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.abs(err_vec) / scale)) if y.size else 0.0
        ok = np.isfinite(err) and err <= 1.0
        if ok and positive:
            if y_new.min() < -tol or np.any((y > 0) & (y_new <= 0)):
                ok = False
                err = max(err, 1.0)
                h_next = 0.5 * h
        if ok:
            t = target if land else t + h
            y = project(y_new) if project is not None else y_new
            k1 = np.asarray(rhs(t, y), dtype=float) if project is not None else ks[6]
            steps += 1
            if land and mi < len(marks) and target == marks[mi]:
                mi += 1
                ts.append(t)
                ys.append(y.copy())
            elif record_steps or t >= t1:
                ts.append(t)
                ys.append(y.copy())
            fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
            h = h * fac
        else:
            rejected += 1
            if positive and np.isfinite(err) and err <= 1.0:
                h = h_next
            else:
                fac = 0.2 if not np.isfinite(err) else max(0.1, 0.9 * err ** -0.25)
                h = h * min(fac, 0.5)
            if h < hmin:
                raise NumericalError(
                    f"step size underflow at t={t}; the right-hand side may be stiff or "
                    f"discontinuous (use integrate_filippov for piecewise rates)", state=y)
    # drop duplicate final sample if t_eval already recorded it
    T = np.array(ts)
    Y = np.array(ys)
    if len(T) > 1 and T[-1] == T[-2]:
        T, Y = T[:-1], Y[:-1]
    return SolveResult(T, Y, {"steps": steps, "rejected": rejected})


def simplex_project(y: np.ndarray) -> np.ndarray:
    """Clamp roundoff negatives and renormalize every simplex row of ``y``."""
    y = np.where(y < 0, 0.0, y)
    s = y.sum(axis=-1, keepdims=True)
    if np.any(np.abs(s - 1.0) > 1e-12):
        y = y / s
    return y


def kinetic_rhs(family: RateFamily, b_policy: Optional[Callable] = None) -> Callable:
    def rhs(t, x):
        b = None if b_policy is None else b_policy(t, x)
        return family.drift(t, x, b)

    return rhs


def integrate_kinetic(family: RateFamily, x0, b_policy: Optional[Callable] = None,
                      horizon: float = 1.0, tol: float = 1e-9, t_eval=None,
                      record_steps: bool = True) -> Trajectory:
    """Solve x' = x Q(t, x, b_policy(t, x)) forward in time on the simplex.

    ``x0`` may be a single point or a batch of points of shape (B, d).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = as_simplex(x0)
    else:
        x0 = np.array([as_simplex(row) for row in x0])
    res = solve_ode(kinetic_rhs(family, b_policy), 0.0, x0, horizon, tol, t_eval=t_eval,
                    positive=True, project=simplex_project, record_steps=record_steps)
    return Trajectory(res.t, res.y, {"integrator": "dopri5", "tol": tol, **res.stats})


def replicator_rhs(R: PayoffFamily, kappa: float, b_policy: Optional[Callable] = None) -> Callable:
    def rhs(t, x):
        b = None if b_policy is None else b_policy(t, x)
        r = R(x, b)
        mass = x.sum(axis=-1, keepdims=True)
        mean = (x * r).sum(axis=-1, keepdims=True)
        return kappa * x * (r * mass - mean)

    return rhs


def integrate_replicator(R: PayoffFamily, kappa: float, x0, b_policy: Optional[Callable] = None,
                         horizon: float = 1.0, tol: float = 1e-9, t_eval=None) -> Trajectory:
    """Solve x_j' = sum_i kappa x_i x_j (R_j - R_i)."""
    x0 = np.asarray(x0, dtype=float)
    x0 = as_simplex(x0) if x0.ndim == 1 else np.array([as_simplex(r) for r in x0])
    res = solve_ode(replicator_rhs(R, kappa, b_policy), 0.0, x0, horizon, tol, t_eval=t_eval,
                    positive=True, project=simplex_project)
    return Trajectory(res.t, res.y, {"integrator": "dopri5", "tol": tol, "form": "replicator",
                                     **res.stats})


# --- two-state reductions -------------------------------------------------

def sharp_theta(z):
    return np.sign(z)


def smooth_theta(z, eps: float = 1e-3):
    """Odd nondecreasing cubic smoothing of sign(z): equals sign outside [-eps, eps]."""
    z = np.asarray(z, dtype=float)
    s = np.clip(z / eps, -1.0, 1.0)
    return 1.5 * s - 0.5 * s ** 3


def two_state_reduce(obj, kappa: float = 1.0, b=None) -> Callable:
    """Scalar right-hand side r(x) for d = 2, with x the weight of the first state.

    ``obj`` may be a RateFamily (r = (1-x) Q_21 - x Q_12) or a PayoffFamily,
    which is taken through the pressure-resistance rates with intensity kappa.
    """
    if isinstance(obj, PayoffFamily):
        obj = pressure_resistance_rates(obj, kappa)
    if not isinstance(obj, RateFamily):
        raise ValidationError("two_state_reduce needs a RateFamily or PayoffFamily")
    if obj.d != 2:
        raise ValidationError(f"two-state reduction needs d = 2, got d = {obj.d}")
    fam = obj

    def r(x, t=0.0):
        x = np.asarray(x, dtype=float)
        state = np.stack([x, 1.0 - x], axis=-1)
        Q = fam(t, state, b)
        return (1.0 - x) * Q[..., 1, 0] - x * Q[..., 0, 1]

    return r


def threshold_rhs(F: Callable, alpha: float = 1.0) -> Callable:
    """r(x) = alpha (F(x) - x) for the threshold model."""
    return lambda x: alpha * (np.asarray(F(x), dtype=float) - np.asarray(x, dtype=float))


def minority_rhs(theta: Callable = smooth_theta) -> Callable:
    """r(x) = -x (1 - x) theta(x - 1/2)."""
    return lambda x: -np.asarray(x) * (1 - np.asarray(x)) * theta(np.asarray(x) - 0.5)


def integrate_scalar(r: Callable, x0: float, horizon: float, tol: float = 1e-10,
                     t_eval=None) -> Trajectory:
    """Integrate a two-state reduction x' = r(x) and lift it back onto the simplex."""
    res = solve_ode(lambda t, y: np.atleast_1d(r(y[0])), 0.0, [float(x0)], horizon, tol,
                    t_eval=t_eval)
    xs = res.y[:, 0]
    return Trajectory(res.t, np.stack([xs, 1 - xs], axis=1), {"integrator": "dopri5", "tol": tol})


# --- Filippov inclusions for alternating piecewise rates ------------------

@dataclass
class PiecewiseTwoStateRates:
    """Two-state rates on intervals I_k = (a_k, a_{k+1}), k = 0..K-1.

    On even k only Q_21 acts (x increases), on odd k only Q_12 (x
    decreases). ``q21[k]`` and ``q12[k]`` are callables of x; the inactive one
    is ignored. Interfaces a_k with odd k (flow converging from both sides)
    are stable; interior a_k with even k are unstable.
    """

    breakpoints: np.ndarray
    q21: list
    q12: list

    def __post_init__(self):
        a = np.asarray(self.breakpoints, dtype=float)
        if a[0] != 0.0 or a[-1] != 1.0 or np.any(np.diff(a) <= 0):
            raise ValidationError("breakpoints must increase strictly from 0 to 1")
        self.breakpoints = a
        K = len(a) - 1
        if len(self.q21) != K or len(self.q12) != K:
            raise ValidationError("need one rate pair per interval")

    @classmethod
    def unit(cls, breakpoints) -> "PiecewiseTwoStateRates":
        """Q_21 = 1 on even intervals and Q_12 = 1 on odd ones."""
        K = len(breakpoints) - 1
        one = lambda x: 1.0
        return cls(np.asarray(breakpoints, float), [one] * K, [one] * K)

    @property
    def intervals(self) -> int:
        return len(self.breakpoints) - 1

    def velocity(self, k: int, x: float) -> float:
        if k % 2 == 0:
            return (1.0 - x) * float(self.q21[k](x))
        return -x * float(self.q12[k](x))

    def interval_of(self, x: float) -> int:
        a = self.breakpoints
        return int(np.clip(np.searchsorted(a, x, side="right") - 1, 0, self.intervals - 1))

    def breakpoint_index(self, x: float, tol: float = 1e-12) -> Optional[int]:
        hits = np.nonzero(np.abs(self.breakpoints - x) <= tol)[0]
        return int(hits[0]) if hits.size else None

    def is_stable(self, k: int) -> bool:
        """Breakpoint a_k attracts from both sides (interior, odd k)."""
        return 0 < k < self.intervals and k % 2 == 1


@dataclass
class FilippovResult:
    trajectory: Trajectory
    modes: list


def integrate_filippov(rates: PiecewiseTwoStateRates, x0: float, horizon: float,
                       tol: float = 1e-11, max_step: float = 0.05) -> FilippovResult:
    """Integrate x' in F(x) with exact breakpoint detection and pinning.

    Inside an interval the active one-sided rate drives the flow; when a
    stable interface is hit the solution is pinned there for all later time.
    Starting points on unstable interfaces are refused.
    """
    a = rates.breakpoints
    x = float(x0)
    if not 0.0 <= x <= 1.0:
        raise ValidationError("x0 must lie in [0, 1]")
    k_hit = rates.breakpoint_index(x)
    if k_hit is not None and 0 < k_hit < rates.intervals and not rates.is_stable(k_hit):
        raise ValidationError(
            f"x0 = a_{k_hit} is an unstable interface: the inclusion has several solutions from it")
    ts, xs, modes = [0.0], [x], []
    t = 0.0
    if k_hit is not None and rates.is_stable(k_hit):
        modes.append({"t": 0.0, "mode": "pinned", "breakpoint": k_hit, "x": x})
        ts.append(horizon)
        xs.append(x)
        return FilippovResult(_lift(ts, xs, tol), modes)
    k = rates.interval_of(x)
    if k_hit is not None:
        # on the boundary: take the interval the flow can enter
        k = 0 if k_hit == 0 else rates.intervals - 1
    while t < horizon:
        modes.append({"t": t, "mode": "interval", "interval": k, "x": x})
        rising = k % 2 == 0
        goal_idx = k + 1 if rising else k
        goal = a[goal_idx]

        def rhs(_t, y, k=k):
            return np.array([rates.velocity(k, y[0])])

        def past(v):
            return v >= goal if rising else v <= goal

        res = solve_ode(rhs, t, [x], horizon, tol, max_step=max_step)
        yy = res.y[:, 0]
        over = past(yy)
        if not np.any(over):
            ts.extend(res.t[1:].tolist())
            xs.extend(yy[1:].tolist())
            break
        idx = int(np.argmax(over))
        ts.extend(res.t[1:idx].tolist())
        xs.extend(yy[1:idx].tolist())
        tl, yl = res.t[idx - 1], res.y[idx - 1]
        left, right = tl, res.t[idx]
        for _ in range(200):
            mid = 0.5 * (left + right)
            ym = solve_ode(rhs, tl, yl, mid, tol * 1e-2).y[-1, 0]
            if past(ym):
                right = mid
            else:
                left = mid
            if abs(ym - goal) <= 1e-12 or right - left < 1e-15:
                break
        t, x = right, float(goal)
        ts.append(t)
        xs.append(x)
        if rates.is_stable(goal_idx) or goal_idx in (0, rates.intervals):
            label = "pinned" if rates.is_stable(goal_idx) else "boundary"
            modes.append({"t": t, "mode": label, "breakpoint": goal_idx, "x": x})
            if t < horizon:
                ts.append(horizon)
                xs.append(x)
            break
        raise NumericalError(f"flow crossed unstable interface a_{goal_idx}", state=x)
    return FilippovResult(_lift(ts, xs, tol), modes)


def _lift(ts, xs, tol):
    t = np.asarray(ts)
    x = np.asarray(xs)
    keep = np.concatenate([[True], np.diff(t) > 0])
    t, x = t[keep], x[keep]
    return Trajectory(t, np.stack([x, 1 - x], axis=1), {"integrator": "filippov-dopri5", "tol": tol})
