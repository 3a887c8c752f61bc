"""Best responses of major players and the controlled kinetic flow."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (ControlSet, NumericalError, PrincipalSpec, RateFamily, Trajectory,
                   ValidationError, as_simplex)
from .kinetic import integrate_kinetic

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _finite(v, b):
    if not np.isfinite(v):
        raise NumericalError(f"objective is not finite at b={b}")
    return v


def golden_section_max(fun: Callable[[float], float], lo: float, hi: float,
                       width: float = 1e-10, polish: bool = True) -> tuple:
    """Maximize a scalar function on [lo, hi]; returns (argmax, value).

    Golden-section search down to ``width`` followed, when requested, by a
    bisection on the sign of a central-difference derivative, which locates
    smooth interior maxima below the resolution of function values.
    """
    a, b = float(lo), float(hi)
    if b - a <= width:
        m = 0.5 * (a + b)
        return m, fun(m)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > width:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fun(d)
    best, fbest = (c, fc) if fc >= fd else (d, fd)
    if polish:
        h = 1e-6 * max(1.0, abs(best))
        lo2, hi2 = max(lo, best - 1e-5 * max(1.0, abs(best))), min(hi, best + 1e-5 * max(1.0, abs(best)))

        def slope(z):
            return fun(min(z + h, hi)) - fun(max(z - h, lo))

        sl, sh = slope(lo2), slope(hi2)
        if lo2 - h >= lo and hi2 + h <= hi and sl > 0 > sh:
            for _ in range(80):
                mid = 0.5 * (lo2 + hi2)
                if slope(mid) > 0:
                    lo2 = mid
                else:
                    hi2 = mid
                if hi2 - lo2 < 1e-14 * max(1.0, abs(mid)):
                    break
            cand = 0.5 * (lo2 + hi2)
            fcand = fun(cand)
            if fcand >= fbest - 1e-15 * max(abs(fbest), abs(fcand)):
                best, fbest = cand, fcand
    return best, fbest


def _prefer(b_new, v_new, b_old, v_old):
    """True when (b_new, v_new) beats the incumbent, ties going to the smaller point."""
    if v_new > v_old:
        return True
    if v_new == v_old:
        return tuple(np.atleast_1d(b_new)) < tuple(np.atleast_1d(b_old))
    return False


def best_response(spec: PrincipalSpec, x, points_per_axis: int = 17, width: float = 1e-10,
                  sweeps: int = 100) -> np.ndarray:
    """Maximizer of b -> B(x, b) over the control box.

    One-dimensional boxes use a coarse grid, then golden section in the
    bracketing cell. Higher dimensions refine the best grid point by cyclic
    coordinate searches. Ties go to the lexicographically smallest b.
    """
    x = np.asarray(x, dtype=float)
    box = spec.control_set
    grid = box.grid(points_per_axis)
    vals = np.array([_finite(spec(x, g), g) for g in grid])
    k = int(np.argmax(vals))
    b, vb = grid[k].copy(), float(vals[k])
    if box.dim == 0:
        return b
    step = (box.upper - box.lower) / max(points_per_axis - 1, 1)

    def line(axis, lo, hi, current, v_current):
        def f(z):
            trial = current.copy()
            trial[axis] = z
            return _finite(spec(x, trial), trial)

        z, fz = golden_section_max(f, lo, hi, width)
        trial = current.copy()
        trial[axis] = z
        if _prefer(trial, fz, current, v_current):
            return trial, fz
        return current, v_current

    if box.dim == 1:
        lo = max(box.lower[0], b[0] - step[0])
        hi = min(box.upper[0], b[0] + step[0])
        return line(0, lo, hi, b, vb)[0]
    for _ in range(sweeps):
        prev = b.copy()
        for axis in range(box.dim):
            b, vb = line(axis, box.lower[axis], box.upper[axis], b, vb)
        if np.abs(b - prev).sum() < width:
            break
    return b


def best_response_closed_form(spec: PrincipalSpec, x) -> np.ndarray:
    """b*(x) = (p')^{-1}(1 / (kappa_B fbar(x))) for the fines-class principal."""
    st = spec.structured
    if st is None:
        raise ValidationError("closed-form best response needs the structured fines form")
    x = np.asarray(x, dtype=float)
    fbar = x @ st.fines
    if np.any(fbar <= 0):
        raise ValidationError("mean fine must be positive for the closed form")
    b = st.dp_inv(1.0 / (st.kappa_B * fbar))
    lo = st.dp_inv(1.0 / (st.kappa_B * st.fines.min())) if st.fines.min() > 0 else 0.0
    hi = st.dp_inv(1.0 / (st.kappa_B * st.fines.max()))
    # the range holds on the simplex; finite-difference probes may step off it
    on = np.all(x >= -1e-12, axis=-1)
    if np.any(on & ((b < lo * (1 - 1e-9) - 1e-14) | (b > hi * (1 + 1e-9) + 1e-14))):
        raise NumericalError("closed-form best response left its admissible range")
    b = np.clip(b, spec.control_set.lower[0], spec.control_set.upper[0])
    return np.asarray(b)[..., None] if np.ndim(b) else np.array([float(b)])


def structured_b_hat(spec: PrincipalSpec, fbar):
    """b-hat(fbar) = (p')^{-1}(1/(kappa_B fbar)) as a function of the mean fine."""
    st = spec.structured
    return st.dp_inv(1.0 / (st.kappa_B * np.asarray(fbar, dtype=float)))


@dataclass
class BestResponseMap:
    resolver: Callable
    provenance: str = "numeric"
    tie_break: str = "lexicographic-smallest"
    vectorized: bool = False
    control_set: Optional[ControlSet] = None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim > 1 and not self.vectorized:
            flat = x.reshape(-1, x.shape[-1])
            out = np.array([np.atleast_1d(self.resolver(r)) for r in flat])
            return out.reshape(x.shape[:-1] + (out.shape[-1],))
        return np.asarray(self.resolver(x), dtype=float)

    def policy(self) -> Callable:
        return lambda t, x: self(x)

    @classmethod
    def numeric(cls, spec: PrincipalSpec, **kw) -> "BestResponseMap":
        return cls(lambda x: best_response(spec, x, **kw), "numeric", spec.tie_break,
                   False, spec.control_set)

    @classmethod
    def closed_form(cls, spec: PrincipalSpec) -> "BestResponseMap":
        return cls(lambda x: best_response_closed_form(spec, x), "closed_form",
                   spec.tie_break, True, spec.control_set)

    @classmethod
    def constant(cls, b) -> "BestResponseMap":
        b = np.atleast_1d(np.asarray(b, dtype=float))

        def resolver(x):
            x = np.asarray(x)
            return np.broadcast_to(b, x.shape[:-1] + b.shape).copy()

        return cls(resolver, "constant", vectorized=True)


def tabulate_best_response(brm: BestResponseMap, points) -> list:
    """Rows (x..., b...) over a set of simplex points, for CSV export."""
    return [list(map(float, p)) + list(map(float, np.atleast_1d(brm(p)))) for p in points]


@dataclass
class NashResult:
    profile: np.ndarray
    certified: bool
    rounds: int
    regrets: list = field(default_factory=list)
    history: list = field(default_factory=list)


def local_nash(specs: Sequence[PrincipalSpec], x, tol: float = 1e-8, max_rounds: int = 500,
               points_per_axis: int = 17, certify_tol: float = 1e-6) -> NashResult:
    """Iterated simultaneous best responses of K major players.

    Player k chooses block k (its own box) of the shared profile; its
    objective receives the whole profile. The result is certified when no
    player gains more than ``certify_tol`` by a unilateral move on its grid.
    """
    K = len(specs)
    if K < 1:
        raise ValidationError("need at least one major player")
    x = np.asarray(x, dtype=float)
    dims = [s.control_set.dim for s in specs]
    cuts = np.cumsum([0] + dims)
    profile = np.concatenate([s.control_set.center for s in specs])

    def restricted(k, prof):
        def obj(xx, bk):
            trial = prof.copy()
            trial[cuts[k]:cuts[k + 1]] = bk
            return specs[k].objective(xx, trial)
        return PrincipalSpec(obj, specs[k].control_set)

    history = [profile.copy()]
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        new = profile.copy()
        for k in range(K):
            new[cuts[k]:cuts[k + 1]] = best_response(restricted(k, profile), x, points_per_axis)
        change = np.abs(new - profile).sum()
        profile = new
        history.append(profile.copy())
        if change < tol:
            converged = True
            break
    regrets = []
    for k in range(K):
        spec_k = restricted(k, profile)
        here = spec_k(x, profile[cuts[k]:cuts[k + 1]])
        best = max(spec_k(x, g) for g in specs[k].control_set.grid(points_per_axis))
        regrets.append(max(0.0, best - here))
    certified = converged and all(r <= certify_tol for r in regrets)
    return NashResult(profile, certified, rounds, regrets, history)


def integrate_controlled(family: RateFamily, brm: BestResponseMap, x0, horizon: float,
                         tol: float = 1e-9, t_eval=None) -> Trajectory:
    """Kinetic flow x' = x Q(x, b*(x)) under a best-response principal."""
    traj = integrate_kinetic(family, x0, brm.policy(), horizon, tol, t_eval=t_eval)
    traj.metadata.update({"control": brm.provenance, "tie_break": brm.tie_break})
    return traj
