"""Coalition growth: merge/split kinetics, injection and attachment, and the coalition chain."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .chain import _lockstep, _rng
from .core import ChainPath, NumericalError, ValidationError

DEFAULT_CAP = 256
CLAMP = 1e-12


@dataclass
class CoalitionState:
    """Scaled counts x_k of coalitions of size k = 1..K and the mass routed past K."""

    x: np.ndarray
    overflow_mass: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 1 or self.x.size == 0:
            raise ValidationError("coalition state needs a nonempty vector")
        if np.any(self.x < -CLAMP) or not np.all(np.isfinite(self.x)):
            raise ValidationError("coalition counts must be finite and nonnegative")
        self.x = np.maximum(self.x, 0.0)

    @property
    def K(self) -> int:
        return self.x.size

    @property
    def mass(self) -> float:
        return float(np.arange(1, self.K + 1) @ self.x)

    @property
    def number(self) -> float:
        return float(self.x.sum())

    @classmethod
    def monodisperse(cls, K: int = DEFAULT_CAP, c0: float = 1.0) -> "CoalitionState":
        x = np.zeros(K)
        x[0] = c0
        return cls(x)


def _kernel_grid(K: int):
    k = np.arange(1, K + 1)
    return k[:, None], k[None, :]


class GrowthRates:
    """Merge kernel C(k, j, x, b), split kernel F(k, j, x, b), injection a(x, b), attachment P(x, b).

    Kernels are called with integer arrays k (shape (K, 1)) and j (shape
    (1, K)) and must broadcast to (K, K); F(k, j) is the rate of a size-k
    coalition splitting into (j, k - j) and is only used for j < k. Numbers
    are accepted in place of callables. With ``state_dependent=False`` the
    kernels are evaluated once and cached.
    """

    def __init__(self, K: int = DEFAULT_CAP, merge=None, split=None, inject=None, attach=None,
                 additive_bound: Optional[float] = None, state_dependent: bool = False):
        if K < 1:
            raise ValidationError("growth cap K must be positive")
        self.K = int(K)
        self.merge, self.split = merge, split
        self.inject, self.attach = inject, attach
        self.additive_bound = additive_bound
        self.state_dependent = state_dependent
        self._cache = {}

    def _kernel(self, which, x, b):
        fun = self.merge if which == "C" else self.split
        key = which
        if not self.state_dependent and key in self._cache:
            return self._cache[key]
        K = self.K
        if fun is None:
            out = np.zeros((K, K))
        else:
            kk, jj = _kernel_grid(K)
            val = fun(kk, jj, x, b) if callable(fun) else fun
            out = np.array(np.broadcast_to(np.asarray(val, dtype=float), (K, K)))
        if which == "F":
            kk, jj = _kernel_grid(K)
            out = np.where(jj < kk, out, 0.0)
        if np.any(out < 0) or not np.all(np.isfinite(out)):
            raise NumericalError(f"{'merge' if which == 'C' else 'split'} rates must be finite and >= 0")
        if not self.state_dependent:
            self._cache[key] = out
        return out

    def C(self, x=None, b=None) -> np.ndarray:
        return self._kernel("C", x, b)

    def F(self, x=None, b=None) -> np.ndarray:
        return self._kernel("F", x, b)

    def _scalar(self, fun, x, b) -> float:
        if fun is None:
            return 0.0
        v = float(fun(x, b)) if callable(fun) else float(fun)
        if v < 0 or not np.isfinite(v):
            raise NumericalError("injection and attachment rates must be finite and >= 0")
        return v

    def a(self, x=None, b=None) -> float:
        return self._scalar(self.inject, x, b)

    def P(self, x=None, b=None) -> float:
        return self._scalar(self.attach, x, b)


def _state_vec(x) -> np.ndarray:
    return x.x if isinstance(x, CoalitionState) else np.asarray(x, dtype=float)


def smoluchowski_parts(rates: GrowthRates, x, b=None):
    """Right-hand side and the rate at which mass leaves the cap, (xdot, overflow rate)."""
    x = _state_vec(x)
    K = rates.K
    if x.size != K:
        raise ValidationError(f"state length {x.size} does not match cap {K}")
    k = np.arange(1, K + 1)
    C = rates.C(x, b)
    F = rates.F(x, b)
    a, P = rates.a(x, b), rates.P(x, b)
    M = C * np.outer(x, x)
    S = k[:, None] + k[None, :]
    gain = np.bincount(S.ravel(), weights=M.ravel(), minlength=2 * K + 1)
    dx = gain[1:K + 1].copy()
    dx -= 2.0 * x * (C @ x)
    dx += 2.0 * (F.T @ x)
    dx -= F.sum(axis=1) * x
    dx[0] += a
    att = P * k * x
    dx -= att
    dx[1:] += att[:-1]
    over = float(np.sum(np.arange(2 * K + 1)[K + 1:] * gain[K + 1:])) + (K + 1) * att[-1]
    return dx, over


def smoluchowski_rhs(rates: GrowthRates, x, b=None) -> np.ndarray:
    """xdot_k with a gain sum over ordered pairs and the factor 2 on merge loss and split gain."""
    return smoluchowski_parts(rates, x, b)[0]


def loss_coefficients(rates: GrowthRates, x, b=None) -> np.ndarray:
    """Per-component loss rates l_k so that xdot_k + l_k x_k >= 0 for x >= 0."""
    x = _state_vec(x)
    k = np.arange(1, rates.K + 1)
    return 2.0 * (rates.C(x, b) @ x) + rates.F(x, b).sum(axis=1) + rates.P(x, b) * k


@dataclass
class GrowthTrajectory:
    t: np.ndarray
    x: np.ndarray
    overflow: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def mass(self) -> np.ndarray:
        return self.x @ np.arange(1, self.x.shape[1] + 1) + self.overflow

    @property
    def number(self) -> np.ndarray:
        return self.x.sum(axis=1)

    @property
    def final(self) -> CoalitionState:
        return CoalitionState(self.x[-1], float(self.overflow[-1]))

    def to_csv(self, filename) -> None:
        K = self.x.shape[1]
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{k}" for k in range(1, K + 1)] + ["mass", "number", "overflow"])
            for i in range(len(self.t)):
                w.writerow([repr(float(self.t[i]))] + [repr(float(v)) for v in self.x[i]]
                           + [repr(float(self.mass[i])), repr(float(self.number[i])),
                              repr(float(self.overflow[i]))])


def _phi1(z):
    return np.where(z > 1e-8, -np.expm1(-z) / np.where(z > 1e-8, z, 1.0), 1.0 - z / 2 + z * z / 6)


def _phi2(z):
    safe = np.where(z > 1e-4, z, 1.0)
    series = 0.5 - z / 6 + z * z / 24
    return np.where(z > 1e-4, (np.expm1(-safe) + safe) / (safe * safe), series)


def _etd2_step(rates, y, h, Kc, b):
    """One exponential RK2 step of y' = N(y) - Kc y (Kc diagonal, frozen over the step)."""
    g0, o0 = smoluchowski_parts(rates, y, b)
    N0 = g0 + Kc * y
    z = Kc * h
    a = np.maximum(np.exp(-z) * y + h * _phi1(z) * N0, 0.0)
    ga, oa = smoluchowski_parts(rates, a, b)
    return a + h * _phi2(z) * (ga + Kc * a - N0), 0.5 * h * (o0 + oa)


def integrate_growth(rates: GrowthRates, x0, horizon: float, tol: float = 1e-10, b=None,
                     t_eval=None, shift_factor: float = 1.25, h0: float = 1e-3,
                     max_steps: int = 10_000_000, waive_bounds: bool = False,
                     bound_grid=None, shift: str = "diagonal",
                     extrapolate: bool = True) -> GrowthTrajectory:
    """Positivity-preserving integration of the merge/split/attachment equations.

    The equation is split as y' = (g(y) + Ky) - Ky with a diagonal K whose
    entries are shift_factor times each size's loss rate at the start of the
    step, and advanced by a second-order exponential Runge-Kutta step
    treating -Ky exactly. Since g_k + K_k y_k >= 0 the first stage is
    positive for any step. The local error is
    estimated by step doubling, and the accepted step takes the extrapolated
    value (third order) whenever that stays nonnegative. ``shift="scalar"``
    uses one shift for all sizes, which conserves mass exactly for
    conservative kernels but needs many more steps. Overflow mass is integrated alongside (by the
    trapezoid rule on its nonnegative rate) and is nondecreasing.
    """
    if rates.additive_bound is not None and not waive_bounds:
        rep = check_additive_bounds(rates, bound_grid)
        if not rep.passed or rep.c > rates.additive_bound * (1 + 1e-12):
            raise ValidationError(f"declared additive bound violated at {rep.violation}")
    state = x0 if isinstance(x0, CoalitionState) else CoalitionState(x0)
    y = state.x.copy()
    over = float(state.overflow_mass)
    t = 0.0
    marks = sorted(set(np.atleast_1d(t_eval).tolist())) if t_eval is not None else [horizon]
    marks = [m for m in marks if 0 < m <= horizon]
    if not marks or marks[-1] != horizon:
        marks.append(horizon)
    ts, xs, os_ = [0.0], [y.copy()], [over]
    h = min(h0, horizon) if horizon > 0 else 0.0
    steps = rejected = 0
    mi = 0
    hmin = 1e-14 * max(1.0, horizon)
    while t < horizon:
        if steps + rejected > max_steps:
            raise NumericalError(f"step budget exhausted at t={t}", state=y)
        target = marks[mi]
        land = t + h >= target - 1e-14 * max(1.0, target)
        hh = target - t if land else h
        loss = loss_coefficients(rates, y, b)
        Kc = shift_factor * (loss if shift == "diagonal" else np.full_like(loss, loss.max()))
        y_full, o_full = _etd2_step(rates, y, hh, Kc, b)
        y_half, o_half = _etd2_step(rates, y, 0.5 * hh, Kc, b)
        y_new, o2 = _etd2_step(rates, np.maximum(y_half, 0.0), 0.5 * hh, Kc, b)
        over_new = over + o_half + o2
        err_vec = (y_new - y_full) / 3.0
        scale = tol + tol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.abs(err_vec) / scale))
        ok = np.isfinite(err) and err <= 1.0 and y_new.min() >= -1e-8
        if ok:
            t = target if land else t + hh
            # local extrapolation when it keeps the state nonnegative
            y_ex = y_new + err_vec
            y = y_ex if (extrapolate and y_ex.min() >= 0) else np.maximum(y_new, 0.0)
            over = over_new
            steps += 1
            if land:
                mi += 1
                ts.append(t)
                xs.append(y.copy())
                os_.append(over)
            fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** (-1.0 / 3.0)))
            h = hh * fac if not land else max(h, hh)
        else:
            rejected += 1
            h = hh * (0.25 if not np.isfinite(err) else max(0.1, min(0.5, 0.9 * err ** (-1.0 / 3.0))))
            if h < hmin:
                raise NumericalError(f"step size underflow at t={t}", state=y)
    return GrowthTrajectory(np.array(ts), np.array(xs), np.array(os_),
                            {"steps": steps, "rejected": rejected, "integrator": "etd2rk"})


# ---------------------------------------------------------------- strategic rates

def _weights(w, K):
    """Weight table indexed [s, k] for sizes 1..2K (index 0 unused)."""
    if callable(w):
        s = np.arange(2 * K + 1)[:, None]
        k = np.arange(2 * K + 1)[None, :]
        out = np.asarray(w(s, k), dtype=float)
        out = np.broadcast_to(out, (2 * K + 1, 2 * K + 1)).copy()
    elif np.ndim(w) == 0:
        out = np.full((2 * K + 1, 2 * K + 1), float(w))
    else:
        out = np.asarray(w, dtype=float)
    if np.any(out < 0):
        raise ValidationError("strategic weights must be nonnegative")
    return out


def strategic_rates_from_payoffs(R: Callable, K: int, a_weights=1.0, split_weights=1.0,
                                 inject=None, attach=None, state_dependent: bool = True) -> GrowthRates:
    """Merge when the union pays some member more, split when a part gains.

    ``R(x, b)`` returns payoffs of coalition sizes 1..K. Merges producing a
    size beyond K have no defined payoff and get rate 0.
    C_kj = a_{k+j,k}(R_{k+j} - R_k)^+ + a_{k+j,j}(R_{k+j} - R_j)^+ and
    F_kj = a~_{kj}(R_j - R_k)^+ + a~_{k,k-j}(R_{k-j} - R_k)^+.
    """
    A = _weights(a_weights, K)
    At = _weights(split_weights, K)

    def payoffs(x, b):
        r = np.asarray(R(x, b), dtype=float)
        if r.shape != (K,):
            raise ValidationError(f"size payoffs must have length {K}")
        return np.concatenate([[np.nan], r, np.full(K, np.nan)])

    def merge(k, j, x, b):
        r = payoffs(x, b)
        s = k + j
        ok = s <= K
        sc = np.where(ok, s, 0)
        rs = np.where(ok, r[sc], 0.0)
        val = (A[s, k] * np.maximum(rs - r[k], 0.0) + A[s, j] * np.maximum(rs - r[j], 0.0))
        return np.where(ok, val, 0.0)

    def split(k, j, x, b):
        r = payoffs(x, b)
        ok = j < k
        jj = np.where(ok, j, 1)
        rest = np.where(ok, k - j, 1)
        val = (At[k, jj] * np.maximum(r[jj] - r[k], 0.0)
               + At[k, rest] * np.maximum(r[rest] - r[k], 0.0))
        return np.where(ok, val, 0.0)

    return GrowthRates(K, merge, split, inject, attach, state_dependent=state_dependent)


# ---------------------------------------------------------------- additive bounds

@dataclass
class BoundReport:
    passed: bool
    c: float
    violation: Optional[tuple] = None


def check_additive_bounds(rates: GrowthRates, grid=None, limit: float = 1e6) -> BoundReport:
    """Smallest c with C_kj <= c(k+j), sum_{j<k} F_kj <= ck and a + P <= c over the grid.

    ``grid`` is a list of (x, b) pairs (default: the zero state). The check
    fails when the needed c grows with the size index, which is detected as
    the ratio peaking at the largest sizes while increasing there, or when it
    exceeds ``limit``.
    """
    K = rates.K
    grid = grid if grid is not None else [(np.zeros(K), None)]
    if len(grid) == 0:
        raise ValidationError("bound grid must be nonempty")
    k = np.arange(1, K + 1)
    c, worst = 0.0, None
    growing = None
    for x, b in grid:
        C = rates.C(x, b)
        ratio = C / (k[:, None] + k[None, :])
        fr = rates.F(x, b).sum(axis=1) / k
        ap = rates.a(x, b) + rates.P(x, b)
        cands = [(float(ratio.max()), ("merge",) + tuple(int(v) + 1 for v in
                                                       np.unravel_index(np.argmax(ratio), ratio.shape))),
                 (float(fr.max()), ("split", int(np.argmax(fr)) + 1)),
                 (ap, ("inject+attach",))]
        for val, where in cands:
            if val > c:
                c, worst = val, where + ("x",)
        # unbounded growth: the diagonal ratio still rising at the cap
        diag = np.diagonal(ratio)
        if K >= 3 and diag[-1] > 0 and diag[-1] > diag[-2] * (1 + 1e-9) >= diag[-3] * (1 + 1e-9):
            growing = ("merge", K, K, "x")
        if K >= 3 and fr[-1] > 0 and fr[-1] > fr[-2] * (1 + 1e-9) >= fr[-3] * (1 + 1e-9):
            growing = growing or ("split", K, "x")
    if growing is not None:
        return BoundReport(False, c, growing)
    if c > limit:
        return BoundReport(False, c, worst)
    return BoundReport(True, c, None)


# ---------------------------------------------------------------- coalition chain

class _Events:
    """Event table for the coalition chain: ordered merges, splits, injection, attachment.

    The last state slot counts agents held in coalitions beyond the cap.
    """

    def __init__(self, K: int):
        self.K = K
        rows, labels = [], []
        for i in range(1, K + 1):
            for j in range(1, K + 1):
                d = np.zeros(K + 1, dtype=np.int64)
                d[i - 1] -= 1
                d[j - 1] -= 1
                if i + j <= K:
                    d[i + j - 1] += 1
                else:
                    d[K] += i + j
                rows.append(d)
                labels.append(("merge", i, j))
        for k in range(2, K + 1):
            for j in range(1, k):
                d = np.zeros(K + 1, dtype=np.int64)
                d[k - 1] -= 1
                d[j - 1] += 1
                d[k - j - 1] += 1
                rows.append(d)
                labels.append(("split", k, j))
        d = np.zeros(K + 1, dtype=np.int64)
        d[0] = 1
        rows.append(d)
        labels.append(("inject",))
        for k in range(1, K + 1):
            d = np.zeros(K + 1, dtype=np.int64)
            d[k - 1] -= 1
            if k < K:
                d[k] += 1
            else:
                d[K] += k + 1
            rows.append(d)
            labels.append(("attach", k))
        self.deltas = np.array(rows)
        self.labels = labels
        kk, jj = np.meshgrid(np.arange(2, K + 1), np.arange(1, K + 1), indexing="ij")
        mask = jj < kk
        self.split_k = kk[mask] - 1
        self.split_j = jj[mask] - 1

    def rate_fn(self, rates: GrowthRates, h: float, b=None):
        K = self.K
        k = np.arange(1, K + 1)

        def batch(n, x):
            C = rates.C(x, b)
            pair = n[:, :, None] * n[:, None, :]
            pair[:, np.arange(K), np.arange(K)] -= n
            merge = (C[None] * pair * h).reshape(len(n), -1)
            F = rates.F(x, b)
            split = F[self.split_k, self.split_j][None, :] * n[:, self.split_k]
            inj = np.full((len(n), 1), rates.a(x, b) / h)
            att = rates.P(x, b) * k[None, :] * n
            return np.hstack([merge, split, inj, att])

        def fn(t, S):
            n = S[:, :K].astype(float)
            if not rates.state_dependent:
                return batch(n, None)
            return np.vstack([batch(row[None, :], h * row) for row in n])

        return fn


def _coalition_counts(x0, h: float) -> np.ndarray:
    x0 = _state_vec(x0)
    n = np.rint(x0 / h)
    if np.any(np.abs(n * h - x0) > 1e-9 * max(1.0, float(np.max(x0)))) or np.any(n < 0):
        raise ValidationError("initial coalition state must lie on the lattice hZ_+")
    return n.astype(np.int64)


def simulate_coalition_chain(rates: GrowthRates, x0, h: float, horizon: float, seed=None,
                             b=None, max_events: int = 10_000_000) -> ChainPath:
    """Exact event simulation of the coalition chain with scale h (x = h n).

    Ordered pairs (i, j) of distinct coalitions merge at rate C_ij h, so the
    total rate of the pair class is C_ij x_i x_j / h (x_i (x_i - h) for
    i = j); a size k splits into (j, k - j) at rate F_kj, injection occurs
    at rate a / h and a size-k coalition gains one agent at rate P k.
    Recorded states are counts n (with a final overflow slot of agents).
    """
    K = rates.K
    n = np.concatenate([_coalition_counts(x0, h), [0]])
    ev = _Events(K)
    fn = ev.rate_fn(rates, h, b)
    rng = _rng(seed)
    t = 0.0
    ts, ns, labels = [0.0], [n.copy()], [None]
    for _ in range(max_events):
        r = fn(np.array([t]), n[None, :])[0]
        tot = r.sum()
        if not np.isfinite(tot):
            raise NumericalError("coalition chain rate overflow", state=n)
        if tot <= 0:
            break
        t += rng.exponential() / tot
        if t > horizon:
            break
        e = min(int(np.searchsorted(np.cumsum(r), rng.random() * tot, side="right")), len(r) - 1)
        n = n + ev.deltas[e]
        ts.append(t)
        ns.append(n.copy())
        labels.append(ev.labels[e])
    else:
        raise NumericalError("coalition chain event budget exhausted", state=n)
    return ChainPath(np.array(ts), np.array(ns), labels, seed, {"h": h, "K": K})


def coalition_ensemble(rates: GrowthRates, x0, h: float, times, replicas: int, seed=None,
                       b=None) -> np.ndarray:
    """Scaled states x = h n at the given times for many replicas, shape (R, m, K + 1)."""
    K = rates.K
    n = np.concatenate([_coalition_counts(x0, h), [0]])
    ev = _Events(K)
    times = np.sort(np.atleast_1d(np.asarray(times, dtype=float)))
    out = _lockstep(ev.rate_fn(rates, h, b), n, ev.deltas, times, replicas, _rng(seed))
    return h * out


def path_mass(path: ChainPath) -> np.ndarray:
    """Agent count sum_k k n_k (including overflow) after each event."""
    K = path.n.shape[1] - 1
    return path.n[:, :K] @ np.arange(1, K + 1) + path.n[:, K]
