"""Shared domain types, Kolmogorov-matrix checks and rate-family norms.

All vector norms are l1; matrix norms are the sup over rows of the l1 row sum.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9
CLAMP_TOL = 1e-12


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class NumericalError(RuntimeError):
    """Raised when a numerical procedure fails (underflow, overflow, non-convergence)."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


def as_simplex(x, tol=SIMPLEX_TOL) -> np.ndarray:
    """Validate a point of the probability simplex and return a clamped float copy.

    Components in [-1e-12, 0) are set to 0; anything more negative, or a
    total mass off by more than ``tol``, raises ValidationError.
    """
    x = np.array(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValidationError("simplex state must be a nonempty vector")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"non-finite simplex state {x}")
    if x.min() < -CLAMP_TOL:
        raise ValidationError(f"negative component {x.min():.3e} in simplex state")
    if abs(x.sum() - 1.0) > tol:
        raise ValidationError(f"simplex state sums to {x.sum():.12g}")
    x[x < 0] = 0.0
    return x


@dataclass(frozen=True)
class SimplexState:
    x: np.ndarray

    def __post_init__(self):
        arr = as_simplex(self.x)
        arr.setflags(write=False)
        object.__setattr__(self, "x", arr)

    @property
    def d(self) -> int:
        return self.x.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.x, dtype=dtype)


@dataclass(frozen=True)
class PopulationState:
    n: tuple

    def __post_init__(self):
        n = tuple(int(v) for v in self.n)
        if any(v < 0 for v in n):
            raise ValidationError(f"negative count in {n}")
        if sum(n) < 1:
            raise ValidationError("population must contain at least one agent")
        object.__setattr__(self, "n", n)

    @property
    def N(self) -> int:
        return sum(self.n)

    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.n, dtype=float) / self.N

    @classmethod
    def from_fractions(cls, x, N: int) -> "PopulationState":
        """Round a simplex point to the lattice Z^d/N (largest-remainder rule)."""
        x = as_simplex(x)
        scaled = x * N
        n = np.floor(scaled).astype(int)
        short = N - n.sum()
        order = np.argsort(-(scaled - n), kind="stable")
        n[order[:short]] += 1
        return cls(tuple(n))


@dataclass
class QReport:
    ok: bool
    row_deviation: np.ndarray
    negative_offdiag: list

    def __bool__(self):
        return self.ok


def validate_q_matrix(M, tol: float = 1e-12) -> QReport:
    """Check nonnegative off-diagonal entries and zero row sums."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError("a Kolmogorov matrix must be square")
    dev = np.abs(M.sum(axis=1))
    neg = [(i, j, float(M[i, j])) for i, j in zip(*np.nonzero(M < -tol)) if i != j]
    return QReport(bool(np.all(dev <= tol) and not neg), dev, neg)


def fix_diagonal(Q: np.ndarray) -> np.ndarray:
    """Overwrite the diagonal with minus the off-diagonal row sums (works on stacks)."""
    Q = np.array(Q, dtype=float)
    d = Q.shape[-1]
    idx = np.arange(d)
    Q[..., idx, idx] = 0.0
    Q[..., idx, idx] = -Q.sum(axis=-1)
    return Q


@dataclass(frozen=True)
class ControlSet:
    """Axis-aligned box of admissible controls."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValidationError("control box needs lower <= upper per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, b, tol=1e-12) -> bool:
        b = np.atleast_1d(b)
        return bool(np.all(b >= self.lower - tol) and np.all(b <= self.upper + tol))

    def clip(self, b) -> np.ndarray:
        return np.clip(np.atleast_1d(np.asarray(b, dtype=float)), self.lower, self.upper)

    def grid(self, points_per_axis: int = 17) -> np.ndarray:
        """Regular grid in lexicographic order (smallest point first)."""
        axes = [np.linspace(lo, hi, points_per_axis) if hi > lo else np.array([lo])
                for lo, hi in zip(self.lower, self.upper)]
        return np.array(list(itertools.product(*axes)), dtype=float)


EMPTY_CONTROL = np.zeros(0)


class RateFamily:
    """State, time and control dependent Kolmogorov matrices Q(t, x, b).

    ``evaluator(t, x, b)`` returns the off-diagonal rates; the diagonal is
    always rebuilt from the row sums. With ``vectorized=True`` the evaluator
    must accept ``x`` of shape (..., d) and return (..., d, d).
    """

    def __init__(self, evaluator: Callable, d: int, regularity: str = "lipschitz",
                 declared_bounds: Optional[dict] = None, time_homogeneous: bool = True,
                 vectorized: bool = False, name: str = ""):
        if regularity not in ("lipschitz", "C2"):
            raise ValidationError(f"unknown regularity {regularity!r}")
        self.evaluator = evaluator
        self.d = int(d)
        self.regularity = regularity
        self.declared_bounds = dict(declared_bounds or {})
        self.time_homogeneous = time_homogeneous
        self.vectorized = vectorized
        self.name = name

    def __call__(self, t, x, b=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        b = EMPTY_CONTROL if b is None else b
        if x.ndim > 1 and not self.vectorized:
            if np.ndim(b) > 1:
                out = [self.evaluator(t, xi, bi) for xi, bi in zip(x.reshape(-1, self.d), b)]
            else:
                out = [self.evaluator(t, xi, b) for xi in x.reshape(-1, self.d)]
            Q = np.asarray(out, dtype=float).reshape(x.shape[:-1] + (self.d, self.d))
        else:
            Q = np.asarray(self.evaluator(t, x, b), dtype=float)
        Q = fix_diagonal(Q)
        if not np.all(np.isfinite(Q)):
            raise NumericalError(f"non-finite rates at x={x}", state=x)
        return Q

    def drift(self, t, x, b=None) -> np.ndarray:
        """Kinetic right-hand side x Q(t, x, b), batched over leading axes."""
        x = np.asarray(x, dtype=float)
        Q = self(t, x, b)
        return np.einsum("...i,...ij->...j", x, Q)

    def with_regularity(self, regularity: str) -> "RateFamily":
        return RateFamily(self.evaluator, self.d, regularity, self.declared_bounds,
                          self.time_homogeneous, self.vectorized, self.name)


def constant_rates(matrix, regularity: str = "C2") -> RateFamily:
    """Rate family independent of t, x and b."""
    Q = fix_diagonal(np.asarray(matrix, dtype=float))
    rep = validate_q_matrix(Q)
    if not rep.ok:
        raise ValidationError(f"not a Kolmogorov matrix: negative entries {rep.negative_offdiag}")
    d = Q.shape[0]

    def evaluator(t, x, b):
        return np.broadcast_to(Q, np.shape(x)[:-1] + (d, d)).copy()

    return RateFamily(evaluator, d, regularity, vectorized=True, name="constant")


def zero_rates(d: int) -> RateFamily:
    return constant_rates(np.zeros((d, d)))


class PayoffFamily:
    """Payoffs R_j(x, b) of the small players; ``R`` accepts batched x when vectorized."""

    def __init__(self, R: Callable, d: int, lipschitz_bound: Optional[float] = None,
                 vectorized: bool = True, name: str = ""):
        self.R = R
        self.d = int(d)
        self.lipschitz_bound = lipschitz_bound
        self.vectorized = vectorized
        self.name = name

    def __call__(self, x, b=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        b = EMPTY_CONTROL if b is None else b
        if x.ndim > 1 and not self.vectorized:
            flat = x.reshape(-1, self.d)
            if np.ndim(b) > 1:
                out = [self.R(xi, bi) for xi, bi in zip(flat, b)]
            else:
                out = [self.R(xi, b) for xi in flat]
            return np.asarray(out, dtype=float).reshape(x.shape)
        return np.asarray(self.R(x, b), dtype=float)


def default_detection():
    """p(b) = 1 - exp(-2 sqrt b) with derivative and derivative inverse."""

    def p(b):
        return 1.0 - np.exp(-2.0 * np.sqrt(np.maximum(b, 0.0)))

    def dp(b):
        b = np.asarray(b, dtype=float)
        s = np.sqrt(b)
        with np.errstate(divide="ignore"):
            return np.where(b > 0, np.exp(-2.0 * s) / np.where(s > 0, s, 1.0), np.inf)

    def dp_inv(y):
        # solve u exp(2u) = 1/y for u > 0, then b = u^2
        y = np.asarray(y, dtype=float)
        target = 1.0 / y
        u = np.where(target > 1.0, 0.5 * np.log(np.maximum(target, 1.0)), target)
        u = np.maximum(u, 1e-300)
        lo = np.zeros_like(target)
        hi = np.maximum(np.maximum(target, 0.5 * np.log(np.maximum(target, 1.0)) + 1.0), 1.0)
        for _ in range(200):
            g = u * np.exp(2 * u) - target
            lo = np.where(g < 0, u, lo)
            hi = np.where(g > 0, u, hi)
            step = g / ((1 + 2 * u) * np.exp(2 * u))
            new = u - step
            bad = (new <= lo) | (new >= hi) | ~np.isfinite(new)
            new = np.where(bad, 0.5 * (lo + hi), new)
            done = np.abs(new - u) <= 1e-15 * np.maximum(1.0, np.abs(u))
            u = new
            if np.all(done):
                break
        else:
            raise NumericalError(f"Newton for (p')^-1 did not converge; bracket [{lo}, {hi}]")
        return u * u

    return p, dp, dp_inv


@dataclass
class StructuredInspection:
    """Principal of the fines class: B = -b + kappa_B (p(b) f_bar - w_bar)."""

    fines: np.ndarray
    wages: np.ndarray
    kappa_B: float = 1.0
    p: Callable = None
    dp: Callable = None
    dp_inv: Callable = None

    def __post_init__(self):
        self.fines = np.asarray(self.fines, dtype=float)
        self.wages = np.asarray(self.wages, dtype=float)
        if self.p is None:
            self.p, self.dp, self.dp_inv = default_detection()

    def check_detection(self, grid=None) -> bool:
        """Numerical check that p maps into (0,1), increases, and p' decreases."""
        grid = np.geomspace(1e-4, 1e2, 200) if grid is None else np.asarray(grid)
        pv, dv = self.p(grid), self.dp(grid)
        return bool(np.all((pv > 0) & (pv < 1)) and np.all(np.diff(pv) > 0)
                    and np.all(np.diff(dv) < 0))


@dataclass
class PrincipalSpec:
    """Objective B(x, b) of the principal over a control box."""

    objective: Callable
    control_set: ControlSet
    structured: Optional[StructuredInspection] = None
    vectorized: bool = False
    tie_break: str = "lexicographic-smallest"

    def __call__(self, x, b) -> float:
        return float(self.objective(np.asarray(x, dtype=float), np.atleast_1d(b)))


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float)

    @property
    def final(self) -> np.ndarray:
        return self.x[-1]

    def __len__(self):
        return self.t.size


@dataclass
class ChainPath:
    """Jump records of a chain: times, states after each event and event labels.

    The first record is the initial state with event None.
    """

    t: np.ndarray
    n: np.ndarray
    events: list
    seed: Any = None
    metadata: dict = field(default_factory=dict)

    @property
    def N(self):
        return int(self.n[0].sum())

    @property
    def jumps(self) -> int:
        return len(self.events) - 1

    def state_at(self, t: float) -> np.ndarray:
        k = np.searchsorted(self.t, t, side="right") - 1
        return self.n[max(k, 0)]


def simplex_grid(d: int, M: int) -> np.ndarray:
    """All points of Z^d/M on the simplex, lexicographic in the counts."""
    from .chain import LatticeIndex

    return LatticeIndex(d, M).states / float(M)


def _sample_points(grid, d):
    if isinstance(grid, int):
        return simplex_grid(d, grid)
    pts = np.asarray(grid, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValidationError("grid must be a nonempty (points, d) array or a resolution")
    return pts


def q_norms(family: RateFamily, grid, b=None, t: float = 0.0, h: float = 1e-5) -> dict:
    """Grid estimates of the sup, Lipschitz and derivative norms of a rate family.

    ``lip`` is the l1 difference quotient over all grid pairs. ``lip_coord``
    is the row sum of coordinate slopes sup_{k,x} |dQ_ij/dx_k| (finite
    differences along e_k). ``c1`` and ``c2`` add first and second coordinate
    derivatives to the sup norm. All values are lower bounds of the suprema.
    """
    pts = _sample_points(grid, family.d)
    d = family.d
    Qs = []
    for p in pts:
        try:
            Qs.append(family(t, p, b))
        except Exception as exc:  # pragma: no cover - messages only
            raise NumericalError(f"rate evaluation failed at {p}: {exc}", state=p) from exc
    Qs = np.asarray(Qs)
    norm = float(2.0 * np.abs(np.diagonal(Qs, axis1=1, axis2=2)).max()) if len(Qs) else 0.0

    lip = 0.0
    G = len(pts)
    for i in range(G - 1):
        dx = np.abs(pts[i + 1:] - pts[i]).sum(axis=1)
        dq = np.abs(Qs[i + 1:] - Qs[i]).sum(axis=2).max(axis=1)
        ok = dx > 1e-15
        if np.any(ok):
            lip = max(lip, float((dq[ok] / dx[ok]).max()))

    eye = np.eye(d)
    d1 = np.zeros((d, d))
    d2 = np.zeros((d, d))
    h2 = 1e-3
    for p, Q0 in zip(pts, Qs):
        for k in range(d):
            qp = family(t, p + h * eye[k], b)
            qm = family(t, p - h * eye[k], b)
            d1 = np.maximum(d1, np.abs(qp - qm) / (2 * h))
            for l in range(k, d):
                e = h2 * (eye[k] + eye[l])
                f = h2 * (eye[k] - eye[l])
                qpp = family(t, p + e, b)
                qmm = family(t, p - e, b)
                if k == l:
                    sec = (family(t, p + h2 * eye[k], b) - 2 * Q0 + family(t, p - h2 * eye[k], b)) / h2**2
                else:
                    sec = (qpp - family(t, p + f, b) - family(t, p - f, b) + qmm) / (4 * h2**2)
                d2 = np.maximum(d2, np.abs(sec))
    lip_coord = float(d1.sum(axis=1).max()) if G else 0.0
    c1 = norm + lip_coord
    c2 = c1 + (float(d2.sum(axis=1).max()) if G else 0.0)
    # clean finite-difference noise on flat families
    if lip_coord < 1e-7:
        lip_coord, c1 = 0.0, norm
    if c2 - c1 < 1e-4 * max(1.0, c1):
        c2 = c1
    return {"norm": norm, "lip": lip, "lip_coord": lip_coord, "c1": c1, "c2": c2}


def pressure_resistance_rates(R: PayoffFamily, kappa: float) -> RateFamily:
    """Q_ij(x, b) = kappa x_j (R_j - R_i)^+ off the diagonal."""
    if not np.isfinite(kappa) or kappa < 0:
        raise ValidationError("interaction intensity must be finite and nonnegative")

    def evaluator(t, x, b):
        r = R(x, b)
        gap = np.maximum(r[..., None, :] - r[..., :, None], 0.0)
        return kappa * x[..., None, :] * gap

    return RateFamily(evaluator, R.d, "lipschitz", vectorized=R.vectorized, name="pressure-resistance")


def imitation_rates(R: PayoffFamily, kappa: float, baseline: float) -> RateFamily:
    """Smooth imitation rates Q_ij = kappa x_j (baseline + R_j - R_i) / 2.

    Their kinetic equation coincides with the pressure-resistance one for the
    same kappa, but the rates are as smooth as R. ``baseline`` must dominate
    every payoff gap so that the rates stay nonnegative.
    """

    def evaluator(t, x, b):
        r = R(x, b)
        gap = baseline + r[..., None, :] - r[..., :, None]
        if np.any(gap < -1e-12):
            raise NumericalError("imitation baseline smaller than a payoff gap", state=x)
        return 0.5 * kappa * x[..., None, :] * np.maximum(gap, 0.0)

    return RateFamily(evaluator, R.d, "C2", vectorized=R.vectorized, name="imitation")


def controlled(family: RateFamily, policy: Callable) -> RateFamily:
    """Freeze the control of ``family`` to b = policy(t, x)."""

    def evaluator(t, x, b):
        return family(t, x, policy(t, x))

    return RateFamily(evaluator, family.d, family.regularity, family.declared_bounds,
                      family.time_homogeneous, vectorized=family.vectorized, name=family.name)


def stack_controls(b: Sequence) -> np.ndarray:
    return np.atleast_1d(np.asarray(b, dtype=float))
