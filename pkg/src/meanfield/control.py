"""Shapley-operator value iteration, zero-sum values, HJB residuals and turnpike checks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .chain import LatticeIndex, ensemble_ctmc, generator_matrix, uniformized_apply
from .core import ControlSet, NumericalError, RateFamily, Trajectory, ValidationError
from .kinetic import integrate_kinetic
from .principal import golden_section_max

DEFAULT_M = {2: 64, 3: 32}


def default_resolution(d: int) -> int:
    return DEFAULT_M.get(d, 16)


# ---------------------------------------------------------------- lattices

class SimplexLattice:
    """Nodes of the simplex with coordinates in Z/M and Freudenthal interpolation.

    Node order matches ``LatticeIndex(d, M)``, so a field on the M-lattice
    lines up with the state space of the M-agent chain.
    """

    def __init__(self, d: int, M: int):
        if d < 1 or M < 1:
            raise ValidationError("lattice needs d >= 1 and M >= 1")
        self.d, self.M = int(d), int(M)
        self.index = LatticeIndex(self.d, self.M)
        self.points = self.index.points
        self.blocks = [self.d]

    def __len__(self):
        return len(self.points)

    @property
    def spacing(self) -> float:
        return 1.0 / self.M

    def metadata(self) -> dict:
        return {"kind": "simplex", "d": self.d, "M": self.M, "nodes": len(self)}

    def interp_weights(self, X):
        """Vertex indices (n, d) and barycentric weights (n, d) of the cells holding X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        d, M = self.d, self.M
        if X.shape[1] != d:
            raise ValidationError(f"expected points of dimension {d}")
        if np.any(X < -1e-9) or np.any(np.abs(X.sum(axis=1) - 1.0) > 1e-9):
            raise NumericalError("interpolation query outside the simplex")
        if d == 1:
            return np.zeros((n, 1), dtype=np.int64), np.ones((n, 1))
        tail = np.cumsum(X[:, ::-1], axis=1)[:, ::-1]
        z = np.clip(M * tail[:, 1:], 0.0, M)
        z = np.minimum.accumulate(z, axis=1)
        base = np.minimum(np.floor(z), M - 1)
        f = z - base
        order = np.argsort(-f, axis=1, kind="stable")
        fs = np.take_along_axis(f, order, axis=1)
        w = np.empty((n, d))
        w[:, 0] = 1.0 - fs[:, 0]
        w[:, 1:-1] = fs[:, :-1] - fs[:, 1:]
        w[:, -1] = fs[:, -1]
        verts = np.empty((n, d, d - 1))
        verts[:, 0] = base
        rows = np.arange(n)
        for i in range(1, d):
            verts[:, i] = verts[:, i - 1]
            verts[rows, i, order[:, i - 1]] += 1
        verts = verts.astype(np.int64)
        counts = np.empty((n, d, d), dtype=np.int64)
        counts[..., 0] = M - verts[..., 0]
        counts[..., 1:-1] = verts[..., :-1] - verts[..., 1:]
        counts[..., -1] = verts[..., -1]
        idx = self.index.index(counts)
        return idx, np.clip(w, 0.0, 1.0)


class ProductLattice:
    """Product of two simplex lattices for states (x, y) of two separate pools."""

    def __init__(self, first: SimplexLattice, second: SimplexLattice):
        self.parts = (first, second)
        n1, n2 = len(first), len(second)
        P1 = np.repeat(first.points, n2, axis=0)
        P2 = np.tile(second.points, (n1, 1))
        self.points = np.hstack([P1, P2])
        self.d = first.d + second.d
        self.blocks = [first.d, second.d]

    def __len__(self):
        return len(self.points)

    @property
    def spacing(self) -> float:
        return max(p.spacing for p in self.parts)

    def metadata(self) -> dict:
        return {"kind": "product", "parts": [p.metadata() for p in self.parts],
                "nodes": len(self)}

    def combine(self, i1, w1, i2, w2):
        n2 = len(self.parts[1])
        idx = (i1[:, :, None] * n2 + i2[:, None, :]).reshape(i1.shape[0], -1)
        w = (w1[:, :, None] * w2[:, None, :]).reshape(i1.shape[0], -1)
        return idx, w

    def interp_weights(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d1 = self.parts[0].d
        i1, w1 = self.parts[0].interp_weights(X[:, :d1])
        i2, w2 = self.parts[1].interp_weights(X[:, d1:])
        return self.combine(i1, w1, i2, w2)


def _lattice_from_meta(meta: dict):
    if meta["kind"] == "simplex":
        return SimplexLattice(meta["d"], meta["M"])
    return ProductLattice(*[_lattice_from_meta(m) for m in meta["parts"]])


@dataclass
class ValueField:
    lattice: object
    values: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.lattice),):
            raise ValidationError(f"field needs {len(self.lattice)} values")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("value field has non-finite entries")

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        idx, w = self.lattice.interp_weights(X)
        out = np.sum(w * self.values[idx], axis=1)
        return float(out[0]) if single else out

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    @classmethod
    def from_function(cls, lattice, fun: Callable) -> "ValueField":
        return cls(lattice, _eval_batch(fun, lattice.points))

    def to_csv(self, filename) -> None:
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.lattice.d)] + ["value"])
            for p, v in zip(self.lattice.points, self.values):
                w.writerow([repr(float(c)) for c in p] + [repr(float(v))])

    def to_json(self, filename=None):
        doc = {"lattice": self.lattice.metadata(), "step": self.step,
               "values": [float(v) for v in self.values]}
        if filename is None:
            return doc
        with open(filename, "w") as fh:
            json.dump(doc, fh)
        return doc

    @classmethod
    def from_json(cls, doc) -> "ValueField":
        if not isinstance(doc, dict):
            with open(doc) as fh:
                doc = json.load(fh)
        return cls(_lattice_from_meta(doc["lattice"]), doc["values"], doc.get("step", 0))


def _eval_batch(fun: Callable, X, *args) -> np.ndarray:
    """Evaluate fun on a batch of points, falling back to a loop for scalar functions."""
    try:
        out = np.asarray(fun(X, *args), dtype=float)
        if out.shape == (X.shape[0],):
            return out
    except (ValueError, TypeError, IndexError):
        pass
    return np.array([float(fun(x, *args)) for x in X])


# ---------------------------------------------------------------- problem spec

@dataclass
class SeparatedDynamics:
    """Two independent pools: x driven by ``first`` with b1, y by ``second`` with b2."""

    first: RateFamily
    second: RateFamily


@dataclass
class ControlProblemSpec:
    """Running payoff B(x, b), terminal V0, step tau, horizon steps, discount beta.

    ``controls`` is a ControlSet (gridded with ``points_per_axis``) or an
    array of admissible control points. For zero-sum problems ``controls2``
    holds the second player's controls and B, the dynamics and the lattice
    see the concatenated profile (b1, b2).
    """

    B: Callable
    family: object
    tau: float
    steps: int = 1
    beta: float = 1.0
    controls: object = None
    controls2: object = None
    terminal: Optional[Callable] = None
    points_per_axis: int = 17
    refine: bool = False
    ode_tol: Optional[float] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValidationError("tau must be nonnegative")
        if not (0 < self.beta <= 1):
            raise ValidationError("discount beta must lie in (0, 1]")
        if self.steps < 0:
            raise ValidationError("steps must be nonnegative")

    def grid(self, which: int = 1) -> np.ndarray:
        c = self.controls if which == 1 else self.controls2
        if c is None:
            return np.zeros((1, 0))
        if isinstance(c, ControlSet):
            return c.grid(self.points_per_axis)
        c = np.asarray(c, dtype=float)
        return c.reshape(len(c), -1) if c.ndim < 2 else c

    @property
    def zero_sum(self) -> bool:
        return self.controls2 is not None

    def profiles(self) -> np.ndarray:
        """All control profiles, player-one major order for zero-sum problems."""
        g1 = self.grid(1)
        if not self.zero_sum:
            return g1
        g2 = self.grid(2)
        return np.array([np.concatenate([a, b]) for a in g1 for b in g2]).reshape(
            len(g1) * len(g2), -1)

    def terminal_field(self, lattice) -> ValueField:
        if self.terminal is None:
            return ValueField(lattice, np.zeros(len(lattice)))
        return ValueField.from_function(lattice, self.terminal)


def _payoff_table(spec: ControlProblemSpec, lattice, profiles) -> np.ndarray:
    key = ("B", id(lattice))
    if key not in spec._cache:
        spec._cache[key] = np.array([_eval_batch(spec.B, lattice.points, b) for b in profiles])
    return spec._cache[key]


def _flow_endpoints(family: RateFamily, X, b, tau: float, tol: float) -> np.ndarray:
    if tau == 0:
        return X.copy()
    traj = integrate_kinetic(family, X, (lambda t, x: b), tau, tol, record_steps=False)
    return traj.final


def _block_table(family, lattice: SimplexLattice, controls, tau, tol):
    idx, w = [], []
    for b in controls:
        Y = _flow_endpoints(family, lattice.points, b, tau, tol)
        i, ww = lattice.interp_weights(Y)
        idx.append(i)
        w.append(ww)
    return np.array(idx), np.array(w)


def _transition_table(spec: ControlProblemSpec, lattice):
    """Interpolation stencils of X(tau, node, b) for every control profile."""
    key = ("flow", id(lattice), spec.tau)
    if key in spec._cache:
        return spec._cache[key]
    tol = spec.ode_tol if spec.ode_tol is not None else max(spec.tau * 1e-8, 1e-14)
    if isinstance(spec.family, SeparatedDynamics):
        if not isinstance(lattice, ProductLattice):
            raise ValidationError("separated dynamics need a product lattice")
        g1, g2 = spec.grid(1), spec.grid(2)
        L1, L2 = lattice.parts
        i1, w1 = _block_table(spec.family.first, L1, g1, spec.tau, tol)
        i2, w2 = _block_table(spec.family.second, L2, g2, spec.tau, tol)
        n1, n2 = len(L1), len(L2)
        rows1 = np.repeat(np.arange(n1), n2)
        rows2 = np.tile(np.arange(n2), n1)
        idx, w = [], []
        for a in range(len(g1)):
            for c in range(len(g2)):
                ii, ww = lattice.combine(i1[a][rows1], w1[a][rows1], i2[c][rows2], w2[c][rows2])
                idx.append(ii)
                w.append(ww)
        table = (np.array(idx), np.array(w))
    else:
        table = _block_table(spec.family, lattice, spec.profiles(), spec.tau, tol)
    spec._cache[key] = table
    return table


def _candidates(V: ValueField, spec: ControlProblemSpec) -> np.ndarray:
    """tau B(x, b) + beta V(X(tau, x, b)) for every profile b (rows) and node (columns)."""
    lattice = V.lattice
    profiles = spec.profiles()
    Bt = _payoff_table(spec, lattice, profiles)
    idx, w = _transition_table(spec, lattice)
    cont = np.sum(w * V.values[idx], axis=2)
    return spec.tau * Bt + spec.beta * cont


def _refine_nodes(V: ValueField, spec: ControlProblemSpec, grid, best, vals):
    """Golden-section polish of a one-dimensional control around the best grid point."""
    box = spec.controls
    step = (box.upper[0] - box.lower[0]) / max(len(grid) - 1, 1)
    tol = spec.ode_tol if spec.ode_tol is not None else max(spec.tau * 1e-8, 1e-14)
    out = vals.copy()
    for i, x in enumerate(V.lattice.points):
        b0 = grid[best[i], 0]
        lo, hi = max(box.lower[0], b0 - step), min(box.upper[0], b0 + step)

        def f(z):
            b = np.array([z])
            y = _flow_endpoints(spec.family, x[None, :], b, spec.tau, tol)
            return spec.tau * float(spec.B(x, b)) + spec.beta * float(V(y)[0])

        _, fz = golden_section_max(f, lo, hi, 1e-8, polish=False)
        out[i] = max(out[i], fz)
    return out


def shapley_step_limit(V: ValueField, spec: ControlProblemSpec) -> ValueField:
    """One application of SV(x) = max_b [tau B(x,b) + beta V(X(tau, x, b))] on the lattice.

    The maximum runs over the control grid (first maximizer wins, so ties
    go to the lexicographically smallest control); with ``spec.refine`` a
    one-dimensional box is polished by golden section.
    """
    if spec.zero_sum:
        raise ValidationError("use zero_sum_values for two-player problems")
    if spec.tau == 0:
        return ValueField(V.lattice, V.values.copy(), V.step + 1)
    W = _candidates(V, spec)
    best = np.argmax(W, axis=0)
    vals = W[best, np.arange(W.shape[1])]
    if spec.refine and isinstance(spec.controls, ControlSet) and spec.controls.dim == 1:
        vals = _refine_nodes(V, spec, spec.grid(1), best, vals)
    return ValueField(V.lattice, vals, V.step + 1)


def optimal_controls(V: ValueField, spec: ControlProblemSpec) -> np.ndarray:
    """Grid maximizer at each node for the step applied to V."""
    W = _candidates(V, spec)
    return spec.grid(1)[np.argmax(W, axis=0)]


# ---------------------------------------------------------------- chain operator

def chain_step_bound(family: RateFamily, N: int, controls) -> float:
    """1 / (N max_b ||Q||) over the lattice, the step limit for the discrete chain."""
    lat = LatticeIndex(family.d, N)
    qmax = 0.0
    for b in controls:
        Q = family(0.0, lat.points, b)
        qmax = max(qmax, float(np.max(-np.diagonal(Q, axis1=-2, axis2=-1))))
    return np.inf if qmax == 0 else 1.0 / (N * qmax)


def shapley_step_chain(V, spec: ControlProblemSpec, N: int, mode: str = "exact",
                       replicas: int = 1000, seed=None, strict_step: bool = False):
    """S[N]V(x) = max_b [tau B(x,b) + beta E V(X_N(tau, x, b))] on the N-agent lattice.

    ``V`` is a ValueField on SimplexLattice(d, N) or a plain value vector
    in the same order. Exact mode returns the new values; Monte Carlo mode
    returns (values, stderr) where stderr belongs to the maximizing control.
    """
    family = spec.family
    if not isinstance(family, RateFamily):
        raise ValidationError("chain operator needs a single rate family")
    vals = V.values if isinstance(V, ValueField) else np.asarray(V, dtype=float)
    lat = LatticeIndex(family.d, N)
    if vals.shape != (len(lat),):
        raise ValidationError(f"values must live on the N={N} lattice ({len(lat)} nodes)")
    grid = spec.grid(1)
    if strict_step and spec.tau > chain_step_bound(family, N, grid):
        raise ValidationError("tau exceeds 1/(N ||Q||) for the chain operator")
    pts = lat.points
    Bt = np.array([_eval_batch(spec.B, pts, b) for b in grid])
    if mode == "exact":
        cont = []
        for b in grid:
            L, _ = generator_matrix(family, N, b=b, lattice=lat)
            cont.append(uniformized_apply(L, vals, spec.tau))
        W = spec.tau * Bt + spec.beta * np.array(cont)
        out = W[np.argmax(W, axis=0), np.arange(len(lat))]
        return ValueField(lat_field(family.d, N), out) if isinstance(V, ValueField) else out
    if mode != "monte_carlo":
        raise ValidationError(f"unknown chain mode {mode!r}")
    rng = np.random.default_rng(seed)
    means = np.empty((len(grid), len(lat)))
    errs = np.empty_like(means)
    for c, b in enumerate(grid):
        for i, n0 in enumerate(lat.states):
            counts = ensemble_ctmc(family, n0, [spec.tau], replicas, rng,
                                   b_policy=lambda t, x, b=b: b)[:, 0, :]
            f = vals[lat.index(counts)]
            means[c, i] = f.mean()
            errs[c, i] = f.std(ddof=1) / np.sqrt(replicas) if replicas > 1 else 0.0
    W = spec.tau * Bt + spec.beta * means
    best = np.argmax(W, axis=0)
    cols = np.arange(len(lat))
    return W[best, cols], spec.beta * errs[best, cols]


def lat_field(d: int, N: int) -> SimplexLattice:
    return SimplexLattice(d, N)


def chain_value(spec: ControlProblemSpec, N: int, steps: Optional[int] = None) -> np.ndarray:
    """n-step chain value S[N]^n V0 by exact uniformization."""
    lat = SimplexLattice(spec.family.d, N)
    V = spec.terminal_field(lat).values
    for _ in range(spec.steps if steps is None else steps):
        V = shapley_step_chain(V, spec, N)
    return V


# ---------------------------------------------------------------- iteration

@dataclass
class IterationLog:
    sup_change: list = field(default_factory=list)
    bound: list = field(default_factory=list)
    converged: bool = True

    def to_csv(self, filename) -> None:
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "sup_change", "tail_bound"])
            for k, (c, b) in enumerate(zip(self.sup_change, self.bound), start=1):
                w.writerow([k, repr(float(c)), repr(float(b))])


def payoff_sup(spec: ControlProblemSpec, lattice) -> float:
    return float(np.max(np.abs(_payoff_table(spec, lattice, spec.profiles()))))


def value_iterate(V0: ValueField, spec: ControlProblemSpec, mode: str = "finite",
                  tol: float = 1e-10, max_iter: int = 100_000, history: bool = False):
    """Iterate the limit Shapley operator.

    Finite mode applies it exactly ``spec.steps`` times. Infinite mode needs
    beta < 1 and stops once beta^n 2||B|| / (1 - beta) < tol and the
    sup-norm change < tol. Returns (field, log) or, with ``history``,
    (field, log, list of all iterates starting from V0).
    """
    log = IterationLog()
    V = V0
    fields = [V0] if history else None
    if mode == "finite":
        n = spec.steps
    elif mode == "infinite":
        if spec.beta >= 1:
            raise ValidationError("infinite-horizon iteration needs beta < 1")
        n = max_iter
    else:
        raise ValidationError(f"unknown iteration mode {mode!r}")
    Bsup = payoff_sup(spec, V0.lattice) if mode == "infinite" else 0.0
    for k in range(1, n + 1):
        W = shapley_step_limit(V, spec)
        change = float(np.max(np.abs(W.values - V.values)))
        V = W
        log.sup_change.append(change)
        if fields is not None:
            fields.append(V)
        if mode == "infinite":
            tail = spec.beta ** k * 2 * Bsup / (1 - spec.beta)
            log.bound.append(tail)
            if tail < tol and change < tol:
                break
        else:
            log.bound.append(0.0)
    else:
        if mode == "infinite":
            log.converged = False
    return (V, log, fields) if history else (V, log)


def propagation_bound(spec: ControlProblemSpec, V0: ValueField, n: int) -> float:
    """n tau ||B|| + ||V0||, the sup-norm growth allowed after n steps."""
    return n * spec.tau * payoff_sup(spec, V0.lattice) + V0.sup


# ---------------------------------------------------------------- zero-sum

def zero_sum_step(V: ValueField, spec: ControlProblemSpec):
    """(S_up V, S_low V) with S_up = min_{b1} max_{b2}, S_low = max_{b2} min_{b1}."""
    W = _candidates(V, spec)
    n1, n2 = len(spec.grid(1)), len(spec.grid(2))
    W = W.reshape(n1, n2, -1)
    up = W.max(axis=1).min(axis=0)
    low = W.min(axis=0).max(axis=0)
    return ValueField(V.lattice, up, V.step + 1), ValueField(V.lattice, low, V.step + 1)


def zero_sum_values(spec: ControlProblemSpec, lattice, V0: Optional[ValueField] = None):
    """Upper and lower values after ``spec.steps`` iterations on exhaustive control grids."""
    if not spec.zero_sum:
        raise ValidationError("zero-sum values need controls2")
    V0 = V0 if V0 is not None else spec.terminal_field(lattice)
    up, low = V0, V0
    for _ in range(spec.steps):
        up = zero_sum_step(up, spec)[0]
        low = zero_sum_step(low, spec)[1]
    if np.any(up.values < low.values - 1e-12):
        raise NumericalError("upper value fell below lower value")
    return up, low


# ---------------------------------------------------------------- HJB residual

@dataclass
class ResidualReport:
    field: np.ndarray
    sup: float
    interior_sup: float


def _directional(V: ValueField, X, k: int, h: float) -> np.ndarray:
    """Central (one-sided at faces) difference of V along e_k - e_{d-1}."""
    d = X.shape[1]
    u = np.zeros(d)
    u[k], u[d - 1] = 1.0, -1.0
    fwd_ok = X[:, d - 1] >= h - 1e-12
    bwd_ok = X[:, k] >= h - 1e-12
    out = np.zeros(len(X))
    Xf = np.where(fwd_ok[:, None], X + h * u, X)
    Xb = np.where(bwd_ok[:, None], X - h * u, X)
    Xf = np.clip(Xf, 0.0, None)
    Xb = np.clip(Xb, 0.0, None)
    vf, vb, v0 = V(Xf), V(Xb), V.values
    both = fwd_ok & bwd_ok
    out[both] = (vf[both] - vb[both]) / (2 * h)
    only_f = fwd_ok & ~bwd_ok
    out[only_f] = (vf[only_f] - v0[only_f]) / h
    only_b = bwd_ok & ~fwd_ok
    out[only_b] = (v0[only_b] - vb[only_b]) / h
    return out


def hjb_residual(fields, spec: ControlProblemSpec) -> ResidualReport:
    """Residual (V_{n-1} - V_n)/tau + max_b [B + <grad V_{n-1}, x Q(x, b)>] at each node.

    ``fields`` is a sequence of consecutive iterates (only the last two are
    used) or a single field, taken as time-constant.
    """
    if isinstance(fields, ValueField):
        prev = cur = fields
    else:
        prev, cur = fields[-2], fields[-1]
    lat = cur.lattice
    if not isinstance(lat, SimplexLattice):
        raise ValidationError("HJB residual is implemented on simplex lattices")
    X = lat.points
    d = lat.d
    h = lat.spacing
    grads = np.array([_directional(prev, X, k, h) for k in range(d - 1)])
    dt = (prev.values - cur.values) / spec.tau if spec.tau > 0 else np.zeros(len(X))
    best = np.full(len(X), -np.inf)
    for b in spec.grid(1):
        g = spec.family.drift(0.0, X, b)
        ham = _eval_batch(spec.B, X, b) + np.sum(grads.T * g[:, :d - 1], axis=1)
        best = np.maximum(best, ham)
    res = dt + best
    interior = np.all(X > 1e-12, axis=1)
    isup = float(np.max(np.abs(res[interior]))) if interior.any() else 0.0
    return ResidualReport(res, float(np.max(np.abs(res))), isup)


# ---------------------------------------------------------------- turnpike

@dataclass
class TurnpikeReport:
    tau_outside: float
    bound: float
    passed: bool
    distance0: float


def _l1(X, x_star) -> np.ndarray:
    return np.abs(np.atleast_2d(X) - np.asarray(x_star, dtype=float)).sum(axis=1)


def time_outside(traj: Trajectory, x_star, eps: float) -> float:
    """Lebesgue time the piecewise-linear sampled path spends with l1 distance > eps."""
    t = np.asarray(traj.t, dtype=float)
    r = _l1(traj.x, x_star) - eps
    total = 0.0
    for k in range(len(t) - 1):
        a, b, dt = r[k], r[k + 1], t[k + 1] - t[k]
        if a > 0 and b > 0:
            total += dt
        elif a > 0 or b > 0:
            total += dt * max(a, b) / (abs(a) + abs(b))
    return total


def turnpike_bound(distance0: float, eps: float, params: dict) -> float:
    alpha, lam = params["alpha"], params["lambda"]
    gap = params.get("sup_S_T", 0.0) - params.get("S_T_star", 0.0)
    out = distance0 ** alpha / lam
    if gap != 0:
        out += gap / params["J_tilde"]
    return eps ** (-alpha) * out


def turnpike_report(traj: Trajectory, x_star, eps: float, params: dict) -> TurnpikeReport:
    """Time outside the l1 eps-ball around x* against eps^-a [|x-x*|^a / lam + gap / J]."""
    r0 = float(_l1(traj.x[0], x_star)[0])
    tau = time_outside(traj, x_star, eps)
    bound = turnpike_bound(r0, eps, params)
    return TurnpikeReport(tau, bound, bool(tau <= bound), r0)


@dataclass
class TurnpikeFit:
    lam: float
    lam_lsq: float
    alpha: float
    J_tilde: float
    lam_residual: float
    power_residual: float
    rest_residual: float
    max_condition_holds: bool

    def params(self, sup_S_T: float = 0.0, S_T_star: float = 0.0) -> dict:
        return {"alpha": self.alpha, "J_tilde": self.J_tilde, "lambda": self.lam,
                "sup_S_T": sup_S_T, "S_T_star": S_T_star}


def fit_turnpike(probes: Sequence[Trajectory], x_star, J: Callable, rhs: Optional[Callable] = None,
                 floor: float = 1e-9) -> TurnpikeFit:
    """Fit the contraction rate and the power law of the running payoff from probe paths.

    lam is the envelope min_t -log(r(t)/r(0))/t over all probes (so that
    r(t) <= r(0) e^{-lam t} holds on them), lam_lsq the least-squares slope
    of log r. alpha and J_tilde come from a log-log least-squares fit of
    |J(x) - J(x*)| against r = |x - x*|_1 on the probe samples.
    """
    x_star = np.asarray(x_star, dtype=float)
    env, ts, logs = np.inf, [], []
    rs, js = [], []
    J_star = float(J(x_star))
    above = 0
    for tr in probes:
        r = _l1(tr.x, x_star)
        t = np.asarray(tr.t)
        ok = (r > floor) & (t > 0)
        if r[0] <= floor:
            continue
        rate = -np.log(r[ok] / r[0]) / t[ok]
        if rate.size:
            env = min(env, float(rate.min()))
        ts.append(t[r > floor])
        logs.append(np.log(r[r > floor] / r[0]))
        for x, rr in zip(tr.x, r):
            if rr > floor:
                jv = float(J(x)) - J_star
                above += jv > 1e-12
                if abs(jv) > 1e-14:
                    rs.append(rr)
                    js.append(abs(jv))
    T, Lg = np.concatenate(ts), np.concatenate(logs)
    lam_lsq = float(-np.sum(T * Lg) / np.sum(T * T))
    lam_res = float(np.sqrt(np.mean((Lg + lam_lsq * T) ** 2)))
    A = np.column_stack([np.ones(len(rs)), np.log(rs)])
    coef, *_ = np.linalg.lstsq(A, np.log(js), rcond=None)
    pres = float(np.sqrt(np.mean((A @ coef - np.log(js)) ** 2)))
    rest = float(np.abs(rhs(0.0, x_star)).sum()) if rhs is not None else float("nan")
    return TurnpikeFit(env, lam_lsq, float(coef[1]), float(np.exp(coef[0])), lam_res, pres,
                       rest, above == 0)
