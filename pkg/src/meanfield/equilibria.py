"""Rest points, their stability, approximate Nash checks and long-time behavior."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .chain import _rng, ensemble_paths
from .core import (PayoffFamily, PopulationState, PrincipalSpec, RateFamily, Trajectory,
                   ValidationError, as_simplex)
from .kinetic import PiecewiseTwoStateRates
from .principal import BestResponseMap, best_response, best_response_closed_form

RESIDUAL_TOL = 1e-6
DEDUPE_TOL = 1e-6
SVD_TOL = 1e-8
FD_STEP = 1e-6
EIG_TOL = 1e-8


@dataclass
class RestPoint:
    x: np.ndarray
    zero_set: tuple
    residual: float
    kinetic_residual: float
    classification: str
    stability: str = "untested"
    eigenvalues: Optional[np.ndarray] = None
    omega_hat: Optional[bool] = None
    omega_hat_margin: Optional[float] = None
    b: Optional[np.ndarray] = None

    @property
    def support(self) -> tuple:
        return tuple(k for k in range(len(self.x)) if k not in self.zero_set)

    def to_dict(self) -> dict:
        eig = None if self.eigenvalues is None else [
            [float(np.real(e)), float(np.imag(e))] for e in self.eigenvalues]
        return {"x": [float(v) for v in self.x], "support": list(self.support),
                "zero_set": list(self.zero_set), "residual": float(self.residual),
                "kinetic_residual": float(self.kinetic_residual),
                "classification": self.classification, "stability": self.stability,
                "eigenvalues": eig, "omega_hat": self.omega_hat,
                "omega_hat_margin": self.omega_hat_margin,
                "b": None if self.b is None else [float(v) for v in np.atleast_1d(self.b)]}


@dataclass
class RestFamily:
    """A continuum of rest points on one face, {x on face : normals . x = offsets}."""

    face: tuple
    rank: int
    dimension: int
    normals: np.ndarray
    offsets: np.ndarray
    affine: bool
    points: np.ndarray
    label: str = ""

    def contains(self, x, tol: float = DEDUPE_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        if any(x[k] > tol for k in range(len(x)) if k not in self.face):
            return False
        if not self.affine:
            return bool(np.min(np.abs(self.points - x).sum(axis=1)) <= tol)
        if self.normals.size == 0:
            return True
        return bool(np.all(np.abs(self.normals @ x - self.offsets) <= tol))

    def to_dict(self) -> dict:
        return {"face": list(self.face), "rank": self.rank, "dimension": self.dimension,
                "normals": self.normals.tolist(), "offsets": self.offsets.tolist(),
                "affine": self.affine, "label": self.label,
                "points": self.points.tolist()}


class RestPointSet(list):
    """List of RestPoint plus continuum families and per-face solver status."""

    def __init__(self, points=(), families=(), face_status=None):
        super().__init__(points)
        self.families = list(families)
        self.face_status = dict(face_status or {})

    @property
    def unsolved(self) -> list:
        return [f for f, s in self.face_status.items() if s == "unsolved"]

    def to_dict(self) -> dict:
        return {"rest_points": [p.to_dict() for p in self],
                "families": [f.to_dict() for f in self.families],
                "face_status": {",".join(map(str, f)): s for f, s in self.face_status.items()}}


def _replicator(R: PayoffFamily, brm: BestResponseMap, kappa: float) -> Callable:
    def rhs(x):
        x = np.asarray(x, dtype=float)
        r = R(x, brm(x))
        return kappa * x * (r - np.sum(x * r, axis=-1, keepdims=True))
    return rhs


def _stick(u):
    """Stick-breaking map from (0,1)^m to the interior of the m-simplex."""
    x, rest = [], 1.0
    for v in u:
        x.append(rest * v)
        rest *= 1.0 - v
    x.append(rest)
    return np.array(x)


def tangent_jacobian(rhs: Callable, x, h: float = FD_STEP) -> np.ndarray:
    """Jacobian of a simplex vector field in the basis e_k - e_d (central differences)."""
    x = np.asarray(x, dtype=float)
    d = x.size
    J = np.empty((d - 1, d - 1))
    for l in range(d - 1):
        e = np.zeros(d)
        e[l], e[-1] = 1.0, -1.0
        J[:, l] = (rhs(x + h * e)[:-1] - rhs(x - h * e)[:-1]) / (2 * h)
    return J


def classify_stability(eig) -> str:
    if eig.size == 0:
        return "stable"
    top = float(np.max(np.real(eig)))
    if top > EIG_TOL:
        return "unstable"
    if top < -EIG_TOL:
        return "stable"
    return "marginal"


def _face_solve(G: Callable, m: int, starts_per_axis: int, tol: float, max_iter: int = 100,
                h: float = 1e-6):
    """Damped Newton for G(y) = 0 on {y > 0, sum y < 1} from a grid of starts.

    Returns (roots, jacobians, stalled), with ``stalled`` counting starts that
    stopped in the interior with a residual above ``tol``.
    """
    grid = np.linspace(0.1, 0.9, starts_per_axis)
    roots, jacs, stalled = [], [], 0
    for u in itertools.product(grid, repeat=m):
        y = _stick(u)[:m]
        g = G(y)
        res = np.abs(g).max()
        ok = False
        for _ in range(max_iter):
            J = np.empty((m, m))
            for l in range(m):
                e = np.zeros(m)
                e[l] = h
                J[:, l] = (G(y + e) - G(y - e)) / (2 * h)
            step = -np.linalg.lstsq(J, g, rcond=None)[0]
            # keep the iterate inside the face
            lim = 1.0
            neg = step < 0
            if neg.any():
                lim = min(lim, 0.99 * np.min(y[neg] / -step[neg]))
            s = step.sum()
            if s > 0:
                lim = min(lim, 0.99 * (1.0 - y.sum()) / s)
            lam, improved = lim, False
            while lam > 1e-10:
                yn = y + lam * step
                gn = G(yn)
                rn = np.abs(gn).max()
                if rn < res:
                    y, g, res, improved = yn, gn, rn, True
                    break
                lam *= 0.5
            if res <= 1e-13 or not improved:
                break
        if res <= tol:
            ok = True
        inner = min(y.min(), 1.0 - y.sum()) > 1e-7
        if ok and inner:
            J = np.empty((m, m))
            for l in range(m):
                e = np.zeros(m)
                e[l] = h
                J[:, l] = (G(y + e) - G(y - e)) / (2 * h)
            roots.append(y.copy())
            jacs.append(J)
        elif inner:
            stalled += 1
    return roots, jacs, stalled


def find_rest_points(R: PayoffFamily, brm: Optional[BestResponseMap] = None, d: Optional[int] = None,
                     options: Optional[dict] = None) -> RestPointSet:
    """Enumerate rest points of the pressure-resistance flow face by face.

    On each face (support S) the equal-payoff system R_i = R_last for
    i in S is solved by damped Newton from a grid of starts. Rank-deficient
    solutions are followed along their null directions; when the whole
    direction solves the system the face carries an affine family.
    """
    opts = {"starts_per_axis": 5, "tol": RESIDUAL_TOL, "dedupe": DEDUPE_TOL, "svd_tol": SVD_TOL,
            "kappa": 1.0, "stability": True, "rhs": None}
    opts.update(options or {})
    d = R.d if d is None else int(d)
    if d > 6:
        raise ValidationError("find_rest_points supports d <= 6")
    brm = brm or BestResponseMap.constant(np.zeros(0))
    if opts["rhs"] is not None:
        # the option takes the kinetic form rhs(t, x) of an autonomous flow
        given = opts["rhs"]
        rhs = lambda x: np.asarray(given(0.0, x), dtype=float)
    else:
        rhs = _replicator(R, brm, float(opts["kappa"]))

    def payoffs(x):
        return np.asarray(R(x, brm(x)), dtype=float)

    points, families, status = [], [], {}
    faces = [S for size in range(d, 1, -1) for S in itertools.combinations(range(d), size)]
    for S in faces:
        m = len(S) - 1

        def embed(y, S=S):
            x = np.zeros(d)
            x[list(S[:-1])] = y
            x[S[-1]] = 1.0 - y.sum()
            return x

        def G(y, S=S):
            r = payoffs(embed(y))
            return r[list(S[:-1])] - r[S[-1]]

        roots, jacs, stalled = _face_solve(G, m, int(opts["starts_per_axis"]), opts["tol"])
        if roots:
            status[S] = "roots"
        elif stalled:
            status[S] = "unsolved"
        else:
            status[S] = "none-found"
        for y, J in zip(roots, jacs):
            x = embed(y)
            sv = np.linalg.svd(J, compute_uv=False)
            scale = max(1.0, sv.max()) if sv.size else 1.0
            rank = int(np.sum(sv > opts["svd_tol"] * scale))
            if rank < m:
                if any(f.contains(x, opts["dedupe"]) for f in families):
                    continue
                families.append(_follow_family(G, embed, y, J, rank, S, d, opts))
                continue
            if any(np.abs(p.x - x).sum() <= opts["dedupe"] for p in points):
                continue
            points.append(_make_point(x, rhs, payoffs, brm, "interior-equal-payoff"
                                      if len(S) == d else "boundary-mixed", opts))
    # points of smaller faces lying in the closure of a family
    for p in points:
        if any(f.contains(p.x, opts["dedupe"]) for f in families):
            p.classification = "plane-member"
    for k in range(d):
        x = np.zeros(d)
        x[k] = 1.0
        points.append(_make_point(x, rhs, payoffs, brm, "vertex", opts))
    return RestPointSet(points, families, status)


def _follow_family(G, embed, y0, J, rank, S, d, opts) -> RestFamily:
    _, _, Vt = np.linalg.svd(J)
    m = y0.size
    null = Vt[rank:]
    rows = Vt[:rank]
    samples = [embed(y0)]
    affine = True
    for v in null:
        for s in (-1.0, -0.5, 0.5, 1.0):
            # largest step along v that stays in the face, shrunk
            step = np.inf
            for comp, cy in zip(s * v, y0):
                if comp < 0:
                    step = min(step, cy / -comp)
            tot = (s * v).sum()
            if tot > 0:
                step = min(step, (1.0 - y0.sum()) / tot)
            step = 0.5 * min(step, 1.0)
            y = y0 + step * s * v
            if np.abs(G(y)).max() > opts["tol"]:
                affine = False
            else:
                samples.append(embed(y))
    normals = np.zeros((rank, d))
    for i, r in enumerate(rows):
        normals[i, list(S[:-1])] = r
    x0 = embed(y0)
    offsets = normals @ x0
    label = f"degenerate continuum, rank {rank}" if rank == 0 else f"affine continuum, rank {rank}"
    if not affine:
        label = f"nonaffine continuum, rank {rank}"
    return RestFamily(tuple(S), rank, m - rank, normals, offsets, affine, np.array(samples), label)


def _make_point(x, rhs, payoffs, brm, classification, opts) -> RestPoint:
    d = x.size
    zero = tuple(int(k) for k in np.nonzero(x <= 1e-12)[0])
    supp = [k for k in range(d) if k not in zero]
    r = payoffs(x)
    resid = float(np.ptp(r[supp])) if supp else 0.0
    kin = float(np.abs(rhs(x)).sum())
    omega_hat, margin = None, None
    if zero:
        margin = float(np.min(r[supp])) - float(np.max(r[list(zero)]))
        omega_hat = bool(margin >= -opts["tol"])
    point = RestPoint(x, zero, resid, kin, classification, omega_hat=omega_hat,
                      omega_hat_margin=margin, b=brm(x))
    if opts["stability"] and d > 1:
        eig = np.linalg.eigvals(tangent_jacobian(rhs, x))
        point.eigenvalues = eig
        point.stability = classify_stability(eig)
    return point


def verify_epsilon_nash(x_N, b, R: PayoffFamily, spec: Optional[PrincipalSpec] = None,
                        points_per_axis: int = 17) -> float:
    """Largest gain of a unilateral deviation, small players and principal joined."""
    if not isinstance(x_N, PopulationState):
        x_N = PopulationState(tuple(int(v) for v in x_N))
    n = np.asarray(x_N.n)
    N, d = x_N.N, x_N.d
    x = n / N
    b = np.atleast_1d(np.asarray(b, dtype=float))
    base = np.asarray(R(x, b), dtype=float)
    eps = 0.0
    for i in range(d):
        if n[i] < 1:
            continue
        for j in range(d):
            if j == i:
                continue
            y = x.copy()
            y[i] -= 1.0 / N
            y[j] += 1.0 / N
            gain = float(np.asarray(R(y, b), dtype=float)[j]) - float(base[i])
            eps = max(eps, gain)
    if spec is not None and spec.control_set.dim > 0:
        here = spec(x, b)
        grid_best = max(spec(x, g) for g in spec.control_set.grid(points_per_axis))
        refined = spec(x, best_response(spec, x, points_per_axis))
        eps = max(eps, max(grid_best, refined) - here)
    return max(eps, 0.0)


def sampled_payoff_lipschitz(R: PayoffFamily, brm: Optional[BestResponseMap] = None,
                             d: Optional[int] = None, resolution: int = 12, b=None) -> float:
    """Sampled l1 Lipschitz constant of x -> R_i(x, b), over lattice neighbours.

    With ``brm`` the composite x -> R_i(x, b*(x)) is included as well, and
    ``b`` (or the best responses on the grid) supplies the frozen controls.
    """
    from .core import simplex_grid

    d = R.d if d is None else d
    pts = simplex_grid(d, resolution)
    h = 1.0 / resolution
    controls = []
    if b is not None:
        controls.append(np.atleast_1d(b))
    if brm is not None:
        controls.extend({tuple(np.atleast_1d(brm(p))) for p in pts[:: max(1, len(pts) // 10)]})
    if not controls:
        controls = [None]
    best = 0.0
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            src = pts[pts[:, i] >= h - 1e-12]
            dst = src.copy()
            dst[:, i] -= h
            dst[:, j] += h
            for c in controls:
                cc = None if c is None else np.asarray(c, dtype=float)
                diff = np.abs(R(dst, cc) - R(src, cc)).max(axis=-1) / (2 * h)
                best = max(best, float(diff.max()))
            if brm is not None:
                diff = np.abs(R(dst, brm(dst)) - R(src, brm(src))).max(axis=-1) / (2 * h)
                best = max(best, float(diff.max()))
    return best


def lyapunov_value(model, x):
    """V(x) = (1 - lambda p(b*(x)))^2 for a proportional-fines model."""
    st = model.structured
    lam = float(model.params["lambda"])
    b = best_response_closed_form(model.principal, np.asarray(x, dtype=float))[..., 0]
    return (1.0 - lam * st.p(b)) ** 2


@dataclass
class LyapunovReport:
    values: np.ndarray
    max_increment: float
    passed: bool
    tol: float = 1e-9


def lyapunov_check(traj: Trajectory, model, tol: float = 1e-9) -> LyapunovReport:
    if "lambda" not in model.params:
        raise ValidationError("lyapunov_check needs a proportional-fines model")
    V = np.atleast_1d(lyapunov_value(model, traj.x))
    inc = float(np.max(np.diff(V))) if V.size > 1 else 0.0
    return LyapunovReport(V, inc, inc <= tol, tol)


def hawk_dove_equilibria(V, D, H, a=0.0, b=0.0) -> dict:
    """Interior rest points of the nonlinear hawk-dove replicator equation.

    Roots of (a-b)x^2 - (V-D-H-b)x + (V-D) = 0 in (0,1), where x is the hawk
    fraction; stability from the sign of the derivative of
    x(1-x)q(x) with q the quadratic above.
    """
    if V <= D:
        raise ValidationError(f"hawk-dove needs V > D (got V={V}, D={D})")
    A, Bc, C = a - b, -(V - D - H - b), V - D
    if A == 0:
        roots = [] if Bc == 0 else [-C / Bc]
    else:
        disc = Bc * Bc - 4 * A * C
        if disc < 0:
            roots = []
        elif disc == 0:
            roots = [-Bc / (2 * A)]
        else:
            sq = np.sqrt(disc)
            # cancellation-free pair
            qq = -0.5 * (Bc + np.copysign(sq, Bc))
            roots = sorted([qq / A, C / qq])
    inner = [float(r) for r in roots if 0.0 < r < 1.0]
    stab = []
    for r in inner:
        dq = 2 * A * r + Bc
        g1 = r * (1 - r) * dq
        stab.append("stable" if g1 < 0 else "unstable" if g1 > 0 else "marginal")
    label = {0: "no interior rest point", 1: "one interior rest point",
             2: "two interior rest points"}[len(inner)]
    if len(inner) == 2:
        label += f" (left {stab[0]}, right {stab[1]})"
    out = {"roots": inner, "stability": stab, "regime": label, "all_roots": [float(r) for r in roots]}
    if b == 0 and H < 0:
        s, c = V - D - H, V - D
        if a < -H:
            out["classical_regime"] = "a < -H: one interior root"
        elif a < s / 2:
            out["classical_regime"] = "-H < a < (V-D-H)/2: no interior roots"
        elif a < s * s / (4 * c):
            out["classical_regime"] = "(V-D-H)/2 < a < (V-D-H)^2/(4(V-D)): two interior roots"
        else:
            out["classical_regime"] = "a > (V-D-H)^2/(4(V-D)): no interior roots"
    return out


@dataclass
class OccupancyReport:
    empirical: float
    bound: float
    stderr: float
    passed: bool
    samples: int


def long_time_occupancy(final_states, V: Callable, v: float, r: float, eps_time: float,
                        V2_norm: float, Q_norm: float) -> OccupancyReport:
    """Empirical P(V(X(t)) > r v) against (1/r)(1 + (eps/v) ||V''|| ||Q||)."""
    xs = np.asarray(final_states, dtype=float)
    vals = np.array([float(V(x)) for x in xs])
    n = vals.size
    emp = float(np.mean(vals > r * v)) if n else 0.0
    bound = (1.0 / r) * (1.0 + eps_time / v * V2_norm * Q_norm)
    se = float(np.sqrt(max(emp * (1 - emp), 1.0 / n) / n)) if n else 0.0
    return OccupancyReport(emp, bound, se, emp <= bound + 3 * se, n)


# --- absorption of the proportional-fines chain -----------------------------

def fines_chain_paths(model, n0, horizon: float, replicas: int, seed=None) -> list:
    """Jump records of the best-response proportional-fines chain."""
    brm = model.best_response_map()
    return ensemble_paths(model.rate_family(), n0, horizon, replicas, seed, brm.policy())


def plane_level(model) -> Optional[float]:
    """f* with p(b_hat(f*)) = 1/lambda, or None when no plane exists."""
    st = model.structured
    lam = float(model.params["lambda"])
    f = st.fines

    def g(fb):
        return float(st.p(st.dp_inv(1.0 / (st.kappa_B * fb)))) - 1.0 / lam

    lo, hi = float(f.min()), float(f.max())
    if g(lo) > 0 or g(hi) < 0:
        return None
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


@dataclass
class AbsorptionReport:
    mode: str
    reached: np.ndarray
    left_after: np.ndarray
    monotone: np.ndarray
    passed: bool
    radius: float = 0.0
    target: object = None

    @property
    def fraction(self) -> float:
        return float(np.mean(self.reached & ~self.left_after))


def absorbing_check(paths: Sequence, model, plane: Optional[float] = None,
                    N: Optional[int] = None, vertex: Optional[int] = None) -> AbsorptionReport:
    """Check vertex absorption (``vertex`` given) or plane-neighbourhood absorption.

    ``paths`` are (times, counts) pairs. The plane neighbourhood is
    |fbar(x) - f*| <= 2 max_j f_j / N.
    """
    f = model.structured.fines
    R = len(paths)
    reached = np.zeros(R, bool)
    left = np.zeros(R, bool)
    mono = np.ones(R, bool)
    if vertex is not None:
        for k, (_, S) in enumerate(paths):
            at = S[:, vertex] == S[0].sum()
            if at.any():
                reached[k] = True
                first = int(np.argmax(at))
                left[k] = not at[first:].all()
            # activity only grows or only shrinks before absorption
            act = S @ np.arange(S.shape[1])
            steps = np.diff(act)
            mono[k] = bool(np.all(steps >= 0) or np.all(steps <= 0))
        return AbsorptionReport("vertex", reached, left, mono,
                                bool(reached.all() and not left.any() and mono.all()),
                                target=vertex)
    if plane is None:
        raise ValidationError("absorbing_check needs a plane level or a vertex")
    radius = 2.0 * f.max() / N
    for k, (_, S) in enumerate(paths):
        dist = np.abs((S / S[0].sum()) @ f - plane)
        inside = dist <= radius + 1e-12
        if inside.any():
            reached[k] = True
            first = int(np.argmax(inside))
            left[k] = not inside[first:].all()
            mono[k] = bool(np.all(np.diff(dist[:first + 1]) <= 1e-12))
        else:
            mono[k] = bool(np.all(np.diff(dist) <= 1e-12))
    return AbsorptionReport("plane", reached, left, mono,
                            bool(reached.all() and not left.any() and mono.all()), radius, plane)


# --- two-state alternating chains --------------------------------------------

def piecewise_rate_family(rates: PiecewiseTwoStateRates) -> RateFamily:
    """Chain rates for x = fraction in state 1 (array index 0)."""

    def ev(t, x, b):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 2)
        Q = np.zeros((flat.shape[0], 2, 2))
        for i, (u, _) in enumerate(flat):
            k = rates.interval_of(u)
            if k % 2 == 0:
                Q[i, 1, 0] = float(rates.q21[k](u))
            else:
                Q[i, 0, 1] = float(rates.q12[k](u))
        return Q.reshape(x.shape[:-1] + (2, 2))

    return RateFamily(ev, 2, "lipschitz", vectorized=True, name="piecewise-two-state")


@dataclass
class TwoStateAbsorption:
    target: float
    reached: np.ndarray
    stayed: np.ndarray
    monotone: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(self.reached.all() and self.stayed.all() and self.monotone.all())


def two_state_absorption(rates: PiecewiseTwoStateRates, N: int, x0: float, horizon: float,
                         replicas: int, seed=None) -> TwoStateAbsorption:
    """Chain paths from the interior of an interval approach its stable end.

    Requires the interval's attracting endpoint to be a stable interface.
    """
    k = rates.interval_of(x0)
    a = rates.breakpoints
    target = a[k + 1] if k % 2 == 0 else a[k]
    idx = k + 1 if k % 2 == 0 else k
    if not rates.is_stable(idx):
        raise ValidationError("start interval does not flow into a stable interface")
    n1 = int(round(x0 * N))
    paths = ensemble_paths(piecewise_rate_family(rates), [n1, N - n1], horizon, replicas, seed)
    reached = np.zeros(replicas, bool)
    stayed = np.zeros(replicas, bool)
    mono = np.zeros(replicas, bool)
    sign = 1 if k % 2 == 0 else -1
    for r, (_, S) in enumerate(paths):
        xs = S[:, 0] / N
        near = np.abs(xs - target) <= 1.0 / N + 1e-12
        if near.any():
            first = int(np.argmax(near))
            reached[r] = True
            stayed[r] = bool(near[first:].all())
            mono[r] = bool(np.all(sign * np.diff(xs[:first + 1]) > 0))
    return TwoStateAbsorption(float(target), reached, stayed, mono)
