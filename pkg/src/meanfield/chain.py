"""Exact simulation of the N-agent mean-field chain and small-instance oracles.

Single paths are simulated event by event with one global clock: the total
exit rate is sum_i n_i |Q_ii(n/N)| and the jump i -> j is chosen with
probability n_i Q_ij / sum_k n_k |Q_kk|. Ensembles advance many replicas in
lockstep (one event per replica per sweep), which has the same law and is
much faster under numpy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve
from scipy.stats import poisson

from .core import (ChainPath, NumericalError, PopulationState, RateFamily, ValidationError,
                   as_simplex)

MAX_LATTICE = 2_000_000


def lattice_size(d: int, N: int) -> int:
    return math.comb(N + d - 1, d - 1)


def _compositions(d: int, N: int) -> np.ndarray:
    if d == 1:
        return np.array([[N]], dtype=np.int64)
    blocks = []
    for first in range(N + 1):
        rest = _compositions(d - 1, N - first)
        blocks.append(np.column_stack([np.full(len(rest), first, dtype=np.int64), rest]))
    return np.concatenate(blocks)


class LatticeIndex:
    """Dense indexing of {n in Z_+^d : sum n = N}, lexicographic in n."""

    def __init__(self, d: int, N: int, max_states: int = MAX_LATTICE):
        size = lattice_size(d, N)
        if size > max_states:
            raise ValidationError(
                f"lattice for d={d}, N={N} has {size} states (limit {max_states})")
        self.d, self.N = d, N
        self.states = _compositions(d, N)
        self._radix = (N + 1) ** np.arange(d - 1, -1, -1, dtype=np.int64)
        self.keys = self.states @ self._radix

    def __len__(self):
        return len(self.states)

    @property
    def points(self) -> np.ndarray:
        return self.states / float(self.N)

    def index(self, n) -> np.ndarray:
        """Index of one state (shape (d,)) or of a batch (shape (..., d))."""
        n = np.asarray(n, dtype=np.int64)
        key = n @ self._radix
        idx = np.searchsorted(self.keys, key)
        idx_c = np.minimum(idx, len(self.keys) - 1)
        if np.any(self.keys[idx_c] != key) or np.any(n.sum(axis=-1) != self.N) or np.any(n < 0):
            raise ValidationError("state not on the lattice")
        return idx_c

    def state(self, i: int) -> np.ndarray:
        return self.states[i]


def _policy_controls(b, b_policy, pts):
    if b_policy is None:
        return b
    return np.array([np.atleast_1d(b_policy(0.0, p)) for p in pts])


def _evaluate_lattice(family: RateFamily, lat: LatticeIndex, b=None, b_policy=None, t=0.0):
    pts = lat.points
    bb = _policy_controls(b, b_policy, pts)
    if b_policy is not None and not family.vectorized:
        return np.array([family(t, p, bi) for p, bi in zip(pts, bb)])
    return family(t, pts, bb)


def generator_matrix(family: RateFamily, N: int, b=None, b_policy: Optional[Callable] = None,
                     t: float = 0.0, lattice: Optional[LatticeIndex] = None):
    """Sparse generator of the N-agent chain on the lattice (rows = from-state)."""
    lat = lattice or LatticeIndex(family.d, N)
    Q = _evaluate_lattice(family, lat, b, b_policy, t)
    return _generator_from_rates(lat, Q), lat


def _generator_from_rates(lat: LatticeIndex, Q: np.ndarray):
    d = lat.d
    rows, cols, vals = [], [], []
    S = lat.states
    base = np.arange(len(S))
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            rate = S[:, i] * Q[:, i, j]
            mask = rate > 0
            if not np.any(mask):
                continue
            tgt = S[mask].copy()
            tgt[:, i] -= 1
            tgt[:, j] += 1
            rows.append(base[mask])
            cols.append(lat.index(tgt))
            vals.append(rate[mask])
    C = len(S)
    if rows:
        L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(C, C))
    else:
        L = sp.csr_matrix((C, C))
    out = np.asarray(L.sum(axis=1)).ravel()
    return (L - sp.diags(out)).tocsr()


def poisson_weights(mean: float, tail: float = 1e-12) -> np.ndarray:
    """Poisson(mean) probabilities 0..K truncated where the remaining tail < ``tail``."""
    if mean <= 0:
        return np.array([1.0])
    K = int(poisson.isf(tail, mean)) + 1
    return poisson.pmf(np.arange(K + 1), mean)


def uniformized_apply(L, V, t: float, tail: float = 1e-12) -> np.ndarray:
    """exp(t L) V by uniformization (V a vector or a matrix of columns)."""
    V = np.asarray(V, dtype=float)
    rates = -L.diagonal()
    lam = float(rates.max()) if rates.size else 0.0
    if t == 0 or lam == 0:
        return V.copy()
    P = (sp.identity(L.shape[0], format="csr") + L / lam).tocsr()
    w = poisson_weights(lam * t, tail)
    out = w[0] * V
    cur = V
    for k in range(1, len(w)):
        cur = P @ cur
        out = out + w[k] * cur
    return out


def uniformized_distribution(L, p0, t: float, tail: float = 1e-12) -> np.ndarray:
    """Forward law p0 exp(t L) by uniformization."""
    return uniformized_apply(L.T.tocsr(), p0, t, tail)


def _eval_observable(f, pts):
    return np.array([float(f(p)) for p in pts])


def exact_transition_expectation(family: RateFamily, n0, t: float, f: Callable, b=None,
                                 b_policy: Optional[Callable] = None) -> float:
    """E f(X^N(t)) from n0, to absolute accuracy ~1e-10, by uniformization.

    ``b_policy`` is read as a stationary feedback b(x) (it is evaluated at t=0).
    """
    if not family.time_homogeneous:
        raise ValidationError("uniformization oracle needs time-homogeneous rates")
    n0 = PopulationState(tuple(n0)) if not isinstance(n0, PopulationState) else n0
    lat = LatticeIndex(family.d, n0.N)
    if t == 0:
        return float(f(n0.x))
    L, _ = generator_matrix(family, n0.N, b, b_policy, lattice=lat)
    p0 = np.zeros(len(lat))
    p0[lat.index(n0.n)] = 1.0
    p = uniformized_distribution(L, p0, t)
    return float(p @ _eval_observable(f, lat.points))


@dataclass
class StationaryResult:
    g: np.ndarray
    reducible: bool
    residual: float
    lattice: LatticeIndex
    method: str = "sparse-solve"


def _solve_stationary_block(Lb):
    n = Lb.shape[0]
    if n == 1:
        return np.array([1.0])
    A = Lb.T.tolil()
    A[n - 1, :] = np.ones(n)
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    with np.errstate(all="ignore"):
        g = spsolve(A.tocsc(), rhs)
    return np.asarray(g).ravel()


def _power_stationary(Lb, iters=200_000, tol=1e-14):
    lam = float((-Lb.diagonal()).max())
    P = (sp.identity(Lb.shape[0], format="csr") + Lb / (2 * lam)).T.tocsr()
    g = np.full(Lb.shape[0], 1.0 / Lb.shape[0])
    for _ in range(iters):
        nxt = P @ g
        if np.abs(nxt - g).sum() < tol:
            return nxt
        g = nxt
    return g


def stationary_distribution(family: RateFamily, N: int, b=None,
                            b_policy: Optional[Callable] = None) -> StationaryResult:
    """Solve (L^N)* g = 0 with sum g = 1 on the lattice.

    For reducible chains the solution is supported on the first closed
    communicating class (in lattice order) and ``reducible`` is set.
    """
    if not family.time_homogeneous:
        raise ValidationError("stationary distribution needs time-homogeneous rates")
    L, lat = generator_matrix(family, N, b, b_policy)
    C = L.shape[0]
    offdiag = L - sp.diags(L.diagonal())
    ncomp, labels = csgraph.connected_components(offdiag, directed=True, connection="strong")
    reducible = ncomp > 1
    support = np.arange(C)
    if reducible:
        coo = offdiag.tocoo()
        leaving = np.zeros(ncomp, dtype=bool)
        cross = labels[coo.row] != labels[coo.col]
        leaving[np.unique(labels[coo.row[cross]])] = True
        closed = [c for c in range(ncomp) if not leaving[c]]
        first = min(closed, key=lambda c: np.nonzero(labels == c)[0][0])
        support = np.nonzero(labels == first)[0]
    Lb = L[support][:, support]
    method = "sparse-solve"
    g_b = _solve_stationary_block(Lb)
    res_b = np.abs(Lb.T @ g_b).sum() if np.all(np.isfinite(g_b)) else np.inf
    if not np.isfinite(res_b) or res_b > 1e-10 or g_b.min() < -1e-12:
        g_b = _power_stationary(Lb)
        method = "power-iteration"
    g_b = np.maximum(g_b, 0.0)
    g_b = g_b / g_b.sum()
    g = np.zeros(C)
    g[support] = g_b
    residual = float(np.abs(L.T @ g).sum())
    return StationaryResult(g, reducible, residual, lat, method)


# --- single-path simulation ------------------------------------------------

def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def spawn_seeds(seed, count: int) -> list:
    """Independent per-replica seeds derived from one master seed."""
    return np.random.SeedSequence(seed).spawn(count)


def _as_counts(n0) -> np.ndarray:
    if isinstance(n0, PopulationState):
        return np.array(n0.n, dtype=np.int64)
    n = np.asarray(n0, dtype=np.int64)
    PopulationState(tuple(n))
    return n


def simulate_ctmc(family: RateFamily, n0, b_policy: Optional[Callable] = None,
                  horizon: float = 1.0, seed=None, max_events: int = 10_000_000) -> ChainPath:
    """Exact event-driven simulation of one path up to ``horizon``."""
    if horizon <= 0:
        raise ValidationError("horizon must be positive")
    rng = _rng(seed)
    n = _as_counts(n0).copy()
    N = int(n.sum())
    d = n.size
    t = 0.0
    ts, ns, evs = [0.0], [n.copy()], [None]
    off = ~np.eye(d, dtype=bool)
    for _ in range(max_events):
        x = n / N
        b = None if b_policy is None else b_policy(t, x)
        Q = family(t, x, b)
        rates = np.where(off, n[:, None] * Q, 0.0)
        total = rates.sum()
        if not np.isfinite(total):
            raise NumericalError(f"exit rate overflow at n={n}", state=n.copy())
        if total <= 0:
            break
        t += rng.exponential() / total
        if t > horizon:
            break
        flat = np.cumsum(rates.ravel())
        k = int(np.searchsorted(flat, rng.random() * total, side="right"))
        k = min(k, d * d - 1)
        i, j = divmod(k, d)
        n[i] -= 1
        n[j] += 1
        ts.append(t)
        ns.append(n.copy())
        evs.append((i, j))
    else:
        raise NumericalError("event budget exhausted", state=n.copy())
    return ChainPath(np.array(ts), np.array(ns), evs, seed,
                     {"horizon": horizon, "sampler": "single-clock"})


def _migration_rate_fn(family: RateFamily, N: int, b_policy):
    d = family.d
    off = ~np.eye(d, dtype=bool)

    def rate_fn(t, S):
        x = S / N
        if b_policy is None:
            Q = family(0.0, x) if family.time_homogeneous else np.array(
                [family(ti, xi) for ti, xi in zip(t, x)])
        else:
            b = b_policy(t, x)
            Q = family(0.0, x, b) if family.time_homogeneous else np.array(
                [family(ti, xi, bi) for ti, xi, bi in zip(t, x, b)])
        rates = np.where(off, S[:, :, None] * Q, 0.0)
        return rates.reshape(len(S), d * d)

    return rate_fn


def _migration_deltas(d: int) -> np.ndarray:
    deltas = np.zeros((d * d, d), dtype=np.int64)
    for i in range(d):
        for j in range(d):
            if i != j:
                deltas[i * d + j, i] -= 1
                deltas[i * d + j, j] += 1
    return deltas


def _lockstep(rate_fn, state0, deltas, times, replicas, rng, max_sweeps=50_000_000):
    """Advance ``replicas`` copies of a jump process one event per sweep.

    Returns states at each of the sorted ``times`` with shape (R, m, dim).
    """
    times = np.asarray(times, dtype=float)
    m = times.size
    S = np.tile(np.asarray(state0, dtype=np.int64), (replicas, 1))
    t = np.zeros(replicas)
    k = np.zeros(replicas, dtype=np.int64)
    out = np.empty((replicas, m, S.shape[1]), dtype=np.int64)
    active = np.arange(replicas)
    K = deltas.shape[0]
    sweeps = 0
    while active.size:
        sweeps += 1
        if sweeps > max_sweeps:
            raise NumericalError("ensemble event budget exhausted")
        rates = rate_fn(t[active], S[active])
        tot = rates.sum(axis=1)
        if not np.all(np.isfinite(tot)):
            raise NumericalError("exit rate overflow in ensemble")
        e = rng.exponential(size=active.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = np.where(tot > 0, t[active] + e / np.where(tot > 0, tot, 1.0), np.inf)
        while True:
            kk = k[active]
            need = kk < m
            need[need] = times[kk[need]] < tn[need]
            if not need.any():
                break
            ids = active[need]
            out[ids, k[ids]] = S[ids]
            k[ids] += 1
        alive = k[active] < m
        ids = active[alive]
        if ids.size == 0:
            break
        r = rates[alive]
        u = rng.random(ids.size) * tot[alive]
        ev = (np.cumsum(r, axis=1) <= u[:, None]).sum(axis=1)
        ev = np.minimum(ev, K - 1)
        S[ids] += deltas[ev]
        t[ids] = tn[alive]
        active = ids
    return out


def ensemble_ctmc(family: RateFamily, n0, times, replicas: int, seed=None,
                  b_policy: Optional[Callable] = None) -> np.ndarray:
    """Counts at the given times for ``replicas`` independent paths, shape (R, m, d)."""
    n = _as_counts(n0)
    times = np.sort(np.atleast_1d(np.asarray(times, dtype=float)))
    return _lockstep(_migration_rate_fn(family, int(n.sum()), b_policy), n,
                     _migration_deltas(family.d), times, replicas, _rng(seed))


def ensemble_paths(family: RateFamily, n0, horizon: float, replicas: int, seed=None,
                   b_policy: Optional[Callable] = None, max_sweeps: int = 10_000_000) -> list:
    """Full jump records of ``replicas`` paths up to ``horizon``.

    Returns a list of (times, counts) pairs, one per replica, each starting
    with the initial state at t = 0.
    """
    n = _as_counts(n0)
    N = int(n.sum())
    rng = _rng(seed)
    rate_fn = _migration_rate_fn(family, N, b_policy)
    deltas = _migration_deltas(family.d)
    S = np.tile(n, (replicas, 1))
    t = np.zeros(replicas)
    rec_id, rec_t, rec_s = [np.arange(replicas)], [t.copy()], [S.copy()]
    active = np.arange(replicas)
    for _ in range(max_sweeps):
        if active.size == 0:
            break
        rates = rate_fn(t[active], S[active])
        tot = rates.sum(axis=1)
        if not np.all(np.isfinite(tot)):
            raise NumericalError("exit rate overflow in ensemble")
        e = rng.exponential(size=active.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = np.where(tot > 0, t[active] + e / np.where(tot > 0, tot, 1.0), np.inf)
        alive = tn <= horizon
        ids = active[alive]
        if ids.size == 0:
            break
        u = rng.random(ids.size) * tot[alive]
        ev = np.minimum((np.cumsum(rates[alive], axis=1) <= u[:, None]).sum(axis=1),
                        deltas.shape[0] - 1)
        S[ids] += deltas[ev]
        t[ids] = tn[alive]
        rec_id.append(ids)
        rec_t.append(t[ids].copy())
        rec_s.append(S[ids].copy())
        active = ids
    else:
        raise NumericalError("ensemble event budget exhausted")
    ids = np.concatenate(rec_id)
    order = np.argsort(ids, kind="stable")
    ids, ts, ss = ids[order], np.concatenate(rec_t)[order], np.concatenate(rec_s)[order]
    cuts = np.searchsorted(ids, np.arange(replicas + 1))
    return [(ts[cuts[r]:cuts[r + 1]], ss[cuts[r]:cuts[r + 1]]) for r in range(replicas)]


def ensemble_summary(times, counts: np.ndarray, N: int) -> list:
    """Rows (t, coordinate, mean, stderr) of x = n/N over replicas."""
    x = counts / float(N)
    R = x.shape[0]
    rows = []
    for it, t in enumerate(times):
        mean = x[:, it].mean(axis=0)
        se = x[:, it].std(axis=0, ddof=1) / np.sqrt(R)
        for j in range(x.shape[2]):
            rows.append((float(t), j + 1, float(mean[j]), float(se[j])))
    return rows


# --- discrete time ----------------------------------------------------------

def _lattice_sup_norm(family: RateFamily, N: int, b_policy=None) -> float:
    d = family.d
    if lattice_size(d, N) <= 200_000:
        pts = LatticeIndex(d, N).points
    else:
        pts = LatticeIndex(d, 40).points
    bb = _policy_controls(None, b_policy, pts)
    Q = np.array([family(0.0, p, None if bb is None else bb[i]) for i, p in enumerate(pts)]) \
        if b_policy is not None else family(0.0, pts)
    return float(2.0 * np.abs(np.diagonal(Q, axis1=-2, axis2=-1)).max())


def discrete_step_bound(family: RateFamily, N: int, b_policy=None, norm=None) -> float:
    """Largest admissible step 1/(N ||Q||) with a declared or lattice-estimated norm."""
    norm = norm if norm is not None else family.declared_bounds.get("norm")
    if norm is None:
        norm = _lattice_sup_norm(family, N, b_policy)
    return np.inf if norm == 0 else 1.0 / (N * norm)


def simulate_discrete(family: RateFamily, n0, tau: float, steps: int,
                      b_policy: Optional[Callable] = None, seed=None, norm=None) -> ChainPath:
    """Discrete-time chain: jump to n^{ij} with probability tau n_i Q_ij, else stay."""
    n = _as_counts(n0).copy()
    N = int(n.sum())
    bound = discrete_step_bound(family, N, b_policy, norm)
    if tau > bound * (1 + 1e-12):
        raise ValidationError(f"step {tau} exceeds the admissible bound {bound}")
    rng = _rng(seed)
    d = n.size
    off = ~np.eye(d, dtype=bool)
    ts, ns, evs = [0.0], [n.copy()], [None]
    for s in range(1, steps + 1):
        t = (s - 1) * tau
        x = n / N
        b = None if b_policy is None else b_policy(t, x)
        probs = np.where(off, tau * n[:, None] * family(t, x, b), 0.0).ravel()
        u = rng.random()
        cum = np.cumsum(probs)
        if u < cum[-1]:
            k = int(np.searchsorted(cum, u, side="right"))
            i, j = divmod(k, d)
            n[i] -= 1
            n[j] += 1
            ts.append(s * tau)
            ns.append(n.copy())
            evs.append((i, j))
    path = ChainPath(np.array(ts), np.array(ns), evs, seed, {"tau": tau, "steps": steps})
    return path


def stay_probability(family: RateFamily, n, tau: float, t: float = 0.0, b=None) -> float:
    n = np.asarray(n, dtype=float)
    Q = family(t, n / n.sum(), b)
    return float(1.0 - tau * (n * np.abs(np.diag(Q))).sum())


def ensemble_discrete(family: RateFamily, n0, tau: float, steps: int, replicas: int,
                      seed=None, b_policy: Optional[Callable] = None) -> np.ndarray:
    """Final counts after ``steps`` discrete steps for many replicas, shape (R, d)."""
    n = _as_counts(n0)
    N = int(n.sum())
    bound = discrete_step_bound(family, N, b_policy)
    if tau > bound * (1 + 1e-12):
        raise ValidationError(f"step {tau} exceeds the admissible bound {bound}")
    rng = _rng(seed)
    rate_fn = _migration_rate_fn(family, N, b_policy)
    deltas = _migration_deltas(family.d)
    S = np.tile(n, (replicas, 1))
    for s in range(steps):
        probs = tau * rate_fn(np.full(replicas, s * tau), S)
        cum = np.cumsum(probs, axis=1)
        u = rng.random(replicas)
        move = u < cum[:, -1]
        ev = np.minimum((cum <= u[:, None]).sum(axis=1), deltas.shape[0] - 1)
        S = S + np.where(move[:, None], deltas[ev], 0)
    return S


# --- tagged player ----------------------------------------------------------

@dataclass
class TaggedPath:
    t: np.ndarray
    j: np.ndarray
    n: np.ndarray
    seed: object = None


def _tagged_rates(family, dev_family, N, t, n, j):
    d = n.size
    x = n / N
    Q = family(t, x)
    crowd = n - np.eye(d, dtype=np.int64)[j]
    c_rates = crowd[:, None] * Q
    np.fill_diagonal(c_rates, 0.0)
    q_dev = dev_family(t, x)[j].copy()
    q_dev[j] = 0.0
    return c_rates, q_dev


def simulate_tagged(family: RateFamily, dev_family: RateFamily, n0, j0: int,
                    horizon: float, seed=None, max_events: int = 10_000_000) -> TaggedPath:
    """Chain with one tagged agent (counted in n0) that jumps with the deviating rates.

    Crowd agents in state i number n_i - [i = j] and use Q(x); the tagged
    agent in state j uses Q^dev_j.(x). Its moves update the occupation too.
    """
    n = _as_counts(n0).copy()
    if not 0 <= j0 < n.size or n[j0] < 1:
        raise ValidationError("tagged agent must sit in an occupied state of n0")
    N = int(n.sum())
    d = n.size
    rng = _rng(seed)
    t, j = 0.0, int(j0)
    ts, js, ns = [0.0], [j], [n.copy()]
    for _ in range(max_events):
        c_rates, q_dev = _tagged_rates(family, dev_family, N, t, n, j)
        total = c_rates.sum() + q_dev.sum()
        if total <= 0:
            break
        t += rng.exponential() / total
        if t > horizon:
            break
        u = rng.random() * total
        flat = np.cumsum(np.concatenate([c_rates.ravel(), q_dev]))
        k = min(int(np.searchsorted(flat, u, side="right")), flat.size - 1)
        if k < d * d:
            i, l = divmod(k, d)
            n[i] -= 1
            n[l] += 1
        else:
            l = k - d * d
            n[j] -= 1
            n[l] += 1
            j = l
        ts.append(t)
        js.append(j)
        ns.append(n.copy())
    return TaggedPath(np.array(ts), np.array(js), np.array(ns), seed)


def ensemble_tagged(family: RateFamily, dev_family: RateFamily, n0, j0: int, times,
                    replicas: int, seed=None):
    """Tagged states and occupations at ``times``: arrays (R, m) and (R, m, d)."""
    n = _as_counts(n0)
    N = int(n.sum())
    d = n.size
    off = ~np.eye(d, dtype=bool)
    deltas = np.zeros((2 * d * d, 2 * d), dtype=np.int64)
    mig = _migration_deltas(d)
    deltas[: d * d, :d] = mig
    deltas[d * d:, :d] = mig
    deltas[d * d:, d:] = mig

    def rate_fn(t, S):
        cnt, tag = S[:, :d], S[:, d:]
        x = cnt / N
        Q = family(0.0, x)
        Qd = dev_family(0.0, x)
        crowd = np.where(off, (cnt - tag)[:, :, None] * Q, 0.0)
        dev = np.where(off, tag[:, :, None] * Qd, 0.0)
        return np.concatenate([crowd.reshape(len(S), -1), dev.reshape(len(S), -1)], axis=1)

    s0 = np.concatenate([n, np.eye(d, dtype=np.int64)[j0]])
    times = np.sort(np.atleast_1d(np.asarray(times, dtype=float)))
    out = _lockstep(rate_fn, s0, deltas, times, replicas, _rng(seed))
    return out[:, :, d:].argmax(axis=2), out[:, :, :d]


def tagged_law_exact(family: RateFamily, dev_family: RateFamily, n0, j0: int, t: float) -> np.ndarray:
    """Exact law of the tagged state at time t by uniformization on {1..d} x lattice."""
    n0 = _as_counts(n0)
    N, d = int(n0.sum()), n0.size
    lat = LatticeIndex(d, N)
    C = len(lat)
    X = lat.points
    Q = family(0.0, X)
    Qd = dev_family(0.0, X)
    rows, cols, vals = [], [], []
    S = lat.states
    base = np.arange(C)
    for j in range(d):
        for i in range(d):
            for k in range(d):
                if i == k:
                    continue
                crowd = S[:, i] - (1 if i == j else 0)
                rate = np.where(S[:, j] >= 1, crowd * Q[:, i, k], 0.0)
                m = rate > 0
                if np.any(m):
                    tgt = S[m].copy()
                    tgt[:, i] -= 1
                    tgt[:, k] += 1
                    rows.append(j * C + base[m])
                    cols.append(j * C + lat.index(tgt))
                    vals.append(rate[m])
        for k in range(d):
            if k == j:
                continue
            rate = np.where(S[:, j] >= 1, Qd[:, j, k], 0.0)
            m = rate > 0
            if np.any(m):
                tgt = S[m].copy()
                tgt[:, j] -= 1
                tgt[:, k] += 1
                rows.append(j * C + base[m])
                cols.append(k * C + lat.index(tgt))
                vals.append(rate[m])
    size = d * C
    if rows:
        L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(size, size))
    else:
        L = sp.csr_matrix((size, size))
    L = (L - sp.diags(np.asarray(L.sum(axis=1)).ravel())).tocsr()
    p0 = np.zeros(size)
    p0[j0 * C + lat.index(n0)] = 1.0
    p = uniformized_distribution(L, p0, t)
    return p.reshape(d, C).sum(axis=1)


def tagged_limit_law(family: RateFamily, dev_family: RateFamily, x0, j0: int, t: float,
                     tol: float = 1e-11) -> np.ndarray:
    """Law of the limiting tagged chain driven by Q^dev along the kinetic flow."""
    from .kinetic import simplex_project, solve_ode

    x0 = as_simplex(x0)
    d = x0.size
    p0 = np.eye(d)[j0]

    def rhs(_t, y):
        x, p = y[:d], y[d:]
        return np.concatenate([x @ family(0.0, x), p @ dev_family(0.0, x)])

    def project(y):
        return np.concatenate([simplex_project(y[:d]), simplex_project(y[d:])])

    res = solve_ode(rhs, 0.0, np.concatenate([x0, p0]), t, tol, positive=True, project=project)
    return res.y[-1, d:]


# --- power-tail waiting times ----------------------------------------------

@dataclass(frozen=True)
class PowerTailSpec:
    """Pareto waiting times on [1, inf) with tail index alpha A(x).

    With ``scaled`` (default) the physical time increment of a jump is
    N^{-1/(alpha A)} times the Pareto draw, the scaling under which the
    chain has a limit; otherwise the raw draw is used.
    """

    alpha: float
    scaled: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError("tail parameter alpha must be positive")

    def sample(self, A: float, rng, size=None, log_scale: float = 0.0):
        """Pareto draws of index alpha A times exp(-log_scale / (alpha A)); overflow gives inf."""
        u = rng.random(size)
        with np.errstate(over="ignore"):
            return np.exp((-np.log(u) - log_scale) / (self.alpha * A))


def hill_estimator(samples, k: Optional[int] = None) -> float:
    """Hill estimate of the tail index from the k largest samples."""
    x = np.sort(np.asarray(samples, dtype=float))[::-1]
    k = k or max(10, x.size // 10)
    k = min(k, x.size - 1)
    return float(1.0 / np.mean(np.log(x[:k] / x[k])))


def _exit_weight(family, x):
    Q = family(0.0, x)
    return float((x * np.abs(np.diag(Q))).sum()), Q


def simulate_power_tail(family: RateFamily, spec: PowerTailSpec, n0, horizon: float,
                        seed=None, max_jumps: int = 5_000_000) -> ChainPath:
    """Semi-Markov chain with Pareto waits of index alpha A(x) and jump law x_i Q_ij / A."""
    if not family.time_homogeneous:
        raise ValidationError("power-tail chains need time-homogeneous rates")
    n = _as_counts(n0).copy()
    N = int(n.sum())
    d = n.size
    rng = _rng(seed)
    off = ~np.eye(d, dtype=bool)
    t = 0.0
    ts, ns, evs = [0.0], [n.copy()], [None]
    for _ in range(max_jumps):
        x = n / N
        A, Q = _exit_weight(family, x)
        if A <= 0:
            break
        wait = float(spec.sample(A, rng, log_scale=np.log(N) if spec.scaled else 0.0))
        t += wait
        if t > horizon:
            break
        probs = np.where(off, x[:, None] * Q, 0.0).ravel()
        cum = np.cumsum(probs)
        k = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), d * d - 1)
        i, j = divmod(k, d)
        n[i] -= 1
        n[j] += 1
        ts.append(t)
        ns.append(n.copy())
        evs.append((i, j))
    return ChainPath(np.array(ts), np.array(ns), evs, seed,
                     {"waiting_law": "pareto[1,inf)", "tail_index": "alpha*A(x)",
                      "time_scaling": "N^(-1/(alpha A))" if spec.scaled else "raw",
                      "alpha": spec.alpha})


def orbit_distance(points, orbit) -> np.ndarray:
    """l1 distance from each point to the polyline through ``orbit`` samples."""
    P = np.asarray(points, dtype=float)
    O = np.asarray(orbit, dtype=float)
    if len(O) == 1:
        return np.abs(P - O[0]).sum(axis=1)
    best = np.full(len(P), np.inf)
    A, B = O[:-1], O[1:]
    for a, b in zip(A, B):
        seg = b - a
        L2 = seg @ seg
        lam = np.zeros(len(P)) if L2 == 0 else np.clip((P - a) @ seg / L2, 0, 1)
        proj = a + lam[:, None] * seg
        best = np.minimum(best, np.abs(P - proj).sum(axis=1))
    return best


# --- export -------------------------------------------------------------------

def path_to_csv(path: ChainPath, filename) -> None:
    d = path.n.shape[1]
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"n_{j + 1}" for j in range(d)] + ["event"])
        for t, n, ev in zip(path.t, path.n, path.events):
            label = "" if ev is None else (f"{ev[0] + 1}->{ev[1] + 1}" if isinstance(ev, tuple) else str(ev))
            w.writerow([repr(float(t))] + [int(v) for v in n] + [label])


def path_to_binary(path: ChainPath, filename) -> None:
    ev = np.array([(-1, -1) if e is None else e for e in path.events], dtype=np.int16)
    np.savez_compressed(filename, t=path.t, n=path.n.astype(np.int32), events=ev)


def path_from_binary(filename) -> ChainPath:
    data = np.load(filename)
    events = [None if tuple(e) == (-1, -1) else (int(e[0]), int(e[1])) for e in data["events"]]
    return ChainPath(data["t"], data["n"].astype(np.int64), events)
