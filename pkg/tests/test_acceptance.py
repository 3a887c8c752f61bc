"""Acceptance checks, one PASS/FAIL line per criterion.

Run with ``pytest -v tests/test_acceptance.py``; the lines are printed in the terminal summary.
"""

import sys
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from meanfield import cli
from meanfield.chain import (PowerTailSpec, ensemble_ctmc, exact_transition_expectation,
                             hill_estimator, orbit_distance, simulate_power_tail)
from meanfield.control import (ControlProblemSpec, ProductLattice, SeparatedDynamics, SimplexLattice,
                               ValueField, chain_value, fit_turnpike, shapley_step_limit,
                               turnpike_report, value_iterate, zero_sum_values)
from meanfield.core import ControlSet, PopulationState, RateFamily, constant_rates
from meanfield.equilibria import (absorbing_check, find_rest_points, fines_chain_paths,
                                  hawk_dove_equilibria, lyapunov_check, plane_level,
                                  sampled_payoff_lipschitz, two_state_absorption,
                                  verify_epsilon_nash)
from meanfield.growth import (CoalitionState, GrowthRates, coalition_ensemble, integrate_growth,
                              path_mass, simulate_coalition_chain, strategic_rates_from_payoffs)
from meanfield.kinetic import (PiecewiseTwoStateRates, integrate_filippov, integrate_kinetic,
                               integrate_replicator)
from meanfield.lab import ExperimentSpec, convergence_experiment
from meanfield.models import build_model
from meanfield.principal import integrate_controlled

pytestmark = pytest.mark.slow


def report(num, title, ok, t0, detail=""):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {num:>2}  {title}  ({time.time() - t0:.1f} s)"
    if detail:
        line += f"  {detail}"
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_01_oracle_equivalence():
    t0 = time.time()
    families = [constant_rates([[0, 1.0], [2.0, 0]]), constant_rates([[0, 0.5], [1.5, 0]])]
    obs = [lambda x: x[..., 0], lambda x: x[..., 0] ** 2, lambda x: np.cos(3 * x[..., 1])]
    times = [0.5, 2.0]
    worst = 0.0
    for fam in families:
        for N in (1, 4, 8):
            n0 = [N, 0] if N == 1 else [N // 4 * 3, N - N // 4 * 3]
            C = ensemble_ctmc(fam, n0, times, 10_000, seed=N) / N
            for i, t in enumerate(times):
                for f in obs:
                    v = f(C[:, i])
                    ex = exact_transition_expectation(fam, n0, t, f)
                    se = v.std(ddof=1) / np.sqrt(len(v))
                    z = abs(v.mean() - ex) / se if se > 0 else (0.0 if abs(v.mean() - ex) < 1e-12 else np.inf)
                    worst = max(worst, z)
    report(1, "oracle equivalence", worst <= 4 and time.time() - t0 < 60, t0, f"worst z={worst:.2f}")


def test_02_lln_rate():
    t0 = time.time()
    spec = ExperimentSpec(build_model("hawk_dove", {"smooth": True}), {"kind": "expression", "expr": "x0**2"},
                          [50, 100, 200, 400, 800], 10_000, 1.0, [0.1, 0.9], seed=7)
    res = convergence_experiment(spec)
    errs = [r["error"] for r in res.rows]
    dec = all(a > b for a, b in zip(errs, errs[1:]))
    ok = res.status == "ok" and -1.3 <= res.slope <= -0.7 and dec and time.time() - t0 < 600
    report(2, "LLN rate", ok, t0, f"slope={res.slope:.3f} errors={np.round(errs, 5).tolist()}")


def test_03_kinetic_closed_forms():
    t0 = time.time()
    tr = integrate_kinetic(constant_rates([[0, 1.0], [1.0, 0]]), [0.9, 0.1], horizon=1.0, tol=1e-10)
    e1 = abs(tr.final[0] - (0.5 + 0.4 * np.exp(-2.0)))
    m = build_model("hawk_dove", {})
    hd = integrate_replicator(m.payoff, m.kappa, [0.3, 0.7], horizon=50.0, tol=1e-10)
    e2 = abs(hd.final[0] - hawk_dove_equilibria(2, 1, -1)["roots"][0])
    report(3, "kinetic closed forms", max(e1, e2) <= 1e-6, t0, f"errors {e1:.1e}, {e2:.1e}")


def test_04_proportional_fines():
    t0 = time.time()
    plane = build_model("proportional_fines", {"w": [1.0, 3.0], "lambda": 1.35})
    brm, st = plane.best_response_map(), plane.structured
    fs = plane_level(plane)
    max_inc, end_err = -np.inf, 0.0
    for x0 in ([0.95, 0.05], [0.05, 0.95]):
        tr = integrate_controlled(plane.rate_family(), brm, x0, 300.0, tol=1e-11,
                                  t_eval=np.linspace(0, 300, 601))
        rep = lyapunov_check(tr, plane)
        max_inc = max(max_inc, rep.max_increment)
        fbar = tr.final @ st.fines
        end_err = max(end_err, abs(st.p(st.dp_inv(1 / (st.kappa_B * fbar))) - 1 / 1.35))
    ok_a, ok_b = max_inc <= 1e-9, end_err <= 1e-6
    vert = build_model("proportional_fines", {"w": [1.0, 2.0], "lambda": 0.8})
    rc = absorbing_check(fines_chain_paths(vert, [45, 5], horizon=100, replicas=1000, seed=2), vert, vertex=1)
    ok_c = rc.passed and rc.fraction == 1.0
    ok_d = True
    for n0 in ([2, 48], [48, 2]):
        rd = absorbing_check(fines_chain_paths(plane, n0, horizon=300, replicas=1000, seed=1), plane,
                             plane=fs, N=50)
        ok_d &= bool(rd.reached.all() and not rd.left_after.any())
    ok = ok_a and ok_b and ok_c and ok_d and time.time() - t0 < 300
    report(4, "proportional fines", ok, t0,
           f"(a) max dV={max_inc:.1e} (b) {end_err:.1e} (c) {rc.fraction:.3f} (d) {ok_d}")


def test_05_epsilon_nash():
    t0 = time.time()
    m = build_model("inspection", {})
    brm = m.best_response_map()
    rp = find_rest_points(m.payoff, brm, options={"stability": False})
    x = [p.x for p in rp if p.classification == "interior-equal-payoff"][0]
    Rhat = sampled_payoff_lipschitz(m.payoff, brm, resolution=12)
    ok, parts = True, []
    for N in (50, 100, 200):
        xn = PopulationState.from_fractions(x, N)
        eps = verify_epsilon_nash(xn, brm(xn.x), m.payoff, m.principal)
        ok &= eps <= 2 * Rhat * m.d / N
        parts.append(f"N={N}: {eps:.4f}<={2 * Rhat * m.d / N:.4f}")
    report(5, "epsilon-Nash", ok, t0, "; ".join(parts))


def toggle_family():
    def Qf(t, x, b):
        b0 = b[..., 0]
        Q = np.zeros(x.shape[:-1] + (2, 2))
        Q[..., 0, 1] = 1 + x[..., 1] * (1 - b0) + 0.2 * b0
        Q[..., 1, 0] = 0.5 + b0 * (1 + x[..., 0])
        return Q
    return RateFamily(Qf, 2, vectorized=True)


def test_06_value_iteration():
    t0 = time.time()
    fam = toggle_family()
    B = lambda X, b: -(X[:, 0] - 0.3) ** 2 - 0.1 * b[0]
    term = lambda X: X[:, 0] ** 2
    ctrl = np.array([[0.0], [1.0]])
    sp = ControlProblemSpec(B=B, family=fam, tau=0.2, beta=0.8, controls=ctrl, terminal=term)
    L = SimplexLattice(2, 64)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        U, W = ValueField(L, rng.normal(size=len(L))), ValueField(L, rng.normal(size=len(L)))
        d = np.abs(shapley_step_limit(U, sp).values - shapley_step_limit(W, sp).values).max()
        worst = max(worst, d - 0.8 * np.abs(U.values - W.values).max())
    ok_a = worst <= 1e-12
    L3 = SimplexLattice(3, 8)
    cst = ControlProblemSpec(B=lambda X, b: np.full(len(X), 2.0),
                             family=constant_rates([[0, 1, 0], [0.5, 0, 0.5], [0, 1, 0]]),
                             tau=0.1, beta=0.9, controls=np.array([[0.0]]))
    V, _ = value_iterate(ValueField(L3, np.zeros(len(L3))), cst, mode="infinite", tol=1e-12)
    fp_err = np.abs(V.values - 0.1 * 2.0 / (1 - 0.9)).max()
    gaps = []
    for N in (6, 12, 24):
        n = round(np.sqrt(N))
        s = ControlProblemSpec(B=B, family=fam, tau=1.0 / n, steps=n, controls=ctrl, terminal=term)
        Vl, _ = value_iterate(s.terminal_field(SimplexLattice(2, 240)), s)
        gaps.append(float(np.abs(chain_value(s, N) - Vl(SimplexLattice(2, N).points)).max()))
    ok_c = gaps[0] > gaps[1] > gaps[2]
    ok = ok_a and fp_err <= 1e-10 and ok_c and time.time() - t0 < 300
    report(6, "value iteration", ok, t0,
           f"(a) excess={worst:.1e} (b) {fp_err:.1e} (c) gaps={np.round(gaps, 5).tolist()}")


def test_07_zero_sum():
    t0 = time.time()

    def pool(t, x, b):
        u = b[..., 0]
        Q = np.zeros(x.shape[:-1] + (2, 2))
        Q[..., 0, 1] = 2 * u
        Q[..., 1, 0] = 2 * (1 - u)
        return Q
    fam = RateFamily(pool, 2, vectorized=True)
    L = ProductLattice(SimplexLattice(2, 32), SimplexLattice(2, 32))
    order, gaps = True, []
    for n in (4, 8):
        sp = ControlProblemSpec(B=lambda X, b: np.zeros(len(X)), family=SeparatedDynamics(fam, fam),
                                tau=1.0 / n, steps=n, controls=ControlSet([0.0], [1.0]),
                                controls2=ControlSet([0.0], [1.0]), points_per_axis=9,
                                terminal=lambda X: np.abs(X[:, 0] - X[:, 2]))
        up, low = zero_sum_values(sp, L)
        order &= bool(np.all(up.values >= low.values - 1e-12))
        gaps.append(float((up.values - low.values).max()))
    shrink = 1 - gaps[1] / gaps[0]
    report(7, "zero-sum", order and shrink >= 0.3, t0, f"gaps={np.round(gaps, 4).tolist()} shrink={shrink:.0%}")


def test_08_turnpike():
    t0 = time.time()
    m = build_model("inspection", {})
    fam, brm = m.rate_family(), m.best_response_map()
    rp = find_rest_points(m.payoff, brm, options={"stability": False})
    xs = [p.x for p in rp if p.classification == "interior-equal-payoff"][0]
    J = lambda x: float(m.principal.objective(x, brm(x)))
    probes = [integrate_controlled(fam, brm, s, 40.0)
              for s in np.random.default_rng(0).dirichlet(np.ones(3), 12)]
    fit = fit_turnpike(probes, xs, J, rhs=m.kinetic_rhs())
    ok = 0
    starts = np.random.default_rng(5).dirichlet(np.ones(3), 20)
    for s in starts:
        rep = turnpike_report(integrate_controlled(fam, brm, s, 40.0), xs, 0.05, fit.params())
        ok += bool(rep.passed)
    report(8, "turnpike", ok == len(starts), t0,
           f"{ok}/{len(starts)} within bound, fitted lambda={fit.lam:.2e} alpha={fit.alpha:.2f}")


def test_09_growth_laws():
    t0 = time.time()
    ms = GrowthRates(32, merge=lambda k, j, x, b: 1.0 / (k + j), split=0.3)
    tr = integrate_growth(ms, CoalitionState.monodisperse(32), 5.0, t_eval=np.linspace(0, 5, 11))
    mass_int = float(np.abs(tr.mass - 1).max())
    p = simulate_coalition_chain(ms, CoalitionState.monodisperse(32).x, 1 / 50, 3.0, seed=1)
    mass_chain = bool(np.all(path_mass(p) == 50))
    cn = integrate_growth(GrowthRates(256, merge=1.0), CoalitionState.monodisperse(256), 1.0, tol=1e-9,
                          t_eval=[0.25, 0.5, 1.0])
    num_err = float(np.abs(cn.number - 1 / (1 + cn.t)).max())
    t = np.linspace(0, 10, 11)
    e = coalition_ensemble(GrowthRates(8, inject=1.5), np.zeros(8), 1 / 100, t, 200, seed=3)
    slope = np.polyfit(t, e[:, :, :8].sum(axis=2).mean(axis=0), 1)[0]
    at = integrate_growth(GrowthRates(256, inject=0.5, attach=0.2), CoalitionState.monodisperse(256), 2.0,
                          t_eval=np.linspace(0, 2, 5))
    exact = (1 + 0.5 / 0.2) * np.exp(0.2 * at.t) - 0.5 / 0.2
    att_res = float(np.abs(at.mass - exact).max() / exact.max())
    K = 6
    Rv = np.array([6, 10, 12, 12, 10, 6.0])
    sr = strategic_rates_from_payoffs(lambda x, b: Rv, K, a_weights=0.1, split_weights=0.1,
                                      state_dependent=False)
    x0 = np.eye(K)[0]
    k2 = np.arange(1, K + 1) ** 2
    ref = integrate_growth(sr, x0, 1.0, tol=1e-11, t_eval=[1.0]).x[-1] @ k2
    errs = []
    for h in (1 / 50, 1 / 100, 1 / 200):
        X = coalition_ensemble(sr, x0, h, [1.0], 40_000, seed=11)
        errs.append(float(abs((X[:, 0, :K] @ k2).mean() - ref)))
    ok = (mass_chain and mass_int <= 1e-8 and num_err <= 1e-5 and abs(slope / 1.5 - 1) <= 0.05
          and att_res <= 1e-6 and errs[0] > errs[1] > errs[2] and time.time() - t0 < 600)
    report(9, "growth laws", ok, t0,
           f"mass int={mass_int:.1e} chain={mass_chain} number={num_err:.1e} slope={slope:.3f} "
           f"attach={att_res:.1e} ensemble={np.round(errs, 4).tolist()}")


def test_10_power_tail():
    t0 = time.time()
    Q = [[0, 1.0, 0.5], [0.3, 0, 0.7], [0.6, 0.4, 0]]
    fam = constant_rates(Q)
    x = np.array([0.2, 0.5, 0.3])
    A = float(np.sum(x * np.array([1.5, 1.0, 1.0])))
    s = PowerTailSpec(1.5).sample(A, np.random.default_rng(1), 100_000)
    ratio = hill_estimator(s) / (1.5 * A)
    N, n0 = 200, np.array([180, 10, 10])
    path = simulate_power_tail(fam, PowerTailSpec(0.5), n0, 1.0, seed=10)
    orb = integrate_kinetic(fam, n0 / N, horizon=40.0, tol=1e-10, t_eval=np.linspace(0, 40, 4001)).x
    dist = float(orbit_distance(path.n / N, orb).max())
    ok = abs(ratio - 1) <= 0.1 and dist <= 0.1
    report(10, "power tail", ok, t0, f"Hill ratio={ratio:.3f} max orbit distance={dist:.3f}")


def test_11_two_state_filippov():
    t0 = time.time()
    rates = PiecewiseTwoStateRates.unit([0.0, 0.5, 1.0])
    rep = two_state_absorption(rates, 200, 0.2, 30.0, 1000, seed=4)
    res = integrate_filippov(rates, 0.2, 3.0)
    tr = res.trajectory
    expected = np.where(tr.t < np.log(1.6), 1 - 0.8 * np.exp(-tr.t), 0.5)
    err = float(np.abs(tr.x[:, 0] - expected).max())
    report(11, "two-state and Filippov", rep.passed and err <= 1e-8, t0,
           f"reached={rep.reached.mean():.3f} stayed={rep.stayed.mean():.3f} "
           f"monotone={rep.monotone.mean():.3f} closed form={err:.1e}")


def test_12_reproducibility(tmp_path):
    t0 = time.time()
    runs = {
        "simulate": {"model": {"name": "hawk_dove"}, "x0": [0.3, 0.7], "N": 40, "horizon": 2.0,
                     "replicas": 200, "times": [1.0, 2.0]},
        "converge": {"model": {"name": "two_state"}, "Ns": [10, 20], "replicas": 100, "horizon": 0.5,
                     "x0": [0.5, 0.5], "seed": 3},
        "powertail": {"model": {"name": "two_state"}, "n0": [15, 5], "alpha": 1.0, "horizon": 0.5},
        "growth": {"K": 16, "merge": 1.0, "horizon": 1.0, "chain": {"h": 0.05, "replicas": 20}, "seed": 4},
        "tagged": {"model": {"name": "two_state"}, "n0": [6, 4], "times": [0.5], "replicas": 200},
    }
    same = []
    for cmd, cfg in runs.items():
        cli.execute(cmd, cfg, tmp_path / cmd)
        ok, _ = cli.rerun(tmp_path / cmd / "manifest.json")
        same.append(ok)
    report(12, "reproducibility", all(same), t0, f"{sum(same)}/{len(same)} reruns identical")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
