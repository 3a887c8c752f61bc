import numpy as np
import pytest

from meanfield.control import (ControlProblemSpec, ProductLattice, SeparatedDynamics,
                               SimplexLattice, Trajectory, ValueField, chain_value,
                               fit_turnpike, hjb_residual, optimal_controls, propagation_bound,
                               shapley_step_chain, shapley_step_limit, time_outside,
                               turnpike_bound, turnpike_report, value_iterate, zero_sum_values)
from meanfield.core import ControlSet, NumericalError, RateFamily, ValidationError, constant_rates, zero_rates
from meanfield.models import build_model
from meanfield.principal import integrate_controlled


def toggle_family():
    def Qf(t, x, b):
        b0 = b[..., 0]
        Q = np.zeros(x.shape[:-1] + (2, 2))
        Q[..., 0, 1] = 1 + x[..., 1] * (1 - b0) + 0.2 * b0
        Q[..., 1, 0] = 0.5 + b0 * (1 + x[..., 0])
        return Q
    return RateFamily(Qf, 2, vectorized=True)


def toggle_spec(**kw):
    base = dict(B=lambda X, b: -(X[:, 0] - 0.3) ** 2 - 0.1 * b[0], family=toggle_family(), tau=0.2,
                beta=0.8, controls=np.array([[0.0], [1.0]]), terminal=lambda X: X[:, 0] ** 2)
    base.update(kw)
    return ControlProblemSpec(**base)


def test_interpolation_reproduces_nodes_and_linear_fields():
    L = SimplexLattice(3, 8)
    V = ValueField(L, np.random.default_rng(0).normal(size=len(L)))
    assert np.allclose(V(L.points), V.values)
    c = np.array([1.0, 2.0, 5.0])
    lin = ValueField.from_function(L, lambda X: X @ c)
    X = np.random.default_rng(1).dirichlet(np.ones(3), 50)
    assert np.abs(lin(X) - X @ c).max() < 1e-12
    with pytest.raises(NumericalError):
        V(np.array([[0.7, 0.7, -0.4]]))


def test_interpolation_continuous_across_cells():
    L = SimplexLattice(2, 5)
    V = ValueField(L, np.random.default_rng(3).normal(size=len(L)))
    s = np.linspace(0, 1, 2001)
    vals = V(np.stack([s, 1 - s], axis=1))
    assert np.abs(np.diff(vals)).max() < 5 * np.abs(np.diff(V.values)).max() / 400 + 1e-12


def test_zero_step_is_identity_and_pure_transport():
    L = SimplexLattice(2, 16)
    V = ValueField.from_function(L, lambda X: np.sin(3 * X[:, 0]))
    fam = constant_rates([[0, 1.0], [0.5, 0]])
    zero = ControlProblemSpec(B=lambda X, b: np.zeros(len(X)), family=fam, tau=0.0,
                              controls=np.array([[0.0]]))
    assert np.allclose(shapley_step_limit(V, zero).values, V.values)
    tr = ControlProblemSpec(B=lambda X, b: np.zeros(len(X)), family=fam, tau=0.3,
                            controls=np.array([[0.0]]))
    flow = 1 / 3 + (L.points[:, 0] - 1 / 3) * np.exp(-1.5 * 0.3)
    assert np.allclose(shapley_step_limit(V, tr).values, V(np.stack([flow, 1 - flow], 1)), atol=1e-9)


def test_constant_payoff_geometric_series_and_fixed_point():
    L = SimplexLattice(3, 8)
    fam = constant_rates([[0, 1, 0], [0.5, 0, 0.5], [0, 1, 0]])
    spec = ControlProblemSpec(B=lambda X, b: np.full(len(X), 2.0), family=fam, tau=0.1, steps=7,
                              beta=0.9, controls=np.array([[0.0]]))
    V, log = value_iterate(ValueField(L, np.zeros(len(L))), spec)
    assert np.allclose(V.values, 0.1 * 2 * (1 - 0.9 ** 7) / 0.1, atol=1e-12)
    Vi, logi = value_iterate(ValueField(L, np.zeros(len(L))), spec, mode="infinite", tol=1e-12)
    assert np.abs(Vi.values - 0.2 / 0.1).max() < 1e-10 and logi.converged


def test_infinite_mode_refuses_beta_one():
    L = SimplexLattice(2, 4)
    spec = ControlProblemSpec(B=lambda X, b: np.zeros(len(X)), family=zero_rates(2), tau=0.1,
                              controls=np.array([[0.0]]))
    with pytest.raises(ValidationError):
        value_iterate(ValueField(L, np.zeros(len(L))), spec, mode="infinite")


def test_contraction_and_monotonicity():
    L = SimplexLattice(2, 32)
    sp = toggle_spec()
    rng = np.random.default_rng(2)
    for _ in range(5):
        A = ValueField(L, rng.normal(size=len(L)))
        B = ValueField(L, A.values + np.abs(rng.normal(size=len(L))))
        SA, SB = shapley_step_limit(A, sp).values, shapley_step_limit(B, sp).values
        assert np.all(SA <= SB + 1e-14)
        assert np.abs(SA - SB).max() <= 0.8 * np.abs(A.values - B.values).max() + 1e-12


def test_chain_operator_frozen_and_transport():
    N = 6
    Lc = SimplexLattice(2, N)
    V = ValueField.from_function(Lc, lambda X: X[:, 0] ** 2)
    frozen = ControlProblemSpec(B=lambda X, b: X[:, 0] + b[0], family=zero_rates(2), tau=0.1,
                                beta=0.9, controls=np.array([[0.0], [0.5]]))
    out = shapley_step_chain(V, frozen, N).values
    assert np.allclose(out, 0.1 * (Lc.points[:, 0] + 0.5) + 0.9 * V.values, atol=1e-12)
    mc, se = shapley_step_chain(V, toggle_spec(tau=0.05), N, mode="monte_carlo", replicas=4000, seed=1)
    ex = shapley_step_chain(V.values, toggle_spec(tau=0.05), N)
    assert np.all(np.abs(mc - ex) <= 5 * se + 1e-12)


def test_chain_value_gap_shrinks():
    T = 1.0
    sp = toggle_spec(beta=1.0)
    gaps = []
    for N in (6, 12, 24):
        n = round(T * np.sqrt(N))
        s = toggle_spec(beta=1.0, tau=T / n, steps=n)
        Vl, _ = value_iterate(s.terminal_field(SimplexLattice(2, 240)), s)
        gaps.append(np.abs(chain_value(s, N) - Vl(SimplexLattice(2, N).points)).max())
    assert gaps[0] > gaps[1] > gaps[2]


def test_propagation_bound_holds():
    L = SimplexLattice(2, 32)
    s = toggle_spec(beta=1.0, steps=6)
    V0 = s.terminal_field(L)
    V, log = value_iterate(V0, s)
    assert np.abs(V.values).max() <= propagation_bound(s, V0, 6) + 1e-12


def test_optimal_controls_in_grid():
    L = SimplexLattice(2, 16)
    s = toggle_spec()
    b = optimal_controls(s.terminal_field(L), s)
    assert set(np.unique(b)) <= {0.0, 1.0}


def pool_game(n, M=16):
    def pool(t, x, b):
        u = b[..., 0]
        Q = np.zeros(x.shape[:-1] + (2, 2))
        Q[..., 0, 1] = 2 * u
        Q[..., 1, 0] = 2 * (1 - u)
        return Q
    fam = RateFamily(pool, 2, vectorized=True)
    L = ProductLattice(SimplexLattice(2, M), SimplexLattice(2, M))
    sp = ControlProblemSpec(B=lambda X, b: np.zeros(len(X)), family=SeparatedDynamics(fam, fam),
                            tau=1.0 / n, steps=n, controls=ControlSet([0.0], [1.0]),
                            controls2=ControlSet([0.0], [1.0]), points_per_axis=9,
                            terminal=lambda X: np.abs(X[:, 0] - X[:, 2]))
    return sp, L


def test_zero_sum_order_and_trivial_cases():
    sp, L = pool_game(4)
    up, low = zero_sum_values(sp, L)
    assert np.all(up.values >= low.values - 1e-12)
    zero = ControlProblemSpec(B=lambda X, b: np.zeros(len(X)), family=sp.family, tau=0.25, steps=2,
                              controls=sp.controls, controls2=sp.controls2, points_per_axis=3)
    u0, l0 = zero_sum_values(zero, L)
    assert np.all(u0.values == 0) and np.all(l0.values == 0)


def test_zero_sum_dummy_opponent_equals_single_controller():
    sp, L = pool_game(3, M=8)

    def pool_one(t, x, b):
        Q = np.zeros(x.shape[:-1] + (2, 2))
        Q[..., 0, 1] = 2 * b[..., 0]
        Q[..., 1, 0] = 2 * (1 - b[..., 0])
        return Q
    frozen = RateFamily(lambda t, x, b: np.broadcast_to(np.array([[0, 1.0], [1.0, 0]]),
                                                        x.shape[:-1] + (2, 2)).copy(), 2, vectorized=True)
    dummy = ControlProblemSpec(B=lambda X, b: np.zeros(len(X)),
                               family=SeparatedDynamics(RateFamily(pool_one, 2, vectorized=True), frozen),
                               tau=1 / 3, steps=3, controls=sp.controls, controls2=sp.controls2,
                               points_per_axis=5, terminal=sp.terminal)
    up, low = zero_sum_values(dummy, L)
    assert np.abs(up.values - low.values).max() < 1e-12


def test_hjb_residual_trivial_fields():
    L = SimplexLattice(3, 8)
    spec = ControlProblemSpec(B=lambda X, b: np.zeros(len(X)), family=zero_rates(3), tau=0.1, steps=2,
                              controls=np.array([[0.0]]))
    V, _, fields = value_iterate(ValueField(L, np.full(len(L), 3.0)), spec, history=True)
    assert hjb_residual(fields, spec).sup < 1e-12
    lin = ControlProblemSpec(B=lambda X, b: 1.0 + b[0] + 0 * X[:, 0], family=zero_rates(3), tau=0.1,
                             steps=2, controls=np.array([[0.0], [0.5]]))
    V, _, fields = value_iterate(ValueField.from_function(L, lambda X: X @ [1.0, 2.0, 3.0]), lin,
                                 history=True)
    res = hjb_residual(fields, lin)
    assert np.allclose(res.field, 0.0, atol=1e-10)


def test_value_field_json_roundtrip(tmp_path):
    L = SimplexLattice(3, 4)
    V = ValueField(L, np.arange(len(L), dtype=float), step=3)
    V.to_json(tmp_path / "v.json")
    W = ValueField.from_json(tmp_path / "v.json")
    assert np.array_equal(V.values, W.values) and W.step == 3
    V.to_csv(tmp_path / "v.csv")
    assert (tmp_path / "v.csv").read_text().splitlines()[0].startswith("x0,x1,x2")


def test_turnpike_trivial_cases():
    traj = Trajectory(np.linspace(0, 5, 6), np.tile([0.0, 1.0], (6, 1)))
    assert time_outside(traj, [0.0, 1.0], 0.05) == 0.0
    moving = Trajectory(np.linspace(0, 1, 3), np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]))
    assert time_outside(moving, [0.0, 1.0], 2.5) == 0.0
    params = dict(alpha=1.0, **{"lambda": 0.5}, J_tilde=1.0, sup_S_T=0.0, S_T_star=0.0)
    assert np.isclose(turnpike_bound(0.4, 0.1, params), 0.1 ** -1 * 0.4 / 0.5)


def test_turnpike_fit_and_reports():
    m = build_model("proportional_fines", {"w": [1.0, 2.0], "lambda": 0.8})
    fam, brm = m.rate_family(), m.best_response_map()
    J = lambda x: float(m.principal.objective(x, brm(x)))
    probes = [integrate_controlled(fam, brm, [a, 1 - a], 60.0) for a in np.linspace(0.05, 0.95, 7)]
    fit = fit_turnpike(probes, [0.0, 1.0], J, rhs=m.kinetic_rhs())
    assert fit.lam > 0 and fit.alpha > 0 and fit.rest_residual < 1e-6
    rep = turnpike_report(probes[3], [0.0, 1.0], 0.05, fit.params())
    assert rep.passed and rep.tau_outside > 0
