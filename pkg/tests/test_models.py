import numpy as np
import pytest

from meanfield.core import PayoffFamily, ValidationError, simplex_grid
from meanfield.equilibria import find_rest_points
from meanfield.kinetic import integrate_kinetic, integrate_replicator, two_state_reduce
from meanfield.models import (CATALOG, allocation_initial, build_allocation_model, build_model,
                              detection_probabilities, integrate_swarm, load_model,
                              swarm_rest_point)


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_catalog_models_build_and_drift_on_simplex(name):
    m = build_model(name, {})
    X = simplex_grid(m.d, 4)
    rhs = m.kinetic_rhs()
    for x in X[:: max(1, len(X) // 6)]:
        v = np.asarray(rhs(0.0, x))
        assert np.all(np.isfinite(v)) and abs(v.sum()) < 1e-10


def test_unknown_model_and_params():
    with pytest.raises(ValidationError, match="unknown name"):
        build_model("nope")
    with pytest.raises(ValidationError, match="strictly increasing"):
        build_model("fines", {"w": [2.0, 1.0]})
    with pytest.raises(ValidationError):
        build_model("hawk_dove", {"V": 1.0, "D": 2.0})
    with pytest.raises(ValidationError):
        load_model({"params": {}})


def test_load_model_document():
    m = load_model({"name": "two_state", "params": {"q12": 2.0, "q21": 1.0}})
    r = two_state_reduce(m.rate_family())
    assert np.isclose(r(1 / 3), 0.0)


def test_inspection_payoff_signs():
    m = build_model("inspection", {})
    x = np.array([0.3, 0.3, 0.4])
    low = m.payoff(x, np.array([0.0]))
    high = m.payoff(x, np.array([3.0]))
    # more inspection lowers the payoff of every violating level
    assert np.all(high[1:] < low[1:]) and np.isclose(high[0], low[0])


def test_detection_probabilities_congestion():
    pj = detection_probabilities([1.0, 0.5], congestion=True)
    v = pj(np.array([1.0, 0.0]), np.array([1.0]))
    p1 = 1 - np.exp(-2)
    assert np.allclose(v, [p1, 0.25 * p1])
    with pytest.raises(ValidationError):
        detection_probabilities([1.5])


def test_minority_and_sex_ratio_rest_points():
    m = build_model("minority", {"sharp": True})
    r = two_state_reduce(m.payoff, m.kappa)
    assert np.isclose(r(0.7), -0.5 * 0.7 * 0.3 * 2)
    sr = build_model("sex_ratio", {})
    tr = integrate_replicator(sr.payoff, sr.kappa, [0.8, 0.2], horizon=40.0)
    assert abs(tr.final[0] - 0.5) < 1e-6


def test_threshold_model():
    uni = build_model("threshold", {})
    r = two_state_reduce(uni.rate_family())
    assert np.allclose(r(np.linspace(0, 1, 7)), 0)
    with pytest.raises(ValidationError):
        build_model("threshold", {"F": {"form": "bogus"}})
    sq = build_model("threshold", {"F": {"form": "power", "k": 2}})
    tr = integrate_kinetic(sq.rate_family(), [0.6, 0.4], horizon=30.0)
    assert tr.final[0] < 1e-3


def test_project_selection_index_map():
    m = build_model("project_selection", {"awards": [1, 2, 3], "costs": [0.1, 0.2]})
    assert m.d == 6 and m.index_map[3] == (1, 1)
    with pytest.raises(ValidationError):
        build_model("project_selection", {"costs": [0.3, 0.1]})


def test_terrorism_and_cyber_conventions():
    t = build_model("terrorism", {})
    assert t.principal_sign == -1 and t.params["principal_cost"] == "minimized"
    c = build_model("cyber", {})
    assert c.sign_flag == -1
    x = np.array([0.5, 0.3, 0.2])
    assert np.all(c.payoff(x, np.array([1.0])) < 0)


def test_allocation_modes():
    A = PayoffFamily(lambda x, b: np.stack([x[..., 1], 1 - x[..., 1]], axis=-1), 2)
    B = PayoffFamily(lambda x, b: np.stack([0 * x[..., 0], x[..., 0] - 0.5, 0 * x[..., 0]], axis=-1), 3)
    m1 = build_allocation_model([A, B], weights=[0.4, 0.6])
    x0 = allocation_initial(m1.blocks, [[0.3, 0.7], [0.2, 0.3, 0.5]])
    v = m1.rhs(0.0, x0)
    assert abs(v[:2].sum()) < 1e-14 and abs(v[2:].sum()) < 1e-14
    m2 = build_allocation_model([A, (B.R, 3)], mode="C2")
    y = np.full(5, 0.2)
    assert abs(m2.rhs(0.0, y).sum()) < 1e-14
    with pytest.raises(ValidationError):
        build_allocation_model([A], weights=[0.5])
    with pytest.raises(ValidationError):
        build_allocation_model([A], mode="C3")


def test_swarm_linear_decay_and_rest_point():
    params = {"delta": 0.0, "alpha": 0.0, "p": 0.7, "T1": 0.0, "T2": 0.0}
    res = integrate_swarm(params, [1.0, 0.4, 0.9], 2.0, t_eval=[2.0])
    assert np.allclose(res.y[-1, 1:], np.array([0.4, 0.9]) * np.exp(-1.4), atol=1e-9)
    p2 = {"delta": 0.1, "alpha": 0.2, "p": 0.5, "T1": lambda s: 1.0 + s, "T2": 2.0}
    assert np.allclose(swarm_rest_point(p2, 1.0), [2 / 2.5, 2 / 2.5])
    with pytest.raises(ValidationError):
        integrate_swarm({**params, "p": -1.0}, [1, 0, 0], 1.0)


def test_hawk_dove_smooth_rates_share_replicator_flow():
    plain = build_model("hawk_dove", {})
    smooth = build_model("hawk_dove", {"smooth": True})
    assert smooth.rate_family().regularity == "C2"
    a = integrate_kinetic(plain.rate_family(), [0.2, 0.8], horizon=3.0, tol=1e-11).final
    b = integrate_kinetic(smooth.rate_family(), [0.2, 0.8], horizon=3.0, tol=1e-11).final
    assert np.abs(a - b).max() < 1e-9
    rp = find_rest_points(smooth.payoff)
    assert any(np.allclose(p.x, [0.5, 0.5]) for p in rp)
