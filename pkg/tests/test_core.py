import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meanfield.core import (ControlSet, NumericalError, PayoffFamily, PopulationState, RateFamily,
                            SimplexState, ValidationError, as_simplex, constant_rates,
                            default_detection, fix_diagonal, imitation_rates,
                            pressure_resistance_rates, q_norms, simplex_grid, validate_q_matrix)


def test_as_simplex_clamps_tiny_negatives():
    x = as_simplex([0.5, 0.5 + 5e-13, -5e-13])
    assert x.min() == 0.0


@pytest.mark.parametrize("bad", [[0.6, 0.6], [1.1, -0.1], [np.nan, 1.0], []])
def test_as_simplex_rejects(bad):
    with pytest.raises(ValidationError):
        as_simplex(bad)


def test_simplex_state_is_read_only():
    s = SimplexState([0.2, 0.8])
    with pytest.raises(ValueError):
        s.x[0] = 1.0


@given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=5).filter(lambda v: sum(v) > 1e-3),
       st.integers(1, 500))
@settings(max_examples=60, deadline=None)
def test_from_fractions_rounds_onto_lattice(weights, N):
    x = np.asarray(weights) / sum(weights)
    p = PopulationState.from_fractions(x, N)
    assert p.N == N
    assert np.abs(p.x - x).max() <= 1.0 / N + 1e-12


def test_population_rejects_negative_and_empty():
    with pytest.raises(ValidationError):
        PopulationState((1, -1))
    with pytest.raises(ValidationError):
        PopulationState((0, 0))


def test_validate_q_matrix_reports():
    ok = validate_q_matrix([[-1, 1], [2, -2]])
    assert ok and ok.row_deviation.max() == 0
    bad = validate_q_matrix([[1, -1], [0, 0]])
    assert not bad.ok and bad.negative_offdiag == [(0, 1, -1.0)]


def test_fix_diagonal_on_stack():
    Q = fix_diagonal(np.ones((4, 3, 3)))
    assert np.allclose(Q.sum(axis=-1), 0)
    assert np.allclose(np.diagonal(Q, axis1=1, axis2=2), -2)


def test_constant_rates_rejects_negative():
    with pytest.raises(ValidationError):
        constant_rates([[0, -1], [1, 0]])


def test_rate_family_batches_nonvectorized():
    fam = RateFamily(lambda t, x, b: np.array([[0, x[1]], [x[0], 0]]), 2)
    X = np.array([[0.2, 0.8], [0.6, 0.4]])
    Q = fam(0.0, X)
    assert Q.shape == (2, 2, 2)
    assert np.isclose(Q[1, 0, 1], 0.4) and np.isclose(Q[1, 1, 1], -0.6)


def test_rate_family_nonfinite_raises():
    fam = RateFamily(lambda t, x, b: np.array([[0, np.inf], [1, 0]]), 2)
    with pytest.raises(NumericalError):
        fam(0.0, [0.5, 0.5])


def test_control_set_grid_and_clip():
    box = ControlSet([0, 1], [1, 1])
    g = box.grid(3)
    assert g.shape == (3, 2) and np.all(g[:, 1] == 1)
    assert np.allclose(box.clip([2, 0]), [1, 1])
    with pytest.raises(ValidationError):
        ControlSet([1], [0])


def test_pressure_resistance_and_imitation_share_drift():
    R = PayoffFamily(lambda x, b: np.stack([x[..., 1], 2 * x[..., 0]], axis=-1), 2)
    pr = pressure_resistance_rates(R, 1.5)
    im = imitation_rates(R, 1.5, baseline=5.0)
    X = simplex_grid(2, 10)
    assert np.allclose(pr.drift(0, X), im.drift(0, X), atol=1e-14)
    Q = pr(0, np.array([0.3, 0.7]))
    # only the worse strategy moves towards the better one
    r = R(np.array([0.3, 0.7]))
    assert (Q[0, 1] > 0) == (r[1] > r[0])


def test_imitation_baseline_too_small():
    R = PayoffFamily(lambda x, b: np.stack([0 * x[..., 0], 10 + 0 * x[..., 0]], axis=-1), 2)
    with pytest.raises(NumericalError):
        imitation_rates(R, 1.0, baseline=1.0)(0, np.array([0.5, 0.5]))


def test_q_norms_constant_and_linear():
    n = q_norms(constant_rates([[0, 1], [3, 0]]), 8)
    assert np.isclose(n["norm"], 6.0) and n["lip"] == 0 and n["c2"] == n["c1"] == 6.0
    lin = RateFamily(lambda t, x, b: np.array([[0, 2 * x[0]], [0, 0]]), 2)
    m = q_norms(lin, 10)
    assert np.isclose(m["lip_coord"], 4.0, rtol=1e-6)


def test_default_detection_inverse():
    p, dp, dp_inv = default_detection()
    b = np.array([0.01, 0.3, 2.0, 7.5])
    assert np.allclose(dp_inv(dp(b)), b, rtol=1e-10)
    assert np.all(np.diff(p(b)) > 0) and np.all(np.diff(dp(b)) < 0)
