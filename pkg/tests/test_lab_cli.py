import json

import numpy as np
import pytest

from meanfield import cli, lab
from meanfield.core import ValidationError, constant_rates, zero_rates
from meanfield.models import build_model


def test_expression_and_observables():
    f = lab.expression_function("x0**2 + cos(3*x1)", ["x0", "x1"])
    assert np.isclose(f(0.5, 0.2), 0.25 + np.cos(0.6))
    with pytest.raises(ValidationError, match="unknown names"):
        lab.expression_function("y + 1", ["x0"])
    X = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert np.allclose(lab.make_observable({"kind": "coordinate", "index": 1}, 2)(X), [0.8, 0.4])
    assert np.allclose(lab.make_observable({"kind": "l1", "target": [1, 0]}, 2)(X), [1.6, 0.8])
    # constant expressions broadcast over the sample axis
    assert lab.make_observable({"kind": "expression", "expr": "2"}, 2)(X).shape == (2,)
    with pytest.raises(ValidationError):
        lab.make_observable({"kind": "coordinate", "index": 5}, 2)


def test_convergence_degenerate_for_frozen_chain():
    spec = lab.ExperimentSpec(zero_rates(2), {"kind": "coordinate", "index": 0}, [10, 20], 50, 1.0,
                              [0.3, 0.7], seed=1)
    res = lab.convergence_experiment(spec)
    assert res.status == "degenerate" and res.slope is None


def test_convergence_spec_validation():
    with pytest.raises(ValidationError):
        lab.ExperimentSpec(zero_rates(2), {}, [20, 10], 50, 1.0, [0.5, 0.5])
    with pytest.raises(ValidationError):
        lab.ExperimentSpec(zero_rates(2), {}, [10], 50, 1.0, [0.5, 0.5], tol=1e-6)


def test_convergence_linear_model_has_small_errors():
    spec = lab.ExperimentSpec(constant_rates([[0, 1], [2, 0]]), {"kind": "coordinate", "index": 0},
                              [10, 40], 4000, 1.0, [0.5, 0.5], seed=2)
    res = lab.convergence_experiment(spec)
    # linear rates keep the mean exact, so errors are pure noise
    assert all(r["error"] < 4 * r["stderr"] + 1e-12 for r in res.rows)


def test_phase_portraits():
    fines = lab.phase_portrait(build_model("proportional_fines", {"w": [1.0, 2.0], "lambda": 0.8}), 4)
    assert {r.label for r in fines} == {"e_2"}
    mino = lab.phase_portrait(build_model("minority", {"eps": 0.05}), 6)
    assert {r.label for r in mino} == {"(0.5, 0.5)"}
    const = lab.phase_portrait(build_model("constant_payoff", {"d": 3}), 5)
    assert {r.label for r in const} == {"continuum"}
    with pytest.raises(ValidationError):
        lab.phase_portrait(build_model("constant_payoff", {"d": 4}))


def test_simulate_zero_rate_single_row(tmp_path):
    cfg = {"model": {"name": "constant_payoff", "params": {"d": 2}}, "n0": [3, 2], "horizon": 5.0,
           "seed": 0}
    man = cli.execute("simulate", cfg, tmp_path)
    lines = (tmp_path / "path.csv").read_text().splitlines()
    assert lines[0] == "t,n_1,n_2,event" and len(lines) == 2
    lab.validate_document(man, "manifest")


def test_equilibria_output_validates(tmp_path):
    cli.execute("equilibria", {"model": {"name": "hawk_dove"}, "seed": 1}, tmp_path)
    doc = json.loads((tmp_path / "rest_points.json").read_text())
    lab.validate_document(doc, "rest_points")
    assert len(doc["rest_points"]) == 3


def test_converge_output_validates(tmp_path):
    cfg = {"model": {"name": "two_state", "params": {"q12": 1.0, "q21": 2.0}}, "Ns": [10, 20],
           "replicas": 200, "horizon": 0.5, "x0": [0.5, 0.5], "seed": 3}
    cli.execute("converge", cfg, tmp_path)
    lab.validate_document(json.loads((tmp_path / "convergence.json").read_text()), "convergence")
    assert (tmp_path / "convergence.csv").read_text().startswith("N,error,stderr,mean,reference")


def test_powertail_output_validates(tmp_path):
    cfg = {"model": {"name": "two_state"}, "n0": [15, 5], "alpha": 1.0, "horizon": 0.5, "seed": 2}
    cli.execute("powertail", cfg, tmp_path)
    lab.validate_document(json.loads((tmp_path / "powertail.json").read_text()), "powertail")


def test_bad_config_exits_one_with_key_path(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"name": "hawk_dove"}, "horizon": -1.0}))
    assert cli.run_cli(["simulate", str(p), "--out", str(tmp_path)]) == 1
    assert "horizon" in capsys.readouterr().err
    p.write_text(json.dumps({"model": {"name": "hawk_dove"}, "horizon": 1.0, "bogus": 1}))
    assert cli.run_cli(["simulate", str(p), "--out", str(tmp_path)]) == 1
    p.write_text("{not json")
    assert cli.run_cli(["simulate", str(p)]) == 1


def test_rerun_is_identical(tmp_path, capsys):
    cfg = {"model": {"name": "hawk_dove"}, "x0": [0.3, 0.7], "N": 20, "horizon": 2.0,
           "replicas": 50, "times": [1.0, 2.0], "seed": 9}
    cli.execute("simulate", cfg, tmp_path)
    assert cli.run_cli(["rerun", str(tmp_path / "manifest.json")]) == 0
    assert capsys.readouterr().out.strip() == "identical"


def test_auto_seed_is_recorded(tmp_path):
    cfg = {"model": {"name": "two_state"}, "x0": [0.5, 0.5], "N": 10, "horizon": 1.0}
    man = cli.execute("simulate", cfg, tmp_path)
    assert isinstance(man["seed"], int) and man["config"]["seed"] == man["seed"]
    same, _ = cli.rerun(tmp_path / "manifest.json")
    assert same


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(lab.OUTPUT_ENV, str(tmp_path / "env_out"))
    cli.execute("kinetic", {"model": {"name": "two_state"}, "x0": [0.9, 0.1], "horizon": 1.0, "seed": 0})
    assert (tmp_path / "env_out" / "manifest.json").exists()
