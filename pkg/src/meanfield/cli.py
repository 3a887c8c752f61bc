"""Command-line entry point: one JSON config per run, CSV/JSON outputs and a manifest."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import lab
from .chain import (PowerTailSpec, ensemble_ctmc, ensemble_summary, ensemble_tagged, orbit_distance,
                    path_to_csv, simulate_ctmc, simulate_power_tail, tagged_limit_law)
from .control import (ControlProblemSpec, ProductLattice, SeparatedDynamics, SimplexLattice,
                      ValueField, default_resolution, value_iterate, zero_sum_values)
from .core import ControlSet, NumericalError, PopulationState, RateFamily, ValidationError
from .equilibria import find_rest_points
from .growth import CoalitionState, GrowthRates, coalition_ensemble, integrate_growth
from .kinetic import integrate_kinetic
from .models import load_model

COMMANDS = ["simulate", "kinetic", "value-iterate", "zero-sum", "equilibria", "converge",
            "growth", "portrait", "tagged", "powertail"]


def _start(config, d):
    if "n0" in config:
        return PopulationState(tuple(int(v) for v in config["n0"]))
    if "x0" not in config:
        raise ValidationError("x0: missing")
    if "N" not in config:
        raise ValidationError("N: missing")
    x0 = np.asarray(config["x0"], dtype=float)
    if x0.size != d:
        raise ValidationError(f"x0: expected {d} coordinates")
    return PopulationState.from_fractions(x0, int(config["N"]))


def _rng(config):
    return np.random.default_rng(config["seed"])


def run_simulate(config, out):
    model = load_model(config["model"])
    family = model.controlled_rates()
    n0 = _start(config, model.d)
    horizon = float(config["horizon"])
    replicas = int(config.get("replicas", 1))
    if replicas == 1:
        path = simulate_ctmc(family, np.array(n0.n), horizon=horizon, seed=_rng(config))
        path_to_csv(path, out / "path.csv")
        return {"path": out / "path.csv"}
    times = config.get("times", [horizon])
    counts = ensemble_ctmc(family, np.array(n0.n), times, replicas, _rng(config))
    rows = lab_summary_rows(np.sort(np.atleast_1d(times)), counts, n0.N)
    lab.write_csv(out / "ensemble.csv", ["t", "coordinate", "mean", "stderr"], rows)
    return {"ensemble": out / "ensemble.csv"}


def lab_summary_rows(times, counts, N):
    return [tuple(r) for r in ensemble_summary(times, counts, N)]


def run_kinetic(config, out):
    model = load_model(config["model"])
    x0 = np.asarray(config["x0"], dtype=float)
    horizon = float(config["horizon"])
    samples = int(config.get("samples", 101))
    tol = float(config.get("tol", 1e-10))
    traj = integrate_kinetic(model.controlled_rates(), x0, horizon=horizon, tol=tol,
                             t_eval=np.linspace(0, horizon, samples), record_steps=False)
    d = model.d
    lab.write_csv(out / "trajectory.csv", ["t"] + [f"x{i}" for i in range(d)],
                  [[t] + list(x) for t, x in zip(traj.t, traj.x)])
    return {"trajectory": out / "trajectory.csv"}


def _export_field(V: ValueField, out: Path, stem: str) -> dict:
    V.to_csv(out / f"{stem}.csv")
    V.to_json(out / f"{stem}.json")
    return {f"{stem}_csv": out / f"{stem}.csv", f"{stem}_json": out / f"{stem}.json"}


def run_value_iterate(config, out):
    model = load_model(config["model"])
    d = model.d
    lat = SimplexLattice(d, int(config.get("M", default_resolution(d))))
    term = lab.make_observable({"kind": "expression", "expr": config.get("terminal", "0")}, d)
    spec = ControlProblemSpec(
        B=model.principal.objective, family=model.rate_family(), tau=float(config["tau"]),
        steps=int(config.get("steps", 1)), beta=float(config.get("beta", 1.0)),
        controls=model.principal.control_set, terminal=term,
        points_per_axis=int(config.get("points_per_axis", 17)))
    V, log = value_iterate(spec.terminal_field(lat), spec, mode=config.get("mode", "finite"),
                           tol=float(config.get("tol", 1e-10)))
    outputs = _export_field(V, out, "field")
    log.to_csv(out / "log.csv")
    outputs["log"] = out / "log.csv"
    return outputs


def _pool_family(scale):
    def ev(t, x, b):
        u = np.asarray(b)[..., 0]
        Q = np.zeros(np.shape(x)[:-1] + (2, 2))
        Q[..., 0, 1] = scale * u
        Q[..., 1, 0] = scale * (1.0 - u)
        return Q

    return RateFamily(ev, 2, "C2", vectorized=True, name="pool")


def run_zero_sum(config, out):
    if config.get("game", "separated") != "separated":
        raise ValidationError("game: only 'separated' is available from the command line")
    M = int(config.get("M", 32))
    scale = float(config.get("rate", 2.0))
    lat = ProductLattice(SimplexLattice(2, M), SimplexLattice(2, M))
    names = ["x0", "x1", "y0", "y1"]
    fn_T = lab.expression_function(config.get("terminal", "Abs(x0 - y0)"), names)
    fn_B = lab.expression_function(config.get("running", "0"), names)

    def vec(fn):
        return lambda X, *a: np.broadcast_to(np.asarray(fn(*X.T), dtype=float), (len(X),)).copy()

    box = ControlSet([0.0], [1.0])
    spec = ControlProblemSpec(B=vec(fn_B), family=SeparatedDynamics(_pool_family(scale), _pool_family(scale)),
                              tau=float(config["tau"]), steps=int(config["steps"]),
                              controls=box, controls2=box, terminal=vec(fn_T),
                              points_per_axis=int(config.get("points_per_axis", 9)))
    up, low = zero_sum_values(spec, lat)
    outputs = {}
    outputs.update(_export_field(up, out, "upper"))
    outputs.update(_export_field(low, out, "lower"))
    gap = up.values - low.values
    lab.write_json(out / "zero_sum.json", {"min_gap": float(gap.min()), "max_gap": float(gap.max()),
                                           "nodes": len(lat), "tau": spec.tau, "steps": spec.steps})
    outputs["report"] = out / "zero_sum.json"
    return outputs


def run_equilibria(config, out):
    model = load_model(config["model"])
    if model.payoff is None:
        raise ValidationError("model: equilibria need a payoff-driven model")
    opts = dict(config.get("options", {}))
    opts.setdefault("kappa", model.kappa)
    if model.driver != "payoff":
        opts.setdefault("rhs", model.kinetic_rhs())
    rp = find_rest_points(model.payoff, model.best_response_map(), model.d, opts)
    lab.write_json(out / "rest_points.json", rp.to_dict())
    return {"rest_points": out / "rest_points.json"}


def run_converge(config, out):
    model = load_model(config["model"])
    spec = lab.ExperimentSpec(model, config.get("observable", {"kind": "coordinate", "index": 0}),
                              config["Ns"], int(config["replicas"]), float(config["horizon"]),
                              config["x0"], config["seed"], float(config.get("eps_c", 0.5)))
    res = lab.convergence_experiment(spec)
    lab.write_csv(out / "convergence.csv", ["N", "error", "stderr", "mean", "reference"],
                  [[r["N"], r["error"], r["stderr"], r["mean"], r["reference"]] for r in res.rows])
    lab.write_json(out / "convergence.json", res.to_dict())
    return {"table": out / "convergence.csv", "report": out / "convergence.json"}


def _kernel(value, names):
    if value is None or isinstance(value, (int, float)):
        return value
    fn = lab.expression_function(str(value), names)
    if names == ["k", "j"]:
        return lambda k, j, x, b: fn(k, j)
    return lambda x, b: fn()


def run_growth(config, out):
    K = int(config.get("K", 256))
    rates = GrowthRates(K, _kernel(config.get("merge"), ["k", "j"]),
                        _kernel(config.get("split"), ["k", "j"]),
                        _kernel(config.get("inject"), []), _kernel(config.get("attach"), []))
    x0 = config.get("x0", "monodisperse")
    state = CoalitionState.monodisperse(K) if x0 == "monodisperse" else CoalitionState(
        np.pad(np.asarray(x0, dtype=float), (0, K - len(x0))))
    horizon = float(config["horizon"])
    samples = int(config.get("samples", 11))
    traj = integrate_growth(rates, state, horizon, tol=float(config.get("tol", 1e-10)),
                            t_eval=np.linspace(0, horizon, samples)[1:])
    traj.to_csv(out / "growth.csv")
    outputs = {"trajectory": out / "growth.csv"}
    if "chain" in config:
        ch = config["chain"]
        h = float(ch["h"])
        times = np.linspace(0, horizon, samples)
        X = coalition_ensemble(rates, state.x, h, times, int(ch.get("replicas", 100)), _rng(config))
        mass = X[:, :, :K] @ np.arange(1, K + 1) + X[:, :, K]
        num = X[:, :, :K].sum(axis=2)
        rows = [[t, num[:, i].mean(), mass[:, i].mean()] for i, t in enumerate(times)]
        lab.write_csv(out / "chain_ensemble.csv", ["t", "number_mean", "mass_mean"], rows)
        outputs["chain"] = out / "chain_ensemble.csv"
    return outputs


def run_portrait(config, out):
    model = load_model(config["model"])
    rows = lab.phase_portrait(model, int(config.get("resolution", 10)),
                              float(config.get("horizon", 200.0)), float(config.get("tol", 1e-4)))
    d = model.d
    lab.write_csv(out / "portrait.csv", [f"start{i}" for i in range(d)] + [f"final{i}" for i in range(d)]
                  + ["label"], [list(r.start) + list(r.final) + [r.label] for r in rows])
    return {"portrait": out / "portrait.csv"}


def run_tagged(config, out):
    model = load_model(config["model"])
    family = model.controlled_rates()
    dev = load_model(config["deviation_model"]).controlled_rates() if "deviation_model" in config else family
    n0 = _start(config, model.d)
    j0 = int(config.get("j0", 0))
    times = np.sort(np.atleast_1d(np.asarray(config.get("times", [1.0]), dtype=float)))
    tags, _ = ensemble_tagged(family, dev, np.array(n0.n), j0, times, int(config.get("replicas", 1000)),
                              _rng(config))
    rows = []
    for i, t in enumerate(times):
        limit = tagged_limit_law(family, dev, n0.x, j0, float(t))
        for j in range(model.d):
            rows.append([float(t), j, float(np.mean(tags[:, i] == j)), float(limit[j])])
    lab.write_csv(out / "tagged.csv", ["t", "state", "empirical", "limit"], rows)
    return {"tagged": out / "tagged.csv"}


def run_powertail(config, out):
    model = load_model(config["model"])
    family = model.controlled_rates()
    n0 = _start(config, model.d)
    spec = PowerTailSpec(float(config["alpha"]), bool(config.get("scaled", True)))
    horizon = float(config["horizon"])
    path = simulate_power_tail(family, spec, np.array(n0.n), horizon, _rng(config))
    path_to_csv(path, out / "path.csv")
    orbit = integrate_kinetic(family, n0.x, horizon=max(path.t[-1], 1e-9), tol=1e-10)
    dist = orbit_distance(path.n / n0.N, orbit.x)
    lab.write_json(out / "powertail.json", {"jumps": path.jumps, "max_orbit_distance": float(dist.max()),
                                            "alpha": spec.alpha, "scaled": spec.scaled})
    return {"path": out / "path.csv", "report": out / "powertail.json"}


RUNNERS = {"simulate": run_simulate, "kinetic": run_kinetic, "value-iterate": run_value_iterate,
           "zero-sum": run_zero_sum, "equilibria": run_equilibria, "converge": run_converge,
           "growth": run_growth, "portrait": run_portrait, "tagged": run_tagged,
           "powertail": run_powertail}


def validate_config(command: str, config) -> None:
    base = lab.load_schema("config")
    schema = {"definitions": base["definitions"], "$ref": f"#/definitions/{command}"}
    import jsonschema

    errors = sorted(jsonschema.Draft7Validator(schema).iter_errors(config),
                    key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"{where}: {e.message}")


def execute(command: str, config: dict, out_dir=None) -> dict:
    """Run one command from a config record; returns the manifest written next to outputs."""
    if command not in RUNNERS:
        raise ValidationError(f"command: unknown {command!r}")
    validate_config(command, config)
    config = dict(config)
    if config.get("seed") is None:
        config["seed"] = int(np.random.SeedSequence().entropy % (2 ** 63))
    out = lab.resolve_output_dir(out_dir, config.get("output_dir"))
    outputs = RUNNERS[command](config, out)
    manifest = lab.build_manifest(command, {k: v for k, v in config.items() if k != "output_dir"},
                                  outputs)
    lab.write_json(out / "manifest.json", manifest)
    return manifest


def rerun(manifest_path, out_dir=None) -> tuple:
    """Repeat a run from its manifest; returns (identical, new manifest)."""
    with open(manifest_path) as fh:
        old = json.load(fh)
    lab.validate_document(old, "manifest")
    if out_dir is None:
        out_dir = Path(manifest_path).parent / "rerun"
    new = execute(old["command"], old["config"], out_dir)
    return new["outputs"] == old["outputs"], new


def _load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    except OSError as exc:
        raise ValidationError(f"cannot read config: {exc}") from None


def run_cli(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="meanfield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--out", help="output directory (default: $%s or ./%s)"
                       % (lab.OUTPUT_ENV, lab.DEFAULT_OUTPUT))
    p = sub.add_parser("rerun", help="repeat a run from its manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out")
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            same, new = rerun(args.manifest, args.out)
            print("identical" if same else "outputs differ")
            return 0 if same else 1
        config = _load_config(args.config)
        manifest = execute(args.command, config, args.out)
        print(json.dumps({"outputs": manifest["outputs"]}, indent=2, sort_keys=True))
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
