"""Experiment harness: convergence studies, phase portraits, output files and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .chain import ensemble_ctmc, spawn_seeds
from .core import NumericalError, PopulationState, ValidationError, as_simplex, simplex_grid
from .equilibria import find_rest_points
from .kinetic import integrate_kinetic, simplex_project, solve_ode

OUTPUT_ENV = "MEANFIELD_OUTPUT_DIR"
DEFAULT_OUTPUT = "meanfield_out"
SCHEMA_DIR = Path(__file__).with_name("schemas")

# conventions a run depends on, recorded in every manifest
DECISIONS = {
    "weak_error_metric": "observable-level error |E f(X^N) - f(X)|",
    "slope_windows": {"C2": [-1.3, -0.7], "lipschitz": [-0.8, -0.3]},
    "value_lattice": "simplex lattice Z^d/M with Freudenthal barycentric interpolation",
    "zero_sum_inner": "exhaustive control grids",
    "coalition_pairs": "ordered pairs, same-size merges at x_i (x_i - h)",
    "growth_shift": "diagonal loss shift times 1.25, step doubling with local extrapolation",
    "growth_cap": "merges past K routed to overflow mass",
    "tie_break": "lexicographically smallest control",
}

RATE_CLASS = {"C2": ("O(1/N)", -1.0, (-1.3, -0.7)),
              "lipschitz": ("O(1/sqrt(N))", -0.5, (-0.8, -0.3))}


# ---------------------------------------------------------------- observables

def expression_function(expr: str, names: Sequence[str]) -> Callable:
    """Vectorized numeric function from a formula string over the given variable names."""
    import sympy

    syms = sympy.symbols(list(names))
    try:
        parsed = sympy.sympify(expr, locals={n: s for n, s in zip(names, syms)})
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ValidationError(f"cannot parse expression {expr!r}: {exc}") from None
    extra = parsed.free_symbols - set(syms)
    if extra:
        raise ValidationError(f"expression {expr!r} uses unknown names {sorted(map(str, extra))}")
    return sympy.lambdify(syms, parsed, modules="numpy")


def make_observable(spec, d: int) -> Callable:
    """Observable f(X) over points of shape (..., d).

    ``spec`` is a callable, or a record {"kind": "coordinate", "index": i},
    {"kind": "l1", "target": [...]} or {"kind": "expression", "expr": "..."}
    with variables x0..x{d-1}.
    """
    if callable(spec):
        return spec
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValidationError("observable: expected a record with a 'kind'")
    kind = spec["kind"]
    if kind == "coordinate":
        i = int(spec.get("index", 0))
        if not 0 <= i < d:
            raise ValidationError(f"observable.index: {i} outside 0..{d - 1}")
        return lambda X: np.asarray(X)[..., i]
    if kind == "l1":
        target = as_simplex(spec["target"])
        if target.size != d:
            raise ValidationError("observable.target: wrong dimension")
        return lambda X: np.abs(np.asarray(X) - target).sum(axis=-1)
    if kind == "expression":
        fn = expression_function(spec["expr"], [f"x{i}" for i in range(d)])

        def f(X):
            X = np.asarray(X, dtype=float)
            out = fn(*np.moveaxis(X, -1, 0))
            return np.broadcast_to(np.asarray(out, dtype=float), X.shape[:-1]).copy()

        return f
    raise ValidationError(f"observable.kind: unknown {kind!r}")


# ---------------------------------------------------------------- convergence

@dataclass
class ExperimentSpec:
    model: object
    observable: object
    Ns: Sequence[int]
    replicas: int
    horizon: float
    x0: Sequence[float]
    seed: Optional[int] = None
    eps_c: float = 0.5
    tol: float = 1e-10

    def __post_init__(self):
        self.Ns = [int(n) for n in self.Ns]
        if not self.Ns or any(b <= a for a, b in zip(self.Ns, self.Ns[1:])):
            raise ValidationError("Ns: must be a nonempty strictly increasing list")
        if self.replicas < 2:
            raise ValidationError("replicas: need at least 2 for a standard error")
        if not self.horizon > 0:
            raise ValidationError("horizon: must be positive")
        if self.tol > 1e-8:
            raise ValidationError("tol: the kinetic reference needs tol <= 1e-8")


@dataclass
class ConvergenceResult:
    rows: list
    slope: Optional[float]
    intercept: Optional[float]
    status: str
    regularity: str
    rate_class: str
    window: tuple
    ratios: list = field(default_factory=list)

    @property
    def in_window(self) -> bool:
        return self.slope is not None and self.window[0] <= self.slope <= self.window[1]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "slope": self.slope, "intercept": self.intercept,
                "status": self.status, "regularity": self.regularity,
                "rate_class": self.rate_class, "window": list(self.window),
                "in_window": self.in_window, "ratios": self.ratios}


def weighted_loglog_slope(Ns, errors, stderrs):
    """Least-squares slope of log error on log N with weights (error / stderr)^2."""
    Ns, e, s = (np.asarray(v, dtype=float) for v in (Ns, errors, stderrs))
    w = np.where(s > 0, (e / np.where(s > 0, s, 1.0)) ** 2, 1e12)
    A = np.column_stack([np.ones_like(Ns), np.log(Ns)])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], np.log(e) * sw, rcond=None)
    return float(coef[1]), float(coef[0])


def convergence_experiment(spec: ExperimentSpec) -> ConvergenceResult:
    """Weak error of the N-agent chain against the kinetic limit for each N.

    For each N the start is rounded to the lattice and the reference is the
    kinetic solution from that rounded start. Replica seeds are spawned from
    ``spec.seed``, one stream per N.
    """
    model = spec.model
    family = model.controlled_rates() if hasattr(model, "controlled_rates") else model
    d = family.d
    f = make_observable(spec.observable, d)
    seeds = spawn_seeds(spec.seed, len(spec.Ns))
    rows = []
    for N, ss in zip(spec.Ns, seeds):
        n0 = PopulationState.from_fractions(spec.x0, N)
        ref_traj = integrate_kinetic(family, n0.x, horizon=spec.horizon, tol=spec.tol,
                                     record_steps=False)
        ref = float(f(ref_traj.final))
        counts = ensemble_ctmc(family, np.array(n0.n), [spec.horizon], spec.replicas,
                               np.random.default_rng(ss))[:, 0, :]
        vals = f(counts / float(N))
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / np.sqrt(spec.replicas))
        rows.append({"N": N, "error": abs(mean - ref), "stderr": se, "mean": mean,
                     "reference": ref})
    errs = np.array([r["error"] for r in rows])
    ses = np.array([r["stderr"] for r in rows])
    reg = getattr(family, "regularity", "lipschitz")
    label, _, window = RATE_CLASS[reg]
    ratios = [float(a / b) if b > 0 else None for a, b in zip(errs, errs[1:])]
    if np.all(errs <= 1e-14):
        return ConvergenceResult(rows, None, None, "degenerate", reg, label, window, ratios)
    if np.all(errs < 2 * ses):
        return ConvergenceResult(rows, None, None, "noise-dominated", reg, label, window, ratios)
    keep = errs > 0
    slope, icpt = weighted_loglog_slope(np.array(spec.Ns)[keep], errs[keep], ses[keep])
    return ConvergenceResult(rows, slope, icpt, "ok", reg, label, window, ratios)


# ---------------------------------------------------------------- phase portraits

def _vertex_name(x) -> Optional[str]:
    k = int(np.argmax(x))
    if abs(x[k] - 1.0) < 1e-9:
        return f"e_{k + 1}"
    return None


def point_label(x) -> str:
    return _vertex_name(x) or "(" + ", ".join(f"{v:.4g}" for v in x) + ")"


@dataclass
class PortraitRow:
    start: np.ndarray
    final: np.ndarray
    label: str


def phase_portrait(model, resolution: int = 10, horizon: float = 200.0, tol: float = 1e-4,
                   interior: bool = True, rest_points=None) -> list:
    """Limit label of the kinetic flow from each start of a simplex grid.

    A start is labeled by the rest point (vertices as e_k) or rest family
    ("plane") within ``tol`` of its state at the horizon, as "continuum"
    when the flow does not move it, and "undetermined" otherwise.
    """
    d = model.d
    if d not in (2, 3):
        raise ValidationError("phase portraits support d in {2, 3}")
    rhs = model.kinetic_rhs()
    if rest_points is None and model.payoff is not None:
        brm = model.best_response_map()
        rest_points = find_rest_points(model.payoff, brm, d, {"kappa": model.kappa, "rhs": rhs,
                                                              "stability": False})
    points = list(rest_points) if rest_points is not None else []
    families = list(getattr(rest_points, "families", [])) if rest_points is not None else []
    starts = simplex_grid(d, resolution)
    if interior:
        starts = starts[np.all(starts > 0, axis=1)]
    rows = []
    for x0 in starts:
        if np.abs(rhs(0.0, x0)).sum() < 1e-14:
            # a start on an isolated rest point keeps that point's label
            on = [p for p in points if np.abs(p.x - x0).sum() <= tol]
            rows.append(PortraitRow(x0, x0.copy(), point_label(on[0].x) if on else "continuum"))
            continue
        try:
            res = solve_ode(rhs, 0.0, x0, horizon, 1e-10, positive=True, project=simplex_project,
                            record_steps=False)
            xf = res.y[-1]
        except NumericalError:
            rows.append(PortraitRow(x0, x0.copy(), "undetermined"))
            continue
        label = "undetermined"
        near = [p for p in points if np.abs(p.x - xf).sum() <= tol]
        if near:
            label = point_label(min(near, key=lambda p: np.abs(p.x - xf).sum()).x)
        elif any(fam.contains(xf, tol) for fam in families):
            label = "plane"
        elif not points and not families and np.abs(rhs(0.0, xf)).sum() < tol * 1e-2:
            label = point_label(xf)
        rows.append(PortraitRow(x0, xf, label))
    return rows


# ---------------------------------------------------------------- output

def resolve_output_dir(cli_value=None, config_value=None) -> Path:
    out = cli_value or config_value or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _plain(v):
    if isinstance(v, np.ndarray):
        return [_plain(u) for u in v.tolist()]
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, dict):
        return {str(k): _plain(u) for k, u in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(u) for u in v]
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def write_json(path, doc) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(_plain(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def code_version() -> dict:
    from . import __version__

    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return {"package": __version__, "source_sha256": h.hexdigest()}


def build_manifest(command: str, config: dict, outputs: dict) -> dict:
    return {"command": command, "config": _plain(config), "seed": config.get("seed"),
            "code_version": code_version(), "decisions": DECISIONS,
            "outputs": {name: file_digest(p) for name, p in sorted(outputs.items())}}


def load_schema(name: str) -> dict:
    with open(SCHEMA_DIR / f"{name}.schema.json") as fh:
        return json.load(fh)


def validate_document(doc, schema_name: str) -> None:
    """Raise ValidationError naming the offending key when doc breaks the schema."""
    import jsonschema

    schema = load_schema(schema_name)
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"{where}: {e.message}")
