"""Catalog of concrete pressure-resistance games and related models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (ControlSet, PayoffFamily, PrincipalSpec, RateFamily, StructuredInspection,
                   ValidationError, constant_rates, controlled, default_detection,
                   imitation_rates, pressure_resistance_rates)
from .kinetic import replicator_rhs, sharp_theta, smooth_theta, solve_ode
from .principal import BestResponseMap

NO_CONTROL = ControlSet(np.zeros(0), np.zeros(0))


@dataclass
class GameModel:
    """A ready-made bundle of payoffs, principal and rates.

    ``driver`` says what generates the dynamics: "payoff" means
    pressure-resistance rates built from ``payoff`` with intensity ``kappa``;
    "rates" means the direct ``rates`` family (payoffs, when present, are
    kept for equilibrium analysis only).
    """

    name: str
    d: int
    payoff: Optional[PayoffFamily] = None
    principal: Optional[PrincipalSpec] = None
    rates: Optional[RateFamily] = None
    params: dict = field(default_factory=dict)
    kappa: float = 1.0
    driver: str = "payoff"
    sign_flag: int = 1
    principal_sign: int = 1
    index_map: Optional[list] = None
    blocks: Optional[list] = None
    rhs: Optional[Callable] = None

    def __post_init__(self):
        if self.driver == "payoff" and self.payoff is None:
            raise ValidationError(f"model {self.name}: payoff driver needs a payoff family")
        if self.driver == "rates" and self.rates is None:
            raise ValidationError(f"model {self.name}: rate driver needs a rate family")
        if self.principal is None:
            self.principal = PrincipalSpec(lambda x, b: 0.0, NO_CONTROL)

    @property
    def structured(self) -> Optional[StructuredInspection]:
        return self.principal.structured

    def rate_family(self) -> RateFamily:
        if self.driver == "rates":
            return self.rates
        return pressure_resistance_rates(self.payoff, self.kappa)

    def best_response_map(self, numeric: bool = False, **kw) -> BestResponseMap:
        if self.principal.control_set.dim == 0:
            return BestResponseMap.constant(np.zeros(0))
        if self.structured is not None and not numeric:
            return BestResponseMap.closed_form(self.principal)
        return BestResponseMap.numeric(self.principal, **kw)

    def b_policy(self, **kw) -> Callable:
        return self.best_response_map(**kw).policy()

    def controlled_rates(self, **kw) -> RateFamily:
        """Rates with the principal's best response plugged in, Q(x, b*(x))."""
        if self.principal.control_set.dim == 0:
            return self.rate_family()
        return controlled(self.rate_family(), self.b_policy(**kw))

    def kinetic_rhs(self, **kw) -> Callable:
        """(t, x) -> xdot for the controlled dynamics."""
        if self.rhs is not None:
            return self.rhs
        fam = self.controlled_rates(**kw)
        return lambda t, x: fam.drift(t, x)


def _b0(b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        return b
    return b[..., 0] if b.shape[-1] else np.asarray(0.0)


def _vec(v, d, name) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = np.full(d, float(v))
    if v.shape != (d,):
        raise ValidationError(f"{name} must have length {d}")
    return v


def _strictly_increasing(v, name):
    if np.any(np.diff(v) <= 0):
        k = int(np.argmax(np.diff(v) <= 0))
        raise ValidationError(f"{name} must be strictly increasing: "
                              f"{name}[{k}]={v[k]} >= {name}[{k + 1}]={v[k + 1]}")


def _box(params, default_hi):
    lo = float(params.get("b_min", 0.0))
    hi = float(params.get("b_max", default_hi))
    return ControlSet([lo], [hi])


def detection_probabilities(multipliers, congestion: bool = False, p=None):
    """p_j(x, b) = p(b) m_j, optionally scaled by (1 + x_j)/2."""
    m = np.asarray(multipliers, dtype=float)
    if np.any(m < 0) or np.any(m > 1):
        raise ValidationError("detection multipliers must lie in [0, 1]")
    p = p or default_detection()[0]

    def pj(x, b):
        base = p(_b0(b))[..., None] * m
        return base * 0.5 * (1.0 + x) if congestion else base * np.ones_like(x)

    return pj


def inspection_model(params) -> GameModel:
    d = int(params.get("d", 3))
    r = float(params.get("r", 1.0))
    rj = _vec(params.get("r_j", np.linspace(0.0, 1.0, d)), d, "r_j")
    fine = _vec(params.get("fines", 2.0 * rj), d, "fines")
    m = _vec(params.get("multipliers", 1.0), d, "multipliers")
    pj = params.get("p_j") or detection_probabilities(m, bool(params.get("congestion", True)))
    kB = float(params.get("kappa_B", 1.0))

    def R(x, b):
        q = pj(x, b)
        return r + (1.0 - q) * rj - q * fine

    def B(x, b):
        return -_b0(b) - kB * np.sum(x * R(x, b), axis=-1)

    pay = PayoffFamily(R, d, params.get("lipschitz_bound"), name="inspection")
    spec = PrincipalSpec(B, _box(params, 5.0), vectorized=True)
    return GameModel("inspection", d, pay, spec, params=dict(params),
                     kappa=float(params.get("kappa", 1.0)))


def corruption_model(params) -> GameModel:
    d = int(params.get("d", 3))
    rj = _vec(params.get("r_j", np.linspace(0.0, 1.0, d)), d, "r_j")
    w = float(params.get("w", 1.0))
    w0 = float(params.get("w0", 0.3))
    fine = _vec(params.get("fines", 2.0 * rj), d, "fines")
    m = _vec(params.get("multipliers", 1.0), d, "multipliers")
    pj = params.get("p_j") or detection_probabilities(m, bool(params.get("congestion", True)))
    kB = float(params.get("kappa_B", 1.0))

    def R(x, b):
        q = pj(x, b)
        return (1.0 - q) * (rj + w) + q * (w0 - fine)

    def B(x, b):
        # bribes that stay undetected are the principal's loss
        q = pj(x, b)
        return -_b0(b) - kB * np.sum(x * (1.0 - q) * rj, axis=-1)

    pay = PayoffFamily(R, d, params.get("lipschitz_bound"), name="corruption")
    spec = PrincipalSpec(B, _box(params, 5.0), vectorized=True)
    return GameModel("corruption", d, pay, spec, params=dict(params),
                     kappa=float(params.get("kappa", 1.0)))


def cyber_model(params) -> GameModel:
    """Defence levels r_j; the cost p_j c + r_j is minimized, so payoffs are negated."""
    d = int(params.get("d", 3))
    rj = _vec(params.get("r_j", np.linspace(0.0, 0.5, d)), d, "r_j")
    c = float(params.get("c", 2.0))
    # stronger defence lowers the infection chance
    m = _vec(params.get("multipliers", np.linspace(1.0, 0.2, d)), d, "multipliers")
    pj = params.get("p_j") or detection_probabilities(m, bool(params.get("congestion", True)))

    def R(x, b):
        return -(pj(x, b) * c + rj)

    def B(x, b):
        return c * np.sum(x * pj(x, b), axis=-1) - _b0(b)

    pay = PayoffFamily(R, d, params.get("lipschitz_bound"), name="cyber")
    spec = PrincipalSpec(B, _box(params, 5.0), vectorized=True)
    return GameModel("cyber", d, pay, spec, params=dict(params),
                     kappa=float(params.get("kappa", 1.0)), sign_flag=-1)


def terrorism_model(params) -> GameModel:
    """Attack levels j; p_j is the success probability, lowered by preemption b."""
    d = int(params.get("d", 2))
    S = _vec(params.get("S", np.linspace(1.0, 3.0, d)), d, "S")
    m = _vec(params.get("multipliers", np.linspace(0.6, 0.3, d)), d, "multipliers")
    rho_fail = float(params.get("rho_fail", 0.2))
    rho_succ = float(params.get("rho_succ", 0.4))
    congestion = bool(params.get("congestion", False))
    p = default_detection()[0]

    def pj(x, b):
        base = (1.0 - p(_b0(b)))[..., None] * m
        return base * 0.5 * (1.0 + x) if congestion else base * np.ones_like(x)

    def R(x, b):
        q = pj(x, b)
        bb = _b0(b)[..., None]
        return (1.0 - q) * rho_fail * bb + q * (S + rho_succ * bb)

    def cost(x, b):
        q = pj(x, b)
        bb = _b0(b)[..., None]
        return np.sum(x * ((1.0 - q) * bb + q * (bb + S)), axis=-1)

    pay = PayoffFamily(R, d, params.get("lipschitz_bound"), name="terrorism")
    spec = PrincipalSpec(lambda x, b: -cost(x, b), _box(params, 5.0), vectorized=True)
    model = GameModel("terrorism", d, pay, spec, params=dict(params),
                      kappa=float(params.get("kappa", 1.0)), principal_sign=-1)
    model.params["principal_cost"] = "minimized"
    return model


def minority_model(params) -> GameModel:
    """States (0, 1); x = fraction choosing 0 and R_1 = -R_0 = theta(x - 1/2)."""
    sharp = bool(params.get("sharp", False))
    eps = float(params.get("eps", 1e-3))
    theta = sharp_theta if sharp else (lambda z: smooth_theta(z, eps))

    def R(x, b):
        t = theta(x[..., 0] - 0.5)
        return np.stack([-t, t], axis=-1)

    pay = PayoffFamily(R, 2, name="minority")
    return GameModel("minority", 2, pay, params=dict(params),
                     kappa=float(params.get("kappa", 0.5)))


def sex_ratio_model(params) -> GameModel:
    """States (male, female); x = male fraction, R_female = x/(1-x), R_male = (1-x)/x."""
    clip = float(params.get("clip", 1e-6))

    def R(x, b):
        u = np.clip(x[..., 0], clip, 1.0 - clip)
        return np.stack([(1.0 - u) / u, u / (1.0 - u)], axis=-1)

    pay = PayoffFamily(R, 2, name="sex_ratio")
    return GameModel("sex_ratio", 2, pay, params=dict(params),
                     kappa=float(params.get("kappa", 1.0)))


def threshold_function(spec) -> Callable:
    """Threshold distribution F from a callable or a named form."""
    if callable(spec):
        return spec
    spec = dict(spec or {"form": "uniform"})
    form = spec.get("form", "uniform")
    if form == "uniform":
        return lambda x: np.asarray(x, dtype=float)
    if form == "power":
        k = float(spec.get("k", 2.0))
        return lambda x: np.asarray(x, dtype=float) ** k
    if form == "logistic":
        c, s = float(spec.get("center", 0.5)), float(spec.get("scale", 0.1))

        def F(x):
            g = lambda z: 1.0 / (1.0 + np.exp(-(z - c) / s))
            return (g(np.asarray(x, dtype=float)) - g(0.0)) / (g(1.0) - g(0.0))
        return F
    raise ValidationError(f"params.F.form: unknown threshold form {form!r}")


def threshold_model(params) -> GameModel:
    """States (excited, quiet); x = excited fraction, excitation at rate alpha F(x)."""
    F = threshold_function(params.get("F"))
    alpha = float(params.get("alpha", 1.0))
    z = np.linspace(0.0, 1.0, 201)
    Fz = np.asarray(F(z), dtype=float)
    if np.any(np.diff(Fz) < -1e-12) or Fz.min() < -1e-12 or Fz.max() > 1 + 1e-12:
        raise ValidationError("params.F: threshold F must be nondecreasing with values in [0, 1]")

    def ev(t, x, b):
        fx = np.clip(np.asarray(F(x[..., 0]), dtype=float), 0.0, 1.0)
        Q = np.zeros(x.shape[:-1] + (2, 2))
        Q[..., 1, 0] = alpha * fx
        Q[..., 0, 1] = alpha * (1.0 - fx)
        return Q

    rates = RateFamily(ev, 2, params.get("regularity", "lipschitz"), vectorized=True,
                       name="threshold")
    return GameModel("threshold", 2, rates=rates, params=dict(params), driver="rates")


def hawk_dove_payoffs(V, D, H, a=0.0, b=0.0) -> PayoffFamily:
    """States (hawk, dove); x = hawk fraction."""

    def R(x, bb):
        u = x[..., 0]
        hawk = (H + a * u) * u + V * (1.0 - u)
        dove = (D - b * u) * (1.0 - u)
        return np.stack([hawk, dove], axis=-1)

    z = np.linspace(0.0, 1.0, 401)
    slope = np.abs(np.gradient((H + a * z) * z + V * (1 - z), z)).max() + \
        np.abs(np.gradient((D - b * z) * (1 - z), z)).max()
    return PayoffFamily(R, 2, lipschitz_bound=float(slope), name="hawk_dove")


def hawk_dove_model(params) -> GameModel:
    V, D, H = float(params.get("V", 2.0)), float(params.get("D", 1.0)), float(params.get("H", -1.0))
    a, b = float(params.get("a", 0.0)), float(params.get("b", 0.0))
    if V <= D:
        raise ValidationError(f"params.V: hawk-dove needs V > D (got V={V}, D={D})")
    pay = hawk_dove_payoffs(V, D, H, a, b)
    kappa = float(params.get("kappa", 1.0))
    if params.get("smooth", False):
        z = np.linspace(0.0, 1.0, 1001)
        gap = pay(np.stack([z, 1 - z], axis=-1))
        baseline = float(params.get("baseline", 2.0 * np.abs(gap[:, 0] - gap[:, 1]).max() + 1.0))
        rates = imitation_rates(pay, kappa, baseline)
        return GameModel("hawk_dove", 2, pay, rates=rates, params=dict(params), kappa=kappa,
                         driver="rates")
    return GameModel("hawk_dove", 2, pay, params=dict(params), kappa=kappa)


def project_selection_payoffs(awards, costs, prob: Optional[Callable] = None):
    """R_{j,c}(x) = -c + A_j p(j, c, x_j) flattened in (j, c) row-major order.

    ``prob(j, c, y)`` is the selection probability with y the total bid
    fraction in direction j; the default increases in j and c and decreases
    in y.
    """
    A = np.asarray(awards, dtype=float)
    c = np.asarray(costs, dtype=float)
    nd, nc = A.size, c.size
    if prob is None:
        def prob(j, cc, y):
            return (j + 1.0) / nd * cc / (cc + 1.0) * np.exp(-y)
    index_map = [(j, k) for j in range(nd) for k in range(nc)]
    jj = np.repeat(np.arange(nd), nc)
    cc = np.tile(c, nd)

    def R(x, b):
        y = x.reshape(x.shape[:-1] + (nd, nc)).sum(axis=-1)
        yj = np.repeat(y, nc, axis=-1)
        return -cc + A[jj] * prob(jj, cc, yj)

    return PayoffFamily(R, nd * nc, name="project_selection"), index_map


def project_selection_model(params) -> GameModel:
    A = params.get("awards", [1.0, 2.0])
    c = params.get("costs", [0.1, 0.3])
    if np.any(np.diff(np.asarray(c, dtype=float)) <= 0):
        raise ValidationError("params.costs: cost levels must be strictly increasing")
    pay, index_map = project_selection_payoffs(A, c, params.get("prob"))
    return GameModel("project_selection", pay.d, pay, params=dict(params),
                     kappa=float(params.get("kappa", 1.0)), index_map=index_map)


def fines_model(params) -> GameModel:
    """R_j = w_j - p(b) f_j with principal B = -b + kappa_B (p(b) fbar - wbar)."""
    w = np.asarray(params.get("w", [1.0, 2.0]), dtype=float)
    d = w.size
    f = _vec(params["f"], d, "f") if "f" in params else float(params.get("lambda", 1.0)) * w
    _strictly_increasing(w, "w")
    _strictly_increasing(f, "f")
    if np.any(w <= 0) or np.any(f <= 0):
        raise ValidationError("params.w/f: wins and fines must be positive")
    kB = float(params.get("kappa_B", 1.0))
    st = StructuredInspection(f, w, kB)
    p = st.p
    hi = float(st.dp_inv(1.0 / (kB * f.max())))

    def R(x, b):
        return w - p(_b0(b))[..., None] * f

    def B(x, b):
        bb = _b0(b)
        return -bb + kB * (p(bb) * (x @ f) - x @ w)

    pay = PayoffFamily(R, d, lipschitz_bound=0.0, name="fines")
    spec = PrincipalSpec(B, _box(params, 1.5 * hi + 1.0), structured=st, vectorized=True)
    model = GameModel("fines", d, pay, spec, params=dict(params),
                      kappa=float(params.get("kappa", 1.0)))
    if "f" not in params:
        model.params["lambda"] = float(params.get("lambda", 1.0))
    return model


def proportional_fines_model(params) -> GameModel:
    params = dict(params)
    params.pop("f", None)
    model = fines_model(params)
    model.name = "proportional_fines"
    return model


def constant_model(params) -> GameModel:
    d = int(params.get("d", 2))
    Q = np.asarray(params.get("Q", np.zeros((d, d))), dtype=float)
    return GameModel("constant", Q.shape[0], rates=constant_rates(Q), params=dict(params),
                     driver="rates")


def zero_model(params) -> GameModel:
    d = int(params.get("d", 2))
    model = constant_model({"Q": np.zeros((d, d)).tolist()})
    model.name = "zero"
    model.params = dict(params)
    return model


def constant_payoff_model(params) -> GameModel:
    d = int(params.get("d", 2))
    level = float(params.get("level", 1.0))
    pay = PayoffFamily(lambda x, b: np.full(np.shape(x), level), d, lipschitz_bound=0.0,
                       name="constant_payoff")
    return GameModel("constant_payoff", d, pay, params=dict(params),
                     kappa=float(params.get("kappa", 1.0)))


def two_state_model(params) -> GameModel:
    """Constant two-state rates q12 (state 1 to 2) and q21."""
    q12, q21 = float(params.get("q12", 1.0)), float(params.get("q21", 1.0))
    model = constant_model({"Q": [[-q12, q12], [q21, -q21]]})
    model.name = "two_state"
    model.params = dict(params)
    return model


CATALOG = {
    "inspection": inspection_model,
    "corruption": corruption_model,
    "cyber": cyber_model,
    "terrorism": terrorism_model,
    "minority": minority_model,
    "sex_ratio": sex_ratio_model,
    "threshold": threshold_model,
    "hawk_dove": hawk_dove_model,
    "project_selection": project_selection_model,
    "fines": fines_model,
    "proportional_fines": proportional_fines_model,
    "constant": constant_model,
    "zero": zero_model,
    "constant_payoff": constant_payoff_model,
    "two_state": two_state_model,
}


def build_model(name: str, params: Optional[dict] = None) -> GameModel:
    """Construct a catalog model by name from a parameter record."""
    if name not in CATALOG:
        raise ValidationError(f"model: unknown name {name!r}; known: {sorted(CATALOG)}")
    return CATALOG[name](dict(params or {}))


def load_model(doc: dict) -> GameModel:
    """Model from a JSON-style document {"name": ..., "params": {...}}."""
    if "name" not in doc:
        raise ValidationError("model.name: missing")
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise ValidationError("model.params: must be an object")
    return build_model(doc["name"], params)


def _class_payoff(spec):
    if isinstance(spec, PayoffFamily):
        return spec.R, spec.d
    R, d = spec
    return R, int(d)


def build_allocation_model(classes: Sequence, weights=None, mode: str = "C1",
                           kappas=None, principal: Optional[PrincipalSpec] = None) -> GameModel:
    """Multi-class pressure-resistance model.

    Each class is a PayoffFamily or a pair (R, d). In mode C1 the class
    payoff receives its own block x_alpha and the state is a product of
    simplices; in C2 it receives the whole joint vector, which lives on one
    simplex of dimension sum d_alpha.
    """
    A = len(classes)
    if A < 1:
        raise ValidationError("classes: need at least one class")
    fns = [_class_payoff(c) for c in classes]
    dims = [d for _, d in fns]
    cuts = np.concatenate([[0], np.cumsum(dims)])
    total = int(cuts[-1])
    kappas = np.ones(A) if kappas is None else _vec(kappas, A, "kappas")
    principal = principal or PrincipalSpec(lambda x, b: 0.0, NO_CONTROL)
    if principal.control_set.dim == 0:
        brm = BestResponseMap.constant(np.zeros(0))
    elif principal.structured is not None:
        brm = BestResponseMap.closed_form(principal)
    else:
        brm = BestResponseMap.numeric(principal)

    if mode == "C1":
        weights = np.ones(A) / A if weights is None else np.asarray(weights, dtype=float)
        if weights.shape != (A,) or abs(weights.sum() - 1.0) > 1e-12 or np.any(weights < 0):
            raise ValidationError(f"weights: need {A} nonnegative weights summing to 1")

        def rhs(t, x):
            x = np.asarray(x, dtype=float)
            b = brm(x)
            out = np.empty_like(x)
            for a, (R, _) in enumerate(fns):
                xa = x[..., cuts[a]:cuts[a + 1]]
                r = np.asarray(R(xa, b), dtype=float)
                rbar = np.sum(xa * r, axis=-1, keepdims=True)
                out[..., cuts[a]:cuts[a + 1]] = kappas[a] * weights[a] * xa * (r - rbar)
            return out

        blocks = [(int(cuts[a]), int(cuts[a + 1])) for a in range(A)]
    elif mode == "C2":
        if weights is not None:
            raise ValidationError("weights: not used in mode C2")
        kap = float(kappas[0])

        def rhs(t, x):
            x = np.asarray(x, dtype=float)
            b = brm(x)
            r = np.concatenate([np.asarray(R(x, b), dtype=float) for R, _ in fns], axis=-1)
            rbar = np.sum(x * r, axis=-1, keepdims=True)
            return kap * x * (r - rbar)

        blocks = [(0, total)]
    else:
        raise ValidationError(f"mode: expected 'C1' or 'C2', got {mode!r}")

    index_map = [(a, j) for a in range(A) for j in range(dims[a])]
    model = GameModel(f"allocation_{mode}", total, principal=principal, params={"mode": mode},
                      driver="custom", index_map=index_map, blocks=blocks, rhs=rhs)
    return model


def allocation_initial(blocks, parts) -> np.ndarray:
    """Concatenate per-block distributions into one state vector."""
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def swarm_rhs(params: dict, state) -> np.ndarray:
    """(s, x1, x2) -> derivatives, with s' = delta - alpha (nu1 x1 + nu2 x2).

    x_i is the engaged fraction of type-i workers and nu_i = n_i / N the
    type share, so that alpha (N_1 + N_2)/N = alpha (nu1 x1 + nu2 x2).
    """
    s, x1, x2 = np.asarray(state, dtype=float)
    delta, alpha, p = float(params["delta"]), float(params["alpha"]), float(params["p"])
    if p < 0:
        raise ValidationError("params.p: give-up probability must be nonnegative")
    nu1 = float(params.get("nu1", 0.5))
    nu2 = float(params.get("nu2", 1.0 - nu1))
    T1, T2 = params["T1"], params["T2"]
    t1 = T1(s) if callable(T1) else float(T1)
    t2 = T2(s) if callable(T2) else float(T2)
    if t1 < 0 or t2 < 0:
        raise ValidationError("params.T1/T2: propensities must be nonnegative")
    return np.array([delta - alpha * (nu1 * x1 + nu2 * x2),
                     t1 * (1.0 - x1) - p * x1,
                     t2 * (1.0 - x2) - p * x2])


def integrate_swarm(params: dict, state0, horizon: float, tol: float = 1e-10, t_eval=None):
    """Plain adaptive integration of the swarm system on [0, inf) x [0, 1]^2."""
    return solve_ode(lambda t, y: swarm_rhs(params, y), 0.0, state0, horizon, tol=tol,
                     t_eval=t_eval)


def swarm_rest_point(params: dict, s: float) -> np.ndarray:
    """x_i* = T_i/(T_i + p) at stimulus level s."""
    p = float(params["p"])
    out = []
    for key in ("T1", "T2"):
        T = params[key]
        t = T(s) if callable(T) else float(T)
        out.append(t / (t + p))
    return np.array(out)


def replicator_for(model: GameModel, b_policy=None) -> Callable:
    """Generic replicator right-hand side for a payoff-driven model."""
    return replicator_rhs(model.payoff, model.kappa, b_policy)
