"""Declarative benchmark scenarios and the builders behind them.

Scenario files (``.scn``) are TOML documents. Signals are sums of terms from
a fixed basis so that a file fully determines the data. See the README for
the grammar.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import tomli
import tomli_w

from .estimators import (
    EstimatorTrace,
    GradientConfig,
    ObserverConfig,
    PlantModel,
    RegressionData,
    build_error_system,
    norm_arc,
    run_continuous_gradient,
    run_continuous_observer,
    run_discrete_gradient,
    run_discrete_observer,
    run_hybrid_gradient,
    run_hybrid_observer,
    scenario_hash,
)
from .hybrid_sim import LinearHybridSystem, SimConfig
from .hybrid_time import HybridArc, HybridTimeDomain, flow_grid, make_domain, periodic_domain

TWO_PI = 2.0 * math.pi
BASIS = ("const", "sin", "cos", "exp", "poly", "table")
METHODS = ("hybrid", "continuous", "discrete")
COMPARATORS = ("<", "<=", ">", ">=", "==")


class ScenarioError(ValueError):
    pass


class ParseError(ScenarioError):
    pass


class ValidationError(ScenarioError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


class MisalignedOldData(ScenarioError):
    pass


class IntegrationFailure(RuntimeError):
    pass


# --- signal basis -----------------------------------------------------------


def _term_fn(term: dict, path: str) -> Callable[[float, int], float]:
    if not isinstance(term, dict):
        raise ValidationError(path, "a term must be a table")
    fn = term.get("fn")
    if fn not in BASIS:
        raise ValidationError(f"{path}.fn", f"unknown basis function {fn!r}; expected one of {BASIS}")
    arg = term.get("arg", "t")
    if arg not in ("t", "j"):
        raise ValidationError(f"{path}.arg", "must be 't' or 'j'")
    pick = (lambda t, j: t) if arg == "t" else (lambda t, j: float(j))

    def num(key, default=None):
        v = term.get(key, default)
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ValidationError(f"{path}.{key}", "number expected")
        return float(v)

    if fn == "const":
        c = num("value")
        return lambda t, j: c
    if fn in ("sin", "cos"):
        amp, freq, phase = num("amp", 1.0), num("freq", 1.0), num("phase", 0.0)
        f = math.sin if fn == "sin" else math.cos
        return lambda t, j: amp * f(freq * pick(t, j) + phase)
    if fn == "exp":
        amp, rate = num("amp", 1.0), num("rate", 1.0)
        return lambda t, j: amp * math.exp(rate * pick(t, j))
    if fn == "poly":
        coeffs = term.get("coeffs")
        if not isinstance(coeffs, list) or not coeffs:
            raise ValidationError(f"{path}.coeffs", "non-empty list expected")
        cs = [float(c) for c in coeffs]
        return lambda t, j: sum(c * pick(t, j) ** i for i, c in enumerate(cs))
    breaks, vals = term.get("breaks"), term.get("values")
    if not isinstance(breaks, list) or not isinstance(vals, list) or len(breaks) != len(vals) or not breaks:
        raise ValidationError(path, "table needs equal-length 'breaks' and 'values'")
    bs, vs = np.array(breaks, dtype=float), np.array(vals, dtype=float)
    if np.any(np.diff(bs) <= 0):
        raise ValidationError(f"{path}.breaks", "must be strictly increasing")

    def table(t, j):
        i = int(np.searchsorted(bs, pick(t, j) + 1e-12, side="right")) - 1
        return float(vs[max(i, 0)])

    return table


def _vector_fn(components, path: str) -> Callable[[float, int], np.ndarray]:
    if not isinstance(components, list) or not components:
        raise ValidationError(path, "list of components expected")
    comp_fns = []
    for i, comp in enumerate(components):
        terms = comp if isinstance(comp, list) else [comp]
        if not terms:
            raise ValidationError(f"{path}[{i}]", "component needs at least one term")
        comp_fns.append([_term_fn(tm, f"{path}[{i}][{k}]") for k, tm in enumerate(terms)])
    return lambda t, j: np.array([sum(f(t, j) for f in fs) for fs in comp_fns])


def signal_arc(sig: dict, dom: HybridTimeDomain, h: float, path: str = "signal") -> HybridArc:
    """Sample a ``{flow = [...], jump = [...]}`` signal definition on ``dom``."""
    if not isinstance(sig, dict) or "flow" not in sig:
        raise ValidationError(path, "signal needs a 'flow' list")
    flow = _vector_fn(sig["flow"], f"{path}.flow")
    jump = _vector_fn(sig["jump"], f"{path}.jump") if "jump" in sig else None
    if jump is not None and len(sig["jump"]) != len(sig["flow"]):
        raise ValidationError(f"{path}.jump", "must have as many components as flow")
    return HybridArc.from_function(dom, flow, h, jump_fn=jump)


# --- scenario spec ----------------------------------------------------------


@dataclass
class Expectation:
    metric: str
    op: str
    value: float
    tol: float = 0.0
    at: float | None = None

    def to_dict(self) -> dict:
        d = {"metric": self.metric, "op": self.op, "value": self.value, "tol": self.tol}
        if self.at is not None:
            d["at"] = self.at
        return d


@dataclass
class ScenarioSpec:
    name: str
    kind: str
    sim: dict = field(default_factory=dict)
    domain: dict = field(default_factory=dict)
    signals: dict = field(default_factory=dict)
    theta: list = field(default_factory=list)
    gradient: dict = field(default_factory=dict)
    mixed: dict = field(default_factory=dict)
    plant: dict = field(default_factory=dict)
    observer: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: list(METHODS))
    expect: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind, "methods": list(self.methods)}
        for key in ("sim", "domain", "signals", "gradient", "mixed", "plant", "observer"):
            if getattr(self, key):
                d[key] = copy.deepcopy(getattr(self, key))
        if self.theta:
            d["theta"] = list(self.theta)
        if self.expect:
            d["expect"] = [e.to_dict() for e in self.expect]
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @property
    def hash(self) -> str:
        return scenario_hash(self.dumps())

    def sim_config(self) -> SimConfig:
        s = self.sim
        return SimConfig(
            h=float(s.get("h", 0.01)),
            T_max=float(s.get("T_max", math.inf)),
            J_max=int(s.get("J_max", 10**9)),
            zeno_guard=int(s.get("zeno_guard", 100)),
        )


def _require(d: dict, key: str, path: str, types=None):
    if key not in d:
        raise ValidationError(f"{path}.{key}" if path else key, "missing")
    v = d[key]
    if types is not None and (not isinstance(v, types) or isinstance(v, bool) and bool not in types):
        raise ValidationError(f"{path}.{key}" if path else key, f"expected {types}")
    return v


def _num_list(v, path: str, n: int | None = None) -> list[float]:
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ValidationError(path, "list of numbers expected")
    if n is not None and len(v) != n:
        raise ValidationError(path, f"expected {n} entries, got {len(v)}")
    return [float(x) for x in v]


def from_dict(d: dict) -> ScenarioSpec:
    """Validate a parsed document and build the spec."""
    if not isinstance(d, dict) or not d:
        raise ParseError("empty scenario")
    known = {"name", "kind", "sim", "domain", "signals", "theta", "gradient", "mixed",
             "plant", "observer", "methods", "expect"}
    for key in d:
        if key not in known:
            raise ValidationError(key, "unknown key")
    name = _require(d, "name", "", str)
    kind = _require(d, "kind", "", str)
    if kind not in ("regression", "plant"):
        raise ValidationError("kind", "must be 'regression' or 'plant'")
    methods = d.get("methods", list(METHODS))
    if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods):
        raise ValidationError("methods", f"non-empty subset of {METHODS} expected")
    sim = d.get("sim", {})
    for key, val in sim.items():
        if key not in ("h", "T_max", "J_max", "zeno_guard"):
            raise ValidationError(f"sim.{key}", "unknown key")
        if not isinstance(val, (int, float)) or isinstance(val, bool) or not val > 0:
            raise ValidationError(f"sim.{key}", "positive number expected")
    expect = []
    for i, e in enumerate(d.get("expect", [])):
        p = f"expect[{i}]"
        metric = _require(e, "metric", p, str)
        op = _require(e, "op", p, str)
        if op not in COMPARATORS:
            raise ValidationError(f"{p}.op", f"one of {COMPARATORS} expected")
        value = float(_require(e, "value", p, (int, float)))
        at = e.get("at")
        expect.append(Expectation(metric, op, value, float(e.get("tol", 0.0)), None if at is None else float(at)))
    spec = ScenarioSpec(
        name=name,
        kind=kind,
        sim=dict(sim),
        domain=dict(d.get("domain", {})),
        signals=dict(d.get("signals", {})),
        theta=_num_list(d["theta"], "theta") if "theta" in d else [],
        gradient=dict(d.get("gradient", {})),
        mixed=dict(d.get("mixed", {})),
        plant=dict(d.get("plant", {})),
        observer=dict(d.get("observer", {})),
        methods=list(methods),
        expect=expect,
    )
    _validate(spec)
    return spec


def _validate(spec: ScenarioSpec) -> None:
    if spec.kind == "regression":
        if spec.mixed:
            m = spec.mixed
            _require(m, "real_time", "mixed", dict)
            _require(m, "old_psi", "mixed", list)
            _num_list(_require(m, "treatment_times", "mixed", list), "mixed.treatment_times")
            _require(m, "horizon", "mixed", (int, float))
        else:
            _domain_from(spec.domain)
            if "psi" not in spec.signals:
                raise ValidationError("signals.psi", "missing")
        if not spec.theta and "y" not in spec.signals:
            raise ValidationError("theta", "either theta or signals.y is required")
        m_theta = len(spec.theta) if spec.theta else None
        g = spec.gradient
        for key in ("gamma_c", "gamma_d"):
            if key in g and not (isinstance(g[key], (int, float)) and g[key] > 0):
                raise ValidationError(f"gradient.{key}", "positive number expected")
        if "theta_hat0" in g:
            _num_list(g["theta_hat0"], "gradient.theta_hat0", m_theta)
    else:
        p = spec.plant
        model = _require(p, "model", "plant", str)
        if model not in PLANTS:
            raise ValidationError("plant.model", f"unknown plant {model!r}; known: {sorted(PLANTS)}")
        _num_list(_require(p, "x0", "plant", list), "plant.x0", 2)
        if "u" in p and not isinstance(p["u"], (int, float)):
            raise ValidationError("plant.u", "number expected")
        for key in ("K_c", "K_d", "x_hat0", "Gamma_c0", "Gamma_d0"):
            if key in spec.observer:
                _num_list(spec.observer[key], f"observer.{key}", 2)
        for key in ("gamma_c", "gamma_d"):
            if key in spec.observer and not spec.observer[key] > 0:
                raise ValidationError(f"observer.{key}", "positive number expected")


def _domain_from(d: dict) -> HybridTimeDomain:
    if not d:
        raise ValidationError("domain", "missing")
    try:
        if "breakpoints" in d:
            bps = d["breakpoints"]
            if not isinstance(bps, list) or not bps:
                raise ValidationError("domain.breakpoints", "non-empty list expected")
            return make_domain([(float(a), float(b), int(j)) for a, b, j in bps])
        period = float(_require(d, "period", "domain", (int, float)))
        n = int(_require(d, "num_periods", "domain", int))
        if n < 1:
            raise ValidationError("domain.num_periods", "must be >= 1")
        return periodic_domain(period, n, d.get("t_final"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError("domain", str(exc)) from None


def loads(text: str) -> ScenarioSpec:
    if not text.strip():
        raise ParseError("empty scenario")
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(str(exc)) from None
    return from_dict(doc)


def bundled_path(name: str) -> Path:
    """Path of a scenario shipped with the package (``eq261`` or ``eq261.scn``)."""
    fname = name if name.endswith(".scn") else f"{name}.scn"
    return Path(str(resources.files("hyperest") / "data" / fname))


def bundled_names() -> list[str]:
    root = Path(str(resources.files("hyperest") / "data"))
    return sorted(p.name for p in root.glob("*.scn"))


def resolve_path(path) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and p.parent == Path("."):
        b = bundled_path(p.name)
        if b.exists():
            return b
    return p


def load_scenario(path) -> ScenarioSpec:
    """Read and validate a scenario; bare names fall back to bundled files."""
    p = resolve_path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from None
    return loads(text)


def save_scenario(spec: ScenarioSpec, path) -> None:
    Path(path).write_text(spec.dumps())


# --- builders ---------------------------------------------------------------


def _regression_from(psi: HybridArc, theta) -> RegressionData:
    th = np.asarray(theta, dtype=float).reshape(-1, 1)
    y = psi.map(lambda v: v.T @ th)
    return RegressionData(psi, y, th)


def build_regressor_eq261(gamma: float = 1.0, num_periods: int = 9, h: float = 0.01, theta=(1.0, -2.0)):
    """Regressor ``[sin t, 0]`` on flows and ``[0.5, 1]`` at the jumps ``t = 2 pi k``.

    Returns:
        (RegressionData, LinearHybridSystem) with the gradient error pair for
        gain ``gamma`` on both flows and jumps.
    """
    if not (isinstance(num_periods, int) and num_periods >= 1):
        raise ValueError("num_periods must be a positive integer")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    dom = periodic_domain(TWO_PI, num_periods)
    psi = HybridArc.from_function(
        dom, lambda t, j: np.array([math.sin(t), 0.0]), h, jump_fn=lambda t, j: np.array([0.5, 1.0])
    )
    data = _regression_from(psi, theta)
    return data, gradient_error_system(psi, gamma, gamma)


def gradient_error_system(psi: HybridArc, gamma_c: float, gamma_d: float) -> LinearHybridSystem:
    A = psi.map(lambda v: gamma_c * v @ v.T)
    B = psi.map(lambda v: gamma_d * v @ v.T / (1.0 + gamma_d * float(np.sum(v * v))))
    return LinearHybridSystem(psi.domain, A, B)


def build_mixed_data_scenario(
    real_time: tuple[Callable[[float], np.ndarray], Callable[[float], float]],
    old_samples: Sequence[tuple[Sequence[float], float]],
    treatment_times: Sequence[float],
    horizon: float,
    h: float = 0.01,
    theta_true=None,
) -> RegressionData:
    """Merge a real-time regressor with old samples processed at treatment times.

    Interval ``j`` is ``[t_j, t_{j+1}]`` with ``t_j`` the treatment times; on
    flows the regressor is the real-time ``psi1(t)``, and at the ``k``-th jump
    it is the ``k``-th old sample.
    """
    psi1, y1 = real_time
    ts = [float(t) for t in treatment_times]
    if len(old_samples) != len(ts):
        raise MisalignedOldData(f"{len(old_samples)} old samples for {len(ts)} treatment times")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise MisalignedOldData("treatment times must be strictly increasing")
    if ts and not (0.0 < ts[0] and ts[-1] < horizon):
        raise MisalignedOldData("treatment times must lie strictly inside (0, horizon)")
    edges = [0.0] + ts + [float(horizon)]
    dom = make_domain([(edges[k], edges[k + 1], k) for k in range(len(edges) - 1)])
    old_psi = [np.asarray(p, dtype=float).reshape(-1) for p, _ in old_samples]
    old_y = [float(y) for _, y in old_samples]
    psi = HybridArc.from_function(
        dom, lambda t, j: np.asarray(psi1(t), dtype=float), h, jump_fn=lambda t, j: old_psi[j]
    )
    y = HybridArc.from_function(dom, lambda t, j: float(y1(t)), h, jump_fn=lambda t, j: old_y[j])
    return RegressionData(psi, y, theta_true)


def build_old_data_plant(
    A2: Callable[[float], np.ndarray],
    B2: Callable[[float], np.ndarray],
    past_times: Sequence[float],
    h: float = 1e-3,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Discrete pairs ``(A2(j), B2(j))`` from a continuous past-data model.

    ``A2(j)`` is the transition matrix of ``x' = A2(t) x`` from ``tau_j`` to
    ``tau_{j+1}``; ``B2(j)`` is the integral of ``M(tau_{j+1}, s) B2(s)``,
    obtained as the zero-state response of ``z' = A2(t) z + B2(t)``.
    Both are integrated together with classical RK4 at step ``h``.
    """
    taus = [float(t) for t in past_times]
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise ValueError("past_times must be strictly increasing")
    pairs = []
    for a, b in zip(taus, taus[1:]):
        n = np.atleast_2d(A2(a)).shape[0]
        q = np.asarray(B2(a), dtype=float).reshape(n, -1).shape[1]
        W = np.hstack([np.eye(n), np.zeros((n, q))])

        def f(t, W):
            At = np.atleast_2d(np.asarray(A2(t), dtype=float))
            Bt = np.asarray(B2(t), dtype=float).reshape(n, q)
            return At @ W + np.hstack([np.zeros((n, n)), Bt])

        ts = flow_grid(a, b, h)
        for t0, t1 in zip(ts[:-1], ts[1:]):
            d = t1 - t0
            k1 = f(t0, W)
            k2 = f(t0 + d / 2, W + d / 2 * k1)
            k3 = f(t0 + d / 2, W + d / 2 * k2)
            k4 = f(t1, W + d * k3)
            W = W + d / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(W)):
            raise IntegrationFailure(f"non-finite transition on [{a}, {b}]")
        pairs.append((W[:, :n], W[:, n:]))
    return pairs


BALL_THETA = 9.81
BALL_RESTITUTION_SCALE = 12.2625
BALL_X0 = (5.0, 0.0)


def build_bouncing_ball(theta: float = BALL_THETA, u: float = 0.0):
    """Bouncing ball with an unknown gravity-like parameter in flows and jumps.

    Returns:
        (PlantModel, ObserverConfig, SimConfig) with the benchmark gains,
        initial estimates and a horizon of 40 s or 25 jumps.
    """
    A_c = np.array([[0.0, 1.0], [0.0, -0.1]])
    A_d = np.array([[-1.0, 0.0], [0.0, 0.0]])
    Psi_c = np.array([[0.0], [-1.0]])
    plant = PlantModel(
        A_c=lambda t, j, y, u, x: A_c,
        A_d=lambda t, j, y, u, x: A_d,
        Psi_c=lambda t, j, y, u, x: Psi_c,
        # evaluated on the plant's pre-impact velocity
        Psi_d=lambda t, j, y, u, x: np.array([[0.0], [-float(x[1, 0]) / BALL_RESTITUTION_SCALE]]),
        H=np.array([[1.0, 0.0]]),
        flow_set=lambda x: x[0] >= 0.0,
        jump_set=lambda x: x[0] <= 0.0 and x[1] <= 0.0,
        B_c=np.zeros((2, 1)),
        B_d=np.array([[0.0], [1.0]]),
    )
    cfg = ObserverConfig(
        K_c=np.array([[0.7215], [1.1184]]),
        K_d=np.array([[-0.5], [0.5]]),
        gamma_c=0.4,
        gamma_d=0.8,
        x_hat0=np.array([4.0, 0.1]),
        theta_hat0=np.array([8.0]),
        Gamma_c0=np.array([[2.0], [4.0]]),
        Gamma_d0=np.array([[4.0], [3.0]]),
    )
    return plant, cfg, SimConfig(h=0.01, T_max=40.0, J_max=25)


PLANTS = {"bouncing_ball": build_bouncing_ball}


# --- running scenarios ------------------------------------------------------


def regression_data(spec: ScenarioSpec) -> RegressionData:
    h = spec.sim_config().h
    theta = spec.theta or None
    if spec.mixed:
        m = spec.mixed
        rt = m["real_time"]
        psi1 = _vector_fn(rt["psi"], "mixed.real_time.psi")
        if theta is not None:
            th = np.asarray(theta)
            y1 = lambda t: float(psi1(t, 0) @ th)
            old = [(p, float(np.asarray(p, dtype=float) @ th)) for p in m["old_psi"]]
        else:
            yf = _vector_fn(rt["y"], "mixed.real_time.y")
            y1 = lambda t: float(yf(t, 0)[0])
            old = list(zip(m["old_psi"], m["old_y"]))
        return build_mixed_data_scenario(
            (lambda t: psi1(t, 0), y1), old, m["treatment_times"], float(m["horizon"]), h, theta
        )
    dom = _domain_from(spec.domain)
    psi = signal_arc(spec.signals["psi"], dom, h, "signals.psi")
    if "y" in spec.signals:
        y = signal_arc(spec.signals["y"], dom, h, "signals.y")
        return RegressionData(psi, y, theta)
    if len(theta) != psi.shape[0]:
        raise ValidationError("theta", f"expected {psi.shape[0]} entries")
    return _regression_from(psi, theta)


def gradient_config(spec: ScenarioSpec, dim: int) -> GradientConfig:
    g = spec.gradient
    gamma = float(g.get("gamma", 1.0))
    return GradientConfig(
        gamma_c=float(g.get("gamma_c", gamma)),
        gamma_d=float(g.get("gamma_d", gamma)),
        theta_hat0=tuple(g.get("theta_hat0", [0.0] * dim)),
    )


def plant_setup(spec: ScenarioSpec):
    """(plant, theta, u, x0, ObserverConfig, SimConfig) for a plant scenario."""
    p = spec.plant
    theta = float(p.get("theta", BALL_THETA))
    u = float(p.get("u", 0.0))
    plant, cfg, sim = PLANTS[p["model"]](theta, u)
    o = spec.observer
    if o:
        cfg = ObserverConfig(
            K_c=np.array(o.get("K_c", cfg.K_c), dtype=float).reshape(2, 1),
            K_d=np.array(o.get("K_d", cfg.K_d), dtype=float).reshape(2, 1),
            gamma_c=float(o.get("gamma_c", cfg.gamma_c)),
            gamma_d=float(o.get("gamma_d", cfg.gamma_d)),
            x_hat0=np.array(o.get("x_hat0", cfg.x_hat0), dtype=float),
            theta_hat0=np.array(o.get("theta_hat0", cfg.theta_hat0), dtype=float).reshape(-1),
            Gamma_c0=np.array(o.get("Gamma_c0", cfg.Gamma_c0), dtype=float).reshape(2, 1),
            Gamma_d0=np.array(o.get("Gamma_d0", cfg.Gamma_d0), dtype=float).reshape(2, 1),
        )
    if spec.sim:
        s = spec.sim
        sim = SimConfig(
            h=float(s.get("h", sim.h)),
            T_max=float(s.get("T_max", sim.T_max)),
            J_max=int(s.get("J_max", sim.J_max)),
            zeno_guard=int(s.get("zeno_guard", sim.zeno_guard)),
        )
    return plant, [theta], u, list(p["x0"]), cfg, sim


GRADIENT_RUNNERS = {
    "hybrid": run_hybrid_gradient,
    "continuous": run_continuous_gradient,
    "discrete": run_discrete_gradient,
}
OBSERVER_RUNNERS = {
    "hybrid": run_hybrid_observer,
    "continuous": run_continuous_observer,
    "discrete": run_discrete_observer,
}


def run_scenario(spec: ScenarioSpec) -> dict[str, EstimatorTrace]:
    """Run every estimator listed in the scenario; keys are method names."""
    traces = {}
    if spec.kind == "regression":
        data = regression_data(spec)
        cfg = gradient_config(spec, data.dim)
        sim = spec.sim_config()
        for m in spec.methods:
            traces[m] = GRADIENT_RUNNERS[m](data, cfg, sim)
    else:
        plant, theta, u, x0, cfg, sim = plant_setup(spec)
        for m in spec.methods:
            traces[m] = OBSERVER_RUNNERS[m](plant, theta, u, x0, cfg, sim)
    return traces


def error_system(spec: ScenarioSpec) -> LinearHybridSystem:
    """Error pair whose excitation governs parameter convergence in ``spec``."""
    if spec.kind == "regression":
        data = regression_data(spec)
        cfg = gradient_config(spec, data.dim)
        return gradient_error_system(data.psi, cfg.gamma_c, cfg.gamma_d)
    plant, theta, u, x0, cfg, sim = plant_setup(spec)
    return build_error_system(run_hybrid_observer(plant, theta, u, x0, cfg, sim))


# --- metrics and expectations -----------------------------------------------


def _value_at(arc: HybridArc, at: float | None) -> float:
    """Norm at the last sample with ``t + j <= at`` (the final sample if ``at`` is None)."""
    n = norm_arc(arc)
    if at is None:
        return float(n.values[-1][-1, 0, 0])
    best = None
    for k, iv in enumerate(n.domain):
        for t, v in zip(n.times[k], n.values[k]):
            if t + iv.j <= at + 1e-9:
                best = float(v[0, 0])
    if best is None:
        raise ValueError(f"no sample with t + j <= {at}")
    return best


def metric(traces: dict[str, EstimatorTrace], name: str, at: float | None = None) -> float:
    """Metrics named ``<method>.<quantity>``.

    Quantities: ``theta_err`` and ``state_err`` (norm at the end, or at
    hybrid time ``at``), ``theta_ratio`` (the same divided by the initial
    parameter-error norm), ``t_final`` and ``jumps``.
    """
    method, _, q = name.partition(".")
    if method not in traces:
        raise KeyError(f"no trace for method {method!r}")
    tr = traces[method]
    if q == "theta_err":
        return _value_at(tr.theta_err, at)
    if q == "theta_ratio":
        return _value_at(tr.theta_err, at) / float(np.linalg.norm(tr.theta_err.values[0][0]))
    if q == "state_err":
        if tr.state_err is None:
            raise KeyError(f"{method} has no state error")
        return _value_at(tr.state_err, at)
    if q == "t_final":
        return tr.domain.t_final
    if q == "jumps":
        return float(tr.domain.num_jumps)
    raise KeyError(f"unknown metric {name!r}")


def compare(op: str, x: float, value: float, tol: float = 0.0) -> bool:
    if op == "<":
        return x < value + tol
    if op == "<=":
        return x <= value + tol
    if op == ">":
        return x > value - tol
    if op == ">=":
        return x >= value - tol
    return abs(x - value) <= tol


def evaluate_expectations(spec: ScenarioSpec, traces: dict[str, EstimatorTrace]) -> list[dict]:
    out = []
    for e in spec.expect:
        x = metric(traces, e.metric, e.at)
        out.append({**e.to_dict(), "observed": x, "pass": compare(e.op, x, e.value, e.tol)})
    return out
