"""Gradient identifiers and adaptive observers driven by hybrid data.

The gradient identifiers run directly on a sampled regressor and output.
The observers co-simulate a plant and the estimator as one autonomous hybrid
system, so the estimator jumps exactly when the plant does.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .hybrid_sim import (
    AutonomousHybridSystem,
    DimensionMismatch,
    LinearHybridSystem,
    SimConfig,
    SimulationError,
    _same_domain,
    simulate_autonomous,
)
from .hybrid_time import HybridArc, flow_grid, write_arc_csv

DATA_TOL = 1e-9


class EstimatorError(ValueError):
    pass


class InconsistentData(EstimatorError):
    pass


class MissingRegressor(EstimatorError):
    pass


class PlantSimulationFailed(RuntimeError):
    pass


# --- data and configuration -------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegressionData:
    """Regressor ``psi`` (m x 1) and output ``y`` (1 x 1) on a shared domain."""

    psi: HybridArc
    y: HybridArc
    theta_true: np.ndarray | None = None

    def __post_init__(self):
        if not _same_domain(self.psi.domain, self.y.domain):
            raise DimensionMismatch("dom psi differs from dom y")
        if self.psi.shape[1] != 1 or self.y.shape != (1, 1):
            raise DimensionMismatch(f"psi must be a column and y a scalar, got {self.psi.shape}, {self.y.shape}")
        if self.theta_true is not None:
            th = np.asarray(self.theta_true, dtype=float).reshape(-1, 1)
            if th.shape[0] != self.dim:
                raise DimensionMismatch(f"theta has size {th.shape[0]}, psi has {self.dim}")
            object.__setattr__(self, "theta_true", th)
            worst = self.residual()
            if worst > DATA_TOL:
                raise InconsistentData(f"y differs from psi^T theta by {worst:.3g}")

    @property
    def dim(self) -> int:
        return self.psi.shape[0]

    def residual(self) -> float:
        """Largest ``|y - psi^T theta|`` over all samples and jump values."""
        th = self.theta_true
        worst = 0.0
        for k in range(len(self.psi.domain)):
            ts = self.psi.times[k]
            r = np.einsum("nia,ib->nab", self.psi.values[k], th) - self.y.sample(self.psi.domain.intervals[k].j, ts)
            worst = max(worst, float(np.max(np.abs(r))))
        if self.psi.jumps.size:
            r = np.einsum("nia,ib->nab", self.psi.jumps, th) - self.y.jumps
            worst = max(worst, float(np.max(np.abs(r))))
        return worst


@dataclass(frozen=True)
class GradientConfig:
    gamma_c: float = 1.0
    gamma_d: float = 1.0
    theta_hat0: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if not (self.gamma_c > 0 and self.gamma_d > 0):
            raise ValueError("adaptation gains must be positive")


MatrixMap = Callable[..., np.ndarray]


@dataclass(frozen=True, eq=False)
class PlantModel:
    """``x' = A_c x + Psi_c theta + B_c u`` on ``C``, ``x+ = A_d x + Psi_d theta + B_d u`` on ``D``.

    The matrix maps are called as ``fn(t, j, y, u, x)``; ``x`` is the plant
    state, needed only when a map depends on an unmeasured component (the
    jump regressor of the bouncing ball does).
    """

    A_c: MatrixMap
    A_d: MatrixMap
    Psi_c: MatrixMap
    Psi_d: MatrixMap
    H: np.ndarray
    flow_set: Callable[[np.ndarray], bool]
    jump_set: Callable[[np.ndarray], bool]
    B_c: np.ndarray | None = None
    B_d: np.ndarray | None = None

    @property
    def n_x(self) -> int:
        return np.atleast_2d(self.H).shape[1]

    @property
    def n_y(self) -> int:
        return np.atleast_2d(self.H).shape[0]


@dataclass(frozen=True)
class ObserverConfig:
    K_c: np.ndarray
    K_d: np.ndarray
    gamma_c: float
    gamma_d: float
    x_hat0: np.ndarray
    theta_hat0: np.ndarray
    Gamma_c0: np.ndarray
    Gamma_d0: np.ndarray

    def __post_init__(self):
        if not (self.gamma_c > 0 and self.gamma_d > 0):
            raise ValueError("adaptation gains must be positive")


@dataclass(eq=False)
class EstimatorTrace:
    """Recorded estimator run; every arc lives on the same hybrid domain."""

    method: str
    theta_hat: HybridArc
    theta_err: HybridArc | None = None
    psi: HybridArc | None = None
    x: HybridArc | None = None
    x_hat: HybridArc | None = None
    state_err: HybridArc | None = None
    Gamma_c: HybridArc | None = None
    Gamma_d: HybridArc | None = None
    Gamma_d_plus: HybridArc | None = None
    psi_bar: HybridArc | None = None
    sigma: HybridArc | None = None
    eta: HybridArc | None = None
    gains: tuple[float, float] = (1.0, 1.0)

    @property
    def domain(self):
        return self.theta_hat.domain

    def arcs(self) -> dict[str, HybridArc]:
        names = ["theta_hat", "theta_err", "psi", "x", "x_hat", "state_err",
                 "Gamma_c", "Gamma_d", "Gamma_d_plus", "psi_bar", "sigma", "eta"]
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def write(self, out_dir, prefix: str = "", scenario_hash: str = "") -> Path:
        """One CSV per arc plus ``<prefix>manifest.json``; returns the manifest path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, arc in self.arcs().items():
            fname = f"{prefix}{name}.csv"
            write_arc_csv(arc, out / fname)
            entries.append({"name": name, "file": fname, "shape": list(arc.shape)})
        manifest = {"method": self.method, "scenario_hash": scenario_hash, "arcs": entries}
        path = out / f"{prefix}manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def norm_arc(arc: HybridArc) -> HybridArc:
    """Pointwise Euclidean (Frobenius) norm as a scalar arc."""
    return arc.map(lambda v: np.atleast_2d(np.linalg.norm(v)))


def terminal_norm(arc: HybridArc) -> float:
    return float(np.linalg.norm(arc.values[-1][-1]))


# --- gradient identifiers ---------------------------------------------------


def _truncate_data(data: RegressionData, sim: SimConfig):
    j_max = sim.J_max if sim.J_max < 10**9 else None
    return data.psi.domain.truncate(sim.T_max, j_max)


def _run_gradient(data: RegressionData, cfg: GradientConfig, sim: SimConfig, flows: bool, jumps: bool, method: str):
    th = np.asarray(cfg.theta_hat0, dtype=float).reshape(-1, 1)
    if th.shape[0] != data.dim:
        raise DimensionMismatch(f"theta_hat0 has size {th.shape[0]}, psi has {data.dim}")
    dom = _truncate_data(data, sim)
    gc, gd = cfg.gamma_c, cfg.gamma_d
    times, values = [], []
    for k, iv in enumerate(dom):
        if iv.degenerate:
            ts = np.array([iv.t_start])
            vs = [th]
        else:
            ts = flow_grid(iv.t_start, iv.t_end, sim.h)
            vs = [th]
            if flows:
                dt = np.diff(ts)
                mids = ts[:-1] + 0.5 * dt
                P0, Pm, P1 = (data.psi.sample(iv.j, s) for s in (ts[:-1], mids, ts[1:]))
                Y0, Ym, Y1 = (data.y.sample(iv.j, s) for s in (ts[:-1], mids, ts[1:]))

                def f(p, y, x):
                    return -gc * p @ (p.T @ x - y)

                for n in range(dt.size):
                    d = dt[n]
                    k1 = f(P0[n], Y0[n], th)
                    k2 = f(Pm[n], Ym[n], th + 0.5 * d * k1)
                    k3 = f(Pm[n], Ym[n], th + 0.5 * d * k2)
                    k4 = f(P1[n], Y1[n], th + d * k3)
                    th = th + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                    vs.append(th)
            else:
                vs = vs * ts.size
        times.append(ts)
        values.append(np.array(vs))
        if k < dom.num_jumps and jumps:
            p = data.psi.jumps[k]
            y = data.y.jumps[k]
            th = th - gd * p @ (p.T @ th - y) / (1.0 + gd * float(np.sum(p * p)))
    theta_hat = HybridArc(dom, tuple(times), tuple(values))
    psi = _restrict_arc(data.psi, dom)
    err = None
    if data.theta_true is not None:
        err = theta_hat.map(lambda v: v - data.theta_true)
    return EstimatorTrace(method, theta_hat, err, psi=psi, gains=(gc, gd))


def _restrict_arc(arc: HybridArc, dom) -> HybridArc:
    """Restriction of ``arc`` to a prefix ``dom`` of its domain."""
    if _same_domain(arc.domain, dom):
        return arc
    times, values = [], []
    for k, iv in enumerate(dom):
        tk = arc.times[k]
        if iv.degenerate:
            ts = np.array([iv.t_start])
        else:
            keep = tk[(tk > iv.t_start) & (tk < iv.t_end)]
            ts = np.concatenate([[iv.t_start], keep, [iv.t_end]])
        times.append(ts)
        values.append(arc.sample(iv.j, ts))
    return HybridArc(dom, tuple(times), tuple(values), arc.jumps[: dom.num_jumps])


def run_hybrid_gradient(data: RegressionData, cfg: GradientConfig, sim: SimConfig = SimConfig()) -> EstimatorTrace:
    """Gradient descent on the output error, on flows and at jumps."""
    return _run_gradient(data, cfg, sim, True, True, "hybrid")


def run_continuous_gradient(data: RegressionData, cfg: GradientConfig, sim: SimConfig = SimConfig()) -> EstimatorTrace:
    """Flow updates only; the estimate passes through jumps unchanged."""
    return _run_gradient(data, cfg, sim, True, False, "continuous")


def run_discrete_gradient(data: RegressionData, cfg: GradientConfig, sim: SimConfig = SimConfig()) -> EstimatorTrace:
    """Jump updates only; the estimate is held constant on flows."""
    return _run_gradient(data, cfg, sim, False, True, "discrete")


# --- adaptive observers -----------------------------------------------------


def _input_fn(u) -> Callable[[float, int], np.ndarray]:
    if callable(u):
        return lambda t, j: np.atleast_1d(np.asarray(u(t, j), dtype=float)).reshape(-1, 1)
    v = np.atleast_1d(np.asarray(u, dtype=float)).reshape(-1, 1)
    return lambda t, j: v


class _Layout:
    """Slices of the co-simulation state ``[t, j, x, x_hat, theta_hat, Gamma_c, Gamma_d]``."""

    def __init__(self, n: int, p: int):
        self.n, self.p = n, p
        o = 2
        self.x = slice(o, o + n)
        self.xh = slice(o + n, o + 2 * n)
        self.th = slice(o + 2 * n, o + 2 * n + p)
        self.gc = slice(o + 2 * n + p, o + 2 * n + p + n * p)
        self.gd = slice(o + 2 * n + p + n * p, o + 2 * n + p + 2 * n * p)
        self.size = o + 2 * n + p + 2 * n * p

    def unpack(self, z):
        n, p = self.n, self.p
        return (
            z[0], int(round(z[1])), z[self.x].reshape(n, 1), z[self.xh].reshape(n, 1),
            z[self.th].reshape(p, 1), z[self.gc].reshape(n, p), z[self.gd].reshape(n, p),
        )

    def pack(self, t, j, x, xh, th, gc, gd):
        return np.concatenate([[t, j], x.ravel(), xh.ravel(), th.ravel(), gc.ravel(), gd.ravel()])


def _observer_system(plant: PlantModel, theta, u, cfg: ObserverConfig, mode: str, L: _Layout):
    H = np.atleast_2d(np.asarray(plant.H, dtype=float))
    n, p = L.n, L.p
    K_c = np.asarray(cfg.K_c, dtype=float).reshape(n, -1)
    K_d = np.asarray(cfg.K_d, dtype=float).reshape(n, -1)
    gc, gd = cfg.gamma_c, cfg.gamma_d
    u_at = _input_fn(u)
    m_u = u_at(0.0, 0).shape[0]
    B_c = np.zeros((n, m_u)) if plant.B_c is None else np.asarray(plant.B_c, dtype=float).reshape(n, m_u)
    B_d = np.zeros((n, m_u)) if plant.B_d is None else np.asarray(plant.B_d, dtype=float).reshape(n, m_u)

    def flow(z):
        t, j, x, xh, th, Gc, Gd = L.unpack(z)
        uu = u_at(t, j)
        y = H @ x
        Ac = plant.A_c(t, j, y, uu, x)
        Pc = plant.Psi_c(t, j, y, uu, x)
        dx = Ac @ x + Pc @ theta + B_c @ uu
        if mode == "discrete":
            zero = np.zeros_like
            return L.pack(1.0, 0.0, dx, zero(xh), zero(th), zero(Gc), zero(Gd))
        err = y - H @ xh
        psi = Gc.T @ H.T
        dxh = Ac @ xh + K_c @ err + Pc @ th + B_c @ uu + gc * Gc @ psi @ err
        dth = gc * psi @ err
        dGc = (Ac - K_c @ H) @ Gc + Pc
        return L.pack(1.0, 0.0, dx, dxh, dth, dGc, np.zeros_like(Gd))

    def jump(z):
        t, j, x, xh, th, Gc, Gd = L.unpack(z)
        uu = u_at(t, j)
        y = H @ x
        Ad = plant.A_d(t, j, y, uu, x)
        Pd = plant.Psi_d(t, j, y, uu, x)
        x_new = Ad @ x + Pd @ theta + B_d @ uu
        if mode == "continuous":
            return L.pack(t, j + 1, x_new, xh, th, Gc, Gd)
        if mode == "continuous_reset":
            xh_new = Ad @ xh + Pd @ th + B_d @ uu
            return L.pack(t, j + 1, x_new, xh_new, th, Gc, Gd)
        err = y - H @ xh
        psi = Gd.T @ H.T
        scale = gd / (1.0 + gd * float(np.sum(psi * psi)))
        Gd_new = (Ad - K_d @ H) @ Gd + Pd
        xh_new = Ad @ xh + (K_d + scale * Gd_new @ psi) @ err + Pd @ th + B_d @ uu
        th_new = th + scale * psi @ err
        return L.pack(t, j + 1, x_new, xh_new, th_new, Gc, Gd_new)

    def in_c(z):
        return bool(plant.flow_set(z[L.x]))

    def in_d(z):
        return bool(plant.jump_set(z[L.x]))

    return AutonomousHybridSystem(L.size, flow, jump, in_c, in_d), jump


def _component(arc: HybridArc, fn: Callable[[np.ndarray], np.ndarray], jumps=None) -> HybridArc:
    values = tuple(np.array([fn(z) for z in vs]) for vs in arc.values)
    if jumps is None:
        jumps = np.array([fn(z) for z in arc.jumps]) if arc.jumps.size else None
    return HybridArc(arc.domain, arc.times, values, jumps)


def _run_observer(plant: PlantModel, theta_true, u, x0, cfg: ObserverConfig, sim: SimConfig, mode: str) -> EstimatorTrace:
    H = np.atleast_2d(np.asarray(plant.H, dtype=float))
    n = plant.n_x
    theta = np.asarray(theta_true, dtype=float).reshape(-1, 1)
    p = theta.shape[0]
    L = _Layout(n, p)
    try:
        x0 = np.asarray(x0, dtype=float).reshape(n, 1)
        xh0 = np.asarray(cfg.x_hat0, dtype=float).reshape(n, 1)
        th0 = np.asarray(cfg.theta_hat0, dtype=float).reshape(p, 1)
        Gc0 = np.asarray(cfg.Gamma_c0, dtype=float).reshape(n, p)
        Gd0 = np.asarray(cfg.Gamma_d0, dtype=float).reshape(n, p)
    except ValueError as exc:
        raise DimensionMismatch(str(exc)) from None
    if np.asarray(cfg.K_c).size != n * plant.n_y or np.asarray(cfg.K_d).size != n * plant.n_y:
        raise DimensionMismatch("observer gains must be n_x by n_y")
    sys, jump = _observer_system(plant, theta, u, cfg, mode, L)
    try:
        arc = simulate_autonomous(sys, L.pack(0.0, 0, x0, xh0, th0, Gc0, Gd0), sim)
    except SimulationError as exc:
        raise PlantSimulationFailed(f"{type(exc).__name__}: {exc}") from exc

    def part(sl, shape):
        return _component(arc, lambda z: z[sl].reshape(shape))

    x = part(L.x, (n, 1))
    x_hat = part(L.xh, (n, 1))
    theta_hat = part(L.th, (p, 1))
    Gamma_c = part(L.gc, (n, p))
    Gamma_d = part(L.gd, (n, p))
    state_err = _component(arc, lambda z: z[L.x].reshape(n, 1) - z[L.xh].reshape(n, 1))
    theta_err = _component(arc, lambda z: z[L.th].reshape(p, 1) - theta)

    def psi_c(z):
        return z[L.gc].reshape(n, p).T @ H.T

    def psi_d(z):
        return z[L.gd].reshape(n, p).T @ H.T

    pre = arc.jumps
    psi_bar = _component(arc, psi_c, np.array([psi_d(z) for z in pre]) if pre.size else None)

    def sig(ps):
        return cfg.gamma_d * ps @ ps.T / (1.0 + cfg.gamma_d * float(np.sum(ps * ps)))

    sigma = psi_bar.map(sig)

    def eta_c(z):
        e = z[L.x].reshape(n, 1) - z[L.xh].reshape(n, 1)
        return e + z[L.gc].reshape(n, p) @ (z[L.th].reshape(p, 1) - theta)

    def eta_d(z):
        e = z[L.x].reshape(n, 1) - z[L.xh].reshape(n, 1)
        return e + z[L.gd].reshape(n, p) @ (z[L.th].reshape(p, 1) - theta)

    eta = _component(arc, eta_c, np.array([eta_d(z) for z in pre]) if pre.size else None)
    # Gamma_d after each jump, i.e. the value used in the jump injection gain
    gd_plus = np.array([arc.values[k + 1][0][L.gd].reshape(n, p) for k in range(pre.shape[0])])
    Gamma_d_plus = _component(arc, lambda z: z[L.gd].reshape(n, p), gd_plus if pre.size else None)
    return EstimatorTrace(
        mode, theta_hat, theta_err, x=x, x_hat=x_hat, state_err=state_err,
        Gamma_c=Gamma_c, Gamma_d=Gamma_d, Gamma_d_plus=Gamma_d_plus,
        psi_bar=psi_bar, sigma=sigma, eta=eta, gains=(cfg.gamma_c, cfg.gamma_d),
    )


def run_hybrid_observer(plant: PlantModel, theta_true, u, x0, cfg: ObserverConfig, sim: SimConfig = SimConfig()) -> EstimatorTrace:
    """Adaptive observer/identifier using both flow and jump information.

    ``u`` is a constant or a function of ``(t, j)``. At each jump the new
    jump filter ``Gamma_d+`` is formed first and then used in the state
    injection gain, while the regressor is read from the pre-jump filter.
    """
    return _run_observer(plant, theta_true, u, x0, cfg, sim, "hybrid")


def run_continuous_observer(
    plant: PlantModel,
    theta_true,
    u,
    x0,
    cfg: ObserverConfig,
    sim: SimConfig = SimConfig(),
    reset_at_jumps: bool = False,
) -> EstimatorTrace:
    """Flow-only adaptation.

    By default the estimator is a purely continuous-time design that does not
    see plant jumps: ``x_hat``, ``theta_hat`` and ``Gamma_c`` pass through them
    unchanged. With ``reset_at_jumps`` the state estimate is instead pushed
    through the plant jump map using ``theta_hat`` (adaptation still idle).
    """
    mode = "continuous_reset" if reset_at_jumps else "continuous"
    return _run_observer(plant, theta_true, u, x0, cfg, sim, mode)


def run_discrete_observer(plant: PlantModel, theta_true, u, x0, cfg: ObserverConfig, sim: SimConfig = SimConfig()) -> EstimatorTrace:
    """Jump-only adaptation; all estimator states are held on flows."""
    return _run_observer(plant, theta_true, u, x0, cfg, sim, "discrete")


# --- error systems ----------------------------------------------------------


def build_error_system(trace: EstimatorTrace, cfg=None) -> LinearHybridSystem:
    """(A, B) pair of the parameter-error dynamics recorded in ``trace``.

    For gradient traces ``A = gamma_c psi psi^T`` and
    ``B = gamma_d psi psi^T / (1 + gamma_d |psi|^2)``. For observer traces the
    pair is ``(psi_bar psi_bar^T, Sigma)``, the pair whose excitation decides
    parameter convergence. Gains come from ``cfg`` when given, otherwise from
    the trace.
    """
    gc, gd = (cfg.gamma_c, cfg.gamma_d) if cfg is not None else trace.gains
    if trace.psi is not None:
        psi, a_gain = trace.psi, gc
    elif trace.psi_bar is not None:
        psi, a_gain = trace.psi_bar, 1.0
    else:
        raise MissingRegressor("trace records no regressor")
    A = psi.map(lambda v: a_gain * v @ v.T)
    B = psi.map(lambda v: gd * v @ v.T / (1.0 + gd * float(np.sum(v * v))))
    return LinearHybridSystem(psi.domain, A, B)


def scenario_hash(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode()
    return hashlib.sha256(text).hexdigest()
