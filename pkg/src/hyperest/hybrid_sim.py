"""Simulation of hybrid systems and hybrid transition matrices.

Two kinds of systems are handled:

* autonomous ``(C, F, D, G)`` systems, integrated with fixed-step RK4 and
  bisection on jump-set entry;
* linear time-varying systems on an exogenous domain,
  ``zeta' = -A zeta + nu`` on flows and ``zeta+ = (I - B) zeta + nu`` at jumps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .hybrid_time import (
    TIME_TOL,
    AffineSubspace,
    HybridArc,
    HybridTimeDomain,
    HybridTimeError,
    Interval,
    PointNotInDomain,
    flow_grid,
    make_domain,
)


class SimulationError(RuntimeError):
    pass


class InitialStateOutsideSets(SimulationError):
    pass


class ZenoDetected(SimulationError):
    pass


class LeftBothSets(SimulationError):
    """The state left ``C u D``; ``arc`` holds the solution up to the exit."""

    def __init__(self, msg: str, arc: HybridArc | None = None):
        super().__init__(msg)
        self.arc = arc


class StartNotInDomain(SimulationError):
    pass


class DimensionMismatch(SimulationError):
    pass


class NegativeArcValue(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    h: float = 0.01
    T_max: float = math.inf
    J_max: int = 10**9
    zeno_guard: int = 100

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if self.zeno_guard < 1:
            raise ValueError("zeno_guard must be >= 1")


@dataclass(frozen=True)
class AutonomousHybridSystem:
    """``x' = F(x)`` on ``C``, ``x+ = G(x)`` on ``D``."""

    state_dim: int
    flow_map: Callable[[np.ndarray], np.ndarray]
    jump_map: Callable[[np.ndarray], np.ndarray]
    flow_set: Callable[[np.ndarray], bool]
    jump_set: Callable[[np.ndarray], bool]


def _rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _arc_from_blocks(blocks, jump_values=None) -> HybridArc:
    bps, times, values = [], [], []
    for j, (ts, xs) in enumerate(blocks):
        ts = np.asarray(ts, dtype=float)
        xs = np.asarray(xs, dtype=float)
        if ts[-1] - ts[0] <= TIME_TOL:
            ts, xs = ts[-1:], xs[-1:]
        bps.append((ts[0], ts[-1], j))
        times.append(ts)
        values.append(xs.reshape(xs.shape[0], -1, 1))
    dom = make_domain(bps)
    jv = None if jump_values is None else np.asarray(jump_values).reshape(len(bps) - 1, -1, 1)
    return HybridArc(dom, tuple(times), tuple(values), jv)


def simulate_autonomous(sys: AutonomousHybridSystem, x0, cfg: SimConfig) -> HybridArc:
    """Compute one solution of ``sys`` from ``x0`` at hybrid time ``(0, 0)``.

    Jumps take priority on ``C n D``. Entry into ``D`` between grid points is
    located by bisection on the step length to ``1e-9 * h``; leaving ``C u D``
    is located the same way and raises :class:`LeftBothSets` carrying the
    solution computed so far.
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.size != sys.state_dim:
        raise DimensionMismatch(f"x0 has size {x.size}, expected {sys.state_dim}")
    if not (sys.flow_set(x) or sys.jump_set(x)):
        raise InitialStateOutsideSets(f"x0={x} is in neither C nor D")
    h = cfg.h
    t, j = 0.0, 0
    blocks = [([t], [x])]
    at_instant = 0
    bisect_tol = 1e-9 * h
    f = sys.flow_map
    while True:
        if sys.jump_set(x):
            if j >= cfg.J_max:
                break
            at_instant += 1
            if at_instant > cfg.zeno_guard:
                raise ZenoDetected(f"more than {cfg.zeno_guard} jumps at t={t}")
            x = np.asarray(sys.jump_map(x), dtype=float).reshape(-1)
            j += 1
            blocks.append(([t], [x]))
            continue
        if t >= cfg.T_max - TIME_TOL:
            break
        dt = min(h, cfg.T_max - t)
        x_new = _rk4(f, x, dt)
        if sys.jump_set(x_new):
            lo, hi = 0.0, dt
            while hi - lo > bisect_tol:
                mid = 0.5 * (lo + hi)
                if sys.jump_set(_rk4(f, x, mid)):
                    hi = mid
                else:
                    lo = mid
            dt = hi
            x_new = _rk4(f, x, dt)
        elif not sys.flow_set(x_new):
            lo, hi = 0.0, dt
            while hi - lo > bisect_tol:
                mid = 0.5 * (lo + hi)
                xm = _rk4(f, x, mid)
                if sys.flow_set(xm) or sys.jump_set(xm):
                    lo = mid
                else:
                    hi = mid
            if lo > 0:
                blocks[-1][0].append(t + lo)
                blocks[-1][1].append(_rk4(f, x, lo))
            raise LeftBothSets(
                f"state left C u D near t={t + lo:.9g}, j={j}", _arc_from_blocks(blocks)
            )
        t += dt
        x = x_new
        blocks[-1][0].append(t)
        blocks[-1][1].append(x)
        at_instant = 0
    return _arc_from_blocks(blocks)


# --- linear time-varying hybrid systems -------------------------------------


def _same_domain(a: HybridTimeDomain, b: HybridTimeDomain) -> bool:
    if len(a) != len(b):
        return False
    return all(
        x.j == y.j and abs(x.t_start - y.t_start) <= 1e-7 and abs(x.t_end - y.t_end) <= 1e-7
        for x, y in zip(a, b)
    )


@dataclass(frozen=True)
class LinearHybridSystem:
    """``zeta' = -A zeta + nu`` on flows, ``zeta+ = (I - B) zeta + nu`` at jumps."""

    domain: HybridTimeDomain
    A: HybridArc
    B: HybridArc
    nu: HybridArc | None = None

    def __post_init__(self):
        for name, arc in (("A", self.A), ("B", self.B), ("nu", self.nu)):
            if arc is not None and not _same_domain(arc.domain, self.domain):
                raise DimensionMismatch(f"dom {name} differs from the system domain")
        m = self.A.shape[0]
        if self.A.shape != (m, m) or self.B.shape != (m, m):
            raise DimensionMismatch(f"A {self.A.shape} and B {self.B.shape} must be square and equal")
        if self.nu is not None and self.nu.shape != (m, 1):
            raise DimensionMismatch(f"nu must be {m}x1, got {self.nu.shape}")

    @property
    def dim(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class TransitionMatrix:
    base: tuple[float, int]
    values: HybridArc


def _rk4_operators(sys: LinearHybridSystem, j: int, ts: np.ndarray, with_nu: bool):
    """Per-step affine maps ``Z -> S Z + c`` of classical RK4 on ``[ts[k], ts[k+1]]``."""
    m = sys.dim
    dt = np.diff(ts)
    d = dt[:, None, None]
    A0 = sys.A.sample(j, ts[:-1])
    Am = sys.A.sample(j, ts[:-1] + 0.5 * dt)
    A1 = sys.A.sample(j, ts[1:])
    eye = np.eye(m)[None]
    k1 = -A0
    k2 = -Am @ (eye + 0.5 * d * k1)
    k3 = -Am @ (eye + 0.5 * d * k2)
    k4 = -A1 @ (eye + d * k3)
    S = eye + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not with_nu:
        return S, None
    n0 = sys.nu.sample(j, ts[:-1])
    nm = sys.nu.sample(j, ts[:-1] + 0.5 * dt)
    n1 = sys.nu.sample(j, ts[1:])
    c1 = n0
    c2 = -Am @ (0.5 * d * c1) + nm
    c3 = -Am @ (0.5 * d * c2) + nm
    c4 = -A1 @ (d * c3) + n1
    return S, (d / 6.0) * (c1 + 2.0 * c2 + 2.0 * c3 + c4)


def _segment_points(iv: Interval, a: float, b: float, h: float) -> np.ndarray:
    """Points of the interval's fixed grid inside ``[a, b]``, plus ``a`` and ``b``."""
    if b - a <= TIME_TOL:
        return np.array([a])
    g = flow_grid(iv.t_start, iv.t_end, h)
    inner = g[(g > a + TIME_TOL) & (g < b - TIME_TOL)]
    return np.concatenate([[a], inner, [b]])


def propagate(sys: LinearHybridSystem, Z0: np.ndarray, pieces, h: float, with_nu: bool):
    """Propagate a state (vector or matrix) across consecutive domain pieces.

    Returns a list of ``(times, states)`` per piece, and the list of pre-jump
    states (one per piece boundary).
    """
    Z = np.array(Z0, dtype=float)
    out, pre_jump = [], []
    for idx, p in enumerate(pieces):
        iv = sys.domain.interval(p.j)
        ts = _segment_points(iv, p.t_start, p.t_end, h)
        states = np.empty((ts.size,) + Z.shape)
        states[0] = Z
        if ts.size > 1:
            S, c = _rk4_operators(sys, p.j, ts, with_nu)
            for k in range(ts.size - 1):
                Z = S[k] @ Z
                if c is not None:
                    Z = Z + c[k]
                states[k + 1] = Z
        out.append((ts, states))
        if idx < len(pieces) - 1:
            pre_jump.append(Z)
            IB = np.eye(sys.dim) - sys.B.jump_value(p.j)
            Z = IB @ Z
            if with_nu:
                Z = Z + sys.nu.jump_value(p.j)
    return out, pre_jump


def _pieces_from(sys: LinearHybridSystem, start, cfg: SimConfig):
    t0, j0 = start
    if not sys.domain.contains(t0, j0):
        raise StartNotInDomain(f"start ({t0}, {j0}) is not in the system domain")
    sub = sys.domain.restrict(t0, j0)
    j_max = cfg.J_max if cfg.J_max < 10**9 else None
    return sub.truncate(cfg.T_max, j_max)


def simulate_linear(sys: LinearHybridSystem, zeta0, start=(0.0, 0), cfg: SimConfig = SimConfig()) -> HybridArc:
    """Solution of the linear hybrid system from ``zeta0`` at ``start``.

    The solution jumps exactly when the system domain jumps.
    """
    z0 = np.asarray(zeta0, dtype=float).reshape(-1, 1)
    if z0.shape[0] != sys.dim:
        raise DimensionMismatch(f"zeta0 has size {z0.shape[0]}, expected {sys.dim}")
    dom = _pieces_from(sys, start, cfg)
    blocks, _ = propagate(sys, z0, dom.intervals, cfg.h, sys.nu is not None)
    return HybridArc(dom, tuple(b[0] for b in blocks), tuple(b[1] for b in blocks))


def transition_matrix(sys: LinearHybridSystem, base=(0.0, 0), cfg: SimConfig = SimConfig()) -> TransitionMatrix:
    """Hybrid transition matrix ``M((t, j), base)`` over the rest of the domain.

    ``nu`` is ignored. Column ``k`` is the homogeneous solution from the
    ``k``-th basis vector.
    """
    dom = _pieces_from(sys, base, cfg)
    blocks, _ = propagate(sys, np.eye(sys.dim), dom.intervals, cfg.h, False)
    arc = HybridArc(dom, tuple(b[0] for b in blocks), tuple(b[1] for b in blocks))
    return TransitionMatrix(tuple(base), arc)


# --- numeric checks of decay bounds ----------------------------------------


def check_comparison_lemma(v: HybridArc, a: float, b: float, c: float):
    """Check ``v(t,j) <= exp(-a (t + j)) v(0,0) + c b`` at every sample.

    Hybrid time is measured from the arc's first point.

    Returns:
        (holds, first_violation) where ``first_violation`` is ``(t, j)`` or None.
    """
    if v.shape != (1, 1):
        raise DimensionMismatch("comparison lemma needs a scalar arc")
    vals = [s for s in v.samples()]
    if any(val[0, 0] < -1e-12 for _, _, val in vals):
        raise NegativeArcValue("arc takes negative values")
    t0, j0 = v.domain.t0, v.domain.j0
    v0 = float(v.values[0][0, 0, 0])
    for t, j, val in vals:
        bound = math.exp(-a * ((t - t0) + (j - j0))) * v0 + c * b
        if val[0, 0] > bound + 1e-12 * max(1.0, abs(bound)):
            return False, (t, j)
    return True, None


def _distances(arc: HybridArc, distance_set: AffineSubspace | None):
    for t, j, val in arc.samples():
        d = float(np.linalg.norm(val)) if distance_set is None else distance_set.distance(val)
        yield t, j, d


def check_ues_bound(arc: HybridArc, kappa: float, lam: float, distance_set: AffineSubspace | None = None):
    """Pointwise check of ``|phi(t,j)| <= kappa |phi(t0,j0)| exp(-lam (t + j))``.

    Returns:
        (holds, margin) with margin the minimum of envelope minus distance.
    """
    samples = list(_distances(arc, distance_set))
    if not samples:
        raise HybridTimeError("empty arc")
    t0, j0, d0 = samples[0]
    margin = math.inf
    for t, j, d in samples:
        env = kappa * d0 * math.exp(-lam * ((t - t0) + (j - j0)))
        margin = min(margin, env - d)
    return margin >= -1e-12 * max(1.0, kappa * d0), margin


def fit_exponential_envelope(arc: HybridArc, fraction: float = 0.2):
    """Fit ``(kappa, lam)`` on the first ``fraction`` of the arc's hybrid length.

    ``lam`` is the average log-decay rate between the first point and the end
    of the fitting segment; ``kappa`` is the smallest constant for which the
    envelope holds on that segment.
    """
    samples = list(_distances(arc, None))
    t0, j0, d0 = samples[0]
    if d0 == 0:
        return 1.0, 0.0
    total = arc.domain.total_length()
    horizon = fraction * total
    seg = [(t - t0 + j - j0, d) for t, j, d in samples if (t - t0 + j - j0) <= horizon + TIME_TOL]
    s_end, d_end = seg[-1]
    lam = max(-math.log(max(d_end, 1e-300) / d0) / s_end, 0.0) if s_end > 0 else 0.0
    kappa = max(d * math.exp(lam * s) / d0 for s, d in seg)
    return max(kappa, 1.0), lam
