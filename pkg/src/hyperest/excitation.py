"""Certification of persistency of excitation and uniform observability.

Every check scans a finite set of window base points, computes the windowed
Gramian at each one and reports the smallest eigenvalue found, together with
the base point and eigenvector that achieve it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .hybrid_sim import DimensionMismatch, LinearHybridSystem, _same_domain, propagate
from .hybrid_time import (
    TIME_TOL,
    DomainTooShort,
    HybridArc,
    HybridTimeDomain,
    _flow_integral,
    hybrid_integral,
    interp_samples,
    window,
)
from .linalg import max_eig, min_eig

MU_TOL = 1e-6


class ExcitationError(ValueError):
    pass


class DomainMismatch(ExcitationError):
    pass


class DomainTooShortForK(ExcitationError):
    pass


class DomainTooShortForT(ExcitationError):
    pass


class TooFewJumps(ExcitationError):
    pass


@dataclass
class ExcitationReport:
    kind: str
    holds: bool
    K: float
    mu: float
    worst_window_base: tuple[float, int]
    witness: np.ndarray
    worst_gramian: np.ndarray
    windows: list[tuple[float, int, float]] = field(default_factory=list)
    mu_tol: float = MU_TOL
    certificate_valid: bool | None = None

    def to_text(self) -> str:
        lines = [
            f"kind: {self.kind}",
            f"holds: {str(self.holds).lower()}",
            f"K: {self.K!r}",
            f"mu: {self.mu!r}",
            f"mu_tol: {self.mu_tol!r}",
            f"worst_window_base_t: {self.worst_window_base[0]!r}",
            f"worst_window_base_j: {self.worst_window_base[1]}",
            "witness: " + " ".join(repr(float(x)) for x in self.witness),
            f"windows_scanned: {len(self.windows)}",
        ]
        if self.certificate_valid is not None:
            lines.append(f"certificate_valid: {str(self.certificate_valid).lower()}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    def write_windows_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["base_t", "base_j", "lambda_min"])
            for t, j, lam in self.windows:
                w.writerow([repr(float(t)), int(j), repr(float(lam))])


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            out[key.strip()] = value.strip()
    return out


def _reduce(kind: str, K: float, gramians, mu_tol: float) -> ExcitationReport:
    """Min-eigenvalue reduction over ``(t, j, G)`` triples."""
    windows = []
    worst = None
    for t, j, G in gramians:
        lam, v = min_eig(G)
        windows.append((t, j, lam))
        if worst is None or lam < worst[0]:
            worst = (lam, (t, j), v, G)
    lam, base, v, G = worst
    return ExcitationReport(
        kind=kind,
        holds=bool(lam > mu_tol),
        K=K,
        mu=lam,
        worst_window_base=base,
        witness=v,
        worst_gramian=G,
        windows=windows,
        mu_tol=mu_tol,
    )


def scan_bases(dom: HybridTimeDomain, stride: float) -> list[tuple[float, int]]:
    """Grid points every ``stride`` along each flow, plus both sides of every jump."""
    bases = []
    for k, iv in enumerate(dom):
        if iv.degenerate:
            bases.append((iv.t_start, iv.j))
            continue
        n = int(math.floor((iv.t_end - iv.t_start) / stride + 1e-9))
        for i in range(n + 1):
            t = iv.t_start + i * stride
            if t < iv.t_end - TIME_TOL:
                bases.append((t, iv.j))
        if k < dom.num_jumps:
            bases.append((iv.t_end, iv.j))
    return bases


def build_phi_ab(A: HybridArc, B: HybridArc) -> HybridArc:
    """Arc equal to ``A`` on flows and to ``B`` at jump instants."""
    if not _same_domain(A.domain, B.domain):
        raise DomainMismatch("dom A differs from dom B")
    if A.shape != B.shape:
        raise DimensionMismatch(f"A is {A.shape}, B is {B.shape}")
    values = list(A.values)
    for k, iv in enumerate(A.domain):
        # instantaneous intervals carry only a jump value
        if iv.degenerate:
            src = B.jumps[k] if k < B.domain.num_jumps else B.values[k][0]
            values[k] = src[None].copy()
    return HybridArc(A.domain, A.times, tuple(values), B.jumps.copy())


def _window_gramians(phi: HybridArc, K: float, stride: float):
    dom = phi.domain
    found = False
    for t, j in scan_bases(dom, stride):
        try:
            w = window(dom, t, j, K)
        except DomainTooShort:
            continue
        found = True
        yield t, j, hybrid_integral(phi, w)
    if not found:
        raise DomainTooShortForK(f"no window of length K={K} fits in the domain")


def check_hpe(A: HybridArc, B: HybridArc, K: float, scan_stride: float = 0.1, mu_tol: float = MU_TOL) -> ExcitationReport:
    """Hybrid persistency of excitation of the pair ``(A, B)``."""
    phi = build_phi_ab(A, B)
    return _reduce("HPE", K, list(_window_gramians(phi, K, scan_stride)), mu_tol)


def outer(psi: HybridArc) -> HybridArc:
    return psi.map(lambda v: v @ v.T)


def check_cpe(psi: HybridArc, T: float, scan_stride: float = 0.1, mu_tol: float = MU_TOL) -> ExcitationReport:
    """Continuous-time PE of ``psi``: sliding windows ``[t, t+T]``, jumps ignored."""
    pp = outer(psi)
    dom = pp.domain
    t0, tf = dom.t0, dom.t_final
    if tf - t0 < T - TIME_TOL:
        raise DomainTooShortForT(f"flow horizon {tf - t0:.6g} is shorter than T={T}")
    n = int(math.floor((tf - t0 - T) / scan_stride + 1e-9))
    flows = [iv for iv in dom if not iv.degenerate]
    grams = []
    for i in range(n + 1):
        a = t0 + i * scan_stride
        b = a + T
        G = np.zeros(pp.shape)
        for iv in flows:
            lo, hi = max(a, iv.t_start), min(b, iv.t_end)
            if hi > lo:
                G = G + _flow_integral(pp, iv.j, lo, hi)
        j = next(iv.j for iv in dom if iv.t_end >= a - TIME_TOL)
        grams.append((a, j, G))
    return _reduce("CPE", T, grams, mu_tol)


def check_dpe(psi: HybridArc, N: int, mu_tol: float = MU_TOL) -> ExcitationReport:
    """Discrete-time PE: sums of ``psi psi^T`` over ``N`` consecutive jump samples."""
    jumps = psi.jumps
    dom = psi.domain
    if N < 1 or jumps.shape[0] < N:
        raise TooFewJumps(f"{jumps.shape[0]} jump samples, need {N}")
    pp = np.einsum("kia,kja->kij", jumps, jumps)
    grams = []
    for s in range(jumps.shape[0] - N + 1):
        iv = dom.intervals[s]
        grams.append((iv.t_end, iv.j, pp[s:s + N].sum(axis=0)))
    return _reduce("DPE", float(N), grams, mu_tol)


@dataclass(frozen=True)
class LyapunovCertificate:
    """``P`` (constant matrix or arc), bounds ``p1, p2`` and arcs ``Q_c, Q_d``."""

    P: np.ndarray | HybridArc
    Q_c: HybridArc
    Q_d: HybridArc
    p1: float = 1.0
    p2: float = 1.0


def gradient_certificate(sys: LinearHybridSystem) -> LyapunovCertificate:
    """``P = I``, ``Q_c = A``, ``Q_d = B``, valid for symmetric PSD data with ``|B| <= 1``."""
    return LyapunovCertificate(np.eye(sys.dim), sys.A, sys.B, 1.0, 1.0)


def _p_sampler(cert: LyapunovCertificate):
    """Functions returning P and its time derivative on interval ``j`` at times ``ts``."""
    if not isinstance(cert.P, HybridArc):
        P = np.asarray(cert.P, dtype=float)
        const = lambda j, ts: np.repeat(P[None], len(ts), axis=0)
        zero = lambda j, ts: np.zeros((len(ts),) + P.shape)
        return const, zero, lambda k: P, lambda k: P
    arc = cert.P

    def deriv(j, ts):
        k = arc.domain.index_of(j)
        tk, vk = arc.times[k], arc.values[k]
        if tk.size < 2:
            return np.zeros((len(ts),) + arc.shape)
        return interp_samples(tk, np.gradient(vk, tk, axis=0, edge_order=2 if tk.size > 2 else 1), ts)

    return arc.sample, deriv, lambda k: arc.values[k][-1], lambda k: arc.values[k + 1][0]


@dataclass
class AssumptionReport:
    A1_flow: bool
    A1_jump: bool
    A2: bool
    A3: bool
    flow_margin: float
    jump_margin: float
    A_bar: float
    B_bar: float
    A3_margin: float
    worst_points: dict = field(default_factory=dict)

    @property
    def all_hold(self) -> bool:
        return self.A1_flow and self.A1_jump and self.A2 and self.A3


def verify_assumptions(sys: LinearHybridSystem, cert: LyapunovCertificate, tol: float = 1e-9) -> AssumptionReport:
    """Numerical check of the Lyapunov inequalities, boundedness and structure.

    Margins are the worst ``lambda_max`` of the flow and jump inequality
    residuals (must be ``<= tol``), and for the structural check the worst of
    asymmetry, negative eigenvalues and ``|B| - 1``.
    """
    for name, arc in (("Q_c", cert.Q_c), ("Q_d", cert.Q_d)):
        if not _same_domain(arc.domain, sys.domain):
            raise DomainMismatch(f"dom {name} differs from the system domain")
    if isinstance(cert.P, HybridArc) and not _same_domain(cert.P.domain, sys.domain):
        raise DomainMismatch("dom P differs from the system domain")
    p_at, p_dot, p_pre, p_post = _p_sampler(cert)
    m = sys.dim
    worst = {}
    flow_margin = -math.inf
    for k, iv in enumerate(sys.domain):
        if iv.degenerate:
            continue
        ts = sys.A.times[k]
        A = sys.A.values[k]
        P = p_at(iv.j, ts)
        Pd = p_dot(iv.j, ts)
        Qc = cert.Q_c.sample(iv.j, ts)
        R = Pd - np.swapaxes(A, 1, 2) @ P - P @ A + Qc
        for t, r in zip(ts, R):
            lam = max_eig(0.5 * (r + r.T))
            if lam > flow_margin:
                flow_margin, worst["A1_flow"] = lam, (float(t), iv.j)
    jump_margin = -math.inf
    I = np.eye(m)
    for k in range(sys.domain.num_jumps):
        iv = sys.domain.intervals[k]
        IB = I - sys.B.jumps[k]
        R = IB.T @ p_post(k) @ IB - p_pre(k) + cert.Q_d.jumps[k]
        lam = max_eig(0.5 * (R + R.T))
        if lam > jump_margin:
            jump_margin, worst["A1_jump"] = lam, (iv.t_end, iv.j)
    p_norms = [np.linalg.norm(p_pre(k), 2) for k in range(len(sys.domain) - 1)] or [
        np.linalg.norm(p_at(sys.domain.j0, [sys.domain.t0])[0], 2)
    ]
    p_ok = cert.p1 - 1e-12 <= min(p_norms) and max(p_norms) <= cert.p2 + 1e-12

    A_bar = max(np.linalg.norm(v, 2) for v in sys.A.flat_values())
    B_bar = max([np.linalg.norm(v, 2) for v in sys.B.jumps] or [0.0])
    A2 = bool(np.isfinite(A_bar) and np.isfinite(B_bar))

    a3 = -math.inf
    for name, vals, locs in (
        ("A", sys.A.flat_values(), None),
        ("B", sys.B.jumps, [(iv.t_end, iv.j) for iv in sys.domain.intervals[:-1]]),
    ):
        for idx, v in enumerate(vals):
            asym = float(np.max(np.abs(v - v.T)))
            neg = -min_eig(0.5 * (v + v.T))[0]
            score = max(asym, neg)
            if name == "B":
                score = max(score, np.linalg.norm(v, 2) - 1.0)
            if score > a3:
                a3 = score
                worst["A3"] = (name, locs[idx] if locs else idx)
    if flow_margin == -math.inf:
        flow_margin = 0.0
    if jump_margin == -math.inf:
        jump_margin = 0.0
    return AssumptionReport(
        A1_flow=bool(flow_margin <= tol and p_ok),
        A1_jump=bool(jump_margin <= tol and p_ok),
        A2=A2,
        A3=bool(a3 <= tol),
        flow_margin=float(flow_margin),
        jump_margin=float(jump_margin),
        A_bar=float(A_bar),
        B_bar=float(B_bar),
        A3_margin=float(a3),
        worst_points=worst,
    )


def check_huo(
    sys: LinearHybridSystem,
    cert: LyapunovCertificate,
    K: float,
    scan_stride: float = 0.1,
    h: float = 0.01,
    mu_tol: float = MU_TOL,
) -> ExcitationReport:
    """Hybrid uniform observability: transition-weighted Gramian over each window.

    ``h`` is the integration step used for the transition matrix. When the
    certificate fails :func:`verify_assumptions` the Gramian is still
    computed and the report is flagged with ``certificate_valid = False``.
    """
    for name, arc in (("Q_c", cert.Q_c), ("Q_d", cert.Q_d)):
        if not _same_domain(arc.domain, sys.domain):
            raise DomainMismatch(f"dom {name} differs from the system domain")
    valid = verify_assumptions(sys, cert).all_hold
    dom = sys.domain
    grams = []
    for t, j in scan_bases(dom, scan_stride):
        try:
            w = window(dom, t, j, K)
        except DomainTooShort:
            continue
        blocks, pre_jump = propagate(sys, np.eye(sys.dim), w.pieces, h, False)
        G = np.zeros((sys.dim, sys.dim))
        for (ts, Ms), p in zip(blocks, w.pieces):
            if ts.size < 2:
                continue
            Q = cert.Q_c.sample(p.j, ts)
            f = np.swapaxes(Ms, 1, 2) @ Q @ Ms
            G = G + np.sum(0.5 * np.diff(ts)[:, None, None] * (f[1:] + f[:-1]), axis=0)
        for M, p in zip(pre_jump, w.pieces[:-1]):
            G = G + M.T @ cert.Q_d.jump_value(p.j) @ M
        grams.append((t, j, G))
    if not grams:
        raise DomainTooShortForK(f"no window of length K={K} fits in the domain")
    report = _reduce("HUO", K, grams, mu_tol)
    report.certificate_valid = valid
    return report


def search_best_window(check: Callable[[float], ExcitationReport], K_grid: Sequence[float]):
    """Run ``check`` for every ``K`` in the grid and keep the largest ``mu``.

    Returns:
        (K_best, mu_best, curve) where ``curve`` lists ``(K, mu)`` pairs.
    """
    if not K_grid:
        raise ValueError("K grid is empty")
    curve = [(float(K), check(K).mu) for K in K_grid]
    K_best, mu_best = max(curve, key=lambda km: km[1])
    return K_best, mu_best, curve
