"""Hybrid time domains, hybrid arcs, windows and hybrid integrals.

A hybrid time domain is an ordered list of flow intervals ``[t_j, t_{j+1}] x {j}``.
A :class:`HybridArc` stores, for every interval, flow samples on a grid that
includes both endpoints, and for every jump ``(t_{j+1}, j) -> (t_{j+1}, j+1)``
the pre-jump value that enters jump sums. The pre-jump value is kept apart from
the flow samples because signals such as ``psi`` are allowed to take a
different value at the jump instant than the limit of their flow.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

TIME_TOL = 1e-9


class HybridTimeError(ValueError):
    """Base class for malformed domains, arcs and windows."""


class NonContiguous(HybridTimeError):
    pass


class NegativeInterval(HybridTimeError):
    pass


class JumpIndexGap(HybridTimeError):
    pass


class PointNotInDomain(HybridTimeError):
    pass


class DomainTooShort(HybridTimeError):
    pass


class WindowOutsideArc(HybridTimeError):
    pass


class InvalidP(HybridTimeError):
    pass


@dataclass(frozen=True)
class Interval:
    t_start: float
    t_end: float
    j: int

    @property
    def length(self) -> float:
        return self.t_end - self.t_start

    @property
    def degenerate(self) -> bool:
        return self.t_end - self.t_start <= TIME_TOL


@dataclass(frozen=True)
class HybridTimeDomain:
    """Validated, immutable hybrid time domain."""

    intervals: tuple[Interval, ...]

    def __post_init__(self):
        if not self.intervals:
            raise HybridTimeError("domain needs at least one interval")
        first = self.intervals[0]
        if first.j < 0:
            raise JumpIndexGap("jump index must be nonnegative")
        for k, iv in enumerate(self.intervals):
            if iv.t_end < iv.t_start - TIME_TOL:
                raise NegativeInterval(f"interval {iv.j} has t_end < t_start")
            if k == 0:
                continue
            prev = self.intervals[k - 1]
            if iv.j != prev.j + 1:
                raise JumpIndexGap(f"jump index {iv.j} follows {prev.j}")
            if abs(iv.t_start - prev.t_end) > TIME_TOL:
                raise NonContiguous(
                    f"interval {prev.j} ends at {prev.t_end} but interval {iv.j} "
                    f"starts at {iv.t_start}"
                )

    def __len__(self) -> int:
        return len(self.intervals)

    def __iter__(self) -> Iterator[Interval]:
        return iter(self.intervals)

    @property
    def j0(self) -> int:
        return self.intervals[0].j

    @property
    def t0(self) -> float:
        return self.intervals[0].t_start

    @property
    def t_final(self) -> float:
        return self.intervals[-1].t_end

    @property
    def j_final(self) -> int:
        return self.intervals[-1].j

    @property
    def num_jumps(self) -> int:
        return len(self.intervals) - 1

    @property
    def jump_times(self) -> list[float]:
        return [iv.t_end for iv in self.intervals[:-1]]

    def total_length(self) -> float:
        """Hybrid length ``(T - t0) + (J - j0)`` of the whole domain."""
        return (self.t_final - self.t0) + (self.j_final - self.j0)

    def index_of(self, j: int) -> int:
        k = j - self.j0
        if k < 0 or k >= len(self.intervals):
            raise PointNotInDomain(f"jump index {j} not in domain")
        return k

    def interval(self, j: int) -> Interval:
        return self.intervals[self.index_of(j)]

    def contains(self, t: float, j: int) -> bool:
        k = j - self.j0
        if k < 0 or k >= len(self.intervals):
            return False
        iv = self.intervals[k]
        return iv.t_start - TIME_TOL <= t <= iv.t_end + TIME_TOL

    def restrict(self, t: float, j: int) -> "HybridTimeDomain":
        """Sub-domain of points at or after ``(t, j)``."""
        if not self.contains(t, j):
            raise PointNotInDomain(f"({t}, {j}) not in domain")
        k = self.index_of(j)
        first = self.intervals[k]
        head = Interval(min(t, first.t_end), first.t_end, j)
        return HybridTimeDomain((head,) + self.intervals[k + 1:])

    def truncate(self, t_max: float = math.inf, j_max: int | None = None) -> "HybridTimeDomain":
        """Keep points with ``t <= t_max`` and ``j <= j_max``."""
        out = []
        for iv in self.intervals:
            if j_max is not None and iv.j > j_max:
                break
            if iv.t_start > t_max + TIME_TOL:
                break
            out.append(Interval(iv.t_start, min(iv.t_end, t_max), iv.j))
        return HybridTimeDomain(tuple(out))

    def breakpoints(self) -> list[tuple[float, float, int]]:
        return [(iv.t_start, iv.t_end, iv.j) for iv in self.intervals]


def make_domain(breakpoints: Sequence[tuple[float, float, int]]) -> HybridTimeDomain:
    """Build a domain from ``(t_start, t_end, j)`` triples sorted by ``j``.

    A domain whose jump counter starts at 0 must also start at ``t = 0``.
    Sub-domains obtained by :meth:`HybridTimeDomain.restrict` are exempt.
    """
    if not breakpoints:
        raise HybridTimeError("breakpoint list is empty")
    dom = HybridTimeDomain(tuple(Interval(float(a), float(b), int(j)) for a, b, j in breakpoints))
    if dom.j0 == 0 and abs(dom.t0) > TIME_TOL:
        raise HybridTimeError("a domain starting at j=0 must start at t=0")
    return dom


def periodic_domain(period: float, num_periods: int, t_final: float | None = None) -> HybridTimeDomain:
    """Domain jumping every ``period`` seconds, ``num_periods`` flow intervals.

    ``period == 0`` gives a purely discrete domain of instantaneous intervals.
    When ``t_final`` is given the last interval is extended or cut to end there.
    """
    if num_periods < 1:
        raise HybridTimeError("num_periods must be >= 1")
    if period < 0:
        raise NegativeInterval("period must be nonnegative")
    bps = [(k * period, (k + 1) * period, k) for k in range(num_periods)]
    if t_final is not None:
        a, _, j = bps[-1]
        bps[-1] = (a, t_final, j)
    return make_domain(bps)


def flow_grid(t_start: float, t_end: float, step: float) -> np.ndarray:
    """Uniform grid on ``[t_start, t_end]`` with spacing at most ``step``."""
    length = t_end - t_start
    if length <= TIME_TOL:
        return np.array([t_start])
    n = max(1, int(math.ceil(length / step - 1e-9)))
    return np.linspace(t_start, t_end, n + 1)


@dataclass(frozen=True)
class AffineSubspace:
    """The set ``{point + basis @ c}``; ``basis=None`` means the single point."""

    point: np.ndarray
    basis: np.ndarray | None = None

    def distance(self, x: np.ndarray) -> float:
        d = np.asarray(x, dtype=float).reshape(-1) - np.asarray(self.point, dtype=float).reshape(-1)
        if self.basis is not None:
            q, _ = np.linalg.qr(np.asarray(self.basis, dtype=float).reshape(d.size, -1))
            d = d - q @ (q.T @ d)
        return float(np.linalg.norm(d))


@dataclass(frozen=True, eq=False)
class HybridArc:
    """Matrix-valued function sampled on a hybrid time domain.

    Attributes:
        domain: the arc's hybrid time domain.
        times: per interval, increasing sample times including both endpoints
            (a single time for an instantaneous interval).
        values: per interval, array of shape ``(n_i, r, c)``.
        jumps: array of shape ``(num_jumps, r, c)``; ``jumps[k]`` is the
            pre-jump value ``phi(t_{k+1}, j0 + k)`` used in jump sums.
    """

    domain: HybridTimeDomain
    times: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]
    jumps: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.times) != len(self.domain) or len(self.values) != len(self.domain):
            raise HybridTimeError("one sample block per interval is required")
        shape = None
        times, values = [], []
        for iv, ts, vs in zip(self.domain, self.times, self.values):
            ts = np.asarray(ts, dtype=float).reshape(-1)
            vs = np.asarray(vs, dtype=float)
            if vs.ndim == 1:
                vs = vs.reshape(-1, 1, 1)
            elif vs.ndim == 2:
                vs = vs[:, :, None]
            if vs.shape[0] != ts.size:
                raise HybridTimeError(f"interval {iv.j}: {ts.size} times vs {vs.shape[0]} values")
            if shape is None:
                shape = vs.shape[1:]
            elif vs.shape[1:] != shape:
                raise HybridTimeError("all values must share one shape")
            if iv.degenerate:
                if ts.size != 1:
                    raise HybridTimeError(f"instantaneous interval {iv.j} needs exactly one sample")
            else:
                if ts.size < 2:
                    raise HybridTimeError(f"interval {iv.j} needs at least two samples")
                if abs(ts[0] - iv.t_start) > TIME_TOL or abs(ts[-1] - iv.t_end) > TIME_TOL:
                    raise HybridTimeError(f"interval {iv.j} samples must include both endpoints")
                if np.any(np.diff(ts) < 0):
                    raise HybridTimeError(f"interval {iv.j} sample times must be sorted")
            times.append(ts)
            values.append(vs)
        object.__setattr__(self, "times", tuple(times))
        object.__setattr__(self, "values", tuple(values))
        if self.jumps is None:
            jumps = np.array([v[-1] for v in values[:-1]]).reshape((-1,) + shape)
        else:
            jumps = np.asarray(self.jumps, dtype=float).reshape((-1,) + shape)
            if jumps.shape[0] != self.domain.num_jumps:
                raise HybridTimeError("one jump value per jump is required")
        object.__setattr__(self, "jumps", jumps)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values[0].shape[1:]

    def flat_values(self) -> np.ndarray:
        return np.concatenate(self.values)

    def jump_value(self, j: int) -> np.ndarray:
        """Pre-jump value at ``(t_{j+1}, j)``."""
        k = self.domain.index_of(j)
        if k >= self.domain.num_jumps:
            raise PointNotInDomain(f"no jump after interval {j}")
        return self.jumps[k]

    def sample(self, j: int, ts) -> np.ndarray:
        """Flow values of interval ``j`` at times ``ts`` (linear interpolation)."""
        k = self.domain.index_of(j)
        return interp_samples(self.times[k], self.values[k], ts)

    def value_at(self, t: float, j: int) -> np.ndarray:
        if not self.domain.contains(t, j):
            raise PointNotInDomain(f"({t}, {j}) not in arc domain")
        return self.sample(j, [t])[0]

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "HybridArc":
        """Apply ``fn`` to every (r, c) value, flows and jumps alike."""
        values = tuple(np.array([fn(v) for v in vs]) for vs in self.values)
        if self.domain.num_jumps:
            jumps = np.array([fn(v) for v in self.jumps])
        else:
            jumps = np.zeros((0,) + np.asarray(fn(self.values[0][0])).shape)
        return HybridArc(self.domain, self.times, values, jumps)

    def samples(self) -> Iterator[tuple[float, int, np.ndarray]]:
        """Flow samples followed by each interval's pre-jump value (if distinct)."""
        for k, iv in enumerate(self.domain):
            for t, v in zip(self.times[k], self.values[k]):
                yield float(t), iv.j, v
            if k < self.domain.num_jumps and not np.array_equal(self.jumps[k], self.values[k][-1]):
                yield iv.t_end, iv.j, self.jumps[k]

    @classmethod
    def from_function(
        cls,
        domain: HybridTimeDomain,
        flow_fn: Callable[[float, int], np.ndarray],
        step: float,
        jump_fn: Callable[[float, int], np.ndarray] | None = None,
    ) -> "HybridArc":
        """Sample ``flow_fn`` on each interval at half of ``step``.

        Sampling at half-steps puts a sample on every stage point that a
        fixed-step RK4 integrator with step ``step`` asks for. ``jump_fn``
        gives the pre-jump value; instantaneous intervals take their single
        sample from it.
        """
        jump_fn = jump_fn or flow_fn
        times, values, jumps = [], [], []
        for k, iv in enumerate(domain):
            has_jump = k < domain.num_jumps
            if iv.degenerate:
                ts = np.array([iv.t_start])
                fn = jump_fn if has_jump else flow_fn
                vs = [as_matrix(fn(iv.t_start, iv.j))]
            else:
                coarse = flow_grid(iv.t_start, iv.t_end, step)
                ts = np.linspace(iv.t_start, iv.t_end, 2 * (coarse.size - 1) + 1)
                vs = [as_matrix(flow_fn(t, iv.j)) for t in ts]
            times.append(ts)
            values.append(np.array(vs))
            if has_jump:
                jumps.append(as_matrix(jump_fn(iv.t_end, iv.j)))
        shape = values[0].shape[1:]
        jumps_arr = np.array(jumps).reshape((-1,) + shape)
        return cls(domain, tuple(times), tuple(values), jumps_arr)

    @classmethod
    def constant(cls, domain: HybridTimeDomain, value, step: float = 1.0) -> "HybridArc":
        v = np.asarray(value, dtype=float)
        return cls.from_function(domain, lambda t, j: v, step)


def interp_samples(tk: np.ndarray, vk: np.ndarray, ts) -> np.ndarray:
    """Piecewise-linear interpolation of stacked values ``vk`` taken at ``tk``."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if tk.size == 1:
        return np.repeat(vk, ts.size, axis=0)
    idx = np.clip(np.searchsorted(tk, ts, side="right") - 1, 0, tk.size - 2)
    t_lo, t_hi = tk[idx], tk[idx + 1]
    gap = t_hi - t_lo
    w = np.where(gap > 0, (ts - t_lo) / np.where(gap > 0, gap, 1.0), 0.0)
    w = np.clip(w, 0.0, 1.0)[:, None, None]
    return (1.0 - w) * vk[idx] + w * vk[idx + 1]


def as_matrix(v) -> np.ndarray:
    """Scalars become 1x1, 1-D arrays become column vectors."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return v.reshape(1, 1)
    if v.ndim == 1:
        return v.reshape(-1, 1)
    return v


@dataclass(frozen=True)
class Window:
    """Shortest sub-domain from ``(t, j)`` of hybrid length at least ``K``."""

    base: tuple[float, int]
    K: float
    pieces: tuple[Interval, ...]
    terminal: tuple[float, int]

    @property
    def hybrid_length(self) -> float:
        return (self.terminal[0] - self.base[0]) + (self.terminal[1] - self.base[1])

    def as_domain(self) -> HybridTimeDomain:
        return HybridTimeDomain(self.pieces)


def window(dom: HybridTimeDomain, t: float, j: int, K: float) -> Window:
    """Compute the window of length ``K`` starting at ``(t, j)``.

    The terminal point ``(s_K, m_K)`` satisfies
    ``K <= (s_K - t) + (m_K - j) < K + 1``.
    """
    if not (K > 0):
        raise HybridTimeError("K must be positive")
    if not dom.contains(t, j):
        raise PointNotInDomain(f"({t}, {j}) not in domain")
    k = dom.index_of(j)
    pos = float(min(max(t, dom.intervals[k].t_start), dom.intervals[k].t_end))
    length = 0.0
    pieces = []
    while True:
        iv = dom.intervals[k]
        avail = iv.t_end - pos
        if length + avail >= K - TIME_TOL:
            s = min(pos + (K - length), iv.t_end)
            pieces.append(Interval(pos, s, iv.j))
            return Window((t, j), K, tuple(pieces), (s, iv.j))
        pieces.append(Interval(pos, iv.t_end, iv.j))
        length += avail
        if k + 1 >= len(dom.intervals):
            raise DomainTooShort(
                f"remaining hybrid length {length:.6g} from ({t}, {j}) is below K={K}"
            )
        k += 1
        length += 1.0
        pos = dom.intervals[k].t_start
        if length >= K - TIME_TOL:
            pieces.append(Interval(pos, pos, dom.intervals[k].j))
            return Window((t, j), K, tuple(pieces), (pos, dom.intervals[k].j))


def full_window(dom: HybridTimeDomain, t: float | None = None, j: int | None = None) -> Window:
    """Window covering everything from ``(t, j)`` (default: domain start) to the end."""
    if t is None:
        t, j = dom.t0, dom.j0
    sub = dom.restrict(t, j)
    return Window((t, j), max(sub.total_length(), 0.0), sub.intervals, (sub.t_final, sub.j_final))


def _flow_integral(arc: HybridArc, j: int, a: float, b: float) -> np.ndarray:
    """Trapezoidal integral of the flow samples of interval ``j`` over ``[a, b]``."""
    if b - a <= TIME_TOL:
        return np.zeros(arc.shape)
    k = arc.domain.index_of(j)
    tk, vk = arc.times[k], arc.values[k]
    inner = (tk > a + TIME_TOL) & (tk < b - TIME_TOL)
    ts = np.concatenate([[a], tk[inner], [b]])
    vs = np.concatenate([arc.sample(j, [a]), vk[inner], arc.sample(j, [b])])
    dt = np.diff(ts)[:, None, None]
    return np.sum(0.5 * dt * (vs[1:] + vs[:-1]), axis=0)


def _covers(arc: HybridArc, w: Window) -> bool:
    for p in w.pieces:
        if not (arc.domain.contains(p.t_start, p.j) and arc.domain.contains(p.t_end, p.j)):
            return False
    return True


def hybrid_integral(arc: HybridArc, w: Window) -> np.ndarray:
    """Flow integrals over the window pieces plus the jump values crossed."""
    if not _covers(arc, w):
        raise WindowOutsideArc("window is not contained in the arc's domain")
    total = np.zeros(arc.shape)
    for p in w.pieces:
        total = total + _flow_integral(arc, p.j, p.t_start, p.t_end)
    for p in w.pieces[:-1]:
        total = total + arc.jump_value(p.j)
    return total


def lp_norm(arc: HybridArc, p: float, distance_set: AffineSubspace | None = None) -> float:
    """Hybrid L_p norm over the whole arc (``p = inf`` gives the sup over samples)."""
    if not (p >= 1):
        raise InvalidP(f"p must be in [1, inf], got {p}")
    if distance_set is None:
        dist = lambda v: np.atleast_2d(float(np.linalg.norm(v)))
    else:
        dist = lambda v: np.atleast_2d(distance_set.distance(v))
    d = arc.map(dist)
    if math.isinf(p):
        return float(max(d.flat_values().max(), d.jumps.max() if d.jumps.size else 0.0))
    powered = d.map(lambda v: v ** p)
    return float(hybrid_integral(powered, full_window(arc.domain))[0, 0] ** (1.0 / p))


# --- CSV arc format -------------------------------------------------------
#
# Header ``t,j,v_0,...,v_{rc-1}``; rows sorted by (j, t); values row-major.
# An instantaneous interval is a single row. When a pre-jump value differs
# from the flow sample at the interval's end, it follows as one more row with
# the same (t, j).


def write_arc_csv(arc: HybridArc, path_or_buf) -> None:
    r, c = arc.shape
    header = ["t", "j"] + [f"v_{i}" for i in range(r * c)]
    rows = []
    for k, iv in enumerate(arc.domain):
        for t, v in zip(arc.times[k], arc.values[k]):
            rows.append([t, iv.j, *v.reshape(-1)])
        if k < arc.domain.num_jumps and not iv.degenerate:
            if not np.array_equal(arc.jumps[k], arc.values[k][-1]):
                rows.append([iv.t_end, iv.j, *arc.jumps[k].reshape(-1)])
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(row[0])), int(row[1])] + [repr(float(x)) for x in row[2:]])
    finally:
        if own:
            fh.close()


def read_arc_csv(path_or_buf, shape: tuple[int, int] | None = None) -> HybridArc:
    """Parse the CSV arc format; ``shape`` defaults to a column vector."""
    if isinstance(path_or_buf, (str, Path)):
        text = Path(path_or_buf).read_text()
    elif isinstance(path_or_buf, io.StringIO):
        text = path_or_buf.getvalue()
    else:
        text = path_or_buf.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise HybridTimeError("empty arc CSV") from None
    if header[:2] != ["t", "j"] or len(header) < 3:
        raise HybridTimeError(f"bad arc CSV header: {header}")
    n = len(header) - 2
    shape = shape or (n, 1)
    if shape[0] * shape[1] != n:
        raise HybridTimeError(f"shape {shape} does not match {n} value columns")
    blocks: dict[int, list[tuple[float, np.ndarray]]] = {}
    for row in reader:
        if not row:
            continue
        t, j = float(row[0]), int(row[1])
        blocks.setdefault(j, []).append((t, np.array([float(x) for x in row[2:]]).reshape(shape)))
    js = sorted(blocks)
    times, values, jumps, bps = [], [], [], []
    for idx, j in enumerate(js):
        rows = blocks[j]
        has_jump = idx < len(js) - 1
        jump_v = None
        if has_jump and len(rows) >= 3 and abs(rows[-1][0] - rows[-2][0]) <= TIME_TOL:
            jump_v = rows[-1][1]
            rows = rows[:-1]
        ts = np.array([r[0] for r in rows])
        vs = np.array([r[1] for r in rows])
        bps.append((ts[0], ts[-1], j))
        times.append(ts)
        values.append(vs)
        if has_jump:
            jumps.append(vs[-1] if jump_v is None else jump_v)
    domain = HybridTimeDomain(tuple(Interval(a, b, j) for a, b, j in bps))
    return HybridArc(domain, tuple(times), tuple(values), np.array(jumps).reshape((-1,) + tuple(shape)))
