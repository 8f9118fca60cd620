from __future__ import annotations

import dataclasses
import logging
import math
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from reckit import compactify as cp
from reckit import flowdisc as fd
from reckit import relcore as rc
from reckit.errors import PreconditionError
from reckit.models import (
    CompactifiedSystem,
    FlowModel,
    Grid,
    PointSet,
    RegularFn,
    Relation,
    TimeChange,
    bits_of,
    iter_bits,
)

log = logging.getLogger(__name__)

ROOT_TOL = 1e-9
QUAD_TOL = 1e-8
HORIZON = 1e5
T_STAR_HORIZON = 100.0
PROBE_M = 25.0
DECADES = 6
MAX_DEPTH = 30
MAX_GROWTH = 1024  # segment length cap, in integrator steps
MAX_LEVELS = 16
SCAN = 64
ORBIT_CACHE = 4096

Points = np.ndarray


# ---------------------------------------------------------------------------
# Trajectories, quadrature and roots
# ---------------------------------------------------------------------------


class Trajectory:
    """t ↦ φ(sign·t, x) for t ≥ 0; ode flows keep their RK4 nodes at a fixed step."""

    def __init__(self, flow: FlowModel, x: Any, sign: int = 1, h: Optional[float] = None) -> None:
        if flow.kind == "combinatorial":
            raise PreconditionError("a combinatorial flow has no trajectories", witness=flow.name)
        if sign < 0 and not flow.reversible:
            raise PreconditionError("reverse time needs a reversible flow", witness=flow.name)
        self.flow = flow
        self.x = fd.as_points(flow, x)[0].copy()
        self.sign = 1 if sign >= 0 else -1
        self.h = float(h or fd.time_step(flow))
        self._field = fd.signed_field(flow, self.sign) if flow.kind == "ode" else None
        self._nodes = np.empty((64, self.x.size))
        self._nodes[0] = self.x
        self._count = 1

    def _node(self, k: int) -> np.ndarray:
        assert self._field is not None
        while self._count <= k:
            if self._count == self._nodes.shape[0]:
                self._nodes = np.concatenate([self._nodes, np.empty_like(self._nodes)])
            prev = self._nodes[self._count - 1][None, :]
            self._nodes[self._count] = fd.wrap_points(self.flow, fd.rk4_step(self._field, prev, self.h))[0]
            self._count += 1
        return self._nodes[k]

    def at(self, t: float) -> np.ndarray:
        if t <= 0.0:
            return self.x.copy()
        if self._field is None:
            assert self.flow.phi is not None
            p = np.asarray(self.flow.phi(self.sign * t, self.x[None, :]), dtype=float).reshape(1, -1)
            return fd.wrap_points(self.flow, p)[0]
        k = int(math.floor(t / self.h))
        p = self._node(k)
        rest = t - k * self.h
        if rest <= 0.0:
            return p.copy()
        return fd.wrap_points(self.flow, fd.rk4_step(self._field, p[None, :], rest))[0]


def _value(V: RegularFn, p: np.ndarray) -> float:
    v = float(V(p[None, :])[0])
    return 0.0 if math.isnan(v) else v


def _integrand(V: RegularFn, traj: Trajectory) -> Callable[[float], float]:
    def f(s: float) -> float:
        v = _value(V, traj.at(s))
        return 1.0 / v if v > 0.0 else math.inf

    return f


def _simpson(fa: float, fm: float, fb: float, h: float) -> float:
    return h / 6.0 * (fa + 4.0 * fm + fb)


def _refine(
    f: Callable[[float], float], a: float, b: float, fa: float, fm: float, fb: float, whole: float, tol: float, depth: int
) -> float:
    m = 0.5 * (a + b)
    flm, frm = f(0.5 * (a + m)), f(0.5 * (m + b))
    if not (math.isfinite(flm) and math.isfinite(frm)):
        return math.inf
    left = _simpson(fa, flm, fm, m - a)
    right = _simpson(fm, frm, fb, b - m)
    delta = left + right - whole
    if depth <= 0 or abs(delta) <= 15.0 * tol:
        return left + right + delta / 15.0
    return _refine(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + _refine(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)


def adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float = QUAD_TOL, max_depth: int = MAX_DEPTH) -> float:
    """∫_a^b f with Richardson-corrected recursive Simpson; inf once any sample is not finite."""
    if b <= a:
        return 0.0
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    if not (math.isfinite(fa) and math.isfinite(fm) and math.isfinite(fb)):
        return math.inf
    whole = _simpson(fa, fm, fb, b - a)
    return _refine(f, a, b, fa, fm, fb, whole, tol * max(1.0, abs(whole)), max_depth)


def bisect(pred: Callable[[float], bool], lo: float, hi: float, tol: float = ROOT_TOL, it: int = 200) -> float:
    """Smallest t in [lo, hi] with pred(t), given pred(hi) and not pred(lo)."""
    for _ in range(it):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _first_zero(V: RegularFn, traj: Trajectory, a: float, b: float, tol: float) -> float:
    def hits(s: float) -> bool:
        return _value(V, traj.at(s)) <= 0.0

    prev = a
    for k in range(1, SCAN + 1):
        s = a + (b - a) * k / SCAN
        if hits(s):
            return bisect(hits, prev, s, tol)
        prev = s
    log.warning("quadrature blew up on [%g, %g] without a sampled zero of V", a, b)
    return b


class _Stop(NamedTuple):
    kind: str  # reached|zero|horizon
    a: float  # start of the last segment
    b: float  # segment end, first zero time, or horizon
    acc: float  # ∫_0^a ds / V


def _march(traj: Trajectory, V: RegularFn, target: float, horizon: float, quad_tol: float, root_tol: float) -> _Stop:
    """Accumulate ∫ ds / V(φ(s, x)) over doubling segments until it passes `target`, V vanishes, or time runs out."""
    f = _integrand(V, traj)
    a, acc, H = 0.0, 0.0, traj.h
    while a < horizon:
        b = min(a + H, horizon)
        if _value(V, traj.at(b)) <= 0.0:
            return _Stop("zero", a, _first_zero(V, traj, a, b, root_tol), acc)
        part = adaptive_simpson(f, a, b, quad_tol)
        if not math.isfinite(part):
            return _Stop("zero", a, _first_zero(V, traj, a, b, root_tol), acc)
        if acc + part >= target:
            return _Stop("reached", a, b, acc)
        acc += part
        a = b
        if part < 0.25 * (target - acc):
            H = min(2.0 * H, MAX_GROWTH * traj.h)
    return _Stop("horizon", a, horizon, acc)


# ---------------------------------------------------------------------------
# Zero times and regularity
# ---------------------------------------------------------------------------


def t_star(flow: FlowModel, V: RegularFn, x: Any, horizon: float = T_STAR_HORIZON, h: Optional[float] = None, root_tol: float = ROOT_TOL) -> float:
    """First time the orbit of x meets V = 0; inf when it does not before `horizon`."""
    traj = Trajectory(flow, x, 1, h)
    if _value(V, traj.x) <= 0.0:
        return 0.0

    def hits(s: float) -> bool:
        return _value(V, traj.at(s)) <= 0.0

    steps = int(math.ceil(horizon / traj.h - fd.TIME_EPS))
    prev = 0.0
    for k in range(1, steps + 1):
        t = min(k * traj.h, horizon)
        if hits(t):
            return bisect(hits, prev, t, root_tol)
        prev = t
    return math.inf


def _verdict(passed: bool, value: float, t: float, case: str, reason: str) -> Dict[str, Any]:
    return {"passed": passed, "value": value, "t": t, "case": case, "reason": reason, "proxy": True}


def _diverges(values: Sequence[float], M: float) -> bool:
    if any(v >= M for v in values):
        return True
    if len(values) < 3:
        return False
    inc_prev, inc_last = values[-2] - values[-3], values[-1] - values[-2]
    return inc_last > 0.0 and inc_last >= 0.5 * inc_prev


def regularity_probe(
    flow: FlowModel,
    V: RegularFn,
    x: Any,
    M: float = PROBE_M,
    eps: float = 1.0,
    horizon: float = HORIZON,
    quad_tol: float = QUAD_TOL,
    root_tol: float = ROOT_TOL,
) -> Dict[str, Any]:
    """Numerical proxy for regularity of V along the orbit of x.

    Off the zero set the time change must pile up without bound before the
    orbit reaches V = 0; on it, an orbit that leaves at once must do the same
    on (0, eps). Passing means the accumulated value exceeded M or kept
    growing by decades toward the singular end.
    """
    traj = Trajectory(flow, x)
    f = _integrand(V, traj)
    if _value(V, traj.x) > 0.0:
        stop = _march(traj, V, M, horizon, quad_tol, root_tol)
        if stop.kind == "reached":
            return _verdict(True, M, stop.b, "orbit", "accumulated time change exceeds M")
        if stop.kind == "horizon":
            return _verdict(False, stop.acc, horizon, "orbit", "bounded up to the horizon")
        span = stop.b - stop.a
        values = []
        for k in range(1, DECADES + 1):
            delta = span * 10.0 ** -k
            if delta < 10.0 * root_tol:
                break
            values.append(stop.acc + adaptive_simpson(f, stop.a, stop.b - delta, quad_tol))
        ok = _diverges(values, M)
        return _verdict(ok, values[-1] if values else stop.acc, stop.b, "orbit",
                        "diverges toward the zero set" if ok else "converges toward the zero set")

    probes = sorted([eps * k / SCAN for k in range(1, SCAN + 1)] + [eps * 10.0 ** -k for k in range(1, DECADES + 1)])
    vals = [_value(V, traj.at(s)) for s in probes]
    if all(v <= 0.0 for v in vals):
        return _verdict(True, 0.0, 0.0, "zero_set", "orbit stays in the zero set")
    if any(v <= 0.0 for v in vals):
        return _verdict(True, 0.0, 0.0, "zero_set", "orbit does not leave the zero set at once")
    values = [adaptive_simpson(f, eps * 10.0 ** -k, eps, quad_tol) for k in range(1, DECADES + 1)]
    ok = _diverges(values, M)
    return _verdict(ok, values[-1], 0.0, "zero_set", "diverges as the orbit leaves" if ok else "converges as the orbit leaves")


# ---------------------------------------------------------------------------
# φ-distance
# ---------------------------------------------------------------------------


def _hull(grid: Grid, wrap: Optional[Callable[[Points], Points]], bits: int) -> int:
    cells = np.array(list(iter_bits(bits)), dtype=np.int64)
    if cells.size == 0:
        return 0
    nb = grid.neighbors(cells, radius=1, wrap=wrap)
    return bits_of(np.unique(nb[nb >= 0]).tolist())


def _first_contact(flow: FlowModel, grid: Grid, src: PointSet, dst: PointSet, h: float, tol: float) -> float:
    start = fd.cell_samples(grid, np.array(src.members(), dtype=np.int64)).reshape(-1, grid.dim)
    target = dst.to_mask()
    field = fd.signed_field(flow, 1) if flow.kind == "ode" else None

    def advance(base: Points, t0: float, t: float) -> Points:
        if field is None:
            return fd.flow_map(flow, t, start)
        return fd.wrap_points(flow, fd.rk4_step(field, base, t - t0))

    def touches(p: Points) -> bool:
        c = fd.cells_of(grid, p)
        return bool(np.any(target[c[c >= 0]]))

    pos, prev = start.copy(), 0.0
    for t in fd.time_net(h, [1.0])[1:]:
        nxt = advance(pos, prev, t)
        if touches(nxt):
            base, t0 = pos, prev
            return bisect(lambda s: touches(advance(base, t0, s)), t0, t, tol)
        pos, prev = nxt, t
    return 1.0


def phi_distance(flow: FlowModel, A: PointSet, B: PointSet, h: Optional[float] = None, root_tol: float = ROOT_TOL) -> float:
    """sup of s ≤ 1 with neither cell set flowing into the other within time s."""
    grid = fd.require_grid(flow)
    if A.is_empty() or B.is_empty():
        return 1.0
    touch = _hull(grid, flow.wrap, A.bits) & B.bits
    if touch:
        raise PreconditionError("closures of the two sets meet", witness=next(iter_bits(touch)))
    h = h or fd.time_step(flow, grid)
    return min(_first_contact(flow, grid, A, B, h, root_tol), _first_contact(flow, grid, B, A, h, root_tol))


# ---------------------------------------------------------------------------
# Regular functions
# ---------------------------------------------------------------------------


Boxes = Tuple[np.ndarray, np.ndarray]


def _boxes(grid: Grid, bits: int) -> Boxes:
    cells = np.array(list(iter_bits(bits)), dtype=np.int64)
    if cells.size == 0:
        return np.empty((0, grid.dim)), np.empty((0, grid.dim))
    return grid.cell_bounds(cells)


def _box_distance(boxes: Boxes, pts: Points) -> np.ndarray:
    lo, hi = boxes
    out = np.full(pts.shape[0], np.inf)
    if lo.shape[0] == 0:
        return out
    for s in range(0, pts.shape[0], fd.CHUNK):
        p = pts[s:s + fd.CHUNK, None, :]
        gap = np.maximum(lo[None] - p, 0.0) + np.maximum(p - hi[None], 0.0)
        out[s:s + fd.CHUNK] = np.sqrt((gap * gap).sum(axis=2)).min(axis=1)
    return out


class _Outside:
    """Distance to the complement of the window's active cells."""

    def __init__(self, grid: Grid) -> None:
        self.lower, self.upper = np.array(grid.lower), np.array(grid.upper)
        self.dead: Optional[Boxes] = None
        if grid.mask is not None and not grid.mask.all():
            full = Grid(grid.lower, grid.upper, grid.shape)
            self.dead = full.cell_bounds(np.flatnonzero(~grid.mask.ravel()))

    def __call__(self, pts: Points) -> np.ndarray:
        d = np.maximum(np.minimum(pts - self.lower, self.upper - pts).min(axis=1), 0.0)
        if self.dead is not None:
            d = np.minimum(d, _box_distance(self.dead, pts))
        return d


class _LevelFunction:
    """V = U·V0: U from the nested levels, V0 the growth toward the window frontier."""

    def __init__(
        self,
        dim: int,
        a: Sequence[float],
        levels: Sequence[Boxes],
        complements: Sequence[Boxes],
        zero: Optional[Boxes],
        r_gap: float,
        outside: Optional[_Outside],
        r_out: float,
    ) -> None:
        self.dim, self.a = dim, list(a)
        self.levels, self.complements = list(levels), list(complements)
        self.zero, self.r_gap = zero, r_gap
        self.outside, self.r_out = outside, r_out

    def __call__(self, pts: Points) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, self.dim)
        u = np.ones(pts.shape[0])
        for i in range(len(self.complements)):
            if i == 0:
                ui = np.ones(pts.shape[0])
            else:
                dA = _box_distance(self.levels[i - 1], pts)
                dC = _box_distance(self.complements[i], pts)
                with np.errstate(invalid="ignore", divide="ignore"):
                    ui = np.where(np.isinf(dC), 0.0, dA / (dA + dC))
            u += (self.a[i + 1] - self.a[i]) * ui
        U = 1.0 / u
        if self.zero is not None:
            d0 = _box_distance(self.zero, pts)
            U = U * np.minimum(1.0, d0 / self.r_gap) ** 2
        if self.outside is None:
            return U
        d = self.outside(pts)
        with np.errstate(divide="ignore"):
            V0 = np.where(d >= self.r_out, 1.0, (self.r_out / d) ** 2)
        return np.where(U > 0.0, U * V0, 0.0)


def _ring_distance(grid: Grid, wrap: Optional[Callable[[Points], Points]], seeds: int) -> np.ndarray:
    nb = grid.neighbors(radius=1, wrap=wrap)
    dist = np.full(grid.n, -1, dtype=np.int64)
    frontier = np.array(list(iter_bits(seeds)), dtype=np.int64)
    dist[frontier] = 0
    k = 0
    while frontier.size:
        k += 1
        cand = nb[frontier].ravel()
        cand = np.unique(cand[cand >= 0])
        cand = cand[dist[cand] < 0]
        dist[cand] = k
        frontier = cand
    dist[dist < 0] = dist.max() + 1
    return dist


def default_levels(flow: FlowModel, X0: PointSet) -> List[PointSet]:
    """Rings of cells at decreasing step distance from X0, at most MAX_LEVELS of them."""
    grid = fd.require_grid(flow)
    if X0.is_empty():
        return []
    dist = _ring_distance(grid, flow.wrap, X0.bits)
    R = int(dist.max())
    if R < 2:
        return []
    count = min(R - 1, MAX_LEVELS)
    thresholds = sorted({int(v) for v in np.round(np.linspace(R, 2, count))}, reverse=True)
    return [PointSet.from_mask(X0.space, dist >= th) for th in thresholds]


def _check_levels(grid: Grid, flow: FlowModel, X0: PointSet, levels: Sequence[PointSet]) -> None:
    for i, A in enumerate(levels):
        if A.space.n != grid.n:
            raise PreconditionError("level lives on a different grid", witness=i)
        if A.bits & X0.bits:
            raise PreconditionError("levels must avoid the zero set", witness=(i, next(iter_bits(A.bits & X0.bits))))
    for i, (A, B) in enumerate(zip(levels, levels[1:])):
        spill = _hull(grid, flow.wrap, A.bits) & ~B.bits
        if spill:
            raise PreconditionError("each level needs a cell of room inside the next", witness=(i, next(iter_bits(spill))))
    if X0.is_empty() and levels and levels[-1].bits != X0.space.all_bits:
        raise PreconditionError("with an empty zero set the levels must cover the window", witness=len(levels) - 1)


def build_regular_v(
    flow: FlowModel,
    X0: PointSet,
    levels: Optional[Sequence[PointSet]] = None,
    compact: bool = False,
) -> RegularFn:
    """A regular function vanishing exactly on the cells X0.

    Levels A_1 ⊂⊂ … ⊂⊂ A_N march in from far away toward X0; V drops to
    ε_n² across level n, where ε_n halves each step and stays below half the
    φ-distance between consecutive levels. With `compact`, V is also made
    proper by a factor growing like (r/d)² at distance d from the frontier.
    """
    grid = fd.require_grid(flow)
    if X0.space.n != grid.n:
        raise PreconditionError("zero set lives on a different grid", witness=X0.space.n)
    space = X0.space
    levels = default_levels(flow, X0) if levels is None else list(levels)
    _check_levels(grid, flow, X0, levels)
    ring = fd.boundary_ring(grid, flow.wrap)
    if compact and X0.bits & ring:
        raise PreconditionError("the zero set reaches the window frontier", witness=next(iter_bits(X0.bits & ring)))

    N = len(levels)
    eps = [1.0]
    h = fd.time_step(flow, grid)
    for n in range(1, N):
        rest = levels[n].complement()
        eps.append(min(eps[-1] / 2.0, phi_distance(flow, levels[n - 1], rest, h) / 2.0))
    if N:
        eps.append(eps[-1] / 2.0)
    a = [1.0 / e ** 2 for e in eps]

    gap = (levels[-1].complement().difference(X0) if levels else X0.complement())
    if not X0.is_empty() and levels and not gap.is_empty():
        log.warning("levels stop %d cells short of the zero set; extrapolating the last ε", len(gap))
    zero = None
    r_gap = 1.0
    if not X0.is_empty():
        zero = _boxes(grid, X0.bits)
        near = levels[-1] if levels else X0.complement()
        cells = np.array(near.members(), dtype=np.int64)
        if cells.size:
            r_gap = float(_box_distance(zero, grid.centers(cells)).min())
    outside: Optional[_Outside] = None
    r_out = 0.0
    if compact:
        outside = _Outside(grid)
        r_out = max(0.5 * float(outside(grid.centers()).max()), float(np.min(grid.widths)))

    fn = _LevelFunction(
        grid.dim, a,
        [_boxes(grid, A.bits) for A in levels],
        [_boxes(grid, space.all_bits & ~A.bits) for A in levels],
        zero, r_gap, outside, r_out,
    )
    bound = 0.0
    if compact:
        cells = np.array(list(iter_bits(ring)), dtype=np.int64)
        bound = 0.5 * float(fn(grid.centers(cells)).min()) if cells.size else 0.0
    log.info("regular function: %d levels, zero set of %d cells, compact=%s", N, len(X0), compact)
    return RegularFn(
        fn, zero_cells=X0.bits, proper=compact, bound=bound,
        provenance={
            "source": "levels", "levels": [len(A) for A in levels], "eps": eps, "a": a,
            "compact": compact, "r_out": r_out, "r_gap": r_gap, "extrapolated": bool(levels) and not gap.is_empty(),
        },
    )


def regular_fn(evaluate: Callable[[Points], Points], zero_cells: int = 0, source: str = "user") -> RegularFn:
    return RegularFn(evaluate, zero_cells=zero_cells, provenance={"source": source})


def probe_samples(flow: FlowModel, V: RegularFn, count: int = 50, seed: int = 0, M: float = PROBE_M, horizon: float = HORIZON) -> Dict[str, Any]:
    """Regularity probe at random points of random cells."""
    grid = fd.require_grid(flow)
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, grid.n, size=count)
    lo, hi = grid.cell_bounds(cells)
    pts = lo + (hi - lo) * rng.uniform(size=lo.shape)
    results = [regularity_probe(flow, V, p, M=M, horizon=horizon) for p in pts]
    failed = [i for i, r in enumerate(results) if not r["passed"]]
    if failed:
        log.warning("regularity probe failed at %d of %d samples", len(failed), count)
    return {
        "samples": count,
        "passed": count - len(failed),
        "failed_points": [pts[i].tolist() for i in failed],
        "proxy": True,
    }


# ---------------------------------------------------------------------------
# Time-changed flow
# ---------------------------------------------------------------------------


def reverse_time_change(tc: TimeChange) -> TimeChange:
    """The same time change on the reverse flow."""
    if not tc.flow.reversible:
        raise PreconditionError("reverse time needs a reversible flow", witness=tc.flow.name)
    rev = tc.cache.get("reverse")
    if rev is None:
        rev = dataclasses.replace(tc, direction=-tc.direction, cache={"reverse": tc})
        tc.cache["reverse"] = rev
    return rev


def _orbit(tc: TimeChange, p: np.ndarray) -> Trajectory:
    orbits = tc.cache.setdefault("orbits", {})
    key = tuple(np.round(p, 12).tolist())
    traj = orbits.get(key)
    if traj is None:
        if len(orbits) >= ORBIT_CACHE:
            orbits.clear()
        traj = orbits[key] = Trajectory(tc.flow, p, tc.direction)
    return traj


def tbar(tc: TimeChange, tau: float, x: Any) -> float:
    """t̄(τ, x): the φ-time at which the time-changed orbit of x has run for time τ."""
    if tau < 0:
        return -tbar(reverse_time_change(tc), -tau, x)
    p = fd.as_points(tc.flow, x)[0]
    if tau == 0 or _value(tc.v, p) <= 0.0:
        return 0.0
    traj = _orbit(tc, p)
    stop = _march(traj, tc.v, tau, tc.horizon, tc.quad_tol, tc.root_tol)
    if stop.kind == "horizon":
        raise PreconditionError("time change does not reach τ within the horizon", witness=(tau, tc.horizon))
    f = _integrand(tc.v, traj)
    need = tau - stop.acc
    t = bisect(lambda s: adaptive_simpson(f, stop.a, s, tc.quad_tol) >= need, stop.a, stop.b, tc.root_tol)
    if stop.kind == "zero" and stop.b - t <= 2.0 * tc.root_tol:
        log.warning("time change saturates at the zero set: τ=%g, t*=%g", tau, stop.b)
    return t


def psi(tc: TimeChange, tau: float, x: Any) -> np.ndarray:
    """ψ(τ, x) = φ(t̄(τ, x), x)."""
    if tau < 0:
        return psi(reverse_time_change(tc), -tau, x)
    p = fd.as_points(tc.flow, x)[0]
    t = tbar(tc, tau, p)
    if t == 0.0:
        return p.copy()
    return _orbit(tc, p).at(t)


def cocycle_residual(tc: TimeChange, tau1: float, tau2: float, x: Any) -> float:
    """|t̄(τ1+τ2, x) − t̄(τ1, x) − t̄(τ2, ψ(τ1, x))|, exactly 0 on the zero set."""
    p = fd.as_points(tc.flow, x)[0]
    if _value(tc.v, p) <= 0.0:
        return 0.0
    y = psi(tc, tau1, p)
    return abs(tbar(tc, tau1 + tau2, p) - tbar(tc, tau1, p) - tbar(tc, tau2, y))


def cocycle_battery(tc: TimeChange, samples: int = 20, tau_max: float = 1.5, seed: int = 0) -> float:
    """Worst cocycle residual over random cell points and τ1, τ2 ∈ [0, tau_max]."""
    grid = fd.require_grid(tc.flow)
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, grid.n, size=samples)
    lo, hi = grid.cell_bounds(cells)
    pts = lo + (hi - lo) * rng.uniform(size=lo.shape)
    worst = 0.0
    for p in pts:
        t1, t2 = rng.uniform(0.0, tau_max, size=2)
        worst = max(worst, cocycle_residual(tc, float(t1), float(t2), p))
    return worst


def trajectory_table(tc: TimeChange, x: Any, taus: Sequence[float]) -> List[Dict[str, float]]:
    """Rows (τ, t̄, ψ(τ, x)) for export."""
    p = fd.as_points(tc.flow, x)[0]
    rows = []
    for tau in taus:
        row = {"tau": float(tau), "tbar": tbar(tc, tau, p)}
        row.update({f"x{i}": float(v) for i, v in enumerate(psi(tc, tau, p))})
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Stopping at infinity
# ---------------------------------------------------------------------------


def field_of(flow: FlowModel, d: float = 1e-6) -> Callable[[Points], Points]:
    """The generating vector field, by central differences for closed forms."""
    if flow.kind == "ode":
        return fd.signed_field(flow, 1)
    if flow.kind != "closed_form":
        raise PreconditionError("a combinatorial flow has no vector field", witness=flow.name)
    phi = flow.phi
    assert phi is not None

    def field(x: Points) -> Points:
        fwd = np.asarray(phi(d, x), dtype=float).reshape(x.shape)
        back = np.asarray(phi(-d, x), dtype=float).reshape(x.shape)
        return (fwd - back) / (2.0 * d)

    return field


def _restrict(R: Relation, bits: int) -> Relation:
    return Relation(R.space, tuple(r & bits if (bits >> x) & 1 else 0 for x, r in enumerate(R.rows)))


def stop_at_infinity(
    flow: FlowModel,
    dilation: int = 1,
    times: Sequence[float] = (1.0, 5.0),
    band: int = fd.BAND_CELLS,
    checks: int = 4,
    seed: int = 0,
    jobs: int = 1,
) -> Tuple[CompactifiedSystem, Dict[str, Any]]:
    """Slow φ down to a halt at the window frontier and one-point compactify the result.

    The slowed flow ψ follows S·F with S = 1/V∞ for a proper regular V∞ with
    empty zero set, so S = 1 in the core and S → 0 at the frontier.
    """
    if flow.kind == "combinatorial":
        raise PreconditionError("stopping at infinity needs a point flow", witness=flow.name)
    if not flow.reversible:
        raise PreconditionError("stopping at infinity needs a reversible flow", witness=flow.name)
    grid = fd.require_grid(flow)
    space = grid.space()
    v_inf = build_regular_v(flow, PointSet(space, 0), compact=True)

    def slowdown(p: Points) -> Points:
        v = v_inf(p)
        with np.errstate(divide="ignore"):
            return np.where(v > 0.0, 1.0 / v, np.inf)

    speed = RegularFn(slowdown, proper=False, provenance={"source": "reciprocal", "of": v_inf.provenance})
    F = field_of(flow)

    def slowed(p: Points) -> Points:
        return speed(p)[:, None] * F(p)

    name = f"{flow.name or flow.kind}/stopped"
    psi_flow = FlowModel("ode", grid=grid, vector_field=slowed, wrap=flow.wrap, thread_safe=flow.thread_safe, name=name)
    fr_phi = fd.flow_relations(flow, dilation, jobs)
    fr_psi = fd.flow_relations(psi_flow, dilation, jobs)
    system = cp.one_point_compactify(fd.flow_window(fr_psi))
    inf = system.ambient.n - 1

    ring = np.array(list(iter_bits(fd.boundary_ring(grid, flow.wrap))), dtype=np.int64)
    c = grid.centers(ring)
    displacement: Dict[str, float] = {}
    for T in times:
        moved = fd.flow_map(psi_flow, T, c) if c.size else c
        displacement[f"{T:g}"] = float(np.max(np.abs(moved - c) / grid.widths)) if c.size else 0.0

    r_out = float(v_inf.provenance["r_out"])
    centers = grid.centers()
    core_mask = _Outside(grid)(centers) >= r_out
    core = bits_of(np.flatnonzero(core_mask).tolist())
    G_phi = _restrict(fd.g_phi(fr_phi), core)
    G_psi = _restrict(fd.g_phi(fr_psi), core)

    rng = np.random.default_rng(seed)
    core_cells = np.flatnonzero(core_mask)
    worst = 0.0
    if core_cells.size and checks > 0:
        tc = TimeChange(flow, speed)
        for p in centers[rng.choice(core_cells, size=min(checks, core_cells.size), replace=False)]:
            worst = max(worst, float(np.max(np.abs(fd.flow_map(psi_flow, 1.0, p)[0] - psi(tc, 1.0, p)))))

    report = {
        "flow": flow.name or flow.kind,
        "cells": grid.n,
        "r_out": r_out,
        "ring_cells": int(ring.size),
        "ring_displacement": displacement,
        "ring_fixed": all(v <= band for v in displacement.values()),
        "escapes": fr_psi.escape_out.bit_count(),
        "infinity_fixed": system.fhat.contains(inf, inf),
        "core_cells": int(core_cells.size),
        "reach_symdiff": rc.symdiff_size(G_phi, G_psi),
        "reach_outside_band": fd.band_symdiff(G_phi, G_psi, grid, band, flow.wrap),
        "quadrature_max_diff": worst,
    }
    log.info(
        "stopped %s at infinity: ring displacement %s, reach mismatch %d outside the band",
        report["flow"], displacement, report["reach_outside_band"],
    )
    return system, report
