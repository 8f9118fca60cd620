from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from reckit import relcore as rc
from reckit import uniform
from reckit.errors import InvariantViolation, PreconditionError
from reckit.models import (
    EntourageFamily,
    FiniteSpace,
    FlowModel,
    FlowRelations,
    Grid,
    LyapunovFn,
    PointSet,
    Relation,
    WindowModel,
    bits_of,
    iter_bits,
)

log = logging.getLogger(__name__)

UNIT_I = (0.0, 1.0)
UNIT_J = (1.0, 2.0)
BAND_CELLS = 2
MAX_STEP = 0.1
DEFAULT_STEP = 0.01
TIME_EPS = 1e-9
SHRINK = 1e-7  # relative inset of sampled corners
CHUNK = 256
REFINE_CAP = 1 << 22

Points = np.ndarray


# ---------------------------------------------------------------------------
# Sampling and integration
# ---------------------------------------------------------------------------


def require_grid(flow: FlowModel) -> Grid:
    if flow.grid is None:
        raise PreconditionError(f"flow {flow.name or flow.kind!r} has no grid")
    return flow.grid


def wrap_points(flow: FlowModel, pts: Points) -> Points:
    return flow.wrap(pts) if flow.wrap is not None else pts


def as_points(flow: FlowModel, pts: Any) -> Points:
    a = np.asarray(pts, dtype=float)
    if flow.grid is not None:
        return a.reshape(-1, flow.grid.dim)
    return a.reshape(-1, a.shape[-1] if a.ndim > 1 else 1)


def cell_samples(grid: Grid, cells: Optional[np.ndarray] = None, sampling: str = "corners") -> np.ndarray:
    """Inset corners plus the center of each cell, shape (cells, 2^d + 1, d); only the center for `center`."""
    lo, hi = grid.cell_bounds(cells)
    if sampling == "center":
        return ((lo + hi) / 2.0)[:, None, :]
    pad = (hi - lo) * SHRINK
    lo, hi = lo + pad, hi - pad
    corners = [np.where(np.array(b, dtype=bool), hi, lo) for b in itertools.product((0, 1), repeat=grid.dim)]
    return np.stack(corners + [(lo + hi) / 2.0], axis=1)


def cells_of(grid: Grid, pts: Points) -> np.ndarray:
    """Cell ids of points, -1 for points outside the window or not finite."""
    pts = np.asarray(pts, dtype=float).reshape(-1, grid.dim)
    out = np.full(pts.shape[0], -1, dtype=np.int64)
    ok = np.all(np.isfinite(pts), axis=1)
    if ok.any():
        out[ok] = grid.cell_of(pts[ok])
    return out


def signed_field(flow: FlowModel, sign: int) -> Callable[[Points], Points]:
    F = flow.vector_field
    assert F is not None

    def field(x: Points) -> Points:
        return sign * np.asarray(F(x), dtype=float).reshape(x.shape)

    return field


def rk4_step(field: Callable[[Points], Points], x: Points, dt: float) -> Points:
    k1 = field(x)
    k2 = field(x + 0.5 * dt * k1)
    k3 = field(x + 0.5 * dt * k2)
    k4 = field(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def time_step(flow: FlowModel, grid: Optional[Grid] = None) -> float:
    """Integrator step: half a cell at the fastest sampled speed, capped at MAX_STEP."""
    if flow.step > 0:
        return float(flow.step)
    grid = grid or flow.grid
    if grid is None:
        return DEFAULT_STEP
    c = grid.centers()
    if c.size == 0:
        return MAX_STEP
    if flow.kind == "ode":
        v = signed_field(flow, 1)(c)
    else:
        assert flow.phi is not None
        d = 1e-4
        v = (np.asarray(flow.phi(d, c), dtype=float).reshape(c.shape) - c) / d
    speed = np.linalg.norm(v, axis=1)
    speed = float(np.max(speed[np.isfinite(speed)])) if np.isfinite(speed).any() else 0.0
    if speed <= 0.0:
        return MAX_STEP
    return min(MAX_STEP, float(np.min(grid.widths)) / (2.0 * speed))


def flow_map(flow: FlowModel, t: float, pts: Any, h: Optional[float] = None) -> Points:
    """φ(t, ·) on a batch of points; negative t needs a reversible flow."""
    if flow.kind == "combinatorial":
        raise PreconditionError("a combinatorial flow has no point map", witness=flow.name)
    if t < 0 and not flow.reversible:
        raise PreconditionError("negative time needs a reversible flow", witness=t)
    x = as_points(flow, pts)
    if flow.kind == "closed_form":
        assert flow.phi is not None
        return wrap_points(flow, np.asarray(flow.phi(t, x), dtype=float).reshape(x.shape))
    h = h or time_step(flow)
    n = int(math.ceil(abs(t) / h - TIME_EPS)) if t else 0
    field = signed_field(flow, 1)
    x = x.copy()
    for _ in range(n):
        x = wrap_points(flow, rk4_step(field, x, t / n))
    return x


def semigroup_residual(flow: FlowModel, samples: int = 20, seed: int = 0) -> float:
    """max |φ(t, φ(s, x)) − φ(t+s, x)| over random cell centers and s, t ∈ [0, 1]."""
    if flow.kind == "combinatorial":
        return 0.0
    grid = require_grid(flow)
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, grid.n, size=samples)
    x = grid.centers(cells)
    worst = 0.0
    for i in range(samples):
        s, t = rng.uniform(0.0, 1.0, size=2)
        a = flow_map(flow, t, flow_map(flow, s, x[i]))
        b = flow_map(flow, s + t, x[i])
        if np.all(np.isfinite(a)) and np.all(np.isfinite(b)):
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def time_net(h: float, ends: Sequence[float]) -> np.ndarray:
    t_end = max(ends)
    k = int(math.ceil(t_end / h - TIME_EPS)) if t_end > 0 else 0
    net = np.concatenate([np.arange(k + 1) * h, np.asarray(ends, dtype=float)])
    return np.unique(np.round(np.clip(net, 0.0, t_end), 12))


Bucket = Tuple[str, float, float]


def _sweep(
    flow: FlowModel, grid: Grid, cells: np.ndarray, buckets: Sequence[Bucket], h: float, sign: int = 1,
    sampling: str = "corners",
) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Advance the samples of `cells`; per-bucket pair codes src*n+dst and each cell's first exit time."""
    n = grid.n
    start = cell_samples(grid, cells, sampling)
    m, s, d = start.shape
    src = np.repeat(np.asarray(cells, dtype=np.int64), s)
    flat = start.reshape(-1, d)
    pos = flat.copy()
    alive = np.ones(pos.shape[0], dtype=bool)
    exit_time = np.full(m, np.inf)
    found: Dict[str, List[np.ndarray]] = {name: [] for name, _, _ in buckets}
    field = signed_field(flow, sign) if flow.kind == "ode" else None
    prev = 0.0
    for t in time_net(h, [a for _, a, _ in buckets] + [b for _, _, b in buckets]):
        if t > prev and alive.any():
            if field is not None:
                pos[alive] = rk4_step(field, pos[alive], t - prev)
            else:
                assert flow.phi is not None
                pos[alive] = np.asarray(flow.phi(sign * t, flat[alive]), dtype=float).reshape(-1, d)
            pos[alive] = wrap_points(flow, pos[alive])
        prev = t
        cell = cells_of(grid, pos)
        out = alive & (cell < 0)
        if out.any():
            np.minimum.at(exit_time, np.flatnonzero(out) // s, t)
            alive &= ~out
        for name, a, b in buckets:
            if a - TIME_EPS <= t <= b + TIME_EPS:
                found[name].append(np.unique(src[alive] * n + cell[alive]))
    codes = {name: np.unique(np.concatenate(v)) if v else np.empty(0, dtype=np.int64) for name, v in found.items()}
    return codes, exit_time


def _sweep_all(
    flow: FlowModel, grid: Grid, buckets: Sequence[Bucket], h: float, sign: int = 1, jobs: int = 1,
    sampling: str = "corners",
) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    cells = np.arange(grid.n)
    if jobs <= 1 or not flow.thread_safe or grid.n < 2 * CHUNK:
        return _sweep(flow, grid, cells, buckets, h, sign, sampling)
    chunks = np.array_split(cells, max(jobs, grid.n // CHUNK))
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        parts = list(ex.map(lambda c: _sweep(flow, grid, c, buckets, h, sign, sampling), chunks))
    codes = {name: np.unique(np.concatenate([p[0][name] for p in parts])) for name, _, _ in buckets}
    return codes, np.concatenate([p[1] for p in parts])


def _relation_from_codes(space: FiniteSpace, codes: np.ndarray) -> Relation:
    n = space.n
    codes = np.unique(np.asarray(codes, dtype=np.int64))
    src, dst = np.divmod(codes, n) if n else (codes, codes)
    bounds = np.searchsorted(src, np.arange(n + 1))
    return Relation(space, tuple(bits_of(dst[bounds[x]:bounds[x + 1]].tolist()) for x in range(n)))


def _dilate_codes(codes: np.ndarray, n: int, nb: Optional[np.ndarray]) -> np.ndarray:
    if nb is None or codes.size == 0:
        return codes
    src, dst = np.divmod(codes, n)
    near = nb[dst]
    ok = near >= 0
    return np.unique(np.repeat(src, near.shape[1])[ok.ravel()] * n + near[ok])


def _neighbor_masks(grid: Grid, radius: int, wrap: Optional[Callable[[Points], Points]]) -> List[int]:
    return [bits_of(row[row >= 0].tolist()) for row in grid.neighbors(radius=radius, wrap=wrap)]


def dilate(R: Relation, grid: Grid, radius: int = 1, wrap: Optional[Callable[[Points], Points]] = None) -> Relation:
    """V∘R for the band V of cells within `radius` steps."""
    if radius <= 0:
        return R
    masks = _neighbor_masks(grid, radius, wrap)
    rows = []
    for r in R.rows:
        acc = 0
        for y in iter_bits(r):
            acc |= masks[y]
        rows.append(acc)
    return Relation(R.space, tuple(rows))


def boundary_ring(grid: Grid, wrap: Optional[Callable[[Points], Points]] = None) -> int:
    """Cells with a missing neighbor: the frontier of the window."""
    nb = grid.neighbors(radius=1, wrap=wrap)
    return bits_of(np.flatnonzero(np.any(nb < 0, axis=1)).tolist())


# ---------------------------------------------------------------------------
# Flow relations
# ---------------------------------------------------------------------------


def _suspension_space(space: FiniteSpace, m: int) -> FiniteSpace:
    return FiniteSpace(space.n * m, tuple(f"{space.label(x)}@{k}" for x in range(space.n) for k in range(m)))


def quantum_step(flow: FlowModel) -> Relation:
    """One time quantum 1/m of a combinatorial flow: (x,k) ↦ (x,k+1), (x,m−1) ↦ (f(x),0)."""
    base, m = flow.base, flow.slices
    assert base is not None
    rows: List[int] = []
    for x in range(base.n):
        for k in range(m):
            if k < m - 1:
                rows.append(1 << (x * m + k + 1))
            else:
                rows.append(bits_of(y * m for y in iter_bits(base.rows[x])))
    return Relation(_suspension_space(base.space, m), tuple(rows))


def _power_union(q: Relation, lo: int, hi: int) -> Relation:
    acc = Relation.empty(q.space)
    P = Relation.identity(q.space)
    for j in range(hi + 1):
        if j >= lo:
            acc = rc.union(acc, P)
        if j < hi:
            P = rc.compose(q, P)
    return acc


def _check_interval(K: Tuple[float, float]) -> Tuple[float, float]:
    a, b = float(K[0]), float(K[1])
    if not (0.0 <= a <= b) or not math.isfinite(b):
        raise PreconditionError("time interval must be a compact subset of [0, ∞)", witness=K)
    return a, b


def flow_relation(flow: FlowModel, K: Tuple[float, float], dilation: int = 1, jobs: int = 1) -> Relation:
    """φ^K = ∪_{t∈K} φ^t, outer-approximated on the flow's grid."""
    a, b = _check_interval(K)
    if flow.kind == "combinatorial":
        m = flow.slices
        return _power_union(quantum_step(flow), int(math.ceil(a * m - TIME_EPS)), int(math.floor(b * m + TIME_EPS)))
    grid = require_grid(flow)
    codes, _ = _sweep_all(flow, grid, [("k", a, b)], time_step(flow, grid), jobs=jobs)
    nb = grid.neighbors(radius=dilation, wrap=flow.wrap) if dilation > 0 else None
    return _relation_from_codes(grid.space(), _dilate_codes(codes["k"], grid.n, nb))


def _combinatorial_relations(flow: FlowModel) -> FlowRelations:
    q = quantum_step(flow)
    m = flow.slices
    I, J, F1 = _power_union(q, 0, m), _power_union(q, m, 2 * m), _power_union(q, m, m)
    dead = bits_of(x for x, r in enumerate(F1.rows) if not r)
    log.debug("suspension relations: %d points, %d slices", q.n, m)
    return FlowRelations(
        flow, q.space, I, J, F1, I, J, F1,
        escape_out=dead, escape_in=0, dilation=0, exact=True,
        steps={"quantum": 1.0 / m, "slices": m},
    )


def flow_relations(flow: FlowModel, dilation: int = 1, jobs: int = 1, sampling: str = "corners") -> FlowRelations:
    """Φ_I, Φ_J and the time-one relation F1 from one sampled sweep, plus escape sets.

    `sampling=center` follows only cell centers, which makes the undilated time-one relation single-valued.
    """
    if flow.kind == "combinatorial":
        return _combinatorial_relations(flow)
    grid = require_grid(flow)
    space = grid.space()
    h = time_step(flow, grid)
    buckets = [("i", *UNIT_I), ("j", *UNIT_J), ("f1", 1.0, 1.0)]
    codes, exit_time = _sweep_all(flow, grid, buckets, h, jobs=jobs, sampling=sampling)
    nb = grid.neighbors(radius=dilation, wrap=flow.wrap) if dilation > 0 else None
    rel = {k: _relation_from_codes(space, _dilate_codes(v, grid.n, nb)) for k, v in codes.items()}
    core = {k: _relation_from_codes(space, v) for k, v in codes.items()}
    escape_out = bits_of(np.flatnonzero(exit_time <= 1.0 + TIME_EPS).tolist())
    if flow.reversible:
        _, back = _sweep_all(flow, grid, [("in", *UNIT_I)], h, sign=-1, jobs=jobs, sampling=sampling)
        escape_in = bits_of(np.flatnonzero(np.isfinite(back)).tolist())
    else:
        escape_in = boundary_ring(grid, flow.wrap)
    log.debug(
        "flow %s: %d cells, h_t=%.4g, |Φ_I|=%d |Φ_J|=%d |F1|=%d, %d escaping",
        flow.name or flow.kind, grid.n, h, rel["i"].size(), rel["j"].size(), rel["f1"].size(), escape_out.bit_count(),
    )
    return FlowRelations(
        flow, space, rel["i"], rel["j"], rel["f1"], core["i"], core["j"], core["f1"],
        escape_out=escape_out, escape_in=escape_in, dilation=dilation, exact=False,
        steps={"h_t": h, "samples": 1 if sampling == "center" else 2 ** grid.dim + 1, "dilation": dilation, "shape": list(grid.shape)},
    )


def flow_window(fr: FlowRelations, which: str = "f1") -> WindowModel:
    """The time-one (or Φ_I/Φ_J) relation as a window leaking through a single direction."""
    rel = {"f1": fr.f1, "i": fr.phi_i, "j": fr.phi_j}[which]
    out = {c: "inf" for c in iter_bits(fr.escape_out)}
    inn = {c: "inf" for c in iter_bits(fr.escape_in)}
    first = next(iter(out), next(iter(inn), None))
    ring = boundary_ring(fr.flow.grid, fr.flow.wrap) if fr.flow.grid is not None else 0
    return WindowModel(
        fr.space, rel, out, inn, proper_flag=False,
        directions={"inf": first} if first is not None else {}, boundary=ring,
    )


# ---------------------------------------------------------------------------
# Recurrence for flows
# ---------------------------------------------------------------------------


def g_phi(fr: FlowRelations) -> Relation:
    return rc.union(fr.phi_i, rc.g_relation(fr.phi_j))


def generalized_recurrent(fr: FlowRelations) -> PointSet:
    return rc.cyclic_set(rc.g_relation(fr.phi_j))


def recurrence_cross_check(fr: FlowRelations) -> PointSet:
    """Cells where x ∈ |G(Φ_J)| disagrees with (F1(x), x) ∈ Gφ."""
    back = rc.inverse(g_phi(fr))
    gr = generalized_recurrent(fr).bits
    bad = [x for x in range(fr.space.n) if bool(fr.f1.rows[x] & back.rows[x]) != bool((gr >> x) & 1)]
    return PointSet.of(fr.space, bad)


def omega_phi(fr: FlowRelations) -> Relation:
    """Φ_I ∘ Ω(F1)."""
    return rc.compose(fr.phi_i, rc.omega_relation(fr.f1))


def chain_flow(fr: FlowRelations, U: EntourageFamily) -> Relation:
    return rc.union(fr.phi_i, uniform.chain_relation(fr.phi_j, U))


def chain_omega_check(fr: FlowRelations, U: EntourageFamily, n_max: int = 8) -> Dict[str, Any]:
    """Compare Ω C(Φ_J) with ∩_{n ≤ n_max} C((Φ_J)ⁿ)."""
    C = uniform.chain_relation(fr.phi_j, U)
    lhs = rc.omega_relation(C)
    rhs, P, stable_at = C, fr.phi_j, 1
    for n in range(2, n_max + 1):
        P = rc.compose(fr.phi_j, P)
        nxt = rc.intersection(rhs, uniform.chain_relation(P, U))
        if nxt != rhs:
            stable_at = n
        rhs = nxt
    return {
        "n_max": n_max,
        "stable_at": stable_at,
        "omega_pairs": lhs.size(),
        "intersection_pairs": rhs.size(),
        "symdiff": rc.symdiff_size(lhs, rhs),
    }


def cell_hausdorff(grid: Grid, A: PointSet, B: PointSet) -> float:
    """Hausdorff distance between two cell sets, in grid steps (Chebyshev)."""
    a, b = A.members(), B.members()
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.inf
    ma, mb = grid.multi_index(np.array(a)), grid.multi_index(np.array(b))
    return float(max(_directed(ma, mb), _directed(mb, ma)))


def _directed(p: np.ndarray, q: np.ndarray) -> int:
    best = 0
    for chunk in np.array_split(p, max(1, p.shape[0] // 512)):
        d = np.abs(chunk[:, None, :] - q[None, :, :]).max(axis=2).min(axis=1)
        best = max(best, int(d.max()))
    return best


def band_symdiff(
    R1: Relation, R2: Relation, grid: Optional[Grid], radius: int = BAND_CELLS,
    wrap: Optional[Callable[[Points], Points]] = None,
) -> int:
    """Pairs of either relation with no pair of the other within `radius` cells of the target."""
    if grid is None or radius <= 0:
        return rc.symdiff_size(R1, R2)
    return _outside(R1, dilate(R2, grid, radius, wrap)) + _outside(R2, dilate(R1, grid, radius, wrap))


def _outside(R: Relation, S: Relation) -> int:
    return sum((a & ~b).bit_count() for a, b in zip(R.rows, S.rows))


def identity_report(fr: FlowRelations, radius: int = BAND_CELLS) -> Dict[str, Any]:
    """Flow identities as symmetric-difference counts; exact on combinatorial flows."""
    I, J, F = fr.phi_i, fr.phi_j, fr.f1
    O_I, O_J, O_F = rc.orbit_relation(I), rc.orbit_relation(J), rc.orbit_relation(F)
    G_J, G_F = rc.g_relation(J), rc.g_relation(F)
    Gp = rc.union(I, G_J)
    checks = {
        "orbit_split": (O_I, rc.union(I, O_J)),
        "orbit_left": (O_J, rc.compose(I, O_F)),
        "orbit_right": (O_J, rc.compose(O_F, I)),
        "g_phi": (Gp, rc.g_relation(I)),
        "g_factor": (G_J, rc.compose(G_F, I)),
        "class_band": (
            rc.intersection(Gp, rc.inverse(Gp)),
            rc.union(Relation.identity(fr.space), rc.intersection(G_J, rc.inverse(G_J))),
        ),
    }
    grid = fr.flow.grid
    rep: Dict[str, Any] = {"exact": fr.exact, "band_cells": 0 if fr.exact else radius}
    for name, (lhs, rhs) in checks.items():
        entry = {"symdiff": rc.symdiff_size(lhs, rhs)}
        if not fr.exact:
            entry["outside_band"] = band_symdiff(lhs, rhs, grid, radius, fr.flow.wrap)
            if entry["outside_band"]:
                log.warning("%s: %d pairs outside the %d-cell band", name, entry["outside_band"], radius)
        rep[name] = entry
    A, B = rc.cyclic_set(G_J), rc.cyclic_set(G_F)
    rep["time_one"] = {"symdiff": (A.bits ^ B.bits).bit_count()}
    if not fr.exact and grid is not None:
        rep["time_one"]["hausdorff_cells"] = cell_hausdorff(grid, A, B)
    return rep


def time_one_agreement(
    fr: FlowRelations, samples: int = 20, seed: int = 0, band: int = BAND_CELLS
) -> Dict[str, Any]:
    """|G(Φ_J)| against |G(F1)|, and recurrence classes of Gφ against Φ_I of the classes of G(F1)."""
    if not fr.flow.reversible:
        raise PreconditionError("time-one agreement needs a reversible flow", witness=fr.flow.name or fr.flow.kind)
    A = generalized_recurrent(fr)
    G_F = rc.g_relation(fr.f1)
    B = rc.cyclic_set(G_F)
    rep: Dict[str, Any] = {
        "exact": fr.exact,
        "flow_recurrent": len(A),
        "time_one_recurrent": len(B),
        "symdiff": (A.bits ^ B.bits).bit_count(),
    }
    Gp = g_phi(fr)
    cls_phi = rc.intersection(Gp, rc.inverse(Gp))
    cls_f = rc.intersection(G_F, rc.inverse(G_F))
    members = B.members()
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(members, size=min(samples, len(members)), replace=False).tolist()) if members else []
    mismatch = 0
    for x in picked:
        want = rc.image(fr.phi_i, PointSet(fr.space, cls_f.rows[x]))
        mismatch += (cls_phi.rows[x] ^ want.bits).bit_count()
    rep["sampled"] = len(picked)
    rep["class_mismatch"] = mismatch
    if fr.exact:
        if rep["symdiff"] or mismatch:
            raise InvariantViolation(f"time-one agreement fails on an exact flow: {rep}")
        rep["agrees"] = True
        return rep
    grid = require_grid(fr.flow)
    d = cell_hausdorff(grid, A, B)
    rep["hausdorff_cells"] = d
    rep["agrees"] = d <= band
    if not rep["agrees"]:
        log.warning("time-one recurrence differs by %.0f cells (band %d)", d, band)
    return rep


# ---------------------------------------------------------------------------
# Suspension
# ---------------------------------------------------------------------------


def suspend(cascade: Relation, m: int, name: str = "") -> FlowModel:
    """The combinatorial suspension flow of a (partial) map with m slices per unit time."""
    if m < 1:
        raise PreconditionError("suspension needs at least one slice", witness=m)
    for x, r in enumerate(cascade.rows):
        if r & (r - 1):
            raise PreconditionError("cascade is not a function", witness=cascade.space.label(x))
    onto = all(r.bit_count() == 1 for r in rc.inverse(cascade).rows)
    reversible = onto and all(r for r in cascade.rows)
    return FlowModel("combinatorial", base=cascade, slices=m, reversible=reversible, name=name or f"suspension/{m}")


def suspension_check(fr: FlowRelations) -> int:
    """Pairs where [1 ∪ G(F1)] differs from Gφ restricted to equal slices; zero on every suspension."""
    flow = fr.flow
    if flow.kind != "combinatorial":
        raise PreconditionError("slice check needs a combinatorial flow", witness=flow.kind)
    m, n = flow.slices, fr.space.n
    lhs = rc.union(Relation.identity(fr.space), rc.g_relation(fr.f1))
    G = g_phi(fr)
    same = [bits_of(range(k, n, m)) for k in range(m)]
    rhs = Relation(fr.space, tuple(r & same[y % m] for y, r in enumerate(G.rows)))
    return rc.symdiff_size(lhs, rhs)


# ---------------------------------------------------------------------------
# Wandering points and parallelizability
# ---------------------------------------------------------------------------


def nonwandering_set(fr: FlowRelations) -> PointSet:
    N = rc.union(rc.orbit_relation(fr.phi_j), omega_phi(fr))
    return rc.cyclic_set(N)


def wandering_points(fr: FlowRelations) -> PointSet:
    return nonwandering_set(fr).complement()


def _return_links(fr: FlowRelations, radius: int) -> Relation:
    """Escaping cells joined to nearby re-entering cells: orbit segments through the outside."""
    grid = fr.flow.grid
    if grid is None or not fr.escape_out or not fr.escape_in:
        return Relation.empty(fr.space)
    nb = grid.neighbors(radius=radius, wrap=fr.flow.wrap)
    rows = [0] * fr.space.n
    for a in iter_bits(fr.escape_out):
        near = nb[a][nb[a] >= 0]
        rows[a] = bits_of(near.tolist()) & fr.escape_in
    return Relation(fr.space, tuple(rows))


def parallelizable_check(fr: FlowRelations, band: int = BAND_CELLS) -> Dict[str, Any]:
    """First obstruction to parallelizability seen on the window, or consistency."""
    if not fr.flow.reversible:
        raise PreconditionError("parallelizability needs a reversible flow", witness=fr.flow.name or fr.flow.kind)
    keep = fr.space.all_bits & ~fr.escape_out & ~fr.escape_in
    omega_cells = omega_phi(fr).domain().bits & keep
    recurrent = generalized_recurrent(fr)
    rep: Dict[str, Any] = {
        "omega_cells": omega_cells.bit_count(),
        "recurrent_cells": len(recurrent),
        "return_links": None,
        "unclosed_pairs": None,
    }
    if omega_cells or len(recurrent):
        rep["verdict"] = "obstruction: nonempty omega"
        log.info("parallelizable check: %s", rep["verdict"])
        return rep
    O = rc.union(fr.phi_i, rc.orbit_relation(fr.phi_j))
    links = _return_links(fr, band + fr.dilation)
    N = rc.orbit_relation(rc.union(fr.phi_j, links))
    if fr.flow.grid is not None:
        unclosed = _outside(N, dilate(O, fr.flow.grid, band, fr.flow.wrap))
    else:
        unclosed = _outside(N, O)
    rep["return_links"] = links.size()
    rep["unclosed_pairs"] = unclosed
    if unclosed:
        rep["verdict"] = "obstruction: orbit relation not closed at window"
    else:
        rep["verdict"] = "parallelizable-consistent"
    log.info("parallelizable check: %s", rep["verdict"])
    return rep


def _cell_values(L: Union[LyapunovFn, Sequence[float], np.ndarray]) -> np.ndarray:
    if isinstance(L, LyapunovFn):
        return np.array([float(v) for v in L.values], dtype=float)
    return np.asarray(L, dtype=float).reshape(-1)


def _trace_cells(flow: FlowModel, grid: Grid, pts: Points, h: float, steps: int, sign: int) -> np.ndarray:
    """Cells visited at times 0, h, …, steps·h; -1 from the first exit on."""
    out = np.full((steps + 1, pts.shape[0]), -1, dtype=np.int64)
    pos = pts.copy()
    alive = np.ones(pts.shape[0], dtype=bool)
    field = signed_field(flow, sign) if flow.kind == "ode" else None
    for k in range(steps + 1):
        if k and alive.any():
            if field is not None:
                pos[alive] = rk4_step(field, pos[alive], h)
            else:
                assert flow.phi is not None
                pos[alive] = np.asarray(flow.phi(sign * k * h, pts[alive]), dtype=float).reshape(-1, grid.dim)
            pos[alive] = wrap_points(flow, pos[alive])
        cell = cells_of(grid, pos)
        alive &= cell >= 0
        out[k] = np.where(alive, cell, -1)
        if not alive.any():
            return out[: k + 1]
    return out


def build_section(
    fr: FlowRelations, L: Union[LyapunovFn, Sequence[float], np.ndarray], check: bool = True
) -> Tuple[PointSet, Dict[str, Any]]:
    """Cells where K = ∫₀¹ L∘φ(u, ·) du turns nonnegative, with a coverage report."""
    flow = fr.flow
    grid = require_grid(flow)
    vals = _cell_values(L)
    if vals.size != grid.n:
        raise PreconditionError(f"expected {grid.n} cell values, got {vals.size}")
    centers = grid.centers()
    one = cells_of(grid, flow_map(flow, 1.0, centers))
    ok = one >= 0
    kdot = vals[np.where(ok, one, 0)] - vals
    bad = np.flatnonzero(ok & (kdot <= 0.0))
    if bad.size:
        raise PreconditionError("K does not increase along the flow", witness=int(bad[0]))
    if check:
        verdict = parallelizable_check(fr)["verdict"]
        if verdict != "parallelizable-consistent":
            raise PreconditionError("flow is not parallelizable on the window", witness=verdict)

    U = 4 * int(math.ceil(1.0 / float(np.min(grid.widths))))
    acc = np.zeros(grid.n)
    hits = np.zeros(grid.n)
    for u in (np.arange(U) + 0.5) / U:
        c = cells_of(grid, flow_map(flow, float(u), centers))
        inside = c >= 0
        acc[inside] += vals[c[inside]]
        hits[inside] += 1
    K = np.where(hits > 0, acc / np.maximum(hits, 1), np.nan)

    nb = grid.neighbors(radius=1, wrap=flow.wrap)
    below = np.zeros(grid.n, dtype=bool)
    for col in nb.T:
        valid = col >= 0
        below[valid] |= K[col[valid]] < 0.0
    section = np.flatnonzero((K >= 0.0) & below)
    Y = PointSet.of(fr.space, section.tolist())
    return Y, _coverage(fr, grid, Y, centers)


def _coverage(fr: FlowRelations, grid: Grid, Y: PointSet, centers: Points) -> Dict[str, Any]:
    h = time_step(fr.flow, grid)
    steps = 8 * int(sum(grid.shape))
    fwd = _trace_cells(fr.flow, grid, centers, h, steps, 1)
    back = _trace_cells(fr.flow, grid, centers, h, steps, -1)
    path = np.concatenate([back[::-1], fwd[1:]], axis=0)
    ymask = np.zeros(grid.n + 1, dtype=bool)
    ymask[Y.members()] = True
    on = ymask[path]  # -1 indexes the padding slot
    runs = (on[0].astype(int) + np.sum(on[1:] & ~on[:-1], axis=0)).astype(int)
    checked = [c for c in range(grid.n) if not ((fr.escape_out | fr.escape_in) >> c) & 1]
    uncovered = [c for c in checked if runs[c] == 0]
    multiple = [c for c in checked if runs[c] > 1]
    rep = {
        "section_cells": len(Y),
        "checked": len(checked),
        "covered": len(checked) - len(uncovered),
        "uncovered": uncovered[:20],
        "multiple": multiple[:20],
        "unique": not multiple,
    }
    log.debug("section coverage: %s", {k: rep[k] for k in ("section_cells", "checked", "covered")})
    return rep


# ---------------------------------------------------------------------------
# Maps on grids and point sets
# ---------------------------------------------------------------------------


def face_tag(grid: Grid, pt: Points) -> str:
    """Direction tag of a point outside the window: x<axis>+ or x<axis>-, or mask."""
    u = grid.to_units(pt)[0]
    if not np.all(np.isfinite(u)):
        return "inf"
    shape = np.array(grid.shape, dtype=float)
    over = np.maximum(-u, u - shape)
    a = int(np.argmax(over))
    if over[a] < 0:
        return "mask"
    return f"x{a}{'+' if u[a] >= shape[a] else '-'}"


def _ring_tags(grid: Grid, ring: int) -> Dict[int, str]:
    out: Dict[int, str] = {}
    shape = np.array(grid.shape, dtype=float)
    for c in iter_bits(ring):
        u = grid.to_units(grid.centers(np.array([c])))[0]
        gaps = np.concatenate([u, shape - u])
        a = int(np.argmin(gaps))
        out[c] = f"x{a % grid.dim}{'-' if a < grid.dim else '+'}"
    return out


def _sampled_images(grid: Grid, fn: Callable[[Points], Points]) -> Tuple[np.ndarray, Points, Dict[int, str]]:
    pts = cell_samples(grid)
    n, s, d = pts.shape
    img = np.asarray(fn(pts.reshape(-1, d)), dtype=float).reshape(-1, d)
    cell = cells_of(grid, img)
    src = np.repeat(np.arange(n, dtype=np.int64), s)
    tags: Dict[int, str] = {}
    for i in np.flatnonzero(cell < 0):
        tags.setdefault(int(src[i]), face_tag(grid, img[i]))
    return src, img, tags


def image_boxes(grid: Grid, src: np.ndarray, img: Points) -> np.ndarray:
    """Pair codes src*n+dst for every cell in the box spanned by each source's sampled images.

    The box is intersected with the window; a box wholly outside it contributes nothing.
    """
    n, d = grid.n, grid.dim
    u = np.floor(grid.to_units(img))
    ok = np.all(np.isfinite(u), axis=1)
    s = np.asarray(src, dtype=np.int64)[ok]
    lo = np.full((n, d), np.inf)
    hi = np.full((n, d), -np.inf)
    np.minimum.at(lo, s, u[ok])
    np.maximum.at(hi, s, u[ok])
    top = np.array(grid.shape, dtype=float) - 1.0
    lo, hi = np.maximum(lo, 0.0), np.minimum(hi, top)
    parts: List[np.ndarray] = []
    for x in np.flatnonzero(np.all(lo <= hi, axis=1)):
        axes = [np.arange(int(a), int(b) + 1) for a, b in zip(lo[x], hi[x])]
        box = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        dst = grid.cells_of_multi(box)
        parts.append(x * n + dst[dst >= 0])
    return np.unique(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)


def sample_map(
    grid: Grid,
    fn: Callable[[Points], Points],
    dilation: int = 1,
    proper: bool = False,
    inverse: Optional[Callable[[Points], Points]] = None,
    ring_in: bool = False,
) -> WindowModel:
    """A window model of a map: boxes of sampled images dilated by `dilation` cells, escapes tagged per face."""
    space = grid.space()
    src, img, escape_out = _sampled_images(grid, fn)
    nb = grid.neighbors(radius=dilation) if dilation > 0 else None
    f = _relation_from_codes(space, _dilate_codes(image_boxes(grid, src, img), grid.n, nb))
    ring = boundary_ring(grid)
    if inverse is not None:
        escape_in = _sampled_images(grid, inverse)[2]
    elif ring_in:
        escape_in = _ring_tags(grid, ring)
    else:
        escape_in = {}
    directions: Dict[str, int] = {}
    for c, tag in list(escape_out.items()) + list(escape_in.items()):
        directions.setdefault(tag, c)
    log.debug("sampled map: %d cells, %d pairs, %d escaping", grid.n, f.size(), len(escape_out))
    return WindowModel(space, f, escape_out, escape_in, proper_flag=proper, directions=directions, boundary=ring)


def _recurrent_cells(R: Relation) -> np.ndarray:
    cond = rc.condensation(R)
    bits = 0
    for m, cyc in zip(cond.members, cond.cyclic):
        if cyc:
            bits |= m
    return np.fromiter(iter_bits(bits), dtype=np.int64)


def refined_recurrence(
    grid: Grid, fn: Callable[[Points], Points], depth: int, max_cells: int = REFINE_CAP
) -> Tuple[PointSet, Dict[str, Any]]:
    """Cells of `grid` that keep recurrent subcells after `depth` rounds of halving the recurrent cells.

    Each round splits every recurrent cell into 2^d children and recomputes the box-image
    relation on the children alone; images leaving the kept cells are dropped.
    """
    if depth < 0:
        raise PreconditionError("refinement depth must be nonnegative", witness=depth)
    d = grid.dim
    kids = np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)
    fine, owner = grid, np.arange(grid.n, dtype=np.int64)
    src, img, _ = _sampled_images(fine, fn)
    keep = _recurrent_cells(_relation_from_codes(fine.space(), image_boxes(fine, src, img)))
    rounds = 0
    for _ in range(depth):
        if keep.size == 0:
            break
        shape = tuple(2 * k for k in fine.shape)
        if int(np.prod(shape)) > max_cells:
            log.warning("refinement stopped after %d rounds: %d cells exceed the cap", rounds, int(np.prod(shape)))
            break
        mi = (2 * fine.multi_index(keep)[:, None, :] + kids[None, :, :]).reshape(-1, d)
        mask = np.zeros(shape, dtype=bool)
        mask[tuple(mi.T)] = True
        child = Grid(fine.lower, fine.upper, shape, mask)
        new_owner = np.empty(child.n, dtype=np.int64)
        new_owner[child.full_to_active[np.ravel_multi_index(tuple(mi.T), shape)]] = np.repeat(owner[keep], kids.shape[0])
        fine, owner = child, new_owner
        src, img, _ = _sampled_images(fine, fn)
        keep = _recurrent_cells(_relation_from_codes(fine.space(), image_boxes(fine, src, img)))
        rounds += 1
        log.debug("refinement round %d: %d of %d cells recurrent", rounds, keep.size, fine.n)
    space = grid.space()
    coarse = PointSet.of(space, sorted(set(owner[keep].tolist())))
    return coarse, {"rounds": rounds, "fine_cells": int(fine.n), "fine_recurrent": int(keep.size)}


def snap_map(
    points: Any, fn: Callable[[Points], Points], tol: float = 1e-9, labels: Sequence[str] = ()
) -> WindowModel:
    """A map on a finite point set; images farther than `tol` from every point escape."""
    P = np.asarray(points, dtype=float)
    P = P.reshape(P.shape[0], -1) if P.ndim > 1 else P.reshape(-1, 1)
    img = np.asarray(fn(P), dtype=float).reshape(P.shape)
    space = FiniteSpace(P.shape[0], tuple(labels), coords=P)
    pairs: List[Tuple[int, int]] = []
    escape: Dict[int, str] = {}
    for i, y in enumerate(img):
        d = np.abs(P - y).max(axis=1) if np.all(np.isfinite(y)) else np.full(P.shape[0], np.inf)
        j = int(np.argmin(d))
        if d[j] <= tol:
            pairs.append((i, j))
        else:
            escape[i] = "inf"
    f = Relation.from_pairs(space, pairs)
    first = next(iter(escape), None)
    return WindowModel(space, f, escape, {}, directions={"inf": first} if first is not None else {})
