from __future__ import annotations

import logging
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from reckit import relcore as rc
from reckit.errors import PreconditionError
from reckit.models import EntourageFamily, FiniteSpace, LyapunovFn, Metric, PointSet, Relation, bits_of, iter_bits, matrix_to_rows

log = logging.getLogger(__name__)

_CHUNK = 512
_REL_SLACK = 1e-12

ZERO, HALF, ONE = Fraction(0), Fraction(1, 2), Fraction(1)


def _check_eps(eps: Sequence[float]) -> None:
    if not eps:
        raise PreconditionError("metric needs a nonempty eps list")
    if any(e <= 0 for e in eps):
        raise PreconditionError("eps values must be positive", witness=tuple(eps))
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise PreconditionError("eps list must be strictly decreasing", witness=tuple(eps))


def entourages_from_metric(m: Metric, space: Optional[FiniteSpace] = None) -> EntourageFamily:
    """V_i = {(x, y): d(x, y) <= eps_i}, nested because eps is decreasing."""
    _check_eps(m.eps)
    sp = space if space is not None else FiniteSpace(m.n, coords=m.coords)
    if sp.n != m.n:
        raise PreconditionError(f"metric has {m.n} points, space has {sp.n}")
    rows: List[List[int]] = [[] for _ in m.eps]
    for start in range(0, m.n, _CHUNK):
        idx = np.arange(start, min(m.n, start + _CHUNK))
        d = m.distances_from(idx)
        for k, e in enumerate(m.eps):
            rows[k].extend(matrix_to_rows(d <= e * (1.0 + _REL_SLACK)))
    family = tuple(Relation(sp, tuple(r)) for r in rows)
    return EntourageFamily(sp, family, m)


def discrete_family(space: FiniteSpace) -> EntourageFamily:
    return EntourageFamily(space, (Relation.identity(space),))


def family_from_relations(entourages: Sequence[Relation]) -> EntourageFamily:
    if not entourages:
        raise PreconditionError("entourage family must be nonempty")
    sp = entourages[0].space
    for V in entourages:
        sp.require_same(V.space, "entourages")
        if not rc.is_reflexive(V) or not rc.is_symmetric(V):
            raise PreconditionError("entourages must be reflexive and symmetric")
    fam = EntourageFamily(sp, tuple(entourages))
    if not is_family_nested(fam):
        raise PreconditionError("entourage family must be nested")
    return fam


def is_family_nested(U: EntourageFamily) -> bool:
    return all(rc.is_subset(b, a) for a, b in zip(U.entourages, U.entourages[1:]))


def induced_family(U: EntourageFamily, D: PointSet) -> EntourageFamily:
    sub = rc.subspace(U.space, D)
    ents = tuple(rc.restriction(V, D, sub) for V in U.entourages)
    metric = None
    if U.metric is not None:
        metric = Metric(U.metric.coords[D.members()], U.metric.eps, U.metric.norm)
    return EntourageFamily(sub, ents, metric)


def extend_family_one_point(U: EntourageFamily, ambient: FiniteSpace, interior: PointSet) -> EntourageFamily:
    """Carry a family on X to X̂ with every added point isolated."""
    idx = interior.members()
    if len(idx) != U.space.n:
        raise PreconditionError("interior size does not match the family's space")
    ents = []
    for V in U.entourages:
        rows = [1 << x for x in range(ambient.n)]
        for i, x in enumerate(idx):
            rows[x] = bits_of(idx[j] for j in iter_bits(V.rows[i]))
        ents.append(Relation(ambient, tuple(rows)))
    return EntourageFamily(ambient, tuple(ents))


def chain_relation(f: Relation, U: EntourageFamily) -> Relation:
    """∩ over V of O(V∘f)."""
    f.space.require_same(U.space, "relation and family")
    out: Optional[Relation] = None
    for V in U.entourages:
        O = rc.orbit_relation(rc.compose(V, f))
        out = O if out is None else rc.intersection(out, O)
    assert out is not None
    return out


def chain_generator(f: Relation, U: EntourageFamily) -> Relation:
    """A relation whose orbit closure is Cf: V∘f itself for a single entourage, else Cf."""
    f.space.require_same(U.space, "relation and family")
    if len(U.entourages) == 1:
        return rc.compose(U.entourages[0], f)
    return chain_relation(f, U)


def loop_adjacency(space: FiniteSpace) -> EntourageFamily:
    """Link each planar point to its neighbors in angular order about the centroid, closing the loop."""
    if space.coords is None or space.coords.shape[1] != 2:
        raise PreconditionError("loop adjacency needs planar coordinates", witness=space.n)
    p = space.coords - space.coords.mean(axis=0)
    order = np.argsort(np.arctan2(p[:, 1], p[:, 0]), kind="stable").tolist()
    rows = [1 << x for x in range(space.n)]
    for a, b in zip(order, order[1:] + order[:1]):
        rows[a] |= 1 << b
        rows[b] |= 1 << a
    return EntourageFamily(space, (Relation(space, tuple(rows)),))


def chain_components(f: Relation, U: EntourageFamily) -> List[PointSet]:
    """Classes of Cf ∩ Cf⁻¹ on |Cf|, from the SCC partitions of every V∘f."""
    f.space.require_same(U.space, "relation and family")
    keys: List[Tuple[int, ...]] = [() for _ in range(f.n)]
    alive = f.space.all_bits
    for V in U.entourages:
        cond = rc.condensation(rc.compose(V, f))
        cyclic_bits = 0
        for m, cyc in zip(cond.members, cond.cyclic):
            if cyc:
                cyclic_bits |= m
        alive &= cyclic_bits
        keys = [k + (cond.comp_of[x],) for x, k in enumerate(keys)]
    groups: Dict[Tuple[int, ...], int] = {}
    for x in iter_bits(alive):
        groups[keys[x]] = groups.get(keys[x], 0) | (1 << x)
    out = [PointSet(f.space, b) for b in groups.values()]
    out.sort(key=lambda s: (s.bits & -s.bits).bit_length())
    return out


def is_chain_transitive(f: Relation, U: EntourageFamily) -> bool:
    if f.n == 0:
        return True
    for V in U.entourages:
        cond = rc.condensation(rc.compose(V, f))
        if len(cond.members) != 1 or not cond.cyclic[0]:
            return False
    return True


def _values_array(L: LyapunovFn) -> np.ndarray:
    vals = L.as_array()
    if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
        bad = int(np.flatnonzero((vals < 0.0) | (vals > 1.0))[0])
        raise PreconditionError("Lyapunov values must lie in [0, 1]", witness=(bad, L.values[bad]))
    return vals


def elementary_lyapunov_check(L: LyapunovFn, f: Relation) -> bool:
    """Every edge (x, y) has L(x) = 0 or L(y) = 1."""
    L.space.require_same(f.space, "function and relation")
    vals = _values_array(L)
    ones = bits_of(np.flatnonzero(vals == 1.0).tolist())
    for x, r in enumerate(f.rows):
        if r and vals[x] != 0.0 and r & ~ones:
            return False
    return True


def _dist_to_set(m: Metric, target: np.ndarray) -> np.ndarray:
    out = np.full(m.n, np.inf)
    if not target.any():
        return out
    for start in range(0, m.n, _CHUNK):
        idx = np.arange(start, min(m.n, start + _CHUNK))
        d = m.distances_from(idx)
        out[idx] = d[:, target].min(axis=1)
    return out


def establish_inclusion(A: PointSet, B: PointSet, m: Metric) -> LyapunovFn:
    """L = d(x, X∖B) / (d(x, A) + d(x, X∖B)): 1 on A, 0 off B."""
    A.space.require_same(B.space, "point sets")
    if m.n != A.space.n:
        raise PreconditionError("metric and point sets disagree on the point count")
    _check_eps(m.eps)
    a_mask = A.to_mask()
    outside = ~B.to_mask()
    d_a = _dist_to_set(m, a_mask)
    d_b = _dist_to_set(m, outside)
    unit = m.eps[-1] * (1.0 + _REL_SLACK)
    near = np.flatnonzero((d_a <= unit) & outside)
    if near.size:
        raise PreconditionError("A is not uniformly inside B", witness=int(near[0]))
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = d_b / (d_a + d_b)
    inf_b = np.isinf(d_b)
    vals[inf_b] = 1.0 if a_mask.any() else 0.0
    vals[a_mask] = 1.0
    vals[outside] = 0.0
    return LyapunovFn(A.space, tuple(float(v) for v in vals))


def _v_interior(V: Relation, U: PointSet) -> int:
    u = U.bits
    return bits_of(x for x, r in enumerate(V.rows) if r & ~u == 0)


def inward_hull(f: Relation, A: PointSet, V: Relation) -> Tuple[PointSet, bool]:
    """U = A ∪ O(V∘f∘V)(A) with a flag certifying f(U) ⊆ V-interior of U."""
    if not rc.is_reflexive(V) or not rc.is_symmetric(V):
        raise PreconditionError("entourage must be reflexive and symmetric")
    step = rc.compose(V, rc.compose(f, V))
    U = A.union(rc.image(rc.orbit_relation(step), A))
    inward = rc.image(f, U).bits & ~_v_interior(V, U) == 0
    return U, inward


def is_inward(f: Relation, U: PointSet, family: Optional[EntourageFamily] = None) -> bool:
    V = family.smallest if family is not None else Relation.identity(f.space)
    return rc.image(f, U).bits & ~_v_interior(V, U) == 0


def attractor(f: Relation, U: PointSet, family: Optional[EntourageFamily] = None) -> PointSet:
    """∩ₙ fⁿ(U) for a uniformly inward U."""
    if not is_inward(f, U, family):
        escaping = rc.image(f, U).bits & ~U.bits
        w = next(iter_bits(escaping)) if escaping else None
        raise PreconditionError("set is not uniformly inward", witness=w)
    cur = U
    for i in range(f.n + 2):
        nxt = rc.image(f, cur)
        if nxt == cur:
            log.debug("attractor stabilized after %d images", i)
            return cur
        cur = nxt
    return cur


def elementary_sufficient_set(f: Relation, U: EntourageFamily) -> List[LyapunovFn]:
    """One elementary function per component of Cf; constants are dropped."""
    C = chain_relation(f, U)
    cond = rc.condensation(C)
    n = f.n
    out: List[LyapunovFn] = []
    for ci in sorted(range(len(cond.members)), key=lambda c: (cond.members[c] & -cond.members[c]).bit_length()):
        m = cond.members[ci]
        x = (m & -m).bit_length() - 1
        fwd = C.rows[x]
        vals = [ONE if (fwd >> y) & 1 else ZERO for y in range(n)]
        if not cond.cyclic[ci]:
            vals[x] = HALF
        if all(v == vals[0] for v in vals):
            continue
        out.append(LyapunovFn(f.space, tuple(vals), subject=C))
    log.debug("elementary sufficient set: %d functions for %d components", len(out), len(cond.members))
    return out


def chain_recurrent_set(f: Relation, U: EntourageFamily) -> PointSet:
    return rc.cyclic_set(chain_relation(f, U))


def is_finer(fine: EntourageFamily, coarse: EntourageFamily) -> bool:
    """Every entourage of `coarse` contains one of `fine`."""
    fine.space.require_same(coarse.space, "families")
    return all(any(rc.is_subset(V, W) for V in fine.entourages) for W in coarse.entourages)
