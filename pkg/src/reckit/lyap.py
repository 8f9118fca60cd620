from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

from reckit import relcore as rc
from reckit.errors import InvariantViolation, PreconditionError
from reckit.models import FiniteSpace, LyapunovFn, PointSet, Relation, SufficientSet, Value, bits_of, iter_bits

log = logging.getLogger(__name__)

ZERO, HALF, ONE = Fraction(0), Fraction(1, 2), Fraction(1)

VERIFY_LIMIT = 2000


def _check_range(L: LyapunovFn) -> None:
    for x, v in enumerate(L.values):
        if v < 0 or v > 1:
            raise PreconditionError("Lyapunov values must lie in [0, 1]", witness=(x, v))


def _below_masks(L: LyapunovFn) -> Tuple[Dict[Value, int], List[int]]:
    """For each distinct value, the bitset of points with a strictly smaller value."""
    order = sorted(set(L.values))
    rank = {v: i for i, v in enumerate(order)}
    level = [0] * len(order)
    for x, v in enumerate(L.values):
        level[rank[v]] |= 1 << x
    below, acc = [], 0
    for b in level:
        below.append(acc)
        acc |= b
    return rank, below


def is_lyapunov(L: LyapunovFn, f: Relation) -> bool:
    """y ∈ f(x) implies L(x) <= L(y)."""
    L.space.require_same(f.space, "function and relation")
    _check_range(L)
    rank, below = _below_masks(L)
    return all(not (r & below[rank[L.values[x]]]) for x, r in enumerate(f.rows))


def lyapunov_witness(L: LyapunovFn, f: Relation) -> Optional[Tuple[int, int]]:
    rank, below = _below_masks(L)
    for x, r in enumerate(f.rows):
        bad = r & below[rank[L.values[x]]]
        if bad:
            return x, next(iter_bits(bad))
    return None


def le_relation(L: LyapunovFn) -> Relation:
    """≤_L as a relation: (x, y) whenever L(x) <= L(y)."""
    rank, below = _below_masks(L)
    full = L.space.all_bits
    return Relation(L.space, tuple(full & ~below[rank[v]] for v in L.values))


def order_intersection(space: FiniteSpace, functions: Sequence[LyapunovFn]) -> Relation:
    """∩ ≤_L over the list; the empty meet is X×X."""
    rows = [space.all_bits] * space.n
    for L in functions:
        rank, below = _below_masks(L)
        rows = [r & ~below[rank[v]] for r, v in zip(rows, L.values)]
    return Relation(space, tuple(rows))


def _closed_forward(F: Relation, A: PointSet) -> Optional[Tuple[int, int]]:
    a = A.bits
    for x in iter_bits(a):
        out = F.rows[x] & ~a
        if out:
            return x, next(iter_bits(out))
    return None


def _closed_backward(F: Relation, B: PointSet) -> Optional[Tuple[int, int]]:
    b = B.bits
    for x, r in enumerate(F.rows):
        if not (b >> x) & 1 and r & b:
            return x, next(iter_bits(r & b))
    return None


def _require_transitive(F: Relation) -> None:
    w = rc._transitivity_witness(F)
    if w is not None:
        x, y, z = w
        raise PreconditionError("relation is not transitive", witness=((x, y), (y, z)))


def _separate(F: Relation, a: int, b: int, cond: Optional[rc.Condensation] = None) -> LyapunovFn:
    """1 on a, 0 on b, interior components ranked by longest path from the 0 side."""
    cond = cond if cond is not None else rc.condensation(F)
    k = len(cond.members)
    preds: List[List[int]] = [[] for _ in range(k)]
    for ci in range(k):
        for s in cond.succ[ci]:
            preds[s].append(ci)
    rank = [0] * k
    top = 0
    for ci in cond.order:
        m = cond.members[ci]
        if m & a or m & b:
            continue
        r = 1 + max((rank[p] for p in preds[ci]), default=0)
        rank[ci] = r
        top = max(top, r)
    levels = {r: Fraction(r, top + 1) for r in range(1, top + 1)}
    vals: List[Fraction] = [ZERO] * F.n
    for ci in range(k):
        m = cond.members[ci]
        v = ONE if m & a else ZERO if m & b else levels[rank[ci]]
        for x in iter_bits(m):
            vals[x] = v
    return LyapunovFn(F.space, tuple(vals), subject=F)


def separate(F: Relation, A: PointSet, B: PointSet) -> LyapunovFn:
    F.space.require_same(A.space, "relation and point set")
    F.space.require_same(B.space, "relation and point set")
    w = _closed_forward(F, A)
    if w is not None:
        raise PreconditionError("F(A) is not contained in A", witness=w)
    w = _closed_backward(F, B)
    if w is not None:
        raise PreconditionError("F⁻¹(B) is not contained in B", witness=w)
    common = A.bits & B.bits
    if common:
        raise PreconditionError("A and B meet", witness=next(iter_bits(common)))
    return _separate(F, A.bits, B.bits)


def separate_points(F: Relation, x: int, y: int) -> LyapunovFn:
    """L(x) = 1 and L(y) = 0 for (x, y) outside F ∪ 1."""
    if x == y or F.contains(x, y):
        raise PreconditionError("points are related by F ∪ 1", witness=(x, y))
    _require_transitive(F)
    a = F.rows[x] | (1 << x)
    b = rc.preimage(F, PointSet(F.space, 1 << y)).bits | (1 << y)
    return separate(F, PointSet(F.space, a), PointSet(F.space, b))


def is_sufficient(functions: Sequence[LyapunovFn], f: Relation, G: Optional[Relation] = None) -> bool:
    """∩ ≤_L equals 1 ∪ Gf, by a full pair scan."""
    G = G if G is not None else rc.g_relation(f)
    return order_intersection(f.space, functions) == rc.with_identity(G)


def sufficient_set(f: Relation, per_pair: bool = False, verify: Optional[bool] = None, jobs: int = 1) -> SufficientSet:
    """Class-level separators whose orders meet in 1 ∪ Gf.

    The default emits one forward indicator per condensation class; per_pair emits a
    separator for every ordered pair of classes not related by Gf.
    """
    G = rc.g_relation(f)
    cond = rc.condensation(G)
    reps = [(m & -m).bit_length() - 1 for m in cond.members]
    comps = sorted(range(len(reps)), key=lambda c: reps[c])
    full = f.space.all_bits

    def forward(c: int) -> Optional[LyapunovFn]:
        a = G.rows[reps[c]] | cond.members[c]
        if a == full:
            return None
        return _separate(G, a, full & ~a, cond)

    def pair(cd: Tuple[int, int]) -> Optional[LyapunovFn]:
        c, d = cd
        x = reps[c]
        a = G.rows[x] | cond.members[c]
        y = reps[d]
        b = cond.members[d]
        for z in range(f.n):
            if G.contains(z, y):
                b |= 1 << z
        return _separate(G, a, b, cond)

    if per_pair:
        work = [(c, d) for c in comps for d in comps if c != d and not G.contains(reps[c], reps[d])]
        task = pair
    else:
        work, task = comps, forward
    if jobs > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            made = list(ex.map(task, work))
    else:
        made = [task(w) for w in work]
    functions = tuple(L for L in made if L is not None)
    do_verify = f.n <= VERIFY_LIMIT if verify is None else verify
    if do_verify and not is_sufficient(functions, f, G):
        raise InvariantViolation("sufficient set does not reproduce 1 ∪ Gf")
    log.info("sufficient set: %d functions over %d classes%s", len(functions), len(reps), " (verified)" if do_verify else "")
    return SufficientSet(f.space, functions, subject=G)


def splitting_function(f: Relation, x: int) -> Tuple[PointSet, LyapunovFn]:
    """U = {x} and L with sup L|Gf⁻¹(U) < inf L|Gf(U)."""
    G = rc.g_relation(f)
    if G.contains(x, x):
        raise PreconditionError("point is Gf-cyclic", witness=x)
    a = G.rows[x]
    b = f.space.all_bits & ~(a | (1 << x))
    return PointSet(f.space, 1 << x), _separate(G, a, b)


def splitting_holds(f: Relation, U: PointSet, L: LyapunovFn) -> bool:
    G = rc.g_relation(f)
    back = rc.preimage(G, U).members()
    fwd = rc.image(G, U).members()
    sup = max((L[y] for y in back), default=ZERO)
    inf = min((L[y] for y in fwd), default=ONE)
    return sup < inf


def complete_lyapunov(F: Relation) -> LyapunovFn:
    """(rank + 1)/(m + 2) with rank the longest path from a source class."""
    cond = rc.condensation(F)
    k = len(cond.members)
    rank = [0] * k
    for ci in cond.order:
        for s in cond.succ[ci]:
            rank[s] = max(rank[s], rank[ci] + 1)
    top = max(rank, default=0)
    levels = {r: Fraction(r + 1, top + 2) for r in range(top + 1)}
    vals: List[Fraction] = [ZERO] * F.n
    for ci in range(k):
        v = levels[rank[ci]]
        for x in iter_bits(cond.members[ci]):
            vals[x] = v
    log.debug("complete Lyapunov function: %d classes, %d levels", k, top + 1)
    return LyapunovFn(F.space, tuple(vals), subject=F)


def compact_support_lyapunov(F: Relation, A: PointSet, U: PointSet) -> LyapunovFn:
    """L = 1 on A and 0 outside U, from separate(F, (1∪F)(A), (1∪F⁻¹)(X∖U))."""
    F.space.require_same(A.space, "relation and point set")
    F.space.require_same(U.space, "relation and point set")
    if not A.is_subset(U):
        raise PreconditionError("A is not contained in U", witness=next(iter_bits(A.bits & ~U.bits)))
    fwd = A.union(rc.image(F, A))
    escaped = fwd.bits & ~U.bits
    if escaped:
        raise PreconditionError("forward set of A leaves U", witness=next(iter_bits(escaped)))
    outside = U.complement()
    B = outside.union(rc.preimage(F, outside))
    return separate(F, fwd, B)


def hull_via_lyapunov(f: Relation, A: PointSet, LS: SufficientSet) -> PointSet:
    """{x : L(x) >= inf L|A for every L}, with LS augmented by a separator for A."""
    G = rc.g_relation(f)
    for L in LS:
        w = lyapunov_witness(L, f)
        if w is not None:
            raise PreconditionError("function is not a Lyapunov function for f", witness=w)
    a = A.bits | rc.image(G, A).bits
    augmented = list(LS.functions) + [_separate(G, a, f.space.all_bits & ~a)]
    members = A.members()
    keep = f.space.all_bits
    for L in augmented:
        floor = min((L[y] for y in members), default=ONE)
        keep &= bits_of(x for x, v in enumerate(L.values) if v >= floor)
    return PointSet(f.space, keep)
