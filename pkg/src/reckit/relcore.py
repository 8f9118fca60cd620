from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx

from reckit.errors import InvariantViolation, PreconditionError
from reckit.models import FiniteSpace, PointSet, Relation, bits_of, iter_bits, rows_to_matrix, matrix_to_rows

log = logging.getLogger(__name__)

_DENSE_LIMIT = 2048


def _space(*rels: Relation) -> FiniteSpace:
    sp = rels[0].space
    for r in rels[1:]:
        sp.require_same(r.space, "relations")
    return sp


def compose(g: Relation, f: Relation) -> Relation:
    """g∘f: apply f first, then g."""
    sp = _space(g, f)
    grows = g.rows
    out = []
    for r in f.rows:
        acc = 0
        for y in iter_bits(r):
            acc |= grows[y]
        out.append(acc)
    return Relation(sp, tuple(out))


def inverse(f: Relation) -> Relation:
    n = f.n
    if n <= _DENSE_LIMIT:
        return Relation(f.space, matrix_to_rows(rows_to_matrix(f.rows, n).T.copy()))
    cols = [0] * n
    for x, r in enumerate(f.rows):
        bx = 1 << x
        for y in iter_bits(r):
            cols[y] |= bx
    return Relation(f.space, tuple(cols))


def union(*rels: Relation) -> Relation:
    sp = _space(*rels)
    return Relation(sp, tuple(_or_all(rs) for rs in zip(*(r.rows for r in rels))))


def intersection(*rels: Relation) -> Relation:
    sp = _space(*rels)
    out = []
    for rs in zip(*(r.rows for r in rels)):
        acc = rs[0]
        for v in rs[1:]:
            acc &= v
        out.append(acc)
    return Relation(sp, tuple(out))


def difference(f: Relation, g: Relation) -> Relation:
    sp = _space(f, g)
    return Relation(sp, tuple(a & ~b for a, b in zip(f.rows, g.rows)))


def _or_all(vals: Sequence[int]) -> int:
    acc = 0
    for v in vals:
        acc |= v
    return acc


def is_subset(f: Relation, g: Relation) -> bool:
    _space(f, g)
    return all(a & ~b == 0 for a, b in zip(f.rows, g.rows))


def symdiff_size(f: Relation, g: Relation) -> int:
    _space(f, g)
    return sum((a ^ b).bit_count() for a, b in zip(f.rows, g.rows))


def power(f: Relation, k: int) -> Relation:
    if k < 0:
        return power(inverse(f), -k)
    out = Relation.identity(f.space)
    base = f
    while k:
        if k & 1:
            out = compose(base, out)
        k >>= 1
        if k:
            base = compose(base, base)
    return out


def image(f: Relation, A: PointSet) -> PointSet:
    _space(f)
    f.space.require_same(A.space, "relation and point set")
    acc = 0
    for x in iter_bits(A.bits):
        acc |= f.rows[x]
    return PointSet(f.space, acc)


def preimage(f: Relation, B: PointSet) -> PointSet:
    f.space.require_same(B.space, "relation and point set")
    b = B.bits
    return PointSet(f.space, bits_of(x for x, r in enumerate(f.rows) if r & b))


def is_reflexive(f: Relation) -> bool:
    return all((r >> x) & 1 for x, r in enumerate(f.rows))


def is_symmetric(f: Relation) -> bool:
    return f == inverse(f)


def is_transitive(f: Relation) -> bool:
    return is_subset(compose(f, f), f)


def _transitivity_witness(f: Relation) -> Optional[Tuple[int, int, int]]:
    for x, r in enumerate(f.rows):
        for y in iter_bits(r):
            extra = f.rows[y] & ~r
            if extra:
                z = next(iter_bits(extra))
                return x, y, z
    return None


def with_identity(f: Relation) -> Relation:
    return Relation(f.space, tuple(r | (1 << x) for x, r in enumerate(f.rows)))


@dataclass(frozen=True)
class Condensation:
    """SCC condensation of a relation's graph, components in topological order."""

    order: Tuple[int, ...]  # component ids, sources first
    comp_of: Tuple[int, ...]  # point -> component id
    members: Tuple[int, ...]  # component id -> bitset
    cyclic: Tuple[bool, ...]
    succ: Tuple[Tuple[int, ...], ...]


def condensation(f: Relation) -> Condensation:
    g = nx.DiGraph()
    g.add_nodes_from(range(f.n))
    g.add_edges_from(f.pairs())
    c = nx.condensation(g)
    mapping: Dict[int, int] = c.graph["mapping"]
    k = c.number_of_nodes()
    members = [0] * k
    for x, ci in mapping.items():
        members[ci] |= 1 << x
    cyclic = []
    for ci in range(k):
        m = members[ci]
        if m & (m - 1):
            cyclic.append(True)
        else:
            x = m.bit_length() - 1
            cyclic.append(bool((f.rows[x] >> x) & 1))
    succ = tuple(tuple(sorted(c.successors(ci))) for ci in range(k))
    order = tuple(nx.topological_sort(c))
    log.debug("condensation: %d points, %d components, %d cyclic", f.n, k, sum(cyclic))
    return Condensation(order, tuple(mapping[x] for x in range(f.n)), tuple(members), tuple(cyclic), succ)


def _down_sets(cond: Condensation) -> List[int]:
    """Points reachable in zero or more steps from each component."""
    down = [0] * len(cond.members)
    for ci in reversed(cond.order):
        acc = cond.members[ci]
        for s in cond.succ[ci]:
            acc |= down[s]
        down[ci] = acc
    return down


def orbit_relation(f: Relation) -> Relation:
    """Transitive closure: the union of all positive iterates."""
    cond = condensation(f)
    down = _down_sets(cond)
    comp_rows = []
    for ci in range(len(cond.members)):
        acc = cond.members[ci] if cond.cyclic[ci] else 0
        for s in cond.succ[ci]:
            acc |= down[s]
        comp_rows.append(acc)
    return Relation(f.space, tuple(comp_rows[ci] for ci in cond.comp_of))


def g_relation(f: Relation) -> Relation:
    # Closure is the identity on a finite discrete space, so Gf = Nf = Of.
    return orbit_relation(f)


def cyclic_set(f: Relation) -> PointSet:
    return PointSet(f.space, bits_of(x for x, r in enumerate(f.rows) if (r >> x) & 1))


def recurrence_classes(f: Relation) -> List[PointSet]:
    """Classes of 1 ∪ [Gf ∩ Gf⁻¹] on |Gf|, ordered by smallest member."""
    cond = condensation(f)
    out = [PointSet(f.space, m) for m, cyc in zip(cond.members, cond.cyclic) if cyc]
    out.sort(key=lambda s: (s.bits & -s.bits).bit_length())
    return out


def subspace(space: FiniteSpace, D: PointSet) -> FiniteSpace:
    space.require_same(D.space, "space and point set")
    idx = D.members()
    labels = tuple(space.label(i) for i in idx)
    coords = space.coords[idx] if space.coords is not None else None
    return FiniteSpace(len(idx), labels, coords)


def _compress(bits: int, new_index: Dict[int, int]) -> int:
    acc = 0
    for y in iter_bits(bits):
        acc |= 1 << new_index[y]
    return acc


def restriction(f: Relation, D: PointSet, space: Optional[FiniteSpace] = None) -> Relation:
    """f ∩ (D×D), re-indexed over D in increasing order."""
    f.space.require_same(D.space, "relation and point set")
    idx = D.members()
    sub = space if space is not None else subspace(f.space, D)
    new_index = {x: i for i, x in enumerate(idx)}
    d = D.bits
    return Relation(sub, tuple(_compress(f.rows[x] & d, new_index) for x in idx))


def lift(sub_bits: int, D: PointSet) -> PointSet:
    """Map a bitset over the re-indexed subspace back to the ambient space."""
    idx = D.members()
    return PointSet(D.space, bits_of(idx[i] for i in iter_bits(sub_bits)))


def is_unrevisited(F: Relation, C: PointSet) -> bool:
    O = orbit_relation(F)
    fwd = image(O, C).bits
    bwd = preimage(O, C).bits
    return fwd & bwd & ~C.bits == 0


def _require_preorder(F: Relation) -> None:
    for x, r in enumerate(F.rows):
        if not (r >> x) & 1:
            raise PreconditionError("relation is not reflexive", witness=(x, x))
    w = _transitivity_witness(F)
    if w is not None:
        x, y, z = w
        raise PreconditionError("relation is not transitive", witness=((x, y), (y, z)))


def unrevisited_hull(F: Relation, A: PointSet) -> PointSet:
    _require_preorder(F)
    return PointSet(F.space, image(F, A).bits & preimage(F, A).bits)


def invariant_hull(f: Relation, A: PointSet) -> PointSet:
    """Smallest f +invariant set containing A."""
    f.space.require_same(A.space, "relation and point set")
    s = A.bits
    frontier = A.bits
    while frontier:
        acc = 0
        for x in iter_bits(frontier):
            acc |= f.rows[x]
        frontier = acc & ~s
        s |= frontier
    return PointSet(f.space, s)


def _tail_rows(f: Relation) -> List[int]:
    cond = condensation(f)
    down = _down_sets(cond)
    tail = [0] * len(cond.members)
    for ci in reversed(cond.order):
        acc = down[ci] if cond.cyclic[ci] else 0
        for s in cond.succ[ci]:
            acc |= tail[s]
        tail[ci] = acc
    return [tail[ci] for ci in cond.comp_of]


def omega_limit(f: Relation, x: int) -> PointSet:
    """ω f(x): points visited by iterates of x infinitely often."""
    return PointSet(f.space, _tail_rows(f)[x])


def omega_relation(f: Relation) -> Relation:
    # Tail unions are nonincreasing over a finite lattice; the limit is reached
    # exactly by the pairs joined by paths through a cyclic component.
    return Relation(f.space, tuple(_tail_rows(f)))


def nonwandering_relation(f: Relation) -> Relation:
    return union(orbit_relation(f), omega_relation(f))


def omega_g(f: Relation) -> Relation:
    """∩ₙ (Gf)ⁿ by iterated composition until two consecutive powers agree."""
    G = g_relation(f)
    cap = f.n * f.n + 1
    cur = G
    for i in range(cap + 1):
        nxt = compose(G, cur)
        if nxt == cur:
            log.debug("omega_g stabilized after %d compositions", i + 1)
            return cur
        cur = nxt
    raise InvariantViolation(f"omega_g did not stabilize within {cap} iterations")


def is_equivalence(R: Relation) -> bool:
    return is_reflexive(R) and is_symmetric(R) and is_transitive(R)
