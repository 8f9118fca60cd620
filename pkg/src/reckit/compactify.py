from __future__ import annotations

import logging
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple

from reckit import lyap
from reckit import relcore as rc
from reckit import uniform
from reckit.errors import InvariantViolation, PreconditionError
from reckit.models import CompactifiedSystem, EntourageFamily, FiniteSpace, PointSet, Relation, SufficientSet, Value, WindowModel, bits_of, iter_bits

log = logging.getLogger(__name__)

INFINITY_LABEL = "inf"
FLOAT_TOL = 1e-9
POWER_CHECKS = 5

CASES = ("i", "ii", "iii", "iv")


def build_system(
    ambient: FiniteSpace,
    interior: PointSet,
    fhat: Relation,
    proper_flag: bool = False,
    boundary: int = 0,
    escape_out: int = 0,
) -> CompactifiedSystem:
    """Store f̂ with its trace f = f̂ ∩ (X×X) and check the trace lifts back."""
    ambient.require_same(fhat.space, "ambient space and relation")
    ambient.require_same(interior.space, "ambient space and interior")
    sub = rc.subspace(ambient, interior)
    f = rc.restriction(fhat, interior, sub)
    inner = interior.bits
    for i, x in enumerate(interior.members()):
        if rc.lift(f.rows[i], interior).bits != fhat.rows[x] & inner:
            raise InvariantViolation(f"trace of f̂ on the interior differs at point {ambient.label(x)}")
    return CompactifiedSystem(ambient, interior, fhat, f, sub, proper_flag, boundary & inner, escape_out & inner)


def _window_labels(w: WindowModel) -> List[str]:
    return [w.interior.label(i) for i in range(w.interior.n)]


def one_point_compactify(w: WindowModel) -> CompactifiedSystem:
    """X ∪ {∞}: escaping cells map to ∞, ∞ maps to itself and to re-entry cells."""
    n = w.interior.n
    labels = _window_labels(w)
    inf_label = INFINITY_LABEL if INFINITY_LABEL not in labels else f"{INFINITY_LABEL}*"
    ambient = FiniteSpace(n + 1, tuple(labels) + (inf_label,))
    inf_bit = 1 << n
    rows = list(w.f.rows)
    for c in w.escape_out:
        rows[c] |= inf_bit
    rows.append(bits_of(w.escape_in) | inf_bit)
    fhat = Relation(ambient, tuple(rows))
    log.debug("one-point compactification: %d cells, %d out, %d in", n, len(w.escape_out), len(w.escape_in))
    return build_system(ambient, PointSet(ambient, inf_bit - 1), fhat, w.proper_flag, w.boundary, bits_of(w.escape_out))


def _agree(u: Sequence[Value], v: Sequence[Value], tol: float) -> bool:
    for a, b in zip(u, v):
        if isinstance(a, Fraction) and isinstance(b, Fraction):
            if a != b:
                return False
        elif abs(float(a) - float(b)) > tol:
            return False
    return True


def _representative(w: WindowModel, tag: str) -> int:
    if tag in w.directions:
        return w.directions[tag]
    for c, t in list(w.escape_out.items()) + list(w.escape_in.items()):
        if t == tag:
            return c
    raise PreconditionError("escape direction has no representative cell", witness=tag)


def group_directions(w: WindowModel, LS: SufficientSet, tol: float = FLOAT_TOL) -> List[List[str]]:
    """Direction tags grouped by agreement of every L at their representative cells."""
    groups: List[Tuple[Tuple[Value, ...], List[str]]] = []
    for tag in w.tags():
        vec = tuple(L[_representative(w, tag)] for L in LS)
        for lead, members in groups:
            if _agree(lead, vec, tol):
                members.append(tag)
                break
        else:
            groups.append((vec, [tag]))
    return [members for _, members in groups]


def lyapunov_compactify(w: WindowModel, LS: SufficientSet, tol: float = FLOAT_TOL, require_sufficient: bool = True) -> CompactifiedSystem:
    """One infinity point per class of escape directions that no L in LS tells apart."""
    w.interior.require_same(LS.space, "window and Lyapunov set")
    if require_sufficient and not lyap.is_sufficient(LS.functions, w.f):
        raise PreconditionError("Lyapunov set is not sufficient for the window relation")
    groups = group_directions(w, LS, tol)
    if not groups:
        return one_point_compactify(w)
    n = w.interior.n
    names = [members[0] if len(members) == 1 else "|".join(members) for members in groups]
    slot = {tag: n + g for g, members in enumerate(groups) for tag in members}
    ambient = FiniteSpace(n + len(groups), tuple(_window_labels(w)) + tuple(names))
    rows = list(w.f.rows) + [0] * len(groups)
    for c, tag in w.escape_out.items():
        rows[c] |= 1 << slot[tag]
    for c, tag in w.escape_in.items():
        rows[slot[tag]] |= 1 << c
    if w.direction_pairs:
        for s, t in w.direction_pairs:
            if s not in slot or t not in slot:
                raise PreconditionError("direction pair names an unknown direction", witness=(s, t))
            rows[slot[s]] |= 1 << slot[t]
    else:
        for g in range(len(groups)):
            rows[n + g] |= 1 << (n + g)
    fhat = Relation(ambient, tuple(rows))
    log.info("Lyapunov compactification: %d directions in %d infinity points", len(slot), len(groups))
    return build_system(ambient, PointSet(ambient, (1 << n) - 1), fhat, w.proper_flag, w.boundary, bits_of(w.escape_out))


def _trace(c: CompactifiedSystem, R: Relation) -> Relation:
    return rc.restriction(R, c.interior_mask, c.interior)


def is_dynamic(c: CompactifiedSystem) -> bool:
    """G f̂ ∩ (X×X) = Gf."""
    return _trace(c, rc.g_relation(c.fhat)) == rc.g_relation(c.f)


def is_almost_dynamic(c: CompactifiedSystem) -> bool:
    """[1 ∪ G f̂] ∩ (X×X) = 1 ∪ Gf."""
    return _trace(c, rc.with_identity(rc.g_relation(c.fhat))) == rc.with_identity(rc.g_relation(c.f))


def plus_proper_check(c: CompactifiedSystem) -> bool:
    """f̂(X) ⊆ X."""
    outside = c.infinity.bits
    return all(not (c.fhat.rows[x] & outside) for x in c.interior_points())


def infinity_witness(c: CompactifiedSystem, x: int, y: int) -> Optional[int]:
    """For (x, y) in G f̂ over X but not in Gf, a point z at infinity with (x, z), (z, y) ∈ G f̂."""
    if x not in c.interior_mask or y not in c.interior_mask:
        raise PreconditionError("points must lie in the interior", witness=(x, y))
    G = rc.g_relation(c.fhat)
    if not G.contains(x, y):
        raise PreconditionError("pair is not in G f̂", witness=(x, y))
    idx = {p: i for i, p in enumerate(c.interior_points())}
    if rc.g_relation(c.f).contains(idx[x], idx[y]):
        return None
    for z in c.infinity:
        if G.contains(x, z) and G.contains(z, y):
            return z
    raise InvariantViolation("pair of G f̂ outside Gf is not routed through infinity")


def classify_classes(c: CompactifiedSystem) -> List[Tuple[PointSet, str]]:
    """Case of every G f̂ ∩ G f̂⁻¹ class on |G f̂|.

    (i) the class lies at infinity; (ii) its trace on X is a full Gf class that reaches
    the escape boundary; (iii) the class lies in X; (iv) anything else.
    """
    if not is_almost_dynamic(c):
        raise PreconditionError("compactification is not almost dynamic")
    inner = c.interior_mask.bits
    edge = c.boundary | c.escape_out
    small = {rc.lift(E.bits, c.interior_mask).bits for E in rc.recurrence_classes(c.f)}
    out: List[Tuple[PointSet, str]] = []
    for E_hat in rc.recurrence_classes(c.fhat):
        E = E_hat.bits & inner
        if not E:
            case = "i"
        elif E == E_hat.bits:
            case = "iii"
        elif E in small and E & edge:
            case = "ii"
        else:
            case = "iv"
        out.append((E_hat, case))
    if any(case == "iv" for _, case in out) and plus_proper_check(c):
        raise InvariantViolation("case (iv) class in a +proper compactification")
    log.debug("classified %d classes: %s", len(out), [case for _, case in out])
    return out


def tilde_x(c: CompactifiedSystem) -> PointSet:
    """∪ₙ f̂⁻ⁿ(X): the points that eventually enter X."""
    for x, r in enumerate(c.fhat.rows):
        if r.bit_count() != 1:
            raise PreconditionError("f̂ is not a function", witness=c.ambient.label(x))
    cur = c.interior_mask
    for i in range(c.ambient.n + 1):
        nxt = c.interior_mask.union(rc.preimage(c.fhat, cur))
        if nxt == cur:
            log.debug("tilde X stabilized after %d preimages", i)
            return cur
        cur = nxt
    return cur


def chain_dynamic_check(c: CompactifiedSystem, U_X: EntourageFamily, U_hat: EntourageFamily) -> bool:
    """C f̂ ∩ (X×X) = Cf, with U_X required finer than U_hat on X."""
    c.ambient.require_same(U_hat.space, "compactification and ambient family")
    c.interior.require_same(U_X.space, "compactification and interior family")
    induced = uniform.induced_family(U_hat, c.interior_mask)
    if not uniform.is_finer(U_X, induced):
        raise PreconditionError("interior family is not finer than the ambient family on X")
    C_hat = uniform.chain_relation(c.fhat, U_hat)
    return _trace(c, C_hat) == uniform.chain_relation(c.f, U_X)


def _restricts(c: CompactifiedSystem, big: Relation, small: Relation) -> bool:
    return _trace(c, big) == small


def audit(c: CompactifiedSystem) -> Dict[str, Any]:
    """Consistency checks that hold for well-formed compactifications."""
    report: Dict[str, Any] = {
        "points": c.ambient.n,
        "infinity": c.infinity.labels(),
        "dynamic": is_dynamic(c),
        "almost_dynamic": is_almost_dynamic(c),
        "plus_proper": plus_proper_check(c),
        "proper_flag": c.proper_flag,
    }
    if report["plus_proper"]:
        inner = c.interior_mask.bits
        ok = True
        fh, fn = c.fhat, c.f
        for _ in range(POWER_CHECKS):
            rows = [fh.rows[x] for x in c.interior_points()]
            lifted = [rc.lift(r, c.interior_mask).bits for r in fn.rows]
            ok = ok and rows == lifted and all(not (r & ~inner) for r in rows)
            fh, fn = rc.compose(c.fhat, fh), rc.compose(c.f, fn)
        report["powers_restrict"] = ok
        report["nonwandering_restricts"] = _restricts(c, rc.nonwandering_relation(c.fhat), rc.nonwandering_relation(c.f))
        report["omega_restricts"] = _restricts(c, rc.omega_relation(c.fhat), rc.omega_relation(c.f))
    if report["almost_dynamic"]:
        report["unrevisited_preserved"] = unrevisited_preserved(c)
        report["class_traces"] = _class_traces(c)
        report["classes"] = [{"points": E.labels(), "case": case} for E, case in classify_classes(c)]
    return report


def unrevisited_preserved(c: CompactifiedSystem) -> bool:
    """Compact Gf classes stay G f̂ unrevisited and compact Gf forward sets stay G f̂ +invariant, in all of X̂.

    A set is compact when it avoids the frontier and the escaping cells.
    """
    G = rc.g_relation(c.f)
    G_hat = rc.g_relation(c.fhat)
    edge = c.boundary | c.escape_out
    for E in rc.recurrence_classes(c.f):
        e = rc.lift(E.bits, c.interior_mask)
        if e.bits & edge:
            continue
        if rc.image(G_hat, e).bits & rc.preimage(G_hat, e).bits & ~e.bits:
            return False
    for x in range(c.f.n):
        fwd = rc.lift(G.rows[x] | (1 << x), c.interior_mask)
        if fwd.bits & edge:
            continue
        if rc.image(G_hat, fwd).bits & ~fwd.bits:
            return False
    return True


def _class_traces(c: CompactifiedSystem) -> bool:
    """Every Gf class is the trace on X of the G f̂ class containing it."""
    hat_classes = [E.bits for E in rc.recurrence_classes(c.fhat)]
    inner = c.interior_mask.bits
    for E in rc.recurrence_classes(c.f):
        e = rc.lift(E.bits, c.interior_mask).bits
        home = next((h for h in hat_classes if h & e), None)
        if home is None or home & inner != e:
            return False
    return True


def infinity_labels(c: CompactifiedSystem) -> List[str]:
    return [c.ambient.label(z) for z in iter_bits(c.infinity.bits)]
