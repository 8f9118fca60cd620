from __future__ import annotations

import logging
from dataclasses import replace
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple, Union

from reckit.compactify import build_system
from reckit.errors import InvariantViolation, PreconditionError
from reckit.models import INF, CompactifiedSystem, FiniteSpace, PointSet, RayAtom, RayRule, RaySystem, Relation, WindowModel

log = logging.getLogger(__name__)

NINF = -INF
MAX_ROUNDS = 256

Endpoint = Union[str, Tuple[str, int]]


def _num(v: Any) -> Union[int, float]:
    if v is None or v == "inf" or v == INF:
        return INF
    if v == "-inf" or v == NINF:
        return NINF
    return int(v)


# ---------------------------------------------------------------------------
# construction


def _validate(R: RaySystem) -> None:
    rays = set(R.rays)
    if len(rays) != len(R.rays):
        raise PreconditionError("duplicate ray tags", witness=R.rays)
    points = set(R.points)
    if rays & points:
        raise PreconditionError("ray tags and point names overlap", witness=sorted(rays & points))
    for ray, _ in R.limits:
        if ray not in rays:
            raise PreconditionError("limit declared for an unknown ray", witness=ray)
    for rule in R.rules:
        if rule.src not in rays or rule.dst not in rays:
            raise PreconditionError("rule references an unknown ray", witness=rule)
        if rule.shift not in (-1, 0, 1):
            raise PreconditionError("rule shift must be -1, 0 or +1", witness=rule)
        if rule.start < 0:
            raise PreconditionError("rule threshold must be >= 0", witness=rule)
    for atom in R.atoms:
        src_ok = atom.src in rays if atom.kind[0] == "R" else atom.src in points
        dst_ok = atom.dst in rays if atom.kind[1] == "R" else atom.dst in points
        if not (src_ok and dst_ok):
            raise PreconditionError("pair references an unknown ray or point", witness=atom)


def rule_atom(rule: RayRule) -> RayAtom:
    return RayAtom("RR", rule.src, rule.dst, n0=rule.start, a=rule.shift, b=rule.shift)


def pair_atom(x: Endpoint, y: Endpoint) -> RayAtom:
    """A single pair; endpoints are point names or (ray, n) tuples."""
    if isinstance(x, str) and isinstance(y, str):
        return RayAtom("PP", x, y)
    if isinstance(x, str):
        r, m = y
        return RayAtom("PR", x, r, p=int(m), q=int(m))
    if isinstance(y, str):
        r, n = x
        return RayAtom("RP", r, y, n0=int(n), n1=int(n))
    (r, n), (s, m) = x, y
    return RayAtom("RR", r, s, n0=int(n), n1=int(n), p=int(m), q=int(m))


def from_rules(
    rays: Sequence[str],
    rules: Sequence[RayRule] = (),
    limits: Dict[str, str] | Sequence[Tuple[str, str]] = (),
    base_points: Sequence[str] = (),
    exceptional: Sequence[Tuple[Endpoint, Endpoint]] = (),
    limit_pairs: Sequence[Tuple[str, str]] = (),
) -> RaySystem:
    lim = tuple(dict(limits).items()) if isinstance(limits, dict) else tuple(limits)
    shell = RaySystem(tuple(rays), tuple(base_points), lim, (), tuple(rules))
    lp = set(shell.limit_points)
    for x, y in limit_pairs:
        if x not in lp or y not in lp:
            raise PreconditionError("limit pair references a point that is not a limit", witness=(x, y))
    atoms = [rule_atom(r) for r in rules]
    atoms += [pair_atom(x, y) for x, y in exceptional]
    atoms += [RayAtom("PP", x, y) for x, y in limit_pairs]
    R = replace(shell, atoms=_simplify(atoms))
    _validate(R)
    return R


def identity(R: RaySystem) -> RaySystem:
    atoms = [RayAtom("RR", r, r, a=0, b=0) for r in R.rays] + [RayAtom("PP", p, p) for p in R.points]
    return replace(R, atoms=_simplify(atoms), rules=tuple(RayRule(r, r, 0) for r in R.rays), exact=True)


def with_atoms(R: RaySystem, atoms: Iterable[RayAtom], exact: Optional[bool] = None) -> RaySystem:
    return replace(R, atoms=_simplify(list(atoms)), exact=R.exact if exact is None else exact)


# ---------------------------------------------------------------------------
# atoms


def normalize(atom: RayAtom) -> Optional[RayAtom]:
    """Tighten bounds; None when the atom holds no pair."""
    if atom.kind == "PP":
        return atom
    if atom.kind == "PR":
        p = max(atom.p, 0)
        return None if p > atom.q else replace(atom, n0=0, n1=INF, a=NINF, b=INF, p=p)
    if atom.kind == "RP":
        n0 = max(atom.n0, 0)
        return None if n0 > atom.n1 else replace(atom, n0=n0, a=NINF, b=INF, p=0, q=INF)
    n0, n1, a, b, p, q = atom.n0, atom.n1, atom.a, atom.b, atom.p, atom.q
    if a > b:
        return None
    for _ in range(8):
        new = (max(n0, 0, p - b), min(n1, q - a), max(p, 0, n0 + a), min(q, n1 + b))
        if new == (n0, n1, p, q):
            break
        n0, n1, p, q = new
    if n0 > n1 or p > q:
        return None
    if n0 == n1:
        p, q, a, b = max(p, n0 + a), min(q, n0 + b), NINF, INF
        if p > q:
            return None
    return RayAtom("RR", atom.src, atom.dst, n0, n1, a, b, p, q)


def _compose_atoms(f: RayAtom, g: RayAtom) -> Optional[RayAtom]:
    """g∘f for two atoms: f first."""
    if f.kind[1] != g.kind[0] or f.dst != g.src:
        return None
    if f.kind[1] == "P":
        if f.kind[0] == "R" and g.kind[1] == "R":
            return RayAtom("RR", f.src, g.dst, f.n0, f.n1, NINF, INF, g.p, g.q)
        if f.kind[0] == "R":
            return RayAtom("RP", f.src, g.dst, n0=f.n0, n1=f.n1)
        if g.kind[1] == "R":
            return RayAtom("PR", f.src, g.dst, p=g.p, q=g.q)
        return RayAtom("PP", f.src, g.dst)
    p, q = f.p, f.q
    m0, m1 = g.n0, g.n1
    if f.kind[0] == "P":
        lo, hi = max(p, m0), min(q, m1)
        if lo > hi:
            return None
        if g.kind[1] == "P":
            return RayAtom("PP", f.src, g.dst)
        return RayAtom("PR", f.src, g.dst, p=max(lo + g.a, g.p), q=min(hi + g.b, g.q))
    n0, n1, a, b = f.n0, f.n1, f.a, f.b
    if not (p <= q and p <= m1 and m0 <= q and m0 <= m1):
        return None
    if g.kind[1] == "P":
        return RayAtom("RP", f.src, g.dst, n0=max(n0, p - b, m0 - b), n1=min(n1, q - a, m1 - a))
    c, d, s, t = g.a, g.b, g.p, g.q
    if not (p + c <= t and m0 + c <= t and s <= q + d and s <= m1 + d and s <= t and c <= d):
        return None
    return RayAtom(
        "RR",
        f.src,
        g.dst,
        n0=max(n0, p - b, m0 - b, s - b - d),
        n1=min(n1, q - a, m1 - a, t - a - c),
        a=a + c,
        b=b + d,
        p=max(p + c, m0 + c, s),
        q=min(q + d, m1 + d, t),
    )


def _subsumes(big: RayAtom, small: RayAtom) -> bool:
    return (
        big.kind == small.kind
        and big.src == small.src
        and big.dst == small.dst
        and big.n0 <= small.n0
        and small.n1 <= big.n1
        and big.a <= small.a
        and small.b <= big.b
        and big.p <= small.p
        and small.q <= big.q
    )


def _hull(x: RayAtom, y: RayAtom) -> RayAtom:
    return RayAtom(x.kind, x.src, x.dst, min(x.n0, y.n0), max(x.n1, y.n1), min(x.a, y.a), max(x.b, y.b), min(x.p, y.p), max(x.q, y.q))


def _finite(vals: Iterable[float]) -> List[int]:
    return [int(abs(v)) for v in vals if v not in (INF, NINF)]


def _box_size(atoms: Iterable[RayAtom]) -> int:
    consts, shifts = [0], [0]
    for t in atoms:
        consts += _finite((t.n0, t.n1, t.p, t.q))
        shifts += _finite((t.a, t.b))
    return 2 * (max(consts) + max(shifts) + 1) + 4


def _atom_pairs(t: RayAtom, W: int) -> Set[Tuple[Endpoint, Endpoint]]:
    out: Set[Tuple[Endpoint, Endpoint]] = set()
    if t.kind == "PP":
        out.add((t.src, t.dst))
    elif t.kind == "PR":
        for m in range(int(t.p), int(min(t.q, W)) + 1):
            out.add((t.src, (t.dst, m)))
    elif t.kind == "RP":
        for n in range(int(t.n0), int(min(t.n1, W)) + 1):
            out.add(((t.src, n), t.dst))
    else:
        for n in range(int(t.n0), int(min(t.n1, W)) + 1):
            lo = max(n + t.a, t.p)
            hi = min(n + t.b, t.q, W)
            for m in range(int(lo), int(hi) + 1):
                out.add(((t.src, n), (t.dst, m)))
    return out


def box_pairs(atoms: Iterable[RayAtom], W: int) -> Set[Tuple[Endpoint, Endpoint]]:
    """All pairs whose ray coordinates are at most W."""
    out: Set[Tuple[Endpoint, Endpoint]] = set()
    for t in atoms:
        out |= _atom_pairs(t, W)
    return out


def _simplify(atoms: Iterable[RayAtom]) -> Tuple[RayAtom, ...]:
    norm = {a for a in (normalize(t) for t in atoms) if a is not None}
    groups: Dict[Tuple[str, str, str], List[RayAtom]] = {}
    for t in norm:
        groups.setdefault((t.kind, t.src, t.dst), []).append(t)
    out: List[RayAtom] = []
    for key in sorted(groups):
        out.extend(_merge_group(groups[key]))
    return tuple(sorted(out))


def _merge_group(items: List[RayAtom]) -> List[RayAtom]:
    cur = sorted(set(items))
    changed = True
    while changed:
        changed = False
        cur = [t for t in cur if not any(o != t and _subsumes(o, t) for o in cur)]
        for i in range(len(cur)):
            for j in range(i + 1, len(cur)):
                h = normalize(_hull(cur[i], cur[j]))
                if h is None:
                    continue
                W = _box_size((cur[i], cur[j], h))
                if box_pairs((h,), W) == box_pairs((cur[i], cur[j]), W):
                    cur = sorted(set(cur[:i] + cur[i + 1 : j] + cur[j + 1 :] + [h]))
                    changed = True
                    break
            if changed:
                break
    return cur


def same_relation(x: RaySystem | Sequence[RayAtom], y: RaySystem | Sequence[RayAtom]) -> bool:
    xa = x.atoms if isinstance(x, RaySystem) else tuple(x)
    ya = y.atoms if isinstance(y, RaySystem) else tuple(y)
    W = _box_size(tuple(xa) + tuple(ya))
    return box_pairs(xa, W) == box_pairs(ya, W)


# ---------------------------------------------------------------------------
# relation algebra


def _compose_sets(g: Sequence[RayAtom], f: Sequence[RayAtom]) -> List[RayAtom]:
    out = []
    for s in f:
        for t in g:
            c = _compose_atoms(s, t)
            if c is not None:
                out.append(c)
    return out


def _require_universe(x: RaySystem, y: RaySystem) -> None:
    if x.rays != y.rays or x.points != y.points or x.limits != y.limits:
        raise PreconditionError("ray systems live on different universes")


def compose(g: RaySystem, f: RaySystem) -> RaySystem:
    """g∘f: apply f first, then g."""
    _require_universe(g, f)
    return replace(f, atoms=_simplify(_compose_sets(g.atoms, f.atoms)), rules=(), exact=f.exact and g.exact)


def union(*systems: RaySystem) -> RaySystem:
    for s in systems[1:]:
        _require_universe(systems[0], s)
    atoms = [t for s in systems for t in s.atoms]
    return replace(systems[0], atoms=_simplify(atoms), rules=(), exact=all(s.exact for s in systems))


def inverse(R: RaySystem) -> RaySystem:
    out = []
    for t in R.atoms:
        if t.kind == "PP":
            out.append(RayAtom("PP", t.dst, t.src))
        elif t.kind == "PR":
            out.append(RayAtom("RP", t.dst, t.src, n0=t.p, n1=t.q))
        elif t.kind == "RP":
            out.append(RayAtom("PR", t.dst, t.src, p=t.n0, q=t.n1))
        else:
            out.append(RayAtom("RR", t.dst, t.src, t.p, t.q, -t.b, -t.a, t.n0, t.n1))
    return replace(R, atoms=_simplify(out), rules=())


def power(R: RaySystem, k: int) -> RaySystem:
    if k < 0:
        return power(inverse(R), -k)
    out = identity(R)
    for _ in range(k):
        out = compose(R, out)
    return out


def _cap(R: RaySystem) -> int:
    consts = [0]
    for t in R.atoms:
        consts += _finite((t.n0, t.n1, t.p, t.q, t.a, t.b))
    return 2 * len(R.rays) + max(consts)


def _widen(t: RayAtom, cap: int) -> Tuple[RayAtom, bool]:
    """Push bounds that outgrow cap to infinity; False when the result over-approximates.

    An interval that has grown past cap is opened up. A lone shift or a lower
    bound past cap can only be saturated, which loses exactness.
    """
    if t.kind == "PR":
        return (replace(t, q=INF) if t.q != INF and t.q > cap else t), True
    if t.kind == "RP":
        return (replace(t, n1=INF) if t.n1 != INF and t.n1 > cap else t), True
    if t.kind == "PP":
        return t, True
    exact = True
    a, b, n0, n1, p, q = t.a, t.b, t.n0, t.n1, t.p, t.q
    if a < b:
        if a != NINF and a < -cap:
            a = NINF
        if b != INF and b > cap:
            b = INF
    elif a != NINF and abs(a) > cap:
        a, b = (cap, INF) if a > 0 else (NINF, -cap)
        exact = False
    if n0 > cap:
        n0, exact = cap, False
    if p > cap:
        p, exact = cap, False
    if n1 != INF and n1 > cap:
        n1 = INF
    if q != INF and q > cap:
        q = INF
    return RayAtom("RR", t.src, t.dst, n0, n1, a, b, p, q), exact


def transitive_closure(R: RaySystem) -> RaySystem:
    """Least fixpoint of S ↦ R ∪ R∘S over the atom lattice, with widening at the cap."""
    base = R.atoms
    cap = _cap(R)
    cur = base
    exact = R.exact
    for i in range(MAX_ROUNDS):
        grown = list(cur) + _compose_sets(base, cur)
        widened = []
        for t in _simplify(grown):
            w, ok = _widen(t, cap)
            if not ok:
                exact = False
                log.warning("ray constant beyond cap %d saturated in %s", cap, t)
            widened.append(w)
        nxt = _simplify(widened)
        if same_relation(nxt, cur):
            log.debug("ray transitive closure stabilized after %d rounds, %d atoms", i + 1, len(nxt))
            return replace(R, atoms=nxt, rules=(), exact=exact)
        cur = nxt
    raise InvariantViolation(f"ray transitive closure did not stabilize within {MAX_ROUNDS} rounds")


# ---------------------------------------------------------------------------
# closure at the limit points


def _closure_step(R: RaySystem) -> Tuple[List[RayAtom], List[RayAtom]]:
    lim = R.limit_of
    added: List[RayAtom] = []
    missing: List[RayAtom] = []

    def need(atom: RayAtom, *rays: str) -> bool:
        if all(r in lim for r in rays):
            return True
        if atom not in missing:
            missing.append(atom)
        return False

    for t in R.atoms:
        if t.kind == "RR":
            if t.n1 == INF and t.q == INF and need(t, t.src, t.dst):
                added.append(RayAtom("PP", lim[t.src], lim[t.dst]))
            if t.n1 == INF and t.a == NINF and need(t, t.src):
                added.append(RayAtom("PR", lim[t.src], t.dst, p=t.p, q=t.q))
            if t.b == INF and t.q == INF and need(t, t.dst):
                added.append(RayAtom("RP", t.src, lim[t.dst], n0=t.n0, n1=t.n1))
        elif t.kind == "PR":
            if t.q == INF and need(t, t.dst):
                added.append(RayAtom("PP", t.src, lim[t.dst]))
        elif t.kind == "RP":
            if t.n1 == INF and need(t, t.src):
                added.append(RayAtom("PP", lim[t.src], t.dst))
    return added, missing


def closure(R: RaySystem) -> RaySystem:
    """Add the pairs at limit points forced by sequences of pairs along rays."""
    cur = R
    for _ in range(MAX_ROUNDS):
        added, _ = _closure_step(cur)
        nxt = replace(cur, atoms=_simplify(list(cur.atoms) + added))
        if same_relation(nxt, cur):
            return nxt
        cur = nxt
    raise InvariantViolation("ray closure did not stabilize")


def is_closed(R: RaySystem) -> bool:
    return same_relation(closure(R), R)


def unclosable_rules(R: RaySystem) -> List[RayAtom]:
    """Blocks whose limit pairs cannot be formed because a ray has no limit point."""
    _, missing = _closure_step(R)
    return missing


def g_relation(R: RaySystem) -> RaySystem:
    """Alternate closure and transitive closure until both are stable."""
    cur = R
    for _ in range(MAX_ROUNDS):
        nxt = transitive_closure(closure(cur))
        if same_relation(nxt, cur):
            return nxt
        cur = nxt
    raise InvariantViolation("ray G-relation did not stabilize")


def constraint_summary(R: RaySystem) -> Dict[Tuple[str, str], str]:
    """Per ray pair: EQ(c) for n' = n + c, GE(c) for n' >= n + c, or the raw blocks."""
    out: Dict[Tuple[str, str], str] = {}
    for r in R.rays:
        for s in R.rays:
            blocks = [t for t in R.atoms if t.kind == "RR" and t.src == r and t.dst == s]
            if not blocks:
                out[(r, s)] = "ABSENT"
                continue
            if len(blocks) == 1:
                t = blocks[0]
                plain = t.n1 == INF and t.q == INF and t.p <= max(t.n0 + t.a, 0)
                if plain and t.a == t.b:
                    out[(r, s)] = f"EQ({t.a})" + (f" n>={t.n0}" if t.n0 else "")
                    continue
                if plain and t.b == INF and t.a != NINF:
                    out[(r, s)] = f"GE({t.a})" + (f" n>={t.n0}" if t.n0 else "")
                    continue
            out[(r, s)] = "; ".join(_atom_text(t) for t in blocks)
    return out


def _fmt(v: float) -> str:
    return "inf" if v == INF else "-inf" if v == NINF else str(int(v))


def _atom_text(t: RayAtom) -> str:
    if t.kind == "PP":
        return f"{t.src} -> {t.dst}"
    if t.kind == "PR":
        return f"{t.src} -> ({t.dst}, {_fmt(t.p)}..{_fmt(t.q)})"
    if t.kind == "RP":
        return f"({t.src}, {_fmt(t.n0)}..{_fmt(t.n1)}) -> {t.dst}"
    return f"({t.src}, {_fmt(t.n0)}..{_fmt(t.n1)}) -> ({t.dst}, n{_off(t.a)}..n{_off(t.b)} in {_fmt(t.p)}..{_fmt(t.q)})"


def _off(v: float) -> str:
    return "+inf" if v == INF else "-inf" if v == NINF else f"{int(v):+d}"


# ---------------------------------------------------------------------------
# finite models


def _labels(R: RaySystem, N: int, interior_limits: Sequence[str]) -> Tuple[List[str], Dict[Endpoint, int], int]:
    limits = R.limit_points
    inner_limits = [p for p in limits if p in interior_limits]
    outer = [p for p in limits if p not in interior_limits]
    labels: List[str] = []
    index: Dict[Endpoint, int] = {}
    for r in R.rays:
        for n in range(N + 1):
            index[(r, n)] = len(labels)
            labels.append(f"{r},{n}")
    for p in list(R.base_points) + inner_limits:
        if p in index:
            continue
        index[p] = len(labels)
        labels.append(p)
    n_inner = len(labels)
    for p in outer:
        index[p] = len(labels)
        labels.append(p)
    return labels, index, n_inner


def _route(R: RaySystem, N: int) -> Tuple[Set[Tuple[Endpoint, Endpoint]], Dict[Tuple[str, int], str], Dict[Tuple[str, int], str]]:
    """Window pairs, with tails beyond depth N sent to the ray's limit point."""
    lim = R.limit_of
    pairs: Set[Tuple[Endpoint, Endpoint]] = set()
    esc_out: Dict[Tuple[str, int], str] = {}
    esc_in: Dict[Tuple[str, int], str] = {}
    for t in R.atoms:
        if t.kind == "PP":
            pairs.add((t.src, t.dst))
        elif t.kind == "PR":
            for m in range(int(t.p), int(min(t.q, N)) + 1):
                pairs.add((t.src, (t.dst, m)))
            if t.q > N and t.dst in lim:
                pairs.add((t.src, lim[t.dst]))
        elif t.kind == "RP":
            for n in range(int(t.n0), int(min(t.n1, N)) + 1):
                pairs.add(((t.src, n), t.dst))
            if t.n1 > N and t.src in lim:
                pairs.add((lim[t.src], t.dst))
        else:
            for n in range(int(t.n0), int(min(t.n1, N)) + 1):
                lo, hi = max(n + t.a, t.p), min(n + t.b, t.q)
                for m in range(int(lo), int(min(hi, N)) + 1):
                    pairs.add(((t.src, n), (t.dst, m)))
                if hi > N and max(lo, N + 1) <= hi:
                    if t.dst in lim:
                        pairs.add(((t.src, n), lim[t.dst]))
                    esc_out[(t.src, n)] = lim.get(t.dst, t.dst)
            if t.n1 > N:
                for m in range(int(t.p), int(min(t.q, N)) + 1):
                    n_lo = max(t.n0, N + 1, m - t.b)
                    n_hi = min(t.n1, m - t.a)
                    if n_lo <= n_hi:
                        if t.src in lim:
                            pairs.add((lim[t.src], (t.dst, m)))
                        esc_in[(t.dst, m)] = lim.get(t.src, t.src)
    return pairs, esc_out, esc_in


def materialize(R: RaySystem, N: int, interior_limits: Sequence[str] = ()) -> CompactifiedSystem:
    """Truncate at depth N; limit points not listed in interior_limits become the points at infinity."""
    if N < 1:
        raise PreconditionError("truncation depth must be >= 1", witness=N)
    labels, index, n_inner = _labels(R, N, interior_limits)
    ambient = FiniteSpace(len(labels), tuple(labels))
    pairs, esc_out, _ = _route(R, N)
    fhat = Relation.from_pairs(ambient, ((index[x], index[y]) for x, y in pairs if x in index and y in index))
    interior = PointSet(ambient, (1 << n_inner) - 1)
    frontier = sum(1 << index[(r, N)] for r in R.rays)
    out_bits = sum(1 << index[c] for c in esc_out)
    log.debug("materialized ray system at depth %d: %d points, %d pairs", N, ambient.n, fhat.size())
    return build_system(ambient, interior, fhat, proper_flag=False, boundary=frontier, escape_out=out_bits)


def window(R: RaySystem, N: int) -> WindowModel:
    """The ray points up to depth N as an open window; tails are tagged by their limit point."""
    labels, index, _ = _labels(R, N, ())
    n_win = len(R.rays) * (N + 1) + len([p for p in R.base_points if p not in R.limit_points])
    space = FiniteSpace(n_win, tuple(labels[:n_win]))
    pairs, esc_out, esc_in = _route(R, N)
    inner = [(index[x], index[y]) for x, y in pairs if x in index and y in index and index[x] < n_win and index[y] < n_win]
    f = Relation.from_pairs(space, inner)
    lim = R.limit_of
    directions: Dict[str, int] = {}
    for r in R.rays:
        directions.setdefault(lim.get(r, r), index[(r, N)])
    limit_set = set(R.limit_points)
    direction_pairs = tuple(sorted((t.src, t.dst) for t in R.atoms if t.kind == "PP" and t.src in limit_set and t.dst in limit_set))
    return WindowModel(
        interior=space,
        f=f,
        escape_out={index[c]: tag for c, tag in esc_out.items()},
        escape_in={index[c]: tag for c, tag in esc_in.items()},
        proper_flag=not esc_in,
        directions=directions,
        direction_pairs=direction_pairs,
        boundary=sum(1 << index[(r, N)] for r in R.rays),
    )


def pairs_at_depth(R: RaySystem, N: int) -> Set[Tuple[Endpoint, Endpoint]]:
    """Pairs between ray points of depth at most N and the finite points."""
    return {(x, y) for x, y in box_pairs(R.atoms, N) if _depth_ok(x, N) and _depth_ok(y, N)}


def _depth_ok(e: Endpoint, N: int) -> bool:
    return isinstance(e, str) or e[1] <= N


# ---------------------------------------------------------------------------
# serialization


def to_json(R: RaySystem) -> Dict[str, Any]:
    def enc(v: float) -> Any:
        return "inf" if v == INF else "-inf" if v == NINF else int(v)

    return {
        "rays": list(R.rays),
        "base_points": list(R.base_points),
        "limits": [[r, p] for r, p in R.limits],
        "rules": [[r.src, r.dst, r.shift, r.start] for r in R.rules],
        "atoms": [[t.kind, t.src, t.dst] + [enc(v) for v in (t.n0, t.n1, t.a, t.b, t.p, t.q)] for t in R.atoms],
        "exact": R.exact,
    }


def from_json(d: Dict[str, Any]) -> RaySystem:
    atoms = tuple(
        RayAtom(row[0], row[1], row[2], *(_num(v) for v in row[3:9])) for row in d.get("atoms", [])
    )
    rules = tuple(RayRule(s, t, int(sh), int(st)) for s, t, sh, st in d.get("rules", []))
    R = RaySystem(
        tuple(d["rays"]),
        tuple(d.get("base_points", [])),
        tuple((r, p) for r, p in d.get("limits", [])),
        _simplify(atoms) if atoms else tuple(_simplify(rule_atom(r) for r in rules)),
        rules,
        bool(d.get("exact", True)),
    )
    _validate(R)
    return R


# ---------------------------------------------------------------------------
# reference systems


def ladder_system() -> RaySystem:
    """Rays -1, 0, 1: (-1,n) -> (0,n) -> (1,n) -> (1,n+1); rays ±1 share a limit."""
    rays = ("-1", "0", "1")
    rules = [RayRule("-1", "0", 0), RayRule("0", "1", 0), RayRule("1", "1", 1)]
    return from_rules(rays, rules, {"-1": "zpm", "0": "z0", "1": "zpm"})


def rotating_system() -> RaySystem:
    """Rays -1 -> 0 -> 1 -> -1 level by level; only rays ±1 carry limits, which swap."""
    rays = ("-1", "0", "1")
    rules = [RayRule("-1", "0", 0), RayRule("0", "1", 0), RayRule("1", "-1", 0)]
    return from_rules(rays, rules, {"-1": "Lm1", "1": "L1"}, limit_pairs=[("Lm1", "L1"), ("L1", "Lm1")])


def translation_system(fibers: Sequence[str] = ("p", "q")) -> RaySystem:
    """n ↦ n + 1 on ℤ × fibers; ray y+ holds 1, 2, ... and ray y- holds 0, -1, ...

    All plus rays share the limit +inf and all minus rays share -inf.
    """
    rays: List[str] = []
    rules: List[RayRule] = []
    limits: Dict[str, str] = {}
    exceptional: List[Tuple[Endpoint, Endpoint]] = []
    for y in fibers:
        plus, minus = f"{y}+", f"{y}-"
        rays += [plus, minus]
        rules += [RayRule(plus, plus, 1), RayRule(minus, minus, -1, 1)]
        limits[plus], limits[minus] = "+inf", "-inf"
        exceptional.append(((minus, 0), (plus, 0)))
    return from_rules(rays, rules, limits, exceptional=exceptional)


def endpoint_label(e: Endpoint) -> str:
    return e if isinstance(e, str) else f"{e[0]},{e[1]}"


def atom_set(R: RaySystem) -> FrozenSet[RayAtom]:
    return frozenset(R.atoms)
