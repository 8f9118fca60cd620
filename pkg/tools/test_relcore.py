from __future__ import annotations

import itertools
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from reckit import relcore as rc  # noqa: E402
from reckit.errors import PreconditionError, SpaceMismatch  # noqa: E402
from reckit.models import FiniteSpace, PointSet, Relation  # noqa: E402


def _assert(cond: bool, msg: str) -> None:
    if not cond:
        raise AssertionError(msg)


def _random_relation(rng: np.random.Generator, n: int, p: float = 0.2) -> Relation:
    return Relation.from_matrix(FiniteSpace(n), rng.random((n, n)) < p)


def _pairs(f: Relation) -> set:
    return set(f.pairs())


def _brute_compose(g: set, f: set) -> set:
    return {(x, z) for (x, y) in f for (y2, z) in g if y == y2}


def _brute_orbit(f: set) -> set:
    acc = set(f)
    cur = set(f)
    while True:
        cur = _brute_compose(f, cur)
        if cur <= acc:
            return acc
        acc |= cur


def _chain(n: int = 3) -> Relation:
    return Relation.from_pairs(FiniteSpace(n), [(i, i + 1) for i in range(n - 1)])


def _cycle(n: int = 3) -> Relation:
    return Relation.from_pairs(FiniteSpace(n), [(i, (i + 1) % n) for i in range(n)])


def _rotating_truncated(N: int = 3):
    # points (r, n) for r in -1, 0, 1 and n <= N, plus (-1, inf) and (1, inf)
    labels = [f"{r},{n}" for r in (-1, 0, 1) for n in range(N + 1)] + ["-1,inf", "1,inf"]
    sp = FiniteSpace(len(labels), tuple(labels))
    pairs = []
    for n in range(N + 1):
        pairs.append((sp.index(f"-1,{n}"), sp.index(f"0,{n}")))
        pairs.append((sp.index(f"0,{n}"), sp.index(f"1,{n}")))
        pairs.append((sp.index(f"1,{n}"), sp.index(f"-1,{n}")))
    pairs.append((sp.index("-1,inf"), sp.index("1,inf")))
    pairs.append((sp.index("1,inf"), sp.index("-1,inf")))
    return sp, Relation.from_pairs(sp, pairs)


def test_compose_identity_and_brute_force() -> None:
    rng = np.random.default_rng(7)
    for _ in range(30):
        f = _random_relation(rng, 8)
        g = _random_relation(rng, 8)
        _assert(rc.compose(Relation.identity(f.space), f) == f, "1∘f should be f")
        _assert(_pairs(rc.compose(g, f)) == _brute_compose(_pairs(g), _pairs(f)), "compose mismatch vs brute force")
        lhs = rc.inverse(rc.compose(g, f))
        rhs = rc.compose(rc.inverse(f), rc.inverse(g))
        _assert(lhs == rhs, "(g∘f)⁻¹ should be f⁻¹∘g⁻¹")


def test_compose_truncated_example_cycle() -> None:
    sp, g = _rotating_truncated(3)
    g2 = rc.compose(g, g)
    for n in range(4):
        _assert(g2.contains(sp.index(f"-1,{n}"), sp.index(f"1,{n}")), f"g∘g should send (-1,{n}) to (1,{n})")
    _assert(g2.contains(sp.index("-1,inf"), sp.index("-1,inf")), "g∘g fixes (-1,inf)")
    _assert(not g2.contains(sp.index("-1,inf"), sp.index("1,inf")), "g∘g lacks the limit pair")


def test_compose_space_mismatch() -> None:
    try:
        rc.compose(_chain(3), _chain(4))
    except SpaceMismatch:
        return
    raise AssertionError("expected SpaceMismatch")


def test_inverse() -> None:
    rng = np.random.default_rng(11)
    ident = Relation.identity(FiniteSpace(5))
    _assert(rc.inverse(ident) == ident, "inverse of identity")
    for _ in range(20):
        f = _random_relation(rng, 9)
        _assert(_pairs(rc.inverse(f)) == {(y, x) for x, y in f.pairs()}, "inverse mirror")
        _assert(rc.inverse(rc.inverse(f)) == f, "inverse is an involution")


def test_orbit_relation_examples_and_oracle() -> None:
    _assert(rc.orbit_relation(_cycle(3)) == Relation.full(FiniteSpace(3)), "3-cycle saturates")
    _assert(_pairs(rc.orbit_relation(_chain(3))) == {(0, 1), (1, 2), (0, 2)}, "chain orbit")
    rng = np.random.default_rng(3)
    for _ in range(40):
        f = _random_relation(rng, 10, 0.15)
        _assert(_pairs(rc.orbit_relation(f)) == _brute_orbit(_pairs(f)), "orbit vs iterate-union oracle")
        _assert(rc.g_relation(f) == rc.orbit_relation(f), "g_relation equals orbit_relation")


def test_orbit_relation_minimal() -> None:
    rng = np.random.default_rng(5)
    for _ in range(15):
        f = _random_relation(rng, 6, 0.25)
        O = rc.orbit_relation(f)
        _assert(rc.is_transitive(O) and rc.is_subset(f, O), "orbit relation is transitive and contains f")
        for x, y in list(O.pairs()):
            smaller = rc.difference(O, Relation.from_pairs(f.space, [(x, y)]))
            _assert(not (rc.is_transitive(smaller) and rc.is_subset(f, smaller)), "orbit relation is minimal")


def test_cyclic_set_and_classes() -> None:
    sp = FiniteSpace(4)
    _assert(rc.cyclic_set(Relation.identity(sp)).bits == sp.all_bits, "identity is all cyclic")
    _assert(rc.cyclic_set(rc.orbit_relation(_cycle(3))).members() == [0, 1, 2], "periodic points")
    rng = np.random.default_rng(9)
    for _ in range(20):
        f = _random_relation(rng, 9)
        _assert(rc.cyclic_set(f) == rc.cyclic_set(rc.intersection(f, rc.inverse(f))), "|f| = |f ∩ f⁻¹|")
        G = rc.g_relation(f)
        eq = rc.with_identity(rc.intersection(G, rc.inverse(G)))
        _assert(rc.is_equivalence(eq), "1 ∪ [Gf ∩ Gf⁻¹] is an equivalence")
        classes = rc.recurrence_classes(f)
        covered = 0
        for c in classes:
            _assert(covered & c.bits == 0, "classes are disjoint")
            covered |= c.bits
            x = c.members()[0]
            _assert(rc.image(eq, PointSet.of(f.space, [x])).bits == c.bits, "class equals equivalence class")
        _assert(covered == rc.cyclic_set(G).bits, "classes partition |Gf|")


def test_restriction() -> None:
    f = _cycle(4)
    _assert(rc.restriction(f, PointSet.everything(f.space)).rows == f.rows, "restriction to X")
    rng = np.random.default_rng(13)
    for _ in range(20):
        g = _random_relation(rng, 9, 0.3)
        keep = [i for i in range(9) if rng.random() < 0.5]
        D = PointSet.of(g.space, keep)
        r = rc.restriction(g, D)
        expect = {(keep.index(x), keep.index(y)) for x, y in g.pairs() if x in keep and y in keep}
        _assert(_pairs(r) == expect, "restriction vs filter oracle")
        _assert(list(r.space.labels) == [str(i) for i in keep], "restriction keeps original labels")
        if keep:
            _assert(rc.lift((1 << len(keep)) - 1, D) == D, "lifting the whole subspace gives D back")


def test_unrevisited_hull() -> None:
    sp = FiniteSpace(3)
    ident = Relation.identity(sp)
    A = PointSet.of(sp, [0, 2])
    _assert(rc.unrevisited_hull(ident, A) == A, "hull over identity")
    F = rc.with_identity(rc.orbit_relation(_chain(3)))
    _assert(rc.unrevisited_hull(F, A).members() == [0, 1, 2], "hull fills the point between")
    _assert(not rc.is_unrevisited(_chain(3), A), "{a, c} is revisited")
    _assert(rc.is_unrevisited(_chain(3), PointSet.everything(sp)), "X is unrevisited")
    rng = np.random.default_rng(17)
    for _ in range(20):
        Fr = rc.with_identity(rc.orbit_relation(_random_relation(rng, 8)))
        B = PointSet.of(Fr.space, [i for i in range(8) if rng.random() < 0.3])
        h = rc.unrevisited_hull(Fr, B)
        _assert(B.is_subset(h), "hull contains A")
        _assert(rc.unrevisited_hull(Fr, h) == h, "hull is idempotent")
        _assert(rc.is_unrevisited(Fr, h), "hull is unrevisited")
    try:
        rc.unrevisited_hull(_chain(3), A)
    except PreconditionError as e:
        _assert(e.witness == (0, 0), "witness names the missing diagonal pair")
    else:
        raise AssertionError("expected PreconditionError")


def test_invariant_hull() -> None:
    sp = FiniteSpace(4)
    A = PointSet.of(sp, [1])
    _assert(rc.invariant_hull(Relation.identity(sp), A) == A, "identity hull")
    rng = np.random.default_rng(19)
    for _ in range(20):
        f = _random_relation(rng, 10, 0.12)
        B = PointSet.of(f.space, [int(rng.integers(10))])
        h = rc.invariant_hull(f, B)
        expect = set(B.members())
        frontier = set(expect)
        while frontier:
            frontier = {y for x, y in f.pairs() if x in frontier} - expect
            expect |= frontier
        _assert(set(h.members()) == expect, "hull vs breadth-first saturation")
        fh = rc.invariant_hull(f, rc.image(f, B))
        _assert(h == B.union(fh), "[[A]] = A ∪ [[f(A)]]")


def test_omega_limit_and_relation() -> None:
    sp = FiniteSpace(2)
    f = Relation.from_pairs(sp, [(0, 0), (1, 0)])
    _assert(rc.omega_limit(f, 1).members() == [0], "ω of a point falling onto a fixed point")
    _assert(rc.omega_relation(_cycle(3)) == Relation.full(FiniteSpace(3)), "Ω of a 3-cycle")
    _assert(rc.omega_relation(_chain(4)).is_empty(), "Ω of a chain is empty")
    rng = np.random.default_rng(23)
    for _ in range(25):
        g = _random_relation(rng, 7, 0.2)
        # brute force: tail unions of iterates up to a stabilizing depth
        n = g.n
        powers = [rc.power(g, i) for i in range(1, 3 * n * n + 2)]
        tail = powers[-1]
        for P in powers[-(2 * n * n):]:
            tail = rc.union(tail, P)
        _assert(rc.omega_relation(g) == tail, "Ω vs late tail union")
        _assert(rc.nonwandering_relation(g) == rc.union(rc.orbit_relation(g), tail), "N = O ∪ Ω")


def test_omega_g() -> None:
    sp = FiniteSpace(3)
    _assert(rc.omega_g(Relation.identity(sp)) == Relation.identity(sp), "ΩG of identity")
    _assert(rc.omega_g(_chain(3)).is_empty(), "ΩG of a chain is empty")


def test_power() -> None:
    c = _cycle(3)
    _assert(rc.power(c, 3) == Relation.identity(c.space), "3-cycle cubed is identity")
    _assert(rc.power(c, 0) == Relation.identity(c.space), "zeroth power")
    _assert(rc.power(c, -1) == rc.inverse(c), "negative power")


def test_serialization() -> None:
    rng = np.random.default_rng(29)
    f = _random_relation(rng, 12, 0.3)
    _assert(Relation.from_edge_text(f.space, f.to_edge_text()) == f, "edge text round trip")
    _assert(Relation.from_json(f.to_json()) == f, "json round trip")
    lines = f.to_edge_text().splitlines()
    _assert(lines == sorted(lines, key=lambda s: tuple(map(int, s.split()))), "edge text is sorted")


def test_small_exhaustive_identities() -> None:
    # Every relation on 3 points.
    sp = FiniteSpace(3)
    for bits in itertools.product([0, 1], repeat=9):
        f = Relation.from_matrix(sp, np.array(bits, dtype=bool).reshape(3, 3))
        G = rc.g_relation(f)
        _assert(G == rc.union(f, rc.compose(G, f)), "Gf = f ∪ Gf∘f")
        _assert(rc.g_relation(rc.inverse(f)) == rc.inverse(G), "G(f⁻¹) = (Gf)⁻¹")


def main() -> None:
    tests = [
        test_compose_identity_and_brute_force,
        test_compose_truncated_example_cycle,
        test_compose_space_mismatch,
        test_inverse,
        test_orbit_relation_examples_and_oracle,
        test_orbit_relation_minimal,
        test_cyclic_set_and_classes,
        test_restriction,
        test_unrevisited_hull,
        test_invariant_hull,
        test_omega_limit_and_relation,
        test_omega_g,
        test_power,
        test_serialization,
        test_small_exhaustive_identities,
    ]
    for t in tests:
        t()
        print(f"OK  {t.__name__}")
    print(f"ALL OK ({len(tests)} tests)")


if __name__ == "__main__":
    main()
