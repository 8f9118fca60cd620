from __future__ import annotations

import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from reckit import lyap  # noqa: E402
from reckit import relcore as rc  # noqa: E402
from reckit.errors import PreconditionError  # noqa: E402
from reckit.models import FiniteSpace, LyapunovFn, PointSet, Relation, SufficientSet  # noqa: E402


def _assert(cond: bool, msg: str) -> None:
    if not cond:
        raise AssertionError(msg)


def _raises(fn, *args) -> bool:
    try:
        fn(*args)
    except PreconditionError:
        return True
    return False


def _random_relation(rng: np.random.Generator, n: int, p: float = 0.12) -> Relation:
    return Relation.from_matrix(FiniteSpace(n), rng.random((n, n)) < p)


def _chain_orbit() -> Relation:
    return rc.orbit_relation(Relation.from_pairs(FiniteSpace(3), [(0, 1), (1, 2)]))


def _expm1_window() -> Relation:
    # x ↦ eˣ − 1 on a grid of [-2, 2] with step 0.1, rounded to the nearest node
    xs = np.round(np.arange(-20, 21) / 10.0, 10)
    ys = np.expm1(xs)
    idx = [int(np.argmin(np.abs(xs - y))) for y in ys]
    return Relation.from_pairs(FiniteSpace(len(xs), coords=xs), list(enumerate(idx)))


def test_is_lyapunov() -> None:
    sp = FiniteSpace(2)
    edge = Relation.from_pairs(sp, [(0, 1)])
    _assert(lyap.is_lyapunov(LyapunovFn(sp, (Fraction(1, 3),) * 2), edge), "constant is Lyapunov")
    _assert(lyap.is_lyapunov(LyapunovFn(sp, (Fraction(0), Fraction(1))), edge), "0 → 1 is Lyapunov")
    _assert(not lyap.is_lyapunov(LyapunovFn(sp, (Fraction(1), Fraction(0))), edge), "1 → 0 is not")
    _assert(_raises(lyap.is_lyapunov, LyapunovFn(sp, (Fraction(2), Fraction(0))), edge), "range violation raises")


def test_separate() -> None:
    F = _chain_orbit()
    sp = F.space
    L = lyap.separate(F, PointSet.everything(sp), PointSet(sp, 0))
    _assert(L.values == (1, 1, 1), "A = X gives constant 1")
    L = lyap.separate(F, PointSet.of(sp, [2]), PointSet.of(sp, [0]))
    _assert(L.values == (Fraction(0), Fraction(1, 2), Fraction(1)), f"chain separator, got {L.values}")
    _assert(L.exact, "values are exact rationals")
    _assert(_raises(lyap.separate, F, PointSet.of(sp, [1]), PointSet.of(sp, [0])), "F(A) ⊄ A raises")
    _assert(_raises(lyap.separate, F, PointSet.of(sp, [2]), PointSet.of(sp, [1])), "F⁻¹(B) ⊄ B raises")

    f = _expm1_window()
    G = rc.g_relation(f)
    xs = f.space.coords[:, 0]
    one = int(np.argmin(np.abs(xs - 1.0)))
    minus = int(np.argmin(np.abs(xs + 1.0)))
    A = PointSet(f.space, G.rows[one] | (1 << one))
    B = PointSet(f.space, rc.preimage(G, PointSet.of(f.space, [minus])).bits | (1 << minus))
    L = lyap.separate(G, A, B)
    _assert(lyap.is_lyapunov(L, G) and lyap.is_lyapunov(L, f), "separator is Lyapunov for f and Gf")
    _assert(all(L[x] == 1 for x in A) and all(L[x] == 0 for x in B), "boundary values")


def test_separate_points() -> None:
    sp = FiniteSpace(2)
    L = lyap.separate_points(Relation.empty(sp), 0, 1)
    _assert(L[0] == 1 and L[1] == 0, "isolated points")
    F = _chain_orbit()
    L = lyap.separate_points(F, 2, 0)
    _assert(L[2] == 1 and L[0] == 0, "reverse pair on a chain")
    _assert(_raises(lyap.separate_points, F, 0, 2), "(a, c) ∈ Of raises")
    _assert(_raises(lyap.separate_points, F, 1, 1), "diagonal raises")
    _assert(_raises(lyap.separate_points, Relation.from_pairs(FiniteSpace(3), [(0, 1), (1, 2)]), 2, 0), "non-transitive raises")


def test_sufficient_set() -> None:
    sp = FiniteSpace(4)
    cyc = Relation.from_pairs(sp, [(0, 1), (1, 2), (2, 3), (3, 0)])
    _assert(len(lyap.sufficient_set(cyc)) == 0, "Gf = X×X needs no functions")

    # four rays -1, 0, 1 truncated at N; -1 → 0 → 1 → -1 per level, ∞-points swap
    N = 3
    labels = [f"{r},{n}" for r in (-1, 0, 1) for n in range(N + 1)] + ["-1,inf", "1,inf"]
    sp = FiniteSpace(len(labels), tuple(labels))
    pairs = []
    for n in range(N + 1):
        pairs.append((sp.index(f"-1,{n}"), sp.index(f"0,{n}")))
        pairs.append((sp.index(f"0,{n}"), sp.index(f"1,{n}")))
    f0 = Relation.from_pairs(sp, pairs)
    LS = lyap.sufficient_set(f0)
    for m in range(N + 1):
        for n in range(N + 1):
            x, y = sp.index(f"1,{m}"), sp.index(f"-1,{n}")
            _assert(any(L[x] > L[y] for L in LS), f"(1,{m}) must be separated from (-1,{n})")
    _assert(lyap.is_sufficient(LS.functions, f0), "1 ∪ Gf identity")

    rng = np.random.default_rng(41)
    for _ in range(20):
        f = _random_relation(rng, 12)
        G = rc.g_relation(f)
        for per_pair in (False, True):
            LS = lyap.sufficient_set(f, per_pair=per_pair)
            _assert(lyap.order_intersection(f.space, LS.functions) == rc.with_identity(G), "∩ ≤_L = 1 ∪ Gf")
            for L in LS:
                _assert(lyap.is_lyapunov(L, f) and lyap.is_lyapunov(L, G), "members are Lyapunov for f and Gf")
                for E in rc.recurrence_classes(f):
                    _assert(len({L[x] for x in E}) == 1, "constant on classes")
    threaded = lyap.sufficient_set(f, jobs=4)
    _assert(threaded.functions == lyap.sufficient_set(f).functions, "thread pool keeps the order")


def test_splitting_function() -> None:
    f = Relation.from_pairs(FiniteSpace(3), [(0, 1), (1, 2)])
    U, L = lyap.splitting_function(f, 1)
    _assert(U.members() == [1] and L[2] == 1 and L[0] == 0, "chain split at b")
    _assert(lyap.splitting_holds(f, U, L), "strict inequality")

    lone = Relation.empty(FiniteSpace(3))
    U, L = lyap.splitting_function(lone, 0)
    _assert(L[1] == 0 and L[2] == 0, "other points get 0")
    _assert(lyap.splitting_holds(lone, U, L), "vacuous split: sup ∅ = 0 < 1 = inf ∅")

    two = Relation.from_pairs(FiniteSpace(2), [(0, 1), (1, 0)])
    _assert(_raises(lyap.splitting_function, two, 0), "cyclic point raises")

    rng = np.random.default_rng(43)
    for _ in range(20):
        f = _random_relation(rng, 10)
        G = rc.g_relation(f)
        for x in range(10):
            if not G.contains(x, x):
                U, L = lyap.splitting_function(f, x)
                _assert(lyap.splitting_holds(f, U, L) and lyap.is_lyapunov(L, G), "split holds on random relation")


def test_complete_lyapunov() -> None:
    sp = FiniteSpace(3)
    cyc = rc.orbit_relation(Relation.from_pairs(sp, [(0, 1), (1, 2), (2, 0)]))
    L = lyap.complete_lyapunov(cyc)
    _assert(len(set(L.values)) == 1, "3-cycle is constant")
    L = lyap.complete_lyapunov(_chain_orbit())
    _assert(L.values == (Fraction(1, 4), Fraction(2, 4), Fraction(3, 4)), f"chain levels, got {L.values}")

    rng = np.random.default_rng(47)
    for _ in range(20):
        f = _random_relation(rng, 14)
        G = rc.g_relation(f)
        L = lyap.complete_lyapunov(G)
        classes = rc.condensation(G)
        _assert(lyap.is_lyapunov(L, G), "complete function is Lyapunov")
        for x, y in G.pairs():
            if classes.comp_of[x] != classes.comp_of[y]:
                _assert(L[x] < L[y], "strict across distinct classes")
        _assert(all(v.denominator <= len(classes.members) + 1 for v in L.values), "denominator bound")


def test_compact_support_lyapunov() -> None:
    sp = FiniteSpace(3)
    F = _chain_orbit()
    everything = PointSet.everything(sp)
    _assert(lyap.compact_support_lyapunov(F, everything, everything).values == (1, 1, 1), "A = U = X gives 1")

    ks = np.arange(-100, 101)
    half = Relation.from_pairs(FiniteSpace(len(ks)), [(i, int(np.trunc(k / 2)) + 100) for i, k in enumerate(ks)])
    G = rc.g_relation(half)
    A = PointSet.of(half.space, [100])
    U = PointSet.of(half.space, [i for i, k in enumerate(ks) if abs(k) <= 50])
    L = lyap.compact_support_lyapunov(G, A, U)
    _assert(L[100] == 1 and all(L[i] == 0 for i in U.complement()), "support inside U")
    _assert(lyap.is_lyapunov(L, G), "Lyapunov for Gf")

    f = _expm1_window()
    G = rc.g_relation(f)
    xs = f.space.coords[:, 0]
    zero = int(np.argmin(np.abs(xs)))
    small = PointSet.of(f.space, [i for i, x in enumerate(xs) if abs(x) <= 0.3 + 1e-9])
    L = lyap.compact_support_lyapunov(G, PointSet.of(f.space, [zero]), small)
    _assert(L[zero] == 1, "fixed point 0 has a compactly supported function")
    half_cell = int(np.argmin(np.abs(xs - 0.5)))
    _assert(_raises(lyap.compact_support_lyapunov, G, PointSet.of(f.space, [half_cell]), small), "orbit of 0.5 escapes")


def test_hull_via_lyapunov() -> None:
    F = _chain_orbit()
    sp = F.space
    LS = lyap.sufficient_set(F)
    _assert(lyap.hull_via_lyapunov(F, PointSet.everything(sp), LS) == PointSet.everything(sp), "A = X")
    _assert(lyap.hull_via_lyapunov(F, PointSet.of(sp, [1]), LS).members() == [1, 2], "chain hull of b")

    rng = np.random.default_rng(53)
    for _ in range(30):
        f = _random_relation(rng, 12)
        LS = lyap.sufficient_set(f)
        A = PointSet.of(f.space, rng.choice(12, size=int(rng.integers(0, 4)), replace=False).tolist())
        want = rc.invariant_hull(rc.g_relation(f), A)
        _assert(lyap.hull_via_lyapunov(f, A, LS) == want, "hull matches invariant hull")
        _assert(lyap.hull_via_lyapunov(f, A, SufficientSet(f.space)) == want, "separator augmentation alone suffices")


def test_smaller_relation_inherits() -> None:
    rng = np.random.default_rng(59)
    for _ in range(20):
        f2 = _random_relation(rng, 10, 0.2)
        f1 = Relation(f2.space, tuple(r & int(rng.integers(0, 1 << 10)) for r in f2.rows))
        for L in lyap.sufficient_set(f2):
            _assert(lyap.is_lyapunov(L, f1), "Lyapunov for f2 is Lyapunov for f1 ⊆ f2")
        _assert(lyap.is_lyapunov(lyap.complete_lyapunov(rc.g_relation(f2)), f1), "complete function inherits too")


def main() -> None:
    tests = [
        test_is_lyapunov,
        test_separate,
        test_separate_points,
        test_sufficient_set,
        test_splitting_function,
        test_complete_lyapunov,
        test_compact_support_lyapunov,
        test_hull_via_lyapunov,
        test_smaller_relation_inherits,
    ]
    for t in tests:
        t()
        print(f"OK  {t.__name__}")
    print(f"ALL OK ({len(tests)} tests)")


if __name__ == "__main__":
    main()
