from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from reckit import compactify as cp  # noqa: E402
from reckit import lyap  # noqa: E402
from reckit import rayspace as rs  # noqa: E402
from reckit import relcore as rc  # noqa: E402
from reckit import uniform as un  # noqa: E402
from reckit.errors import PreconditionError  # noqa: E402
from reckit.models import FiniteSpace, PointSet, Relation, SufficientSet, WindowModel  # noqa: E402


def _assert(cond: bool, msg: str) -> None:
    if not cond:
        raise AssertionError(msg)


def _line_window(n: int) -> WindowModel:
    """i ↦ i + 1 on n cells, fed from the left and leaking on the right."""
    sp = FiniteSpace(n, tuple(str(i) for i in range(n)))
    f = Relation.from_pairs(sp, [(i, i + 1) for i in range(n - 1)])
    return WindowModel(sp, f, escape_out={n - 1: "+"}, escape_in={0: "-"}, directions={"+": n - 1, "-": 0})


def _halving_window(n: int) -> WindowModel:
    sp = FiniteSpace(n)
    return WindowModel(sp, Relation.from_pairs(sp, [(i, i // 2) for i in range(n)]), proper_flag=True)


def _shortcut() -> cp.CompactifiedSystem:
    """0 → 1 in X, with 1 → ∞ → 2 adding a pair of G f̂ that Gf lacks."""
    amb = FiniteSpace(4, ("0", "1", "2", "inf"))
    fhat = Relation.from_pairs(amb, [(0, 1), (1, 3), (3, 2), (3, 3)])
    return cp.build_system(amb, PointSet(amb, 0b0111), fhat)


def _ladder(*interior_limits: str) -> cp.CompactifiedSystem:
    return rs.materialize(rs.closure(rs.ladder_system()), 10, interior_limits=interior_limits)


def test_build_system_trace() -> None:
    c = _shortcut()
    _assert(c.f == Relation.from_pairs(c.interior, [(0, 1)]), "f is the trace of f̂ on X")
    _assert(c.infinity.labels() == ["inf"], "one point at infinity")
    _assert(c.to_json()["interior"] == [0, 1, 2], "JSON lists the interior")


def test_one_point() -> None:
    w = _halving_window(5)
    c = cp.one_point_compactify(w)
    _assert(set(c.fhat.pairs()) == set(w.f.pairs()) | {(5, 5)}, "no escapes: f̂ = f ∪ (∞, ∞)")
    w = _line_window(4)
    c = cp.one_point_compactify(w)
    _assert({(3, 4), (4, 0), (4, 4)} <= set(c.fhat.pairs()), "escapes are routed through ∞")
    _assert(rc.g_relation(c.fhat) == Relation.full(c.ambient), "the line window is one class through ∞")


def test_dynamic_checks() -> None:
    c = _shortcut()
    _assert(not cp.is_dynamic(c) and not cp.is_almost_dynamic(c), "∞-mediated shortcut breaks both")
    _assert(cp.infinity_witness(c, 1, 2) == 3, "the shortcut runs through ∞")
    _assert(cp.infinity_witness(c, 0, 1) is None, "pairs of Gf need no witness")
    try:
        cp.infinity_witness(c, 2, 0)
        raise AssertionError("pair outside G f̂ should be rejected")
    except PreconditionError:
        pass
    c = cp.one_point_compactify(_halving_window(6))
    _assert(cp.is_dynamic(c) and cp.is_almost_dynamic(c), "proper window one-pointed is dynamic")


def test_ladder_variants() -> None:
    X0 = _ladder()
    _assert(cp.is_dynamic(X0), "two-point compactification is dynamic")
    cls = cp.classify_classes(X0)
    _assert([(sorted(E.labels()), case) for E, case in cls] == [(["z0", "zpm"], "i")], f"class at infinity, got {cls}")
    lab = X0.ambient.index
    _assert(cp.infinity_witness(X0, lab("-1,0"), lab("1,5")) is None, "ladder pairs need no witness")

    X1 = _ladder("zpm")
    _assert(cp.infinity_labels(X1) == ["z0"], "z± moves into the space")
    _assert(cp.is_dynamic(X1), "still dynamic over X0 ∪ {z±}")
    cls = cp.classify_classes(X1)
    _assert([(sorted(E.labels()), case) for E, case in cls] == [(["z0", "zpm"], "iv")], f"anomalous class, got {cls}")
    _assert(not cp.plus_proper_check(X1), "z± maps out of the space")

    X2 = _ladder("z0")
    lab = X2.ambient.index
    _assert(X2.f == rc.restriction(X2.fhat, X2.interior_mask, X2.interior), "trace is f0 on the ladder")
    _assert(not X2.f.contains(X2.interior.index("z0"), X2.interior.index("z0")), "z0 has no self-loop")
    _assert(not cp.is_almost_dynamic(X2), "dropping z± creates a pair reaching z0 through infinity")
    _assert(cp.infinity_witness(X2, lab("0,3"), lab("z0")) == lab("zpm"), "the pair is witnessed by z±")
    try:
        cp.classify_classes(X2)
        raise AssertionError("classification needs an almost dynamic system")
    except PreconditionError:
        pass


def test_lyapunov_compactify_ladder() -> None:
    w = rs.window(rs.closure(rs.ladder_system()), 8)
    LS = lyap.sufficient_set(w.f)
    c = cp.lyapunov_compactify(w, LS)
    _assert(sorted(cp.infinity_labels(c)) == ["z0", "zpm"], "glue classes stay apart")
    lab = c.ambient.index
    at_inf = {(c.ambient.label(x), c.ambient.label(y)) for x, y in c.fhat.pairs() if x >= w.interior.n and y >= w.interior.n}
    _assert(at_inf == {("zpm", "z0"), ("z0", "zpm"), ("zpm", "zpm")}, f"dynamics at infinity: {at_inf}")
    _assert(c.fhat.contains(lab("1,8"), lab("zpm")), "ray 1 leaks to z±")
    _assert(cp.is_dynamic(c), "Lyapunov compactification of the ladder is dynamic")


def test_lyapunov_compactify_line() -> None:
    w = _line_window(9)
    c = cp.lyapunov_compactify(w, lyap.sufficient_set(w.f))
    _assert(sorted(cp.infinity_labels(c)) == ["+", "-"], "two ends of the line")
    lab = c.ambient.index
    _assert(c.fhat.contains(lab("8"), lab("+")) and c.fhat.contains(lab("-"), lab("0")), "ends routed")
    _assert(c.fhat.contains(lab("+"), lab("+")) and c.fhat.contains(lab("-"), lab("-")), "ends are fixed")
    _assert(cp.is_dynamic(c), "two-point line compactification is dynamic")
    try:
        cp.lyapunov_compactify(w, SufficientSet(w.interior, ()))
        raise AssertionError("empty set is not sufficient for a line")
    except PreconditionError:
        pass


def test_lyapunov_compactify_collapses() -> None:
    sp = FiniteSpace(3)
    cycle = Relation.from_pairs(sp, [(0, 1), (1, 2), (2, 0)])
    w = WindowModel(sp, cycle, escape_out={2: "a", 0: "b"}, escape_in={1: "a"})
    LS = lyap.sufficient_set(cycle)
    _assert(len(LS) == 0, "a single cycle needs no separators")
    c = cp.lyapunov_compactify(w, LS)
    one = cp.one_point_compactify(w)
    _assert(c.fhat.rows == one.fhat.rows, "constant Lyapunov data gives the one-point compactification")


def test_plus_proper_and_tilde() -> None:
    c = cp.one_point_compactify(_halving_window(6))
    _assert(cp.plus_proper_check(c), "no escapes means +proper")
    _assert(cp.tilde_x(c) == c.interior_mask, "∞ never enters a proper cascade")
    amb = FiniteSpace(6)
    into = Relation.from_pairs(amb, [(i, i // 2) for i in range(5)] + [(5, 4)])
    c = cp.build_system(amb, PointSet(amb, 0b11111), into)
    _assert(cp.plus_proper_check(c), "re-entry from ∞ keeps f̂(X) inside X")
    _assert(cp.tilde_x(c) == PointSet.everything(amb), "∞ falls into the window")
    _assert(not cp.plus_proper_check(_shortcut()), "an edge into ∞ is not +proper")
    try:
        cp.tilde_x(_shortcut())
        raise AssertionError("tilde_x needs f̂ to be a function")
    except PreconditionError:
        pass


def test_chain_dynamic_check() -> None:
    for c in (_ladder(), _shortcut()):
        U_X = un.discrete_family(c.interior)
        U_hat = un.discrete_family(c.ambient)
        _assert(cp.chain_dynamic_check(c, U_X, U_hat) == cp.is_dynamic(c), "discrete families reduce to is_dynamic")
    c = _shortcut()
    coarse = un.family_from_relations([Relation.full(c.interior)])
    try:
        cp.chain_dynamic_check(c, coarse, un.discrete_family(c.ambient))
        raise AssertionError("a coarser interior family should be rejected")
    except PreconditionError:
        pass


def test_audit() -> None:
    c = cp.one_point_compactify(_halving_window(8))
    rep = cp.audit(c)
    for key in ("dynamic", "almost_dynamic", "plus_proper", "powers_restrict", "nonwandering_restricts", "omega_restricts", "unrevisited_preserved", "class_traces"):
        _assert(rep[key] is True, f"audit flag {key} should hold, got {rep[key]}")
    _assert([cl["case"] for cl in rep["classes"]] == ["iii", "i"], f"fixed point in X, ∞ alone: {rep['classes']}")
    rep = cp.audit(_ladder())
    _assert(rep["dynamic"] and not rep["plus_proper"] and "powers_restrict" not in rep, "ladder leaks to infinity")
    _assert(rep["unrevisited_preserved"] and rep["class_traces"], "trace checks hold on the ladder")


def test_unrevisited_through_infinity() -> None:
    amb = FiniteSpace(2, ("a", "inf"))
    fhat = Relation.from_pairs(amb, [(0, 0), (0, 1), (1, 1), (1, 0)])
    c = cp.build_system(amb, PointSet(amb, 0b01), fhat)
    _assert(cp.is_almost_dynamic(c) and not cp.plus_proper_check(c), "a loop through ∞ that X cannot see")
    G_hat = rc.g_relation(c.fhat)
    e = PointSet(amb, 0b01)
    between = rc.image(G_hat, e).bits & rc.preimage(G_hat, e).bits & ~e.bits
    _assert(between & c.interior_mask.bits == 0, "inside X nothing lies between the fixed point and itself")
    _assert(between == 0b10, "∞ lies between the fixed point and itself")
    _assert(not cp.unrevisited_preserved(c), "the fixed point is revisited through ∞")
    rep = cp.audit(c)
    _assert(rep["unrevisited_preserved"] is False, f"audit reports the return through ∞: {rep}")
    leaking = cp.build_system(amb, PointSet(amb, 0b01), fhat, escape_out=0b01)
    _assert(cp.unrevisited_preserved(leaking), "a class on the escape edge is not compact and is skipped")


def main() -> None:
    tests = [
        test_build_system_trace,
        test_one_point,
        test_dynamic_checks,
        test_ladder_variants,
        test_lyapunov_compactify_ladder,
        test_lyapunov_compactify_line,
        test_lyapunov_compactify_collapses,
        test_plus_proper_and_tilde,
        test_chain_dynamic_check,
        test_audit,
        test_unrevisited_through_infinity,
    ]
    for t in tests:
        t()
        print(f"OK  {t.__name__}")
    print(f"ALL OK ({len(tests)} tests)")


if __name__ == "__main__":
    main()
