from __future__ import annotations

import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from reckit import flowdisc as fd  # noqa: E402
from reckit import presets  # noqa: E402
from reckit import timechange as tcm  # noqa: E402
from reckit.errors import PreconditionError  # noqa: E402
from reckit.models import FlowModel, PointSet, TimeChange  # noqa: E402


def _assert(cond: bool, msg: str) -> None:
    if not cond:
        raise AssertionError(msg)


def _raises(fn, what: str) -> None:
    try:
        fn()
    except PreconditionError:
        return
    raise AssertionError(f"{what} should be rejected")


def _line():
    return presets.translation_flow(-1.0, 5.0, 0.05)


def _affine(tc_flow=None) -> TimeChange:
    return TimeChange(tc_flow or _line(), tcm.regular_fn(lambda p: 1.0 + p[:, 0]))


def test_phi_distance() -> None:
    flow = _line()
    sp = flow.grid.space()
    A = PointSet.of(sp, range(20, 40))
    far = PointSet.of(sp, range(60, 80))
    near = PointSet.of(sp, range(45, 80))
    _assert(tcm.phi_distance(flow, A, far) == 1.0, "sets two units apart are at distance 1")
    d = tcm.phi_distance(flow, A, near)
    _assert(abs(d - 0.25) <= 1e-6, f"a quarter-unit gap is crossed at 0.25, got {d}")
    _raises(lambda: tcm.phi_distance(flow, A, PointSet.of(sp, range(40, 50))), "adjacent cell sets")
    still = presets.stationary_flow(0.0, 1.0, 0.1)
    sp = still.grid.space()
    _assert(tcm.phi_distance(still, PointSet.of(sp, [0, 1]), PointSet.of(sp, [5])) == 1.0, "nothing moves")


def test_t_star() -> None:
    flow = _line()
    V = tcm.regular_fn(lambda p: np.maximum(0.0, 1.0 - p[:, 0]))
    t = tcm.t_star(flow, V, 0.0)
    _assert(abs(t - 1.0) <= 1e-6, f"orbit of 0 meets x = 1 at time 1, got {t}")
    _assert(tcm.t_star(flow, V, 2.0) == 0.0, "a point of the zero set has t* = 0")
    _assert(math.isinf(tcm.t_star(flow, tcm.regular_fn(lambda p: np.ones(len(p))), 0.0)), "V = 1 never vanishes")


def test_tbar_exponential() -> None:
    tc = _affine()
    for tau in (0.5, 1.0, 2.0):
        t = tcm.tbar(tc, tau, 0.0)
        _assert(abs(t - math.expm1(tau)) <= 1e-6, f"t̄({tau}, 0) = e^τ − 1, got {t}")
    y = tcm.psi(tc, 1.0, 0.0)
    _assert(abs(y[0] - math.expm1(1.0)) <= 1e-6, f"ψ(1, 0) = e − 1, got {y}")
    _assert(tcm.tbar(tc, 0.0, 0.3) == 0.0, "t̄(0, x) = 0")
    back = tcm.tbar(tc, -0.5, 0.0)
    _assert(abs(back + 1.0 - math.exp(-0.5)) <= 1e-6, f"reverse time change, got {back}")
    undo = tcm.tbar(tc, -1.0, y)
    _assert(abs(undo + math.expm1(1.0)) <= 1e-6, f"running back from ψ(1, 0) flips t̄, got {undo}")
    ts = [tcm.tbar(tc, tau, 0.0) for tau in np.linspace(0.0, 2.0, 9)]
    _assert(all(b > a for a, b in zip(ts, ts[1:])), "t̄ is increasing in τ")
    one_way = _affine(dataclasses.replace(_line(), reversible=False))
    _raises(lambda: tcm.tbar(one_way, -0.5, 0.0), "negative τ on a non-reversible flow")


def test_ode_trajectory() -> None:
    base = _line()
    flow = FlowModel("ode", grid=base.grid, vector_field=lambda p: np.ones_like(p), name="unit-field")
    traj = tcm.Trajectory(flow, 0.0)
    _assert(abs(traj.at(0.3)[0] - 0.3) <= 1e-12 and abs(traj.at(7.31)[0] - 7.31) <= 1e-9, "RK4 nodes follow x + t")
    t = tcm.tbar(_affine(flow), 1.0, 0.0)
    _assert(abs(t - math.expm1(1.0)) <= 1e-6, f"ode and closed form agree on t̄, got {t}")
    _raises(lambda: tcm.Trajectory(fd.suspend(presets.cycle(3), 2), 0.0), "trajectory of a combinatorial flow")


def test_cocycle() -> None:
    tc = _affine()
    worst = tcm.cocycle_battery(tc, samples=20, tau_max=1.5, seed=3)
    _assert(worst <= 1e-5, f"cocycle residual {worst}")
    _assert(tcm.cocycle_residual(tc, 0.7, -0.4, 1.0) <= 1e-5, "cocycle across a sign change")
    still = TimeChange(_line(), tcm.regular_fn(lambda p: np.abs(p[:, 0])))
    _assert(tcm.cocycle_residual(still, 0.5, 0.5, 0.0) == 0.0, "zero set gives an exact cocycle")
    _assert(tcm.tbar(still, 3.0, 0.0) == 0.0 and tcm.psi(still, 3.0, 0.0)[0] == 0.0, "zeros of V are fixed")
    rows = tcm.trajectory_table(tc, 0.0, [0.0, 1.0])
    _assert(rows[0] == {"tau": 0.0, "tbar": 0.0, "x0": 0.0}, f"first row starts at x, got {rows[0]}")
    _assert(abs(rows[1]["x0"] - math.expm1(1.0)) <= 1e-6, "table rows carry ψ")


def test_regularity_probe() -> None:
    flow = _line()
    r = tcm.regularity_probe(flow, tcm.regular_fn(lambda p: 1.0 + np.abs(p[:, 0])), 0.0, M=10.0)
    _assert(r["passed"] and r["case"] == "orbit" and r["proxy"], f"1 + |x| is regular, got {r}")
    r = tcm.regularity_probe(flow, tcm.regular_fn(lambda p: 1.0 + p[:, 0] ** 2), 0.0, M=10.0)
    _assert(not r["passed"], "1 + x² integrates to π/2")
    _assert(abs(r["value"] - math.pi / 2.0) <= 1e-3, f"accumulated value {r['value']}")

    r = tcm.regularity_probe(flow, tcm.regular_fn(lambda p: np.maximum(0.0, 1.0 - p[:, 0]) ** 2), 0.0)
    _assert(r["passed"], "quadratic zero ahead of the orbit diverges")
    r = tcm.regularity_probe(flow, tcm.regular_fn(lambda p: np.sqrt(np.maximum(0.0, 1.0 - p[:, 0]))), 0.0)
    _assert(not r["passed"] and abs(r["value"] - 2.0) <= 1e-2, f"square-root zero is reached in finite time, got {r}")
    _assert(abs(r["t"] - 1.0) <= 1e-6, "the zero is met at t* = 1")

    r = tcm.regularity_probe(flow, tcm.regular_fn(lambda p: p[:, 0] ** 2), 0.0)
    _assert(r["passed"] and r["case"] == "zero_set", f"leaving a quadratic zero diverges, got {r}")
    r = tcm.regularity_probe(flow, tcm.regular_fn(lambda p: np.sqrt(np.abs(p[:, 0]))), 0.0)
    _assert(not r["passed"] and r["case"] == "zero_set", "leaving a square-root zero converges")
    still = presets.stationary_flow(0.0, 1.0, 0.1)
    r = tcm.regularity_probe(still, tcm.regular_fn(lambda p: np.abs(p[:, 0] - 0.5)), 0.5)
    _assert(r["passed"] and r["reason"] == "orbit stays in the zero set", f"fixed zero, got {r}")


def test_build_regular_v_levels() -> None:
    flow = presets.contracting_flow(-2.025, 2.025, 0.05)
    grid = flow.grid
    sp = grid.space()
    X0 = PointSet.of(sp, [40])
    V = tcm.build_regular_v(flow, X0)
    _assert(V(np.array([[0.0]]))[0] == 0.0 and V.zero_cells == X0.bits, "V vanishes on X0")
    off = grid.centers(np.array([c for c in range(grid.n) if c != 40]))
    vals = V(off)
    _assert(np.all(vals > 0.0) and np.all(vals <= 1.0), "0 < V ≤ 1 off X0")
    eps = V.provenance["eps"]
    _assert(len(V.provenance["levels"]) >= 2, "default levels are built")
    _assert(all(b < a for a, b in zip(eps, eps[1:])), f"ε decreases, got {eps}")
    _assert(not V.proper, "bounded construction is not proper")
    rep = tcm.probe_samples(flow, V, count=20, seed=1)
    _assert(rep["passed"] == 20, f"probe fails at {rep['failed_points']}")


def test_build_regular_v_compact() -> None:
    flow = presets.translation_flow(-2.0, 2.0, 0.05)
    grid = flow.grid
    sp = grid.space()
    V = tcm.build_regular_v(flow, PointSet(sp, 0), compact=True)
    ring = grid.centers(np.array([0, grid.n - 1]))
    _assert(V.proper and np.all(V(ring) > V.bound) and V.bound > 1.0, f"ring values exceed the bound {V.bound}")
    xs = V(np.array([[0.0], [1.0], [1.5], [1.9], [1.99]]))
    _assert(xs[0] == 1.0 and np.all(np.diff(xs[1:]) > 0.0), f"V grows toward the frontier, got {xs}")
    _assert(math.isinf(V(np.array([[2.0]]))[0]), "V is infinite on the frontier")

    flat = tcm.build_regular_v(flow, PointSet(sp, 0), levels=[PointSet.everything(sp)])
    _assert(np.allclose(flat(grid.centers()), 0.25), "a single level covering everything gives V = 1/4")

    A = PointSet.of(sp, range(10))
    _raises(lambda: tcm.build_regular_v(flow, PointSet(sp, 0), levels=[A, A]), "levels without room")
    _raises(lambda: tcm.build_regular_v(flow, PointSet.of(sp, [5]), levels=[A]), "level meeting X0")
    _raises(lambda: tcm.build_regular_v(flow, PointSet(sp, 0), levels=[A]), "levels short of an empty X0")
    _raises(lambda: tcm.build_regular_v(flow, PointSet.of(sp, [0]), compact=True), "X0 on the frontier")


def test_stop_at_infinity_translation() -> None:
    flow = presets.translation_flow(-20.0, 20.0, 0.05)
    system, rep = tcm.stop_at_infinity(flow)
    _assert(system.ambient.n == flow.grid.n + 1, "one point at infinity")
    _assert(rep["ring_fixed"] and all(v <= 2.0 for v in rep["ring_displacement"].values()), f"ring drifts: {rep}")
    _assert(rep["infinity_fixed"] and rep["escapes"] == 0, "ψ keeps the window and fixes ∞")
    _assert(rep["core_cells"] > 0 and rep["reach_outside_band"] == 0, f"core reachability differs: {rep}")
    _assert(rep["quadrature_max_diff"] <= 1e-3, f"field and quadrature disagree: {rep['quadrature_max_diff']}")


def test_stop_at_infinity_other_flows() -> None:
    _, rep = tcm.stop_at_infinity(presets.expanding_flow())
    _assert(rep["ring_fixed"] and rep["reach_outside_band"] == 0, f"expanding flow: {rep}")
    _, rep = tcm.stop_at_infinity(presets.stationary_flow())
    _assert(set(rep["ring_displacement"].values()) == {0.0} and rep["reach_symdiff"] == 0, f"stationary flow: {rep}")
    one_way = dataclasses.replace(presets.translation_flow(0.0, 2.0, 0.1), reversible=False)
    _raises(lambda: tcm.stop_at_infinity(one_way), "non-reversible flow")


def main() -> None:
    tests = [
        test_phi_distance,
        test_t_star,
        test_tbar_exponential,
        test_ode_trajectory,
        test_cocycle,
        test_regularity_probe,
        test_build_regular_v_levels,
        test_build_regular_v_compact,
        test_stop_at_infinity_translation,
        test_stop_at_infinity_other_flows,
    ]
    for t in tests:
        t()
        print(f"OK  {t.__name__}")
    print(f"ALL OK ({len(tests)} tests)")


if __name__ == "__main__":
    main()
