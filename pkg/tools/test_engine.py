from __future__ import annotations

import contextlib
import csv
import io
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from reckit import cli  # noqa: E402
from reckit import presets  # noqa: E402
from reckit.engine import EngineConfig, run  # noqa: E402
from reckit.specfile import load_spec, parse_spec  # noqa: E402
from reckit.storage import load_report, specs_dir  # noqa: E402


def _assert(cond: bool, msg: str) -> None:
    if not cond:
        raise AssertionError(msg)


def _golden(name: str, out=None, **cfg):
    spec = load_spec(specs_dir() / name)
    return run(spec, out, EngineConfig.from_spec(spec, **cfg))


def _result(bundle, task: str):
    entry = next(e for e in bundle.report["tasks"] if e["name"] == task)
    _assert(entry["status"] == "ok", f"task {task} failed: {entry}")
    return entry["result"]


def test_ladder() -> None:
    b = _golden("ladder.spec")
    _assert(b.exit_code == 0, f"ladder runs cleanly: {b.report}")
    comp = _result(b, "compactify")
    _assert(comp["dynamic"] is True, f"two-point ladder compactification is dynamic: {comp}")
    classes = [(c["case"], sorted(c["members"])) for c in comp["classes"]]
    _assert(classes == [("i", ["z0", "zpm"])], f"one class, at infinity: {classes}")
    cls = _result(b, "classify")
    _assert(cls["counts"] == {"i": 1, "ii": 0, "iii": 0, "iv": 0}, f"class counts: {cls['counts']}")
    _assert(_result(b, "structure")["recurrent"] == [], "the ladder itself has no recurrence")
    lyap = _result(b, "lyapunov")
    _assert(lyap["monotone"] and lyap["strict_on_transient"], f"complete Lyapunov function: {lyap}")
    _assert("shape=doublecircle" in b.dot and "z0" in b.dot, f"the class at infinity is marked:\n{b.dot}")


def test_ladder_without_z0_fails_classification() -> None:
    b = _golden("ladder_z0.spec")
    status = {e["name"]: e["status"] for e in b.report["tasks"]}
    _assert(status == {"compactify": "ok", "classify": "failed"}, f"statuses: {status}")
    _assert(b.exit_code == 3 and b.report["exit_code"] == 3, "a refused precondition exits with 3")
    failed = b.report["tasks"][1]
    _assert("almost dynamic" in failed["error"] and failed["exit_code"] == 3, f"failure is recorded: {failed}")
    _assert(_result(b, "compactify")["almost_dynamic"] is False, "the audit sees why")


def test_disc_chain_components() -> None:
    b = _golden("disc.spec")
    _assert(b.exit_code == 0, f"disc runs cleanly: {b.report['tasks']}")
    h = 0.02
    centers = presets.disc_flow(h=h, centered=True).grid.centers()
    chain = _result(b, "chain")
    comps = chain["components"]
    _assert(len(comps) == 2, f"origin and unit circle: {[c['size'] for c in comps]}")
    _assert(not chain["chain_transitive"], "the disc is not chain transitive")
    radii = [np.hypot(*centers[[int(x) for x in c["members"]]].T) for c in comps]
    origin = next(i for i, r in enumerate(radii) if r.min() < h / 2)
    ring = comps[1 - origin]
    _assert(radii[origin].max() <= 3 * h, f"origin block stays within 3h: {radii[origin].max()}")
    _assert(np.all(np.abs(radii[1 - origin] - 1.0) <= 3 * h), "ring block stays within 3h of the circle")
    _assert(ring["fixed"] > 0 and ring["g_fixed_is_identity"], f"fixed cells carry the identity: {ring['fixed']}")
    _assert(ring["chain_fixed_full"], "the fixed cells are one chain class around the circle")
    _assert(ring["angular_gap"] < 0.25, f"fixed cells go all the way round: gap {ring['angular_gap']}")
    _assert(chain["chain_recurrent"] == sum(c["size"] for c in comps), "every chain recurrent cell is in a component")
    lyap = _result(b, "lyapunov")
    _assert(lyap["relation"] == "chain" and lyap["monotone"] and lyap["strict_on_transient"], f"Lyapunov function: {lyap}")
    _assert(lyap["levels"] >= 3, "distinct levels on the two components and in between")
    _assert(lyap["sufficient_functions"] == 0, "sufficient set skipped on request")


def test_expanding_map() -> None:
    b = _golden("expanding_map.spec")
    _assert(b.exit_code == 0, f"expanding map runs cleanly: {b.report['tasks']}")
    comp = _result(b, "compactify")
    _assert(comp["points"] == 401 and comp["g_hat_pairs"] == 401 ** 2, f"G of the compactification is everything: {comp}")
    structure = _result(b, "structure")
    rec = [int(x) for x in structure["recurrent"]]
    centers = [-4.0 + 0.02 * (k + 0.5) for k in rec]
    _assert(rec and all(abs(c) <= 0.3 for c in centers), f"recurrence stays next to 0: {centers}")
    refined = structure["refined"]
    kept = {int(x) for x in refined["recurrent"]}
    _assert(refined["rounds"] == 8, f"all refinement rounds ran: {refined}")
    _assert({199, 200} <= kept <= {198, 199, 200, 201}, f"refined recurrence is within a cell of 0: {sorted(kept)}")


def test_gradient_cos_attractors() -> None:
    b = _golden("gradient_cos.spec")
    _assert(b.exit_code == 0, f"gradient flow runs cleanly: {b.report['tasks']}")
    want = {
        "zero": set(range(298, 302)),
        "zero_one": set(range(298, 302)) | set(range(398, 402)),
        "pm_one": set(range(198, 202)) | set(range(398, 402)),
    }
    for task, near in want.items():
        A = {int(x) for x in _result(b, task)["inward"]["attractor"]}
        _assert(A and A <= near, f"{task}: attractor {sorted(A)} lies beside the sinks")
    pair = {int(x) for x in _result(b, "zero_one")["inward"]["attractor"]}
    _assert(any(x < 350 for x in pair) and any(x > 350 for x in pair), "both sinks survive")


def test_translation_time_change() -> None:
    b = _golden("translation.spec")
    _assert(b.exit_code == 0, f"translation runs cleanly: {b.report['tasks']}")
    rows = b.trajectory_rows
    _assert([r["tau"] for r in rows] == [0.5, 1.0, 2.0], f"one row per tau: {rows}")
    for r in rows:
        _assert(abs(r["tbar"] - math.expm1(r["tau"])) <= 1e-5, f"tbar = e^tau - 1: {r}")
        _assert(abs(r["x0"] - math.expm1(r["tau"])) <= 1e-5, f"unit speed carries x along: {r}")
    clock = _result(b, "clock")
    _assert(clock["cocycle_residual"] <= 1e-4 and "probe" not in clock, f"clock: {clock}")
    _assert(_result(b, "parallel")["verdict"] == "parallelizable-consistent", "translation is parallelizable")


def test_bundle_files() -> None:
    with tempfile.TemporaryDirectory() as td:
        out = Path(td) / "cycle"
        b = _golden("cycle.spec", out)
        _assert(b.exit_code == 0, f"cycle runs cleanly: {b.report['tasks']}")
        names = sorted(p.name for p in out.iterdir())
        _assert(names == ["lyapunov.csv", "morse.dot", "provenance.json", "report.json", "structure.edges"], f"bundle: {names}")
        raw = (out / "lyapunov.csv").read_bytes()
        _assert(raw.startswith(b"task,point,label,num,den,value\r\n"), f"CSV header: {raw[:60]!r}")
        with open(out / "lyapunov.csv", encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        _assert({r["label"] for r in rows} == {"a", "b", "c", "d"}, "one row per point")
        vals = {r["label"]: float(r["value"]) for r in rows}
        _assert(vals["d"] < vals["a"] == vals["b"] == vals["c"], f"the tail sits below the cycle: {vals}")
        rep = load_report(out)
        _assert(rep == b.report, "report.json holds the report")
        struct = _result(b, "structure")
        _assert(struct["recurrent"] == ["a", "b", "c"] and struct["classes"] == [["a", "b", "c"]], f"cycle: {struct}")
        susp = _result(b, "suspend")
        _assert([s["slices"] for s in susp["suspensions"]] == [1, 2, 4] and susp["failures"] == 0, f"suspensions: {susp}")
        prov = b.provenance
        _assert(len(prov["spec_sha256"]) == 64 and prov["tasks"][1]["module"] == "lyap", f"provenance: {prov}")
        _assert("generated_at" in prov and "generated_at" not in rep, "timestamps stay out of the report")
        edges = (out / "structure.edges").read_text(encoding="utf-8")
        _assert("3 0" in edges.splitlines(), f"edge list by point index: {edges!r}")


def test_deterministic_reports() -> None:
    with tempfile.TemporaryDirectory() as td:
        a = _golden("cycle.spec", Path(td) / "a")
        b = _golden("cycle.spec", Path(td) / "b", jobs=3)
        ra = (Path(td) / "a" / "report.json").read_bytes()
        rb = (Path(td) / "b" / "report.json").read_bytes()
        _assert(ra == rb, "reruns and parallel task runs give byte-identical reports")
        _assert(a.dot == b.dot and a.lyapunov_rows == b.lyapunov_rows, "side outputs match as well")


def test_empty_and_failing_specs() -> None:
    text = '[space]\nkind = points\npoints = ["a"]\n\n[system]\nkind = relation\nedges = [["a", "a"]]\n'
    b = run(parse_spec(text))
    _assert(b.exit_code == 0 and b.report["tasks"] == [], f"no tasks, nothing to do: {b.report}")
    _assert(b.dot == "digraph morse {\n  node [shape=circle];\n}\n", f"empty Morse graph: {b.dot!r}")
    bad = parse_spec(text + "\n[task.t]\nkind = timechange\n")
    b = run(bad)
    entry = b.report["tasks"][0]
    _assert(entry["status"] == "failed" and entry["exit_code"] == 3 and b.exit_code == 3, f"flow task on a relation: {entry}")
    ok = parse_spec(text + "\n[task.a]\nkind = analyze\n\n[task.t]\nkind = flow\n")
    b = run(ok)
    _assert([e["status"] for e in b.report["tasks"]] == ["ok", "failed"], "one failure does not stop other tasks")
    _assert(_result(b, "a")["recurrent"] == ["a"], "the fixed point recurs")


def test_command_line() -> None:
    with tempfile.TemporaryDirectory() as td:
        good = specs_dir() / "cycle.spec"
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli.main(["validate", str(good)])
        _assert(code == 0 and buf.getvalue().startswith("ok: relation, 3 task(s)"), f"validate: {buf.getvalue()!r}")
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli.main(["dump", str(good)])
        _assert(code == 0 and parse_spec(buf.getvalue()) == load_spec(good), "dump prints the canonical spec")
        bad = Path(td) / "bad.spec"
        bad.write_text("[space]\nkind = cloud\n", encoding="utf-8")
        err = io.StringIO()
        with contextlib.redirect_stderr(err):
            code = cli.main(["validate", str(bad)])
        _assert(code == 2 and "line 2, col 1" in err.getvalue(), f"spec errors exit with 2: {err.getvalue()!r}")
        with contextlib.redirect_stderr(io.StringIO()):
            _assert(cli.main(["run", str(Path(td) / "missing.spec")]) == 2, "a missing spec is a spec error")
        out = Path(td) / "z0"
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli.main(["run", str(specs_dir() / "ladder_z0.spec"), "--out", str(out)])
        _assert(code == 3 and (out / "report.json").is_file(), f"run exits with the worst task code: {buf.getvalue()}")
        _assert("failed" in buf.getvalue() and f"bundle: {out}" in buf.getvalue(), buf.getvalue())


def main() -> None:
    tests = [
        test_ladder,
        test_ladder_without_z0_fails_classification,
        test_disc_chain_components,
        test_expanding_map,
        test_gradient_cos_attractors,
        test_translation_time_change,
        test_bundle_files,
        test_deterministic_reports,
        test_empty_and_failing_specs,
        test_command_line,
    ]
    for t in tests:
        t()
        print(f"OK  {t.__name__}")
    print(f"ALL OK ({len(tests)} tests)")


if __name__ == "__main__":
    main()
