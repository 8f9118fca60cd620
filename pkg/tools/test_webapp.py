from __future__ import annotations

import json
import sys
from pathlib import Path

from fastapi.testclient import TestClient

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from reckit.webapp import EXAMPLE, create_app  # noqa: E402


def _assert(cond: bool, msg: str) -> None:
    if not cond:
        raise AssertionError(msg)


def test_index_page() -> None:
    c = TestClient(create_app())
    r = c.get("/")
    _assert(r.status_code == 200 and "text/html" in r.headers["content-type"], f"index: {r.status_code}")
    _assert("ladder.spec" in r.text and "timechange" in r.text, "golden specs and task kinds are listed")


def test_validate() -> None:
    c = TestClient(create_app())
    ok = c.post("/api/validate", json={"text": EXAMPLE}).json()
    _assert(ok["ok"] and ok["system"] == "relation", f"example validates: {ok}")
    _assert(ok["tasks"] == [{"name": "analyze", "kind": "analyze"}], f"tasks: {ok['tasks']}")
    bad = c.post("/api/validate", content=EXAMPLE.replace("kind = relation", "kind = relation\nweight = 2"))
    body = bad.json()
    _assert(bad.status_code == 200 and body["ok"] is False, f"problems are reported, not raised: {body}")
    _assert(body["line"] == 7 and body["key"] == "system.weight", f"problem is located: {body}")
    form = c.post("/api/validate", data={"text": EXAMPLE}).json()
    _assert(form["ok"], f"form field works too: {form}")
    up = c.post("/api/validate", files={"file": ("x.spec", EXAMPLE.encode("utf-8"), "text/plain")}).json()
    _assert(up["ok"], f"uploads work too: {up}")
    junk = c.post("/api/validate", content="{", headers={"content-type": "application/json"}).json()
    _assert(junk["ok"] is False and "JSON" in junk["error"], f"bad JSON: {junk}")


def test_run() -> None:
    c = TestClient(create_app())
    r = c.post("/api/run?seed=5", json={"text": EXAMPLE})
    _assert(r.status_code == 200, f"run: {r.status_code} {r.text}")
    body = r.json()
    _assert(body["ok"] and body["exit_code"] == 0, f"example runs: {body}")
    _assert("report.json" in body["files"] and "morse.dot" in body["files"], f"bundle files: {body['files']}")
    res = body["report"]["tasks"][0]["result"]
    _assert(res["recurrent"] == ["a", "b"] and res["classes"] == [["a", "b"]], f"a and b form a cycle: {res}")
    prov = json.loads((Path(body["bundle"]) / "provenance.json").read_text(encoding="utf-8"))
    _assert(prov["config"]["seed"] == 5, "query parameters override the config")
    r = c.post("/api/run", json={"text": "[system]\nkind = rays\n"})
    _assert(r.status_code == 400 and r.json()["ok"] is False, f"bad specs are refused: {r.text}")
    r = c.post("/api/run?jobs=many", json={"text": EXAMPLE})
    _assert(r.status_code == 400 and "jobs" in r.json()["error"], "query parameters are checked")


def main() -> None:
    tests = [
        test_index_page,
        test_validate,
        test_run,
    ]
    for t in tests:
        t()
        print(f"OK  {t.__name__}")
    print(f"ALL OK ({len(tests)} tests)")


if __name__ == "__main__":
    main()
