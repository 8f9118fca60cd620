from __future__ import annotations

import json
import logging
import tempfile
import threading
from pathlib import Path
from typing import Any, Dict, Optional

import jinja2
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import HTMLResponse, JSONResponse
from starlette.datastructures import UploadFile

from reckit import __version__
from reckit.engine import EngineConfig, TASKS, run
from reckit.errors import SpecError
from reckit.specfile import SystemSpec, parse_spec
from reckit.storage import specs_dir

log = logging.getLogger(__name__)

_lock = threading.Lock()

_templates = jinja2.Environment(
    loader=jinja2.FileSystemLoader(str(Path(__file__).resolve().parent / "templates")),
    autoescape=jinja2.select_autoescape(["html"]),
)

EXAMPLE = """[space]
kind = points
points = ["a", "b", "c"]

[system]
kind = relation
edges = [["a", "b"], ["b", "a"], ["b", "c"]]

[task.analyze]
kind = analyze
"""


async def _spec_text(request: Request) -> str:
    """Spec text from a multipart upload, a form field, a JSON body or a plain body."""
    ctype = request.headers.get("content-type", "")
    if ctype.startswith("multipart/form-data") or ctype.startswith("application/x-www-form-urlencoded"):
        form = await request.form()
        item = form.get("file")
        if isinstance(item, UploadFile):
            return (await item.read()).decode("utf-8")
        return str(form.get("text") or "")
    raw = (await request.body()).decode("utf-8")
    if ctype.startswith("application/json"):
        try:
            payload = json.loads(raw)
        except ValueError:
            raise SpecError("request body is not JSON") from None
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise SpecError("JSON body needs a text field")
        return payload["text"]
    return raw


def _problem(exc: SpecError) -> Dict[str, Any]:
    return {"ok": False, "error": exc.message, "line": exc.line, "col": exc.col, "key": exc.key}


def _int_param(request: Request, name: str) -> Optional[int]:
    v = request.query_params.get(name)
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise SpecError(f"query parameter {name} must be an integer") from None


def create_app() -> FastAPI:
    app = FastAPI(title="reckit", version=__version__)

    # Allow local frontends.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=False,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.get("/", response_class=HTMLResponse)
    def index():
        d = specs_dir()
        names = sorted(p.name for p in d.glob("*.spec")) if d.is_dir() else []
        page = _templates.get_template("index.html").render(
            version=__version__, example=EXAMPLE, specs=names, kinds=list(TASKS),
        )
        return HTMLResponse(page)

    @app.post("/api/validate")
    async def validate(request: Request):
        try:
            spec = parse_spec(await _spec_text(request))
        except SpecError as exc:
            return _problem(exc)
        return {
            "ok": True,
            "error": None,
            "line": None,
            "col": None,
            "system": spec.system.get("kind"),
            "tasks": [{"name": t.name, "kind": t.kind} for t in spec.tasks],
        }

    @app.post("/api/run")
    async def run_spec(request: Request):
        try:
            spec: SystemSpec = parse_spec(await _spec_text(request))
            cfg = EngineConfig.from_spec(spec, seed=_int_param(request, "seed"), jobs=_int_param(request, "jobs"))
        except SpecError as exc:
            return JSONResponse(_problem(exc), status_code=400)
        out = Path(tempfile.mkdtemp(prefix="reckit-"))
        try:
            with _lock:
                bundle = run(spec, out, cfg)
        except SpecError as exc:
            return JSONResponse(_problem(exc), status_code=400)
        log.info("web run finished with exit code %d in %s", bundle.exit_code, out)
        return {
            "ok": bundle.exit_code == 0,
            "exit_code": bundle.exit_code,
            "bundle": str(out),
            "files": sorted(p.name for p in bundle.paths.values()),
            "report": bundle.report,
        }

    return app


app = create_app()
