from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from reckit import __version__
from reckit.engine import EngineConfig, run
from reckit.errors import SpecError, exit_code_of
from reckit.specfile import dump_spec, load_spec
from reckit.storage import default_out_dir

log = logging.getLogger(__name__)

_LEVELS = {0: logging.WARNING, 1: logging.INFO}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reckit", description="Recurrence structure and compactifications of finite dynamical models.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug detail")
    p.add_argument("--version", action="version", version=f"reckit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every task of a spec and write a report bundle")
    r.add_argument("spec", type=Path)
    r.add_argument("--out", type=Path, default=None, help="bundle directory (default: runs/<spec name>)")
    r.add_argument("--jobs", type=int, default=None, help="worker threads; overrides [config] jobs")
    r.add_argument("--seed", type=int, default=None, help="overrides [config] seed")

    v = sub.add_parser("validate", help="parse a spec and report the first problem")
    v.add_argument("spec", type=Path)

    d = sub.add_parser("dump", help="print the canonical form of a spec")
    d.add_argument("spec", type=Path)
    return p


def _load(path: Path):
    if not path.is_file():
        raise SpecError(f"spec file not found: {path}")
    return load_spec(path)


def _cmd_run(args: argparse.Namespace) -> int:
    spec = _load(args.spec)
    cfg = EngineConfig.from_spec(spec, seed=args.seed, jobs=args.jobs)
    out = args.out or default_out_dir(args.spec)
    bundle = run(spec, out, cfg)
    for entry in bundle.report["tasks"]:
        status = entry["status"]
        tail = f": {entry['error']}" if status == "failed" else ""
        print(f"{entry['name']:<20} {entry['kind']:<12} {status}{tail}")
    print(f"bundle: {out}")
    return bundle.exit_code


def _cmd_validate(args: argparse.Namespace) -> int:
    spec = _load(args.spec)
    print(f"ok: {spec.system.get('kind', 'no system')}, {len(spec.tasks)} task(s)")
    return 0


def _cmd_dump(args: argparse.Namespace) -> int:
    sys.stdout.write(dump_spec(_load(args.spec)))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=_LEVELS.get(args.verbose, logging.DEBUG),
        format="%(levelname)s %(name)s: %(message)s",
    )
    handler = {"run": _cmd_run, "validate": _cmd_validate, "dump": _cmd_dump}[args.command]
    try:
        return handler(args)
    except SpecError as exc:
        print(f"{args.spec}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_of(exc)
