from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

SRC = Path(__file__).resolve().parent / "src"


def main(argv: Optional[List[str]] = None) -> int:
    """Serve the spec validator and runner from a source checkout."""
    if str(SRC) not in sys.path:
        sys.path.insert(0, str(SRC))
    p = argparse.ArgumentParser(prog="web_run", description="reckit web front end")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--log-level", default="info", choices=["critical", "error", "warning", "info", "debug"])
    args = p.parse_args(argv)

    import uvicorn

    uvicorn.run("reckit.webapp:app", host=args.host, port=args.port, log_level=args.log_level, reload=False)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
