from __future__ import annotations

import sys
from pathlib import Path
from typing import List, Optional

SRC = Path(__file__).resolve().parent / "src"


def _use_checkout() -> None:
    if str(SRC) not in sys.path:
        sys.path.insert(0, str(SRC))


def _utf8_streams() -> None:
    # Windows consoles default to a legacy code page.
    for stream in (sys.stdout, sys.stderr):
        reconf = getattr(stream, "reconfigure", None)
        if callable(reconf):
            try:
                reconf(encoding="utf-8")
            except (OSError, ValueError):
                pass


def main(argv: Optional[List[str]] = None) -> int:
    """Run the reckit command line from a source checkout: python run.py run specs/ladder.spec"""
    _use_checkout()
    _utf8_streams()
    from reckit.cli import main as cli_main

    return cli_main(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
