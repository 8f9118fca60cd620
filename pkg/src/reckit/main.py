from __future__ import annotations

from reckit.cli import main


__all__ = ["main"]
