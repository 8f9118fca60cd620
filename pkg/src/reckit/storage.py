from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict

from reckit.reporting import LYAPUNOV_COLUMNS, csv_text, json_text

log = logging.getLogger(__name__)

REPORT = "report.json"
PROVENANCE = "provenance.json"
MORSE = "morse.dot"
LYAPUNOV = "lyapunov.csv"
TRAJECTORY = "trajectory.csv"


def project_root() -> Path:
    # .../src/reckit/storage.py -> parents[2] is the checkout
    return Path(__file__).resolve().parents[2]


def runs_dir() -> Path:
    p = project_root() / "runs"
    p.mkdir(parents=True, exist_ok=True)
    return p


def default_out_dir(spec_path: Path) -> Path:
    return runs_dir() / Path(spec_path).stem


def specs_dir() -> Path:
    return project_root() / "specs"


def write_text(p: Path, text: str) -> None:
    # newline="" keeps the CRLF rows of CSV files intact
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def write_bundle(bundle: Any, out_dir: Path) -> Dict[str, Path]:
    """Write every bundle file under out_dir and return the paths by role."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / REPORT,
        "provenance": out / PROVENANCE,
        "morse": out / MORSE,
        "lyapunov": out / LYAPUNOV,
    }
    write_text(paths["report"], json_text(bundle.report))
    write_text(paths["provenance"], json_text(bundle.provenance))
    write_text(paths["morse"], bundle.dot)
    write_text(paths["lyapunov"], csv_text(bundle.lyapunov_rows, LYAPUNOV_COLUMNS))
    if bundle.trajectory_rows:
        columns = list(dict.fromkeys(k for r in bundle.trajectory_rows for k in r))
        paths["trajectory"] = out / TRAJECTORY
        write_text(paths["trajectory"], csv_text(bundle.trajectory_rows, columns))
    for name, text in bundle.edges.items():
        paths[f"edges:{name}"] = out / f"{name}.edges"
        write_text(paths[f"edges:{name}"], text)
    log.info("bundle written to %s (%d files)", out, len(paths))
    return paths


def load_report(out_dir: Path) -> Dict[str, Any]:
    return json.loads((Path(out_dir) / REPORT).read_text(encoding="utf-8"))
