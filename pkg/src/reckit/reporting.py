from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from reckit import relcore as rc
from reckit.models import PointSet, Relation

LABEL_LIMIT = 6

LYAPUNOV_COLUMNS = ["task", "point", "label", "num", "den", "value"]


def plain(obj: Any) -> Any:
    """JSON-safe copy: non-finite floats become strings, numpy scalars become Python ones."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    if isinstance(obj, PointSet):
        return obj.labels()
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, Path):
        return str(obj)
    return obj


def json_text(obj: Any) -> str:
    return json.dumps(plain(obj), ensure_ascii=False, indent=2) + "\n"


def csv_text(rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
    """RFC-4180 text: CRLF line ends, minimal quoting."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: plain(v) for k, v in r.items()})
    return buf.getvalue()


def lyapunov_rows(task: str, L: Any) -> List[Dict[str, Any]]:
    out = []
    for r in L.to_rows():
        out.append({"task": task, **r, "value": repr(r["num"] / r["den"])})
    return out


# ---------------------------------------------------------------------------
# Morse graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MorseNode:
    members: Tuple[str, ...]
    at_infinity: bool

    @property
    def label(self) -> str:
        head = ", ".join(self.members[:LABEL_LIMIT])
        extra = len(self.members) - LABEL_LIMIT
        return f"{head}, +{extra}" if extra > 0 else head


def morse_graph(f: Relation, infinity: int = 0) -> Tuple[List[MorseNode], List[Tuple[int, int]]]:
    """Recurrence classes of f and the Gf order between them, transitively reduced."""
    G = rc.g_relation(f)
    classes = rc.recurrence_classes(f)
    reps = [(E.bits & -E.bits).bit_length() - 1 for E in classes]
    nodes = [MorseNode(tuple(E.labels()), bool(E.bits & infinity)) for E in classes]
    g = nx.DiGraph()
    g.add_nodes_from(range(len(classes)))
    for a, x in enumerate(reps):
        for b, E in enumerate(classes):
            if a != b and G.rows[x] & E.bits:
                g.add_edge(a, b)
    if g.number_of_edges():
        g = nx.transitive_reduction(g)
    return nodes, sorted(g.edges())


def _dot_id(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def dot_text(nodes: Sequence[MorseNode], edges: Sequence[Tuple[int, int]], name: str = "morse") -> str:
    lines = [f"digraph {name} {{", "  node [shape=circle];"]
    for i, node in enumerate(nodes):
        attrs = [f"label={_dot_id(node.label)}"]
        if node.at_infinity:
            attrs.append("shape=doublecircle")
        lines.append(f"  n{i} [{', '.join(attrs)}];")
    for a, b in edges:
        lines.append(f"  n{a} -> n{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def morse_dot(f: Optional[Relation], infinity: int = 0) -> str:
    if f is None:
        return dot_text([], [])
    nodes, edges = morse_graph(f, infinity)
    return dot_text(nodes, edges)
