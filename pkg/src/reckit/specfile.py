from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import lark

from reckit import exprs
from reckit.errors import SpecError

log = logging.getLogger(__name__)

grammar = r"""
start: item*

?item: header
    | entry

header: "[" NAME "]"
entry: NAME "=" value

?value: ESCAPED_STRING                  -> string
    | SIGNED_NUMBER                     -> number
    | "true"                            -> true
    | "false"                           -> false
    | "[" [value ("," value)* [","]] "]" -> array
    | NAME                              -> word

NAME: /[A-Za-z_][A-Za-z0-9_.\-]*/
COMMENT: /#[^\n]*/

%import common.ESCAPED_STRING
%import common.SIGNED_NUMBER
%import common.WS
%ignore WS
%ignore COMMENT
"""


class Word(str):
    """A bare (unquoted) word; dumps without quotes."""


@dataclass(frozen=True)
class _Entry:
    key: str
    value: Any
    line: int
    col: int


@dataclass(frozen=True)
class _Header:
    name: str
    line: int
    col: int


class _Build(lark.Transformer):
    def start(self, items):
        return items

    def header(self, children):
        tok = children[0]
        return _Header(str(tok), tok.line, tok.column)

    def entry(self, children):
        tok, value = children
        return _Entry(str(tok), value, tok.line, tok.column)

    def string(self, children):
        return json.loads(children[0])

    def number(self, children):
        text = str(children[0])
        if any(c in text for c in ".eE"):
            return float(text)
        return int(text)

    def true(self, _):
        return True

    def false(self, _):
        return False

    def array(self, children):
        return [c for c in children if c is not None]

    def word(self, children):
        return Word(children[0])


_parser = lark.Lark(grammar, parser="lalr", maybe_placeholders=True)


# ---------------------------------------------------------------------------
# Value checks: each returns the normalized value or raises _Bad
# ---------------------------------------------------------------------------


class _Bad(Exception):
    pass


Check = Callable[[Any], Any]


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _choice(*choices: str) -> Check:
    def check(v: Any) -> Any:
        if not isinstance(v, str) or v not in choices:
            raise _Bad(f"expected one of {', '.join(choices)}, got {v!r}")
        return Word(v)

    return check


def _text(v: Any) -> Any:
    if not isinstance(v, str):
        raise _Bad(f"expected a string, got {v!r}")
    return v


def _flag(v: Any) -> Any:
    if not isinstance(v, bool):
        raise _Bad(f"expected true or false, got {v!r}")
    return v


def _int(v: Any) -> Any:
    if not isinstance(v, int) or isinstance(v, bool):
        raise _Bad(f"expected an integer, got {v!r}")
    return v


def _count(v: Any) -> Any:
    v = _int(v)
    if v < 0:
        raise _Bad(f"expected a nonnegative integer, got {v}")
    return v


def _number(v: Any) -> Any:
    if not _is_number(v):
        raise _Bad(f"expected a number, got {v!r}")
    return float(v)


def _positive(v: Any) -> Any:
    v = _number(v)
    if not v > 0:
        raise _Bad(f"expected a positive number, got {v}")
    return v


def _list_of(check: Check, scalar_ok: bool = False) -> Check:
    def run(v: Any) -> Any:
        if not isinstance(v, list):
            if scalar_ok:
                return [check(v)]
            raise _Bad(f"expected a list, got {v!r}")
        return [check(x) for x in v]

    return run


def _label(v: Any) -> Any:
    if isinstance(v, bool) or not isinstance(v, (str, int)):
        raise _Bad(f"expected a point label, got {v!r}")
    return v if isinstance(v, int) else str(v)


def _pair(v: Any) -> Any:
    if not isinstance(v, list) or len(v) != 2:
        raise _Bad(f"expected a pair [a, b], got {v!r}")
    return [_label(v[0]), _label(v[1])]


def _point(v: Any) -> Any:
    if _is_number(v):
        return [float(v)]
    return _list_of(_number)(v)


def _points_key(v: Any) -> Any:
    if _is_number(v):
        return int(_count(v))
    return _list_of(_label)(v)


_edges = _list_of(_pair)
_numbers = _list_of(_number, scalar_ok=True)
_exprs = _list_of(_text, scalar_ok=True)

SPACE_KEYS: Dict[str, Check] = {
    "kind": _choice("points", "grid"),
    "points": _points_key,
    "coords": _list_of(_point),
    "lower": _numbers,
    "upper": _numbers,
    "resolution": _list_of(_int, scalar_ok=True),
    "h": _positive,
    "mask": _text,
}

SYSTEM_KEYS: Dict[str, Check] = {
    "kind": _choice("relation", "map", "flow", "preset", "rays", "suspension"),
    "edges": _edges,
    "edges_file": _text,
    "escape_out": _list_of(_label),
    "escape_in": _list_of(_label),
    "map": _exprs,
    "inverse": _exprs,
    "proper": _flag,
    "dilation": _count,
    "field": _exprs,
    "phi": _exprs,
    "step": _number,
    "reversible": _flag,
    "name": _text,
    "lower": _number,
    "upper": _number,
    "h": _positive,
    "twisted": _flag,
    "centered": _flag,
    "sampling": _choice("corners", "center"),
    "dim": _int,
    "width": _positive,
    "depth": _count,
    "interior_limits": _list_of(_text),
    "slices": _int,
}

UNIFORMITY_KEYS: Dict[str, Check] = {
    "kind": _choice("discrete", "metric", "entourages"),
    "eps": _numbers,
    "norm": _choice("euclid", "max"),
    "entourages": _list_of(_edges),
}

CONFIG_KEYS: Dict[str, Check] = {
    "float_tol": _positive,
    "integ_tol": _positive,
    "root_tol": _positive,
    "quad_rel_tol": _positive,
    "horizon": _positive,
    "probe_m": _positive,
    "band_cells": _count,
    "verify_limit": _count,
    "seed": _int,
    "jobs": _int,
}

_COMPACTIFY = {"method": _choice("one_point", "lyapunov")}

TASK_KEYS: Dict[str, Dict[str, Check]] = {
    "analyze": {"refine": _count},
    "chain": {"inward": _text},
    "lyapunov": {"per_pair": _flag, "sufficient": _flag, "relation": _choice("g", "chain")},
    "compactify": dict(_COMPACTIFY),
    "classify": dict(_COMPACTIFY),
    "flow": {"dilation": _count, "time_one": _flag},
    "timechange": {
        "v": _text,
        "points": _list_of(_point),
        "taus": _numbers,
        "probe": _flag,
        "cocycle": _flag,
        "stop": _flag,
        "dilation": _count,
    },
    "parallelize": {"dilation": _count, "section": _text},
    "suspend": {"slices": _list_of(_int, scalar_ok=True)},
}

TASK_KINDS = tuple(TASK_KEYS)

SYSTEM_REQUIRES: Dict[str, Tuple[Tuple[str, ...], ...]] = {
    "relation": (("edges", "edges_file"),),
    "map": (("map",),),
    "flow": (("field", "phi"),),
    "preset": (("name",),),
    "rays": (("name",),),
    "suspension": (("edges", "edges_file"),),
}

# system kinds that bring their own space
SELF_SPACED = ("preset", "rays")


@dataclass
class TaskSpec:
    name: str
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class SystemSpec:
    space: Dict[str, Any] = field(default_factory=dict)
    system: Dict[str, Any] = field(default_factory=dict)
    uniformity: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    tasks: List[TaskSpec] = field(default_factory=list)
    exprs: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)
    positions: Dict[str, Tuple[int, int]] = field(default_factory=dict, compare=False, repr=False)
    base: Optional[Path] = field(default=None, compare=False, repr=False)

    def where(self, section: str, key: str = "") -> Tuple[Optional[int], Optional[int]]:
        pos = self.positions.get(f"{section}.{key}" if key else section)
        return pos if pos is not None else (None, None)

    def error(self, section: str, key: str, message: str) -> SpecError:
        line, col = self.where(section, key)
        return SpecError(message, line, col, f"{section}.{key}" if key else section)

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def dim(self) -> int:
        sp = self.space
        if "lower" in sp:
            return len(sp["lower"])
        if sp.get("coords"):
            return len(sp["coords"][0])
        return 1


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _syntax(text: str) -> List[Any]:
    try:
        return _Build().transform(_parser.parse(text))
    except lark.exceptions.UnexpectedCharacters as exc:
        raise SpecError(f"unexpected character {text[exc.pos_in_stream]!r}", exc.line, exc.column) from None
    except lark.exceptions.UnexpectedToken as exc:
        what = "end of input" if exc.token.type == "$END" else repr(str(exc.token))
        line = exc.line if isinstance(exc.line, int) and exc.line > 0 else None
        col = exc.column if isinstance(exc.column, int) and exc.column > 0 else None
        raise SpecError(f"unexpected {what}", line, col) from None
    except lark.exceptions.UnexpectedInput as exc:
        raise SpecError("malformed input", exc.line, exc.column) from None
    except lark.exceptions.VisitError as exc:
        raise SpecError(f"bad value: {exc.orig_exc}") from None


def _section_keys(name: str, kind: Optional[str]) -> Dict[str, Check]:
    if name == "space":
        return SPACE_KEYS
    if name == "system":
        return SYSTEM_KEYS
    if name == "uniformity":
        return UNIFORMITY_KEYS
    if name == "config":
        return CONFIG_KEYS
    return {"kind": _choice(*TASK_KINDS), **TASK_KEYS.get(kind or "", {})}


def _group(items: List[Any]) -> Tuple[List[Tuple[_Header, List[_Entry]]], Dict[str, Tuple[int, int]]]:
    sections: List[Tuple[_Header, List[_Entry]]] = []
    seen: Dict[str, Tuple[int, int]] = {}
    for it in items:
        if isinstance(it, _Header):
            if it.name in seen:
                line, _ = seen[it.name]
                raise SpecError(f"section [{it.name}] repeats the one on line {line}", it.line, it.col, it.name)
            known = it.name in ("space", "system", "uniformity", "config")
            if not known and not (it.name.startswith("task.") and len(it.name) > 5):
                raise SpecError(f"unknown section [{it.name}]", it.line, it.col, it.name)
            seen[it.name] = (it.line, it.col)
            sections.append((it, []))
        else:
            if not sections:
                raise SpecError(f"key {it.key!r} outside a section", it.line, it.col, it.key)
            sections[-1][1].append(it)
    return sections, seen


def _check_section(header: _Header, entries: List[_Entry], positions: Dict[str, Tuple[int, int]]) -> Dict[str, Any]:
    kind_entry = next((e for e in entries if e.key == "kind"), None)
    is_task = header.name.startswith("task.")
    if is_task and kind_entry is None:
        raise SpecError(f"task [{header.name}] needs a kind", header.line, header.col, header.name)
    kind = str(kind_entry.value) if kind_entry is not None else None
    if is_task and kind not in TASK_KINDS:
        raise SpecError(
            f"kind: expected one of {', '.join(TASK_KINDS)}, got {kind_entry.value!r}",
            kind_entry.line, kind_entry.col, f"{header.name}.kind",
        )
    keys = _section_keys(header.name, kind)
    out: Dict[str, Any] = {}
    for e in entries:
        where = f"{header.name}.{e.key}"
        if e.key in out:
            raise SpecError(f"duplicate key {e.key!r}", e.line, e.col, where)
        check = keys.get(e.key)
        if check is None:
            raise SpecError(f"unknown key {e.key!r} in [{header.name}]", e.line, e.col, where)
        try:
            out[e.key] = check(e.value)
        except _Bad as bad:
            raise SpecError(f"{e.key}: {bad}", e.line, e.col, where) from None
        positions[where] = (e.line, e.col)
    return out


def _require(spec: SystemSpec) -> None:
    if not spec.system:
        if spec.tasks:
            raise SpecError("tasks need a [system] section", None, None, "system")
        return
    kind = spec.system.get("kind")
    if kind is None:
        raise spec.error("system", "", "[system] needs a kind")
    for group in SYSTEM_REQUIRES[kind]:
        present = [k for k in group if k in spec.system]
        if len(present) != 1:
            raise spec.error("system", "kind", f"a {kind} system needs exactly one of {', '.join(group)}")
    if kind in SELF_SPACED:
        if spec.space:
            raise spec.error("space", "", f"a {kind} system brings its own space; drop [space]")
        return
    if not spec.space:
        raise spec.error("system", "kind", f"a {kind} system needs a [space] section")
    sk = spec.space.get("kind")
    if kind in ("relation", "suspension") and sk != "points":
        raise spec.error("space", "kind", f"a {kind} system needs a points space")
    if kind == "flow" and sk != "grid":
        raise spec.error("space", "kind", "a flow needs a grid space")
    if sk == "points" and "points" not in spec.space:
        raise spec.error("space", "kind", "a points space needs points")
    if sk == "grid":
        for key in ("lower", "upper"):
            if key not in spec.space:
                raise spec.error("space", "kind", f"a grid space needs {key}")
        if len(spec.space["lower"]) != len(spec.space["upper"]):
            raise spec.error("space", "upper", "lower and upper differ in dimension")
        if ("resolution" in spec.space) == ("h" in spec.space):
            raise spec.error("space", "kind", "a grid space needs exactly one of resolution, h")
        res = spec.space.get("resolution")
        if res is not None and len(res) not in (1, spec.dim):
            raise spec.error("space", "resolution", f"resolution needs 1 or {spec.dim} entries")
    if kind == "map" and sk == "points" and not spec.space.get("coords"):
        raise spec.error("space", "kind", "a map on points needs coords")
    uk = spec.uniformity.get("kind")
    if uk == "metric" and "eps" not in spec.uniformity:
        raise spec.error("uniformity", "kind", "a metric uniformity needs eps")
    if uk == "entourages" and "entourages" not in spec.uniformity:
        raise spec.error("uniformity", "kind", "an entourage uniformity needs entourages")


def _compile(spec: SystemSpec) -> None:
    """Parse every expression against the variables it may use."""
    names = exprs.coordinate_names(spec.dim)
    plan = [
        ("space", "mask", names),
        ("system", "map", names),
        ("system", "inverse", names),
        ("system", "field", names),
        ("system", "phi", names + ("t",)),
    ]
    for section, key, allowed in plan:
        raw = getattr(spec, section).get(key)
        if raw is None:
            continue
        line, _ = spec.where(section, key)
        where = f"{section}.{key}"
        if isinstance(raw, list):
            if len(raw) != spec.dim:
                raise spec.error(section, key, f"{key} needs {spec.dim} expression(s), got {len(raw)}")
            spec.exprs[where] = [exprs.parse_expr(s, allowed, line, where) for s in raw]
        else:
            spec.exprs[where] = exprs.parse_expr(raw, allowed, line, where)
    for t in spec.tasks:
        for key in ("v", "section", "inward"):
            if key in t.params:
                line, _ = spec.where(f"task.{t.name}", key)
                where = f"task.{t.name}.{key}"
                spec.exprs[where] = exprs.parse_expr(t.params[key], names, line, where)


def parse_spec(text: str, base: Optional[Path] = None) -> SystemSpec:
    """Parse the spec dialect; every diagnostic carries a line and column."""
    sections, seen = _group(_syntax(text))
    spec = SystemSpec(base=base)
    positions: Dict[str, Tuple[int, int]] = dict(seen)
    for header, entries in sections:
        values = _check_section(header, entries, positions)
        if header.name.startswith("task."):
            name = header.name[5:]
            kind = str(values.pop("kind"))
            spec.tasks.append(TaskSpec(name, kind, values))
        else:
            setattr(spec, header.name, values)
    spec.positions = positions
    _require(spec)
    _compile(spec)
    if base is not None:
        _check_files(spec)
    log.debug("parsed spec: system=%s, %d tasks", spec.system.get("kind"), len(spec.tasks))
    return spec


def _check_files(spec: SystemSpec) -> None:
    ref = spec.system.get("edges_file")
    if ref is not None and spec.base is not None and not (spec.base / ref).is_file():
        raise spec.error("system", "edges_file", f"file not found: {ref}")


def load_spec(path: Path) -> SystemSpec:
    path = Path(path)
    return parse_spec(path.read_text(encoding="utf-8"), base=path.resolve().parent)


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def _dump_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Word):
        return str(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, list):
        return "[" + ", ".join(_dump_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def _dump_section(name: str, values: Dict[str, Any], order: Dict[str, Check]) -> List[str]:
    lines = [f"[{name}]"]
    for key in order:
        if key in values:
            lines.append(f"{key} = {_dump_value(values[key])}")
    return lines


def dump_spec(spec: SystemSpec) -> str:
    """Canonical text: fixed section and key order, one entry per line."""
    blocks: List[List[str]] = []
    for name, order in (("space", SPACE_KEYS), ("system", SYSTEM_KEYS), ("uniformity", UNIFORMITY_KEYS), ("config", CONFIG_KEYS)):
        values = getattr(spec, name)
        if values:
            blocks.append(_dump_section(name, values, order))
    for t in spec.tasks:
        values = {"kind": Word(t.kind), **t.params}
        blocks.append(_dump_section(f"task.{t.name}", values, {"kind": _text, **TASK_KEYS[t.kind]}))
    return "\n\n".join("\n".join(b) for b in blocks) + ("\n" if blocks else "")
