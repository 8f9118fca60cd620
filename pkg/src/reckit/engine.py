from __future__ import annotations

import hashlib
import inspect
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from reckit import __version__
from reckit import compactify as cp
from reckit import exprs
from reckit import flowdisc as fd
from reckit import lyap
from reckit import presets
from reckit import rayspace as rs
from reckit import relcore as rc
from reckit import timechange as tcm
from reckit import uniform
from reckit.errors import InvariantViolation, PreconditionError, ReckitError, SpecError, exit_code_of
from reckit.models import (
    CompactifiedSystem,
    EntourageFamily,
    FiniteSpace,
    FlowModel,
    FlowRelations,
    Grid,
    Metric,
    PointSet,
    Relation,
    TimeChange,
    WindowModel,
)
from reckit.reporting import lyapunov_rows, morse_dot, plain
from reckit.specfile import SystemSpec, TaskSpec, dump_spec
from reckit.storage import write_bundle

log = logging.getLogger(__name__)


@dataclass
class EngineConfig:
    float_tol: float = 1e-9
    integ_tol: float = 1e-6
    root_tol: float = 1e-9
    quad_rel_tol: float = 1e-8
    horizon: float = 1e5
    probe_m: float = 25.0
    band_cells: int = 2
    verify_limit: int = 2000
    seed: int = 0
    jobs: int = 1

    @classmethod
    def from_spec(cls, spec: SystemSpec, seed: Optional[int] = None, jobs: Optional[int] = None) -> "EngineConfig":
        """Defaults, then the [config] section, then command-line overrides."""
        known = {f.name for f in fields(cls)}
        cfg = cls(**{k: v for k, v in spec.config.items() if k in known})
        if seed is not None:
            cfg.seed = int(seed)
        if jobs is not None:
            cfg.jobs = int(jobs)
        cfg.jobs = max(1, cfg.jobs)
        return cfg


@dataclass
class Sink:
    """Per-task side outputs, merged into the bundle in task order."""

    morse: Optional[Tuple[Relation, int]] = None
    lyapunov: List[Dict[str, Any]] = field(default_factory=list)
    trajectory: List[Dict[str, Any]] = field(default_factory=list)
    edges: Dict[str, str] = field(default_factory=dict)


@dataclass
class ReportBundle:
    report: Dict[str, Any]
    provenance: Dict[str, Any]
    dot: str
    lyapunov_rows: List[Dict[str, Any]] = field(default_factory=list)
    trajectory_rows: List[Dict[str, Any]] = field(default_factory=list)
    edges: Dict[str, str] = field(default_factory=dict)
    exit_code: int = 0
    paths: Dict[str, Path] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Building the system a spec describes
# ---------------------------------------------------------------------------


def _grid(spec: SystemSpec) -> Grid:
    sp = spec.space
    lo, hi = sp["lower"], sp["upper"]
    if "resolution" in sp:
        res = sp["resolution"]
        shape = tuple(res * len(lo) if len(res) == 1 else res)
    else:
        shape = tuple(max(1, int(round((b - a) / sp["h"]))) for a, b in zip(lo, hi))
    try:
        grid = Grid(tuple(lo), tuple(hi), shape)
    except ValueError as exc:
        raise spec.error("space", "lower", str(exc)) from None
    mask = spec.exprs.get("space.mask")
    if mask is not None:
        keep = exprs.compile_scalar(mask, grid.dim)(grid.centers()) <= 0.0
        if not keep.any():
            raise spec.error("space", "mask", "mask removes every cell")
        grid = Grid(grid.lower, grid.upper, grid.shape, keep.reshape(grid.shape))
    return grid


def _point_space(spec: SystemSpec) -> FiniteSpace:
    pts = spec.space["points"]
    n, labels = (pts, ()) if isinstance(pts, int) else (len(pts), tuple(str(p) for p in pts))
    if len(set(labels)) != len(labels):
        raise spec.error("space", "points", "point labels must be distinct")
    coords = spec.space.get("coords")
    if coords is not None:
        if len(coords) != n or len({len(c) for c in coords}) > 1:
            raise spec.error("space", "coords", f"coords need {n} rows of equal length")
        coords = np.array(coords, dtype=float)
    return FiniteSpace(n, labels, coords=coords)


def _index(spec: SystemSpec, space: FiniteSpace, label: Any, key: str) -> int:
    if isinstance(label, int) and not space.labels:
        if 0 <= label < space.n:
            return label
        raise spec.error("system", key, f"point {label} out of range for {space.n} points")
    try:
        return space.index(str(label))
    except ValueError as exc:
        raise spec.error("system", key, str(exc)) from None


def _edges(spec: SystemSpec, space: FiniteSpace) -> Relation:
    sys_ = spec.system
    if "edges_file" in sys_:
        base = spec.base or Path.cwd()
        p = base / sys_["edges_file"]
        if not p.is_file():
            raise spec.error("system", "edges_file", f"file not found: {sys_['edges_file']}")
        try:
            return Relation.from_edge_text(space, p.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise spec.error("system", "edges_file", f"bad edge list: {exc}") from None
    pairs = [(_index(spec, space, a, "edges"), _index(spec, space, b, "edges")) for a, b in sys_["edges"]]
    return Relation.from_pairs(space, pairs)


def _relation_window(spec: SystemSpec, f: Relation) -> WindowModel:
    sp = f.space
    out = {_index(spec, sp, x, "escape_out"): "inf" for x in spec.system.get("escape_out", [])}
    inn = {_index(spec, sp, x, "escape_in"): "inf" for x in spec.system.get("escape_in", [])}
    first = next(iter(out), next(iter(inn), None))
    return WindowModel(
        sp, f, out, inn, proper_flag=bool(spec.system.get("proper", False)),
        directions={"inf": first} if first is not None else {},
    )


def _preset_flow(spec: SystemSpec) -> FlowModel:
    name = str(spec.system["name"])
    build = presets.FLOWS.get(name)
    if build is None:
        raise spec.error("system", "name", f"unknown flow preset {name!r}; known: {', '.join(presets.FLOWS)}")
    accepted = inspect.signature(build).parameters
    kwargs: Dict[str, Any] = {}
    for key in ("lower", "upper", "h", "twisted", "centered", "dim", "width"):
        if key in spec.system:
            if key not in accepted:
                raise spec.error("system", key, f"preset {name!r} does not take {key}")
            kwargs[key] = spec.system[key]
    return build(**kwargs)


class Model:
    """The system under study, with derived relations computed on demand and cached."""

    def __init__(self, spec: SystemSpec, cfg: EngineConfig) -> None:
        self.spec = spec
        self.cfg = cfg
        self.kind = str(spec.system.get("kind", ""))
        self.flow: Optional[FlowModel] = None
        self.window: Optional[WindowModel] = None
        self.rays = None
        self.map_grid: Optional[Grid] = None
        self.map_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
        self._cache: Dict[Any, Any] = {}
        self._lock = threading.RLock()
        self._build()

    def _build(self) -> None:
        spec, sys_ = self.spec, self.spec.system
        if self.kind in ("relation", "suspension"):
            f = _edges(spec, _point_space(spec))
            if self.kind == "relation":
                self.window = _relation_window(spec, f)
            else:
                try:
                    self.flow = fd.suspend(f, int(sys_.get("slices", 1)), name="suspension")
                except PreconditionError as exc:
                    raise spec.error("system", "edges", str(exc)) from None
        elif self.kind == "map":
            fn = exprs.compile_field(spec.exprs["system.map"])
            inv = spec.exprs.get("system.inverse")
            if spec.space["kind"] == "grid":
                self.map_grid, self.map_fn = _grid(spec), fn
                self.window = fd.sample_map(
                    self.map_grid, fn, dilation=int(sys_.get("dilation", 1)), proper=bool(sys_.get("proper", False)),
                    inverse=exprs.compile_field(inv) if inv is not None else None,
                )
            else:
                space = _point_space(spec)
                self.window = fd.snap_map(space.coords, fn, tol=self.cfg.float_tol, labels=space.labels)
                self.window.proper_flag = bool(sys_.get("proper", False))
        elif self.kind == "flow":
            grid = _grid(spec)
            common = dict(grid=grid, step=float(sys_.get("step", 0.0)), reversible=bool(sys_.get("reversible", True)))
            if "field" in sys_:
                self.flow = FlowModel("ode", vector_field=exprs.compile_field(spec.exprs["system.field"]), name="field", **common)
            else:
                self.flow = FlowModel("closed_form", phi=exprs.compile_flow(spec.exprs["system.phi"]), name="phi", **common)
        elif self.kind == "preset":
            self.flow = _preset_flow(spec)
        elif self.kind == "rays":
            name = str(sys_["name"])
            build = presets.RAY_SYSTEMS.get(name)
            if build is None:
                raise spec.error("system", "name", f"unknown ray system {name!r}; known: {', '.join(presets.RAY_SYSTEMS)}")
            self.rays = rs.closure(build())

    def cached(self, key: Any, build: Callable[[], Any]) -> Any:
        with self._lock:
            if key not in self._cache:
                self._cache[key] = build()
            return self._cache[key]

    @property
    def depth(self) -> int:
        return int(self.spec.system.get("depth", 10))

    def require_flow(self) -> FlowModel:
        if self.flow is None:
            raise PreconditionError("task needs a flow system", witness=self.kind)
        return self.flow

    def fr(self, dilation: Optional[int] = None) -> FlowRelations:
        flow = self.require_flow()
        d = int(self.spec.system.get("dilation", 1)) if dilation is None else int(dilation)
        sampling = str(self.spec.system.get("sampling", "corners"))
        return self.cached(("fr", d), lambda: fd.flow_relations(flow, dilation=d, jobs=self.cfg.jobs, sampling=sampling))

    def materialized(self) -> CompactifiedSystem:
        limits = [str(x) for x in self.spec.system.get("interior_limits", [])]
        return self.cached("rays", lambda: rs.materialize(self.rays, self.depth, interior_limits=limits))

    def relation(self) -> Relation:
        """The discrete-time relation: the map itself, or the time-one relation of a flow."""
        if self.window is not None:
            return self.window.f
        if self.flow is not None:
            return self.fr().f1
        if self.rays is not None:
            return self.materialized().f
        raise PreconditionError("spec has no system")

    def window_model(self) -> WindowModel:
        if self.window is not None:
            return self.window
        if self.flow is not None:
            return self.cached("flow_window", lambda: fd.flow_window(self.fr()))
        if self.rays is not None:
            return self.cached("ray_window", lambda: rs.window(self.rays, self.depth))
        raise PreconditionError("spec has no system")

    def compactified(self, method: str) -> CompactifiedSystem:
        if self.rays is not None and method == "one_point":
            return self.materialized()

        def build() -> CompactifiedSystem:
            w = self.window_model()
            if method == "one_point":
                return cp.one_point_compactify(w)
            LS = lyap.sufficient_set(w.f, verify=w.f.n <= self.cfg.verify_limit, jobs=self.cfg.jobs)
            return cp.lyapunov_compactify(w, LS, tol=self.cfg.float_tol)

        return self.cached(("compact", method), build)

    def family(self, space: FiniteSpace) -> EntourageFamily:
        u = self.spec.uniformity
        kind = u.get("kind", "discrete")
        if kind == "discrete":
            return uniform.discrete_family(space)
        if kind == "metric":
            if space.coords is None:
                raise PreconditionError("metric uniformity needs point coordinates")
            m = Metric(space.coords, tuple(u["eps"]), str(u.get("norm", "euclid")))
            return self.cached(("family", space.n), lambda: uniform.entourages_from_metric(m, space))
        rels = []
        for i, edges in enumerate(u["entourages"]):
            pairs = [(_index(self.spec, space, a, "edges"), _index(self.spec, space, b, "edges")) for a, b in edges]
            V = Relation.from_pairs(space, pairs)
            rels.append(rc.union(rc.with_identity(V), rc.inverse(V)))
        return uniform.family_from_relations(rels)

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        if self.flow is not None:
            out["flow"] = self.flow.name or self.flow.kind
            if self.flow.grid is not None:
                out["cells"] = self.flow.grid.n
        elif self.window is not None:
            out["points"] = self.window.interior.n
        elif self.rays is not None:
            out["rays"] = list(self.rays.rays)
            out["depth"] = self.depth
        return out


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


def _labels(E: PointSet) -> List[str]:
    return E.labels()


def _task_analyze(model: Model, task: TaskSpec, cfg: EngineConfig, sink: Sink) -> Dict[str, Any]:
    f = model.relation()
    O = rc.orbit_relation(f)
    G = rc.g_relation(f)
    classes = rc.recurrence_classes(f)
    sink.morse = (f, 0)
    if f.n <= cfg.verify_limit:
        sink.edges[task.name] = f.to_edge_text()
    out: Dict[str, Any] = {
        "points": f.n,
        "pairs": f.size(),
        "transitive": rc.is_transitive(f),
        "orbit_pairs": O.size(),
        "g_pairs": G.size(),
        "recurrent": _labels(rc.cyclic_set(G)),
        "classes": [_labels(E) for E in classes],
        "omega_g_pairs": rc.omega_g(f).size(),
    }
    depth = task.params.get("refine")
    if depth is not None:
        if model.map_grid is None or model.map_fn is None:
            raise PreconditionError("refinement needs a map on a grid", witness=task.name)
        R, info = fd.refined_recurrence(model.map_grid, model.map_fn, int(depth))
        out["refined"] = {"depth": int(depth), "recurrent": _labels(R), **info}
    return out


def _inward_set(model: Model, task: TaskSpec, space: FiniteSpace) -> PointSet:
    if space.coords is None:
        raise PreconditionError("inward region needs point coordinates", witness=task.name)
    expr = model.spec.exprs[f"task.{task.name}.inward"]
    keep = exprs.compile_scalar(expr, space.coords.shape[1])(space.coords) <= 0.0
    return PointSet.of(space, np.flatnonzero(keep).tolist())


def _angular_gap(coords: np.ndarray) -> float:
    """Largest angular gap between planar points about their centroid."""
    p = coords - coords.mean(axis=0)
    t = np.sort(np.arctan2(p[:, 1], p[:, 0]))
    return float(np.max(np.diff(np.append(t, t[0] + 2.0 * np.pi))))


def _fixed_part(f: Relation, E: PointSet, cfg: EngineConfig) -> Dict[str, Any]:
    """Fixed cells of a component, checked for G(f_F) = 1_F and, on planar loops, C(f_F) = F×F."""
    F = PointSet.of(f.space, [x for x in E.members() if (f.rows[x] >> x) & 1])
    row: Dict[str, Any] = {"fixed": len(F)}
    if not F.bits or len(F) > cfg.verify_limit:
        return row
    sub = rc.subspace(f.space, F)
    fF = rc.restriction(f, F, sub)
    row["g_fixed_is_identity"] = rc.g_relation(fF) == Relation.identity(sub)
    if sub.coords is not None and sub.coords.shape[1] == 2 and len(F) > 2:
        row["chain_fixed_full"] = uniform.chain_relation(fF, uniform.loop_adjacency(sub)) == Relation.full(sub)
        row["angular_gap"] = _angular_gap(sub.coords)
    return row


def _task_chain(model: Model, task: TaskSpec, cfg: EngineConfig, sink: Sink) -> Dict[str, Any]:
    f = model.relation()
    U = model.family(f.space)
    comps = uniform.chain_components(f, U)
    sink.morse = (uniform.chain_generator(f, U), 0)
    rows = []
    for E in comps:
        row: Dict[str, Any] = {"size": len(E), "members": _labels(E)}
        if len(E) <= cfg.verify_limit:
            sub = rc.subspace(f.space, E)
            fE = rc.restriction(f, E, sub)
            row["g_is_identity"] = rc.g_relation(fE) == Relation.identity(sub)
            row["chain_is_full"] = uniform.chain_relation(fE, uniform.induced_family(U, E)) == Relation.full(sub)
        row.update(_fixed_part(f, E, cfg))
        rows.append(row)
    out: Dict[str, Any] = {
        "entourages": len(U.entourages),
        "chain_recurrent": sum(len(E) for E in comps),
        "chain_transitive": uniform.is_chain_transitive(f, U),
        "components": rows,
    }
    if "inward" in task.params:
        region = _inward_set(model, task, f.space)
        A = uniform.attractor(f, region, U)
        out["inward"] = {"region": len(region), "attractor": _labels(A)}
    return out


def _task_lyapunov(model: Model, task: TaskSpec, cfg: EngineConfig, sink: Sink) -> Dict[str, Any]:
    f = model.relation()
    which = str(task.params.get("relation", "g"))
    if which == "chain":
        F = uniform.chain_generator(f, model.family(f.space))
    else:
        F = rc.with_identity(rc.g_relation(f))
    L = lyap.complete_lyapunov(F)
    LS = []
    if task.params.get("sufficient", True):
        LS = lyap.sufficient_set(f, per_pair=bool(task.params.get("per_pair", False)), verify=f.n <= cfg.verify_limit, jobs=cfg.jobs)
    comp = rc.condensation(F).comp_of
    strict = all(L[x] < L[y] for x, y in f.pairs() if comp[x] != comp[y])
    sink.lyapunov.extend(lyapunov_rows(task.name, L))
    return {
        "relation": which,
        "levels": len(set(L.values)),
        "monotone": lyap.is_lyapunov(L, f),
        "strict_on_transient": strict,
        "exact": L.exact,
        "sufficient_functions": len(LS),
    }


def _classes(c: CompactifiedSystem) -> List[Dict[str, Any]]:
    return [{"case": case, "members": _labels(E)} for E, case in cp.classify_classes(c)]


def _task_compactify(model: Model, task: TaskSpec, cfg: EngineConfig, sink: Sink) -> Dict[str, Any]:
    method = str(task.params.get("method", "one_point"))
    c = model.compactified(method)
    rep = cp.audit(c)
    if "classes" in rep:
        rep["classes"] = [{"case": e["case"], "members": e["points"]} for e in rep["classes"]]
    sink.morse = (c.fhat, c.infinity.bits)
    rep["g_hat_pairs"] = rc.g_relation(c.fhat).size()
    return {"method": method, **rep}


def _task_classify(model: Model, task: TaskSpec, cfg: EngineConfig, sink: Sink) -> Dict[str, Any]:
    method = str(task.params.get("method", "one_point"))
    c = model.compactified(method)
    classes = _classes(c)
    sink.morse = (c.fhat, c.infinity.bits)
    counts = {case: sum(1 for e in classes if e["case"] == case) for case in cp.CASES}
    return {"method": method, "classes": classes, "counts": counts}


def _task_flow(model: Model, task: TaskSpec, cfg: EngineConfig, sink: Sink) -> Dict[str, Any]:
    flow = model.require_flow()
    fr = model.fr(task.params.get("dilation"))
    out: Dict[str, Any] = {
        "cells": fr.space.n,
        "exact": fr.exact,
        "steps": fr.steps,
        "escape_out": fr.escape_out.bit_count(),
        "escape_in": fr.escape_in.bit_count(),
        "recurrent_cells": len(fd.generalized_recurrent(fr)),
        "identities": fd.identity_report(fr, cfg.band_cells),
    }
    if flow.kind != "combinatorial":
        r = fd.semigroup_residual(flow, seed=cfg.seed)
        out["semigroup_residual"] = r
        out["semigroup_ok"] = r <= cfg.integ_tol
    if task.params.get("time_one", True) and flow.reversible:
        out["time_one"] = fd.time_one_agreement(fr, seed=cfg.seed, band=cfg.band_cells)
    sink.morse = (fd.g_phi(fr), 0)
    return out


def _as_point(x: Sequence[float], dim: int) -> np.ndarray:
    p = np.asarray(x, dtype=float).reshape(-1)
    if p.size != dim:
        raise PreconditionError(f"point needs {dim} coordinate(s)", witness=list(x))
    return p.reshape(1, dim)


def _task_timechange(model: Model, task: TaskSpec, cfg: EngineConfig, sink: Sink) -> Dict[str, Any]:
    flow = model.require_flow()
    p = task.params
    if "v" not in p and not p.get("stop", False):
        raise PreconditionError("timechange task needs v or stop = true", witness=task.name)
    out: Dict[str, Any] = {}
    if "v" in p:
        grid = fd.require_grid(flow)
        V = tcm.regular_fn(exprs.compile_scalar(model.spec.exprs[f"task.{task.name}.v"], grid.dim), source=str(p["v"]))
        tc = TimeChange(flow, V, quad_tol=cfg.quad_rel_tol, root_tol=cfg.root_tol, horizon=cfg.horizon)
        pts = [_as_point(x, grid.dim) for x in p.get("points", [[0.0] * grid.dim])]
        taus = [float(t) for t in p.get("taus", [0.5, 1.0, 2.0])]
        for i, x in enumerate(pts):
            for row in tcm.trajectory_table(tc, x, taus):
                sink.trajectory.append({"task": task.name, "point": i, **row})
        out["v"] = str(p["v"])
        out["points"] = len(pts)
        out["taus"] = taus
        if p.get("probe", True):
            out["probe"] = [
                tcm.regularity_probe(flow, V, x, M=cfg.probe_m, horizon=cfg.horizon, quad_tol=cfg.quad_rel_tol, root_tol=cfg.root_tol)
                for x in pts
            ]
        if p.get("cocycle", True):
            out["cocycle_residual"] = tcm.cocycle_battery(tc, seed=cfg.seed)
    if p.get("stop", False):
        c, rep = tcm.stop_at_infinity(flow, dilation=int(p.get("dilation", 1)), band=cfg.band_cells, seed=cfg.seed, jobs=cfg.jobs)
        out["stop_at_infinity"] = rep
        sink.morse = (c.fhat, c.infinity.bits)
    return out


def _task_parallelize(model: Model, task: TaskSpec, cfg: EngineConfig, sink: Sink) -> Dict[str, Any]:
    fr = model.fr(task.params.get("dilation"))
    rep = fd.parallelizable_check(fr, band=cfg.band_cells)
    if "section" in task.params and rep["verdict"] == "parallelizable-consistent":
        grid = fd.require_grid(fr.flow)
        vals = exprs.compile_scalar(model.spec.exprs[f"task.{task.name}.section"], grid.dim)(grid.centers())
        _, rep["section"] = fd.build_section(fr, vals, check=False)
    return rep


def _task_suspend(model: Model, task: TaskSpec, cfg: EngineConfig, sink: Sink) -> Dict[str, Any]:
    if model.window is not None and model.kind == "relation":
        cascade = model.window.f
    elif model.flow is not None and model.flow.kind == "combinatorial":
        cascade = model.flow.base
    else:
        raise PreconditionError("suspension needs a relation system", witness=model.kind)
    rows = []
    for m in task.params.get("slices", [1, 2, 4]):
        fr = fd.flow_relations(fd.suspend(cascade, int(m)))
        ids = fd.identity_report(fr)
        counts = {k: v["symdiff"] for k, v in ids.items() if isinstance(v, dict)}
        row = {"slices": int(m), "points": fr.space.n, "slice_symdiff": fd.suspension_check(fr), "identities": counts}
        row["failures"] = row["slice_symdiff"] + sum(counts.values())
        if row["failures"]:
            raise InvariantViolation(f"suspension identities fail with {m} slices: {row}")
        rows.append(row)
    return {"suspensions": rows, "failures": 0}


TASKS: Dict[str, Callable[[Model, TaskSpec, EngineConfig, Sink], Dict[str, Any]]] = {
    "analyze": _task_analyze,
    "chain": _task_chain,
    "lyapunov": _task_lyapunov,
    "compactify": _task_compactify,
    "classify": _task_classify,
    "flow": _task_flow,
    "timechange": _task_timechange,
    "parallelize": _task_parallelize,
    "suspend": _task_suspend,
}

OPERATIONS: Dict[str, Tuple[str, Tuple[str, ...], Tuple[str, ...]]] = {
    "analyze": ("relcore", ("orbit_relation", "g_relation", "recurrence_classes", "omega_g"), ()),
    "chain": ("uniform", ("chain_relation", "chain_components", "is_chain_transitive"), ()),
    "lyapunov": ("lyap", ("complete_lyapunov", "sufficient_set", "is_lyapunov"), ("verify_limit",)),
    "compactify": ("compactify", ("one_point_compactify", "lyapunov_compactify", "audit"), ("float_tol",)),
    "classify": ("compactify", ("classify_classes",), ("float_tol",)),
    "flow": ("flowdisc", ("flow_relations", "identity_report", "time_one_agreement"), ("integ_tol", "band_cells")),
    "timechange": (
        "timechange", ("tbar", "regularity_probe", "cocycle_battery", "stop_at_infinity"),
        ("quad_rel_tol", "root_tol", "horizon", "probe_m", "band_cells"),
    ),
    "parallelize": ("flowdisc", ("parallelizable_check", "build_section"), ("band_cells",)),
    "suspend": ("flowdisc", ("suspend", "suspension_check", "identity_report"), ()),
}


def _run_task(model: Model, task: TaskSpec, cfg: EngineConfig) -> Tuple[Dict[str, Any], Sink, int]:
    sink = Sink()
    log.info("task %s (%s) started", task.name, task.kind)
    entry: Dict[str, Any] = {"name": task.name, "kind": task.kind}
    try:
        result = TASKS[task.kind](model, task, cfg, sink)
    except (ReckitError, InvariantViolation) as exc:
        code = exit_code_of(exc)
        log.warning("task %s failed: %s", task.name, exc)
        entry.update(status="failed", error=str(exc), exit_code=code)
        return entry, Sink(), code
    entry.update(status="ok", result=result)
    log.info("task %s finished", task.name)
    return entry, sink, 0


def _provenance(spec: SystemSpec, cfg: EngineConfig, model: Optional[Model]) -> Dict[str, Any]:
    canon = dump_spec(spec)
    prov: Dict[str, Any] = {
        "tool": "reckit",
        "version": __version__,
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "spec_sha256": hashlib.sha256(canon.encode("utf-8")).hexdigest(),
        "config": asdict(cfg),
        "tasks": [],
    }
    if model is not None:
        grid = model.flow.grid if model.flow is not None else None
        if grid is not None:
            prov["grid"] = {"lower": list(grid.lower), "upper": list(grid.upper), "shape": list(grid.shape), "cells": grid.n}
        steps = {f"dilation={k[1]}": v.steps for k, v in model._cache.items() if isinstance(k, tuple) and k[0] == "fr"}
        if steps:
            prov["flow_steps"] = steps
    for t in spec.tasks:
        module, ops, tols = OPERATIONS[t.kind]
        prov["tasks"].append({
            "name": t.name,
            "module": module,
            "operations": list(ops),
            "parameters": dict(t.params),
            "tolerances": {k: getattr(cfg, k) for k in tols},
        })
    return prov


def run(spec: SystemSpec, out_dir: Optional[Path] = None, cfg: Optional[EngineConfig] = None) -> ReportBundle:
    """Execute every task of the spec; task failures are recorded, not raised."""
    cfg = cfg or EngineConfig.from_spec(spec)
    model = Model(spec, cfg) if spec.system else None
    if model is None and spec.tasks:
        raise SpecError("tasks need a [system] section", key="system")

    def one(t: TaskSpec) -> Tuple[Dict[str, Any], Sink, int]:
        assert model is not None
        return _run_task(model, t, cfg)

    if cfg.jobs > 1 and len(spec.tasks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
            done = list(ex.map(one, spec.tasks))
    else:
        done = [one(t) for t in spec.tasks]

    code = max((c for _, _, c in done), default=0)
    morse: Optional[Tuple[Relation, int]] = None
    bundle = ReportBundle(report={}, provenance={}, dot="")
    for _, sink, _ in done:
        if sink.morse is not None:
            morse = sink.morse
        bundle.lyapunov_rows.extend(sink.lyapunov)
        bundle.trajectory_rows.extend(sink.trajectory)
        bundle.edges.update(sink.edges)
    bundle.report = plain({
        "system": model.summary() if model is not None else {},
        "tasks": [entry for entry, _, _ in done],
        "exit_code": code,
    })
    bundle.provenance = plain(_provenance(spec, cfg, model))
    bundle.dot = morse_dot(*morse) if morse is not None else morse_dot(None)
    bundle.exit_code = code
    if out_dir is not None:
        bundle.paths = write_bundle(bundle, out_dir)
    log.info("run finished: %d tasks, exit code %d", len(spec.tasks), code)
    return bundle
