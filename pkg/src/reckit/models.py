from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from reckit.errors import SpaceMismatch

Value = Union[Fraction, float]
INF = float("inf")


def iter_bits(v: int) -> Iterator[int]:
    while v:
        low = v & -v
        yield low.bit_length() - 1
        v ^= low


def bits_of(indices: Iterable[int]) -> int:
    v = 0
    for i in indices:
        v |= 1 << int(i)
    return v


def full_mask(n: int) -> int:
    return (1 << n) - 1


def rows_to_matrix(rows: Sequence[int], n: int) -> np.ndarray:
    if n == 0 or not rows:
        return np.zeros((len(rows), n), dtype=bool)
    nbytes = (n + 7) // 8
    buf = b"".join(int(r).to_bytes(nbytes, "little") for r in rows)
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(len(rows), nbytes)
    return np.unpackbits(arr, axis=1, bitorder="little")[:, :n].astype(bool)


def matrix_to_rows(m: np.ndarray) -> Tuple[int, ...]:
    m = np.asarray(m, dtype=bool)
    if m.ndim != 2 or m.shape[1] == 0:
        return tuple(0 for _ in range(m.shape[0] if m.ndim == 2 else 0))
    packed = np.packbits(m, axis=1, bitorder="little")
    return tuple(int.from_bytes(r.tobytes(), "little") for r in packed)


@dataclass(frozen=True)
class FiniteSpace:
    n: int
    labels: Tuple[str, ...] = ()
    coords: Optional[np.ndarray] = field(default=None, compare=False, hash=False, repr=False)

    def __post_init__(self) -> None:
        if self.n < 0:
            raise ValueError(f"point count must be >= 0, got {self.n}")
        if self.labels and len(self.labels) != self.n:
            raise ValueError(f"expected {self.n} labels, got {len(self.labels)}")
        if self.coords is not None:
            c = np.asarray(self.coords, dtype=float)
            if c.ndim == 1:
                c = c.reshape(-1, 1)
            if c.shape[0] != self.n:
                raise ValueError(f"expected {self.n} coordinate rows, got {c.shape[0]}")
            object.__setattr__(self, "coords", c)

    def label(self, i: int) -> str:
        return self.labels[i] if self.labels else str(i)

    @cached_property
    def _index(self) -> Dict[str, int]:
        return {self.label(i): i for i in range(self.n)}

    def index(self, label: str) -> int:
        try:
            return self._index[str(label)]
        except KeyError:
            raise ValueError(f"unknown point label: {label!r}") from None

    @property
    def all_bits(self) -> int:
        return full_mask(self.n)

    def require_same(self, other: "FiniteSpace", what: str = "operands") -> None:
        if self is not other and self != other:
            raise SpaceMismatch(f"{what} live on different spaces (n={self.n} vs n={other.n})")


@dataclass(frozen=True)
class PointSet:
    space: FiniteSpace
    bits: int = 0

    def members(self) -> List[int]:
        return list(iter_bits(self.bits))

    def labels(self) -> List[str]:
        return [self.space.label(i) for i in iter_bits(self.bits)]

    def __contains__(self, x: object) -> bool:
        return isinstance(x, int) and x >= 0 and bool((self.bits >> x) & 1)

    def __len__(self) -> int:
        return self.bits.bit_count()

    def __iter__(self) -> Iterator[int]:
        return iter_bits(self.bits)

    def is_empty(self) -> bool:
        return self.bits == 0

    @classmethod
    def of(cls, space: FiniteSpace, indices: Iterable[int]) -> "PointSet":
        bits = bits_of(indices)
        if bits >> space.n:
            raise ValueError(f"point index out of range for n={space.n}")
        return cls(space, bits)

    @classmethod
    def everything(cls, space: FiniteSpace) -> "PointSet":
        return cls(space, space.all_bits)

    def union(self, other: "PointSet") -> "PointSet":
        self.space.require_same(other.space)
        return PointSet(self.space, self.bits | other.bits)

    def intersection(self, other: "PointSet") -> "PointSet":
        self.space.require_same(other.space)
        return PointSet(self.space, self.bits & other.bits)

    def difference(self, other: "PointSet") -> "PointSet":
        self.space.require_same(other.space)
        return PointSet(self.space, self.bits & ~other.bits)

    def complement(self) -> "PointSet":
        return PointSet(self.space, self.space.all_bits & ~self.bits)

    def is_subset(self, other: "PointSet") -> bool:
        self.space.require_same(other.space)
        return self.bits & ~other.bits == 0

    def to_mask(self) -> np.ndarray:
        out = np.zeros(self.space.n, dtype=bool)
        idx = self.members()
        if idx:
            out[idx] = True
        return out

    @classmethod
    def from_mask(cls, space: FiniteSpace, mask: np.ndarray) -> "PointSet":
        return cls.of(space, np.flatnonzero(np.asarray(mask, dtype=bool)).tolist())


@dataclass(frozen=True)
class Relation:
    """A relation on a finite space, stored as one bitset row per source point."""

    space: FiniteSpace
    rows: Tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.rows) != self.space.n:
            raise ValueError(f"expected {self.space.n} rows, got {len(self.rows)}")
        n = self.space.n
        for r in self.rows:
            if r >> n:
                raise ValueError(f"pair target out of range for n={n}")

    @property
    def n(self) -> int:
        return self.space.n

    def row(self, x: int) -> int:
        return self.rows[x]

    def contains(self, x: int, y: int) -> bool:
        return bool((self.rows[x] >> y) & 1)

    def pairs(self) -> Iterator[Tuple[int, int]]:
        for x, r in enumerate(self.rows):
            for y in iter_bits(r):
                yield x, y

    def size(self) -> int:
        return sum(r.bit_count() for r in self.rows)

    def is_empty(self) -> bool:
        return not any(self.rows)

    def domain(self) -> PointSet:
        return PointSet(self.space, bits_of(x for x, r in enumerate(self.rows) if r))

    def to_matrix(self) -> np.ndarray:
        return rows_to_matrix(self.rows, self.n)

    @classmethod
    def from_matrix(cls, space: FiniteSpace, m: np.ndarray) -> "Relation":
        return cls(space, matrix_to_rows(m))

    @classmethod
    def from_pairs(cls, space: FiniteSpace, pairs: Iterable[Tuple[int, int]]) -> "Relation":
        rows = [0] * space.n
        for x, y in pairs:
            if not (0 <= x < space.n and 0 <= y < space.n):
                raise ValueError(f"pair ({x}, {y}) out of range for n={space.n}")
            rows[x] |= 1 << y
        return cls(space, tuple(rows))

    @classmethod
    def identity(cls, space: FiniteSpace) -> "Relation":
        return cls(space, tuple(1 << i for i in range(space.n)))

    @classmethod
    def full(cls, space: FiniteSpace) -> "Relation":
        m = space.all_bits
        return cls(space, tuple(m for _ in range(space.n)))

    @classmethod
    def empty(cls, space: FiniteSpace) -> "Relation":
        return cls(space, tuple(0 for _ in range(space.n)))

    def to_edge_text(self) -> str:
        lines = [f"{x} {y}" for x, y in self.pairs()]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_edge_text(cls, space: FiniteSpace, text: str) -> "Relation":
        pairs = []
        for raw in text.splitlines():
            s = raw.strip()
            if not s or s.startswith("#"):
                continue
            u, v = s.split()
            pairs.append((int(u), int(v)))
        return cls.from_pairs(space, pairs)

    def to_json(self) -> Dict[str, Any]:
        return {"n": self.n, "pairs": [[x, y] for x, y in self.pairs()]}

    @classmethod
    def from_json(cls, d: Dict[str, Any], space: Optional[FiniteSpace] = None) -> "Relation":
        sp = space if space is not None else FiniteSpace(int(d["n"]))
        if sp.n != int(d["n"]):
            raise SpaceMismatch(f"json relation has n={d['n']}, space has n={sp.n}")
        return cls.from_pairs(sp, ((int(u), int(v)) for u, v in d.get("pairs", [])))


@dataclass(frozen=True)
class LyapunovFn:
    space: FiniteSpace
    values: Tuple[Value, ...]
    subject: Optional[Relation] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.values) != self.space.n:
            raise ValueError(f"expected {self.space.n} values, got {len(self.values)}")

    def __getitem__(self, x: int) -> Value:
        return self.values[x]

    def as_array(self) -> np.ndarray:
        return np.array([float(v) for v in self.values], dtype=float)

    @property
    def exact(self) -> bool:
        return all(isinstance(v, (Fraction, int)) for v in self.values)

    def to_rows(self) -> List[Dict[str, Any]]:
        out = []
        for i, v in enumerate(self.values):
            fr = v if isinstance(v, Fraction) else Fraction(v).limit_denominator(10**12)
            out.append({"point": i, "label": self.space.label(i), "num": fr.numerator, "den": fr.denominator})
        return out

    def to_json(self) -> Dict[str, Any]:
        return {"n": self.space.n, "values": [[r["num"], r["den"]] for r in self.to_rows()]}


@dataclass(frozen=True)
class SufficientSet:
    space: FiniteSpace
    functions: Tuple[LyapunovFn, ...] = ()
    subject: Optional[Relation] = field(default=None, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.functions)

    def __iter__(self) -> Iterator[LyapunovFn]:
        return iter(self.functions)

    def to_json(self) -> List[Dict[str, Any]]:
        return [L.to_json() for L in self.functions]


@dataclass(frozen=True)
class Metric:
    coords: np.ndarray = field(compare=False, repr=False)
    eps: Tuple[float, ...] = ()
    norm: str = "euclid"  # euclid|max

    def __post_init__(self) -> None:
        c = np.asarray(self.coords, dtype=float)
        if c.ndim == 1:
            c = c.reshape(-1, 1)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        if self.norm not in ("euclid", "max"):
            raise ValueError(f"unknown norm: {self.norm!r}")

    @property
    def n(self) -> int:
        return int(self.coords.shape[0])

    def distances_from(self, idx: np.ndarray) -> np.ndarray:
        diff = self.coords[np.asarray(idx)][:, None, :] - self.coords[None, :, :]
        if self.norm == "max":
            return np.abs(diff).max(axis=2)
        return np.sqrt((diff * diff).sum(axis=2))


@dataclass(frozen=True)
class EntourageFamily:
    space: FiniteSpace
    entourages: Tuple[Relation, ...]
    metric: Optional[Metric] = field(default=None, compare=False, repr=False)

    @property
    def smallest(self) -> Relation:
        return self.entourages[-1]

    def to_json(self) -> Any:
        if self.metric is not None:
            return {"metric": {"coords": self.metric.coords.tolist(), "eps": list(self.metric.eps), "norm": self.metric.norm}}
        return [V.to_json()["pairs"] for V in self.entourages]


@dataclass
class WindowModel:
    """A finite window onto an open system, with the closure data at infinity supplied explicitly."""

    interior: FiniteSpace
    f: Relation
    escape_out: Dict[int, str] = field(default_factory=dict)  # cell -> direction tag
    escape_in: Dict[int, str] = field(default_factory=dict)
    proper_flag: bool = False
    directions: Dict[str, int] = field(default_factory=dict)  # tag -> representative cell
    direction_pairs: Tuple[Tuple[str, str], ...] = ()  # dynamics among directions; empty means self-loops
    boundary: int = 0  # bitset of frontier cells

    def __post_init__(self) -> None:
        self.interior.require_same(self.f.space, "window and relation")
        n = self.interior.n
        for c in list(self.escape_out) + list(self.escape_in):
            if not 0 <= c < n:
                raise ValueError(f"escape cell {c} outside window of {n} cells")

    def escape_out_set(self) -> PointSet:
        return PointSet.of(self.interior, self.escape_out.keys())

    def escape_in_set(self) -> PointSet:
        return PointSet.of(self.interior, self.escape_in.keys())

    def boundary_set(self) -> PointSet:
        return PointSet(self.interior, self.boundary)

    def tags(self) -> List[str]:
        seen = dict.fromkeys(list(self.directions) + list(self.escape_out.values()) + list(self.escape_in.values()))
        return sorted(seen)


@dataclass(frozen=True)
class CompactifiedSystem:
    ambient: FiniteSpace
    interior_mask: PointSet
    fhat: Relation
    f: Relation  # fhat restricted to the interior, re-indexed
    interior: FiniteSpace
    proper_flag: bool = False
    boundary: int = 0  # ambient bitset of interior frontier cells
    escape_out: int = 0  # ambient bitset

    @property
    def infinity(self) -> PointSet:
        return self.interior_mask.complement()

    def interior_points(self) -> List[int]:
        return self.interior_mask.members()

    def to_json(self) -> Dict[str, Any]:
        return {
            "ambient": list(self.ambient.labels) if self.ambient.labels else self.ambient.n,
            "interior": self.interior_mask.members(),
            "fhat": [[x, y] for x, y in self.fhat.pairs()],
        }


@dataclass(frozen=True)
class RayRule:
    src: str
    dst: str
    shift: int  # -1, 0 or +1
    start: int = 0  # applies for n >= start


@dataclass(frozen=True, order=True)
class RayAtom:
    """A block of pairs of a ray relation.

    kind RR: ((src, n), (dst, m)) with n0 <= n <= n1 and max(n + a, p) <= m <= min(n + b, q)
    kind PR: (src, (dst, m)) with p <= m <= q
    kind RP: ((src, n), dst) with n0 <= n <= n1
    kind PP: (src, dst)
    """

    kind: str
    src: str
    dst: str
    n0: float = 0
    n1: float = INF
    a: float = -INF
    b: float = INF
    p: float = 0
    q: float = INF


@dataclass(frozen=True)
class RaySystem:
    rays: Tuple[str, ...]
    base_points: Tuple[str, ...] = ()
    limits: Tuple[Tuple[str, str], ...] = ()  # (ray, limit point); rays sharing a limit are glued
    atoms: Tuple[RayAtom, ...] = ()
    rules: Tuple[RayRule, ...] = ()
    exact: bool = True

    @property
    def limit_of(self) -> Dict[str, str]:
        return dict(self.limits)

    @property
    def limit_points(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(p for _, p in self.limits))

    @property
    def points(self) -> Tuple[str, ...]:
        return tuple(self.base_points) + tuple(p for p in self.limit_points if p not in self.base_points)


@dataclass
class Grid:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    shape: Tuple[int, ...]
    mask: Optional[np.ndarray] = field(default=None, repr=False)  # full-grid bool array of active cells

    def __post_init__(self) -> None:
        self.lower = tuple(float(v) for v in self.lower)
        self.upper = tuple(float(v) for v in self.upper)
        self.shape = tuple(int(v) for v in self.shape)
        if not (len(self.lower) == len(self.upper) == len(self.shape)):
            raise ValueError("grid bounds and shape must agree in dimension")
        for lo, hi, k in zip(self.lower, self.upper, self.shape):
            if not hi > lo or k < 1:
                raise ValueError(f"bad grid axis: [{lo}, {hi}] with {k} cells")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(self.shape)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def widths(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / np.array(self.shape)

    @cached_property
    def active_full(self) -> np.ndarray:
        if self.mask is None:
            return np.arange(int(np.prod(self.shape)))
        return np.flatnonzero(self.mask.ravel())

    @cached_property
    def full_to_active(self) -> np.ndarray:
        out = np.full(int(np.prod(self.shape)), -1, dtype=np.int64)
        out[self.active_full] = np.arange(self.active_full.size)
        return out

    @property
    def n(self) -> int:
        return int(self.active_full.size)

    def multi_index(self, cells: Optional[np.ndarray] = None) -> np.ndarray:
        full = self.active_full if cells is None else self.active_full[np.asarray(cells)]
        return np.stack(np.unravel_index(full, self.shape), axis=-1).reshape(-1, self.dim)

    def cells_of_multi(self, mi: np.ndarray) -> np.ndarray:
        """Active cell ids for multi-indices; -1 where outside the grid or masked."""
        mi = np.asarray(mi, dtype=np.int64).reshape(-1, self.dim)
        ok = np.all((mi >= 0) & (mi < np.array(self.shape)), axis=1)
        out = np.full(mi.shape[0], -1, dtype=np.int64)
        if ok.any():
            flat = np.ravel_multi_index(tuple(mi[ok].T), self.shape)
            out[ok] = self.full_to_active[flat]
        return out

    def to_units(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, self.dim)
        lo = np.array(self.lower)
        span = np.array(self.upper) - lo
        return (pts - lo) / span * np.array(self.shape)

    def cell_of(self, pts: np.ndarray) -> np.ndarray:
        u = np.floor(self.to_units(pts)).astype(np.int64)
        return self.cells_of_multi(u)

    def centers(self, cells: Optional[np.ndarray] = None) -> np.ndarray:
        mi = self.multi_index(cells)
        return np.array(self.lower) + (mi + 0.5) * self.widths

    def cell_bounds(self, cells: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        mi = self.multi_index(cells)
        lo = np.array(self.lower)
        span = np.array(self.upper) - lo
        shape = np.array(self.shape)
        return lo + span * mi / shape, lo + span * (mi + 1) / shape

    def neighbors(
        self,
        cells: Optional[np.ndarray] = None,
        radius: int = 1,
        wrap: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    ) -> np.ndarray:
        """Active cells within `radius` steps of each cell, -1 where none; shape (cells, (2r+1)^d)."""
        steps = np.arange(-radius, radius + 1)
        offs = np.stack(np.meshgrid(*([steps] * self.dim), indexing="ij"), axis=-1).reshape(-1, self.dim)
        c = self.centers(cells)
        pts = (c[:, None, :] + offs[None, :, :] * self.widths).reshape(-1, self.dim)
        if wrap is not None:
            pts = wrap(pts)
        return self.cell_of(pts).reshape(c.shape[0], offs.shape[0])

    def space(self) -> FiniteSpace:
        return FiniteSpace(self.n, coords=self.centers())


@dataclass
class FlowModel:
    kind: str  # closed_form|ode|combinatorial
    grid: Optional[Grid] = None
    phi: Optional[Callable[[float, np.ndarray], np.ndarray]] = field(default=None, repr=False)
    vector_field: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    step: float = 0.0  # integrator step for ode flows; 0 picks one from the grid
    reversible: bool = True
    base: Optional[Relation] = field(default=None, repr=False)  # cascade for combinatorial flows
    slices: int = 1
    thread_safe: bool = True
    name: str = ""
    wrap: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)  # quotient map for glued windows

    def __post_init__(self) -> None:
        if self.kind not in ("closed_form", "ode", "combinatorial"):
            raise ValueError(f"unknown flow kind: {self.kind!r}")
        if self.kind == "closed_form" and self.phi is None:
            raise ValueError("closed_form flow needs phi")
        if self.kind == "ode" and self.vector_field is None:
            raise ValueError("ode flow needs a vector field")
        if self.kind == "combinatorial" and (self.base is None or self.slices < 1):
            raise ValueError("combinatorial flow needs a base relation and slices >= 1")


@dataclass
class FlowRelations:
    flow: FlowModel
    space: FiniteSpace
    phi_i: Relation
    phi_j: Relation
    f1: Relation
    core_i: Relation
    core_j: Relation
    core_f1: Relation
    escape_out: int = 0
    escape_in: int = 0
    dilation: int = 1
    exact: bool = False
    steps: Dict[str, Any] = field(default_factory=dict)


@dataclass
class RegularFn:
    evaluate: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    zero_cells: int = 0  # grid bitset of X0 when built on a grid
    proper: bool = False
    bound: float = 0.0  # declared M: min of V on the boundary ring exceeds it when proper
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self.evaluate(np.asarray(pts, dtype=float)), dtype=float).reshape(-1)


@dataclass
class TimeChange:
    flow: FlowModel
    v: RegularFn
    quad_tol: float = 1e-8
    root_tol: float = 1e-9
    horizon: float = 1e5
    direction: int = 1  # -1 integrates the reverse flow
    cache: Dict[Any, Any] = field(default_factory=dict, repr=False)
