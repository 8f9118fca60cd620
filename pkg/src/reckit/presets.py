from __future__ import annotations

import math
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from reckit import rayspace as rs
from reckit.models import FiniteSpace, FlowModel, Grid, RaySystem, Relation


def _shape(lower: Sequence[float], upper: Sequence[float], h: float) -> Tuple[int, ...]:
    return tuple(max(1, int(round((b - a) / h))) for a, b in zip(lower, upper))


def translation_flow(lower: float = 0.0, upper: float = 10.0, h: float = 0.1, dim: int = 1, width: float = 1.0) -> FlowModel:
    """ẋ = e₀ on [lower, upper] × [-width/2, width/2]^(dim-1)."""
    lo = (lower,) + (-width / 2.0,) * (dim - 1)
    hi = (upper,) + (width / 2.0,) * (dim - 1)
    e0 = np.zeros(dim)
    e0[0] = 1.0

    def phi(t: float, x: np.ndarray) -> np.ndarray:
        return x + t * e0

    return FlowModel("closed_form", grid=Grid(lo, hi, _shape(lo, hi, h)), phi=phi, name="translation")


def stationary_flow(lower: float = 0.0, upper: float = 1.0, h: float = 0.1) -> FlowModel:
    return FlowModel("closed_form", grid=Grid((lower,), (upper,), _shape((lower,), (upper,), h)), phi=lambda t, x: x, name="stationary")


def expanding_flow(lower: float = -2.0, upper: float = 2.0, h: float = 0.05) -> FlowModel:
    """ẋ = x."""
    return FlowModel(
        "closed_form", grid=Grid((lower,), (upper,), _shape((lower,), (upper,), h)),
        phi=lambda t, x: x * math.exp(t), name="expanding",
    )


def contracting_flow(lower: float = -2.0, upper: float = 2.0, h: float = 0.05) -> FlowModel:
    """ẋ = −x."""
    return FlowModel(
        "closed_form", grid=Grid((lower,), (upper,), _shape((lower,), (upper,), h)),
        phi=lambda t, x: x * math.exp(-t), name="contracting",
    )


def gradient_cos_flow(lower: float = -2.5, upper: float = 2.5, h: float = 0.05) -> FlowModel:
    """Gradient flow of cos(2πx): attracting integers, repelling half-integers."""

    def phi(t: float, x: np.ndarray) -> np.ndarray:
        n = np.round(x)
        u = np.pi * (x - n)
        return n + np.arctan(np.tan(u) * np.exp(-4.0 * np.pi ** 2 * t)) / np.pi

    return FlowModel("closed_form", grid=Grid((lower,), (upper,), _shape((lower,), (upper,), h)), phi=phi, name="gradient-cos")


def disc_field(twisted: bool = False) -> Callable[[np.ndarray], np.ndarray]:
    """ṙ = r(1−r), θ̇ = r(1−r) (+ sin²(θ/2) when twisted), in Cartesian form."""

    def field(p: np.ndarray) -> np.ndarray:
        x, y = p[:, 0], p[:, 1]
        r = np.hypot(x, y)
        s = 1.0 - r
        w = r * s
        if twisted:
            cos_t = np.divide(x, r, out=np.ones_like(r), where=r > 0)
            w = w + (1.0 - cos_t) / 2.0
        return np.stack([s * x - w * y, s * y + w * x], axis=1)

    return field


def disc_flow(h: float = 0.05, twisted: bool = False, centered: bool = False) -> FlowModel:
    """The disc flow on [-1, 1]², or on a window h/2 wider so the origin is a cell center."""
    a = 1.0 + h / 2.0 if centered else 1.0
    lo, hi = (-a, -a), (a, a)
    grid = Grid(lo, hi, _shape(lo, hi, h))
    full = Grid(lo, hi, grid.shape)
    r = np.hypot(*full.centers().T)
    mask = (r <= 1.0 + h * math.sqrt(2.0) / 2.0).reshape(grid.shape)
    return FlowModel(
        "ode", grid=Grid(lo, hi, grid.shape, mask), vector_field=disc_field(twisted),
        name="disc-twisted" if twisted else "disc",
    )


def mobius_wrap(p: np.ndarray) -> np.ndarray:
    """(x, y) ~ (x − 1, −y)."""
    k = np.floor(p[:, 0])
    out = p.copy()
    out[:, 0] = p[:, 0] - k
    out[:, 1] = np.where(k.astype(np.int64) % 2 == 0, p[:, 1], -p[:, 1])
    return out


def mobius_field(p: np.ndarray) -> np.ndarray:
    x, y = p[:, 0], p[:, 1]
    g = np.sin(np.pi * x) ** 2 + np.maximum(0.0, y * np.cos(np.pi * x)) ** 2
    return np.stack([g, np.zeros_like(g)], axis=1)


def mobius_flow(h: float = 0.05) -> FlowModel:
    """Flow along a Möbius strip whose fixed half-seam is cut out of the window."""
    lo, hi = (0.0, -1.0), (1.0, 1.0)
    shape = _shape(lo, hi, h)
    full = Grid(lo, hi, shape)
    a, b = full.cell_bounds()
    mi = full.multi_index()
    cut = ((mi[:, 0] == 0) & (a[:, 1] < 0.0)) | ((mi[:, 0] == shape[0] - 1) & (b[:, 1] > 0.0))
    return FlowModel(
        "ode", grid=Grid(lo, hi, shape, (~cut).reshape(shape)), vector_field=mobius_field,
        wrap=mobius_wrap, name="mobius",
    )


FLOWS: Dict[str, Callable[..., FlowModel]] = {
    "translation": translation_flow,
    "stationary": stationary_flow,
    "expanding": expanding_flow,
    "contracting": contracting_flow,
    "gradient-cos": gradient_cos_flow,
    "disc": disc_flow,
    "mobius": mobius_flow,
}

RAY_SYSTEMS: Dict[str, Callable[[], RaySystem]] = {
    "ladder": rs.ladder_system,
    "rotating": rs.rotating_system,
    "translation": rs.translation_system,
}


def cycle(n: int, labels: Optional[Sequence[str]] = None) -> Relation:
    sp = FiniteSpace(n, tuple(labels) if labels else ())
    return Relation.from_pairs(sp, [(i, (i + 1) % n) for i in range(n)])
