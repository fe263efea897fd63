"""Constraint oracles: deterministic membership predicates on R^d.

An oracle maps every point to {0, 1}; the positive region is closed, so
boundary points count as inside.  Specs are immutable, evaluation is pure,
and every spec round-trips through a JSON object with a "kind" discriminator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError


def evaluate(oracle, x: np.ndarray) -> np.ndarray:
    """Vectorized membership: 1 where x is in the positive region, else 0."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(pts)):
        raise ContractError("oracle input must be finite")
    if pts.shape[1] != oracle.dim:
        raise ConfigError(f"point dim {pts.shape[1]} != oracle dim {oracle.dim}")
    labels = oracle.contains(pts).astype(np.int64)
    return labels[0] if np.asarray(x).ndim == 1 else labels


@dataclass(frozen=True)
class Checkerboard:
    """Alternating unit cells; positive iff floor(x1) + floor(x2) is even.

    Cells live on [-extent, extent]^2; everything outside is negative.  A
    point on a gridline is positive if any adjacent positive cell's closure
    contains it.
    """

    extent: float = 2.0
    cell: float = 1.0
    dim: int = 2

    def contains(self, pts: np.ndarray) -> np.ndarray:
        u = pts / self.cell
        bound = self.extent / self.cell
        inside = np.all((u >= -bound) & (u <= bound), axis=1)
        result = np.zeros(pts.shape[0], dtype=bool)
        # a gridline point belongs to the closures of both adjacent cells
        cands_per_axis = []
        for axis in range(2):
            f = np.floor(u[:, axis])
            on_line = u[:, axis] == f
            cands_per_axis.append([(f, None), (f - 1, on_line)])
        for i_cells, i_mask in cands_per_axis[0]:
            for j_cells, j_mask in cands_per_axis[1]:
                ok = inside.copy()
                if i_mask is not None:
                    ok &= i_mask
                if j_mask is not None:
                    ok &= j_mask
                ok &= (i_cells >= -bound) & (i_cells < bound)
                ok &= (j_cells >= -bound) & (j_cells < bound)
                even = np.mod(i_cells + j_cells, 2) == 0
                result |= ok & even
        return result

    def positive_cells(self) -> np.ndarray:
        """Lower-left corners (in cell units) of the positive cells."""
        n = int(round(self.extent / self.cell))
        corners = [(i, j) for i in range(-n, n) for j in range(-n, n)
                   if (i + j) % 2 == 0]
        return np.asarray(corners, dtype=np.float64)


@dataclass(frozen=True)
class Box:
    """Axis-aligned product of closed intervals."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ConfigError("lo/hi length mismatch")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ConfigError("box needs lo <= hi per dimension")

    @property
    def dim(self):
        return len(self.lo)

    def contains(self, pts):
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=1)


@dataclass(frozen=True)
class Disc:
    """Closed disc; ``inside=False`` flips to its closed complement."""

    center: tuple
    radius: float
    inside: bool = True

    def __post_init__(self):
        if self.radius < 0:
            raise ConfigError("radius must be nonnegative")

    @property
    def dim(self):
        return len(self.center)

    def contains(self, pts):
        d2 = np.sum((pts - np.asarray(self.center)) ** 2, axis=1)
        r2 = self.radius ** 2
        return d2 <= r2 if self.inside else d2 >= r2


@dataclass(frozen=True)
class HalfSpace:
    """Points with normal . x >= offset."""

    normal: tuple
    offset: float

    @property
    def dim(self):
        return len(self.normal)

    def contains(self, pts):
        return pts @ np.asarray(self.normal) >= self.offset


@dataclass(frozen=True)
class PolygonUnion:
    """Union of simple polygons in the plane (closed; edges are positive)."""

    polygons: tuple  # tuple of vertex-list tuples, each ((x, y), ...)

    dim: int = 2

    def contains(self, pts):
        result = np.zeros(pts.shape[0], dtype=bool)
        for poly in self.polygons:
            result |= _polygon_contains(np.asarray(poly, dtype=np.float64), pts)
        return result


def _polygon_contains(verts: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Even-odd rule with an edge test so the boundary counts as inside."""
    n = len(verts)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    on_edge = np.zeros(len(pts), dtype=bool)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        within = (np.minimum(x1, x2) - 1e-12 <= x) & (x <= np.maximum(x1, x2) + 1e-12) \
            & (np.minimum(y1, y2) - 1e-12 <= y) & (y <= np.maximum(y1, y2) + 1e-12)
        on_edge |= (np.abs(cross) < 1e-12) & within
        straddles = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_hit = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (x < x_hit)
    return inside | on_edge


@dataclass(frozen=True)
class Complement:
    inner: object

    @property
    def dim(self):
        return self.inner.dim

    def contains(self, pts):
        return ~self.inner.contains(pts)


@dataclass(frozen=True)
class Intersection:
    parts: tuple

    @property
    def dim(self):
        return self.parts[0].dim

    def contains(self, pts):
        out = np.ones(pts.shape[0], dtype=bool)
        for p in self.parts:
            out &= p.contains(pts)
        return out


@dataclass(frozen=True)
class Union:
    parts: tuple

    @property
    def dim(self):
        return self.parts[0].dim

    def contains(self, pts):
        out = np.zeros(pts.shape[0], dtype=bool)
        for p in self.parts:
            out |= p.contains(pts)
        return out


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

def to_dict(oracle) -> dict:
    if isinstance(oracle, Checkerboard):
        return {"kind": "checkerboard", "extent": oracle.extent, "cell": oracle.cell}
    if isinstance(oracle, Box):
        return {"kind": "box", "lo": list(oracle.lo), "hi": list(oracle.hi)}
    if isinstance(oracle, Disc):
        return {"kind": "disc", "center": list(oracle.center),
                "radius": oracle.radius, "inside": oracle.inside}
    if isinstance(oracle, HalfSpace):
        return {"kind": "halfspace", "normal": list(oracle.normal), "offset": oracle.offset}
    if isinstance(oracle, PolygonUnion):
        return {"kind": "polygon_union",
                "polygons": [[list(v) for v in poly] for poly in oracle.polygons]}
    if isinstance(oracle, Complement):
        return {"kind": "complement", "inner": to_dict(oracle.inner)}
    if isinstance(oracle, Intersection):
        return {"kind": "intersection", "parts": [to_dict(p) for p in oracle.parts]}
    if isinstance(oracle, Union):
        return {"kind": "union", "parts": [to_dict(p) for p in oracle.parts]}
    raise ConfigError(f"cannot serialize oracle of type {type(oracle).__name__}")


def from_dict(spec: dict):
    kind = spec.get("kind")
    if kind == "checkerboard":
        return Checkerboard(extent=spec.get("extent", 2.0), cell=spec.get("cell", 1.0))
    if kind == "box":
        return Box(lo=tuple(spec["lo"]), hi=tuple(spec["hi"]))
    if kind == "disc":
        return Disc(center=tuple(spec["center"]), radius=spec["radius"],
                    inside=spec.get("inside", True))
    if kind == "halfspace":
        return HalfSpace(normal=tuple(spec["normal"]), offset=spec["offset"])
    if kind == "polygon_union":
        return PolygonUnion(polygons=tuple(tuple(tuple(v) for v in poly)
                                           for poly in spec["polygons"]))
    if kind == "complement":
        return Complement(inner=from_dict(spec["inner"]))
    if kind == "intersection":
        return Intersection(parts=tuple(from_dict(p) for p in spec["parts"]))
    if kind == "union":
        return Union(parts=tuple(from_dict(p) for p in spec["parts"]))
    raise ConfigError(f"unknown oracle kind {kind!r}")


def to_json(oracle) -> str:
    return json.dumps(to_dict(oracle), indent=2, sort_keys=True)


def from_json(text: str):
    return from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Datasets and infraction statistics
# ---------------------------------------------------------------------------

def make_checkerboard_dataset(n: int, seed: int = 0,
                              board: Checkerboard | None = None) -> np.ndarray:
    """n points uniform over the positive cells; all oracle-positive."""
    if n < 1:
        raise ConfigError("need n >= 1")
    board = board or Checkerboard()
    rng = np.random.default_rng(seed)
    corners = board.positive_cells() * board.cell
    which = rng.integers(0, len(corners), size=n)
    offs = rng.random((n, 2)) * board.cell
    return corners[which] + offs


def infraction_rate(samples: np.ndarray, oracle) -> tuple[float, float]:
    """Fraction of samples the oracle rejects, with binomial stderr."""
    samples = np.atleast_2d(np.asarray(samples))
    n = samples.shape[0]
    if n == 0:
        raise ContractError("infraction_rate needs at least one sample")
    labels = evaluate(oracle, samples)
    rate = float(np.mean(labels == 0))
    stderr = float(np.sqrt(rate * (1.0 - rate) / n))
    return rate, stderr
