"""Rectangular spatial lattices and grid functions.

A SpatialGrid is the product of per-dimension node arrays inside a truncation
box; a GridFunction attaches one real value per node.  These are the currency
passed between the face-lift, the solver and the file formats.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Box:
    """Open box  prod_i (lo_i, hi_i);  edges may be +-inf."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _frozen(np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", _frozen(np.atleast_1d(self.hi)))
        if self.lo.shape != self.hi.shape:
            raise ValueError("box bounds must have matching shapes")
        if not np.all(self.lo <= self.hi):
            raise ValueError("box must be nonempty: lo <= hi required")

    @property
    def dim(self) -> int:
        return self.lo.size

    def contains(self, x, strict: bool = True) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if strict:
            return bool(np.all(x > self.lo) and np.all(x < self.hi))
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def contains_box(self, other: "Box", strict: bool = True) -> bool:
        """Whether `other` sits inside self; strict only where self is finite."""
        lo_ok = np.where(np.isfinite(self.lo) & strict, other.lo > self.lo, other.lo >= self.lo)
        hi_ok = np.where(np.isfinite(self.hi) & strict, other.hi < self.hi, other.hi <= self.hi)
        return bool(np.all(lo_ok) and np.all(hi_ok))

    def center(self) -> np.ndarray:
        lo = np.where(np.isfinite(self.lo), self.lo, -1.0)
        hi = np.where(np.isfinite(self.hi), self.hi, 1.0)
        return 0.5 * (lo + hi)


@dataclass(frozen=True)
class SpatialGrid:
    """Strictly increasing node arrays per dimension plus the truncation box."""

    axes: tuple
    box: Box = None

    def __post_init__(self):
        axes = tuple(_frozen(np.atleast_1d(a)) for a in self.axes)
        object.__setattr__(self, "axes", axes)
        for a in axes:
            if a.size < 3:
                raise ValueError("need at least 3 nodes per dimension")
            if not np.all(np.diff(a) > 0):
                raise ValueError("nodes must be strictly increasing")
        if self.box is None:
            object.__setattr__(
                self, "box", Box(np.array([a[0] for a in axes]), np.array([a[-1] for a in axes]))
            )
        for a, lo, hi in zip(axes, self.box.lo, self.box.hi):
            if a[0] < lo or a[-1] > hi:
                raise ValueError("nodes must lie in the closure of the truncation box")

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def nodes(self) -> np.ndarray:
        """All nodes as an (n_nodes, dim) array, C-order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def nearest_index(self, x) -> tuple:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = []
        for a, xi in zip(self.axes, x):
            j = int(np.searchsorted(a, xi))
            if j == 0:
                idx.append(0)
            elif j >= a.size:
                idx.append(a.size - 1)
            else:
                idx.append(j if a[j] - xi < xi - a[j - 1] else j - 1)
        return tuple(idx)

    def refine(self) -> "SpatialGrid":
        """Dyadic refinement: insert midpoints, keeping all current nodes."""
        new_axes = []
        for a in self.axes:
            mid = 0.5 * (a[:-1] + a[1:])
            merged = np.empty(a.size + mid.size)
            merged[0::2] = a
            merged[1::2] = mid
            new_axes.append(merged)
        return SpatialGrid(tuple(new_axes), self.box)

    def __eq__(self, other):
        if not isinstance(other, SpatialGrid):
            return NotImplemented
        return self.shape == other.shape and all(
            np.array_equal(a, b) for a, b in zip(self.axes, other.axes)
        )


def uniform_grid(lo, hi, n) -> SpatialGrid:
    lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
    n = np.broadcast_to(np.asarray(n, int), lo.shape)
    return SpatialGrid(tuple(np.linspace(a, b, k) for a, b, k in zip(lo, hi, n)))


def log_grid(lo, hi, n) -> SpatialGrid:
    """Geometrically spaced nodes; requires 0 < lo < hi (one dimension)."""
    if lo <= 0:
        raise ValueError("log grid needs positive bounds")
    return SpatialGrid((np.geomspace(lo, hi, n),))


@dataclass(frozen=True)
class GridFunction:
    """Values of a scalar function on a SpatialGrid."""

    grid: SpatialGrid
    values: np.ndarray = field(compare=False)

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != self.grid.shape:
            raise GridMismatchError(
                f"values shape {v.shape} does not match grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "values", v)

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.grid, np.asarray(values, dtype=float))

    def interpolate(self, x) -> float:
        """Multilinear interpolation, clamped to the box."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.grid.dim == 1:
            return float(np.interp(x[0], self.grid.axes[0], self.values))
        # d-linear interpolation via successive 1-d passes
        vals = self.values
        for d, a in enumerate(self.grid.axes):
            xi = min(max(x[d], a[0]), a[-1])
            j = int(np.clip(np.searchsorted(a, xi) - 1, 0, a.size - 2))
            t = (xi - a[j]) / (a[j + 1] - a[j])
            vals = (1 - t) * np.take(vals, j, axis=0) + t * np.take(vals, j + 1, axis=0)
        return float(vals)

    def to_csv(self) -> str:
        coords = self.grid.nodes()
        out = io.StringIO()
        dim = self.grid.dim
        out.write(",".join(f"x{i}" for i in range(dim)) + ",value\n")
        flat = self.values.ravel()
        for row, val in zip(coords, flat):
            out.write(",".join(repr(float(c)) for c in row) + f",{float(val)!r}\n")
        return out.getvalue()


def grid_function_from_csv(text: str) -> GridFunction:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    header = lines[0].split(",")
    dim = len(header) - 1
    rows = np.array([[float(tok) for tok in ln.split(",")] for ln in lines[1:]])
    coords, vals = rows[:, :dim], rows[:, dim]
    axes = tuple(np.unique(coords[:, d]) for d in range(dim))
    shape = tuple(a.size for a in axes)
    if int(np.prod(shape)) != len(vals):
        raise ValueError("CSV rows do not form a full tensor grid")
    # rows may come in any order; sort into C order
    keys = np.zeros(len(vals), dtype=int)
    for d in range(dim):
        keys = keys * shape[d] + np.searchsorted(axes[d], coords[:, d])
    values = np.empty(int(np.prod(shape)))
    values[keys] = vals
    return GridFunction(SpatialGrid(axes), values.reshape(shape))
