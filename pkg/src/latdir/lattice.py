"""Scaled-lattice geometry: sites of (1/n)Z^d, boxes, grid functions and norms.

Sites are stored as integer coordinate vectors; the 1/n scaling is applied
only when a real-space position is actually needed.  This keeps equality,
hashing and path combinatorics exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np


@dataclass(frozen=True)
class LatticeScale:
    """The lattice (1/n)Z^d with mesh 1/n."""

    n: int
    d: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"lattice parameter n must be >= 1, got {self.n}")
        if self.d < 1:
            raise ValueError(f"dimension d must be >= 1, got {self.d}")

    @property
    def mesh(self) -> float:
        return 1.0 / self.n


@dataclass(frozen=True)
class Site:
    """A lattice site; real-space position is coords/n."""

    coords: tuple[int, ...]
    scale: LatticeScale

    def __post_init__(self) -> None:
        if len(self.coords) != self.scale.d:
            raise ValueError(
                f"coords of length {len(self.coords)} on a d={self.scale.d} lattice"
            )

    def position(self) -> tuple[float, ...]:
        n = self.scale.n
        return tuple(c / n for c in self.coords)

    def shift(self, axis: int, steps: int = 1) -> "Site":
        c = list(self.coords)
        c[axis] += steps
        return Site(tuple(c), self.scale)

    def translate(self, dcoords: tuple[int, ...]) -> "Site":
        return Site(tuple(a + b for a, b in zip(self.coords, dcoords)), self.scale)


def origin(scale: LatticeScale) -> Site:
    return Site((0,) * scale.d, scale)


def site(scale: LatticeScale, *coords: int) -> Site:
    return Site(tuple(coords), scale)


def euclid(x: Site, y: Site) -> float:
    """Euclidean distance between two sites of the same lattice."""
    _check_same_scale(x, y)
    n = x.scale.n
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(x.coords, y.coords))) / n


def l1_steps(x: Site, y: Site) -> int:
    """Number of nearest-neighbour steps separating x and y.

    This is n*|x_1-y_1| + ... + n*|x_d-y_d|, an exact integer.
    """
    _check_same_scale(x, y)
    return sum(abs(a - b) for a, b in zip(x.coords, y.coords))


def _check_same_scale(x: Site, y: Site) -> None:
    if x.scale != y.scale:
        raise ValueError(f"sites live on different lattices: {x.scale} vs {y.scale}")


def floor_embed(x, scale: LatticeScale) -> Site:
    """Map a point of R^d to the lattice by componentwise floor of n*x_i.

    Floor (not round), including for negative coordinates, so that each
    point belongs to exactly one half-open cell [w, w + 1/n).
    """
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if xs.shape != (scale.d,):
        raise ValueError(f"expected a point of R^{scale.d}, got shape {xs.shape}")
    return Site(tuple(int(math.floor(scale.n * xi)) for xi in xs), scale)


@dataclass(frozen=True)
class Box:
    """The discrete Euclidean ball {y : |center - y| < radius} (strict)."""

    center: Site
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("box radius must be positive")

    @property
    def scale(self) -> LatticeScale:
        return self.center.scale

    def coords_array(self) -> np.ndarray:
        """All site coordinates in the box, lexicographically sorted, shape (N, d)."""
        n = self.scale.n
        d = self.scale.d
        c = np.asarray(self.center.coords, dtype=np.int64)
        k = int(math.ceil(self.radius * n))
        axes = [np.arange(ci - k, ci + k + 1, dtype=np.int64) for ci in c]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        dist2 = ((grid - c) ** 2).sum(axis=1)
        # strict inequality, in exact integer arithmetic: |x-y| < r  <=>  n^2|x-y|^2 < (rn)^2
        keep = dist2 < (self.radius * n) ** 2
        out = grid[keep]
        order = np.lexsort(out.T[::-1])
        return out[order]

    def sites(self) -> list[Site]:
        sc = self.scale
        return [Site(tuple(int(v) for v in row), sc) for row in self.coords_array()]

    def contains(self, s: Site) -> bool:
        _check_same_scale(self.center, s)
        return euclid(self.center, s) < self.radius

    def __len__(self) -> int:
        return len(self.coords_array())


class GridFunction:
    """A finitely supported real function on (1/n)Z^d; zero off its support.

    All norms and inner products are taken against the uniform reference
    measure mu^n, which assigns mass n^{-d} to every site.
    """

    def __init__(self, scale: LatticeScale, values: Mapping[tuple[int, ...], float]):
        self.scale = scale
        self._values = {tuple(int(c) for c in k): float(v) for k, v in values.items()}
        for k in self._values:
            if len(k) != scale.d:
                raise ValueError(f"coordinate {k} does not match d={scale.d}")

    @classmethod
    def from_sites(cls, pairs: Mapping[Site, float]) -> "GridFunction":
        scales = {s.scale for s in pairs}
        if len(scales) != 1:
            raise ValueError("sites of a grid function must share one lattice")
        (scale,) = scales
        return cls(scale, {s.coords: v for s, v in pairs.items()})

    @classmethod
    def indicator(cls, s: Site) -> "GridFunction":
        return cls(s.scale, {s.coords: 1.0})

    def __call__(self, where) -> float:
        if isinstance(where, Site):
            _check_same_scale_gf(self, where)
            key = where.coords
        else:
            key = tuple(int(c) for c in where)
        return self._values.get(key, 0.0)

    def items(self) -> Iterator[tuple[tuple[int, ...], float]]:
        return iter(sorted(self._values.items()))

    def support(self) -> list[tuple[int, ...]]:
        return sorted(self._values)

    def support_sites(self) -> list[Site]:
        return [Site(c, self.scale) for c in self.support()]

    def __len__(self) -> int:
        return len(self._values)


def _check_same_scale_gf(f: GridFunction, s: Site) -> None:
    if f.scale != s.scale:
        raise ValueError("site and grid function live on different lattices")


def restrict(g: Callable[..., float], box: Box) -> GridFunction:
    """Evaluate a function of R^d pointwise at the lattice sites of a box."""
    scale = box.scale
    n = scale.n
    vals = {}
    for row in box.coords_array():
        key = tuple(int(v) for v in row)
        pos = tuple(c / n for c in key)
        vals[key] = float(g(pos) if scale.d > 1 else g(pos[0]))
    return GridFunction(scale, vals)


def extend(u: GridFunction) -> Callable[..., float]:
    """Extend a grid function to a step function on R^d.

    The extension is constant on each half-open cell prod_i [w_i, w_i + 1/n)
    with value u(w), i.e. x -> u(floor_embed(x)).
    """
    scale = u.scale

    def step(*args) -> float:
        x = args[0] if len(args) == 1 else args
        return u(floor_embed(x, scale))

    return step


def bracket_n(h1: GridFunction, h2: GridFunction) -> float:
    """Inner product n^{-d} * sum_x h1(x) h2(x)."""
    if h1.scale != h2.scale:
        raise ValueError("mismatched lattices")
    mu = h1.scale.n ** (-h1.scale.d)
    if len(h2) < len(h1):
        h1, h2 = h2, h1
    return mu * sum(v * h2(k) for k, v in h1.items())


def norm_p(f: GridFunction, p: float) -> float:
    """The L^p norm of f against mu^n: (sum_x |f(x)|^p n^{-d})^{1/p}."""
    if p < 1:
        raise ValueError("p must be >= 1")
    mu = f.scale.n ** (-f.scale.d)
    total = mu * sum(abs(v) ** p for _, v in f.items())
    return total ** (1.0 / p)


# ---------------------------------------------------------------------------
# serialization: CSV with one coordinate column per axis, plus a JSON sidecar
# recording the lattice.


def save_grid_function(f: GridFunction, path) -> None:
    path = Path(path)
    d = f.scale.d
    header = ",".join(f"coord_{i + 1}" for i in range(d)) + ",value"
    lines = [header]
    for coords, v in f.items():
        lines.append(",".join(str(c) for c in coords) + f",{v!r}")
    path.write_text("\n".join(lines) + "\n")
    sidecar = path.with_name(path.stem + ".meta.json")
    sidecar.write_text(json.dumps({"n": f.scale.n, "d": d}, sort_keys=True) + "\n")


def load_grid_function(path) -> GridFunction:
    path = Path(path)
    sidecar = path.with_name(path.stem + ".meta.json")
    meta = json.loads(sidecar.read_text())
    scale = LatticeScale(int(meta["n"]), int(meta["d"]))
    vals = {}
    lines = path.read_text().strip().splitlines()
    for line in lines[1:]:
        parts = line.split(",")
        vals[tuple(int(c) for c in parts[: scale.d])] = float(parts[scale.d])
    return GridFunction(scale, vals)
