"""Shortest-path combinatorics and the edge-localized diffusion field.

Monotone lattice paths between two sites are counted by an exact multinomial;
averaging the edge-traversal indicator over all shortest paths produces edge
weights that localize pair energies onto nearest-neighbour edges.  Summing
the weighted second moments of the short-range conductance yields a matrix
field whose large-n limit is the diffusion matrix of the limiting process.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from .conductance import SplitField
from .lattice import Box, GridFunction, LatticeScale, Site, l1_steps

# above this many steps exact big-integer ratios give way to log-factorials
EXACT_STEP_LIMIT = 64


def _multinomial(parts: tuple[int, ...]) -> int:
    total = sum(parts)
    out = 1
    for p in parts:
        out *= math.comb(total, p)
        total -= p
    return out


def path_count(x: Site, y: Site) -> int:
    """Number of monotone nearest-neighbour paths from x to y (exact integer)."""
    _check_pair(x, y)
    return _multinomial(tuple(abs(a - b) for a, b in zip(x.coords, y.coords)))


def _check_pair(x: Site, y: Site) -> None:
    if x.scale != y.scale:
        raise ValueError("sites live on different lattices")


def _within_span(c, cx, cy) -> bool:
    return all(min(a, b) <= v <= max(a, b) for v, a, b in zip(c, cx, cy))


def edge_weight(x: Site, y: Site, w: Site, z: Site):
    """Average traversal weight of the directed edge w -> z over shortest x -> y paths.

    Computed in closed form as count(x..w) * count(z..y) / count(x..y) when
    the step is monotone toward y inside the spanned coordinate box, else 0.
    Exact rational for short pairs, log-factorial float beyond
    ``EXACT_STEP_LIMIT`` steps.
    """
    _check_pair(x, y)
    _check_pair(x, w)
    _check_pair(w, z)
    if l1_steps(w, z) != 1:
        raise ValueError("w and z must be one lattice step apart")
    k = l1_steps(x, y)
    exact = k <= EXACT_STEP_LIMIT
    zero = Fraction(0) if exact else 0.0
    if k == 0:
        return zero
    cw, cz = w.coords, z.coords
    if not (_within_span(cw, x.coords, y.coords) and _within_span(cz, x.coords, y.coords)):
        return zero
    axis = next(i for i in range(len(cw)) if cw[i] != cz[i])
    step = cz[axis] - cw[axis]
    toward = y.coords[axis] - x.coords[axis]
    if toward == 0 or (step > 0) != (toward > 0):
        return zero
    parts_xw = tuple(abs(a - b) for a, b in zip(x.coords, cw))
    parts_zy = tuple(abs(a - b) for a, b in zip(cz, y.coords))
    if exact:
        return Fraction(
            _multinomial(parts_xw) * _multinomial(parts_zy),
            path_count(x, y),
        )
    parts_xy = tuple(abs(a - b) for a, b in zip(x.coords, y.coords))
    return math.exp(
        _log_multinomial(parts_xw) + _log_multinomial(parts_zy) - _log_multinomial(parts_xy)
    )


def _log_multinomial(parts: tuple[int, ...]) -> float:
    return math.lgamma(sum(parts) + 1) - sum(math.lgamma(p + 1) for p in parts)


def enumerate_paths(x: Site, y: Site, cap: int = 10**6) -> list[list[Site]]:
    """All monotone shortest paths from x to y; enumeration oracle for tests."""
    _check_pair(x, y)
    count = path_count(x, y)
    if count > cap:
        raise ValueError(f"path count {count} exceeds cap {cap}")
    scale = x.scale
    target = y.coords
    out: list[list[Site]] = []

    def walk(cur: tuple[int, ...], trail: list[tuple[int, ...]]) -> None:
        if cur == target:
            out.append([Site(c, scale) for c in trail])
            return
        for axis in range(scale.d):
            diff = target[axis] - cur[axis]
            if diff == 0:
                continue
            nxt = list(cur)
            nxt[axis] += 1 if diff > 0 else -1
            nxt = tuple(nxt)
            walk(nxt, trail + [nxt])

    walk(x.coords, [x.coords])
    return out


@dataclass
class PathEnsemble:
    """All shortest paths between a pair, with exact count and edge weights."""

    x: Site
    y: Site

    def __post_init__(self) -> None:
        _check_pair(self.x, self.y)
        self.k = l1_steps(self.x, self.y)
        self.count = path_count(self.x, self.y)

    def weight(self, w: Site, z: Site):
        return edge_weight(self.x, self.y, w, z)

    def directed_edges(self) -> Iterator[tuple[Site, Site]]:
        """All directed edges with nonzero traversal weight."""
        scale = self.x.scale
        spans = [
            range(min(a, b), max(a, b) + 1)
            for a, b in zip(self.x.coords, self.y.coords)
        ]
        for cw in itertools.product(*spans):
            for axis in range(scale.d):
                toward = self.y.coords[axis] - self.x.coords[axis]
                if toward == 0:
                    continue
                cz = list(cw)
                cz[axis] += 1 if toward > 0 else -1
                cz = tuple(cz)
                if not _within_span(cz, self.x.coords, self.y.coords):
                    continue
                yield Site(cw, scale), Site(cz, scale)


def gradient_identity_residual(u: GridFunction, x: Site, y: Site) -> float:
    """Residual of the exact discrete-gradient identity

    u(x) - u(y) = (1/n) sum_i sum_z (P(z+e_i, z) - P(z, z+e_i)) grad_i u(z).
    """
    _check_pair(x, y)
    lhs = u(x) - u(y)
    rhs = 0.0
    for rel, axis, pdiff in _pair_pattern(
        tuple(b - a for a, b in zip(x.coords, y.coords))
    ):
        zc = tuple(a + r for a, r in zip(x.coords, rel))
        z_up = list(zc)
        z_up[axis] += 1
        rhs += pdiff * (u(tuple(z_up)) - u(zc))
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# per-displacement edge-weight patterns
#
# For a pair (x, y) the signed weight P(z+e_i, z) - P(z, z+e_i) of the edge
# below z depends only on the displacement y - x and the offset z - x, so the
# pattern is computed once per displacement and reused across all pairs.

_PATTERN_CACHE: dict[tuple[int, ...], list[tuple[tuple[int, ...], int, float]]] = {}


def _pair_pattern(disp: tuple[int, ...]) -> list[tuple[tuple[int, ...], int, float]]:
    pat = _PATTERN_CACHE.get(disp)
    if pat is not None:
        return pat
    d = len(disp)
    scale = LatticeScale(1, d)  # combinatorics only; the mesh plays no role
    x = Site((0,) * d, scale)
    y = Site(disp, scale)
    pat = []
    spans = [range(min(0, v), max(0, v) + 1) for v in disp]
    for zc in itertools.product(*spans):
        for axis in range(d):
            up = list(zc)
            up[axis] += 1
            up = tuple(up)
            w_down = w_up = Fraction(0)
            if _within_span(up, x.coords, y.coords):
                w_down = edge_weight(x, y, Site(up, scale), Site(zc, scale))
                w_up = edge_weight(x, y, Site(zc, scale), Site(up, scale))
            pdiff = float(w_down - w_up)
            if pdiff != 0.0:
                pat.append((zc, axis, pdiff))
    _PATTERN_CACHE[disp] = pat
    return pat


# ---------------------------------------------------------------------------
# the diffusion field


@dataclass
class DiffusionField:
    """Matrix field F_ij(z) on a box, with an interior-validity mask.

    Entries at sites within eps_n of the box boundary miss contributions from
    pairs outside the box and are flagged invalid.
    """

    box: Box
    eps_n: float
    coords: np.ndarray  # (N, d) int
    values: np.ndarray  # (N, d, d)
    interior: np.ndarray  # (N,) bool

    def __post_init__(self) -> None:
        self._index = {tuple(int(v) for v in row): i for i, row in enumerate(self.coords)}

    def at(self, site_or_coords) -> np.ndarray:
        key = (
            site_or_coords.coords
            if isinstance(site_or_coords, Site)
            else tuple(int(v) for v in site_or_coords)
        )
        return self.values[self._index[key]]

    def is_interior(self, site_or_coords) -> bool:
        key = (
            site_or_coords.coords
            if isinstance(site_or_coords, Site)
            else tuple(int(v) for v in site_or_coords)
        )
        return bool(self.interior[self._index[key]])

    def symmetry_gap(self) -> float:
        """max |F_ij - F_ji| over interior sites; no symmetrization is applied."""
        vals = self.values[self.interior]
        if len(vals) == 0:
            return 0.0
        return float(np.abs(vals - vals.transpose(0, 2, 1)).max())

    def save_csv(self, path) -> None:
        d = self.box.scale.d
        header = ",".join(f"coord_{i + 1}" for i in range(d)) + ",i,j,F_value,interior_valid"
        lines = [header]
        for idx, row in enumerate(self.coords):
            cs = ",".join(str(int(v)) for v in row)
            flag = int(bool(self.interior[idx]))
            for i in range(d):
                for j in range(d):
                    lines.append(f"{cs},{i + 1},{j + 1},{float(self.values[idx, i, j])!r},{flag}")
        Path(path).write_text("\n".join(lines) + "\n")


def diffusion_field(splitfield: SplitField, box: Box) -> DiffusionField:
    """Assemble F_ij(z) over a box by one pass over short-range pairs.

    Iterates unordered pairs (x, y) with |x - y| <= eps_n whose spanned box
    can touch the target box, distributing each pair's contribution to the
    sites on its shortest paths through the cached edge-weight patterns.
    """
    scale = splitfield.base.scale
    n, d = scale.n, scale.d
    eps = splitfield.eps_n
    c_c = splitfield.c_c

    coords = box.coords_array()
    index = {tuple(int(v) for v in row): i for i, row in enumerate(coords)}
    values = np.zeros((len(coords), d, d))

    outer = Box(box.center, box.radius + eps + 2.0 / n)
    displacements = _eps_displacements(scale, eps)
    for cx in map(tuple, outer.coords_array()):
        for disp, _ in displacements:
            cy = tuple(a + b for a, b in zip(cx, disp))
            if cy <= cx:  # unordered pairs, each counted once
                continue
            rate = c_c.eval_coords(cx, cy)
            if rate == 0.0:
                continue
            dd = tuple(b - a for a, b in zip(cx, cy))
            for rel, axis, pdiff in _pair_pattern(dd):
                zi = index.get(tuple(a + r for a, r in zip(cx, rel)))
                if zi is None:
                    continue
                # ordered-pair sum: the reversed pair contributes identically
                w = 2.0 * pdiff * rate
                for j in range(d):
                    values[zi, axis, j] += w * (-dd[j])
    interior = np.array(
        [
            box.radius - math.sqrt(float(((row - np.asarray(box.center.coords)) ** 2).sum())) / n
            > eps
            for row in coords
        ]
    )
    return DiffusionField(box=box, eps_n=eps, coords=coords, values=values, interior=interior)


def _eps_displacements(scale: LatticeScale, eps: float) -> list[tuple[tuple[int, ...], float]]:
    n, d = scale.n, scale.d
    k = int(math.floor(eps * n * (1 + 1e-12) + 1e-9))
    out = []
    thresh = (eps * n) ** 2 * (1 + 1e-12) + 1e-9
    for off in itertools.product(*[range(-k, k + 1)] * d):
        sq = sum(o * o for o in off)
        if 0 < sq <= thresh:
            out.append((off, math.sqrt(sq) / n))
    return sorted(out)


def g_matrix(
    w: Site, z: Site, i: int, j: int, splitfield: SplitField, box: Box
) -> float:
    """Single entry G_ij(w, z) of the edge-correlation matrix (test-scale query)."""
    table = g_matrix_table(splitfield, box)
    return table.get((w.coords, z.coords, i, j), 0.0)


def g_matrix_table(splitfield: SplitField, box: Box) -> dict:
    """Full table of G_ij(w, z) over a box; quadratic in the box size."""
    scale = splitfield.base.scale
    n, d = scale.n, scale.d
    eps = splitfield.eps_n
    c_c = splitfield.c_c
    coords = {tuple(int(v) for v in row) for row in box.coords_array()}
    out: dict = {}
    outer = Box(box.center, box.radius + eps + 2.0 / n)
    displacements = _eps_displacements(scale, eps)
    for cx in map(tuple, outer.coords_array()):
        for disp, _ in displacements:
            cy = tuple(a + b for a, b in zip(cx, disp))
            if cy <= cx:
                continue
            rate = c_c.eval_coords(cx, cy)
            if rate == 0.0:
                continue
            dd = tuple(b - a for a, b in zip(cx, cy))
            pat = [
                (tuple(a + r for a, r in zip(cx, rel)), axis, pd)
                for rel, axis, pd in _pair_pattern(dd)
            ]
            for zc, i, pz in pat:
                if zc not in coords:
                    continue
                for wc, j, pw in pat:
                    if wc not in coords:
                        continue
                    key = (wc, zc, i, j)
                    out[key] = out.get(key, 0.0) + 2.0 * pz * pw * rate
    return out


def second_moment_matrix(splitfield: SplitField) -> np.ndarray:
    """Interior value of F for translation-invariant fields:
    n^2 sum_{|v| <= eps_n} v_i v_j C(v).  Independent cross-check oracle."""
    scale = splitfield.base.scale
    if not splitfield.base.translation_invariant:
        raise ValueError("second-moment shortcut needs a translation-invariant field")
    n, d = scale.n, scale.d
    zero = (0,) * d
    out = np.zeros((d, d))
    for disp, _ in _eps_displacements(scale, splitfield.eps_n):
        rate = splitfield.c_c.eval_coords(zero, disp)
        if rate == 0.0:
            continue
        v = np.asarray(disp, dtype=float) / n
        out += rate * np.outer(v, v)
    return n * n * out


def a4_l1_error(
    dfield: DiffusionField,
    a: Callable[[np.ndarray], np.ndarray],
    compact_box: Optional[Box] = None,
) -> dict:
    """Riemann-sum local-L^1 distance of F to a target matrix field.

    Reports, per matrix entry, sum_z |F_ij(z) - a_ij(z)| n^{-d} over
    interior-valid sites of the compact box, plus the sup norm of F and the
    ellipticity margins of the symmetrized F.
    """
    box = compact_box if compact_box is not None else dfield.box
    scale = box.scale
    n, d = scale.n, scale.d
    mu = float(n) ** (-d)
    center = np.asarray(box.center.coords, dtype=float)
    errs = np.zeros((d, d))
    sup_f = 0.0
    eig_lo, eig_hi = math.inf, -math.inf
    used = 0
    for idx, row in enumerate(dfield.coords):
        if not dfield.interior[idx]:
            continue
        if math.sqrt(float(((row - center) ** 2).sum())) / n >= box.radius:
            continue
        z = row / n
        fz = dfield.values[idx]
        az = np.asarray(a(z), dtype=float)
        errs += np.abs(fz - az) * mu
        sup_f = max(sup_f, float(np.abs(fz).max()))
        sym = 0.5 * (fz + fz.T)
        ev = np.linalg.eigvalsh(sym)
        eig_lo = min(eig_lo, float(ev[0]))
        eig_hi = max(eig_hi, float(ev[-1]))
        used += 1
    return {
        "l1_errors": errs,
        "l1_error_max": float(errs.max()) if used else math.nan,
        "sup_F": sup_f,
        "ellipticity_min": eig_lo if used else math.nan,
        "ellipticity_max": eig_hi if used else math.nan,
        "sites_used": used,
    }
