"""Conductance fields on the scaled lattice.

A conductance field assigns a symmetric nonnegative weight C(x, y) to every
pair of distinct sites; the chain jumps x -> y at rate n^2 C(x, y).  Built-in
families cover the nearest-neighbour walk, a two-sided stable-like family
(polynomial band up to distance 1, polynomial tail beyond), and tabulated
fields loaded from CSV.  Checkers verify the standing assumptions: uniform
total conductance (A1), delta-fat nearest-neighbour connectivity through
short detours (A2), and an integrable radial envelope (A3).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from .lattice import Box, LatticeScale, Site, euclid, origin

# surface area of the unit sphere S^{d-1}
def _sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def _ball_sqdists(scale: LatticeScale, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Displacement coords and squared integer distances with 0 < |y| <= radius."""
    n, d = scale.n, scale.d
    k = int(math.floor(radius * n + 1e-9))
    axes = [np.arange(-k, k + 1, dtype=np.int64)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    sq = (grid**2).sum(axis=1)
    keep = (sq > 0) & (sq <= k * k + 2 * k)  # |y| <= radius up to the cube cut
    keep &= sq <= (radius * n) ** 2 * (1 + 1e-12) + 1e-9
    return grid[keep], sq[keep]


class ConductanceField:
    """Base class; subclasses provide the actual rates.

    Rates must be pure, reentrant and symmetric.  ``range_hint`` is an
    optional Euclidean radius beyond which the field vanishes; fields of
    unbounded range must supply a tail bound instead.
    """

    scale: LatticeScale
    range_hint: Optional[float] = None
    translation_invariant: bool = False
    isotropic: bool = False

    def eval(self, x: Site, y: Site) -> float:
        if x.scale != self.scale or y.scale != self.scale:
            raise ValueError("sites do not live on this field's lattice")
        return self.eval_coords(x.coords, y.coords)

    def eval_coords(self, cx, cy) -> float:
        raise NotImplementedError

    def eval_sqdist(self, sq: np.ndarray) -> np.ndarray:
        """Vectorized rates from squared integer coordinate distance (isotropic only)."""
        raise NotImplementedError(f"{type(self).__name__} is not isotropic")

    def tail_rate_bound(self, radius: float) -> float:
        """Upper bound for sum_{|y-x| > radius} C(x, y), radius >= 1."""
        if self.range_hint is not None and radius >= self.range_hint:
            return 0.0
        raise ValueError(
            f"{type(self).__name__} has unbounded range and no tail envelope; "
            "tail sums would be divergent or uncontrolled"
        )

    def nu_site(self, x: Site, tol: float = 1e-8) -> tuple[float, float]:
        """Total conductance at x and a bound on the truncation remainder."""
        return _nu_generic(self, x, tol)

    def describe(self) -> dict:
        raise NotImplementedError


def _nu_generic(field: ConductanceField, x: Site, tol: float) -> tuple[float, float]:
    scale = field.scale
    if field.range_hint is not None:
        return _partial_nu(field, x, field.range_hint), 0.0
    radius = 2.0
    partial = _partial_nu(field, x, radius)
    bound = field.tail_rate_bound(radius)
    while bound > tol * max(partial, 1e-300) and radius < 2**22:
        radius *= 2.0
        partial = _partial_nu(field, x, radius)
        bound = field.tail_rate_bound(radius)
    return partial, bound


def _partial_nu(field: ConductanceField, x: Site, radius: float) -> float:
    disp, sq = _ball_sqdists(field.scale, radius)
    if field.isotropic:
        return float(field.eval_sqdist(sq).sum())
    cx = np.asarray(x.coords, dtype=np.int64)
    total = 0.0
    for row in disp:
        total += field.eval_coords(tuple(cx), tuple(cx + row))
    return total


class NearestNeighborField(ConductanceField):
    """Constant conductance kappa on nearest-neighbour pairs only."""

    translation_invariant = True
    isotropic = True

    def __init__(self, scale: LatticeScale, kappa: float = 0.5):
        if kappa < 0:
            raise ValueError("kappa must be nonnegative")
        self.scale = scale
        self.kappa = float(kappa)
        self.range_hint = 1.0 / scale.n

    def eval_coords(self, cx, cy) -> float:
        sq = sum((a - b) ** 2 for a, b in zip(cx, cy))
        return self.kappa if sq == 1 else 0.0

    def eval_sqdist(self, sq: np.ndarray) -> np.ndarray:
        return np.where(sq == 1, self.kappa, 0.0)

    def nu_site(self, x: Site, tol: float = 1e-8) -> tuple[float, float]:
        return 2.0 * self.scale.d * self.kappa, 0.0

    def describe(self) -> dict:
        return {"family": "nearest_neighbor", "kappa": self.kappa}


class StableLikeField(ConductanceField):
    """Two-sided stable-like family.

    The rate is c3 * n^{-(d+2)} |x-y|^{-d-beta} on the band 1/n <= |x-y| <= 1,
    plus c4 on nearest-neighbour pairs, plus c5 * n^{-(d+2)} |x-y|^{-d-alpha}
    beyond distance 1.  The constraints c1 <= c3 and c2 <= c4 make the field
    sit between the matching lower envelope (exponent alpha, constants c1, c2)
    and its own defining upper envelope.
    """

    translation_invariant = True
    isotropic = True

    def __init__(
        self,
        scale: LatticeScale,
        alpha: float = 1.0,
        beta: float = 1.5,
        c1: float = 0.01,
        c2: float = 0.5,
        c3: float = 0.02,
        c4: float = 1.0,
        c5: float = 5e-4,
    ):
        if not (0 < alpha <= beta < 2):
            raise ValueError("need 0 < alpha <= beta < 2")
        for name, c in [("c1", c1), ("c2", c2), ("c3", c3), ("c4", c4), ("c5", c5)]:
            if c <= 0:
                raise ValueError(f"{name} must be positive")
        if c1 > c3 or c2 > c4:
            raise ValueError("need c1 <= c3 and c2 <= c4 for the two-sided bounds")
        self.scale = scale
        self.alpha, self.beta = float(alpha), float(beta)
        self.c1, self.c2, self.c3, self.c4, self.c5 = map(float, (c1, c2, c3, c4, c5))
        self.range_hint = None

    def eval_coords(self, cx, cy) -> float:
        sq = sum((a - b) ** 2 for a, b in zip(cx, cy))
        if sq == 0:
            return 0.0
        return float(self.eval_sqdist(np.asarray([sq]))[0])

    def eval_sqdist(self, sq: np.ndarray) -> np.ndarray:
        n, d = self.scale.n, self.scale.d
        sq = np.asarray(sq, dtype=np.float64)
        s = np.sqrt(sq) / n
        pref = float(n) ** (-(d + 2))
        band = self.c3 * pref * np.where((sq > 0) & (sq <= n * n), s, np.inf) ** (
            -(d + self.beta)
        )
        tail = self.c5 * pref * np.where(sq > n * n, s, np.inf) ** (-(d + self.alpha))
        out = np.where(sq <= n * n, band, tail)
        out = out + np.where(sq == 1, self.c4, 0.0)
        return np.where(sq == 0, 0.0, out)

    def tail_rate_bound(self, radius: float) -> float:
        n, d = self.scale.n, self.scale.d
        radius = max(radius, 1.0)
        m = int(math.floor(radius * n))
        coef = self.c5 * float(n) ** (self.alpha - 2)
        if d == 1:
            # exact: 2 * sum_{k > m} k^{-1-alpha} via the Hurwitz zeta function
            return coef * 2.0 * float(special.zeta(1.0 + self.alpha, m + 1))
        # each lattice point k with |k| > m sits in a unit cube inside |x| > m - sqrt(d)
        rd = math.sqrt(d)
        lo = max(m - rd, 1.0)
        val, _ = integrate.quad(
            lambda t: t ** (d - 1) * max(t - rd, 1e-12) ** (-(d + self.alpha)),
            lo,
            np.inf,
        )
        return coef * _sphere_area(d) * val

    def nu_site(self, x: Site, tol: float = 1e-8) -> tuple[float, float]:
        if getattr(self, "_nu_cache", None) is None:
            partial = _partial_nu(self, x, 1.0)
            if self.scale.d == 1:
                self._nu_cache = (partial + self.tail_rate_bound(1.0), 0.0)
            else:
                value, bound = _nu_generic(self, x, tol)
                self._nu_cache = (value, bound)
        return self._nu_cache

    def a3_envelope(self) -> Callable[[float], float]:
        """Radial envelope phi with C(x,y) <= n^{-(d+2)} phi(|x-y|).

        The nearest-neighbour weight needs a spike of height c4 * n^{d+2} at
        t = 1/n; it carries no mass for the integrability requirement, which
        is checked on the smooth part (see ``a3_envelope_smooth``).
        """
        n, d = self.scale.n, self.scale.d
        smooth = self.a3_envelope_smooth()
        spike_at = 1.0 / n
        spike = self.c4 * float(n) ** (d + 2)

        def phi(t: float) -> float:
            out = smooth(t)
            if abs(t - spike_at) <= 1e-12 * spike_at:
                out += spike
            return out

        return phi

    def a3_envelope_smooth(self) -> Callable[[float], float]:
        d = self.scale.d

        def phi(t: float) -> float:
            if t <= 0:
                return math.inf
            if t <= 1.0:
                return self.c3 * t ** (-(d + self.beta))
            return self.c5 * t ** (-(d + self.alpha))

        return phi

    def lower_envelope(self, x: Site, y: Site) -> float:
        """The matching two-sided lower bound at a pair of sites."""
        n, d = self.scale.n, self.scale.d
        s = euclid(x, y)
        if s <= 0:
            return 0.0
        out = 0.0
        if 1.0 / n <= s <= 1.0:
            out += self.c1 * float(n) ** (-(d + 2)) * s ** (-(d + self.alpha))
        if sum((a - b) ** 2 for a, b in zip(x.coords, y.coords)) == 1:
            out += self.c2
        return out

    def describe(self) -> dict:
        return {
            "family": "stable_like",
            "alpha": self.alpha,
            "beta": self.beta,
            "c1": self.c1,
            "c2": self.c2,
            "c3": self.c3,
            "c4": self.c4,
            "c5": self.c5,
        }


class TabulatedField(ConductanceField):
    """Field given by an explicit table.

    Translation-invariant tables are keyed by displacement coords; general
    tables by (x, y) coordinate pairs.  Symmetry is validated on load.
    """

    def __init__(self, scale: LatticeScale, table: dict, by_displacement: bool = True):
        self.scale = scale
        self.by_displacement = by_displacement
        self.translation_invariant = by_displacement
        self._table = {}
        if by_displacement:
            for k, v in table.items():
                key = tuple(int(c) for c in k)
                neg = tuple(-c for c in key)
                if neg in table and abs(table[neg] - v) > 1e-12 * max(abs(v), 1.0):
                    raise ValueError(f"asymmetric displacement table at {key}")
                self._table[key] = float(v)
                self._table.setdefault(neg, float(v))
            reach = max((math.sqrt(sum(c * c for c in k)) for k in self._table), default=0.0)
        else:
            for (kx, ky), v in table.items():
                kx = tuple(int(c) for c in kx)
                ky = tuple(int(c) for c in ky)
                self._table[(kx, ky)] = float(v)
                other = self._table.get((ky, kx))
                if other is not None and abs(other - v) > 1e-12 * max(abs(v), 1.0):
                    raise ValueError(f"asymmetric pairwise table at {(kx, ky)}")
                self._table.setdefault((ky, kx), float(v))
            reach = max(
                (
                    math.sqrt(sum((a - b) ** 2 for a, b in zip(kx, ky)))
                    for kx, ky in self._table
                ),
                default=0.0,
            )
        self.range_hint = reach / scale.n if reach > 0 else 1.0 / scale.n

    def eval_coords(self, cx, cy) -> float:
        if self.by_displacement:
            key = tuple(b - a for a, b in zip(cx, cy))
            return self._table.get(key, 0.0)
        return self._table.get((tuple(cx), tuple(cy)), 0.0)

    def displacements(self) -> list[tuple[tuple[int, ...], float]]:
        if not self.by_displacement:
            raise ValueError("pairwise table has no displacement list")
        return sorted(self._table.items())

    def describe(self) -> dict:
        return {
            "family": "tabulated",
            "by_displacement": self.by_displacement,
            "entries": len(self._table),
        }


class CallableField(ConductanceField):
    """Ad-hoc field from a rate callable on coordinate tuples (for tests)."""

    def __init__(
        self,
        scale: LatticeScale,
        rate: Callable[[tuple, tuple], float],
        range_hint: Optional[float] = None,
        phi: Optional[Callable[[float], float]] = None,
        translation_invariant: bool = False,
    ):
        self.scale = scale
        self._rate = rate
        self.range_hint = range_hint
        self.phi = phi
        self.translation_invariant = translation_invariant

    def eval_coords(self, cx, cy) -> float:
        return self._rate(tuple(cx), tuple(cy))

    def tail_rate_bound(self, radius: float) -> float:
        if self.range_hint is not None and radius >= self.range_hint:
            return 0.0
        if self.phi is None:
            return super().tail_rate_bound(radius)
        n, d = self.scale.n, self.scale.d
        rd = math.sqrt(d) / n
        val, _ = integrate.quad(
            lambda t: t ** (d - 1) * self.phi(max(t - rd, 1e-12)),
            max(radius - rd, 1e-9),
            np.inf,
        )
        return float(n) ** (-2) * _sphere_area(d) * val * 1.5

    def describe(self) -> dict:
        return {"family": "callable", "range_hint": self.range_hint}


class RangeRestrictedField(ConductanceField):
    """Base field restricted to distances in (lo, hi]; used for splits and truncations."""

    def __init__(self, base: ConductanceField, lo: float = 0.0, hi: float = math.inf):
        self.base = base
        self.scale = base.scale
        self.lo, self.hi = float(lo), float(hi)
        self.translation_invariant = base.translation_invariant
        self.isotropic = base.isotropic
        if math.isfinite(hi):
            self.range_hint = hi
        else:
            self.range_hint = base.range_hint
        n = base.scale.n
        # squared integer-coordinate thresholds; ties land on the inclusive side
        self._lo2 = (self.lo * n) ** 2 * (1 + 1e-12) + 1e-9
        self._hi2 = (self.hi * n) ** 2 * (1 + 1e-12) + 1e-9 if math.isfinite(hi) else math.inf

    def _inside(self, sq) -> np.ndarray:
        return (sq > self._lo2) & (sq <= self._hi2)

    def eval_coords(self, cx, cy) -> float:
        sq = sum((a - b) ** 2 for a, b in zip(cx, cy))
        if not (self._lo2 < sq <= self._hi2):
            return 0.0
        return self.base.eval_coords(cx, cy)

    def eval_sqdist(self, sq: np.ndarray) -> np.ndarray:
        return np.where(self._inside(sq), self.base.eval_sqdist(sq), 0.0)

    def tail_rate_bound(self, radius: float) -> float:
        if math.isfinite(self.hi) and radius >= self.hi:
            return 0.0
        return self.base.tail_rate_bound(max(radius, self.lo, 1.0))

    def nu_site(self, x: Site, tol: float = 1e-8) -> tuple[float, float]:
        # exact: restrict by subtracting finite partial sums from the base total
        if math.isfinite(self.hi):
            partial = _partial_nu(self, x, self.hi)
            return partial, 0.0
        base_val, base_bound = self.base.nu_site(x, tol)
        below = _partial_nu(self.base, x, self.lo) if self.lo > 0 else 0.0
        return base_val - below, base_bound

    def describe(self) -> dict:
        return {"family": "restricted", "base": self.base.describe(), "lo": self.lo, "hi": self.hi}


@dataclass
class SplitField:
    """Decomposition C = C_C + C_J at threshold eps_n (ties go to C_C)."""

    base: ConductanceField
    eps_n: float
    c_c: ConductanceField = dataclass_field(init=False)
    c_j: ConductanceField = dataclass_field(init=False)

    def __post_init__(self) -> None:
        n = self.base.scale.n
        if not (1.0 / n <= self.eps_n <= 1.0):
            raise ValueError(f"eps_n must lie in [1/n, 1], got {self.eps_n}")
        self.c_c = RangeRestrictedField(self.base, 0.0, self.eps_n)
        self.c_j = RangeRestrictedField(self.base, self.eps_n, math.inf)


def split(field: ConductanceField, eps_n: float) -> SplitField:
    """Split a field into short-range and long-range parts at radius eps_n."""
    return SplitField(field, eps_n)


def resolve_eps(rule, n: int) -> float:
    """Resolve an eps_n rule ("n^-0.5" or an explicit number) and clamp to [1/n, 1]."""
    if isinstance(rule, str):
        if not rule.startswith("n^"):
            raise ValueError(f"unknown eps_n rule {rule!r}")
        eps = float(n) ** float(rule[2:])
    else:
        eps = float(rule)
    return min(1.0, max(1.0 / n, eps))


# ---------------------------------------------------------------------------
# scalar summaries


def nu(field: ConductanceField, x: Optional[Site] = None, tol: float = 1e-8) -> float:
    """Total conductance nu_x = sum_y C(x, y), to the declared tail tolerance."""
    value, _ = nu_with_remainder(field, x, tol)
    return value


def nu_with_remainder(
    field: ConductanceField, x: Optional[Site] = None, tol: float = 1e-8
) -> tuple[float, float]:
    if x is None:
        x = origin(field.scale)
    return field.nu_site(x, tol)


def moment_M(field: ConductanceField, box: Box, tol: float = 1e-8) -> float:
    """max over box sites of n^2 sum_y (1 /\\ |y|^2) C(x, x+y), tail included as a bound."""
    scale = field.scale
    n = scale.n
    radius = field.range_hint if field.range_hint is not None else 2.0
    radius = max(radius, 1.0)

    def site_value(x: Site) -> float:
        r = radius
        partial = _partial_moment(field, x, r)
        if field.range_hint is not None:
            return partial
        bound = n * n * field.tail_rate_bound(r)
        while bound > tol * max(partial, 1e-300) and r < 2**22:
            r *= 2.0
            partial = _partial_moment(field, x, r)
            bound = n * n * field.tail_rate_bound(r)
        return partial + bound

    if field.translation_invariant:
        return site_value(box.center)
    return max(site_value(s) for s in box.sites())


def _partial_moment(field: ConductanceField, x: Site, radius: float) -> float:
    scale = field.scale
    n = scale.n
    disp, sq = _ball_sqdists(scale, radius)
    weight = np.minimum(1.0, sq / float(n * n)) * n * n
    if field.isotropic:
        return float((field.eval_sqdist(sq) * weight).sum())
    cx = np.asarray(x.coords, dtype=np.int64)
    total = 0.0
    for row, w in zip(disp, weight):
        total += w * field.eval_coords(tuple(cx), tuple(cx + row))
    return float(total)


def large_jump_intensity(
    field: ConductanceField,
    x: Site,
    lambda_trunc: float,
    r: float = 1.0,
    tol: float = 1e-8,
    check_bound: bool = True,
) -> float:
    """Intensity of jumps longer than lambda for the r-rescaled chain.

    ``x`` lives on the rescaled lattice (1/(nr))Z^d; the value is
    (nr)^2 * sum_{|x-y| > lambda} C(rx, ry).
    """
    if lambda_trunc <= 0:
        raise ValueError("lambda_trunc must be positive")
    if not (0 < r <= 1):
        raise ValueError("r must lie in (0, 1]")
    n = field.scale.n
    nr = n * r
    if abs(nr - round(nr)) > 1e-9:
        raise ValueError(f"n*r = {nr} is not an integer; rescaled lattice undefined")
    if x.scale.n != round(nr) or x.scale.d != field.scale.d:
        raise ValueError("x must live on the rescaled lattice (1/(nr))Z^d")
    # y' = ry ranges over the base lattice; |x - y| > lambda <=> |x' - y'| > lambda * r
    x_base = Site(x.coords, field.scale)
    restricted = RangeRestrictedField(field, lambda_trunc * r, math.inf)
    total, _ = restricted.nu_site(x_base, tol)
    value = (n * r) ** 2 * total
    if check_bound:
        m = moment_M(field, Box(x_base, 1.0), tol)
        limit = m / lambda_trunc**2
        if value > limit * (1 + 1e-9):
            raise ValueError(
                f"large-jump intensity {value} exceeds M/lambda^2 = {limit}; "
                "the field violates its declared envelope"
            )
    return value


# ---------------------------------------------------------------------------
# assumption checkers


@dataclass
class AssumptionReport:
    """Observed constants for the standing assumptions; fields default to None
    until the corresponding checker has run."""

    c1_hat: Optional[float] = None
    c2_hat: Optional[float] = None
    M_hat: Optional[float] = None
    A2_ok: Optional[bool] = None
    A2_params: Optional[tuple[float, float]] = None
    A2_failures: list = dataclass_field(default_factory=list)
    A3_margin: Optional[float] = None
    A3_integral: Optional[float] = None

    def merged(self, other: "AssumptionReport") -> "AssumptionReport":
        out = AssumptionReport()
        for name in (
            "c1_hat",
            "c2_hat",
            "M_hat",
            "A2_ok",
            "A2_params",
            "A3_margin",
            "A3_integral",
        ):
            a, b = getattr(self, name), getattr(other, name)
            setattr(out, name, b if b is not None else a)
        out.A2_failures = list(self.A2_failures) + list(other.A2_failures)
        return out

    def to_dict(self) -> dict:
        return {
            "c1_hat": self.c1_hat,
            "c2_hat": self.c2_hat,
            "M_hat": self.M_hat,
            "A2_ok": self.A2_ok,
            "A2_params": list(self.A2_params) if self.A2_params else None,
            "A2_failures": [list(map(list, f)) for f in self.A2_failures],
            "A3_margin": self.A3_margin,
            "A3_integral": self.A3_integral,
        }


def check_A1(field: ConductanceField, box: Box, tol: float = 1e-8) -> AssumptionReport:
    """Observed min/max of nu over the box sites."""
    if field.translation_invariant:
        v = nu(field, box.center, tol)
        return AssumptionReport(c1_hat=v, c2_hat=v)
    values = [field.nu_site(s, tol)[0] for s in box.sites()]
    return AssumptionReport(c1_hat=min(values), c2_hat=max(values))


def check_A2(
    field: ConductanceField, box: Box, M0: float, delta: float
) -> AssumptionReport:
    """Breadth-first search check of delta-fat connectivity.

    For every nearest-neighbour pair (x, y) in the box there must be a path
    x -> y inside the ball B(x, M0/n) whose edges all carry conductance at
    least delta.
    """
    if M0 < 1:
        raise ValueError("M0 must be >= 1")
    scale = field.scale
    n = scale.n
    failures = []
    coords = box.coords_array()
    index = {tuple(int(v) for v in row): None for row in coords}
    for cx in index:
        for axis in range(scale.d):
            cy = list(cx)
            cy[axis] += 1
            cy = tuple(cy)
            if cy not in index:
                continue
            if not _bfs_connected(field, cx, cy, M0, delta):
                failures.append((cx, cy))
    return AssumptionReport(
        A2_ok=(not failures), A2_params=(float(M0), float(delta)), A2_failures=failures
    )


def _bfs_connected(field, cx, cy, M0, delta) -> bool:
    scale = field.scale
    k = int(math.floor(M0 + 1e-9))
    d = scale.d
    axes = [range(-k, k + 1)] * d
    ball = []
    import itertools

    for off in itertools.product(*axes):
        if sum(o * o for o in off) <= M0 * M0 * (1 + 1e-12):
            ball.append(tuple(a + b for a, b in zip(cx, off)))
    ball_set = set(ball)
    if cy not in ball_set:
        return False
    seen = {cx}
    frontier = [cx]
    while frontier:
        nxt = []
        for u in frontier:
            for v in ball:
                if v in seen or v == u:
                    continue
                if field.eval_coords(u, v) >= delta - 1e-15:
                    seen.add(v)
                    nxt.append(v)
                    if v == cy:
                        return True
        frontier = nxt
    return cy in seen


def check_A3(
    field: ConductanceField,
    box: Box,
    phi: Callable[[float], float],
    phi_smooth: Optional[Callable[[float], float]] = None,
    n_random_pairs: int = 2000,
    seed: int = 0,
) -> AssumptionReport:
    """Margin of the radial envelope: max of C(x,y) n^{d+2} / phi(|x-y|).

    Also evaluates the integrability requirement
    int_0^inf (1 /\\ t^2) t^{d-1} phi(t) dt by adaptive quadrature on the
    smooth part of phi.
    """
    scale = field.scale
    n, d = scale.n, scale.d
    smooth = phi_smooth if phi_smooth is not None else phi
    integral = _phi_integral(smooth, d)
    if not math.isfinite(integral):
        raise ValueError("phi fails the integrability requirement")

    rng = np.random.default_rng(seed)
    coords = box.coords_array()
    margin = 0.0
    # all close pairs in the box, plus random longer-range pairs
    close_limit = min(len(coords), 40)
    for i in range(close_limit):
        for j in range(i + 1, close_limit):
            margin = max(margin, _a3_ratio(field, coords[i], coords[j], phi))
    for _ in range(n_random_pairs):
        i, j = rng.integers(0, len(coords), size=2)
        if i == j:
            continue
        margin = max(margin, _a3_ratio(field, coords[i], coords[j], phi))
    return AssumptionReport(A3_margin=margin, A3_integral=integral)


def _a3_ratio(field, ci, cj, phi) -> float:
    scale = field.scale
    n, d = scale.n, scale.d
    s = math.sqrt(sum((int(a) - int(b)) ** 2 for a, b in zip(ci, cj))) / n
    c = field.eval_coords(tuple(int(v) for v in ci), tuple(int(v) for v in cj))
    if c == 0.0:
        return 0.0
    denom = phi(s)
    if denom <= 0:
        return math.inf
    return c * float(n) ** (d + 2) / denom


def _phi_integral(phi: Callable[[float], float], d: int) -> float:
    import warnings

    f = lambda t: min(1.0, t * t) * t ** (d - 1) * phi(t)
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            a, err_a = integrate.quad(f, 0.0, 1.0, limit=200)
            b, err_b = integrate.quad(f, 1.0, np.inf, limit=200)
        except integrate.IntegrationWarning:
            return math.inf
    if not (math.isfinite(a) and math.isfinite(b)):
        return math.inf
    if err_a + err_b > 0.05 * max(abs(a) + abs(b), 1e-12):
        return math.inf
    return a + b


# ---------------------------------------------------------------------------
# configuration


def field_from_config(spec: dict, scale: LatticeScale) -> ConductanceField:
    """Build a field from its JSON specification."""
    family = spec.get("family")
    if family == "nearest_neighbor":
        return NearestNeighborField(scale, kappa=spec.get("kappa", 0.5))
    if family == "stable_like":
        kwargs = {
            k: spec[k]
            for k in ("alpha", "beta", "c1", "c2", "c3", "c4", "c5")
            if k in spec
        }
        return StableLikeField(scale, **kwargs)
    if family == "tabulated":
        return load_tabulated_field(
            spec["path"], scale, by_displacement=spec.get("by_displacement", True)
        )
    raise ValueError(f"unknown field family {family!r}")


def field_hash(field: ConductanceField) -> str:
    payload = json.dumps(
        {"field": field.describe(), "n": field.scale.n, "d": field.scale.d},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_tabulated_field(path, scale: LatticeScale, by_displacement: bool = True) -> TabulatedField:
    path = Path(path)
    d = scale.d
    table = {}
    with path.open() as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if by_displacement:
                key = tuple(int(row[f"coord_dx_{i + 1}"]) for i in range(d))
            else:
                kx = tuple(int(row[f"coord_x_{i + 1}"]) for i in range(d))
                ky = tuple(int(row[f"coord_y_{i + 1}"]) for i in range(d))
                key = (kx, ky)
            table[key] = float(row["value"])
    return TabulatedField(scale, table, by_displacement=by_displacement)
