"""Trajectory sampling for the lattice chains.

The chain holds at x for an exponential time with rate n^2 nu_x and jumps to
y with probability C(x, y)/nu_x.  Sampling uses Walker alias tables over a
tabulated displacement support; the built-in stable-like family in one
dimension gets an exact power-law tail sampler, other unbounded-range fields
fold a recorded sliver of far-tail mass into the renormalization, keeping the
chain conservative.  One counter-based random stream per trajectory index
makes runs reproducible and embarrassingly parallel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special

from .conductance import (
    ConductanceField,
    RangeRestrictedField,
    StableLikeField,
    nu,
    nu_with_remainder,
)
from .lattice import LatticeScale, Site

FOLD_TOL = 1e-8


def _rng_for(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, index))))


class _BlockRng:
    """Scalar draws served from pre-drawn blocks; cuts per-event overhead."""

    def __init__(self, rng: np.random.Generator, block: int = 256):
        self._rng = rng
        self._block = block
        self._exp = np.empty(0)
        self._uni = np.empty(0)
        self._ei = 0
        self._ui = 0

    def exp1(self) -> float:
        if self._ei >= len(self._exp):
            self._exp = self._rng.standard_exponential(self._block)
            self._ei = 0
        v = self._exp[self._ei]
        self._ei += 1
        return float(v)

    def uniform(self) -> float:
        if self._ui >= len(self._uni):
            self._uni = self._rng.random(self._block)
            self._ui = 0
        v = self._uni[self._ui]
        self._ui += 1
        return float(v)


# ---------------------------------------------------------------------------
# jump samplers


@dataclass
class JumpSampler:
    """O(1) sampler for the next-jump displacement at a site."""

    scale: LatticeScale
    displacements: np.ndarray  # (K, d) int
    probs: np.ndarray  # (K,) including one slot for the exact tail, if any
    folded_mass: float  # tail mass folded into renormalization (recorded)
    tail_index: Optional[int] = None
    tail_draw: Optional[object] = None  # callable(_BlockRng) -> coords tuple
    _alias: tuple = dataclass_field(init=False, default=None)

    def __post_init__(self) -> None:
        self._alias = _build_alias(self.probs)

    def draw(self, brng: _BlockRng) -> tuple[int, ...]:
        prob, alias = self._alias
        k = len(self.probs)
        i = int(brng.uniform() * k)
        if i >= k:  # guard against u == 1.0
            i = k - 1
        if brng.uniform() >= prob[i]:
            i = alias[i]
        if self.tail_index is not None and i == self.tail_index:
            return self.tail_draw(brng)
        return tuple(int(v) for v in self.displacements[i])


def _build_alias(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=float)
    k = len(p)
    scaled = p * k / p.sum()
    prob = np.ones(k)
    alias = np.arange(k)
    small = [i for i in range(k) if scaled[i] < 1.0]
    large = [i for i in range(k) if scaled[i] >= 1.0]
    scaled = scaled.copy()
    while small and large:
        s = small.pop()
        l = large.pop()
        prob[s] = scaled[s]
        alias[s] = l
        scaled[l] = scaled[l] - (1.0 - scaled[s])
        (small if scaled[l] < 1.0 else large).append(l)
    return prob, alias


class _PowerTail1D:
    """Exact sampler for pmf proportional to k^{-(1+alpha)}, integer k > m0.

    Rejection from a continuous Pareto proposal; the acceptance ratio uses the
    exactly computable proposal bin masses, so no truncation is involved.
    """

    def __init__(self, alpha: float, m0: int):
        self.alpha = alpha
        self.m0 = m0
        a = alpha
        self._bound = (1.0 + 0.5 / m0) ** (1.0 + a) / (a * (m0 - 0.5) ** a)

    def __call__(self, brng: _BlockRng) -> tuple[int, ...]:
        a, m0 = self.alpha, self.m0
        while True:
            u = brng.uniform()
            if u <= 0.0:
                continue
            x = (m0 - 0.5) * u ** (-1.0 / a)
            k = int(math.floor(x + 0.5))
            if k < m0:
                k = m0
            bin_mass = (k - 0.5) ** (-a) - (k + 0.5) ** (-a)
            accept = k ** (-(1.0 + a)) / (self._bound * bin_mass)
            if brng.uniform() < accept:
                sign = 1 if brng.uniform() < 0.5 else -1
                return (sign * k,)


def step_sampler(
    field: ConductanceField,
    x: Optional[Site] = None,
    tol: float = FOLD_TOL,
    max_table: int = 2_000_000,
) -> JumpSampler:
    """Next-site distribution at x: probability C(x, y)/nu_x.

    Stable-like fields in d = 1 get an exact tail branch; otherwise the
    support is truncated where the tail holds at most ``tol`` of nu (or at the
    table-size cap) and the remainder is folded into the renormalization.
    """
    scale = field.scale
    n, d = scale.n, scale.d
    if x is None:
        x = Site((0,) * d, scale)
    nu_x, _ = nu_with_remainder(field, x, tol)
    if nu_x <= 0.0:
        raise ValueError("nu = 0: the site has no outgoing rate")

    exact_tail = _exact_tail_spec(field)
    if exact_tail is not None:
        cut_steps, alpha, tail_coef = exact_tail
        disps, weights = _tabulate(field, x, cut_steps / n)
        tail_mass = tail_coef * 2.0 * float(special.zeta(1.0 + alpha, cut_steps + 1))
        displacements = np.vstack([disps, np.zeros((1, d), dtype=np.int64)])
        probs = np.concatenate([weights, [tail_mass]])
        probs = probs / probs.sum()
        return JumpSampler(
            scale=scale,
            displacements=displacements,
            probs=probs,
            folded_mass=0.0,
            tail_index=len(probs) - 1,
            tail_draw=_PowerTail1D(alpha, cut_steps + 1),
        )

    radius = field.range_hint
    folded = 0.0
    if radius is None:
        radius = 2.0
        while True:
            folded = field.tail_rate_bound(radius)
            if folded <= tol * nu_x or (2 * radius * n + 1) ** d > max_table:
                break
            radius *= 2.0
    disps, weights = _tabulate(field, x, radius)
    if len(disps) == 0:
        raise ValueError("empty jump support")
    return JumpSampler(
        scale=scale,
        displacements=disps,
        probs=weights / weights.sum(),
        folded_mass=folded / nu_x,
    )


def _exact_tail_spec(field: ConductanceField):
    """(cut_steps, alpha, coef) when the far tail is an exact 1d power law."""
    base, lo = field, 0.0
    if isinstance(field, RangeRestrictedField):
        if math.isfinite(field.hi):
            return None
        base, lo = field.base, field.lo
    if not isinstance(base, StableLikeField) or base.scale.d != 1:
        return None
    n = base.scale.n
    # the pure power tail starts beyond distance 1; cut past it and past lo
    cut_steps = max(2 * n, int(math.floor(lo * n + 1e-9)) + 1, 64)
    coef = base.c5 * float(n) ** (base.alpha - 2.0)
    return cut_steps, base.alpha, coef


def _tabulate(field: ConductanceField, x: Site, radius: float):
    from .conductance import _ball_sqdists

    disp, sq = _ball_sqdists(field.scale, radius)
    if field.isotropic:
        w = field.eval_sqdist(sq)
    else:
        cx = np.asarray(x.coords, dtype=np.int64)
        w = np.array(
            [field.eval_coords(tuple(cx), tuple(cx + row)) for row in disp]
        )
    keep = w > 0.0
    return disp[keep], w[keep]


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Piecewise-constant sample path: sites and strictly increasing jump times."""

    scale: LatticeScale
    times: np.ndarray  # (J+1,), times[0] == 0
    coords: np.ndarray  # (J+1, d)
    horizon: float
    seed: int
    meta: dict = dataclass_field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.times) != len(self.coords):
            raise ValueError("times and sites disagree in length")
        if len(self.times) and self.times[0] != 0.0:
            raise ValueError("paths start at time 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("jump times must be strictly increasing")
        if len(self.coords) > 1 and np.any(
            np.all(self.coords[1:] == self.coords[:-1], axis=1)
        ):
            raise ValueError("consecutive sites must differ")

    @property
    def jumps(self) -> int:
        return len(self.times) - 1

    def position_at(self, t: float) -> tuple[int, ...]:
        if t < 0 or t > self.horizon:
            raise ValueError("time outside the simulated horizon")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return tuple(int(v) for v in self.coords[i])

    def sup_distance_by(self, t: float) -> float:
        """sup_{s <= t} |Y_s - Y_0|; exact on the jump skeleton."""
        i = int(np.searchsorted(self.times, t, side="right"))
        deltas = self.coords[:i] - self.coords[0]
        return float(np.sqrt((deltas**2).sum(axis=1)).max()) / self.scale.n

    def save_csv(self, path) -> None:
        path = Path(path)
        d = self.scale.d
        header = "T_k," + ",".join(f"coord_{i + 1}" for i in range(d))
        lines = [header]
        for t, row in zip(self.times, self.coords):
            lines.append(f"{float(t)!r}," + ",".join(str(int(v)) for v in row))
        path.write_text("\n".join(lines) + "\n")


class _SamplerCache:
    def __init__(self, field: ConductanceField, tol: float = FOLD_TOL):
        self.field = field
        self.tol = tol
        self._cache: dict = {}

    def at(self, coords: tuple[int, ...]) -> JumpSampler:
        key = None if self.field.translation_invariant else coords
        samp = self._cache.get(key)
        if samp is None:
            samp = step_sampler(self.field, Site(coords, self.field.scale), self.tol)
            self._cache[key] = samp
        return samp


def simulate(
    field: ConductanceField,
    x0: Site,
    horizon: float,
    seed: int,
    index: int = 0,
    max_jumps: int = 50_000_000,
) -> Trajectory:
    """Sample one path on [0, horizon], exponential holding at rate n^2 nu_x."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    scale = field.scale
    n = scale.n
    rng = _BlockRng(_rng_for(seed, index))
    cache = _sampler_cache_for(field)
    nu_cache = _nu_cache_for(field)

    cur = tuple(int(c) for c in x0.coords)
    times = [0.0]
    sites = [cur]
    t = 0.0
    while True:
        key = None if field.translation_invariant else cur
        rate = nu_cache.get(key)
        if rate is None:
            rate = n * n * nu(field, Site(cur, scale))
            nu_cache[key] = rate
        t += rng.exp1() / rate
        if t > horizon:
            break
        disp = cache.at(cur).draw(rng)
        cur = tuple(a + b for a, b in zip(cur, disp))
        times.append(t)
        sites.append(cur)
        if len(times) > max_jumps:
            raise RuntimeError("jump budget exceeded")
    folded = cache.at(cur).folded_mass
    return Trajectory(
        scale=scale,
        times=np.asarray(times),
        coords=np.asarray(sites, dtype=np.int64),
        horizon=horizon,
        seed=seed,
        meta={"index": index, "folded_tail_mass": folded, "method": "direct"},
    )


def simulate_meyer(
    field: ConductanceField,
    x0: Site,
    horizon: float,
    lambda_trunc: float,
    seed: int,
    index: int = 0,
    max_jumps: int = 50_000_000,
) -> Trajectory:
    """Sample via the large-jump decomposition: run the lambda-truncated chain
    and insert a long jump whenever the integrated large-jump intensity
    crosses an independent unit-exponential clock.  Equal in law to
    ``simulate``.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if lambda_trunc <= field.scale.mesh * (1 - 1e-12):
        raise ValueError("lambda_trunc must exceed the mesh")
    scale = field.scale
    n = scale.n
    rng = _BlockRng(_rng_for(seed, index))
    truncated = _restricted(field, 0.0, lambda_trunc)
    large = _restricted(field, lambda_trunc, math.inf)
    trunc_cache = _sampler_cache_for(truncated)
    large_cache = _sampler_cache_for(large)
    rate_cache = _nu_cache_for((truncated, large))

    def rates(coords: tuple[int, ...]) -> tuple[float, float]:
        key = None if field.translation_invariant else coords
        got = rate_cache.get(key)
        if got is None:
            s = Site(coords, scale)
            got = (n * n * nu(truncated, s), n * n * nu(large, s))
            rate_cache[key] = got
        return got

    cur = tuple(int(c) for c in x0.coords)
    times = [0.0]
    sites = [cur]
    t = 0.0
    budget = rng.exp1()  # unit-exponential clock driven by the large-jump intensity
    big_jumps = 0
    while True:
        rho, intensity = rates(cur)
        dt_small = rng.exp1() / rho if rho > 0 else math.inf
        dt_big = budget / intensity if intensity > 0 else math.inf
        dt = min(dt_small, dt_big)
        if t + dt > horizon:
            break
        t += dt
        if dt_big <= dt_small:
            disp = large_cache.at(cur).draw(rng)
            budget = rng.exp1()
            big_jumps += 1
        else:
            budget -= dt_small * intensity
            disp = trunc_cache.at(cur).draw(rng)
        cur = tuple(a + b for a, b in zip(cur, disp))
        times.append(t)
        sites.append(cur)
        if len(times) > max_jumps:
            raise RuntimeError("jump budget exceeded")
    return Trajectory(
        scale=scale,
        times=np.asarray(times),
        coords=np.asarray(sites, dtype=np.int64),
        horizon=horizon,
        seed=seed,
        meta={
            "index": index,
            "method": "meyer",
            "lambda_trunc": lambda_trunc,
            "large_jumps": big_jumps,
        },
    )


def scaled_trajectory(traj: Trajectory, r: float) -> Trajectory:
    """Space-time rescaling t -> t/r^2, x -> x/r onto the lattice (1/(nr))Z^d."""
    if not (0 < r <= 1):
        raise ValueError("r must lie in (0, 1]")
    nr = traj.scale.n * r
    if abs(nr - round(nr)) > 1e-9:
        raise ValueError(f"n*r = {nr} is not an integer")
    new_scale = LatticeScale(int(round(nr)), traj.scale.d)
    meta = dict(traj.meta)
    meta["rescaled_by"] = r
    return Trajectory(
        scale=new_scale,
        times=traj.times / (r * r),
        coords=traj.coords.copy(),
        horizon=traj.horizon / (r * r),
        seed=traj.seed,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Monte Carlo exit statistics


@dataclass
class ExitStats:
    """Wilson-intervalled exit-probability estimate."""

    A: float
    t0: float
    n: int
    r: float
    trials: int
    hits: int
    p_hat: float
    wilson_lo: float
    wilson_hi: float
    seed: int
    B: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "A": self.A,
            "B": self.B,
            "t0": self.t0,
            "n": self.n,
            "r": self.r,
            "trials": self.trials,
            "hits": self.hits,
            "p_hat": self.p_hat,
            "wilson_lo": self.wilson_lo,
            "wilson_hi": self.wilson_hi,
            "seed": self.seed,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


def wilson_interval(hits: int, trials: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if trials <= 0:
        raise ValueError("trials must be positive")
    p = hits / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (p + z2 / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z2 / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def exit_probability(
    field: ConductanceField,
    x0: Site,
    r: float,
    A: float,
    t0: float,
    trials: int,
    seed: int,
) -> ExitStats:
    """Estimate P(sup_{s <= r^2 t0} |Y_s - Y_0| >= r A) by Monte Carlo.

    The event is exit from the open ball B(x0, rA), matching the mass defect
    of the kernel killed on that ball exactly.  The sup is evaluated on the
    jump skeleton, which is exact for piecewise-constant paths.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials")
    if t0 < 0:
        raise ValueError("t0 must be nonnegative")
    horizon = r * r * t0
    threshold = r * A
    hits = 0
    if horizon > 0:
        for i in range(trials):
            if _exits_by(field, x0, horizon, threshold, seed, i):
                hits += 1
    lo, hi = wilson_interval(hits, trials)
    return ExitStats(
        A=A,
        t0=t0,
        n=field.scale.n,
        r=r,
        trials=trials,
        hits=hits,
        p_hat=hits / trials,
        wilson_lo=lo,
        wilson_hi=hi,
        seed=seed,
    )


def _exits_by(field, x0, horizon, threshold, seed, index) -> bool:
    scale = field.scale
    n = scale.n
    rng = _BlockRng(_rng_for(seed, index))
    cache = _sampler_cache_for(field)
    nu_cache = _nu_cache_for(field)
    cur = x0.coords
    sq_limit = (threshold * n) ** 2 * (1 - 1e-12)  # exit: |Y - x0| >= threshold
    t = 0.0
    while True:
        key = None if field.translation_invariant else cur
        rate = nu_cache.get(key)
        if rate is None:
            rate = n * n * nu(field, Site(cur, scale))
            nu_cache[key] = rate
        t += rng.exp1() / rate
        if t > horizon:
            return False
        disp = cache.at(cur).draw(rng)
        cur = tuple(a + b for a, b in zip(cur, disp))
        sq = sum((a - b) ** 2 for a, b in zip(cur, x0.coords))
        if sq >= sq_limit:
            return True


# per-field caches shared across trials; keyed by object identity
_FIELD_SAMPLERS: dict = {}
_FIELD_NUS: dict = {}
_RESTRICT_MEMO: dict = {}


def _sampler_cache_for(field) -> _SamplerCache:
    cache = _FIELD_SAMPLERS.get(id(field))
    if cache is None or cache.field is not field:
        cache = _SamplerCache(field)
        _FIELD_SAMPLERS[id(field)] = cache
    return cache


def _nu_cache_for(field) -> dict:
    got = _FIELD_NUS.get(id(field))
    if got is None or got[0] is not field:
        got = (field, {})
        _FIELD_NUS[id(field)] = got
    return got[1]


def _restricted(base, lo: float, hi: float) -> RangeRestrictedField:
    key = (id(base), lo, hi)
    got = _RESTRICT_MEMO.get(key)
    if got is None or got.base is not base:
        got = RangeRestrictedField(base, lo, hi)
        _RESTRICT_MEMO[key] = got
    return got


def exit_profile(
    field: ConductanceField,
    x0: Site,
    r: float,
    A: float,
    t_grid,
    trials: int,
    seed: int,
) -> list[ExitStats]:
    """Exit probabilities over a grid of horizons from one set of paths.

    The same trajectories are evaluated at every horizon prefix, so the
    estimates are exactly monotone in t0.
    """
    t_grid = sorted(float(t) for t in t_grid)
    horizon = r * r * t_grid[-1]
    threshold = r * A
    n = field.scale.n
    sq_limit = (threshold * n) ** 2 * (1 - 1e-12)
    first_exit = np.full(trials, np.inf)
    for i in range(trials):
        t_exit = _first_exit_time(field, x0, horizon, sq_limit, seed, i)
        if t_exit is not None:
            first_exit[i] = t_exit
    out = []
    for t0 in t_grid:
        hits = int((first_exit <= r * r * t0).sum())
        lo, hi = wilson_interval(hits, trials)
        out.append(
            ExitStats(
                A=A,
                t0=t0,
                n=n,
                r=r,
                trials=trials,
                hits=hits,
                p_hat=hits / trials,
                wilson_lo=lo,
                wilson_hi=hi,
                seed=seed,
            )
        )
    return out


def _first_exit_time(field, x0, horizon, sq_limit, seed, index):
    """Time of first exit from the ball, or None; stops simulating on exit."""
    scale = field.scale
    n = scale.n
    rng = _BlockRng(_rng_for(seed, index))
    cache = _sampler_cache_for(field)
    nu_cache = _nu_cache_for(field)
    cur = x0.coords
    t = 0.0
    while True:
        key = None if field.translation_invariant else cur
        rate = nu_cache.get(key)
        if rate is None:
            rate = n * n * nu(field, Site(cur, scale))
            nu_cache[key] = rate
        t += rng.exp1() / rate
        if t > horizon:
            return None
        disp = cache.at(cur).draw(rng)
        cur = tuple(a + b for a, b in zip(cur, disp))
        sq = sum((a - b) ** 2 for a, b in zip(cur, x0.coords))
        if sq >= sq_limit:
            return t


def marginal_counts(
    field: ConductanceField,
    x0: Site,
    t: float,
    paths: int,
    seed: int,
    method: str = "direct",
    lambda_trunc: Optional[float] = None,
) -> dict[tuple[int, ...], int]:
    """Empirical law of Y_t over ``paths`` independent trajectories."""
    counts: dict[tuple[int, ...], int] = {}
    for i in range(paths):
        if method == "direct":
            traj = simulate(field, x0, t, seed, index=i)
        elif method == "meyer":
            traj = simulate_meyer(field, x0, t, lambda_trunc, seed, index=i)
        else:
            raise ValueError(f"unknown method {method!r}")
        key = tuple(int(v) for v in traj.coords[-1])
        counts[key] = counts.get(key, 0) + 1
    return counts


def total_variation(
    counts_a: dict, counts_b: dict, trials_a: Optional[int] = None, trials_b: Optional[int] = None
) -> float:
    """Total-variation distance between two empirical laws."""
    na = trials_a if trials_a is not None else sum(counts_a.values())
    nb = trials_b if trials_b is not None else sum(counts_b.values())
    keys = set(counts_a) | set(counts_b)
    return 0.5 * sum(
        abs(counts_a.get(k, 0) / na - counts_b.get(k, 0) / nb) for k in keys
    )
