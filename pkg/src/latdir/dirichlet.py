"""Dirichlet-form energies, the generator, heat kernels and resolvents.

The generator acts as A f(x) = sum_y (f(y) - f(x)) C(x, y) n^2.  On a finite
box the chain is killed on exit: off-diagonal entries are the in-box jump
rates while the diagonal carries the full rate -n^2 nu_x including the mass
that jumps out of the box.  The killed kernel is therefore a pointwise lower
bound for the conservative one and the per-row mass defect (the absorbed
probability) is an explicit error certificate.

Matrix exponentials use uniformization, exp(tA) = E[(I + A/L)^N] with N
Poisson(L t), which preserves nonnegativity exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse, stats
from scipy.sparse import linalg as sparse_linalg

from .conductance import (
    ConductanceField,
    RangeRestrictedField,
    SplitField,
    field_hash,
    moment_M,
    nu,
)
from .lattice import Box, GridFunction, LatticeScale, Site

NONZERO_GUARD = 10**7


# ---------------------------------------------------------------------------
# bilinear forms


def energy(
    f: GridFunction, g: GridFunction, field: ConductanceField, tol: float = 1e-8
) -> float:
    """Bilinear Dirichlet energy (n^{2-d}/2) sum_{x,y} (f(y)-f(x))(g(y)-g(x)) C(x,y).

    Finitely supported arguments; jumps from the support to the rest of the
    lattice enter through nu, so unbounded-range tails are handled exactly up
    to the declared tail tolerance.
    """
    if f.scale != g.scale or f.scale != field.scale:
        raise ValueError("mismatched lattices")
    scale = f.scale
    n, d = scale.n, scale.d
    support = sorted(set(f.support()) | set(g.support()))
    fv = [f(c) for c in support]
    gv = [g(c) for c in support]
    pair_term = 0.0
    in_support = [0.0] * len(support)
    for i in range(len(support)):
        for j in range(i + 1, len(support)):
            c = field.eval_coords(support[i], support[j])
            if c != 0.0:
                pair_term += (fv[i] - fv[j]) * (gv[i] - gv[j]) * c
                in_support[i] += c
                in_support[j] += c
    boundary = 0.0
    for i, coords in enumerate(support):
        if fv[i] != 0.0 and gv[i] != 0.0:
            nu_x = nu(field, Site(coords, scale), tol)
            boundary += fv[i] * gv[i] * (nu_x - in_support[i])
    return float(n) ** (2 - d) * (pair_term + boundary)


def energy_nn(f: GridFunction) -> float:
    """Nearest-neighbour energy (n^{2-d}/2) sum_{|x-y|=1/n} (f(x)-f(y))^2."""
    scale = f.scale
    n, d = scale.n, scale.d
    support = set(f.support())
    edges = set()
    for coords in support:
        for axis in range(d):
            for step in (-1, 1):
                other = list(coords)
                other[axis] += step
                edge = tuple(sorted([coords, tuple(other)]))
                edges.add(edge)
    total = sum((f(a) - f(b)) ** 2 for a, b in edges)
    return float(n) ** (2 - d) * total


def energy_split(
    u: GridFunction, g: GridFunction, splitfield: SplitField, tol: float = 1e-8
) -> tuple[float, float]:
    """Short-range and long-range energies; they sum exactly to the full energy."""
    e_c = energy(u, g, splitfield.c_c, tol)
    e_j = energy(u, g, splitfield.c_j, tol)
    return e_c, e_j


def apply_generator(
    f: GridFunction, x: Site, field: ConductanceField, tol: float = 1e-8
) -> float:
    """Pointwise generator value n^2 sum_y (f(y) - f(x)) C(x, y)."""
    if f.scale != field.scale or x.scale != field.scale:
        raise ValueError("mismatched lattices")
    n = field.scale.n
    fx = f(x)
    acc = 0.0
    for coords, fy in f.items():
        if coords == x.coords:
            continue
        c = field.eval_coords(x.coords, coords)
        if c != 0.0:
            acc += fy * c
    return n * n * (acc - fx * nu(field, x, tol))


# ---------------------------------------------------------------------------
# generator matrices on boxes


@dataclass
class GeneratorMatrix:
    """Sparse killed-box discretization of the generator."""

    box: Box
    scale: LatticeScale
    coords: np.ndarray  # (N, d)
    matrix: sparse.csr_matrix  # symmetric, row sums <= 0
    nu_full: np.ndarray  # (N,) total conductance per site, tails included
    field_desc: dict
    meta: dict = dataclass_field(default_factory=dict)

    def __post_init__(self) -> None:
        self.index = {tuple(int(v) for v in row): i for i, row in enumerate(self.coords)}
        self.lambda_unif = float((self.scale.n**2) * self.nu_full.max()) if len(self.nu_full) else 0.0

    def __len__(self) -> int:
        return len(self.coords)

    def vector_of(self, f: GridFunction) -> np.ndarray:
        out = np.zeros(len(self.coords))
        for c, v in f.items():
            i = self.index.get(c)
            if i is not None:
                out[i] = v
        return out

    def grid_function_of(self, vec: np.ndarray) -> GridFunction:
        return GridFunction(
            self.scale,
            {tuple(int(v) for v in row): float(x) for row, x in zip(self.coords, vec)},
        )

    def dirichlet_energy(self, vec: np.ndarray) -> float:
        """Killed-form energy n^{-d} f^T (-A) f; equals energy(f, f) for f in the box."""
        n, d = self.scale.n, self.scale.d
        return float(n) ** (-d) * float(vec @ (-(self.matrix @ vec)))

    def save_coo(self, path) -> None:
        """Coordinate-list text export with a JSON header line."""
        path = Path(path)
        coo = self.matrix.tocoo()
        header = json.dumps(
            {
                "n": self.scale.n,
                "d": self.scale.d,
                "box_center": list(map(int, self.box.center.coords)),
                "box_radius": self.box.radius,
                "field_hash": self.meta.get("field_hash", ""),
                "sites": len(self.coords),
            },
            sort_keys=True,
        )
        lines = [header]
        order = np.lexsort((coo.col, coo.row))
        for k in order:
            lines.append(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}")
        path.write_text("\n".join(lines) + "\n")


def assemble(
    field: ConductanceField,
    box: Box,
    tol: float = 1e-8,
    drop_tol: float = 0.0,
    nonzero_guard: int = NONZERO_GUARD,
) -> GeneratorMatrix:
    """Assemble the killed-box generator with full-nu diagonal."""
    scale = field.scale
    if box.scale != scale:
        raise ValueError("box and field lattices differ")
    n, d = scale.n, scale.d
    coords = box.coords_array()
    nsite = len(coords)
    if nsite == 0:
        raise ValueError("empty box")

    rows, cols, vals = _offdiagonal_rates(field, coords, nonzero_guard)
    if drop_tol > 0.0:
        keep = vals >= drop_tol
        rows, cols, vals = rows[keep], cols[keep], vals[keep]

    if field.translation_invariant:
        nu_val = nu(field, Site(tuple(int(v) for v in coords[0]), scale), tol)
        nu_full = np.full(nsite, nu_val)
    else:
        nu_full = np.array(
            [nu(field, Site(tuple(int(v) for v in row), scale), tol) for row in coords]
        )

    diag = -(n * n) * nu_full
    mat = sparse.coo_matrix(
        (
            np.concatenate([vals, diag]),
            (np.concatenate([rows, np.arange(nsite)]), np.concatenate([cols, np.arange(nsite)])),
        ),
        shape=(nsite, nsite),
    ).tocsr()
    return GeneratorMatrix(
        box=box,
        scale=scale,
        coords=coords,
        matrix=mat,
        nu_full=nu_full,
        field_desc=field.describe(),
        meta={"field_hash": field_hash(field), "drop_tol": drop_tol},
    )


def _offdiagonal_rates(field, coords, nonzero_guard):
    scale = field.scale
    n, d = scale.n, scale.d
    nsite = len(coords)
    reach = field.range_hint
    if reach is not None and field.translation_invariant:
        return _rates_by_displacement(field, coords, nonzero_guard)
    if field.isotropic:
        if nsite * nsite > nonzero_guard:
            raise MemoryError(
                f"dense pair structure would need {nsite * nsite} entries (> {nonzero_guard})"
            )
        rows_list, cols_list, vals_list = [], [], []
        block = max(1, 2**22 // max(nsite, 1))
        for start in range(0, nsite, block):
            blk = coords[start : start + block]
            sq = ((blk[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
            rates = field.eval_sqdist(sq) * (n * n)
            np.fill_diagonal(rates[:, start : start + blk.shape[0]], 0.0)
            r, c = np.nonzero(rates)
            rows_list.append(r + start)
            cols_list.append(c)
            vals_list.append(rates[r, c])
        return (
            np.concatenate(rows_list),
            np.concatenate(cols_list),
            np.concatenate(vals_list),
        )
    # generic field: plain double loop, intended for small test boxes
    if nsite * nsite > nonzero_guard:
        raise MemoryError("generic assembly on a box this large is not supported")
    rows, cols, vals = [], [], []
    keys = [tuple(int(v) for v in row) for row in coords]
    for i, ci in enumerate(keys):
        for j in range(i + 1, nsite):
            c = field.eval_coords(ci, keys[j])
            if c != 0.0:
                rate = n * n * c
                rows += [i, j]
                cols += [j, i]
                vals += [rate, rate]
    return np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64), np.asarray(vals)


def _rates_by_displacement(field, coords, nonzero_guard):
    scale = field.scale
    n, d = scale.n, scale.d
    reach_steps = int(math.floor(field.range_hint * n * (1 + 1e-12) + 1e-9))
    lo = coords.min(axis=0)
    shape = coords.max(axis=0) - lo + 1
    grid = -np.ones(shape, dtype=np.int64)
    grid[tuple((coords - lo).T)] = np.arange(len(coords))
    zero = (0,) * d
    import itertools

    rows_list, cols_list, vals_list = [], [], []
    count = 0
    for off in itertools.product(*[range(-reach_steps, reach_steps + 1)] * d):
        if all(o == 0 for o in off):
            continue
        rate = field.eval_coords(zero, off) * n * n
        if rate == 0.0:
            continue
        tgt = coords + np.asarray(off, dtype=np.int64)
        ok = np.all((tgt >= lo) & (tgt <= coords.max(axis=0)), axis=1)
        tgt_idx = np.full(len(coords), -1, dtype=np.int64)
        tgt_idx[ok] = grid[tuple((tgt[ok] - lo).T)]
        ok &= tgt_idx >= 0
        src = np.nonzero(ok)[0]
        count += len(src)
        if count > nonzero_guard:
            raise MemoryError(f"more than {nonzero_guard} nonzeros requested")
        rows_list.append(src)
        cols_list.append(tgt_idx[src])
        vals_list.append(np.full(len(src), rate))
    if not rows_list:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    return np.concatenate(rows_list), np.concatenate(cols_list), np.concatenate(vals_list)


# ---------------------------------------------------------------------------
# heat kernels


@dataclass
class HeatKernelTable:
    """Rows p(t_k, x0, .) of a killed-box heat kernel, as densities w.r.t. mu^n.

    ``defects[k]`` is the probability absorbed by time t_k, an upper bound on
    the truncation error against the conservative whole-lattice kernel.
    """

    scale: LatticeScale
    box: Box
    x0: Site
    times: np.ndarray  # (T,) increasing
    coords: np.ndarray  # (N, d)
    rows: np.ndarray  # (T, N) densities
    defects: np.ndarray  # (T,)
    meta: dict = dataclass_field(default_factory=dict)

    def __post_init__(self) -> None:
        self.index = {tuple(int(v) for v in row): i for i, row in enumerate(self.coords)}

    def density(self, t_index: int, site_or_coords) -> float:
        key = (
            site_or_coords.coords
            if isinstance(site_or_coords, Site)
            else tuple(int(v) for v in site_or_coords)
        )
        return float(self.rows[t_index, self.index[key]])

    def prob_row(self, t_index: int) -> np.ndarray:
        return self.rows[t_index] * float(self.scale.n) ** (-self.scale.d)

    def save_csv(self, path) -> None:
        path = Path(path)
        d = self.scale.d
        header = "t," + ",".join(f"coord_{i + 1}" for i in range(d)) + ",density,mass_defect"
        lines = [header]
        for k, t in enumerate(self.times):
            defect = float(self.defects[k])
            for row, val in zip(self.coords, self.rows[k]):
                cs = ",".join(str(int(v)) for v in row)
                lines.append(f"{float(t)!r},{cs},{float(val)!r},{defect!r}")
        path.write_text("\n".join(lines) + "\n")


def heat_kernel(
    gen: GeneratorMatrix,
    t_grid,
    x0: Site,
    series_tol: float = 1e-10,
    k_cap: int = 2_000_000,
) -> HeatKernelTable:
    """Heat kernel rows from x0 by uniformization, all times in one sweep.

    The Poisson series is truncated so the neglected mass is below
    ``series_tol`` per entry; nonnegativity is preserved exactly.
    """
    times = np.asarray(sorted(float(t) for t in t_grid))
    if len(times) == 0 or times[0] <= 0:
        raise ValueError("time grid must be positive")
    if np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing")
    scale = gen.scale
    n, d = scale.n, scale.d
    i0 = gen.index.get(x0.coords)
    if i0 is None:
        raise ValueError("x0 is not inside the box")
    nsite = len(gen.coords)
    lam = gen.lambda_unif
    out = np.zeros((len(times), nsite))
    if lam == 0.0:
        out[:, i0] = 1.0
        defects = np.zeros(len(times))
    else:
        k_needed = [int(stats.poisson.isf(series_tol, lam * t)) + 2 for t in times]
        k_max = max(k_needed)
        if k_max > k_cap:
            raise RuntimeError(
                f"uniformization needs {k_max} terms (> cap {k_cap}); "
                "reduce the time horizon or the box"
            )
        ks = np.arange(k_max + 1)
        weights = np.stack([stats.poisson.pmf(ks, lam * t) for t in times])
        transition = sparse.identity(nsite, format="csr") + gen.matrix * (1.0 / lam)
        v = np.zeros(nsite)
        v[i0] = 1.0
        for k in range(k_max + 1):
            w = weights[:, k]
            active = w > 1e-18
            if active.any():
                out[active] += w[active, None] * v[None, :]
            if k < k_max:
                v = transition @ v
        defects = 1.0 - out.sum(axis=1)
    defects = np.maximum(defects, 0.0)
    rows = out * float(n) ** d
    meta = dict(gen.meta)
    meta.update({"lambda_unif": lam, "series_tol": series_tol, "box_radius": gen.box.radius})
    return HeatKernelTable(
        scale=scale,
        box=gen.box,
        x0=x0,
        times=times,
        coords=gen.coords,
        rows=rows,
        defects=defects,
        meta=meta,
    )


def scaled_kernel(table: HeatKernelTable, r: float) -> HeatKernelTable:
    """Space-time rescaled kernel r^d p(r^2 t, r x, r y) on the lattice (1/(nr))Z^d."""
    n, d = table.scale.n, table.scale.d
    if not (0 < r <= 1):
        raise ValueError("r must lie in (0, 1]")
    nr = n * r
    if abs(nr - round(nr)) > 1e-9:
        raise ValueError(f"n*r = {nr} is not an integer; incompatible rescaling")
    m = int(round(nr))
    new_scale = LatticeScale(m, d)
    new_center = Site(table.box.center.coords, new_scale)
    meta = dict(table.meta)
    meta["rescaled_by"] = r
    return HeatKernelTable(
        scale=new_scale,
        box=Box(new_center, table.box.radius / r),
        x0=Site(table.x0.coords, new_scale),
        times=table.times / (r * r),
        coords=table.coords.copy(),
        rows=table.rows * (r**d),
        defects=table.defects.copy(),
        meta=meta,
    )


def truncated_kernel(
    field: ConductanceField,
    box: Box,
    lambda_trunc: float,
    t_grid,
    x0: Site,
    series_tol: float = 1e-10,
) -> HeatKernelTable:
    """Kernel of the jump-truncated chain: jumps longer than lambda removed.

    The diagonal uses the truncated nu, so removing all jumps yields the
    identity semigroup rather than extra killing.
    """
    if lambda_trunc <= 0:
        raise ValueError("lambda_trunc must be positive")
    truncated = RangeRestrictedField(field, 0.0, lambda_trunc)
    gen = assemble(truncated, box)
    table = heat_kernel(gen, t_grid, x0, series_tol)
    table.meta["lambda_trunc"] = lambda_trunc
    return table


def resolvent(
    gen: GeneratorMatrix, lambda_res: float, f: GridFunction, rtol: float = 1e-10
) -> GridFunction:
    """Solve (lambda - A) u = f on the box (absorbing outside)."""
    if lambda_res <= 0:
        raise ValueError("lambda_res must be positive")
    b = gen.vector_of(f)
    m = (sparse.identity(len(gen.coords), format="csr") * lambda_res) - gen.matrix
    if len(gen.coords) <= 200_000:
        u = sparse_linalg.spsolve(m.tocsc(), b)
    else:
        u, info = sparse_linalg.cg(m, b, rtol=1e-13, maxiter=20_000)
        if info != 0:
            raise RuntimeError(f"conjugate gradient did not converge (info={info})")
    resid = np.linalg.norm(m @ u - b)
    if resid > rtol * max(np.linalg.norm(b), 1e-300):
        raise RuntimeError(f"resolvent residual {resid} exceeds tolerance")
    return gen.grid_function_of(u)


# ---------------------------------------------------------------------------
# carre du champ and off-diagonal decay diagnostics


def carre_du_champ(
    v: GridFunction,
    xi: Site,
    field: ConductanceField,
    lambda_trunc: float,
    r: float = 1.0,
) -> float:
    """Pointwise energy density of the lambda-truncated form at xi.

    sum over |xi - eta| <= lambda of (v(eta) - v(xi))^2 C(r eta, r xi) (nr)^2,
    with xi, eta on the rescaled lattice (1/(nr))Z^d.
    """
    n, d = field.scale.n, field.scale.d
    nr = n * r
    if abs(nr - round(nr)) > 1e-9:
        raise ValueError("n*r must be an integer")
    m = int(round(nr))
    if xi.scale.n != m or v.scale.n != m:
        raise ValueError("xi and v must live on the rescaled lattice")
    k = int(math.floor(lambda_trunc * m * (1 + 1e-12) + 1e-9))
    thresh = (lambda_trunc * m) ** 2 * (1 + 1e-12) + 1e-9
    vx = v(xi)
    import itertools

    total = 0.0
    for off in itertools.product(*[range(-k, k + 1)] * d):
        sq = sum(o * o for o in off)
        if sq == 0 or sq > thresh:
            continue
        eta = tuple(a + o for a, o in zip(xi.coords, off))
        c = field.eval_coords(xi.coords, eta)  # base-lattice sites share these coords
        if c != 0.0:
            total += (v(eta) - vx) ** 2 * c
    return total * (m * m)


@dataclass
class DaviesExponent:
    """Grid-optimized value of s R - t c3 e^{3 s lambda}(1 + 1/lambda^2)."""

    s_grid: np.ndarray
    lambda_trunc: float
    R: float
    t: float
    c3: float
    value: float
    s_star: float


def davies_exponent(
    t: float, R: float, lambda_trunc: float, c3: float, s_grid=None
) -> DaviesExponent:
    if s_grid is None:
        s_grid = np.geomspace(1e-4, 50.0, 400)
    s_grid = np.asarray(s_grid, dtype=float)
    vals = s_grid * R - t * c3 * np.exp(3.0 * s_grid * lambda_trunc) * (
        1.0 + 1.0 / lambda_trunc**2
    )
    vals = np.concatenate([[0.0], vals])  # s -> 0 recovers the trivial bound
    s_ext = np.concatenate([[0.0], s_grid])
    best = int(np.argmax(vals))
    return DaviesExponent(
        s_grid=s_grid,
        lambda_trunc=lambda_trunc,
        R=R,
        t=t,
        c3=c3,
        value=float(vals[best]),
        s_star=float(s_ext[best]),
    )


def davies_off_diagonal_check(table: HeatKernelTable, params: Optional[dict] = None) -> dict:
    """Diagnostic for the off-diagonal decay of a truncated kernel.

    For each time, regress log p(t, x0, y) on R = |x0 - y| and report the
    fitted decay rate, the worst upward violation of the fitted line, and
    whether halving t tightens the rate.  Constants are fitted, not derived.
    """
    params = params or {}
    floor = params.get("density_floor", 1e-13)
    d = table.scale.d
    n = table.scale.n
    x0c = np.asarray(table.x0.coords, dtype=float)
    dists = np.sqrt(((table.coords - x0c) ** 2).sum(axis=1)) / n
    slopes = {}
    violations = {}
    ondiag = {}
    for k, t in enumerate(table.times):
        row = table.rows[k]
        use = row > floor
        if use.sum() < 4:
            continue
        logs = np.log(row[use])
        rr = dists[use]
        slope, intercept = np.polyfit(rr, logs, 1)
        slopes[float(t)] = float(-slope)
        # one-sided residual: how far any point pokes above the fitted line
        violations[float(t)] = float(np.max(logs - (intercept + slope * rr)))
        ondiag[float(t)] = float(t ** (d / 2.0) * table.density(k, table.x0))
    ts = sorted(slopes)
    tighter = all(
        slopes[ts[i]] >= slopes[ts[i + 1]] - 1e-9 for i in range(len(ts) - 1)
    )  # smaller t should not decay slower
    return {
        "decay_rates": slopes,
        "max_upward_violation": violations,
        "ondiag_t_scaled": ondiag,
        "smaller_t_decays_faster": tighter,
        "lambda_trunc": table.meta.get("lambda_trunc"),
    }


# ---------------------------------------------------------------------------
# box sizing


def default_box_radius(
    field: ConductanceField,
    t_max: float,
    target_defect: float = 1e-3,
    box_probe: Optional[Box] = None,
) -> float:
    """Radius heuristic so the exit probability by t_max stays below target.

    Combines a Gaussian estimate from the second-moment rate with a
    large-jump term from the conductance tail; the assembled kernel's mass
    defect certifies (and, if needed, corrects) the choice.
    """
    scale = field.scale
    n, d = scale.n, scale.d
    probe = box_probe or Box(Site((0,) * d, scale), 1.5 / n)
    m = moment_M(field, probe)
    # per-axis variance rate is about m/d; defect certification corrects undershoots
    r_diff = math.sqrt(4.0 * max(m / d, 1e-12) * t_max * math.log(8.0 * d / target_defect))
    r_jump = 0.0
    if field.range_hint is None:
        r_jump = 1.0
        while (
            t_max * n * n * field.tail_rate_bound(r_jump / 2.0) > target_defect / 4.0
            and r_jump < 2**16
        ):
            r_jump *= 1.5
    return max(r_diff, r_jump, 3.0 / n)


def auto_heat_kernel(
    field: ConductanceField,
    x0: Site,
    t_grid,
    target_defect: float = 1e-3,
    radius: Optional[float] = None,
    series_tol: float = 1e-10,
    max_grow: int = 4,
) -> tuple[GeneratorMatrix, HeatKernelTable]:
    """Assemble on a defect-certified box and return kernel rows from x0."""
    t_max = max(float(t) for t in t_grid)
    r = radius if radius is not None else default_box_radius(field, t_max, target_defect)
    last = None
    for _ in range(max_grow + 1):
        gen = assemble(field, Box(x0, r))
        table = heat_kernel(gen, t_grid, x0, series_tol)
        table.meta["target_defect"] = target_defect
        last = (gen, table)
        if table.defects[-1] <= target_defect:
            return gen, table
        r *= 1.4
    gen, table = last
    table.meta["defect_warning"] = float(table.defects[-1])
    return gen, table
