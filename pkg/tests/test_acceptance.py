"""Acceptance suite: every numbered criterion below runs at its stated
tolerance and prints one PASS/FAIL line (pytest -s shows them live).

The slow criteria (5 and 6) verify heat-kernel bounds across lattice scales
and Monte Carlo marginals at 10^5 paths; the whole module is sized to finish
in well under the per-criterion runtime budgets.
"""

import itertools
import json
import math
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from latdir import (
    Box,
    GridFunction,
    LatticeScale,
    NearestNeighborField,
    PathEnsemble,
    Site,
    StableLikeField,
    auto_heat_kernel,
    bracket_n,
    diffusion_field,
    edge_weight,
    energy,
    enumerate_paths,
    g_matrix_table,
    gradient_identity_residual,
    heat_kernel,
    marginal_counts,
    moment_M,
    norm_p,
    origin,
    path_count,
    split,
    total_variation,
)
from latdir.cli import main as cli_main
from latdir.dirichlet import apply_generator
from latdir.experiments import (
    ExperimentConfig,
    cmd_exit_table,
    cmd_holder,
    cmd_jump_measure,
    cmd_killed_lower_bound,
    cmd_nash,
    cmd_poincare,
    cmd_resolvent_convergence,
    form_equivalence_residual,
)


def report(number: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    print(f"\nACCEPTANCE {number:02d} [{name}]: {status}{suffix}")
    assert ok, f"criterion {number} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# 1. exact combinatorics


def test_criterion_01_exact_combinatorics():
    start = time.time()
    checked = 0
    for d in (1, 2, 3):
        sc = LatticeScale(3, d)
        x = Site((0,) * d, sc)
        for v in itertools.product(range(-10, 11), repeat=d):
            k = sum(map(abs, v))
            if not (0 < k <= 10):
                continue
            y = Site(v, sc)
            paths = enumerate_paths(x, y)
            assert len(paths) == path_count(x, y)
            tally = Counter()
            for p in paths:
                cs = [s.coords for s in p]
                for a, b in zip(cs[:-1], cs[1:]):
                    tally[(a, b)] += 1
            ens = PathEnsemble(x, y)
            seen = set()
            for w, z in ens.directed_edges():
                got = edge_weight(x, y, w, z)
                assert isinstance(got, Fraction)
                assert got == Fraction(tally.get((w.coords, z.coords), 0), len(paths))
                seen.add((w.coords, z.coords))
                checked += 1
            assert set(tally) <= seen

    rng = np.random.default_rng(0)
    worst = 0.0
    trials = 0
    while trials < 100:
        d = int(rng.integers(1, 4))
        sc = LatticeScale(3, d)
        vx = tuple(int(a) for a in rng.integers(-4, 5, size=d))
        vy = tuple(int(a) for a in rng.integers(-4, 5, size=d))
        if not (0 < sum(abs(a - b) for a, b in zip(vx, vy)) <= 10):
            continue
        trials += 1
        lo = [min(a, b) - 1 for a, b in zip(vx, vy)]
        hi = [max(a, b) + 1 for a, b in zip(vx, vy)]
        coords = itertools.product(*[range(a, b + 1) for a, b in zip(lo, hi)])
        u = GridFunction(sc, {c: float(rng.standard_normal()) for c in coords})
        xs, ys = Site(vx, sc), Site(vy, sc)
        worst = max(worst, gradient_identity_residual(u, xs, ys)
                    / (1.0 + abs(u(xs) - u(ys))))
    elapsed = time.time() - start
    report(1, "exact-combinatorics", worst <= 1e-12 and elapsed < 60.0,
           f"{checked} edges exact, residual {worst:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. diffusion-field ground truth


def test_criterion_02_diffusion_ground_truth():
    ok = True
    detail = []
    for d, n in ((1, 8), (2, 4)):
        kappa = 0.5
        sc = LatticeScale(n, d)
        field = NearestNeighborField(sc, kappa=kappa)
        sf = split(field, 1.0 / n)
        box = Box(origin(sc), 1.0)
        df = diffusion_field(sf, box)

        # enumeration oracle: rebuild F at one interior site from raw paths
        z = (0,) * d
        oracle = np.zeros((d, d))
        for axis in range(d):
            for orient in (1, -1):
                # the ordered pair traversing the edge of z along `axis`
                xc = list(z)
                yc = list(z)
                if orient == 1:
                    xc[axis] += 1  # pair (z + e, z), path runs downward through z
                else:
                    yc = list(z)
                    yc[axis] += 1  # pair (z, z + e)
                x_s, y_s = Site(tuple(xc), sc), Site(tuple(yc), sc)
                paths = enumerate_paths(x_s, y_s)
                tally = Counter()
                for p in paths:
                    cs = [s.coords for s in p]
                    for a, b in zip(cs[:-1], cs[1:]):
                        tally[(a, b)] += 1
                zc_up = list(z)
                zc_up[axis] += 1
                pdiff = (
                    tally.get((tuple(zc_up), tuple(z)), 0)
                    - tally.get((tuple(z), tuple(zc_up)), 0)
                ) / len(paths)
                # integer coordinate differences are already n * (x - y)
                dvec = [a - b for a, b in zip(x_s.coords, y_s.coords)]
                for j in range(d):
                    oracle[axis, j] += pdiff * dvec[j] * kappa
        got = df.at(z)
        exact = np.all(got == oracle) and np.all(
            got == np.where(np.eye(d, dtype=bool), 2 * kappa, 0.0)
        )
        ok &= bool(exact)
        detail.append(f"d={d}: F interior == 2 kappa I exactly: {exact}")

    # energy reconstruction through the edge-correlation table
    sc = LatticeScale(4, 2)
    field = NearestNeighborField(sc, kappa=0.5)
    sf = split(field, 0.25)
    box = Box(origin(sc), 1.1)
    table = g_matrix_table(sf, box)
    rng = np.random.default_rng(1)
    inner = [tuple(int(v) for v in row) for row in box.coords_array()
             if math.dist(row, (0, 0)) / 4 < 0.6]
    worst = 0.0
    eye = np.eye(2, dtype=int)
    for _ in range(10):
        u = GridFunction(sc, {c: float(rng.standard_normal()) for c in inner})
        v = GridFunction(sc, {c: float(rng.standard_normal()) for c in inner})
        recon = 0.0
        for (wc, zc, i, j), g_val in table.items():
            du = 4 * (u(tuple(np.add(zc, eye[i]))) - u(zc))
            dv = 4 * (v(tuple(np.add(wc, eye[j]))) - v(wc))
            recon += du * dv * g_val
        recon /= 2.0 * 4**2
        direct = energy(u, v, sf.c_c)
        worst = max(worst, abs(recon - direct) / max(abs(direct), 1e-300))
    ok &= worst <= 1e-10
    report(2, "diffusion-ground-truth", ok,
           "; ".join(detail) + f"; reconstruction rel err {worst:.2e}")


# ---------------------------------------------------------------------------
# 3. form identities


def test_criterion_03_form_identities():
    sc = LatticeScale(8, 1)
    field = StableLikeField(sc, beta=1.5)
    m = moment_M(field, Box(origin(sc), 1.0))
    rng = np.random.default_rng(2)
    box_coords = [tuple(int(v) for v in row) for row in Box(origin(sc), 1.0).coords_array()]

    lemma_ok = True
    for _ in range(1000):
        f = GridFunction(sc, {c: float(rng.standard_normal()) for c in box_coords})
        if energy(f, f, field) > 2 * 8**2 * m * norm_p(f, 2) ** 2 * (1 + 1e-12):
            lemma_ok = False
            break

    worst_dual = 0.0
    for _ in range(25):
        f = GridFunction(sc, {c: float(rng.standard_normal()) for c in box_coords})
        g = GridFunction(sc, {c: float(rng.standard_normal()) for c in box_coords})
        vals = {c: -apply_generator(f, Site(c, sc), field) for c in box_coords}
        lhs = bracket_n(GridFunction(sc, vals), g)
        rhs = energy(f, g, field)
        worst_dual = max(worst_dual, abs(lhs - rhs) / max(abs(rhs), 1e-300))

    worst_equiv = 0.0
    for _ in range(20):
        u = GridFunction(sc, {c: float(rng.standard_normal()) for c in box_coords})
        worst_equiv = max(worst_equiv, form_equivalence_residual(u, field))

    ok = lemma_ok and worst_dual <= 1e-10 and worst_equiv <= 1e-12
    report(3, "form-identities", ok,
           f"energy bound on 10^3 f: {lemma_ok}, duality {worst_dual:.2e}, "
           f"cell-form gap {worst_equiv:.2e}")


# ---------------------------------------------------------------------------
# 4. semigroup sanity


def test_criterion_04_semigroup_sanity():
    ok = True
    details = []
    cases = [
        (NearestNeighborField(LatticeScale(16, 1), kappa=0.5), [0.1, 0.5, 1.0]),
        (StableLikeField(LatticeScale(16, 1), beta=1.5), [0.1, 0.5, 1.0]),
        (NearestNeighborField(LatticeScale(8, 2), kappa=0.5), [0.25, 1.0]),
    ]
    for field, ts in cases:
        sc = field.scale
        gen, table = auto_heat_kernel(field, origin(sc), ts, target_defect=1e-3)
        nonneg = bool(np.all(table.rows >= 0.0))
        defect_ok = bool(table.defects[-1] <= 1e-3)
        monotone = bool(np.all(np.diff(table.defects) >= -1e-12))
        # symmetry between two sources
        y = Site((2,) * sc.d, sc)
        ty = heat_kernel(gen, ts, y)
        sym_gap = max(
            abs(table.density(k, y) - ty.density(k, origin(sc))) for k in range(len(ts))
        )
        # Chapman-Kolmogorov at two time pairs
        ck_gap = 0.0
        for t_small in (ts[0], ts[-1] - ts[0]):
            tab2 = heat_kernel(gen, [t_small, ts[0] + t_small], origin(sc))
            taby = heat_kernel(gen, [ts[0]], y)
            mu = float(sc.n) ** (-sc.d)
            composed = float((tab2.rows[0] * taby.rows[0]).sum() * mu)
            direct = tab2.density(1, y)
            ck_gap = max(ck_gap, abs(composed - direct) - tab2.defects[1])
        case_ok = nonneg and defect_ok and monotone and sym_gap <= 1e-10 and ck_gap <= 1e-8
        ok &= case_ok
        details.append(
            f"{field.describe()['family']} d={sc.d}: defect {float(table.defects[-1]):.1e}, "
            f"sym {sym_gap:.1e}, CK {max(ck_gap, 0):.1e}"
        )
    report(4, "semigroup-sanity", ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 5. Nash-type bounds across scales


@pytest.mark.slow
def test_criterion_05_nash_bounds():
    start = time.time()
    ok = True
    details = []
    configs = [
        ("stable d=1", {"schema": 1, "d": 1, "n_list": [8, 16, 32], "oracle_n": 64,
                        "field": {"family": "stable_like"}, "seed": 0}),
        ("nn d=1", {"schema": 1, "d": 1, "n_list": [8, 16, 32], "oracle_n": 64,
                    "field": {"family": "nearest_neighbor", "kappa": 0.5}, "seed": 0}),
        ("nn d=2", {"schema": 1, "d": 2, "n_list": [8, 16, 32], "oracle_n": 64,
                    "field": {"family": "nearest_neighbor", "kappa": 0.5}, "seed": 0}),
    ]
    for label, cfg in configs:
        rep = cmd_nash(ExperimentConfig(cfg))
        sups = [rep.metrics[str(n)]["ondiag_sup"] for n in (8, 16, 32)]
        ratio = max(sups) / min(sups)
        eps64 = rep.metrics["64"]["eps_hat"]
        eps_ok = all(rep.metrics[str(n)]["eps_hat"] >= 0.5 * eps64 for n in (8, 16, 32))
        case_ok = rep.passed and ratio <= 2.0 and eps_ok
        ok &= case_ok
        details.append(f"{label}: ondiag ratio {ratio:.3f}, eps_hat/oracle ok {eps_ok}")
    elapsed = time.time() - start
    ok &= elapsed < 600.0
    report(5, "nash-bounds", ok, "; ".join(details) + f"; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. simulator versus linear algebra


@pytest.mark.slow
def test_criterion_06_simulator_vs_linear_algebra():
    n, t, paths = 16, 0.1, 100_000
    sc = LatticeScale(n, 1)
    nn = NearestNeighborField(sc, kappa=0.5)
    gen, table = auto_heat_kernel(nn, origin(sc), [t], target_defect=1e-4)
    counts = marginal_counts(nn, origin(sc), t, paths, seed=1234)
    kernel = {tuple(int(v) for v in row): p
              for row, p in zip(table.coords, table.prob_row(0))}
    keys = set(counts) | set(kernel)
    tv_kernel = 0.5 * sum(abs(counts.get(k, 0) / paths - kernel.get(k, 0.0)) for k in keys)
    tv_kernel += 0.5 * float(table.defects[0])  # probability the killed kernel absorbs

    stable = StableLikeField(sc, beta=1.5, c3=0.5)
    direct = marginal_counts(stable, origin(sc), t, paths, seed=77, method="direct")
    meyer = marginal_counts(stable, origin(sc), t, paths, seed=78, method="meyer",
                            lambda_trunc=0.25)
    tv_meyer = total_variation(direct, meyer)
    ok = tv_kernel <= 0.02 and tv_meyer <= 0.03
    report(6, "simulator-vs-linear-algebra", ok,
           f"TV(MC, kernel) = {tv_kernel:.4f} <= 0.02; TV(meyer, direct) = {tv_meyer:.4f} <= 0.03")


# ---------------------------------------------------------------------------
# 7. exit probabilities


@pytest.mark.slow
def test_criterion_07_exit_probabilities():
    cfg = ExperimentConfig(
        {
            "schema": 1,
            "d": 1,
            "n_list": [8, 16, 32],
            "field": {"family": "stable_like"},
            "seed": 0,
            "trials": 10_000,
            "A_list": [0.5],
            "B": 0.5,
            "t_grid": [0.02, 0.04, 0.08, 0.16, 0.32, 0.64],
            "oracle_cell": {"A": 0.3, "t0": 0.05, "n": 16},
        }
    )
    rep = cmd_exit_table(cfg)
    hats = [rep.metrics["t_hat"][f"A0.5_r1.0_n{n}"] for n in (8, 16, 32)]
    stable_ok = max(hats) / min(hats) <= 2.0
    cell = rep.metrics["oracle_cell"]
    cell_ok = cell["wilson_lo"] - 1e-3 <= cell["defect"] <= cell["wilson_hi"] + 1e-3
    monotone_ok = all(c.ok for c in rep.checks if c.name.startswith("monotone"))
    ok = rep.passed and stable_ok and cell_ok and monotone_ok
    report(7, "exit-probabilities", ok,
           f"p_hat {cell['p_hat']:.4f} vs defect {cell['defect']:.4f} in CI; "
           f"t_hat(1/2,1/2) = {hats} within 2x; monotone {monotone_ok}")


# ---------------------------------------------------------------------------
# 8. resolvent convergence


def test_criterion_08_resolvent_convergence():
    start = time.time()
    cfg = ExperimentConfig(
        {"schema": 1, "d": 1, "n_list": [8, 16, 32, 64], "seed": 0,
         "kappa": 0.5, "lambda_res": 1.0, "gauss_width": 0.15,
         "final_tol": 0.05, "identity_tol": 1e-8}
    )
    rep = cmd_resolvent_convergence(cfg)
    errs = [rep.metrics[str(n)]["sup_rel_error"] for n in (8, 16, 32, 64)]
    decreasing = all(errs[i + 1] < errs[i] for i in range(3))
    resid = max(rep.metrics[str(n)]["energy_identity_residual"] for n in (8, 16, 32, 64))
    elapsed = time.time() - start
    ok = rep.passed and decreasing and errs[-1] <= 0.05 and resid <= 1e-8 and elapsed < 300
    report(8, "resolvent-convergence", ok,
           f"sup rel errors {['%.4f' % e for e in errs]} strictly decreasing, "
           f"identity residual {resid:.1e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. jump-measure weak convergence


def test_criterion_09_jump_measure():
    cfg = ExperimentConfig(
        {
            "schema": 1,
            "d": 1,
            "n_list": [16, 32, 64],
            "seed": 0,
            "field": {"family": "stable_like", "alpha": 1.0, "beta": 1.0,
                      "c1": 1.0, "c2": 1.0, "c3": 1.0, "c4": 1.0, "c5": 1.0},
            "annuli": [2.0, 4.0],
            "final_tol": 0.02,
        }
    )
    rep = cmd_jump_measure(cfg)
    errs = [rep.metrics[str(n)]["max_rel_error"] for n in (16, 32, 64)]
    ok = rep.passed and errs[2] <= 0.02 and errs[2] < errs[1] < errs[0]
    report(9, "jump-measure", ok, f"max rel errors {['%.4f' % e for e in errs]}")


# ---------------------------------------------------------------------------
# 10. Hoelder regularity


def test_criterion_10_holder_regularity():
    cfg = ExperimentConfig(
        {"schema": 1, "d": 1, "n_list": [8, 16, 32], "t0": 0.25,
         "field": {"family": "stable_like"}, "seed": 0}
    )
    rep = cmd_holder(cfg)
    betas = [rep.metrics[str(n)]["beta_hat"] for n in (8, 16, 32)]
    fracs = [rep.metrics[str(n)]["holdout_violation_fraction"] for n in (8, 16, 32)]
    ok = (
        rep.passed
        and all(b > 0 for b in betas)
        and max(betas) / min(betas) <= 3.0
        and all(f < 0.01 for f in fracs)
    )
    report(10, "holder-regularity", ok,
           f"beta_hat {['%.3f' % b for b in betas]}, holdout violations {fracs}")


# ---------------------------------------------------------------------------
# 11. Poincare and killed lower bound


def test_criterion_11_poincare_and_killed_lower():
    poi = cmd_poincare(ExperimentConfig(
        {"schema": 1, "d": 1, "n_list": [4, 8, 16], "seed": 0}))
    c2 = {n: poi.metrics[str(n)]["c2_hat"] for n in (4, 8, 16)}
    poi_ok = poi.passed and c2[16] >= 0.5 * c2[4]
    kil = cmd_killed_lower_bound(ExperimentConfig(
        {"schema": 1, "d": 1, "n_list": [8, 16], "field": {"family": "stable_like"},
         "seed": 0}))
    c1 = {n: kil.metrics[str(n)]["c1_hat"] for n in (8, 16)}
    kil_ok = kil.passed and c1[16] >= 0.5 * c1[8]
    report(11, "poincare-killed-lower", poi_ok and kil_ok,
           f"c2_hat {c2} (16 vs 4 ok {poi_ok}); c1_hat {c1} (16 vs 8 ok {kil_ok})")


# ---------------------------------------------------------------------------
# 12. reproducibility


def test_criterion_12_reproducibility(tmp_path):
    cfg = {
        "schema": 1, "d": 1, "n_list": [8], "seed": 9,
        "field": {"family": "stable_like"},
        "trials": 400, "t_grid": [0.05, 0.2], "oracle_cell": None,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    identical = True
    for command, artifacts in [
        ("check-assumptions", ["check_assumptions.csv", "check_assumptions_report.json"]),
        ("exit-table", ["exit_table.csv", "exit_table_report.json"]),
        ("heat-kernel", ["heat_kernel.csv", "heat_kernel_meta.json"]),
    ]:
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{command}-{tag}"
            code = cli_main([command, "--config", str(cfg_path), "--out", str(out)])
            assert code == 0
            outs.append(out)
        for name in artifacts:
            if (outs[0] / name).read_bytes() != (outs[1] / name).read_bytes():
                identical = False
    report(12, "reproducibility", identical, "byte-identical CSV/JSON on rerun")
