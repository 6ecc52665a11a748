"""Experiment harness: each command checks one family of estimates and emits
machine-readable evidence (CSV tables plus a JSON report).

Limits without a closed form are measured against the largest-n run
(self-oracle mode), clearly labeled in the report.  Fitted constants are
always reported together with their fitting grid and a held-out check grid;
they are never claimed to be canonical.  Every command is deterministic given
(config, seed): reruns produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special, stats

from .conductance import (
    ConductanceField,
    NearestNeighborField,
    StableLikeField,
    check_A1,
    check_A2,
    check_A3,
    field_from_config,
    moment_M,
    nu,
    resolve_eps,
    split,
)
from .dirichlet import (
    assemble,
    auto_heat_kernel,
    energy,
    heat_kernel,
    resolvent,
)
from .lattice import (
    Box,
    GridFunction,
    LatticeScale,
    Site,
    bracket_n,
    origin,
    restrict,
)
from .paths import a4_l1_error, diffusion_field, second_moment_matrix
from .simulate import (
    exit_probability,
    exit_profile,
    simulate,
)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration and reports


@dataclass
class ExperimentConfig:
    raw: dict

    def __post_init__(self) -> None:
        if self.raw.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {self.raw.get('schema')}")
        self.raw.setdefault("schema", SCHEMA_VERSION)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls(json.loads(Path(path).read_text()))

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        merged = dict(self.raw)
        merged.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig(merged)

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def d(self) -> int:
        return int(self.raw.get("d", 1))

    @property
    def n_list(self) -> list[int]:
        return [int(n) for n in self.raw.get("n_list", [8, 16, 32])]

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    def field_for(self, n: int) -> ConductanceField:
        spec = self.raw.get("field", {"family": "nearest_neighbor", "kappa": 0.5})
        return field_from_config(spec, LatticeScale(n, self.d))

    def eps_for(self, n: int) -> float:
        return resolve_eps(self.raw.get("eps_n_rule", "n^-0.5"), n)


@dataclass
class Check:
    name: str
    ok: bool
    lhs: float
    rhs: float
    op: str  # "<=", ">=", "<", ">"

    def to_dict(self) -> dict:
        return {"name": self.name, "ok": bool(self.ok), "lhs": self.lhs, "rhs": self.rhs, "op": self.op}


def _check(name: str, lhs: float, op: str, rhs: float) -> Check:
    ops = {
        "<=": lambda a, b: a <= b,
        ">=": lambda a, b: a >= b,
        "<": lambda a, b: a < b,
        ">": lambda a, b: a > b,
    }
    lhs = float(lhs)
    rhs = float(rhs)
    ok = bool(math.isfinite(lhs) and ops[op](lhs, rhs))
    return Check(name=name, ok=ok, lhs=lhs, rhs=rhs, op=op)


@dataclass
class ConvergenceReport:
    experiment: str
    config: dict
    metrics: dict
    checks: list[Check] = dataclass_field(default_factory=list)
    fitted: dict = dataclass_field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "metrics": self.metrics,
            "fitted": self.fitted,
            "checks": [c.to_dict() for c in self.checks],
            "passed": self.passed,
        }

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{self.experiment}_report.json"
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        return path


def _write_csv(out_dir, name: str, header: list[str], rows: list[tuple]) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row))
    (out_dir / name).write_text("\n".join(lines) + "\n")


def _dyadic_times(n: int) -> list[float]:
    return sorted(2.0**-j for j in range(0, 16) if 2.0**-j > 1.0 / n)


def smooth_bump(u: float) -> float:
    """C-infinity bump supported on (-1, 1), value 1 at 0."""
    if abs(u) >= 1.0:
        return 0.0
    return math.exp(1.0 - 1.0 / (1.0 - u * u))


# ---------------------------------------------------------------------------
# assumption checks


def cmd_check_assumptions(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    m0 = float(cfg.get("A2_M0", 1.0))
    delta = float(cfg.get("A2_delta", 0.25))
    radius = float(cfg.get("box_radius", 1.0))
    rng = np.random.default_rng(config.seed)
    rows = []
    checks = []
    metrics = {}
    for n in config.n_list:
        field = config.field_for(n)
        box = Box(origin(field.scale), radius)
        rep = check_A1(field, box)
        rep = rep.merged(check_A2(field, box, m0, delta))
        phi, phi_smooth = _a3_envelope_for(field)
        if phi is not None:
            rep = rep.merged(check_A3(field, box, phi, phi_smooth, seed=config.seed))
        rep.M_hat = moment_M(field, box)
        sym_gap = _symmetry_gap(field, box, rng)
        metrics[str(n)] = {
            "c1_hat": rep.c1_hat,
            "c2_hat": rep.c2_hat,
            "M_hat": rep.M_hat,
            "A2_ok": rep.A2_ok,
            "A3_margin": rep.A3_margin,
            "A3_integral": rep.A3_integral,
            "symmetry_gap": sym_gap,
            "A2_failures": [list(map(list, f)) for f in rep.A2_failures[:5]],
        }
        if field.translation_invariant:
            # ellipticity probe of the short-range second-moment matrix
            sm = second_moment_matrix(split(field, config.eps_for(n)))
            ev = np.linalg.eigvalsh(0.5 * (sm + sm.T))
            metrics[str(n)]["A4_ellipticity"] = [float(ev[0]), float(ev[-1])]
            checks.append(_check(f"A4_elliptic_n{n}", float(ev[0]), ">", 0.0))
        rows.append(
            (n, rep.c1_hat, rep.c2_hat, rep.M_hat, int(bool(rep.A2_ok)),
             rep.A3_margin if rep.A3_margin is not None else math.nan, sym_gap)
        )
        checks.append(_check(f"A1_positive_n{n}", rep.c1_hat, ">", 0.0))
        checks.append(_check(f"A2_ok_n{n}", 1.0 if rep.A2_ok else 0.0, ">=", 1.0))
        if rep.A3_margin is not None:
            checks.append(_check(f"A3_margin_n{n}", rep.A3_margin, "<=", 1.0 + 1e-9))
        checks.append(_check(f"symmetry_n{n}", sym_gap, "<=", 0.0))
    c1s = [metrics[str(n)]["c1_hat"] for n in config.n_list]
    c2s = [metrics[str(n)]["c2_hat"] for n in config.n_list]
    stability = float(cfg.get("A1_stability_tol", 0.01))
    checks.append(_check("A1_c1_stable", max(c1s) / min(c1s) - 1.0, "<=", stability))
    checks.append(_check("A1_c2_stable", max(c2s) / min(c2s) - 1.0, "<=", stability))
    _write_csv(
        out_dir,
        "check_assumptions.csv",
        ["n", "c1_hat", "c2_hat", "M_hat", "A2_ok", "A3_margin", "symmetry_gap"],
        rows,
    )
    return ConvergenceReport("check_assumptions", cfg, metrics, checks)


def _a3_envelope_for(field):
    if isinstance(field, StableLikeField):
        return field.a3_envelope(), field.a3_envelope_smooth()
    if isinstance(field, NearestNeighborField):
        n, d = field.scale.n, field.scale.d
        spike_at = 1.0 / n
        spike = field.kappa * float(n) ** (d + 2)

        def phi(t: float) -> float:
            return spike if abs(t - spike_at) <= 1e-12 * spike_at else 0.0

        return phi, (lambda t: 0.0)
    return None, None


def _symmetry_gap(field, box, rng) -> float:
    coords = box.coords_array()
    gap = 0.0
    pair_count = min(10_000, 20 * len(coords))
    for _ in range(pair_count):
        i, j = rng.integers(0, len(coords), size=2)
        if i == j:
            continue
        ci = tuple(int(v) for v in coords[i])
        cj = tuple(int(v) for v in coords[j])
        gap = max(gap, abs(field.eval_coords(ci, cj) - field.eval_coords(cj, ci)))
    return gap


# ---------------------------------------------------------------------------
# Nash-type bounds


def cmd_nash(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    oracle_n = int(cfg.get("oracle_n", 64))
    n_random = int(cfg.get("random_functions", 48))
    all_n = sorted(set(config.n_list) | {oracle_n})
    rows = []
    metrics = {}
    for n in all_n:
        field = config.field_for(n)
        scale = field.scale
        d = scale.d
        ts = _dyadic_times(n)
        gen, table = auto_heat_kernel(field, origin(scale), ts,
                                      target_defect=float(cfg.get("target_defect", 1e-3)))
        x0c = np.asarray((0,) * d)
        dist = np.sqrt(((table.coords - x0c) ** 2).sum(axis=1)) / n
        ondiag = []
        near_min = []
        for k, t in enumerate(table.times):
            pd = t ** (d / 2.0) * table.density(k, origin(scale))
            ondiag.append(pd)
            mask = dist <= 2.0 * math.sqrt(t)
            near = float((t ** (d / 2.0) * table.rows[k][mask]).min())
            near_min.append(near)
            rows.append((n, float(t), pd, near, float(table.defects[k])))
        quot = _nash_quotient_max(gen, field, n_random, config.seed)
        metrics[str(n)] = {
            "ondiag_sup": max(ondiag),
            "ondiag_inf": min(ondiag),
            "eps_hat": min(near_min),
            "nash_quotient_max": quot,
            "box_radius": gen.box.radius,
            "defect_max": float(table.defects.max()),
        }
    checks = []
    sups = [metrics[str(n)]["ondiag_sup"] for n in config.n_list]
    checks.append(_check("ondiag_stable_2x", max(sups) / min(sups), "<=", 2.0))
    eps_oracle = metrics[str(oracle_n)]["eps_hat"]
    for n in config.n_list:
        checks.append(
            _check(f"eps_hat_n{n}_vs_oracle", metrics[str(n)]["eps_hat"], ">=", 0.5 * eps_oracle)
        )
        checks.append(_check(f"nash_quotient_finite_n{n}",
                             metrics[str(n)]["nash_quotient_max"], "<", math.inf))
    _write_csv(out_dir, "nash.csv", ["n", "t", "t_scaled_ondiag", "t_scaled_near_min", "defect"], rows)
    return ConvergenceReport(
        "nash", cfg, metrics, checks, fitted={"oracle_n": oracle_n, "mode": "self_oracle"}
    )


def _nash_quotient_max(gen, field, n_random: int, seed: int) -> float:
    scale = gen.scale
    n, d = scale.n, scale.d
    rng = np.random.default_rng(seed)
    inner = [i for i, row in enumerate(gen.coords)
             if math.sqrt(float((np.asarray(row) ** 2).sum())) / n <= 1.0]
    worst = 0.0
    mu = float(n) ** (-d)
    for _ in range(n_random):
        vec = np.zeros(len(gen.coords))
        vec[inner] = rng.standard_normal(len(inner))
        e = gen.dirichlet_energy(vec)
        l2 = mu * float((vec**2).sum())
        l1 = mu * float(np.abs(vec).sum())
        if e <= 0 or l1 <= 0:
            continue
        worst = max(worst, l2 ** (1.0 + 2.0 / d) / (e * l1 ** (4.0 / d)))
    return worst


# ---------------------------------------------------------------------------
# exit probabilities


def cmd_exit_table(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    a_list = [float(a) for a in cfg.get("A_list", [0.5])]
    b = float(cfg.get("B", 0.5))
    t_grid = [float(t) for t in cfg.get("t_grid", [0.02 * 2**j for j in range(6)])]
    r_list = [float(r) for r in cfg.get("r_list", [1.0])]
    trials = int(cfg.get("trials", 10_000))
    rows = []
    metrics = {"t_hat": {}, "R0_hat": {}, "uniformity_spread": {}}
    checks = []
    profiles = {}
    for a in a_list:
        for r in r_list:
            p_by_n = {}
            for n in config.n_list:
                field = config.field_for(n)
                profile = exit_profile(field, origin(field.scale), r, a, t_grid, trials, config.seed)
                ps = [e.p_hat for e in profile]
                p_by_n[n] = profile
                profiles[(a, r, n)] = profile
                for e in profile:
                    rows.append((a, e.t0, n, r, e.trials, e.hits, e.p_hat, e.wilson_lo, e.wilson_hi))
                checks.append(
                    _check(f"monotone_A{a}_r{r}_n{n}",
                           max(ps[i] - ps[i + 1] for i in range(len(ps) - 1)) if len(ps) > 1 else -1.0,
                           "<=", 0.0)
                )
                t_hat = max((e.t0 for e in profile if e.p_hat <= b), default=0.0)
                metrics["t_hat"][f"A{a}_r{r}_n{n}"] = t_hat
            hats = [metrics["t_hat"][f"A{a}_r{r}_n{n}"] for n in config.n_list]
            if min(hats) > 0:
                checks.append(_check(f"t_hat_stable_A{a}_r{r}", max(hats) / min(hats), "<=", 2.0))
            slack = float(cfg.get("uniformity_tol", 0.08))
            for k, t0 in enumerate(t_grid):
                ps = [p_by_n[n][k].p_hat for n in config.n_list]
                widths = [p_by_n[n][k].wilson_hi - p_by_n[n][k].wilson_lo for n in config.n_list]
                spread = max(ps) - min(ps)
                metrics["uniformity_spread"][f"A{a}_r{r}_t{t0}"] = spread
                checks.append(
                    _check(f"uniform_A{a}_r{r}_t{t0}", spread, "<=", max(widths) + slack)
                )
    # smallest radius whose exit probability over horizon A' stays below B'
    a_prime = float(cfg.get("A_prime", t_grid[len(t_grid) // 2]))
    b_prime = float(cfg.get("B_prime", 0.5))
    k_prime = min(range(len(t_grid)), key=lambda k: abs(t_grid[k] - a_prime))
    for r in r_list:
        for n in config.n_list:
            hit_radii = [a for a in a_list if profiles[(a, r, n)][k_prime].p_hat <= b_prime]
            metrics["R0_hat"][f"r{r}_n{n}"] = min(hit_radii) if hit_radii else math.inf

    # Monte Carlo versus the killed-kernel mass defect on one oracle cell
    oracle = cfg.get("oracle_cell", {"A": 0.3, "t0": 0.05, "n": 16})
    if oracle and int(oracle["n"]) in config.n_list and config.d == 1:
        n = int(oracle["n"])
        a_o, t_o = float(oracle["A"]), float(oracle["t0"])
        field = config.field_for(n)
        gen = assemble(field, Box(origin(field.scale), a_o))
        defect = float(heat_kernel(gen, [t_o], origin(field.scale)).defects[0])
        es = exit_probability(field, origin(field.scale), 1.0, a_o, t_o, trials, config.seed)
        metrics["oracle_cell"] = {"p_hat": es.p_hat, "defect": defect,
                                  "wilson_lo": es.wilson_lo, "wilson_hi": es.wilson_hi}
        checks.append(_check("mc_matches_defect_lo", es.wilson_lo - 1e-3, "<=", defect))
        checks.append(_check("mc_matches_defect_hi", defect, "<=", es.wilson_hi + 1e-3))
    _write_csv(
        out_dir,
        "exit_table.csv",
        ["A", "t0", "n", "r", "trials", "hits", "p_hat", "wilson_lo", "wilson_hi"],
        rows,
    )
    return ConvergenceReport("exit_table", cfg, metrics, checks)


# ---------------------------------------------------------------------------
# Hoelder regularity


def cmd_holder(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    t0 = float(cfg.get("t0", 0.25))
    metrics = {}
    checks = []
    rows = []
    betas = []
    for n in config.n_list:
        if not (1.0 / n < t0 < 1.0):
            raise ValueError(f"t0={t0} outside (1/n, 1) for n={n}")
        field = config.field_for(n)
        scale = field.scale
        ts = [t0 * (1.0 + j / 6.0) for j in range(6)]
        _, table = auto_heat_kernel(field, origin(scale), ts,
                                    target_defect=float(cfg.get("target_defect", 1e-3)))
        pairs = _oscillation_pairs(table)
        if len(pairs) < 8:
            raise RuntimeError("degenerate regression: kernel too flat")
        fit = pairs[0::2]
        held = pairs[1::2]
        logs_rho = np.log([p[0] for p in fit])
        logs_osc = np.log([p[1] for p in fit])
        beta_hat, _ = np.polyfit(logs_rho, logs_osc, 1)
        beta_hat = float(beta_hat)
        d = scale.d
        shape = t0 ** (-(d + beta_hat) / 2.0)
        c_fit = max(osc / (shape * rho**beta_hat) for rho, osc in fit)
        viol = sum(1 for rho, osc in held if osc > c_fit * shape * rho**beta_hat * (1 + 1e-12))
        frac = viol / len(held)
        metrics[str(n)] = {
            "beta_hat": beta_hat,
            "c_fit": c_fit,
            "holdout_violation_fraction": frac,
            "pairs_fit": len(fit),
            "pairs_held": len(held),
        }
        betas.append(beta_hat)
        rows.append((n, beta_hat, c_fit, frac))
        checks.append(_check(f"beta_positive_n{n}", beta_hat, ">", 0.0))
        checks.append(_check(f"holdout_ok_n{n}", frac, "<", 0.01))
    checks.append(_check("beta_stable_pm50pct", max(betas) / min(betas), "<=", 3.0))
    _write_csv(out_dir, "holder.csv", ["n", "beta_hat", "c_fit", "holdout_violations"], rows)
    return ConvergenceReport(
        "holder", cfg, metrics, checks,
        fitted={"t0": t0, "grid": "interleaved even/odd pairs", "constants": "fitted, not canonical"},
    )


def _oscillation_pairs(table) -> list[tuple[float, float]]:
    """(metric distance, kernel oscillation) pairs over nearby space-time points."""
    scale = table.scale
    n, d = scale.n, scale.d
    x0c = np.asarray(table.x0.coords)
    dist = np.sqrt(((table.coords - x0c) ** 2).sum(axis=1)) / n
    sites = np.nonzero(dist <= 1.0)[0]
    floor = float(table.rows.max()) * 1e-12
    pairs = []
    for k in range(len(table.times) - 1):
        drho = math.sqrt(table.times[k + 1] - table.times[k])
        for i in sites:
            osc = abs(table.rows[k + 1, i] - table.rows[k, i])
            if osc > floor:
                pairs.append((drho, osc))
    for k in range(len(table.times)):
        for steps in (1, 2, 4, 8):
            for i in sites:
                target = tuple(int(v) for v in table.coords[i][:-1]) + (
                    int(table.coords[i][-1]) + steps,
                )
                j = table.index.get(target)
                if j is None:
                    continue
                osc = abs(table.rows[k, j] - table.rows[k, i])
                if osc > floor:
                    pairs.append((steps / n, osc))
    return pairs


# ---------------------------------------------------------------------------
# diffusion-field convergence


def cmd_diffusion_convergence(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    radius = float(cfg.get("box_radius", 1.0))
    oracle_n = int(cfg.get("oracle_n", 2 * max(config.n_list)))
    target = cfg.get("a_target", "self_oracle")
    metrics = {}
    rows = []
    checks = []

    eps_all = [config.eps_for(n) for n in config.n_list + [oracle_n]]
    compact_radius = radius - max(eps_all) - 1e-9

    def field_matrix(n: int):
        field = config.field_for(n)
        eps = config.eps_for(n)
        sf = split(field, eps)
        df = diffusion_field(sf, Box(origin(field.scale), radius))
        return field, eps, df

    if target == "self_oracle":
        _, eps_o, df_o = field_matrix(oracle_n)
        interior_vals = df_o.values[df_o.interior]
        a_matrix = interior_vals.mean(axis=0)
        oracle_desc = {"mode": "self_oracle", "oracle_n": oracle_n, "eps_n": eps_o,
                       "a": a_matrix.tolist()}
    else:
        a_matrix = np.asarray(target, dtype=float)
        oracle_desc = {"mode": "explicit", "a": a_matrix.tolist()}

    a_fn = lambda z: a_matrix
    errs = []
    for n in config.n_list:
        field, eps, df = field_matrix(n)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            df.save_csv(Path(out_dir) / f"diffusion_field_n{n}.csv")
        # fixed comparison domain: inside the interior-valid mask of every n
        rep = a4_l1_error(df, a_fn, Box(origin(field.scale), compact_radius))
        err = rep["l1_error_max"]
        errs.append(err)
        metrics[str(n)] = {
            "l1_error_max": err,
            "sup_F": rep["sup_F"],
            "ellipticity_min": rep["ellipticity_min"],
            "ellipticity_max": rep["ellipticity_max"],
            "symmetry_gap": df.symmetry_gap(),
            "eps_n": eps,
        }
        rows.append((n, eps, err, rep["sup_F"], rep["ellipticity_min"], rep["ellipticity_max"]))
        checks.append(_check(f"sup_F_finite_n{n}", rep["sup_F"], "<", math.inf))
        if field.translation_invariant:
            interior_vals = df.values[df.interior]
            flat = float(np.abs(interior_vals - interior_vals[0]).max()) if len(interior_vals) else 0.0
            metrics[str(n)]["interior_flatness"] = flat
            checks.append(_check(f"interior_constant_n{n}", flat, "<=", 1e-10))
    # per-step monotonicity can fail when eps_n * n hits an integer and the
    # tie rule pulls in a whole extra shell; the decrease is asserted
    # first-to-last and the per-step pattern is reported as a metric
    metrics["per_step_monotone"] = bool(
        all(errs[i + 1] <= errs[i] for i in range(len(errs) - 1))
    )
    checks.append(_check("l1_error_last_lt_first", errs[-1], "<", errs[0] if errs[0] > 0 else math.inf))
    _write_csv(out_dir, "diffusion.csv",
               ["n", "eps_n", "l1_error_max", "sup_F", "ellipticity_min", "ellipticity_max"], rows)
    return ConvergenceReport("diffusion", cfg, metrics, checks, fitted=oracle_desc)


# ---------------------------------------------------------------------------
# jump-measure weak convergence


def cmd_jump_measure(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    if config.d != 1:
        raise ValueError("the jump-measure experiment is implemented in d = 1")
    annuli = [float(N) for N in cfg.get("annuli", [2.0, 4.0])]
    bump_specs = cfg.get(
        "test_functions",
        [
            {"p": 0.0, "q": 1.1, "w": 0.55},
            {"p": 0.0, "q": -1.1, "w": 0.55},
            {"p": 0.3, "q": -0.8, "w": 0.5},
            {"p": 0.0, "q": 2.5, "w": 1.0},
        ],
    )
    metrics = {}
    rows = []
    checks = []
    j_fn = _jump_density_for(config.field_for(max(config.n_list)))
    max_err_by_n = []
    for n in config.n_list:
        field = config.field_for(n)
        worst = 0.0
        for N_ann in annuli:
            for spec in bump_specs:
                lattice = _lattice_pair_integral(field, spec, N_ann)
                oracle = _quad_pair_integral(j_fn, spec, N_ann)
                denom = max(abs(oracle), 1e-12)
                err = abs(lattice - oracle) / denom
                if abs(oracle) > 1e-9:
                    worst = max(worst, err)
                rows.append((n, N_ann, spec["p"], spec["q"], spec["w"], lattice, oracle, err))
        metrics[str(n)] = {"max_rel_error": worst}
        max_err_by_n.append(worst)
    for i in range(len(max_err_by_n) - 1):
        checks.append(
            _check(f"error_decreases_{config.n_list[i]}_to_{config.n_list[i + 1]}",
                   max_err_by_n[i + 1], "<", max_err_by_n[i])
        )
    checks.append(_check(f"error_at_n{config.n_list[-1]}", max_err_by_n[-1], "<=",
                         float(cfg.get("final_tol", 0.02))))
    _write_csv(out_dir, "jump_measure.csv",
               ["n", "annulus_N", "p", "q", "w", "lattice_integral", "quad_oracle", "rel_error"], rows)
    return ConvergenceReport("jump_measure", cfg, metrics, checks)


def _jump_density_for(field) -> Callable[[float], float]:
    """Pointwise limit of n^{d+2} C at separation t (stable-like families)."""
    if not isinstance(field, StableLikeField):
        raise ValueError("jump-measure oracle requires the stable-like family")
    d = field.scale.d

    def j(t: float) -> float:
        if t <= 0:
            return 0.0
        if t <= 1.0:
            return field.c3 * t ** (-(d + field.beta))
        return field.c5 * t ** (-(d + field.alpha))

    return j


def _lattice_pair_integral(field, spec, N_ann: float) -> float:
    n = field.scale.n
    p, q, w = spec["p"], spec["q"], spec["w"]
    xs = range(int(math.floor((p - w) * n)) - 1, int(math.ceil((p + w) * n)) + 2)
    ys = range(int(math.floor((q - w) * n)) - 1, int(math.ceil((q + w) * n)) + 2)
    lo, hi = 1.0 / N_ann, N_ann
    total = 0.0
    pref = float(n) ** (1 + 2) * float(n) ** (-2)  # n^{d+2} * n^{-2d} with d = 1
    for kx in xs:
        gx = smooth_bump((kx / n - p) / w)
        if gx == 0.0:
            continue
        for ky in ys:
            s = abs(kx - ky) / n
            if not (lo <= s <= hi):
                continue
            gy = smooth_bump((ky / n - q) / w)
            if gy == 0.0:
                continue
            c = field.eval_coords((kx,), (ky,))
            total += gx * gy * c * pref
    return total


def _quad_pair_integral(j_fn, spec, N_ann: float) -> float:
    p, q, w = spec["p"], spec["q"], spec["w"]
    lo, hi = 1.0 / N_ann, N_ann

    def inner(y: float) -> float:
        gy = smooth_bump((y - q) / w)
        if gy == 0.0:
            return 0.0
        total = 0.0
        for a, b in ((y + lo, y + hi), (y - hi, y - lo)):
            a2, b2 = max(a, p - w), min(b, p + w)
            if a2 < b2:
                val, _ = integrate.quad(
                    lambda x: smooth_bump((x - p) / w) * j_fn(abs(x - y)), a2, b2, limit=200
                )
                total += val
        return gy * total

    out, _ = integrate.quad(inner, q - w, q + w, limit=200)
    return out


# ---------------------------------------------------------------------------
# resolvent convergence


def brownian_resolvent_gaussian(kappa: float, lam: float, width: float, x: float) -> float:
    """(lam - kappa d^2/dx^2)^{-1} applied to exp(-x^2/(2 width^2)), closed form."""
    a = math.sqrt(lam / kappa)
    s = width
    pref = 1.0 / (2.0 * math.sqrt(lam * kappa))
    i1 = math.exp(-a * x + a * a * s * s / 2.0) * s * math.sqrt(2 * math.pi) * stats.norm.cdf(
        (x - a * s * s) / s
    )
    i2 = math.exp(a * x + a * a * s * s / 2.0) * s * math.sqrt(2 * math.pi) * (
        1.0 - stats.norm.cdf((x + a * s * s) / s)
    )
    return pref * (i1 + i2)


def brownian_resolvent_quad(f: Callable[[float], float], kappa: float, lam: float, x: float) -> float:
    """Same resolvent by direct quadrature; independent check of the closed form."""
    a = math.sqrt(lam / kappa)
    val, _ = integrate.quad(lambda y: math.exp(-a * abs(x - y)) * f(y), x - 40.0, x + 40.0, limit=400)
    return val / (2.0 * math.sqrt(lam * kappa))


def cmd_resolvent_convergence(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    if config.d != 1:
        raise ValueError("the resolvent experiment is implemented in d = 1")
    kappa = float(cfg.get("kappa", 0.5))
    lam = float(cfg.get("lambda_res", 1.0))
    width = float(cfg.get("gauss_width", 0.15))
    radius = float(cfg.get("box_radius", 10.0))
    compact = float(cfg.get("compact_radius", 2.0))
    n_list = config.n_list

    f_cont = lambda x: math.exp(-x * x / (2.0 * width * width))
    # closed form versus independent quadrature, before it is used as the oracle
    for xq in (-0.7, 0.0, 0.45, 1.3):
        closed = brownian_resolvent_gaussian(kappa, lam, width, xq)
        qval = brownian_resolvent_quad(f_cont, kappa, lam, xq)
        if abs(closed - qval) > 1e-7 * max(abs(closed), 1.0):
            raise RuntimeError("analytic resolvent oracle fails its quadrature check")

    solutions = {}
    metrics = {}
    rows = []
    checks = []
    errs = []
    for n in n_list:
        scale = LatticeScale(n, 1)
        field = NearestNeighborField(scale, kappa=kappa)
        box = Box(origin(scale), radius)
        gen = assemble(field, box)
        f_grid = restrict(f_cont, box)
        u = resolvent(gen, lam, f_grid)
        solutions[n] = u
        sup_err = 0.0
        sup_u = 0.0
        for k in range(-int(compact * n), int(compact * n) + 1):
            ana = brownian_resolvent_gaussian(kappa, lam, width, k / n)
            sup_err = max(sup_err, abs(u((k,)) - ana))
            sup_u = max(sup_u, abs(ana))
        rel = sup_err / sup_u
        errs.append(rel)
        resid = _energy_identity_residual(u, f_grid, field, lam, scale)
        metrics[str(n)] = {"sup_rel_error": rel, "energy_identity_residual": resid}
        rows.append((n, rel, resid))
        checks.append(_check(f"energy_identity_n{n}", resid, "<=", float(cfg.get("identity_tol", 1e-8))))
    for i in range(len(errs) - 1):
        checks.append(_check(f"error_decreases_{n_list[i]}_to_{n_list[i + 1]}",
                             errs[i + 1], "<", errs[i]))
    checks.append(_check(f"error_at_n{n_list[-1]}", errs[-1], "<=", float(cfg.get("final_tol", 0.05))))
    n_fine = max(n_list)
    cauchy = []
    for a, bn in zip(n_list[:-1], n_list[1:]):
        diff = 0.0
        for k in range(-int(compact * n_fine), int(compact * n_fine) + 1):
            xa = math.floor(k * a / n_fine)
            xb = math.floor(k * bn / n_fine)
            diff = max(diff, abs(solutions[a]((xa,)) - solutions[bn]((xb,))))
        cauchy.append(diff)
        metrics[f"cauchy_{a}_{bn}"] = diff
    for i in range(len(cauchy) - 1):
        checks.append(_check(f"cauchy_decreases_{i}", cauchy[i + 1], "<", cauchy[i]))
    _write_csv(out_dir, "resolvent.csv", ["n", "sup_rel_error", "energy_identity_residual"], rows)
    return ConvergenceReport("resolvent", cfg, metrics, checks)


def _energy_identity_residual(u, f_grid, field, lam, scale) -> float:
    """|E(u, g) + lam<u, g> - <f, g>| for an interior-supported test function."""
    box_g = Box(origin(scale), 1.0)
    g = restrict(lambda x: smooth_bump(x), box_g)
    lhs = energy(u, g, field) + lam * bracket_n(u, g)
    rhs = bracket_n(f_grid, g)
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# weighted Poincare inequality


def cmd_poincare(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    if config.d != 1:
        raise ValueError("the Poincare experiment is implemented in d = 1")
    n_list = [int(n) for n in cfg.get("n_list", [4, 8, 16])]
    radius = float(cfg.get("box_radius", 15.0))
    n_random = int(cfg.get("random_functions", 64))
    rng = np.random.default_rng(config.seed)
    metrics = {}
    rows = []
    checks = []
    c2s = []
    for n in n_list:
        scale = LatticeScale(n, 1)
        box = Box(origin(scale), radius)
        coords = box.coords_array()[:, 0]
        mu = 1.0 / n
        weight = np.exp(-np.abs(coords) / n)
        # probability normalization against mu^n on the box; tail defect recorded
        mass = float((weight * mu).sum())
        w = weight * mu / mass
        full_mass = 1.0 / math.tanh(0.5 / n) * mu  # whole-lattice sum of exp(-|x|) mu
        tail_defect = max(0.0, 1.0 - mass / full_mass)
        if tail_defect > 1e-6:
            raise ValueError(f"weight tail mass {tail_defect} too large; enlarge the box")
        g_norm = w / mu  # normalized weight g(l) with sum g mu = 1
        nsite = len(coords)
        # RHS quadratic form: n^{2-d} sum_l g(l) (f(l+1/n)-f(l))^2
        b_mat = np.zeros((nsite, nsite))
        pref = float(n) ** (2 - 1)
        for i in range(nsite - 1):
            gl = pref * g_norm[i]
            b_mat[i, i] += gl
            b_mat[i + 1, i + 1] += gl
            b_mat[i, i + 1] -= gl
            b_mat[i + 1, i] -= gl
        # LHS quadratic form: weighted variance <(f - <f>_g)^2>_g
        a_mat = np.diag(w) - np.outer(w, w)
        rand_min = math.inf
        for _ in range(n_random):
            f = rng.standard_normal(nsite)
            f = f - float(f @ w)
            lhs = float(f @ a_mat @ f)
            rhs = float(f @ b_mat @ f)
            if lhs > 1e-12:
                rand_min = min(rand_min, rhs / lhs)
        # generalized eigenvalue refinement on the complement of constants
        basis = _mean_zero_basis(w)
        bb = basis.T @ b_mat @ basis
        aa = basis.T @ a_mat @ basis
        from scipy.linalg import eigh

        vals = eigh(bb, aa, eigvals_only=True)
        c2_hat = float(vals[0])
        c2s.append(c2_hat)
        metrics[str(n)] = {"c2_hat": c2_hat, "rayleigh_random_min": rand_min,
                           "weight_tail_defect": tail_defect}
        rows.append((n, c2_hat, rand_min, tail_defect))
        checks.append(_check(f"c2_positive_n{n}", c2_hat, ">", 0.0))
        checks.append(_check(f"rayleigh_ge_eig_n{n}", rand_min, ">=", c2_hat - 1e-9))
    checks.append(_check("c2_uniform_lower", c2s[-1], ">=", 0.5 * c2s[0]))
    _write_csv(out_dir, "poincare.csv", ["n", "c2_hat", "rayleigh_random_min", "tail_defect"], rows)
    return ConvergenceReport("poincare", cfg, metrics, checks)


def _mean_zero_basis(w: np.ndarray) -> np.ndarray:
    nsite = len(w)
    mat = np.eye(nsite)[:, 1:] - np.outer(w, np.ones(nsite - 1)) / w.sum()
    # columns span {f : sum f w = 0}
    q, _ = np.linalg.qr(mat - np.outer(w, w @ mat) / float(w @ w))
    return q


# ---------------------------------------------------------------------------
# killed-kernel lower bound


def cmd_killed_lower_bound(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    theta = float(cfg.get("theta_hat", 0.5))
    metrics = {}
    rows = []
    checks = []
    c1s = []
    for n in config.n_list:
        field = config.field_for(n)
        scale = field.scale
        d = scale.d
        ts = _dyadic_times(n)
        c1_hat = math.inf
        for t in ts:
            r = math.sqrt(t) / theta
            box = Box(origin(scale), r)
            gen = assemble(field, box)
            inner = [Site(tuple(int(v) for v in row), scale) for row in box.coords_array()
                     if math.sqrt(float((np.asarray(row) ** 2).sum())) / n <= math.sqrt(t)]
            for x in inner:
                table = heat_kernel(gen, [t], x)
                x0c = np.asarray((0,) * d)
                dist = np.sqrt(((table.coords - x0c) ** 2).sum(axis=1)) / n
                mask = dist <= math.sqrt(t)
                val = float((t ** (d / 2.0) * table.rows[0][mask]).min())
                c1_hat = min(c1_hat, val)
        metrics[str(n)] = {"c1_hat": c1_hat}
        c1s.append(c1_hat)
        rows.append((n, c1_hat))
        checks.append(_check(f"c1_positive_n{n}", c1_hat, ">", 0.0))
    checks.append(_check("c1_uniform_lower", c1s[-1], ">=", 0.5 * c1s[0]))
    # domain monotonicity: enlarging the box increases the killed density
    n = config.n_list[0]
    field = config.field_for(n)
    scale = field.scale
    t = 0.25
    small = heat_kernel(assemble(field, Box(origin(scale), 1.0)), [t], origin(scale))
    large = heat_kernel(assemble(field, Box(origin(scale), 1.5)), [t], origin(scale))
    gap = min(
        large.density(0, tuple(int(v) for v in row)) - small.rows[0][i]
        for i, row in enumerate(small.coords)
    )
    metrics["domain_monotonicity_min_gap"] = float(gap)
    checks.append(_check("domain_monotonicity", gap, ">=", -1e-12))
    _write_csv(out_dir, "killed_lower.csv", ["n", "c1_hat"], rows)
    return ConvergenceReport("killed_lower", cfg, metrics, checks)


# ---------------------------------------------------------------------------
# Levy symbol of the envelope


def levy_symbol(phi: Callable[[float], float], u: float, d: int = 1) -> float:
    """psi(u) = int (1 - cos(u.h)) phi(|h|) dh by adaptive quadrature."""
    u = abs(float(u))
    if u == 0.0:
        return 0.0
    area = 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)

    def one_minus_avg_cos(s: float) -> float:
        # spherical average of 1 - cos(u . h) at |h| = s/u
        if s == 0.0:
            return 0.0
        if d == 1:
            return 1.0 - math.cos(s)
        omega = special.gamma(d / 2.0) * (2.0 / s) ** (d / 2.0 - 1.0) * special.jv(d / 2.0 - 1.0, s)
        return 1.0 - omega

    near, _ = integrate.quad(
        lambda t: t ** (d - 1) * phi(t) * one_minus_avg_cos(u * t), 0.0, 1.0, limit=500
    )
    if d == 1:
        flat, _ = integrate.quad(lambda t: phi(t), 1.0, np.inf, limit=500)
        osc, _ = integrate.quad(phi, 1.0, np.inf, weight="cos", wvar=u, limit=500)
        far = flat - osc
    else:
        far, _ = integrate.quad(
            lambda t: t ** (d - 1) * phi(t) * one_minus_avg_cos(u * t),
            1.0,
            np.inf,
            limit=800,
        )
    return area * (near + far)


def cmd_levy_symbol(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    d = config.d
    field = config.field_for(max(config.n_list))
    if not isinstance(field, StableLikeField):
        raise ValueError("the symbol experiment uses the stable-like envelope")
    phi = field.a3_envelope_smooth()
    u_grid = [float(u) for u in cfg.get("u_grid", list(np.geomspace(0.05, 100.0, 40)))]
    rows = []
    ratios = []
    for u in u_grid:
        psi = levy_symbol(phi, u, d)
        ratio = psi / (1.0 + u * u)
        rows.append((u, psi, ratio))
        ratios.append(ratio)
    fit_idx = list(range(0, len(u_grid), 2))
    held_idx = list(range(1, len(u_grid), 2))
    c2_hat = max(ratios[i] for i in fit_idx)
    margin = float(cfg.get("holdout_margin", 0.02))
    worst_held = max(ratios[i] for i in held_idx)
    checks = [
        _check("psi_zero_at_origin", levy_symbol(phi, 0.0, d), "<=", 0.0),
        _check("psi_quadratic_bound_holdout", worst_held, "<=", c2_hat * (1.0 + margin)),
        _check("ratio_bounded", max(ratios), "<", math.inf),
    ]
    even_gap = 0.0
    if d == 1:
        for u in (0.7, 3.3, 17.0):
            plus = _psi_direct_1d(phi, u)
            minus = _psi_direct_1d(phi, -u)
            even_gap = max(even_gap, abs(plus - minus))
        checks.append(_check("psi_even", even_gap, "<=", 1e-9))
    metrics = {"c2_hat": c2_hat, "worst_holdout_ratio": worst_held, "evenness_gap": even_gap}
    _write_csv(out_dir, "levy_symbol.csv", ["u", "psi", "psi_over_1_plus_u2"], rows)
    return ConvergenceReport(
        "levy_symbol", cfg, metrics, checks,
        fitted={"c2_hat": c2_hat, "fit_grid": [u_grid[i] for i in fit_idx],
                "holdout_grid": [u_grid[i] for i in held_idx]},
    )


def _psi_direct_1d(phi, u: float) -> float:
    near, _ = integrate.quad(lambda h: (1.0 - math.cos(u * h)) * phi(h), 0.0, 1.0, limit=500)
    flat, _ = integrate.quad(phi, 1.0, np.inf, limit=500)
    osc, _ = integrate.quad(phi, 1.0, np.inf, weight="cos", wvar=u, limit=500)
    return 2.0 * (near + flat - osc)


# ---------------------------------------------------------------------------
# direct simulation / kernel exports


def cmd_simulate(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    n = config.n_list[0]
    field = config.field_for(n)
    horizon = float(cfg.get("horizon", 0.1))
    paths = int(cfg.get("paths", 100))
    keep = min(int(cfg.get("export_paths", 3)), paths)
    jumps = []
    for i in range(paths):
        traj = simulate(field, origin(field.scale), horizon, config.seed, index=i)
        jumps.append(traj.jumps)
        if out_dir is not None and i < keep:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            traj.save_csv(Path(out_dir) / f"trajectory_{i}.csv")
    mean_jumps = float(np.mean(jumps))
    rate = n * n * nu(field)
    metrics = {"mean_jumps": mean_jumps, "expected_jumps": rate * horizon,
               "paths": paths, "horizon": horizon}
    sigma = math.sqrt(rate * horizon / paths)
    checks = [
        _check("mean_jumps_4sigma_lo", mean_jumps, ">=", rate * horizon - 4 * sigma),
        _check("mean_jumps_4sigma_hi", mean_jumps, "<=", rate * horizon + 4 * sigma),
    ]
    return ConvergenceReport("simulate", cfg, metrics, checks)


def cmd_heat_kernel(config: ExperimentConfig, out_dir=None) -> ConvergenceReport:
    cfg = config.raw
    n = config.n_list[0]
    field = config.field_for(n)
    t_grid = [float(t) for t in cfg.get("t_grid", [0.1, 0.25, 0.5, 1.0])]
    gen, table = auto_heat_kernel(field, origin(field.scale), t_grid,
                                  target_defect=float(cfg.get("target_defect", 1e-3)))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        table.save_csv(Path(out_dir) / "heat_kernel.csv")
        gen.save_coo(Path(out_dir) / "generator.txt")
        (Path(out_dir) / "heat_kernel_meta.json").write_text(
            json.dumps(
                {"box_radius": gen.box.radius, "sites": len(gen),
                 "lambda_unif": gen.lambda_unif, "defects": [float(v) for v in table.defects],
                 "target_defect": float(cfg.get("target_defect", 1e-3))},
                sort_keys=True, indent=2,
            ) + "\n"
        )
    checks = [
        _check("defect_at_t_max", float(table.defects[-1]), "<=", float(cfg.get("target_defect", 1e-3))),
        _check("rows_nonnegative", float(table.rows.min()), ">=", 0.0),
    ]
    metrics = {"box_radius": gen.box.radius, "sites": len(gen),
               "defects": {repr(float(t)): float(v) for t, v in zip(table.times, table.defects)}}
    return ConvergenceReport("heat_kernel", cfg, metrics, checks)


# ---------------------------------------------------------------------------
# form-equivalence self-test (cell-integral route versus lattice route)


def form_equivalence_residual(u: GridFunction, field: ConductanceField, tol: float = 1e-8) -> float:
    """Relative gap between the cell-integral energy of the step extension and
    the lattice energy: both are computed by different bookkeeping."""
    scale = u.scale
    n, d = scale.n, scale.d
    support = u.support()
    cell = float(n) ** (-d)
    pref = float(n) ** (2 + d) / 2.0
    total = 0.0
    for i, w1 in enumerate(support):
        for w2 in support[i + 1 :]:
            c = field.eval_coords(w1, w2)
            if c != 0.0:
                total += 2.0 * (u(w1) - u(w2)) ** 2 * c * cell * cell
        nu_w = nu(field, Site(w1, scale), tol)
        in_s = sum(field.eval_coords(w1, w2) for w2 in support if w2 != w1)
        total += 2.0 * u(w1) ** 2 * (nu_w - in_s) * cell * cell
    cell_route = pref * total
    lattice_route = energy(u, u, field, tol)
    return abs(cell_route - lattice_route) / max(abs(lattice_route), 1e-300)


# ---------------------------------------------------------------------------
# dispatch


EXPERIMENTS: dict[str, Callable[[ExperimentConfig, Optional[Path]], ConvergenceReport]] = {
    "check-assumptions": cmd_check_assumptions,
    "nash": cmd_nash,
    "exit-table": cmd_exit_table,
    "holder": cmd_holder,
    "diffusion": cmd_diffusion_convergence,
    "jump-measure": cmd_jump_measure,
    "resolvent": cmd_resolvent_convergence,
    "poincare": cmd_poincare,
    "killed-lower": cmd_killed_lower_bound,
    "levy-symbol": cmd_levy_symbol,
    "simulate": cmd_simulate,
    "heat-kernel": cmd_heat_kernel,
}
