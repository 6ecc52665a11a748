import math
from fractions import Fraction

import numpy as np
import pytest

from latdir import (
    Box,
    GridFunction,
    LatticeScale,
    Site,
    bracket_n,
    euclid,
    extend,
    floor_embed,
    l1_steps,
    load_grid_function,
    norm_p,
    origin,
    restrict,
    save_grid_function,
    site,
)


def test_scale_validation():
    with pytest.raises(ValueError):
        LatticeScale(0, 1)
    with pytest.raises(ValueError):
        LatticeScale(4, 0)
    assert LatticeScale(4, 2).mesh == 0.25


def test_floor_embed_basic():
    sc = LatticeScale(4, 1)
    assert floor_embed([0.3], sc).coords == (1,)  # floor(1.2) = 1
    sc2 = LatticeScale(7, 2)
    assert floor_embed([0.0, 0.0], sc2).coords == (0, 0)


def test_floor_embed_negative_against_integer_floor():
    # independent oracle: exact integer floor of n*x for negative reals
    sc = LatticeScale(4, 1)
    assert floor_embed([-0.3], sc).coords == (-2,)
    rng = np.random.default_rng(7)
    for n in (3, 4, 9):
        scn = LatticeScale(n, 1)
        for x in rng.uniform(-5, 5, size=50):
            got = floor_embed([x], scn).coords[0]
            assert got == math.floor(n * x)
            assert got / n <= x < got / n + 1.0 / n  # half-open cell membership


def test_floor_embed_identity_on_lattice_sites():
    sc = LatticeScale(5, 2)
    u = GridFunction(sc, {(1, -2): 3.0, (0, 0): -1.5})
    step = extend(u)
    for coords in [(1, -2), (0, 0), (2, 3)]:
        s = Site(coords, sc)
        assert step(s.position()) == u(s)


def test_restrict_constant_and_linear():
    sc = LatticeScale(2, 1)
    box = Box(origin(sc), 1.6)
    ones = restrict(lambda x: 1.0, box)
    assert all(v == 1.0 for _, v in ones.items())
    lin = restrict(lambda x: x, box)
    for (k,), v in lin.items():
        assert v == k / 2


def test_restrict_extend_sup_error_lipschitz():
    # smooth bump recovered by the step extension up to Lip(g) * d / n
    sc = LatticeScale(16, 2)
    g = lambda p: math.exp(-(p[0] ** 2 + p[1] ** 2))
    lip = math.sqrt(2.0 / math.e)  # max gradient norm of the Gaussian
    box = Box(origin(sc), 2.0)
    step = extend(restrict(g, box))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(300):
        p = rng.uniform(-1.2, 1.2, size=2)
        worst = max(worst, abs(step(tuple(p)) - g(p)))
    assert worst <= lip * 2 / 16 + 1e-12


def test_extend_cell_integral():
    # integral of the step extension over one cell is u(w) * n^{-d}
    sc = LatticeScale(3, 2)
    u = GridFunction(sc, {(1, 2): 5.0})
    step = extend(u)
    # exact since the extension is constant on [w, w + 1/n)
    for p in [(1 / 3, 2 / 3), (1 / 3 + 0.32, 2 / 3 + 0.001)]:
        assert step(p) == 5.0
    assert step((1 / 3 - 1e-9, 2 / 3)) == 0.0
    assert step((2 / 3, 2 / 3)) == 0.0


def test_extend_l2_isometry_exact():
    # ||E_n u||_{L^2}^2 equals ||u||_{2,n}^2, both sides in exact rationals
    sc = LatticeScale(4, 2)
    rng = np.random.default_rng(1)
    vals = {}
    for _ in range(12):
        c = (int(rng.integers(-3, 4)), int(rng.integers(-3, 4)))
        vals[c] = float(rng.integers(-5, 6))
    u = GridFunction(sc, vals)
    cell_volume = Fraction(1, 4 ** 2)
    lhs = sum(Fraction(v).limit_denominator() ** 2 * cell_volume for v in vals.values())
    rhs = Fraction(norm_p(u, 2)).limit_denominator(10**12) ** 2
    assert abs(float(lhs) - float(rhs)) < 1e-12
    assert math.isclose(float(lhs), norm_p(u, 2) ** 2, rel_tol=1e-14)


def test_l1_steps_examples_and_errors():
    sc = LatticeScale(3, 2)
    x = site(sc, 0, 0)
    assert l1_steps(x, x) == 0
    assert l1_steps(x, site(sc, 1, 2)) == 3
    with pytest.raises(ValueError):
        l1_steps(x, site(LatticeScale(4, 2), 1, 2))


def test_l1_steps_euclid_bound_and_triangle():
    rng = np.random.default_rng(2)
    for n, d in [(4, 1), (5, 2), (3, 3)]:
        sc = LatticeScale(n, d)
        pts = [Site(tuple(int(v) for v in rng.integers(-6, 7, size=d)), sc) for _ in range(30)]
        for i in range(len(pts)):
            for j in range(len(pts)):
                k = l1_steps(pts[i], pts[j])
                if i != j and pts[i] != pts[j]:
                    assert 1 <= k <= d * n * euclid(pts[i], pts[j]) + 1e-9
                for m in range(len(pts)):
                    assert k <= l1_steps(pts[i], pts[m]) + l1_steps(pts[m], pts[j])


def test_bracket_and_norms():
    sc = LatticeScale(3, 2)
    delta = GridFunction.indicator(origin(sc))
    assert bracket_n(delta, delta) == pytest.approx(3 ** (-2), rel=1e-15)
    box = Box(origin(sc), 1.3)
    ind = restrict(lambda p: 1.0, box)
    mass = len(ind) * 3 ** (-2)
    assert norm_p(ind, 1) == pytest.approx(mass, rel=1e-14)
    # Cauchy-Schwarz on random inputs
    rng = np.random.default_rng(3)
    for _ in range(50):
        f = GridFunction(sc, {(int(a), int(b)): rng.standard_normal()
                              for a, b in rng.integers(-4, 5, size=(8, 2))})
        g = GridFunction(sc, {(int(a), int(b)): rng.standard_normal()
                              for a, b in rng.integers(-4, 5, size=(8, 2))})
        assert abs(bracket_n(f, g)) <= norm_p(f, 2) * norm_p(g, 2) + 1e-13


def test_box_strict_inequality():
    sc = LatticeScale(2, 1)
    box = Box(origin(sc), 1.0)
    coords = [tuple(r) for r in box.coords_array()]
    assert (2,) not in coords and (-2,) not in coords  # |x| = 1 excluded
    assert (1,) in coords and (-1,) in coords


def test_grid_function_roundtrip(tmp_path):
    sc = LatticeScale(6, 2)
    f = GridFunction(sc, {(0, 1): 0.1234567890123456789, (-3, 2): -7.5})
    path = tmp_path / "f.csv"
    save_grid_function(f, path)
    g = load_grid_function(path)
    assert g.scale == sc
    assert g((0, 1)) == f((0, 1))
    assert g((-3, 2)) == -7.5
    assert sorted(g.support()) == sorted(f.support())
