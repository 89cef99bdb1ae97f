"""Spline algebra: knot unions, refits, pointwise add/multiply oracles."""

import numpy as np
import pytest

from splinetraj.bspline import BSpline, KnotVector, basis_matrix, clamp_knots
from splinetraj.spline_algebra import (
    FitOperator,
    RefitConfig,
    add,
    collocation_sites,
    elevated_union,
    knot_union,
    linear_combination,
    multiply,
    refit,
    scale,
)

CFG = RefitConfig()
PAPER_INTERIOR = np.round(np.arange(0.1, 0.95, 0.1), 10)


def random_spline(rng, degree=None, dim=1, max_interior=6):
    p = int(rng.integers(1, 5)) if degree is None else degree
    k = int(rng.integers(0, max_interior + 1))
    grid = np.arange(0.05, 0.96, 0.05)
    interior = np.sort(rng.choice(grid, size=min(k, grid.size), replace=False))
    knots = clamp_knots(interior, p)
    n = len(knots) - p - 1
    return BSpline(p, knots, rng.uniform(-2.0, 2.0, (n, dim)))


class TestKnotUnion:
    def test_idempotent(self):
        u = clamp_knots([0.3, 0.6], 3)
        merged = knot_union(u, u, 3)
        np.testing.assert_array_equal(merged.values, u.values)

    def test_construction_rule(self):
        u1 = KnotVector([0, 0, 0.5, 1, 1])
        u2 = KnotVector([0, 0, 1, 1])
        merged = knot_union(u1, u2, 1)
        np.testing.assert_array_equal(merged.values, [0, 0, 0.5, 1, 1])
        assert merged.multiplicity(0.5) == 1

    def test_contains_all_distinct_knots(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            s1 = random_spline(rng)
            s2 = random_spline(rng)
            p3 = max(s1.degree, s2.degree)
            merged = knot_union(s1.knots, s2.knots, p3)
            assert np.all(np.diff(merged.values) >= 0)
            for v in np.concatenate([s1.knots.distinct(), s2.knots.distinct()]):
                assert v in merged.values

    def test_max_multiplicity_kept(self):
        u1 = KnotVector([0, 0, 0, 0.5, 0.5, 1, 1, 1])
        u2 = KnotVector([0, 0, 0, 0.5, 1, 1, 1])
        merged = knot_union(u1, u2, 2)
        assert merged.multiplicity(0.5) == 2


class TestCollocation:
    def test_covers_every_span(self):
        knots = clamp_knots([0.25, 0.5], 3)
        taus = collocation_sites(knots, 3, 5)
        assert taus[0] == 0.0 and taus[-1] == 1.0
        for a, b in [(0, 0.25), (0.25, 0.5), (0.5, 1.0)]:
            assert np.count_nonzero((taus >= a) & (taus <= b)) >= 5

    def test_default_density_determines_full_rank(self):
        knots = clamp_knots(PAPER_INTERIOR, 3)
        taus = collocation_sites(knots, 3, CFG.spans_samples(3))
        op = FitOperator(3, knots, taus)
        assert op.condition < 1e4


class TestRefit:
    def test_recovers_representable_target(self):
        rng = np.random.default_rng(3)
        s = random_spline(rng, degree=3, dim=2)
        taus = collocation_sites(s.knots, 3, 16)
        fitted, resid = refit(taus, s.eval(taus), 3, s.knots)
        assert resid < 1e-12
        np.testing.assert_allclose(fitted.control_points, s.control_points, atol=1e-10)

    def test_low_degree_polynomial_exact(self):
        knots = clamp_knots(PAPER_INTERIOR, 3)
        taus = collocation_sites(knots, 3, 16)
        _, resid = refit(taus, taus**2, 3, knots)
        assert resid < 1e-10

    def test_matches_normal_equations_oracle(self):
        # Independent least-squares solve via explicit normal equations.
        knots = clamp_knots(PAPER_INTERIOR, 3)
        taus = collocation_sites(knots, 3, 16)
        target = np.sin(2 * np.pi * taus)
        fitted, resid = refit(taus, target, 3, knots)
        B = basis_matrix(knots, 3, taus)
        coeffs = np.linalg.solve(B.T @ B, B.T @ target)
        oracle_resid = np.abs(B @ coeffs - target).max()
        assert resid == pytest.approx(oracle_resid, rel=1e-9, abs=1e-12)
        np.testing.assert_allclose(fitted.control_points[:, 0], coeffs, atol=1e-9)

    def test_underdetermined_rejected(self):
        knots = clamp_knots([], 3)
        with pytest.raises(Exception):
            refit([0.0, 1.0], [0.0, 1.0], 3, knots)


class TestAdd:
    def test_shared_basis_exact_doubling(self):
        rng = np.random.default_rng(5)
        s = random_spline(rng, degree=3)
        doubled = add(s, s, CFG)
        np.testing.assert_array_equal(doubled.control_points, 2 * s.control_points)

    def test_constants(self):
        a = BSpline.constant([1.25], degree=2, knots=clamp_knots([], 2))
        b = BSpline.constant([-0.5], degree=3, knots=clamp_knots([0.5], 3))
        out = add(a, b, CFG)
        taus = np.linspace(0, 1, 50)
        np.testing.assert_allclose(out.eval(taus), 0.75, atol=1e-12)

    def test_degree_law(self):
        rng = np.random.default_rng(7)
        s1 = random_spline(rng, degree=2)
        s2 = random_spline(rng, degree=4)
        assert add(s1, s2, CFG).degree == 4

    def test_dense_pointwise_oracle(self):
        rng = np.random.default_rng(11)
        taus = np.linspace(0, 1, 500)
        for _ in range(30):
            s1 = random_spline(rng, degree=3)
            s2 = random_spline(rng, degree=2)
            out = add(s1, s2, CFG)
            np.testing.assert_allclose(
                out.eval(taus), s1.eval(taus) + s2.eval(taus), atol=1e-9
            )

    def test_commutative_at_evaluation(self):
        rng = np.random.default_rng(13)
        taus = np.linspace(0, 1, 300)
        s1, s2 = random_spline(rng), random_spline(rng)
        np.testing.assert_allclose(
            add(s1, s2, CFG).eval(taus), add(s2, s1, CFG).eval(taus), atol=1e-10
        )

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(17)
        with pytest.raises(ValueError):
            add(random_spline(rng, dim=2), random_spline(rng, dim=3), CFG)


class TestMultiply:
    def test_identity(self):
        rng = np.random.default_rng(19)
        one = BSpline.constant([1.0])
        s = random_spline(rng, degree=3, dim=2)
        out = multiply(one, s, CFG)
        taus = np.linspace(0, 1, 200)
        np.testing.assert_allclose(out.eval(taus), s.eval(taus), atol=1e-10)

    def test_degree_law_two_cubics(self):
        rng = np.random.default_rng(23)
        s1 = random_spline(rng, degree=3)
        s2 = random_spline(rng, degree=3)
        assert multiply(s1, s2, CFG).degree == 6

    def test_dense_pointwise_oracle(self):
        rng = np.random.default_rng(29)
        taus = np.linspace(0, 1, 500)
        for _ in range(30):
            s1 = random_spline(rng)
            s2 = random_spline(rng)
            out = multiply(s1, s2, CFG)
            np.testing.assert_allclose(
                out.eval(taus)[:, 0],
                s1.eval(taus)[:, 0] * s2.eval(taus)[:, 0],
                atol=1e-8,
            )

    def test_scalar_times_vector(self):
        rng = np.random.default_rng(31)
        s = random_spline(rng, degree=2)
        v = random_spline(rng, degree=3, dim=3)
        out = multiply(s, v, CFG)
        assert out.dim == 3
        taus = np.linspace(0, 1, 100)
        np.testing.assert_allclose(
            out.eval(taus), s.eval(taus) * v.eval(taus), atol=1e-8
        )

    def test_vector_vector_rejected(self):
        rng = np.random.default_rng(37)
        with pytest.raises(ValueError):
            multiply(random_spline(rng, dim=2), random_spline(rng, dim=2), CFG)

    def test_commutative_at_evaluation(self):
        rng = np.random.default_rng(41)
        taus = np.linspace(0, 1, 300)
        s1, s2 = random_spline(rng), random_spline(rng)
        np.testing.assert_allclose(
            multiply(s1, s2, CFG).eval(taus),
            multiply(s2, s1, CFG).eval(taus),
            atol=1e-10,
        )


class TestAlgebraProperties:
    def test_distributivity_at_evaluation(self):
        rng = np.random.default_rng(43)
        taus = np.linspace(0, 1, 300)
        for _ in range(10):
            a = random_spline(rng, max_interior=3)
            b = random_spline(rng, max_interior=3)
            c = random_spline(rng, max_interior=3)
            lhs = multiply(a, add(b, c, CFG), CFG)
            rhs = add(multiply(a, b, CFG), multiply(a, c, CFG), CFG)
            np.testing.assert_allclose(lhs.eval(taus), rhs.eval(taus), atol=1e-8)

    def test_hull_soundness_after_algebra(self):
        rng = np.random.default_rng(47)
        taus = np.linspace(0, 1, 1000)
        for _ in range(20):
            s1 = random_spline(rng)
            s2 = random_spline(rng)
            total = add(s1, s2, CFG)
            prod = multiply(s1, s2, CFG)
            truth_sum = s1.eval(taus) + s2.eval(taus)
            truth_prod = s1.eval(taus) * s2.eval(taus)
            assert total.hull_bounds().contains(truth_sum, atol=1e-8)
            assert prod.hull_bounds().contains(truth_prod, atol=1e-8)

    def test_elevated_union_covers_smoothness(self):
        u = elevated_union([(clamp_knots([0.5], 1), 1), (clamp_knots([], 4), 4)], 5)
        # A degree-1 kink at 0.5 needs multiplicity 5 in the degree-5 space.
        assert u.multiplicity(0.5) == 5

    def test_linear_combination_exact(self):
        rng = np.random.default_rng(53)
        s1 = random_spline(rng, degree=3, max_interior=0)
        s2 = BSpline(3, s1.knots, rng.uniform(-1, 1, s1.control_points.shape))
        out = linear_combination([s1, s2], [2.0, -0.5])
        np.testing.assert_array_equal(
            out.control_points, 2.0 * s1.control_points - 0.5 * s2.control_points
        )

    def test_scale(self):
        rng = np.random.default_rng(59)
        s = random_spline(rng)
        np.testing.assert_array_equal(
            scale(s, -3.0).control_points, -3.0 * s.control_points
        )
