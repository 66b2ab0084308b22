"""Tests for the monomial dictionary: construction, evaluation, Jacobian
against finite differences, projection identity, Lipschitz estimation."""

import itertools

import numpy as np
import pytest

from koopbound.lifting import (
    DictionaryBasis,
    build_monomial_basis,
    jacobian,
    jacobian_many,
    lift,
    lift_many,
    lipschitz_constant,
    projection_matrix,
)


def brute_force_count(n, d):
    """Independent enumeration of multi-indices with 1 <= |alpha| <= d."""
    count = 0
    for alpha in itertools.product(range(d + 1), repeat=n):
        if 1 <= sum(alpha) <= d:
            count += 1
    return count


def fd_jacobian(basis, x, h=1e-5):
    """Central-difference Jacobian oracle."""
    cols = []
    for i in range(basis.state_dim):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((lift(basis, x + e) - lift(basis, x - e)) / (2 * h))
    return np.stack(cols, axis=1)


class TestBuildBasis:
    def test_paper_dimensions(self):
        assert build_monomial_basis(2, 4).lifted_dim == 14

    def test_minimal_basis(self):
        basis = build_monomial_basis(1, 1)
        assert basis.terms == ((1,),)
        assert basis.lifted_dim == 1

    @pytest.mark.parametrize("n,d", [(1, 3), (2, 2), (2, 4), (3, 2), (4, 3)])
    def test_count_matches_brute_force(self, n, d):
        assert build_monomial_basis(n, d).lifted_dim == brute_force_count(n, d)

    def test_no_constant_term_and_linear_terms_present(self):
        basis = build_monomial_basis(3, 3)
        degrees = [sum(t) for t in basis.terms]
        assert min(degrees) == 1
        for i in range(3):
            unit = tuple(1 if j == i else 0 for j in range(3))
            assert unit in basis.terms

    def test_order_is_graded_lex_and_stable(self):
        basis = build_monomial_basis(2, 2)
        assert basis.terms == ((1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
        again = build_monomial_basis(2, 2)
        assert again.terms == basis.terms

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            build_monomial_basis(0, 4)
        with pytest.raises(ValueError):
            build_monomial_basis(2, 0)

    def test_descriptor_round_trip(self):
        basis = build_monomial_basis(2, 4)
        rebuilt = DictionaryBasis.from_descriptor(basis.descriptor())
        assert rebuilt == basis
        assert rebuilt.terms == basis.terms


class TestLift:
    def test_origin_maps_to_zero(self):
        for n, d in [(1, 1), (2, 4), (3, 3)]:
            basis = build_monomial_basis(n, d)
            assert np.array_equal(lift(basis, np.zeros(n)), np.zeros(basis.lifted_dim))

    def test_all_ones(self):
        basis = build_monomial_basis(2, 4)
        assert np.array_equal(lift(basis, np.ones(2)), np.ones(14))

    def test_hand_evaluated_degree_two(self):
        basis = build_monomial_basis(2, 2)
        z = lift(basis, np.array([2.0, -1.0]))
        np.testing.assert_allclose(z, [2.0, -1.0, 4.0, -2.0, 1.0])

    def test_dimension_mismatch(self):
        basis = build_monomial_basis(2, 2)
        with pytest.raises(ValueError):
            lift(basis, np.array([1.0, 2.0, 3.0]))

    def test_lift_many_agrees_with_lift(self):
        basis = build_monomial_basis(2, 4)
        rng = np.random.default_rng(0)
        xs = rng.uniform(-2, 2, size=(25, 2))
        zs = lift_many(basis, xs)
        for x, z in zip(xs, zs):
            np.testing.assert_allclose(z, lift(basis, x), rtol=1e-14)


class TestJacobian:
    def test_origin_pattern(self):
        basis = build_monomial_basis(2, 4)
        jac = jacobian(basis, np.zeros(2))
        expected = np.zeros((14, 2))
        expected[0, 0] = 1.0  # x1
        expected[1, 1] = 1.0  # x2
        np.testing.assert_allclose(jac, expected)

    def test_product_rule_entry(self):
        basis = build_monomial_basis(2, 2)
        jac = jacobian(basis, np.array([1.0, 0.0]))
        k = basis.terms.index((1, 1))
        np.testing.assert_allclose(jac[k], [0.0, 1.0])

    @pytest.mark.parametrize("n,d", [(1, 4), (2, 4), (3, 3)])
    def test_matches_finite_differences(self, n, d):
        basis = build_monomial_basis(n, d)
        rng = np.random.default_rng(42)
        for _ in range(100):
            x = rng.uniform(-2, 2, size=n)
            jac = jacobian(basis, x)
            ref = fd_jacobian(basis, x)
            scale = max(1.0, np.abs(ref).max())
            assert np.abs(jac - ref).max() / scale <= 1e-6

    def test_jacobian_many_agrees(self):
        basis = build_monomial_basis(2, 4)
        rng = np.random.default_rng(3)
        xs = rng.uniform(-1, 1, size=(10, 2))
        batch = jacobian_many(basis, xs)
        for x, j in zip(xs, batch):
            np.testing.assert_allclose(j, jacobian(basis, x), rtol=1e-14)


class TestProjection:
    def test_selector_structure(self):
        basis = build_monomial_basis(2, 4)
        c = projection_matrix(basis)
        assert c.shape == (2, 14)
        assert np.sum(c == 1.0) == 2
        assert np.sum(c != 0.0) == 2

    def test_recovers_state_exactly(self):
        basis = build_monomial_basis(3, 3)
        c = projection_matrix(basis)
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = rng.uniform(-3, 3, size=3)
            assert np.array_equal(c @ lift(basis, x), x)

    def test_scalar_identity(self):
        basis = build_monomial_basis(1, 1)
        np.testing.assert_allclose(projection_matrix(basis), [[1.0]])


class TestLipschitz:
    def test_linear_dictionary(self):
        basis = build_monomial_basis(1, 1)
        est = lipschitz_constant(basis, ((-1.0, 1.0),), grid_resolution=11)
        assert est.value == pytest.approx(1.0)

    def test_scalar_quadratic_analytic_maximum(self):
        # Jacobian column (1, 2x); spectral norm sqrt(1 + 4x^2), max sqrt(5)
        basis = build_monomial_basis(1, 2)
        est = lipschitz_constant(basis, ((-1.0, 1.0),), grid_resolution=201)
        assert est.value == pytest.approx(np.sqrt(5.0), rel=1e-12)

    def test_grid_refinement_converged(self):
        basis = build_monomial_basis(2, 4)
        coarse = lipschitz_constant(basis, ((-1, 1), (-1, 1)), grid_resolution=201)
        fine = lipschitz_constant(basis, ((-1, 1), (-1, 1)), grid_resolution=2001)
        assert coarse.value <= fine.value + 1e-12
        assert abs(fine.value - coarse.value) <= 0.01 * fine.value

    def test_monotone_in_region_and_resolution(self):
        basis = build_monomial_basis(2, 3)
        small = lipschitz_constant(basis, ((-0.5, 0.5), (-0.5, 0.5)), grid_resolution=51)
        large = lipschitz_constant(basis, ((-1.0, 1.0), (-1.0, 1.0)), grid_resolution=51)
        finer = lipschitz_constant(basis, ((-1.0, 1.0), (-1.0, 1.0)), grid_resolution=101)
        assert small.value <= large.value
        assert large.value <= finer.value + 1e-12

    def test_rejects_empty_region(self):
        basis = build_monomial_basis(1, 1)
        with pytest.raises(ValueError):
            lipschitz_constant(basis, ((1.0, -1.0),), grid_resolution=11)
        with pytest.raises(ValueError):
            lipschitz_constant(basis, ((-1.0, 1.0),), grid_resolution=1)

    def test_region_containment_flag(self):
        basis = build_monomial_basis(2, 2)
        est = lipschitz_constant(basis, ((-1, 1), (-1, 1)), grid_resolution=11)
        assert est.contains(np.array([0.5, -0.5]))
        assert not est.contains(np.array([1.5, 0.0]))
