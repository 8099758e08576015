import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.errors import InputError
from app.kantorovich import (
    DiscreteMeasure,
    DualPotentials,
    TransportPlan,
    c_transform,
    c_transform_all,
    check_calibration,
    cost_matrix,
    cost_matrix_flagged,
    duality_gap,
    entropic_preview,
    graph_concentration,
    marginal_error,
    relative_gap,
    solve_exact,
    uniqueness_probe,
    within_relative,
)
from app.lagrangian import PowerMetricLagrangian
from app.manifold import FlatTorus
from app.models import CostMethod, SolverSettings

magnitude = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def random_instance(plane, rng, n, m=None, uniform=True):
    m = n if m is None else m
    mu_weights = None if uniform else rng.random(n) + 0.1
    nu_weights = None if uniform else rng.random(m) + 0.1
    mu = DiscreteMeasure.on(plane, rng.normal(size=(n, 2)), None if uniform else mu_weights / mu_weights.sum())
    nu = DiscreteMeasure.on(plane, rng.normal(size=(m, 2)), None if uniform else nu_weights / nu_weights.sum())
    return mu, nu


class TestDiscreteMeasure:
    """Test suite for measure validation"""

    def test_uniform_default(self, plane):
        """Weights default to uniform"""
        mu = DiscreteMeasure.on(plane, [[0, 0], [1, 0], [0, 1], [1, 1]])
        assert mu.size == 4
        assert mu.is_uniform
        assert mu.dim == 2

    @pytest.mark.parametrize(
        "weights",
        [[0.5, 0.6], [1.0, 0.0], [1.5, -0.5]],
    )
    def test_invalid_weights(self, plane, weights):
        """Weights must be positive and sum to one"""
        with pytest.raises(InputError):
            DiscreteMeasure.on(plane, [[0, 0], [1, 0]], weights)

    def test_distinct_support(self, plane):
        """Support points must be pairwise distinct"""
        with pytest.raises(InputError):
            DiscreteMeasure.on(plane, [[0, 0], [0, 0]])

    def test_torus_duplicates_after_wrapping(self):
        """Duplicates are detected after canonicalization"""
        with pytest.raises(InputError):
            DiscreteMeasure.on(FlatTorus(1), [[0.25], [1.25]])


class TestSolveExact:
    """Test suite for the exact transport solver"""

    def test_identity_instance(self, quadratic, plane):
        """mu = nu is solved by the identity at cost zero"""
        mu = DiscreteMeasure.on(plane, [[0, 0], [1, 0], [0, 2]])
        C = cost_matrix(quadratic, mu, mu, 1.0)
        plan, pot = solve_exact(C, mu, mu)
        assert plan.cost(C) == 0.0
        np.testing.assert_allclose(plan.dense(), np.eye(3) / 3)
        assert pot.phi[0] == 0.0
        assert check_calibration(plan, pot, C, 1e-12).passed

    def test_single_atom(self, plane):
        """One atom on each side: phi = 0 and psi = C[0][0]"""
        mu = DiscreteMeasure.on(plane, [[0, 0]])
        nu = DiscreteMeasure.on(plane, [[1, 1]])
        plan, pot = solve_exact(np.array([[2.0]]), mu, nu)
        assert plan.entries == [(0, 0, 1.0)]
        np.testing.assert_allclose(pot.phi, [0.0])
        np.testing.assert_allclose(pot.psi, [2.0])

    def test_random_instances(self, quadratic, plane, rng):
        """Duality gap, calibration and marginals hold on random permutation instances"""
        for _ in range(5):
            mu, nu = random_instance(plane, rng, 30)
            C = cost_matrix(quadratic, mu, nu, 1.0)
            plan, pot = solve_exact(C, mu, nu)
            assert duality_gap(plan, pot, C, mu, nu) <= 1e-9
            assert check_calibration(plan, pot, C, 1e-9).passed
            assert marginal_error(plan, mu, nu) <= 1e-12
            assert graph_concentration(plan, mu.size).passed
            values, _, ties = c_transform_all(pot.psi, C)
            np.testing.assert_allclose(values, pot.phi, atol=1e-9)
            assert not np.any(ties)

    def test_weighted_instance(self, quadratic, plane, rng):
        """Unequal weights and sizes go through the network simplex"""
        mu, nu = random_instance(plane, rng, 12, 7, uniform=False)
        C = cost_matrix(quadratic, mu, nu, 1.0)
        plan, pot = solve_exact(C, mu, nu)
        assert marginal_error(plan, mu, nu) <= 1e-10
        assert duality_gap(plan, pot, C, mu, nu) <= 1e-9
        assert check_calibration(plan, pot, C, 1e-9).passed
        assert pot.phi[0] == 0.0

    def test_shape_mismatch(self, plane):
        """The cost matrix must match the measures"""
        mu = DiscreteMeasure.on(plane, [[0, 0], [1, 0]])
        with pytest.raises(InputError):
            solve_exact(np.zeros((2, 3)), mu, mu)

    def test_non_finite_costs(self, plane):
        """Costs must be finite"""
        mu = DiscreteMeasure.on(plane, [[0, 0], [1, 0]])
        with pytest.raises(InputError):
            solve_exact(np.array([[0.0, np.inf], [1.0, 0.0]]), mu, mu)


class TestCostMatrix:
    """Test suite for cost assembly"""

    @pytest.mark.parametrize("method", [CostMethod.CLOSED_FORM, CostMethod.BVP])
    def test_cut_locus_pairs_are_flagged(self, method):
        """Half-period pairs on the circle are reported as ambiguous"""
        torus = FlatTorus(1)
        lag = PowerMetricLagrangian(torus, 2.0)
        mu = DiscreteMeasure.on(torus, [[0.0], [0.1]])
        nu = DiscreteMeasure.on(torus, [[0.5], [0.2]])
        C, ambiguous = cost_matrix_flagged(lag, mu, nu, 1.0, SolverSettings(cost_method=method))
        assert ambiguous.tolist() == [[True, False], [False, False]]
        assert C[0, 0] == pytest.approx(0.25, rel=1e-6)
        np.testing.assert_allclose(cost_matrix(lag, mu, nu, 1.0), C, rtol=1e-6)


class TestUniqueness:
    """Test suite for the uniqueness probe"""

    def test_tie_instance_is_split(self, quadratic, tie_instance):
        """A symmetric tie yields an alternative plan and a non-graph average"""
        mu, nu = tie_instance
        C = cost_matrix(quadratic, mu, nu, 1.0)
        plan, pot = solve_exact(C, mu, nu)
        probe = uniqueness_probe(C, mu, nu, plan, pot)
        assert not probe.unique
        assert probe.alternative is not None and probe.averaged is not None
        assert probe.alternative.cost(C) == pytest.approx(plan.cost(C))
        np.testing.assert_allclose(probe.averaged.dense(), np.full((2, 2), 0.25))
        report = graph_concentration(probe.averaged, mu.size)
        assert not report.passed
        assert report.details["split"] == [0, 1]

    def test_generic_instance_is_unique(self, quadratic, plane, rng):
        """Generic instances have a unique optimal plan"""
        mu, nu = random_instance(plane, rng, 20)
        C = cost_matrix(quadratic, mu, nu, 1.0)
        plan, pot = solve_exact(C, mu, nu)
        assert uniqueness_probe(C, mu, nu, plan, pot).unique


class TestCTransform:
    """Test suite for c-transforms"""

    def test_argmax_and_ties(self):
        """The lowest argmax index is reported with a tie flag"""
        psi = np.array([1.0, 2.0, 2.0])
        C = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 2.0]])
        values, index, ties = c_transform_all(psi, C)
        np.testing.assert_allclose(values, [2.0, 1.0])
        np.testing.assert_array_equal(index, [1, 0])
        np.testing.assert_array_equal(ties, [True, True])

    def test_point_transform(self, quadratic, plane):
        """c_transform evaluates one point against the target atoms"""
        nu = DiscreteMeasure.on(plane, [[1, 0], [3, 0]])
        result = c_transform(np.array([0.0, 5.0]), quadratic, 1.0, plane.point([0, 0]), nu)
        assert result.index == 0
        assert result.value == pytest.approx(-1.0)
        assert not result.tie

    def test_calibration_detects_infeasible_potentials(self, plane):
        """Raising psi above the subsolution bound fails calibration"""
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        plan = TransportPlan(np.array([0, 1]), np.array([0, 1]), np.array([0.5, 0.5]), (2, 2))
        assert check_calibration(plan, DualPotentials(np.zeros(2), np.zeros(2)), C, 1e-12).passed
        assert not check_calibration(plan, DualPotentials(np.zeros(2), np.array([2.0, 0.0])), C, 1e-12).passed


class TestEntropicPreview:
    """Test suite for the Sinkhorn preview"""

    def test_preview_bounds_the_optimum(self, quadratic, plane, rng):
        """Sinkhorn plans cost at least the exact optimum"""
        mu, nu = random_instance(plane, rng, 10)
        C = cost_matrix(quadratic, mu, nu, 1.0)
        plan, _ = solve_exact(C, mu, nu)
        preview = entropic_preview(C, mu, nu, 0.5)
        assert preview.plan.shape == (10, 10)
        assert preview.cost >= plan.cost(C) - 1e-8
        np.testing.assert_allclose(preview.plan.sum(axis=1), mu.weights, atol=1e-8)


class TestTolerances:
    """Test suite for relative comparisons"""

    def test_within_relative(self):
        """Relative closeness uses the larger magnitude plus an absolute floor"""
        assert within_relative(1.0, 1.0 + 1e-7, 1e-6)
        assert not within_relative(1.0, 1.1, 1e-6)
        assert within_relative(0.0, 1e-13, 1e-6)
        assert relative_gap(0.0, 0.0) == 0.0

    @given(magnitude, magnitude)
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, a, b):
        """within_relative does not depend on argument order"""
        assert within_relative(a, b, 1e-6) == within_relative(b, a, 1e-6)
