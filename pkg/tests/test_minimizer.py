import math

import numpy as np
import pytest

from app.errors import AmbiguityError, ConfigError, InputError
from app.lagrangian import PowerMetricLagrangian, mechanical_lagrangian
from app.manifold import FlatTorus, PoincareDisk, RoundSphere
from app.minimizer import (
    CostQuery,
    closed_form_cost,
    closed_form_superdifferential,
    cost,
    cost_superdifferential,
    exponent_pin,
    minimize,
    pairwise_costs,
    pairwise_costs_flagged,
    resolve_cost_method,
    rowwise_costs,
    rowwise_superdifferential_x,
    semigroup_probe,
    speed_bound_probe,
    twist_probe,
)
from app.models import CostMethod, SolverSettings


def query(manifold, x, y, t=1.0) -> CostQuery:
    return CostQuery(manifold.point(x), manifold.point(y), t)


class TestCostQuery:
    """Test suite for cost query validation"""

    def test_positive_time(self, plane):
        """t must be positive"""
        with pytest.raises(InputError):
            query(plane, [0, 0], [1, 1], 0.0)

    def test_matching_dimensions(self, plane, line):
        """Endpoints must live in the same dimension"""
        with pytest.raises(InputError):
            CostQuery(plane.point([0, 0]), line.point([1]), 1.0)


class TestEuclideanCosts:
    """Test suite for costs on the flat plane"""

    def test_quadratic_cost(self, quadratic, plane):
        """c_1((0,0), (3,4)) = 25 for r = 2"""
        curve = minimize(quadratic, query(plane, [0, 0], [3, 4]))
        assert curve.action == pytest.approx(25.0, rel=1e-9)
        assert curve.method == "shooting"
        assert not curve.ambiguous
        np.testing.assert_allclose(curve.end.coords, [3.0, 4.0], atol=1e-9)
        np.testing.assert_allclose(curve.speeds(), 5.0, rtol=1e-9)

    @pytest.mark.parametrize("r, t", [(1.5, 0.5), (2.0, 2.0), (3.0, 0.5)])
    def test_closed_form(self, plane, r, t):
        """Boundary-value costs equal t^(1-r) d^r"""
        lag = PowerMetricLagrangian(plane, r)
        q = query(plane, [0.5, -1.0], [1.5, 1.0], t)
        expected = t ** (1 - r) * math.sqrt(5.0) ** r
        assert cost(lag, q) == pytest.approx(expected, rel=1e-6)
        assert closed_form_cost(lag, q.x, q.y, t) == pytest.approx(expected)

    def test_same_point(self, quadratic, plane):
        """c_t(x, x) = 0 with a constant minimizer"""
        curve = minimize(quadratic, query(plane, [1, 2], [1, 2]))
        assert curve.action == 0.0
        assert not np.any(curve.velocities)

    def test_superdifferential(self, quadratic, plane):
        """dc/dx = -2(y - x)/t and dc/dy = 2(y - x)/t"""
        q = query(plane, [0, 0], [3, 4], 2.0)
        grad_x, grad_y = cost_superdifferential(quadratic, q)
        np.testing.assert_allclose(grad_x.components, [-3.0, -4.0], rtol=1e-7)
        np.testing.assert_allclose(grad_y.components, [3.0, 4.0], rtol=1e-7)
        closed_x, closed_y = closed_form_superdifferential(quadratic, q.x, q.y, 2.0)
        np.testing.assert_allclose(closed_x.components, grad_x.components, rtol=1e-7)
        np.testing.assert_allclose(closed_y.components, grad_y.components, rtol=1e-7)

    def test_custom_lagrangian(self, plane):
        """With L = |v|^2/2 + |v|^4/4 the minimizer is the unit-speed segment"""
        lag = mechanical_lagrangian(plane)
        curve = minimize(lag, query(plane, [0, 0], [1, 0]))
        assert curve.action == pytest.approx(0.75, rel=1e-7)
        assert curve.energy_spread < 1e-6


class TestCurvedCosts:
    """Test suite for costs on curved and periodic models"""

    def test_torus_uses_the_short_way(self):
        """Minimizers on the torus cross the boundary when that is shorter"""
        torus = FlatTorus(2)
        lag = PowerMetricLagrangian(torus, 2.0)
        curve = minimize(lag, query(torus, [0.1, 0.5], [0.9, 0.5]))
        assert curve.action == pytest.approx(0.04, rel=1e-9)
        np.testing.assert_allclose(curve.positions[-1], [-0.1, 0.5], atol=1e-9)
        np.testing.assert_allclose(curve.end.coords, [0.9, 0.5], atol=1e-9)

    def test_sphere_quarter_circle(self):
        """North pole to equator: cost (pi/2)^2 for r = 2"""
        sphere = RoundSphere()
        lag = PowerMetricLagrangian(sphere, 2.0)
        value = cost(lag, query(sphere, [0, 0], [1, 0]))
        assert value == pytest.approx((math.pi / 2) ** 2, rel=1e-6)

    def test_hyperbolic_cost(self):
        """c_1(0, (0.5, 0)) = log(3)^2 for r = 2"""
        disk = PoincareDisk()
        lag = PowerMetricLagrangian(disk, 2.0)
        curve = minimize(lag, query(disk, [0, 0], [0.5, 0]))
        assert curve.action == pytest.approx(math.log(3.0) ** 2, rel=1e-6)
        assert curve.energy_spread < 1e-6

    @pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("r", [1.5, 2.0, 3.0])
    @pytest.mark.parametrize(
        "manifold, x, y",
        [
            (RoundSphere(), [0.2, 0.1], [-0.3, 0.4]),
            (PoincareDisk(), [0.1, -0.2], [-0.4, 0.3]),
            (FlatTorus(2), [0.1, 0.2], [0.35, 0.6]),
        ],
        ids=["sphere2", "hyperbolic2", "torus"],
    )
    def test_boundary_value_matches_closed_form(self, manifold, x, y, r, t):
        """Shooting reproduces t^(1-r) d^r on every curved model"""
        lag = PowerMetricLagrangian(manifold, r)
        q = query(manifold, x, y, t)
        curve = minimize(lag, q)
        assert curve.action == pytest.approx(closed_form_cost(lag, q.x, q.y, t), rel=1e-6)
        assert not curve.ambiguous

    def test_shooting_corrects_the_seed(self, line):
        """Under a potential the straight-line seed is wrong and the root solve has to correct it"""
        lag = mechanical_lagrangian(line, lambda x: 0.5 * x[..., 0] ** 2, lambda x: x)
        curve = minimize(lag, query(line, [0.0], [1.0]))
        assert curve.method == "shooting"
        assert curve.residual <= SolverSettings().shooting_tolerance
        np.testing.assert_allclose(curve.positions[-1], [1.0], atol=1e-6)
        assert abs(curve.velocities[0, 0] - 1.0) > 1e-3


class TestBulkCosts:
    """Test suite for cost matrices"""

    def test_closed_form_matrix(self, quadratic):
        """Power costs assemble from the distance matrix"""
        X = np.array([[0.0, 0.0], [1.0, 0.0]])
        Y = np.array([[0.0, 1.0], [2.0, 0.0], [0.0, 0.0]])
        C = pairwise_costs(quadratic, X, Y, 0.5)
        np.testing.assert_allclose(C, 2.0 * np.array([[1.0, 4.0, 0.0], [2.0, 1.0, 1.0]]))

    def test_bvp_matrix_matches_closed_form(self, quadratic):
        """Shooting and the closed form assemble the same matrix"""
        X = np.array([[0.0, 0.0], [1.0, 0.5]])
        Y = np.array([[0.5, 1.0], [2.0, 0.0]])
        bvp = pairwise_costs(quadratic, X, Y, 1.0, SolverSettings(cost_method=CostMethod.BVP))
        np.testing.assert_allclose(bvp, pairwise_costs(quadratic, X, Y, 1.0), rtol=1e-8)

    def test_rowwise(self, quadratic):
        """rowwise_costs pairs rows"""
        X = np.array([[0.0, 0.0], [1.0, 1.0]])
        Y = np.array([[3.0, 4.0], [1.0, 1.0]])
        np.testing.assert_allclose(rowwise_costs(quadratic, X, Y, 1.0), [25.0, 0.0])

    @pytest.mark.parametrize("method", [CostMethod.CLOSED_FORM, CostMethod.BVP])
    def test_sphere_antipodes_are_flagged(self, method):
        """Antipodal pairs carry the ambiguity mask and refuse a superdifferential"""
        sphere = RoundSphere()
        lag = PowerMetricLagrangian(sphere, 2.0)
        settings = SolverSettings(cost_method=method)
        X = np.array([[1.0, 0.0]])
        Y = np.array([[-1.0, 0.0], [0.0, 0.5]])
        C, ambiguous = pairwise_costs_flagged(lag, X, Y, 1.0, settings)
        assert ambiguous.tolist() == [[True, False]]
        assert C[0, 0] == pytest.approx(math.pi**2, rel=1e-6)
        with pytest.raises(AmbiguityError):
            rowwise_superdifferential_x(lag, X, Y[:1], 1.0, settings, strict=True)

    def test_method_resolution(self, quadratic, plane):
        """auto picks the closed form for power Lagrangians only"""
        assert resolve_cost_method(quadratic, SolverSettings()) == CostMethod.CLOSED_FORM
        custom = mechanical_lagrangian(plane)
        assert resolve_cost_method(custom, SolverSettings()) == CostMethod.BVP
        with pytest.raises(ConfigError):
            resolve_cost_method(custom, SolverSettings(cost_method=CostMethod.CLOSED_FORM))


class TestProbes:
    """Test suite for minimizer probes"""

    def test_exponent_pin(self, quadratic, plane):
        """At r = 2, t = 2 the proof form holds and the statement form is off by 4x"""
        pairs = [(plane.point([0, 0]), plane.point([1, 2])), (plane.point([1, 1]), plane.point([-1, 0]))]
        report = exponent_pin(quadratic, pairs, 2.0)
        assert report.passed
        assert report.details["proof_form"] == "PASS"
        assert report.details["statement_form"] == "FAIL"
        assert report.residuals["statement_to_cost_ratio"] == pytest.approx(4.0, rel=1e-6)

    def test_exponent_pin_at_unit_time(self, quadratic, plane):
        """At t = 1 both forms coincide"""
        report = exponent_pin(quadratic, [(plane.point([0, 0]), plane.point([1, 2]))], 1.0)
        assert report.passed
        assert report.details["statement_form"] == "PASS"

    def test_semigroup(self, quadratic, plane):
        """c_t(x, z) <= c_s(x, y) + c_(t-s)(y, z) with equality on the minimizer"""
        probes = [plane.point(p) for p in ([0, 1], [2, 2], [0.5, 0.5])]
        report = semigroup_probe(quadratic, plane.point([0, 0]), plane.point([1, 1]), 1.0, 0.3, probes)
        assert report.passed
        assert report.residuals["equality_residual"] < 1e-9

    def test_semigroup_needs_interior_s(self, quadratic, plane):
        """s must lie strictly between 0 and t"""
        with pytest.raises(InputError):
            semigroup_probe(quadratic, plane.point([0, 0]), plane.point([1, 1]), 1.0, 1.0, [])

    def test_twist(self, quadratic, plane):
        """Distinct targets give distinct gradients and are recovered by the flow"""
        targets = [plane.point(p) for p in ([1, 0], [0, 1], [1, 1])]
        report = twist_probe(quadratic, plane.point([0, 0]), targets, 1.0)
        assert report.passed
        assert report.residuals["reconstruction"] < 1e-9

    def test_speed_bound(self, quadratic, plane, rng):
        """Minimizer speeds between points of K are bounded by diam(K)/t"""
        K = [plane.point(p) for p in ([0, 0], [1, 0], [0, 1])]
        report = speed_bound_probe(quadratic, K, 1.0, 9, rng)
        assert report.passed
        assert report.residuals["bound"] == pytest.approx(math.sqrt(2.0), rel=1e-9)
        assert report.details["pairs"] == 9
