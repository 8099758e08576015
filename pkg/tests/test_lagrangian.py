import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.errors import ConfigError, InputError, NumericalError
from app.lagrangian import (
    CustomLagrangian,
    LagrangianCallbacks,
    PowerMetricLagrangian,
    build_lagrangian,
    convexity_probe,
    energy,
    euler_lagrange_flow,
    eval_L,
    fiber_derivative,
    flow_hamiltonian_coords,
    flow_lagrangian_coords,
    hamiltonian,
    legendre_inverse,
    load_entry_point,
    mechanical_lagrangian,
    superlinearity_constant,
)
from app.manifold import PoincareDisk, RoundSphere
from app.models import LagrangianKind, LagrangianSpec

component = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False)


class TestPowerMetric:
    """Test suite for L = |v|^r"""

    def test_quadratic_values(self, quadratic, plane):
        """r = 2: L = |v|^2, dL/dv = 2v, H = |p|^2 / 4"""
        v = plane.tangent(plane.point([1.0, 1.0]), [3.0, 4.0])
        assert eval_L(quadratic, v) == pytest.approx(25.0)
        p = fiber_derivative(quadratic, v)
        np.testing.assert_allclose(p.components, [6.0, 8.0])
        assert hamiltonian(quadratic, p) == pytest.approx(25.0)
        assert energy(quadratic, v) == pytest.approx(25.0)

    def test_cubic_energy(self, plane):
        """E = (r - 1) |v|^r"""
        lag = PowerMetricLagrangian(plane, 3.0)
        v = plane.tangent(plane.point([0.0, 0.0]), [0.0, 2.0])
        assert energy(lag, v) == pytest.approx(16.0)

    def test_rejects_small_exponent(self, plane):
        """r must exceed 1"""
        with pytest.raises(ConfigError):
            PowerMetricLagrangian(plane, 1.0)

    def test_zero_velocity(self, quadratic, plane):
        """The fiber derivative and its inverse vanish at rest"""
        x = plane.point([0.0, 0.0])
        assert not np.any(fiber_derivative(quadratic, plane.tangent(x, [0.0, 0.0])).components)
        np.testing.assert_array_equal(quadratic.velocity(x.coords, np.zeros(2)), np.zeros(2))

    @given(st.sampled_from([1.5, 2.0, 3.0]), st.lists(component, min_size=2, max_size=2))
    @settings(max_examples=60, deadline=None)
    def test_legendre_round_trip(self, r, components):
        """legendre_inverse undoes fiber_derivative on the hyperbolic plane"""
        disk = PoincareDisk()
        lag = PowerMetricLagrangian(disk, r)
        v = disk.tangent(disk.point([0.3, -0.4]), components)
        back = legendre_inverse(lag, fiber_derivative(lag, v))
        np.testing.assert_allclose(back.components, v.components, rtol=1e-9, atol=1e-12)


class TestFlows:
    """Test suite for the Hamiltonian and Euler-Lagrange flows"""

    def test_straight_lines(self, quadratic):
        """Flat flows move on straight lines at constant velocity"""
        X, V = flow_lagrangian_coords(quadratic, np.array([0.0, 0.0]), np.array([1.0, 2.0]), 1.5)
        np.testing.assert_allclose(X, [1.5, 3.0], atol=1e-12)
        np.testing.assert_allclose(V, [1.0, 2.0], atol=1e-12)

    def test_batched_flow(self, quadratic):
        """Flows run on batches of initial states"""
        X0 = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]])
        P0 = np.array([[2.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
        X, P = flow_hamiltonian_coords(quadratic, X0, P0, 1.0, record=True)
        assert X.shape == (1001, 3, 2)
        np.testing.assert_allclose(X[-1], [[1.0, 0.0], [1.0, 2.0], [2.0, -1.0]], atol=1e-12)
        np.testing.assert_allclose(P[-1], P0)

    def test_negative_time(self, quadratic):
        """Flows only run forward"""
        with pytest.raises(InputError):
            flow_hamiltonian_coords(quadratic, np.zeros(2), np.ones(2), -0.5)

    def test_zero_time(self, quadratic):
        """t = 0 returns the initial state"""
        X, P = flow_hamiltonian_coords(quadratic, np.ones(2), np.ones(2), 0.0)
        np.testing.assert_array_equal(X, np.ones(2))

    def test_energy_conserved_on_sphere(self):
        """The Euler-Lagrange flow conserves the energy on the sphere"""
        sphere = RoundSphere()
        lag = PowerMetricLagrangian(sphere, 3.0)
        v0 = sphere.tangent(sphere.point([0.1, 0.2]), [0.3, -0.2])
        v1 = euler_lagrange_flow(lag, v0, 1.0)
        assert energy(lag, v1) == pytest.approx(energy(lag, v0), rel=1e-8)

    def test_geodesic_speed_on_disk(self):
        """r = 2 flows are constant-speed geodesics: the end point lies at distance t |v|"""
        disk = PoincareDisk()
        lag = PowerMetricLagrangian(disk, 2.0)
        v0 = disk.tangent(disk.point([0.0, 0.0]), [0.25, 0.0])
        v1 = euler_lagrange_flow(lag, v0, 2.0)
        assert disk.dist(v0.base, v1.base) == pytest.approx(2.0 * disk.norm(v0), rel=1e-8)
        np.testing.assert_allclose(v1.base.coords, disk.exp(v0, 2.0).coords, atol=1e-9)


class TestCustomLagrangian:
    """Test suite for user Lagrangians"""

    def test_mechanical_round_trip(self, plane):
        """The root solve inverts the fiber derivative of the mechanical example"""
        lag = mechanical_lagrangian(plane)
        X = np.array([[0.0, 0.0], [1.0, 2.0]])
        V = np.array([[0.5, -1.0], [2.0, 0.1]])
        np.testing.assert_allclose(lag.velocity(X, lag.dv(X, V)), V, atol=1e-10)

    def test_large_batch(self, plane, rng):
        """Batches longer than one solve block are inverted row for row"""
        lag = mechanical_lagrangian(plane)
        X = rng.normal(size=(5, 21, 2))
        V = rng.normal(size=(5, 21, 2))
        np.testing.assert_allclose(lag.velocity(X, lag.dv(X, V)), V, atol=1e-9)

    def test_finite_difference_hessian(self, plane):
        """Without a hessian callback the Legendre inverse differentiates dv numerically"""
        callbacks = LagrangianCallbacks(
            value=lambda x, v: np.cosh(np.sum(v * v, axis=-1)),
            dv=lambda x, v: 2.0 * np.sinh(np.sum(v * v, axis=-1))[..., None] * v,
            dx=lambda x, v: np.zeros(np.broadcast_shapes(x.shape, v.shape)),
        )
        lag = CustomLagrangian(plane, callbacks, tolerance=1e-10)
        v = np.array([0.7, -0.3])
        np.testing.assert_allclose(lag.velocity(np.zeros(2), lag.dv(np.zeros(2), v)), v, atol=1e-8)

    def test_unreachable_momentum(self, plane):
        """A momentum outside the range of dL/dv raises a numerical error"""
        callbacks = LagrangianCallbacks(
            value=lambda x, v: np.sum(np.log(np.cosh(v)), axis=-1),
            dv=lambda x, v: np.tanh(v),
            dx=lambda x, v: np.zeros_like(v),
            hessian=lambda x, v: np.eye(2) * (1.0 / np.cosh(v) ** 2)[..., None, :],
        )
        lag = CustomLagrangian(plane, callbacks, max_iter=5)
        with pytest.raises(NumericalError):
            lag.velocity(np.zeros(2), np.array([3.0, 0.0]))

    def test_potential_bends_trajectories(self, line):
        """L = |v|^2/2 + |v|^4/4 - U(x) with U = x^2/2 pulls the particle back"""
        lag = mechanical_lagrangian(line, lambda x: 0.5 * x[..., 0] ** 2, lambda x: x)
        X, _ = flow_lagrangian_coords(lag, np.array([0.0]), np.array([0.5]), 1.0)
        assert 0.0 < X[0] < 0.5


class TestDiagnostics:
    """Test suite for convexity and superlinearity probes"""

    def test_convexity_probe(self, quadratic, rng):
        """Power Lagrangians are strictly convex in the fiber"""
        report = convexity_probe(quadratic, rng.normal(size=(4, 2)), 20, rng)
        assert report.passed
        assert report.details["pairs"] == 80

    def test_convexity_probe_detects_linear(self, plane, rng):
        """A Lagrangian linear in v is not strictly convex"""
        callbacks = LagrangianCallbacks(
            value=lambda x, v: v[..., 0],
            dv=lambda x, v: np.broadcast_to([1.0, 0.0], v.shape),
            dx=lambda x, v: np.zeros_like(v),
        )
        assert not convexity_probe(CustomLagrangian(plane, callbacks), np.zeros((2, 2)), 10, rng).passed

    def test_superlinearity(self, quadratic, rng):
        """|v|^2 >= |v| - 1/4"""
        X = rng.normal(size=(200, 2))
        V = 3.0 * rng.normal(size=(200, 2))
        assert superlinearity_constant(quadratic, X, V) >= -0.25 - 1e-12


class TestConstruction:
    """Test suite for building Lagrangians from specs"""

    def test_power_from_schema(self, plane):
        """power_metric specs build PowerMetricLagrangian"""
        lag = build_lagrangian(LagrangianSpec(r=3.0), plane)
        assert isinstance(lag, PowerMetricLagrangian)
        assert lag.power == 3.0

    def test_custom_entry_point(self, plane):
        """Entry points may return a ready model"""
        spec = LagrangianSpec(kind=LagrangianKind.CUSTOM, entry_point="app.lagrangian:mechanical_lagrangian")
        lag = build_lagrangian(spec, plane)
        assert lag.kind == LagrangianKind.CUSTOM
        assert lag.power is None

    @pytest.mark.parametrize("entry_point", ["no_colon", "app.lagrangian:missing", "not_a_module_xyz:factory"])
    def test_bad_entry_point(self, entry_point):
        """Unloadable entry points are configuration errors"""
        with pytest.raises(ConfigError) as error:
            load_entry_point(entry_point)
        assert error.value.key == "lagrangian.entry_point"
