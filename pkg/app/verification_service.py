"""Seeded property suites over the configured model.

Every check returns a CertificateReport; only configuration problems raise.
Sample counts default to a quick desk run and grow with ``full``.
"""

import logging
from typing import Callable

import numpy as np

from app.errors import AmbiguityError, ConfigError, LotError
from app.kantorovich import (
    DiscreteMeasure,
    DualPotentials,
    TransportPlan,
    c_transform_all,
    check_calibration,
    duality_gap,
    graph_concentration,
    marginal_error,
    solve_exact,
    uniqueness_probe,
)
from app.lagrangian import (
    LagrangianModel,
    PowerMetricLagrangian,
    convexity_probe,
    euler_lagrange_flow,
    fiber_derivative,
    flow_hamiltonian_coords,
    hamiltonian_flow,
    legendre_inverse,
    superlinearity_constant,
)
from app.manifold import EuclideanSpace, FlatTorus, ManifoldModel, PoincareDisk, RoundSphere, builtin_manifolds
from app.minimizer import (
    CostQuery,
    closed_form_cost,
    cost,
    cost_superdifferential,
    exponent_pin,
    minimize,
    pairwise_costs,
    semigroup_probe,
    speed_bound_probe,
    twist_probe,
)
from app.models import CertificateReport, LagrangianKind, SolverSettings, SuiteName, SuiteReport
from app.monge import (
    calibration_transport_residuals,
    extract_dr_map,
    extract_potential_map,
    gradient_law_residuals,
    is_monotone_1d,
    map_from_plan,
)
from app.semiconcave import (
    Box,
    certify_semiconcave,
    estimate_linear_modulus,
    inf_family_certificate,
    lipschitz_estimate,
    nondifferentiability_fraction,
    sum_certificate,
    tabulated_modulus,
    touching_criterion,
)
from app.transport_service import TransportModel

logger = logging.getLogger(__name__)


def sample_points(manifold: ManifoldModel, rng: np.random.Generator, count: int) -> np.ndarray:
    """Random admissible chart points away from chart singularities"""
    if isinstance(manifold, FlatTorus):
        return rng.random((count, manifold.dim))
    if isinstance(manifold, (RoundSphere, PoincareDisk)):
        radius = 0.9 if isinstance(manifold, RoundSphere) else 0.6
        angle = rng.uniform(0.0, 2.0 * np.pi, count)
        r = radius * np.sqrt(rng.random(count))
        return np.stack([r * np.cos(angle), r * np.sin(angle)], axis=-1)
    return rng.uniform(-1.0, 1.0, (count, manifold.dim))


def sample_box(manifold: ManifoldModel) -> Box:
    if isinstance(manifold, FlatTorus):
        return Box.cube(manifold.dim, 0.2, 0.8)
    if isinstance(manifold, PoincareDisk):
        return Box.cube(2, -0.4, 0.4)
    if isinstance(manifold, RoundSphere):
        return Box.cube(2, -0.5, 0.5)
    return Box.cube(manifold.dim, -1.0, 1.0)


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    """max over rows of |a - b| / (max(|a|, |b|)) with a 1e-12 floor"""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    scale = np.maximum(np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1))
    return float(np.max((np.linalg.norm(a - b, axis=-1) - 1e-12) / np.maximum(scale, 1e-300)).clip(min=0.0))


def _failure(name: str, error: LotError) -> CertificateReport:
    return CertificateReport.of(name, False, {}, {"error": type(error).__name__, **error.details()}, error.message)


def optimum_concentration(
    C: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure, plan: TransportPlan, pot: DualPotentials, tolerance: float
) -> CertificateReport:
    """Graph check on the optimum the probe reports: the averaged plan when a second optimum exists"""
    probe = uniqueness_probe(C, mu, nu, plan, pot, tolerance)
    report = graph_concentration(plan if probe.unique else probe.averaged, mu.size)
    report.details["unique"] = probe.unique
    return report


class VerificationService:
    """Service running the invariant suites"""

    def __init__(self) -> None:
        self._suites: dict[SuiteName, Callable[[TransportModel, np.random.Generator, bool], list[CertificateReport]]] = {
            SuiteName.FLOWS: self.flows_suite,
            SuiteName.LEGENDRE: self.legendre_suite,
            SuiteName.SEMICONCAVITY: self.semiconcavity_suite,
            SuiteName.TWIST: self.twist_suite,
            SuiteName.DUALITY: self.duality_suite,
        }

    def run(self, model: TransportModel, suite: str, full: bool = False) -> list[SuiteReport]:
        try:
            name = SuiteName(suite)
        except ValueError:
            raise ConfigError(f"unknown suite '{suite}'", key="suite")
        names = list(self._suites) if name == SuiteName.ALL else [name]
        reports = []
        for current in names:
            rng = np.random.default_rng([model.config.seed, list(SuiteName).index(current)])
            checks = []
            try:
                checks = self._suites[current](model, rng, full)
            except LotError as e:
                logger.warning("suite %s aborted: %s", current.value, e.message)
                checks.append(_failure(f"{current.value}_suite", e))
            reports.append(SuiteReport(suite=current.value, seed=model.config.seed, checks=checks))
            logger.info("suite %s: %s", current.value, "PASS" if reports[-1].passed else "FAIL")
        return reports

    # flows and minimizers ---------------------------------------------------

    def flows_suite(self, model: TransportModel, rng: np.random.Generator, full: bool) -> list[CertificateReport]:
        lag, manifold, settings = model.lag, model.manifold, model.settings
        count = 64 if full else 16
        X = sample_points(manifold, rng, count)
        V = 0.5 * rng.normal(size=X.shape) / np.sqrt(manifold.sq_norm(X, np.ones_like(X)) / manifold.dim)[:, None]
        steps = settings.steps_for(1.0)
        positions, momenta = flow_hamiltonian_coords(lag, X, lag.dv(X, V), 1.0, steps, record=True)
        energies = lag.energy_coords(positions, lag.velocity(positions, momenta))
        drift = float(np.max(np.abs(energies - energies[0]) / (1.0 + np.abs(energies[0]))))
        limit = 1e-8 if manifold.is_flat else 1e-6
        checks = [CertificateReport.of("energy_conservation", drift <= limit, {"max_drift": drift}, {"limit": limit})]

        v0 = manifold.tangent(manifold.point(X[0]), V[0])
        direct = euler_lagrange_flow(lag, v0, 1.0, steps)
        composed = legendre_inverse(lag, hamiltonian_flow(lag, fiber_derivative(lag, v0), 1.0, steps))
        identical = bool(np.array_equal(direct.components, composed.components)) and bool(
            np.array_equal(direct.base.coords, composed.base.coords)
        )
        checks.append(CertificateReport.of("conjugation_identity", identical, {}))

        pairs = [(manifold.point(a), manifold.point(b)) for a, b in zip(X[: count // 4], X[count // 4 : count // 2])]
        spreads = []
        for x, y in pairs:
            spreads.append(minimize(lag, CostQuery(x, y, model.t), settings).energy_spread)
        worst_spread = float(max(spreads))
        checks.append(CertificateReport.of("minimizer_energy", worst_spread <= 1e-6, {"max_relative_spread": worst_spread}))

        if lag.power is not None:
            excess = 0.0
            for t in (0.5, 1.0, 2.0):
                for x, y in pairs:
                    value = cost(lag, CostQuery(x, y, t), settings)
                    excess = max(excess, abs(value - closed_form_cost(lag, x, y, t)) / (1.0 + abs(value)))
            checks.append(CertificateReport.of("closed_form_agreement", excess <= 1e-5, {"max_excess": excess}))
            checks.append(exponent_pin(lag, pairs, 2.0, settings))

        x, z = pairs[0]
        probes = [manifold.point(p) for p in sample_points(manifold, rng, 4)]
        checks.append(semigroup_probe(lag, x, z, model.t, 0.5 * model.t, probes, settings))
        return checks

    # Legendre transform and Hamiltonian ----------------------------------------

    def _legendre_checks(self, lag: LagrangianModel, rng: np.random.Generator, count: int, prefix: str) -> list[CertificateReport]:
        manifold = lag.manifold
        X = sample_points(manifold, rng, count)
        V = rng.normal(size=X.shape)
        P = lag.dv(X, V)
        back = lag.velocity(X, P)
        round_trip = float(np.max(np.linalg.norm(back - V, axis=-1) / (1.0 + np.linalg.norm(V, axis=-1))))

        h = 1e-6
        gradient = np.zeros_like(P)
        for k in range(manifold.dim):
            e = np.zeros(manifold.dim)
            e[k] = h * (1.0 + np.max(np.abs(P)))
            gradient[:, k] = (lag.hamiltonian_coords(X, P + e) - lag.hamiltonian_coords(X, P - e)) / (2.0 * e[k])
        derivative = float(np.max(np.linalg.norm(gradient - V, axis=-1) / (1.0 + np.linalg.norm(V, axis=-1))))

        superlinear = superlinearity_constant(lag, X, 10.0 * V)
        return [
            CertificateReport.of(f"{prefix}legendre_round_trip", round_trip <= 1e-8, {"max_error": round_trip}),
            CertificateReport.of(f"{prefix}hamiltonian_dp", derivative <= 1e-5, {"max_error": derivative}),
            convexity_probe(lag, X[:8], 16, rng).model_copy(update={"name": f"{prefix}convexity_probe"}),
            CertificateReport.of(f"{prefix}superlinearity", bool(np.isfinite(superlinear)), {"constant": superlinear}),
        ]

    def legendre_suite(self, model: TransportModel, rng: np.random.Generator, full: bool) -> list[CertificateReport]:
        count = 1000 if full else 200
        checks = self._legendre_checks(model.lag, rng, count, "")
        if model.lag.power is not None:
            for manifold in builtin_manifolds():
                prefix = f"{manifold.kind.value}:"
                checks.extend(self._legendre_checks(PowerMetricLagrangian(manifold, model.lag.power), rng, count, prefix))
        return checks

    # semi-concavity ---------------------------------------------------------------

    def semiconcavity_suite(self, model: TransportModel, rng: np.random.Generator, full: bool) -> list[CertificateReport]:
        lag, manifold, settings, t = model.lag, model.manifold, model.settings, model.t
        box = sample_box(manifold)
        samples = 400 if full else 120
        targets = sample_points(manifold, rng, 50 if full else 8)

        def slice_at(y: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
            return lambda X: pairwise_costs(lag, X, y[None, :], t, settings)[:, 0]

        fields = [slice_at(y) for y in targets]
        moduli = [estimate_linear_modulus(f, box, samples, np.random.default_rng(rng.integers(2**32))) for f in fields]
        k = 1.01 * max(moduli) + 1e-9
        checks = [
            certify_semiconcave(fields[0], box, samples, k, np.random.default_rng(rng.integers(2**32))).as_report(
                "cost_slice_modulus"
            )
        ]
        _, family = inf_family_certificate(fields, box, k, samples, np.random.default_rng(rng.integers(2**32)))
        checks.append(family.as_report("inf_family"))

        first = tabulated_modulus(fields[0], box, samples, rng=np.random.default_rng(rng.integers(2**32)))
        checks.append(first.as_report("tabulated_modulus"))
        linear = certify_semiconcave(fields[1 % len(fields)], box, samples, k, np.random.default_rng(rng.integers(2**32)))
        summed = sum_certificate(
            certify_semiconcave(fields[0], box, samples, k, np.random.default_rng(rng.integers(2**32))), linear
        )

        def both(X: np.ndarray) -> np.ndarray:
            return fields[0](X) + fields[1 % len(fields)](X)

        direct = certify_semiconcave(both, box, samples, summed.k or 0.0, np.random.default_rng(rng.integers(2**32)))
        checks.append(direct.as_report("sum_rule"))

        bounds = lipschitz_estimate(fields[0], box.shrink(0.1), samples, k, np.random.default_rng(rng.integers(2**32)))
        checks.append(
            CertificateReport.of(
                "lipschitz_bound",
                bounds.empirical <= bounds.bound + 1e-9,
                {"empirical": bounds.empirical, "bound": bounds.bound},
            )
        )
        checks.append(self._touching(model, rng, box, samples))
        return checks

    def _touching(self, model: TransportModel, rng: np.random.Generator, box: Box, samples: int) -> CertificateReport:
        lag, settings, t = model.lag, model.settings, model.t
        points = box.uniform(rng, 24)
        targets = box.uniform(rng, 6)
        mu = DiscreteMeasure.on(model.manifold, points)
        nu = DiscreteMeasure.on(model.manifold, targets)
        C = pairwise_costs(lag, mu.support, nu.support, t, settings)
        _, pot = solve_exact(C, mu, nu)
        _, argmax, ties = c_transform_all(pot.psi, C)
        j_star = int(np.bincount(argmax[~ties], minlength=nu.size).argmax())
        contact = mu.support[(argmax == j_star) & ~ties]
        y_star = nu.support[j_star]

        def potential(X: np.ndarray) -> np.ndarray:
            return c_transform_all(pot.psi, pairwise_costs(lag, X, nu.support, t, settings))[0]

        def lower(X: np.ndarray) -> np.ndarray:
            return pot.psi[j_star] - pairwise_costs(lag, X, y_star[None, :], t, settings)[:, 0]

        report = touching_criterion(lower, potential, contact, box, samples, rng)
        fine = nondifferentiability_fraction(potential, box, 41)
        coarse = nondifferentiability_fraction(potential, box, 11)
        report.details.update({"nondifferentiable_fraction_coarse": coarse, "nondifferentiable_fraction_fine": fine})
        return report

    # twist and superdifferentials ---------------------------------------------------

    def twist_suite(self, model: TransportModel, rng: np.random.Generator, full: bool) -> list[CertificateReport]:
        lag, manifold, settings, t = model.lag, model.manifold, model.settings, model.t
        count = 100 if full else 6
        X = sample_points(manifold, rng, count)
        Y = sample_points(manifold, rng, count)
        h = 1e-4
        worst = 0.0
        skipped = 0
        for x, y in zip(X, Y):
            query = CostQuery(manifold.point(x), manifold.point(y), t)
            if minimize(lag, query, settings).ambiguous:
                skipped += 1
                continue
            grad_x, grad_y = cost_superdifferential(lag, query, settings)
            fd_x, fd_y = np.zeros(manifold.dim), np.zeros(manifold.dim)
            for k in range(manifold.dim):
                e = np.zeros(manifold.dim)
                e[k] = h
                fd_x[k] = (
                    cost(lag, CostQuery(manifold.point(x + e), query.y, t), settings)
                    - cost(lag, CostQuery(manifold.point(x - e), query.y, t), settings)
                ) / (2 * h)
                fd_y[k] = (
                    cost(lag, CostQuery(query.x, manifold.point(y + e), t), settings)
                    - cost(lag, CostQuery(query.x, manifold.point(y - e), t), settings)
                ) / (2 * h)
            worst = max(worst, _relative(grad_x.components, fd_x), _relative(grad_y.components, fd_y))
        checks = [
            CertificateReport.of(
                "superdifferential_vs_differences", worst <= 1e-4, {"max_relative_error": worst}, {"skipped": skipped}
            )
        ]
        base = manifold.point(X[0])
        targets = [manifold.point(y) for y in Y[1:4]]
        checks.append(twist_probe(lag, base, targets, t, settings))
        K = [manifold.point(p) for p in sample_points(manifold, rng, 4)]
        checks.append(speed_bound_probe(lag, K, t, 16, rng, settings))
        return checks

    # duality, plans and maps ------------------------------------------------------------

    def _tie_instance(self, manifold: ManifoldModel) -> tuple[DiscreteMeasure, DiscreteMeasure]:
        center = np.full(manifold.dim, 0.5) if isinstance(manifold, FlatTorus) else np.zeros(manifold.dim)
        e1, e2 = np.eye(manifold.dim)[0], np.eye(manifold.dim)[1]
        eps = 0.2
        mu = DiscreteMeasure.on(manifold, [center + eps * e1, center - eps * e1])
        nu = DiscreteMeasure.on(manifold, [center + eps * e2, center - eps * e2])
        return mu, nu

    def duality_suite(self, model: TransportModel, rng: np.random.Generator, full: bool) -> list[CertificateReport]:
        lag, manifold, settings, t = model.lag, model.manifold, model.settings, model.t
        instances = 20 if full else 3
        size = 200 if full else 24
        gap = calibration = marginals = idempotence = 0.0
        graphs = True
        non_unique = 0
        for _ in range(instances):
            mu = DiscreteMeasure.on(manifold, sample_points(manifold, rng, size))
            nu = DiscreteMeasure.on(manifold, sample_points(manifold, rng, size))
            C = pairwise_costs(lag, mu.support, nu.support, t, settings)
            plan, pot = solve_exact(C, mu, nu)
            gap = max(gap, duality_gap(plan, pot, C, mu, nu))
            report = check_calibration(plan, pot, C, 1e-9)
            calibration = max(calibration, *report.residuals.values())
            marginals = max(marginals, marginal_error(plan, mu, nu))
            values, _, _ = c_transform_all(pot.psi, C)
            idempotence = max(idempotence, float(np.max(np.abs(values - pot.phi))))
            concentration = optimum_concentration(C, mu, nu, plan, pot, settings.lp_tolerance)
            graphs = graphs and concentration.passed
            non_unique += not concentration.details["unique"]
        checks = [
            CertificateReport.of("duality_gap", gap <= 1e-9, {"max_gap": gap}, {"instances": instances, "atoms": size}),
            CertificateReport.of("calibration", calibration <= 1e-9, {"max_residual": calibration}),
            CertificateReport.of("marginals", marginals <= 1e-10, {"max_error": marginals}),
            CertificateReport.of("c_transform_idempotence", idempotence <= 1e-9, {"max_error": idempotence}),
            CertificateReport.of("graph_concentration", graphs, {}, {"non_unique_instances": non_unique}),
        ]
        if manifold.dim >= 2:
            mu, nu = self._tie_instance(manifold)
            C = pairwise_costs(lag, mu.support, nu.support, t, settings)
            plan, pot = solve_exact(C, mu, nu)
            probe = uniqueness_probe(C, mu, nu, plan, pot, settings.lp_tolerance)
            split = map_from_plan(probe.averaged, mu, nu).split if probe.averaged is not None else {}
            checks.append(CertificateReport.of("tie_detected_as_split", len(split) == mu.size, {"split_rows": len(split)}))
        if lag.kind == LagrangianKind.POWER_METRIC:
            checks.extend(self._map_consistency(model, rng, 40 if full else 12))
        if isinstance(manifold, EuclideanSpace) and not isinstance(manifold, FlatTorus) and manifold.dim == 1:
            checks.append(self._rearrangement(model, 500 if full else 50))
        return checks

    def _map_consistency(self, model: TransportModel, rng: np.random.Generator, size: int) -> list[CertificateReport]:
        lag, manifold, settings, t = model.lag, model.manifold, model.settings, model.t
        mu = DiscreteMeasure.on(manifold, sample_points(manifold, rng, size))
        nu = DiscreteMeasure.on(manifold, sample_points(manifold, rng, size))
        C = pairwise_costs(lag, mu.support, nu.support, t, settings)
        _, pot = solve_exact(C, mu, nu)
        try:
            flow_map = extract_potential_map(lag, t, pot.psi, mu, nu, settings)
        except AmbiguityError as e:
            return [_failure("map_formula_consistency", e)]
        closed = extract_dr_map(lag, t, mu, flow_map.gradients)
        agreement = float(np.max(manifold.dist_coords(flow_map.images, closed.images)))
        law = float(np.max(gradient_law_residuals(lag, t, flow_map, settings)))
        transport = float(np.max(calibration_transport_residuals(flow_map, pot, C)))
        return [
            CertificateReport.of("map_formula_consistency", agreement <= 1e-5, {"max_distance": agreement}),
            CertificateReport.of("gradient_law", law <= 1e-5, {"max_residual": law}),
            CertificateReport.of("calibration_transport", transport <= 1e-8, {"max_residual": transport}),
            CertificateReport.of(
                "flow_reconstruction", float(np.max(flow_map.residuals)) <= 1e-5, {"max_residual": float(np.max(flow_map.residuals))}
            ),
        ]

    def _rearrangement(self, model: TransportModel, n: int) -> CertificateReport:
        lag, settings, t = model.lag, model.settings, model.t
        grid = (np.arange(n) + 0.5) / n
        mu = DiscreteMeasure.on(lag.manifold, grid[:, None])
        nu = DiscreteMeasure.on(lag.manifold, 1.0 + grid[:, None])
        C = pairwise_costs(lag, mu.support, nu.support, t, settings)
        _, pot = solve_exact(C, mu, nu)
        monge = extract_potential_map(lag, t, pot.psi, mu, nu, settings)
        error = float(np.mean(np.abs(monge.images[:, 0] - (grid + 1.0))))
        monotone = is_monotone_1d(monge)
        return CertificateReport.of("rearrangement_1d", error <= 1e-3 and monotone, {"mean_abs_error": error}, {"monotone": monotone})


verification_service = VerificationService()