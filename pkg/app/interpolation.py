"""Displacement interpolation: intermediate maps T_s along the minimizers and their checks.

Atoms of mu_s are the exact flow images of the mu_0 atoms, so no
re-gridding happens between times.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from app.errors import ConfigError, NumericalError
from app.kantorovich import DiscreteMeasure, TransportPlan, relative_gap, solve_exact, within_relative
from app.lagrangian import LagrangianModel, flow_hamiltonian_coords
from app.minimizer import pairwise_costs, rowwise_costs
from app.monge import MongeMap, extract_potential_map
from app.models import CertificateReport, MapMethod, SolverSettings
from app.semiconcave import stable_lipschitz

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS = SolverSettings()
IDENTITY_TOLERANCE = 1e-6


@dataclass(eq=False)
class InterpolationPath:
    """Per-atom trajectories sampled on s_grid; positions[k] holds T_{s_k} of every mu_0 atom"""

    lag: LagrangianModel
    t: float
    source: DiscreteMeasure
    terminal: MongeMap
    s_grid: np.ndarray
    positions: np.ndarray
    energies: np.ndarray
    settings: SolverSettings = field(default_factory=SolverSettings)

    def index_of(self, s: float) -> int:
        matches = np.nonzero(np.abs(self.s_grid - s) <= 1e-12 * max(1.0, self.t))[0]
        if len(matches) == 0:
            raise ConfigError(f"s={s} is not on the interpolation grid", key="s")
        return int(matches[0])

    def images(self, s: float) -> np.ndarray:
        return self.positions[self.index_of(s)]

    def map_at(self, s: float) -> MongeMap:
        return MongeMap(self.source.support.copy(), self.images(s), MapMethod.POTENTIAL_FLOW, np.zeros(self.source.size))

    def measure_at(self, s: float) -> DiscreteMeasure:
        return DiscreteMeasure(self.images(s), self.source.weights)

    @property
    def maps(self) -> list[MongeMap]:
        return [self.map_at(float(s)) for s in self.s_grid]

    @property
    def measures(self) -> list[DiscreteMeasure]:
        return [self.measure_at(float(s)) for s in self.s_grid]


def _validate_grid(s_grid, t: float) -> np.ndarray:
    grid = np.asarray(sorted(float(s) for s in s_grid))
    if len(grid) == 0:
        raise ConfigError("interpolation needs at least one time", key="s")
    if grid[0] < 0 or grid[-1] > t:
        raise ConfigError(f"interpolation times must lie in [0, {t}]", key="s")
    return grid


def build_path(
    lag: LagrangianModel,
    t: float,
    mu0: DiscreteMeasure,
    terminal: MongeMap,
    s_grid,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> InterpolationPath:
    if terminal.gradients is None:
        raise ConfigError("interpolation needs a terminal map with potential gradients", key="terminal")
    grid = _validate_grid(s_grid, t)
    manifold = lag.manifold
    steps = settings.steps_for(t)
    try:
        X, P = flow_hamiltonian_coords(lag, mu0.support, terminal.gradients, t, steps, record=True)
    except NumericalError as e:
        raise NumericalError(f"interpolation flow failed: {e.message}", **e.details())
    node_times = np.linspace(0.0, t, steps + 1)
    positions = []
    for s in grid:
        k = int(np.searchsorted(node_times, s - 1e-12 * max(1.0, t)))
        if k <= steps and abs(node_times[k] - s) <= 1e-12 * max(1.0, t):
            state = X[k]
        else:
            # off the integrator grid: integrate up to s directly
            state, _ = flow_hamiltonian_coords(lag, mu0.support, terminal.gradients, float(s), settings.steps_for(s))
        positions.append(manifold.canonicalize(state))
    positions_arr = np.stack(positions)
    positions_arr[grid == 0] = mu0.support
    energies = lag.energy_coords(X, lag.velocity(X, P))
    logger.info("built interpolation path for %d atoms on %d times", mu0.size, len(grid))
    return InterpolationPath(lag, t, mu0, terminal, grid, positions_arr, energies, settings)


def path_from_potential(
    lag: LagrangianModel,
    t: float,
    mu0: DiscreteMeasure,
    nu: DiscreteMeasure,
    s_grid,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> InterpolationPath:
    """Solve (mu0, nu), extract the potential map and build the path in one go"""
    C = pairwise_costs(lag, mu0.support, nu.support, t, settings)
    _, pot = solve_exact(C, mu0, nu)
    terminal = extract_potential_map(lag, t, pot.psi, mu0, nu, settings)
    return build_path(lag, t, mu0, terminal, s_grid, settings)


def _costs(path: InterpolationPath, X: np.ndarray, Y: np.ndarray, duration: float) -> np.ndarray:
    if duration <= 0:
        return np.zeros(len(X))
    return rowwise_costs(path.lag, X, Y, duration, path.settings)


def verify_restriction_identity(path: InterpolationPath, s: float) -> CertificateReport:
    """c_t(x, T_t x) = c_s(x, T_s x) + c_{t-s}(T_s x, T_t x) per atom"""
    X = path.source.support
    Ts = path.images(s)
    Tt = path.terminal.images
    total = _costs(path, X, Tt, path.t)
    first = _costs(path, X, Ts, s)
    second = _costs(path, Ts, Tt, path.t - s)
    residual = np.abs(total - first - second) / (1.0 + np.abs(total))
    worst = float(np.max(residual))
    return CertificateReport.of("restriction_identity", worst <= 1e-6, {"max_residual": worst}, {"s": s})


def _plan_pairs_identity(plan: TransportPlan, weights: np.ndarray) -> bool:
    # every source i ships all of its mass to atom i of the interpolated measure
    dense = plan.dense()
    return bool(np.allclose(np.diag(dense), weights, atol=1e-10))


def verify_midpoint_optimality(path: InterpolationPath, s: float) -> CertificateReport:
    """(mu_0, mu_s) is optimally coupled by x -> T_s(x) for the cost c_s"""
    if not 0 < s < path.t:
        raise ConfigError("midpoint optimality is checked at interior times", key="s")
    mu_s = path.measure_at(s)
    C = pairwise_costs(path.lag, path.source.support, mu_s.support, s, path.settings)
    plan, _ = solve_exact(C, path.source, mu_s)
    optimum = plan.cost(C)
    pairing = float(np.dot(np.diag(C), path.source.weights))
    pairs = _plan_pairs_identity(plan, path.source.weights)
    agree = within_relative(optimum, pairing, 1e-6)
    return CertificateReport.of(
        "midpoint_optimality",
        agree and pairs,
        {"lp_optimum": optimum, "pairing_cost": pairing, "relative_gap": relative_gap(optimum, pairing)},
        {"s": s, "plan_is_pairing": pairs},
    )


def _nearest_spacing(manifold, X: np.ndarray) -> np.ndarray:
    distances = manifold.pairwise_dist(X, X)
    np.fill_diagonal(distances, np.inf)
    return np.min(distances, axis=1)


def _subsample(path: InterpolationPath, rng_seed: int = 0) -> np.ndarray:
    n = path.source.size
    limit = path.settings.lipschitz_subsample
    if n <= limit:
        return np.arange(n)
    return np.sort(np.random.default_rng(rng_seed).choice(n, size=limit, replace=False))


def verify_injectivity_and_inverse(path: InterpolationPath, s: float) -> CertificateReport:
    """T_s is injective with a stable empirical Lipschitz inverse, and so is T_t o T_s^-1"""
    if not 0 < s < path.t:
        raise ConfigError("injectivity is checked at interior times", key="s")
    manifold = path.lag.manifold
    X = path.source.support
    Ts = path.images(s)
    Tt = path.terminal.images
    spacing = _nearest_spacing(manifold, Ts)
    min_spacing = float(np.min(spacing)) if len(spacing) else np.inf
    collisions = np.nonzero(spacing <= 1e-12)[0].tolist()

    keep = _subsample(path)
    inverse, inverse_half, inverse_stable = stable_lipschitz(Ts[keep], X[keep])
    composed, composed_half, composed_stable = stable_lipschitz(Ts[keep], Tt[keep])
    source_spacing = _nearest_spacing(manifold, X)
    ratio = float(np.min(spacing / source_spacing)) if len(spacing) > 1 else 1.0

    passed = not collisions and inverse_stable and composed_stable
    return CertificateReport.of(
        "injectivity_and_inverse",
        passed,
        {
            "min_image_spacing": min_spacing if np.isfinite(min_spacing) else 0.0,
            "inverse_lipschitz": inverse,
            "inverse_lipschitz_half": inverse_half,
            "composed_lipschitz": composed,
            "composed_lipschitz_half": composed_half,
        },
        {"s": s, "collisions": collisions, "spacing_ratio": ratio},
    )


def verify_cost_additivity(path: InterpolationPath, s: float) -> CertificateReport:
    """LP(mu_0, mu_s; c_s) + LP(mu_s, mu_t; c_{t-s}) = LP(mu_0, mu_t; c_t), with mu_s -> mu_t paired by T_t o T_s^-1"""
    if not 0 < s < path.t:
        raise ConfigError("cost additivity is checked at interior times", key="s")
    mu0 = path.source
    mu_s = path.measure_at(s)
    mu_t = DiscreteMeasure(path.terminal.images, mu0.weights)
    C_first = pairwise_costs(path.lag, mu0.support, mu_s.support, s, path.settings)
    C_second = pairwise_costs(path.lag, mu_s.support, mu_t.support, path.t - s, path.settings)
    C_total = pairwise_costs(path.lag, mu0.support, mu_t.support, path.t, path.settings)
    first_plan, _ = solve_exact(C_first, mu0, mu_s)
    second_plan, _ = solve_exact(C_second, mu_s, mu_t)
    total_plan, _ = solve_exact(C_total, mu0, mu_t)
    split = first_plan.cost(C_first) + second_plan.cost(C_second)
    total = total_plan.cost(C_total)
    pairs = _plan_pairs_identity(second_plan, mu0.weights)
    return CertificateReport.of(
        "cost_additivity",
        within_relative(split, total, 1e-6) and pairs,
        {"split_cost": split, "total_cost": total, "relative_gap": relative_gap(split, total)},
        {"s": s, "second_leg_is_pairing": pairs},
    )


def verify_reversed_optimality(path: InterpolationPath, s: float) -> CertificateReport:
    """(mu_s, mu_0) with the reversed cost c_s(y, x) is solved by the inverse pairing at equal value"""
    if not 0 < s <= path.t:
        raise ConfigError("reversed optimality needs 0 < s <= t", key="s")
    mu_s = path.measure_at(s)
    forward = pairwise_costs(path.lag, path.source.support, mu_s.support, s, path.settings)
    reversed_cost = forward.T.copy()
    forward_plan, _ = solve_exact(forward, path.source, mu_s)
    reversed_plan, _ = solve_exact(reversed_cost, mu_s, path.source)
    forward_value = forward_plan.cost(forward)
    reversed_value = reversed_plan.cost(reversed_cost)
    pairs = _plan_pairs_identity(reversed_plan, path.source.weights)
    return CertificateReport.of(
        "reversed_optimality",
        within_relative(forward_value, reversed_value, 1e-6) and pairs,
        {"forward": forward_value, "reversed": reversed_value},
        {"s": s, "inverse_pairing": pairs},
    )


def verify_endpoint_consistency(path: InterpolationPath) -> CertificateReport:
    """T_0 is the identity and T_t reproduces the terminal images"""
    manifold = path.lag.manifold
    start = path.positions[0] if path.s_grid[0] == 0 else path.source.support
    identity = float(np.max(manifold.dist_coords(start, path.source.support)))
    X, _ = flow_hamiltonian_coords(
        path.lag, path.source.support, path.terminal.gradients, path.t, path.settings.steps_for(path.t)
    )
    terminal = float(np.max(manifold.dist_coords(manifold.canonicalize(X), path.terminal.images)))
    return CertificateReport.of(
        "endpoint_consistency",
        identity <= 1e-12 and terminal <= IDENTITY_TOLERANCE,
        {"identity": identity, "terminal": terminal},
    )


def curve_energy_spreads(path: InterpolationPath) -> np.ndarray:
    """Relative energy spread along each interpolating curve"""
    E = path.energies
    reference = np.maximum(np.abs(E[0]), 1e-300)
    spreads = (np.max(E, axis=0) - np.min(E, axis=0)) / reference
    return np.where(np.all(E == 0, axis=0), 0.0, spreads)


def energy_report(path: InterpolationPath, tol: float = 1e-6) -> CertificateReport:
    spreads = curve_energy_spreads(path)
    worst = float(np.max(spreads))
    return CertificateReport.of("curve_energy", worst <= tol, {"max_relative_spread": worst})
