"""Two-point action minimization and the induced cost c_t(x, y).

Minimizers are found by shooting on the initial velocity through the
Euler-Lagrange flow (Levenberg-Marquardt on the endpoint residual) from every
homotopy seed of the manifold.  When no seed converges, the discretized action is
minimized directly over interior nodes and the result is used to reseed
the shooting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.integrate import simpson
from scipy.optimize import minimize as scipy_minimize
from scipy.optimize import root

from app.errors import AmbiguityError, ConfigError, ConvergenceError, DomainError, InputError, NumericalError
from app.lagrangian import Cotangent, LagrangianModel, flow_hamiltonian_coords, flow_lagrangian_coords
from app.manifold import FlatTorus, ManifoldModel, Point, RoundSphere
from app.models import CertificateReport, CostMethod, LagrangianKind, SolverSettings

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS = SolverSettings()
ENERGY_SPREAD_TOLERANCE = 1e-6
SEED_FAILURES = (NumericalError, DomainError, AmbiguityError, np.linalg.LinAlgError, FloatingPointError)


@dataclass(frozen=True)
class CostQuery:
    x: Point
    y: Point
    t: float

    def __post_init__(self) -> None:
        if not self.t > 0:
            raise InputError("cost queries need t > 0", t=self.t)
        if self.x.dim != self.y.dim:
            raise InputError("endpoints of a cost query must have the same dimension")


@dataclass(frozen=True, eq=False)
class Curve:
    """Discretized path with positions and velocities per time node.

    Positions are unwrapped chart coordinates, so on the torus the last node
    is the lift of the target the curve actually reaches.
    """

    manifold: ManifoldModel
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    action: float
    method: str = "shooting"
    residual: float = 0.0
    ambiguous: bool = False
    energy_spread: float = 0.0

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    @property
    def points(self) -> list[Point]:
        return [self.manifold.point(x) for x in self.positions]

    @property
    def start(self) -> Point:
        return self.manifold.point(self.positions[0])

    @property
    def end(self) -> Point:
        return self.manifold.point(self.positions[-1])

    def speeds(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.manifold.sq_norm(self.positions, self.velocities), 0.0))


@dataclass
class _Seed:
    target: np.ndarray
    velocity: np.ndarray
    label: str


@dataclass
class _Shot:
    seed: _Seed
    velocity: np.ndarray
    residual: float
    iterations: int = 0


def _seeds(lag: LagrangianModel, x: np.ndarray, y: np.ndarray, t: float) -> list[_Seed]:
    manifold = lag.manifold
    if isinstance(manifold, FlatTorus):
        lifts = manifold.lifts(x, y)
        lengths = np.linalg.norm(lifts - x, axis=-1)
        if lag.power is not None:
            # power costs on the flat torus increase with the lift length
            lifts = lifts[lengths <= lengths[0] * (1.0 + 1e-6) + 1e-9]
        return [_Seed(lift, (lift - x) / t, f"lift{k}") for k, lift in enumerate(lifts)]
    if isinstance(manifold, RoundSphere):
        if manifold.antipodal(x, y):
            chart_speed = np.pi * manifold.radius / t / np.sqrt(manifold.conformal_factor(x))
            return [
                _Seed(y, sign * chart_speed * np.eye(2)[axis], f"antipodal{axis}{'+' if sign > 0 else '-'}")
                for axis in (0, 1)
                for sign in (1.0, -1.0)
            ]
        log = manifold.log_coords(x, y)
        seeds = [_Seed(y, log / t, "short_arc")]
        d = float(manifold.dist_coords(x, y))
        if d > 0:
            seeds.append(_Seed(y, -log * (manifold.great_circle_length() - d) / d / t, "long_arc"))
        return seeds
    return [_Seed(y, manifold.log_coords(x, y) / t, "geodesic")]


def _shoot(lag: LagrangianModel, x: np.ndarray, seed: _Seed, t: float, settings: SolverSettings) -> _Shot:
    """Levenberg-Marquardt on v -> end(x, v) - target; the Jacobian comes from one batched flow"""
    n = x.shape[-1]
    steps = settings.steps_for(t)

    def endpoint_residual(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = 1e-7 * (1.0 + np.linalg.norm(v))
        batch = np.vstack([v, v + h * np.eye(n)])
        ends, _ = flow_lagrangian_coords(lag, np.broadcast_to(x, batch.shape), batch, t, steps)
        return ends[0] - seed.target, (ends[1:] - ends[0]).T / h

    solution = root(
        endpoint_residual,
        np.array(seed.velocity, dtype=float),
        method="lm",
        jac=True,
        tol=0.1 * settings.shooting_tolerance,
        options={"maxiter": settings.shooting_max_iter * (n + 1)},
    )
    residual = float(np.linalg.norm(solution.fun))
    logger.debug("shooting %s: residual %.3e after %d evaluations", seed.label, residual, solution.nfev)
    return _Shot(seed, np.asarray(solution.x, dtype=float), residual, int(solution.nfev))


def _trace(lag: LagrangianModel, x: np.ndarray, v: np.ndarray, t: float, settings: SolverSettings, **meta) -> Curve:
    steps = settings.steps_for(t)
    positions, momenta = flow_hamiltonian_coords(lag, x, lag.dv(x, v), t, steps, record=True)
    velocities = lag.velocity(positions, momenta)
    times = np.linspace(0.0, t, steps + 1)
    action = float(simpson(lag.value(positions, velocities), x=times))
    energies = lag.energy_coords(positions, velocities)
    spread = float((np.max(energies) - np.min(energies)) / max(abs(float(energies[0])), 1e-300))
    if np.all(energies == 0):
        spread = 0.0
    return Curve(lag.manifold, times, positions, velocities, action, energy_spread=spread, **meta)


def _constant_curve(lag: LagrangianModel, x: np.ndarray, t: float, settings: SolverSettings) -> Curve:
    steps = settings.steps_for(t)
    positions = np.repeat(x[None, :], steps + 1, axis=0)
    velocities = np.zeros_like(positions)
    action = float(t * lag.value(x, np.zeros_like(x)))
    return Curve(lag.manifold, np.linspace(0.0, t, steps + 1), positions, velocities, action)


def _discrete_action(lag: LagrangianModel, x: np.ndarray, target: np.ndarray, t: float, nodes: int):
    n = x.shape[-1]
    h = t / nodes

    def fun(interior: np.ndarray) -> tuple[float, np.ndarray]:
        path = np.vstack([x, interior.reshape(nodes - 1, n), target])
        mid = 0.5 * (path[1:] + path[:-1])
        vel = (path[1:] - path[:-1]) / h
        values = lag.value(mid, vel)
        dx = lag.dx(mid, vel)
        dv = lag.dv(mid, vel)
        grad = np.zeros_like(path)
        grad[:-1] += 0.5 * h * dx - dv
        grad[1:] += 0.5 * h * dx + dv
        return float(h * np.sum(values)), grad[1:-1].reshape(-1)

    return fun


def _initial_path(manifold: ManifoldModel, x: np.ndarray, target: np.ndarray, nodes: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, nodes + 1)[1:-1, None]
    if manifold.is_flat:
        return x + s * (target - x)
    try:
        return manifold.exp_coords(np.broadcast_to(x, (len(s), x.shape[-1])), s * manifold.log_coords(x, target))
    except SEED_FAILURES:
        return x + s * (target - x)


def _direct(lag: LagrangianModel, x: np.ndarray, seed: _Seed, t: float, settings: SolverSettings) -> _Shot:
    nodes = settings.direct_nodes
    fun = _discrete_action(lag, x, seed.target, t, nodes)
    start = _initial_path(lag.manifold, x, seed.target, nodes)
    result = scipy_minimize(fun, start.reshape(-1), jac=True, method="L-BFGS-B", options={"maxiter": 2000})
    logger.debug("direct action minimization: success=%s, action=%.6g", result.success, result.fun)
    first_node = result.x.reshape(nodes - 1, -1)[0]
    reseed = _Seed(seed.target, (first_node - x) / (t / nodes), f"direct:{seed.label}")
    return _shoot(lag, x, reseed, t, settings)


def minimize(lag: LagrangianModel, q: CostQuery, settings: SolverSettings = DEFAULT_SETTINGS) -> Curve:
    manifold = lag.manifold
    x = manifold.point(q.x.coords).coords
    y = manifold.point(q.y.coords).coords
    if lag.kind == LagrangianKind.POWER_METRIC and float(manifold.dist_coords(x, y)) == 0.0:
        return _constant_curve(lag, x, q.t, settings)

    seeds = _seeds(lag, x, y, q.t)
    shots: list[_Shot] = []
    best_residual = np.inf
    for seed in seeds:
        try:
            shot = _shoot(lag, x, seed, q.t, settings)
        except SEED_FAILURES as e:
            logger.debug("seed %s failed: %s", seed.label, e)
            continue
        best_residual = min(best_residual, shot.residual)
        if shot.residual <= settings.shooting_tolerance:
            shots.append(shot)

    method = "shooting"
    if not shots:
        logger.debug("shooting failed from all %d seeds, minimizing the discrete action", len(seeds))
        method = "direct"
        for seed in seeds:
            try:
                shot = _direct(lag, x, seed, q.t, settings)
            except SEED_FAILURES as e:
                logger.debug("direct fallback from %s failed: %s", seed.label, e)
                continue
            best_residual = min(best_residual, shot.residual)
            if shot.residual <= settings.shooting_tolerance:
                shots.append(shot)
                break
    if not shots:
        raise ConvergenceError("shooting and direct minimization failed", residual=float(best_residual))

    curves = []
    for shot in shots:
        try:
            curves.append(_trace(lag, x, shot.velocity, q.t, settings, method=method, residual=shot.residual))
        except SEED_FAILURES as e:
            logger.debug("tracing %s failed: %s", shot.seed.label, e)
    if not curves:
        raise ConvergenceError("no converged shot could be traced", residual=float(best_residual))
    curves.sort(key=lambda curve: curve.action)
    best = curves[0]

    ambiguous = False
    middle = len(best.times) // 2
    for other in curves[1:]:
        close = other.action - best.action <= settings.ambiguity_tolerance * (1.0 + abs(best.action))
        apart = float(manifold.dist_coords(other.positions[middle], best.positions[middle])) > 1e-6
        if close and apart:
            ambiguous = True
            logger.warning("ambiguous minimizer between %s and %s (cut locus)", x.tolist(), y.tolist())
            break
    if best.energy_spread > ENERGY_SPREAD_TOLERANCE:
        logger.warning("energy spread %.3e along accepted minimizer", best.energy_spread)
    if ambiguous:
        best = replace(best, ambiguous=True)
    return best


def cost(lag: LagrangianModel, q: CostQuery, settings: SolverSettings = DEFAULT_SETTINGS) -> float:
    return minimize(lag, q, settings).action


def curve_superdifferential(lag: LagrangianModel, curve: Curve) -> tuple[Cotangent, Cotangent]:
    px = -lag.dv(curve.positions[0], curve.velocities[0])
    py = lag.dv(curve.positions[-1], curve.velocities[-1])
    return Cotangent(curve.start, px), Cotangent(curve.end, py)


def cost_superdifferential(
    lag: LagrangianModel, q: CostQuery, settings: SolverSettings = DEFAULT_SETTINGS
) -> tuple[Cotangent, Cotangent]:
    return curve_superdifferential(lag, minimize(lag, q, settings))


# closed forms for L = |v|^r -----------------------------------------------------


def _require_power(lag: LagrangianModel) -> float:
    if lag.power is None:
        raise ConfigError("closed forms exist for power_metric lagrangians only", key="solver.cost_method")
    return lag.power


def closed_form_cost(lag: LagrangianModel, x: Point, y: Point, t: float) -> float:
    """c_t(x,y) = t^(1-r) d(x,y)^r"""
    r = _require_power(lag)
    return float(t ** (1.0 - r) * lag.manifold.dist(x, y) ** r)


def closed_form_superdifferential(lag: LagrangianModel, x: Point, y: Point, t: float) -> tuple[Cotangent, Cotangent]:
    _require_power(lag)
    manifold = lag.manifold
    px = -lag.dv(x.coords, manifold.log_coords(x.coords, y.coords) / t)
    py = lag.dv(y.coords, -manifold.log_coords(y.coords, x.coords) / t)
    return Cotangent(x, px), Cotangent(y, py)


def resolve_cost_method(lag: LagrangianModel, settings: SolverSettings) -> CostMethod:
    if settings.cost_method == CostMethod.AUTO:
        return CostMethod.CLOSED_FORM if lag.power is not None else CostMethod.BVP
    if settings.cost_method == CostMethod.CLOSED_FORM:
        _require_power(lag)
    return settings.cost_method


def pairwise_costs_flagged(
    lag: LagrangianModel, X: np.ndarray, Y: np.ndarray, t: float, settings: SolverSettings = DEFAULT_SETTINGS
) -> tuple[np.ndarray, np.ndarray]:
    """Cost matrix plus the mask of AMBIGUOUS pairs (more than one minimizer)"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if resolve_cost_method(lag, settings) == CostMethod.CLOSED_FORM:
        r = _require_power(lag)
        C = t ** (1.0 - r) * lag.manifold.pairwise_dist(X, Y) ** r
        return C, lag.manifold.cut_locus(X[:, None, :], Y[None, :, :])
    C = np.empty((len(X), len(Y)))
    ambiguous = np.zeros((len(X), len(Y)), dtype=bool)
    for i, x in enumerate(X):
        for j, y in enumerate(Y):
            query = CostQuery(Point(x), Point(y), t)
            try:
                curve = minimize(lag, query, settings)
            except ConvergenceError as e:
                raise ConvergenceError(e.message, residual=e.residual, index=(i, j))
            C[i, j] = curve.action
            ambiguous[i, j] = curve.ambiguous
    return C, ambiguous


def pairwise_costs(
    lag: LagrangianModel, X: np.ndarray, Y: np.ndarray, t: float, settings: SolverSettings = DEFAULT_SETTINGS
) -> np.ndarray:
    return pairwise_costs_flagged(lag, X, Y, t, settings)[0]


def rowwise_costs(
    lag: LagrangianModel, X: np.ndarray, Y: np.ndarray, t: float, settings: SolverSettings = DEFAULT_SETTINGS
) -> np.ndarray:
    """c_t(X[i], Y[i]) for paired rows"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if resolve_cost_method(lag, settings) == CostMethod.CLOSED_FORM:
        r = _require_power(lag)
        return t ** (1.0 - r) * lag.manifold.dist_coords(X, Y) ** r
    return np.array([cost(lag, CostQuery(Point(x), Point(y), t), settings) for x, y in zip(X, Y)])


def _refuse_ambiguous(ambiguous: np.ndarray) -> None:
    if np.any(ambiguous):
        rows = np.nonzero(ambiguous)[0]
        raise AmbiguityError(
            "minimizer is not unique (cut locus)", atoms=rows[:20].tolist(), count=int(len(rows))
        )


def rowwise_superdifferential_x(
    lag: LagrangianModel,
    X: np.ndarray,
    Y: np.ndarray,
    t: float,
    settings: SolverSettings = DEFAULT_SETTINGS,
    strict: bool = False,
) -> np.ndarray:
    """dc/dx(X[i], Y[i]) for paired rows; with strict, rows on the cut locus raise AmbiguityError"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if resolve_cost_method(lag, settings) == CostMethod.CLOSED_FORM:
        if strict:
            _refuse_ambiguous(lag.manifold.cut_locus(X, Y))
        return -lag.dv(X, lag.manifold.log_coords(X, Y) / t)
    curves = [minimize(lag, CostQuery(Point(x), Point(y), t), settings) for x, y in zip(X, Y)]
    if strict:
        _refuse_ambiguous(np.array([curve.ambiguous for curve in curves]))
    return np.array([curve_superdifferential(lag, curve)[0].components for curve in curves])


# probes ---------------------------------------------------------------------------


def twist_probe(
    lag: LagrangianModel,
    x: Point,
    ys: Sequence[Point],
    t: float,
    settings: SolverSettings = DEFAULT_SETTINGS,
    margin: float = 1e-6,
) -> CertificateReport:
    """Injectivity of y -> dc/dx(x, y) and reconstruction of y from that covector"""
    manifold = lag.manifold
    gradients = []
    reconstruction = 0.0
    for y in ys:
        grad_x, _ = cost_superdifferential(lag, CostQuery(x, y, t), settings)
        gradients.append(grad_x.components)
        v0 = lag.velocity(x.coords, -grad_x.components)
        end, _ = flow_lagrangian_coords(lag, x.coords, v0, t, settings.steps_for(t))
        reconstruction = max(reconstruction, float(manifold.dist_coords(manifold.canonicalize(end), y.coords)))
    G = np.array(gradients)
    separation = np.inf
    if len(G) > 1:
        differences = np.linalg.norm(G[:, None, :] - G[None, :, :], axis=-1)
        separation = float(np.min(differences[np.triu_indices(len(G), k=1)]))
    passed = separation > margin and reconstruction <= 1e-6
    return CertificateReport.of(
        "twist_probe",
        passed,
        {"min_gradient_separation": separation if np.isfinite(separation) else 0.0, "reconstruction": reconstruction},
        {"targets": len(ys), "gradients": G.tolist()},
    )


def speed_bound_probe(
    lag: LagrangianModel,
    K: Sequence[Point],
    t: float,
    trials: int,
    rng: np.random.Generator,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> CertificateReport:
    """Uniform speed bound of minimizers with endpoints in K, checked for saturation under doubling"""
    if not K:
        raise InputError("speed_bound_probe needs a non-empty set K")
    count = len(K)
    if count * count <= trials:
        pairs = [(i, j) for i in range(count) for j in range(count)]
        half = len(pairs)
    else:
        pairs = [tuple(pair) for pair in rng.integers(0, count, size=(2 * trials, 2))]
        half = trials
    speeds = []
    for i, j in pairs:
        curve = minimize(lag, CostQuery(K[i], K[j], t), settings)
        speeds.append(float(np.max(curve.speeds())))
    bound_half = max(speeds[:half])
    bound = max(speeds)
    passed = bool(np.isfinite(bound)) and bound <= 1.1 * bound_half + 1e-12
    return CertificateReport.of(
        "speed_bound_probe", passed, {"bound": bound, "bound_half": bound_half}, {"pairs": len(pairs)}
    )


def pair_cost(lag: LagrangianModel, x: Point, y: Point, t: float, settings: SolverSettings = DEFAULT_SETTINGS) -> float:
    return float(rowwise_costs(lag, x.coords, y.coords, t, settings)[0])


def semigroup_probe(
    lag: LagrangianModel,
    x: Point,
    z: Point,
    t: float,
    s: float,
    ys: Sequence[Point],
    settings: SolverSettings = DEFAULT_SETTINGS,
    tol: float = 1e-6,
) -> CertificateReport:
    """c_t(x,z) <= c_s(x,y) + c_{t-s}(y,z) for probed y, with equality at y = gamma(s)"""
    if not 0 < s < t:
        raise InputError("semigroup_probe needs 0 < s < t", s=s, t=t)
    total = pair_cost(lag, x, z, t, settings)
    curve = minimize(lag, CostQuery(x, z, t), settings)
    middle, _ = flow_lagrangian_coords(lag, curve.positions[0], curve.velocities[0], s, settings.steps_for(s))
    y_mid = lag.manifold.point(middle)
    scale = 1.0 + abs(total)
    worst = -np.inf
    for y in ys:
        split = pair_cost(lag, x, y, s, settings) + pair_cost(lag, y, z, t - s, settings)
        worst = max(worst, (total - split) / scale)
    equality = abs(total - pair_cost(lag, x, y_mid, s, settings) - pair_cost(lag, y_mid, z, t - s, settings)) / scale
    worst = float(max(worst, 0.0)) if ys else 0.0
    return CertificateReport.of(
        "semigroup_probe",
        worst <= tol and equality <= tol,
        {"inequality_excess": worst, "equality_residual": float(equality)},
        {"s": s, "t": t, "probes": len(ys)},
    )


def exponent_pin(
    lag: LagrangianModel,
    pairs: Sequence[tuple[Point, Point]],
    t: float,
    settings: SolverSettings = DEFAULT_SETTINGS,
    tol: float = 1e-5,
) -> CertificateReport:
    """Boundary-value costs against t^(1-r) d^r (must agree) and t^(r-1) d^r (must differ unless t = 1)"""
    r = _require_power(lag)
    proof_excess = 0.0
    statement_excess = np.inf
    ratios = []
    for x, y in pairs:
        value = cost(lag, CostQuery(x, y, t), settings)
        d = lag.manifold.dist(x, y)
        proof_form = t ** (1.0 - r) * d**r
        statement_form = t ** (r - 1.0) * d**r
        proof_excess = max(proof_excess, abs(value - proof_form) / (1.0 + abs(value)))
        if d > 1e-6:
            statement_excess = min(statement_excess, abs(value - statement_form) / (1.0 + abs(value)))
            ratios.append(statement_form / value)
    proof_ok = proof_excess <= tol
    statement_ok = bool(np.isfinite(statement_excess)) and statement_excess <= tol
    passed = proof_ok and (t == 1.0 or not statement_ok)
    return CertificateReport.of(
        "exponent_pin",
        passed,
        {
            "proof_form_excess": proof_excess,
            "statement_form_min_excess": statement_excess if np.isfinite(statement_excess) else 0.0,
            "statement_to_cost_ratio": float(np.median(ratios)) if ratios else 1.0,
        },
        {"r": r, "t": t, "proof_form": "PASS" if proof_ok else "FAIL", "statement_form": "PASS" if statement_ok else "FAIL"},
    )
