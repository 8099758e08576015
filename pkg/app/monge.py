"""Monge maps read off plans, reconstructed from potentials, and the closed-form d^r map"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.errors import AmbiguityError, InputError, NumericalError
from app.kantorovich import (
    DiscreteMeasure,
    DualPotentials,
    TransportPlan,
    c_transform_all,
    relative_gap,
    solve_exact,
    within_relative,
)
from app.lagrangian import Cotangent, LagrangianModel, flow_hamiltonian_coords
from app.manifold import ManifoldModel, Point
from app.minimizer import pairwise_costs, rowwise_costs, rowwise_superdifferential_x
from app.models import CertificateReport, MapMethod, SolverSettings

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS = SolverSettings()
RECONSTRUCTION_TOLERANCE = 1e-5


@dataclass(eq=False)
class MongeMap:
    sources: np.ndarray
    images: np.ndarray
    method: MapMethod
    residuals: np.ndarray
    targets: Optional[np.ndarray] = None
    gradients: Optional[np.ndarray] = None
    split: dict[int, list[tuple[int, float]]] = field(default_factory=dict)
    critical: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(len(self.sources))

    def image_of(self, i: int) -> Point:
        return Point(self.images[i])


def map_from_plan(plan: TransportPlan, mu: DiscreteMeasure, nu: DiscreteMeasure) -> MongeMap:
    """Rows with one nonzero map to that atom; rows with several are SPLIT and keep their heaviest target"""
    targets = np.zeros(mu.size, dtype=int)
    split: dict[int, list[tuple[int, float]]] = {}
    for i in range(mu.size):
        row = plan.rows == i
        cols, masses = plan.cols[row], plan.masses[row]
        order = np.lexsort((cols, -masses))
        targets[i] = cols[order[0]]
        if len(cols) > 1:
            split[i] = [(int(j), float(m)) for j, m in zip(cols[order], masses[order])]
    if split:
        logger.warning("plan splits mass on %d of %d rows", len(split), mu.size)
    return MongeMap(
        sources=mu.support.copy(),
        images=nu.support[targets].copy(),
        method=MapMethod.PLAN_GRAPH,
        residuals=np.zeros(mu.size),
        targets=targets,
        split=split,
    )


def map_from_potential(
    lag: LagrangianModel,
    t: float,
    psi: np.ndarray,
    x: Point,
    nu: DiscreteMeasure,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> tuple[Point, Cotangent]:
    """Image of x under the Hamiltonian flow of (x, d_x phi) for the c-transform potential phi"""
    mu = DiscreteMeasure(x.coords[None, :], np.ones(1))
    extracted = extract_potential_map(lag, t, psi, mu, nu, settings)
    if extracted.residuals[0] > RECONSTRUCTION_TOLERANCE:
        raise NumericalError(
            "flow reconstruction missed the c-transform argmax", residual=float(extracted.residuals[0])
        )
    return lag.manifold.point(extracted.images[0]), Cotangent(x, extracted.gradients[0])


def extract_potential_map(
    lag: LagrangianModel,
    t: float,
    psi: np.ndarray,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> MongeMap:
    manifold = lag.manifold
    C = pairwise_costs(lag, mu.support, nu.support, t, settings)
    _, targets, ties = c_transform_all(psi, C)
    if np.any(ties):
        tied = np.nonzero(ties)[0]
        raise AmbiguityError("c-transform argmax is not unique", atoms=tied[:20].tolist(), count=int(len(tied)))
    Y = nu.support[targets]
    gradients = -rowwise_superdifferential_x(lag, mu.support, Y, t, settings, strict=True)
    ends, _ = flow_hamiltonian_coords(lag, mu.support, gradients, t, settings.steps_for(t))
    images = manifold.canonicalize(ends)
    residuals = manifold.dist_coords(images, Y)
    worst = float(np.max(residuals))
    if worst > settings.snap_tolerance:
        logger.warning("flow reconstruction residual %.3e exceeds the snap tolerance", worst)
    logger.info("extracted potential map for %d atoms, max reconstruction residual %.3e", mu.size, worst)
    return MongeMap(mu.support.copy(), images, MapMethod.POTENTIAL_FLOW, residuals, targets, gradients)


def _displacements(manifold: ManifoldModel, r: float, X: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # initial velocity v with dL/dv(x, v) = grad for L = |v|^r, in displacement form
    q = np.einsum("...ij,...j->...i", manifold.metric_inverse(X), G)
    dual = np.sqrt(np.maximum(np.sum(G * q, axis=-1), 0.0))
    speed = (dual / r) ** (1.0 / (r - 1.0))
    safe = np.where(dual > 0, dual, 1.0)
    return np.where(dual[..., None] > 0, q * (speed / safe)[..., None], 0.0), dual == 0


def dr_map(m: ManifoldModel, r: float, x: Point, grad: Cotangent, t: float = 1.0) -> Point:
    """exp_x(t v) where v = grad^g / (r^(1/(r-1)) |grad^g|^((r-2)/(r-1)))"""
    if not r > 1:
        raise InputError("dr_map needs r > 1", r=r)
    v, _ = _displacements(m, r, x.coords, grad.components)
    if not np.any(v):
        return x
    return m.point(m.exp_coords(x.coords, t * v))


def extract_dr_map(lag: LagrangianModel, t: float, mu: DiscreteMeasure, gradients: np.ndarray) -> MongeMap:
    if lag.power is None:
        raise InputError("the closed-form map needs a power_metric lagrangian")
    manifold = lag.manifold
    V, critical = _displacements(manifold, lag.power, mu.support, np.asarray(gradients, dtype=float))
    images = manifold.canonicalize(manifold.exp_coords(mu.support, t * V))
    return MongeMap(
        mu.support.copy(),
        images,
        MapMethod.DR_CLOSED_FORM,
        np.zeros(mu.size),
        gradients=np.asarray(gradients, dtype=float),
        critical=np.nonzero(critical)[0].tolist(),
    )


def gradient_law_residuals(
    lag: LagrangianModel, t: float, monge: MongeMap, settings: SolverSettings = DEFAULT_SETTINGS
) -> np.ndarray:
    """|dc/dx(x, T(x)) + d_x phi| per source"""
    if monge.gradients is None:
        raise InputError("gradient law needs a map carrying potential gradients")
    dcdx = rowwise_superdifferential_x(lag, monge.sources, monge.images, t, settings)
    return np.linalg.norm(dcdx + monge.gradients, axis=-1)


def calibration_transport_residuals(monge: MongeMap, pot: DualPotentials, C: np.ndarray) -> np.ndarray:
    """|psi(T(x)) - phi(x) - c(x, T(x))| per source"""
    if monge.targets is None:
        raise InputError("calibration residuals need a map with target indices")
    rows = np.arange(monge.size)
    return np.abs(pot.psi[monge.targets] - pot.phi - C[rows, monge.targets])


def is_monotone_1d(monge: MongeMap, tol: float = 1e-12) -> bool:
    if monge.sources.shape[1] != 1:
        raise InputError("monotonicity is defined for one-dimensional maps")
    order = np.argsort(monge.sources[:, 0], kind="stable")
    return bool(np.all(np.diff(monge.images[order, 0]) >= -tol))


def snap_images(manifold: ManifoldModel, monge: MongeMap, nu: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    """Nearest target atom of each image and the snapping distance"""
    distances = manifold.pairwise_dist(monge.images, nu.support)
    nearest = np.argmin(distances, axis=1)
    return nearest, distances[np.arange(monge.size), nearest]


def pushforward_check(
    monge: MongeMap,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    lag: LagrangianModel,
    t: float,
    settings: SolverSettings = DEFAULT_SETTINGS,
    optimum: Optional[float] = None,
) -> CertificateReport:
    nearest, snap = snap_images(lag.manifold, monge, nu)
    matched = snap <= settings.snap_tolerance
    pushed = np.bincount(nearest[matched], weights=mu.weights[matched], minlength=nu.size)
    total_variation = float(np.sum(np.abs(pushed - nu.weights)) + np.sum(mu.weights[~matched]))
    map_cost = float(np.dot(rowwise_costs(lag, monge.sources, monge.images, t, settings), mu.weights))
    if optimum is None:
        C = pairwise_costs(lag, mu.support, nu.support, t, settings)
        plan, _ = solve_exact(C, mu, nu)
        optimum = plan.cost(C)
    passed = bool(np.all(matched)) and total_variation <= 1e-9 and within_relative(map_cost, optimum, 1e-6)
    return CertificateReport.of(
        "pushforward",
        passed,
        {
            "total_variation": total_variation,
            "max_snap_distance": float(np.max(snap)),
            "cost_excess": map_cost - optimum,
            "cost_relative_gap": relative_gap(map_cost, optimum),
        },
        {"unmatched": np.nonzero(~matched)[0].tolist(), "map_cost": map_cost, "optimum": optimum},
    )
