"""Exact discrete Kantorovich problem with calibrated dual potentials.

Potentials follow the convention psi(y) - phi(x) <= c(x, y): standard LP
duals (u, v) with u_i + v_j <= C_ij map to phi = -u, psi = v, and the gauge
is fixed by phi_0 = 0.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import ot
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import NegativeCycleError, csgraph_from_dense, shortest_path

from app.errors import InputError, NumericalError
from app.lagrangian import LagrangianModel
from app.manifold import ManifoldModel, Point
from app.minimizer import pairwise_costs, pairwise_costs_flagged
from app.models import CertificateReport, SolverSettings

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS = SolverSettings()
WEIGHT_TOLERANCE = 1e-12
MARGINAL_TOLERANCE = 1e-10
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        support = np.atleast_2d(np.asarray(self.support, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(support) != len(weights):
            raise InputError("support and weights must have the same length")
        if len(weights) == 0:
            raise InputError("a measure needs at least one atom")
        if not np.all(np.isfinite(support)) or not np.all(np.isfinite(weights)):
            raise InputError("measure data must be finite")
        if np.any(weights <= 0):
            raise InputError("measure weights must be positive")
        if abs(float(np.sum(weights)) - 1.0) > WEIGHT_TOLERANCE:
            raise InputError("measure weights must sum to 1", total=float(np.sum(weights)))
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def on(cls, manifold: ManifoldModel, coords, weights=None) -> "DiscreteMeasure":
        """Validated measure on a manifold; weights default to uniform"""
        points = np.atleast_2d(np.asarray(coords, dtype=float))
        for row in points:
            manifold.check_coords(row)
        points = manifold.canonicalize(points)
        if len(points) > 1:
            distances = manifold.pairwise_dist(points, points)
            np.fill_diagonal(distances, np.inf)
            if np.min(distances) <= 1e-12:
                raise InputError("support points must be pairwise distinct")
        if weights is None:
            weights = np.full(len(points), 1.0 / len(points))
        return cls(points, np.asarray(weights, dtype=float))

    @property
    def size(self) -> int:
        return int(len(self.weights))

    @property
    def dim(self) -> int:
        return int(self.support.shape[1])

    @property
    def points(self) -> list[Point]:
        return [Point(x) for x in self.support]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(np.abs(self.weights - 1.0 / self.size) <= WEIGHT_TOLERANCE))


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Sparse coupling: entry k moves masses[k] from source rows[k] to target cols[k]"""

    rows: np.ndarray
    cols: np.ndarray
    masses: np.ndarray
    shape: tuple[int, int]

    @classmethod
    def from_dense(cls, matrix: np.ndarray, threshold: float = 1e-14) -> "TransportPlan":
        matrix = np.asarray(matrix, dtype=float)
        rows, cols = np.nonzero(matrix > threshold * max(1.0, float(np.max(matrix))))
        return cls(rows, cols, matrix[rows, cols], (int(matrix.shape[0]), int(matrix.shape[1])))

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(m)) for i, j, m in zip(self.rows, self.cols, self.masses)]

    def dense(self) -> np.ndarray:
        matrix = np.zeros(self.shape)
        np.add.at(matrix, (self.rows, self.cols), self.masses)
        return matrix

    def cost(self, C: np.ndarray) -> float:
        return float(np.sum(self.masses * C[self.rows, self.cols]))

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.rows, weights=self.masses, minlength=self.shape[0])

    def col_sums(self) -> np.ndarray:
        return np.bincount(self.cols, weights=self.masses, minlength=self.shape[1])

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.shape[0])


@dataclass(frozen=True, eq=False)
class DualPotentials:
    phi: np.ndarray
    psi: np.ndarray

    def value(self, mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
        return float(np.dot(self.psi, nu.weights) - np.dot(self.phi, mu.weights))

    def slack(self, C: np.ndarray) -> np.ndarray:
        """psi_j - phi_i - C_ij, non-positive for a c-subsolution"""
        return self.psi[None, :] - self.phi[:, None] - C


@dataclass(frozen=True)
class CTransform:
    value: float
    index: int
    tie: bool


@dataclass
class UniquenessReport:
    unique: bool
    alternative: Optional[TransportPlan] = None
    averaged: Optional[TransportPlan] = None
    tight_entries: int = 0
    shared_mass: float = 1.0


@dataclass
class EntropicPreview:
    plan: np.ndarray
    cost: float
    reg: float
    details: dict = field(default_factory=dict)


def cost_matrix_flagged(
    lag: LagrangianModel, mu: DiscreteMeasure, nu: DiscreteMeasure, t: float, settings: SolverSettings = DEFAULT_SETTINGS
) -> tuple[np.ndarray, np.ndarray]:
    """C[i, j] = c_t(x_i, y_j) and the mask of AMBIGUOUS pairs"""
    C, ambiguous = pairwise_costs_flagged(lag, mu.support, nu.support, t, settings)
    if np.any(ambiguous):
        logger.warning("%d of %d pairs lie on the cut locus", int(np.sum(ambiguous)), ambiguous.size)
    logger.info("assembled %dx%d cost matrix", *C.shape)
    return C, ambiguous


def cost_matrix(
    lag: LagrangianModel, mu: DiscreteMeasure, nu: DiscreteMeasure, t: float, settings: SolverSettings = DEFAULT_SETTINGS
) -> np.ndarray:
    return cost_matrix_flagged(lag, mu, nu, t, settings)[0]


def _check_problem(C: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.shape != (mu.size, nu.size):
        raise InputError("cost matrix shape does not match the measures", shape=list(C.shape))
    if not np.all(np.isfinite(C)):
        raise InputError("cost matrix must be finite")
    if abs(float(np.sum(mu.weights) - np.sum(nu.weights))) > 1e-9:
        raise InputError("marginals carry different total mass")
    return C


def _network_simplex(C: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure) -> tuple[TransportPlan, np.ndarray, np.ndarray]:
    """Optimal vertex plan plus LP duals (u, v) with u_i + v_j <= C_ij"""
    a = np.ascontiguousarray(mu.weights, dtype=np.float64)
    b = np.ascontiguousarray(nu.weights * (np.sum(a) / np.sum(nu.weights)), dtype=np.float64)
    G, log = ot.emd(a, b, np.ascontiguousarray(C, dtype=np.float64), numItermax=10_000_000, log=True)
    if log.get("warning"):
        raise NumericalError(f"network simplex did not terminate cleanly: {log['warning']}")
    return TransportPlan.from_dense(G), np.asarray(log["u"]), np.asarray(log["v"])


def _solve_plan(C: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure) -> TransportPlan:
    if mu.size == nu.size and mu.is_uniform and nu.is_uniform:
        rows, cols = linear_sum_assignment(C)
        return TransportPlan(rows, cols, np.full(len(rows), 1.0 / mu.size), C.shape)
    return _network_simplex(C, mu, nu)[0]


def _column_potentials(C: np.ndarray, plan: TransportPlan) -> Optional[np.ndarray]:
    """Potentials v with slack on every entry that no optimal plan can use.

    For a row i shipping to column a, any v with v_j <= v_a + C_ij - C_ia is
    dual feasible.  Shortest-path distances from each column are feasible,
    and their average is tight only where every one of them is, which
    happens exactly on zero-weight cycles, i.e. alternative optimal plans.
    """
    n = C.shape[1]
    W = np.full((n, n), np.inf)
    for i, a in zip(plan.rows, plan.cols):
        W[a] = np.minimum(W[a], C[i] - C[i, a])
    np.fill_diagonal(W, 0.0)
    # absorbs rounding so that exact ties do not read as negative cycles
    W = W + 1e-14 * (1.0 + float(np.max(np.abs(C))))
    np.fill_diagonal(W, 0.0)
    try:
        distances = shortest_path(csgraph_from_dense(W, null_value=np.inf), method="FW", directed=True)
    except NegativeCycleError:
        logger.warning("negative cycle among tight entries, keeping the solver duals")
        return None
    if not np.all(np.isfinite(distances)):
        return None
    return np.mean(distances, axis=0)


def _gauge(phi: np.ndarray, psi: np.ndarray) -> DualPotentials:
    shift = phi[0]
    return DualPotentials(phi - shift, psi - shift)


def solve_exact(
    C: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure
) -> tuple[TransportPlan, DualPotentials]:
    C = _check_problem(C, mu, nu)
    plan = _solve_plan(C, mu, nu)
    v = _column_potentials(C, plan)
    if v is None:
        plan, u, v = _network_simplex(C, mu, nu)
    else:
        u = np.full(mu.size, np.inf)
        np.minimum.at(u, plan.rows, C[plan.rows, plan.cols] - v[plan.cols])
    duals = _gauge(-u, v)
    logger.info("solved %dx%d transport problem, cost %.12g", C.shape[0], C.shape[1], plan.cost(C))
    return plan, duals


def duality_gap(plan: TransportPlan, pot: DualPotentials, C: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    return abs(plan.cost(C) - pot.value(mu, nu))


def marginal_error(plan: TransportPlan, mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    return float(
        max(np.max(np.abs(plan.row_sums() - mu.weights)), np.max(np.abs(plan.col_sums() - nu.weights)))
    )


def c_transform_all(psi: np.ndarray, C_block: np.ndarray, tie_tolerance: float = TIE_TOLERANCE):
    """phi_i = max_j psi_j - C_ij with the lowest-index argmax and a tie flag per row"""
    scores = np.asarray(psi, dtype=float)[None, :] - np.atleast_2d(C_block)
    index = np.argmax(scores, axis=1)
    values = scores[np.arange(len(scores)), index]
    if scores.shape[1] > 1:
        runner_up = np.partition(scores, -2, axis=1)[:, -2]
        ties = values - runner_up <= tie_tolerance * (1.0 + np.abs(values))
    else:
        ties = np.zeros(len(values), dtype=bool)
    return values, index, ties


def c_transform(
    psi: np.ndarray,
    lag: LagrangianModel,
    t: float,
    x: Point,
    nu: DiscreteMeasure,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> CTransform:
    row = pairwise_costs(lag, x.coords[None, :], nu.support, t, settings)
    values, index, ties = c_transform_all(psi, row)
    return CTransform(float(values[0]), int(index[0]), bool(ties[0]))


def check_calibration(plan: TransportPlan, pot: DualPotentials, C: np.ndarray, tol: float) -> CertificateReport:
    slack = pot.slack(np.asarray(C, dtype=float))
    subsolution = float(max(np.max(slack), 0.0))
    equality = float(np.max(np.abs(slack[plan.rows, plan.cols]))) if len(plan.rows) else 0.0
    return CertificateReport.of(
        "calibration",
        subsolution <= tol and equality <= tol,
        {"subsolution": subsolution, "equality_on_support": equality},
        {"tolerance": tol},
    )


def _tight_mask(C: np.ndarray, pot: DualPotentials, tol: float) -> np.ndarray:
    return np.abs(pot.slack(C)) <= tol * (1.0 + np.abs(C))


def uniqueness_probe(
    C: np.ndarray,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    plan: TransportPlan,
    pot: DualPotentials,
    tol: float = DEFAULT_SETTINGS.lp_tolerance,
) -> UniquenessReport:
    """Search a second optimal plan inside the tight set that avoids the first plan's support"""
    C = np.asarray(C, dtype=float)
    tight = _tight_mask(C, pot, tol)
    support = np.zeros(C.shape, dtype=bool)
    support[plan.rows, plan.cols] = True
    if not np.any(tight & ~support):
        return UniquenessReport(True, tight_entries=int(np.sum(tight)))
    probe_cost = np.where(tight, support.astype(float), 1e6)
    alternative = _solve_plan(probe_cost, mu, nu)
    shared = alternative.cost(probe_cost)
    if shared >= float(np.sum(mu.weights)) - tol or shared >= 1e5:
        return UniquenessReport(True, tight_entries=int(np.sum(tight)), shared_mass=shared)
    averaged = TransportPlan.from_dense(0.5 * (plan.dense() + alternative.dense()))
    logger.info("alternative optimal plan found, %.3g of the mass is shared", shared)
    return UniquenessReport(False, alternative, averaged, int(np.sum(tight)), shared)


def graph_concentration(plan: TransportPlan, m: Optional[int] = None) -> CertificateReport:
    counts = plan.row_counts() if m is None else np.bincount(plan.rows, minlength=m)
    split = np.nonzero(counts != 1)[0]
    return CertificateReport.of(
        "graph_concentration",
        len(split) == 0,
        {"split_rows": float(len(split))},
        {"split": split.tolist()},
    )


def entropic_preview(C: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure, reg: float) -> EntropicPreview:
    """Sinkhorn estimate reported next to the exact optimum"""
    C = _check_problem(C, mu, nu)
    plan, log = ot.sinkhorn(mu.weights, nu.weights, C, reg, numItermax=10_000, stopThr=1e-10, log=True)
    return EntropicPreview(np.asarray(plan), float(np.sum(plan * C)), reg, {"iterations": int(log.get("niter", 0))})


def within_relative(a: float, b: float, eps: float) -> bool:
    """|a - b| <= eps * max(|a|, |b|) + 1e-12"""
    return abs(a - b) <= eps * max(abs(a), abs(b)) + 1e-12


def relative_gap(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 0 else 0.0
