import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from app.errors import ConfigError, InputError
from app.interpolation import (
    InterpolationPath,
    energy_report,
    path_from_potential,
    verify_cost_additivity,
    verify_endpoint_consistency,
    verify_injectivity_and_inverse,
    verify_midpoint_optimality,
    verify_restriction_identity,
    verify_reversed_optimality,
)
from app.kantorovich import (
    DiscreteMeasure,
    DualPotentials,
    TransportPlan,
    UniquenessReport,
    check_calibration,
    cost_matrix_flagged,
    duality_gap,
    entropic_preview,
    graph_concentration,
    marginal_error,
    solve_exact,
    uniqueness_probe,
)
from app.lagrangian import LagrangianModel, build_lagrangian
from app.manifold import ManifoldModel, build_manifold
from app.minimizer import CostQuery, closed_form_cost, curve_superdifferential, minimize
from app.models import CertificateReport, RunConfig, SolverSettings
from app.monge import MongeMap, map_from_plan, pushforward_check
from app.serialization import (
    load_measure,
    map_record,
    plan_record,
    potentials_record,
    write_json,
    write_map_csv,
    write_trajectories_csv,
)

logger = logging.getLogger(__name__)

CURVE_NODES = 65


@dataclass
class TransportModel:
    """Manifold and Lagrangian built from one run configuration"""

    config: RunConfig
    manifold: ManifoldModel
    lag: LagrangianModel

    @property
    def settings(self) -> SolverSettings:
        return self.config.solver

    @property
    def t(self) -> float:
        return self.config.t


@dataclass
class SolveResult:
    C: np.ndarray
    plan: TransportPlan
    potentials: DualPotentials
    monge: MongeMap
    uniqueness: UniquenessReport
    checks: list[CertificateReport]
    preview: Optional[dict[str, Any]] = None
    ambiguous_pairs: list[list[int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


@dataclass
class InterpolationResult:
    path: InterpolationPath
    checks: list[CertificateReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


class TransportService:
    """Service for the cost, solve and interpolation pipelines"""

    def build(self, config: RunConfig) -> TransportModel:
        manifold = build_manifold(config.manifold)
        lag = build_lagrangian(config.lagrangian, manifold, config.solver)
        return TransportModel(config, manifold, lag)

    def load_measures(self, model: TransportModel) -> tuple[DiscreteMeasure, DiscreteMeasure]:
        measures = model.config.measures
        if measures.source is None or measures.target is None:
            raise ConfigError("this command needs measures.source and measures.target", key="measures")
        return (
            load_measure(Path(measures.source), model.manifold),
            load_measure(Path(measures.target), model.manifold),
        )

    def cost_record(self, model: TransportModel, x: Sequence[float], y: Sequence[float]) -> dict[str, Any]:
        """Cost, superdifferential and minimizing curve of one endpoint pair"""
        if len(x) != model.manifold.dim or len(y) != model.manifold.dim:
            raise InputError(f"endpoints need {model.manifold.dim} coordinates each", x=list(x), y=list(y))
        query = CostQuery(model.manifold.point(x), model.manifold.point(y), model.t)
        curve = minimize(model.lag, query, model.settings)
        grad_x, grad_y = curve_superdifferential(model.lag, curve)
        stride = max(1, (len(curve.times) - 1) // (CURVE_NODES - 1))
        record: dict[str, Any] = {
            "x": query.x.coords,
            "y": query.y.coords,
            "t": model.t,
            "cost": curve.action,
            "superdifferential_x": grad_x.components,
            "superdifferential_y": grad_y.components,
            "method": curve.method,
            "residual": curve.residual,
            "ambiguous": curve.ambiguous,
            "energy_spread": curve.energy_spread,
            "curve": {
                "times": curve.times[::stride],
                "positions": curve.positions[::stride],
                "velocities": curve.velocities[::stride],
            },
        }
        if model.lag.power is not None:
            record["closed_form"] = closed_form_cost(model.lag, query.x, query.y, model.t)
        return record

    def solve(self, model: TransportModel, mu: DiscreteMeasure, nu: DiscreteMeasure) -> SolveResult:
        settings = model.settings
        C, ambiguous = cost_matrix_flagged(model.lag, mu, nu, model.t, settings)
        plan, potentials = solve_exact(C, mu, nu)
        optimum = plan.cost(C)
        tolerance = settings.lp_tolerance * max(1.0, float(np.max(np.abs(C))))

        uniqueness = uniqueness_probe(C, mu, nu, plan, potentials, settings.lp_tolerance)
        # an alternative optimum means the averaged plan is optimal as well and is not a graph
        reported_plan = plan if uniqueness.unique else uniqueness.averaged
        monge = map_from_plan(reported_plan, mu, nu)

        gap = duality_gap(plan, potentials, C, mu, nu)
        checks = [
            CertificateReport.of("duality_gap", gap <= tolerance, {"gap": gap}, {"primal": optimum}),
            CertificateReport.of("marginals", marginal_error(plan, mu, nu) <= 1e-10, {"max_error": marginal_error(plan, mu, nu)}),
            check_calibration(plan, potentials, C, tolerance),
            graph_concentration(reported_plan, mu.size),
            pushforward_check(monge, mu, nu, model.lag, model.t, settings, optimum=optimum),
        ]
        preview = None
        if settings.entropic_reg is not None:
            estimate = entropic_preview(C, mu, nu, settings.entropic_reg)
            preview = {"reg": estimate.reg, "cost": estimate.cost, "gap_to_exact": estimate.cost - optimum, **estimate.details}
        for check in checks:
            logger.info("solve check %s: %s", check.name, check.status.value)
        pairs = np.argwhere(ambiguous).tolist()
        return SolveResult(C, reported_plan, potentials, monge, uniqueness, checks, preview, pairs)

    def solve_report(self, result: SolveResult) -> dict[str, Any]:
        report: dict[str, Any] = {
            "cost": result.plan.cost(result.C),
            "passed": result.passed,
            "checks": result.checks,
            "uniqueness": {
                "unique": result.uniqueness.unique,
                "tight_entries": result.uniqueness.tight_entries,
                "shared_mass": result.uniqueness.shared_mass,
            },
            "split_rows": sorted(result.monge.split),
            "ambiguous_pairs": result.ambiguous_pairs,
        }
        if result.preview is not None:
            report["entropic_preview"] = result.preview
        return report

    def write_solve(self, result: SolveResult, out: Path) -> dict[str, Any]:
        report = self.solve_report(result)
        write_json(out / "plan.json", plan_record(result.plan, result.plan.cost(result.C)))
        write_json(out / "potentials.json", potentials_record(result.potentials))
        write_json(out / "map.json", map_record(result.monge))
        write_map_csv(out / "map.csv", result.monge)
        write_json(out / "report.json", report)
        return report

    def interpolate(
        self, model: TransportModel, mu: DiscreteMeasure, nu: DiscreteMeasure, s_list: Sequence[float]
    ) -> InterpolationResult:
        t = model.t
        bad = [s for s in s_list if not 0 <= s <= t]
        if bad:
            raise ConfigError(f"interpolation times {bad} lie outside [0, {t}]", key="s")
        grid = sorted(set(float(s) for s in s_list) | {0.0, t})
        path = path_from_potential(model.lag, t, mu, nu, grid, model.settings)
        checks = [verify_endpoint_consistency(path), energy_report(path)]
        for s in sorted(set(float(s) for s in s_list)):
            checks.append(verify_restriction_identity(path, s))
            if 0 < s < t:
                checks.append(verify_midpoint_optimality(path, s))
                checks.append(verify_injectivity_and_inverse(path, s))
                checks.append(verify_cost_additivity(path, s))
                checks.append(verify_reversed_optimality(path, s))
        return InterpolationResult(path, checks)

    def write_interpolation(self, result: InterpolationResult, out: Path) -> dict[str, Any]:
        path = result.path
        write_trajectories_csv(out / "trajectories.csv", path.s_grid, path.positions)
        report = {
            "passed": result.passed,
            "t": path.t,
            "s_grid": path.s_grid,
            "checks": result.checks,
            "measures": [{"s": s, "support": path.images(float(s))} for s in path.s_grid],
            "maps": [{"s": s, **map_record(path.map_at(float(s)))} for s in path.s_grid],
        }
        write_json(out / "report.json", report)
        return report


transport_service = TransportService()
