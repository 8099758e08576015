import math
import numpy as np
from sqlmodel import SQLModel, Field
from pydantic import ConfigDict, model_validator
from datetime import datetime, timezone
from typing import Any, Optional
from enum import Enum


class ManifoldKind(str, Enum):
    EUCLIDEAN = "euclidean"
    TORUS = "torus"
    SPHERE2 = "sphere2"
    HYPERBOLIC2 = "hyperbolic2"


class LagrangianKind(str, Enum):
    POWER_METRIC = "power_metric"
    CUSTOM = "custom"


class CostMethod(str, Enum):
    AUTO = "auto"
    BVP = "bvp"
    CLOSED_FORM = "closed_form"


class CheckStatus(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"


class MapMethod(str, Enum):
    PLAN_GRAPH = "plan_graph"
    POTENTIAL_FLOW = "potential_flow"
    DR_CLOSED_FORM = "dr_closed_form"


class ModulusKind(str, Enum):
    LINEAR = "linear"
    TABULATED = "tabulated"


class SuiteName(str, Enum):
    FLOWS = "flows"
    LEGENDRE = "legendre"
    SEMICONCAVITY = "semiconcavity"
    TWIST = "twist"
    DUALITY = "duality"
    ALL = "all"


# Persistent models (stored in the run ledger)
class RunRecord(SQLModel, table=True):
    __tablename__ = "run_records"  # type: ignore[assignment]

    id: Optional[int] = Field(default=None, primary_key=True)
    command: str = Field(max_length=20, index=True)
    config_digest: str = Field(max_length=64, index=True)
    seed: int = Field(default=0)
    exit_code: int = Field(default=0)
    report_json: str = Field(default="{}")
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


# Non-persistent schemas (configuration, reports)
class ManifoldSpec(SQLModel, table=False):
    model_config = ConfigDict(extra="forbid")

    kind: ManifoldKind = Field(default=ManifoldKind.EUCLIDEAN)
    dim: int = Field(default=2, gt=0)
    params: dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_dim(self) -> "ManifoldSpec":
        if self.kind in (ManifoldKind.SPHERE2, ManifoldKind.HYPERBOLIC2) and self.dim != 2:
            raise ValueError(f"{self.kind.value} requires dim = 2")
        if self.kind == ManifoldKind.SPHERE2 and self.params.get("radius", 1.0) <= 0:
            raise ValueError("sphere radius must be positive")
        return self


class LagrangianSpec(SQLModel, table=False):
    model_config = ConfigDict(extra="forbid")

    kind: LagrangianKind = Field(default=LagrangianKind.POWER_METRIC)
    r: float = Field(default=2.0, gt=1)
    entry_point: Optional[str] = Field(default=None)

    @model_validator(mode="after")
    def _check_entry_point(self) -> "LagrangianSpec":
        if self.kind == LagrangianKind.CUSTOM and not self.entry_point:
            raise ValueError("custom lagrangians need an entry_point 'module:factory'")
        return self


class SolverSettings(SQLModel, table=False):
    model_config = ConfigDict(extra="forbid")

    integrator_steps_per_unit: int = Field(default=1000, gt=0)
    shooting_tolerance: float = Field(default=1e-7, gt=0)
    shooting_max_iter: int = Field(default=25, gt=0)
    direct_nodes: int = Field(default=64, ge=4)
    ambiguity_tolerance: float = Field(default=1e-9, gt=0)
    legendre_tolerance: float = Field(default=1e-12, gt=0)
    legendre_max_iter: int = Field(default=100, gt=0)
    lp_tolerance: float = Field(default=1e-9, gt=0)
    snap_tolerance: float = Field(default=1e-4, gt=0)
    cost_method: CostMethod = Field(default=CostMethod.AUTO)
    entropic_reg: Optional[float] = Field(default=None, gt=0)
    lipschitz_subsample: int = Field(default=500, gt=1)

    def steps_for(self, t: float) -> int:
        """Even RK4 step count for a flow of duration t (Simpson needs an even grid)"""
        steps = max(2, math.ceil(self.integrator_steps_per_unit * abs(t) - 1e-9))
        return steps + (steps % 2)


class MeasureFiles(SQLModel, table=False):
    model_config = ConfigDict(extra="forbid")

    source: Optional[str] = Field(default=None)
    target: Optional[str] = Field(default=None)


class RunConfig(SQLModel, table=False):
    model_config = ConfigDict(extra="forbid")

    manifold: ManifoldSpec = Field(default_factory=ManifoldSpec)
    lagrangian: LagrangianSpec = Field(default_factory=LagrangianSpec)
    t: float = Field(default=1.0, gt=0)
    measures: MeasureFiles = Field(default_factory=MeasureFiles)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    seed: int = Field(default=0)
    output: str = Field(default="out")
    ledger_url: Optional[str] = Field(default=None)


class CertificateReport(SQLModel, table=False):
    """Pass/fail outcome of one invariant check with its worst residuals"""

    name: str
    status: CheckStatus
    residuals: dict[str, float] = Field(default_factory=dict)
    details: dict[str, Any] = Field(default_factory=dict)
    message: str = ""

    @property
    def passed(self) -> bool:
        return self.status == CheckStatus.PASS

    @classmethod
    def of(
        cls,
        name: str,
        passed: bool,
        residuals: Optional[dict[str, float]] = None,
        details: Optional[dict[str, Any]] = None,
        message: str = "",
    ) -> "CertificateReport":
        return cls(
            name=name,
            status=CheckStatus.PASS if passed else CheckStatus.FAIL,
            residuals={key: float(value) for key, value in (residuals or {}).items()},
            details=details or {},
            message=message,
        )


class SuiteReport(SQLModel, table=False):
    """Ordered collection of certificates produced by one verification suite"""

    suite: str
    seed: int
    checks: list[CertificateReport] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


class ModulusCertificate(SQLModel, table=False):
    """Sampled semi-concavity certificate: f(y) - f(x) - l_x(y - x) <= |y - x| w(|y - x|) on a box"""

    kind: ModulusKind
    k: Optional[float] = None
    radii: list[float] = Field(default_factory=list)
    omega: list[float] = Field(default_factory=list)
    lower: list[float] = Field(default_factory=list)
    upper: list[float] = Field(default_factory=list)
    samples: int = 0
    max_violation: float = 0.0
    tolerance: float = 0.0
    status: CheckStatus = CheckStatus.PASS

    @property
    def passed(self) -> bool:
        return self.status == CheckStatus.PASS

    def slack(self, distance: Any) -> Any:
        """Allowed slack |d| w(|d|) at the given distances"""
        d = np.asarray(distance, dtype=float)
        if self.kind == ModulusKind.LINEAR:
            return (self.k or 0.0) * d * d
        return d * np.interp(d, self.radii, self.omega, right=self.omega[-1] if self.omega else 0.0)

    def as_report(self, name: str) -> CertificateReport:
        return CertificateReport.of(
            name,
            self.passed,
            {"max_violation": self.max_violation, "k": self.k if self.k is not None else float("nan")},
            {"kind": self.kind.value, "samples": self.samples, "tolerance": self.tolerance},
        )
