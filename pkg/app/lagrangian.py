"""Tonelli Lagrangians on a chart: the power-metric family and user callbacks.

Every model exposes array-level methods (``value``, ``dv``, ``dx``,
``velocity``, ``hamiltonian_coords``) that broadcast over leading axes.
The Hamiltonian flow integrates x' = dH/dp, p' = -dH/dx using the identity
dH/dx(x, dL/dv(x,v)) = -dL/dx(x,v), so the momentum equation reads
p' = dL/dx(x, v(x,p)) and no derivative is ever taken through the sup.
"""

from __future__ import annotations

import importlib
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import block_diag
from scipy.optimize import root

from app.errors import ConfigError, InputError, IntegrationError, NumericalError
from app.manifold import ManifoldModel, Point, Tangent
from app.models import CertificateReport, LagrangianKind, LagrangianSpec, SolverSettings

logger = logging.getLogger(__name__)

FREEZE_MOMENTUM = 1e-12
# rows per root solve; the Jacobian is dense block-diagonal
LEGENDRE_BLOCK_ROWS = 32
DEFAULT_SETTINGS = SolverSettings()

ArrayFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Cotangent:
    base: Point
    components: np.ndarray

    def __post_init__(self) -> None:
        components = np.asarray(self.components, dtype=float).reshape(-1)
        if components.shape != self.base.coords.shape:
            raise InputError("cotangent components do not match the base point dimension")
        if not np.all(np.isfinite(components)):
            raise InputError("cotangent components must be finite")
        object.__setattr__(self, "components", components)


@dataclass(frozen=True)
class LagrangianCallbacks:
    """Chart-level callbacks of a user Lagrangian, all vectorized over leading axes.

    ``hessian`` (d2L/dv2, shape (..., n, n)) is optional; without it the
    Legendre inverse differentiates ``dv`` numerically.
    """

    value: ArrayFn
    dv: ArrayFn
    dx: ArrayFn
    hessian: Optional[ArrayFn] = None
    name: str = "custom"


class LagrangianModel:
    kind: LagrangianKind

    def __init__(self, manifold: ManifoldModel):
        self.manifold = manifold

    # array level ----------------------------------------------------------

    def value(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dv(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dx(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Inverse of the fiber derivative"""
        raise NotImplementedError

    def hamiltonian_coords(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        v = self.velocity(x, p)
        return np.sum(p * v, axis=-1) - self.value(x, v)

    def energy_coords(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.sum(self.dv(x, v) * v, axis=-1) - self.value(x, v)

    def frozen(self, x: np.ndarray, p: np.ndarray) -> Optional[np.ndarray]:
        """Mask of states at rest that the flow must not move"""
        return None

    @property
    def power(self) -> Optional[float]:
        return None


class PowerMetricLagrangian(LagrangianModel):
    """L(x,v) = |v|_x^r with r > 1"""

    kind = LagrangianKind.POWER_METRIC

    def __init__(self, manifold: ManifoldModel, r: float = 2.0):
        super().__init__(manifold)
        if not r > 1:
            raise ConfigError("power_metric needs r > 1", key="lagrangian.r")
        self.r = float(r)

    def __repr__(self) -> str:
        return f"PowerMetricLagrangian(r={self.r}, manifold={self.manifold!r})"

    @property
    def power(self) -> Optional[float]:
        return self.r

    def _speed(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(self.manifold.sq_norm(x, v), 0.0))

    def _speed_power(self, speed: np.ndarray, exponent: float) -> np.ndarray:
        # speed**exponent with the value 0 at rest, also for negative exponents
        safe = np.where(speed > 0, speed, 1.0)
        return np.where(speed > 0, safe**exponent, 0.0)

    def value(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self._speed(x, v) ** self.r

    def dv(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        speed = self._speed(x, v)
        gv = np.einsum("...ij,...j->...i", self.manifold.metric_tensor(x), v)
        return (self.r * self._speed_power(speed, self.r - 2.0))[..., None] * gv

    def dx(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        speed = self._speed(x, v)
        scale = 0.5 * self.r * self._speed_power(speed, self.r - 2.0)
        return scale[..., None] * self.manifold.metric_quadratic_derivative(x, v)

    def _dual_norm(self, x: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.einsum("...ij,...j->...i", self.manifold.metric_inverse(x), p)
        return q, np.sqrt(np.maximum(np.sum(p * q, axis=-1), 0.0))

    def velocity(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        q, dual = self._dual_norm(x, p)
        speed = (dual / self.r) ** (1.0 / (self.r - 1.0))
        safe = np.where(dual > 0, dual, 1.0)
        return np.where(dual[..., None] > 0, q * (speed / safe)[..., None], 0.0)

    def hamiltonian_coords(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        _, dual = self._dual_norm(x, p)
        return (self.r - 1.0) * (dual / self.r) ** (self.r / (self.r - 1.0))

    def energy_coords(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (self.r - 1.0) * self._speed(x, v) ** self.r

    def frozen(self, x: np.ndarray, p: np.ndarray) -> Optional[np.ndarray]:
        return self._dual_norm(x, p)[1] < FREEZE_MOMENTUM


class CustomLagrangian(LagrangianModel):
    kind = LagrangianKind.CUSTOM

    def __init__(
        self,
        manifold: ManifoldModel,
        callbacks: LagrangianCallbacks,
        tolerance: float = DEFAULT_SETTINGS.legendre_tolerance,
        max_iter: int = DEFAULT_SETTINGS.legendre_max_iter,
    ):
        super().__init__(manifold)
        self.callbacks = callbacks
        self.tolerance = tolerance
        self.max_iter = max_iter

    def __repr__(self) -> str:
        return f"CustomLagrangian({self.callbacks.name}, manifold={self.manifold!r})"

    def value(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.callbacks.value(x, v), dtype=float)

    def dv(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.callbacks.dv(x, v), dtype=float)

    def dx(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.callbacks.dx(x, v), dtype=float)

    def fiber_hessian(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.callbacks.hessian is not None:
            return np.asarray(self.callbacks.hessian(x, v), dtype=float)
        n = v.shape[-1]
        columns = []
        for k in range(n):
            h = 1e-6 * (1.0 + np.abs(v[..., k]))
            e = np.zeros(n)
            e[k] = 1.0
            step = h[..., None] * e
            columns.append((self.dv(x, v + step) - self.dv(x, v - step)) / (2.0 * h[..., None]))
        return np.stack(columns, axis=-1)

    def velocity(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Solves dL/dv(x, v) = p, a few rows at a time as one system with a block-diagonal Jacobian"""
        shape = np.broadcast_shapes(x.shape, p.shape)
        X = np.broadcast_to(x, shape).reshape(-1, shape[-1])
        Pm = np.broadcast_to(p, shape).reshape(-1, shape[-1])
        V = np.empty(X.shape)
        for lo in range(0, len(X), LEGENDRE_BLOCK_ROWS):
            block = slice(lo, lo + LEGENDRE_BLOCK_ROWS)
            V[block] = self._invert_block(X[block], Pm[block])
        return V.reshape(shape)

    def _invert_block(self, X: np.ndarray, Pm: np.ndarray) -> np.ndarray:
        start = np.einsum("...ij,...j->...i", self.manifold.metric_inverse(X), Pm)

        def fiber_residual(flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            V = flat.reshape(X.shape)
            return (self.dv(X, V) - Pm).reshape(-1), block_diag(*self.fiber_hessian(X, V))

        solution = root(
            fiber_residual,
            start.reshape(-1),
            method="hybr",
            jac=True,
            tol=self.tolerance,
            options={"maxfev": self.max_iter * (X.size + 1)},
        )
        V = solution.x.reshape(X.shape)
        size = np.linalg.norm(self.dv(X, V) - Pm, axis=-1)
        logger.debug("legendre inverse: %d evaluations, max residual %.3e", solution.nfev, float(np.max(size)))
        if np.any(size > 1e3 * self.tolerance * (1.0 + np.linalg.norm(Pm, axis=-1))):
            raise NumericalError(
                "legendre inverse did not converge", residual=float(np.max(size)), evaluations=int(solution.nfev)
            )
        return V


# point-level operations ---------------------------------------------------


def eval_L(lag: LagrangianModel, v: Tangent) -> float:
    return float(lag.value(v.base.coords, v.components))


def fiber_derivative(lag: LagrangianModel, v: Tangent) -> Cotangent:
    return Cotangent(v.base, lag.dv(v.base.coords, v.components))


def legendre_inverse(lag: LagrangianModel, p: Cotangent) -> Tangent:
    return Tangent(p.base, lag.velocity(p.base.coords, p.components))


def hamiltonian(lag: LagrangianModel, p: Cotangent) -> float:
    return float(lag.hamiltonian_coords(p.base.coords, p.components))


def energy(lag: LagrangianModel, v: Tangent) -> float:
    return float(lag.energy_coords(v.base.coords, v.components))


# flows --------------------------------------------------------------------


def _hamilton_rhs(lag: LagrangianModel, X: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    V = lag.velocity(X, P)
    dP = lag.dx(X, V)
    rest = lag.frozen(X, P)
    if rest is not None and np.any(rest):
        V = np.where(rest[..., None], 0.0, V)
        dP = np.where(rest[..., None], 0.0, dP)
    return V, dP


def flow_hamiltonian_coords(
    lag: LagrangianModel,
    X: np.ndarray,
    P: np.ndarray,
    t: float,
    steps: Optional[int] = None,
    record: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step RK4 for the Hamiltonian flow of a batch of initial states.

    Positions are returned unwrapped (torus lifts are kept).  With
    ``record`` the arrays gain a leading time axis of length steps + 1.
    """
    if t < 0:
        raise InputError("flows are integrated forward in time only", t=t)
    X = np.array(X, dtype=float)
    P = np.array(P, dtype=float)
    steps = steps or DEFAULT_SETTINGS.steps_for(t)
    if t == 0:
        return (X[None], P[None]) if record else (X, P)
    h = t / steps
    xs, ps = [X], [P]
    for step in range(steps):
        k1x, k1p = _hamilton_rhs(lag, X, P)
        k2x, k2p = _hamilton_rhs(lag, X + 0.5 * h * k1x, P + 0.5 * h * k1p)
        k3x, k3p = _hamilton_rhs(lag, X + 0.5 * h * k2x, P + 0.5 * h * k2p)
        k4x, k4p = _hamilton_rhs(lag, X + h * k3x, P + h * k3p)
        X_next = X + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        P_next = P + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        if not (np.all(np.isfinite(X_next)) and np.all(np.isfinite(P_next))):
            raise IntegrationError(
                "hamiltonian flow produced a non-finite state",
                step=step + 1,
                time=(step + 1) * h,
                last_norm=float(np.sqrt(np.sum(X * X) + np.sum(P * P))),
            )
        X, P = X_next, P_next
        if record:
            xs.append(X)
            ps.append(P)
    if record:
        return np.stack(xs), np.stack(ps)
    return X, P


def flow_lagrangian_coords(
    lag: LagrangianModel,
    X: np.ndarray,
    V: np.ndarray,
    t: float,
    steps: Optional[int] = None,
    record: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    Xt, Pt = flow_hamiltonian_coords(lag, X, lag.dv(X, np.asarray(V, dtype=float)), t, steps, record)
    return Xt, lag.velocity(Xt, Pt)


def hamiltonian_flow(lag: LagrangianModel, p0: Cotangent, t: float, steps: Optional[int] = None) -> Cotangent:
    X, P = flow_hamiltonian_coords(lag, p0.base.coords, p0.components, t, steps)
    return Cotangent(lag.manifold.point(X), P)


def euler_lagrange_flow(lag: LagrangianModel, v0: Tangent, t: float, steps: Optional[int] = None) -> Tangent:
    return legendre_inverse(lag, hamiltonian_flow(lag, fiber_derivative(lag, v0), t, steps))


# diagnostics and construction ----------------------------------------------


def convexity_probe(
    lag: LagrangianModel, xs: np.ndarray, samples: int, rng: np.random.Generator, margin: float = 1e-12
) -> CertificateReport:
    """Midpoint strict convexity of L(x, .) on random fiber pairs"""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    X = np.repeat(xs, samples, axis=0)
    V = rng.normal(size=X.shape)
    W = rng.normal(size=X.shape)
    mid = lag.value(X, 0.5 * (V + W))
    average = 0.5 * (lag.value(X, V) + lag.value(X, W))
    gap = (average - mid) / (1.0 + np.abs(average))
    worst = float(np.min(gap))
    return CertificateReport.of(
        "convexity_probe",
        worst > margin,
        {"min_relative_midpoint_gap": worst},
        {"pairs": int(len(X))},
    )


def superlinearity_constant(lag: LagrangianModel, xs: np.ndarray, vs: np.ndarray) -> float:
    """Largest C with L(x,v) >= |v|_x + C over the sampled pairs"""
    xs = np.asarray(xs, dtype=float)
    vs = np.asarray(vs, dtype=float)
    speed = np.sqrt(lag.manifold.sq_norm(xs, vs))
    return float(np.min(lag.value(xs, vs) - speed))


def mechanical_lagrangian(
    manifold: ManifoldModel,
    potential: Optional[ArrayFn] = None,
    potential_grad: Optional[ArrayFn] = None,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> CustomLagrangian:
    """L = |v|^2/2 + |v|^4/4 - U(x); U defaults to zero"""

    def U(x: np.ndarray) -> np.ndarray:
        return np.zeros(x.shape[:-1]) if potential is None else np.asarray(potential(x))

    def dU(x: np.ndarray) -> np.ndarray:
        return np.zeros(x.shape) if potential_grad is None else np.asarray(potential_grad(x))

    def value(x: np.ndarray, v: np.ndarray) -> np.ndarray:
        s = manifold.sq_norm(x, v)
        return 0.5 * s + 0.25 * s * s - U(x)

    def dv(x: np.ndarray, v: np.ndarray) -> np.ndarray:
        s = manifold.sq_norm(x, v)
        return (1.0 + s)[..., None] * np.einsum("...ij,...j->...i", manifold.metric_tensor(x), v)

    def dx(x: np.ndarray, v: np.ndarray) -> np.ndarray:
        s = manifold.sq_norm(x, v)
        return (0.5 * (1.0 + s))[..., None] * manifold.metric_quadratic_derivative(x, v) - dU(x)

    def hessian(x: np.ndarray, v: np.ndarray) -> np.ndarray:
        G = np.broadcast_to(manifold.metric_tensor(x), v.shape + (v.shape[-1],))
        s = manifold.sq_norm(x, v)
        gv = np.einsum("...ij,...j->...i", G, v)
        return (1.0 + s)[..., None, None] * G + 2.0 * gv[..., :, None] * gv[..., None, :]

    callbacks = LagrangianCallbacks(value=value, dv=dv, dx=dx, hessian=hessian, name="mechanical")
    return CustomLagrangian(manifold, callbacks, settings.legendre_tolerance, settings.legendre_max_iter)


def load_entry_point(entry_point: str) -> Callable[[ManifoldModel], Union[LagrangianCallbacks, LagrangianModel]]:
    module_name, _, attribute = entry_point.partition(":")
    if not module_name or not attribute:
        raise ConfigError(f"entry point '{entry_point}' is not of the form module:factory", key="lagrangian.entry_point")
    try:
        module = importlib.import_module(module_name)
        return getattr(module, attribute)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"cannot load entry point '{entry_point}': {e}", key="lagrangian.entry_point")


def build_lagrangian(
    spec: LagrangianSpec, manifold: ManifoldModel, settings: SolverSettings = DEFAULT_SETTINGS
) -> LagrangianModel:
    if spec.kind == LagrangianKind.POWER_METRIC:
        return PowerMetricLagrangian(manifold, spec.r)
    factory = load_entry_point(spec.entry_point or "")
    produced = factory(manifold)
    if isinstance(produced, LagrangianModel):
        return produced
    if isinstance(produced, LagrangianCallbacks):
        return CustomLagrangian(manifold, produced, settings.legendre_tolerance, settings.legendre_max_iter)
    raise ConfigError("entry point factory must return LagrangianCallbacks", key="lagrangian.entry_point")
