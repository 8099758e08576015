"""Sampling certificates for semi-concave functions on chart boxes.

A field is any callable mapping an (N, n) array of chart points to N
values.  Linear moduli w(r) = k r are checked as the quadratic slack
k |y - x|^2; supporting covectors are central-difference gradients.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from app.errors import InputError, NumericalError, PreconditionError
from app.models import CertificateReport, CheckStatus, ModulusCertificate, ModulusKind

logger = logging.getLogger(__name__)

ScalarField = Callable[[np.ndarray], np.ndarray]
GradientField = Callable[[np.ndarray], np.ndarray]

CERTIFICATE_TOLERANCE = 1e-7
CONTACT_TOLERANCE = 1e-10
GRADIENT_AGREEMENT = 1e-5


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape or np.any(upper <= lower):
            raise InputError("box bounds must satisfy lower < upper componentwise")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def cube(cls, dim: int, low: float, high: float) -> "Box":
        return cls(np.full(dim, low), np.full(dim, high))

    @property
    def dim(self) -> int:
        return int(self.lower.shape[0])

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def grid(self, per_axis: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(self.lower, self.upper)]
        return np.array(list(itertools.product(*axes)))

    def uniform(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((count, self.dim))

    def sample(self, rng: np.random.Generator, samples: int) -> np.ndarray:
        """Grid plus uniform random points, about ``samples`` in total"""
        per_axis = max(2, int(round((samples / 2) ** (1.0 / self.dim))))
        grid = self.grid(per_axis)
        return np.vstack([grid, self.uniform(rng, max(samples - len(grid), 1))])

    def shrink(self, fraction: float) -> "Box":
        margin = fraction * (self.upper - self.lower)
        return Box(self.lower + margin, self.upper - margin)


def _evaluate(f: ScalarField, X: np.ndarray) -> np.ndarray:
    values = np.asarray(f(X), dtype=float).reshape(-1)
    if not np.all(np.isfinite(values)):
        raise NumericalError("scalar field returned non-finite values", count=int(np.sum(~np.isfinite(values))))
    return values


def numerical_gradient(f: ScalarField, X: np.ndarray, h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradients of a field at the rows of X"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[1]
    step = h if h is not None else 1e-6 * (1.0 + float(np.max(np.abs(X))))
    columns = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        columns.append((_evaluate(f, X + e) - _evaluate(f, X - e)) / (2.0 * step))
    return np.stack(columns, axis=-1)


def _slacks(values: np.ndarray, covectors: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # slack[i, j] = f(x_j) - f(x_i) - l_i(x_j - x_i), distance[i, j] = |x_j - x_i|
    D = X[None, :, :] - X[:, None, :]
    slack = values[None, :] - values[:, None] - np.einsum("ik,ijk->ij", covectors, D)
    return slack, np.linalg.norm(D, axis=-1)


def _linear_certificate(
    values: np.ndarray, covectors: np.ndarray, X: np.ndarray, box: Box, k: float
) -> ModulusCertificate:
    slack, distance = _slacks(values, covectors, X)
    violation = float(np.max(slack - k * distance**2))
    tolerance = CERTIFICATE_TOLERANCE * max(1.0, float(np.max(np.abs(values))))
    return ModulusCertificate(
        kind=ModulusKind.LINEAR,
        k=k,
        lower=box.lower.tolist(),
        upper=box.upper.tolist(),
        samples=len(X),
        max_violation=violation,
        tolerance=tolerance,
        status=CheckStatus.PASS if violation <= tolerance else CheckStatus.FAIL,
    )


def certify_semiconcave(
    f: ScalarField, box: Box, samples: int, k: float, rng: Optional[np.random.Generator] = None
) -> ModulusCertificate:
    if k < 0:
        raise InputError("linear semi-concavity modulus needs k >= 0", k=k)
    rng = rng if rng is not None else np.random.default_rng(0)
    X = box.sample(rng, samples)
    certificate = _linear_certificate(_evaluate(f, X), numerical_gradient(f, X), X, box, k)
    logger.debug("certify_semiconcave k=%g: violation %.3e (%s)", k, certificate.max_violation, certificate.status.value)
    return certificate


def estimate_linear_modulus(
    f: ScalarField, box: Box, samples: int, rng: Optional[np.random.Generator] = None
) -> float:
    """Smallest k whose quadratic slack covers every sampled pair"""
    rng = rng if rng is not None else np.random.default_rng(0)
    X = box.sample(rng, samples)
    slack, distance = _slacks(_evaluate(f, X), numerical_gradient(f, X), X)
    mask = distance > 1e-9
    return float(max(0.0, np.max(slack[mask] / distance[mask] ** 2)))


def tabulated_modulus(
    f: ScalarField, box: Box, samples: int, bins: int = 16, rng: Optional[np.random.Generator] = None
) -> ModulusCertificate:
    """Non-decreasing w with w(0) = 0 read off the sampled slacks"""
    rng = rng if rng is not None else np.random.default_rng(0)
    X = box.sample(rng, samples)
    values = _evaluate(f, X)
    slack, distance = _slacks(values, numerical_gradient(f, X), X)
    radii = np.linspace(0.0, box.diameter, bins + 1)
    mask = distance > 1e-12
    ratio = np.maximum(slack[mask] / distance[mask], 0.0)
    which = np.clip(np.searchsorted(radii, distance[mask], side="left"), 1, bins)
    omega = np.zeros(bins + 1)
    np.maximum.at(omega, which, ratio)
    omega = np.maximum.accumulate(omega)
    certificate = ModulusCertificate(
        kind=ModulusKind.TABULATED,
        radii=radii.tolist(),
        omega=omega.tolist(),
        lower=box.lower.tolist(),
        upper=box.upper.tolist(),
        samples=len(X),
        tolerance=CERTIFICATE_TOLERANCE * max(1.0, float(np.max(np.abs(values)))),
    )
    # each pair is covered by the value at the upper edge of its bin
    allowed = distance * omega[np.clip(np.searchsorted(radii, distance, side="left"), 0, bins)]
    violation = float(np.max(slack - allowed))
    return certificate.model_copy(
        update={
            "max_violation": violation,
            "status": CheckStatus.PASS if violation <= certificate.tolerance else CheckStatus.FAIL,
        }
    )


def sum_certificate(first: ModulusCertificate, second: ModulusCertificate) -> ModulusCertificate:
    if not (first.passed and second.passed):
        raise PreconditionError("both summands need passing certificates")
    if first.lower != second.lower or first.upper != second.upper:
        raise PreconditionError("certificates must share the same box")
    common = dict(
        lower=first.lower,
        upper=first.upper,
        samples=min(first.samples, second.samples),
        max_violation=first.max_violation + second.max_violation,
        tolerance=first.tolerance + second.tolerance,
    )
    if first.kind == second.kind == ModulusKind.LINEAR:
        return ModulusCertificate(kind=ModulusKind.LINEAR, k=(first.k or 0.0) + (second.k or 0.0), **common)
    radii = np.union1d(
        first.radii or [0.0, float(np.linalg.norm(np.subtract(first.upper, first.lower)))],
        second.radii or [0.0],
    )

    def omega_of(certificate: ModulusCertificate) -> np.ndarray:
        if certificate.kind == ModulusKind.LINEAR:
            return (certificate.k or 0.0) * radii
        return np.interp(radii, certificate.radii, certificate.omega)

    return ModulusCertificate(
        kind=ModulusKind.TABULATED, radii=radii.tolist(), omega=(omega_of(first) + omega_of(second)).tolist(), **common
    )


def inf_family_certificate(
    family: Sequence[ScalarField],
    box: Box,
    k: float,
    samples: int = 400,
    rng: Optional[np.random.Generator] = None,
) -> tuple[ScalarField, ModulusCertificate]:
    """Pointwise infimum of a uniformly k-semi-concave family keeps the modulus k"""
    if not family:
        raise InputError("inf_family_certificate needs a non-empty family")
    rng = rng if rng is not None else np.random.default_rng(0)
    members = []
    for index, member in enumerate(family):
        certificate = certify_semiconcave(member, box, samples, k, np.random.default_rng(rng.integers(2**32)))
        if not certificate.passed:
            raise PreconditionError("family member is not certified", member=index, violation=certificate.max_violation)
        members.append(certificate)
    if len(family) == 1:
        return family[0], members[0]

    def infimum(X: np.ndarray) -> np.ndarray:
        return np.min(np.stack([_evaluate(member, X) for member in family]), axis=0)

    X = box.sample(rng, samples)
    values = np.stack([_evaluate(member, X) for member in family])
    winner = np.argmin(values, axis=0)
    covectors = np.empty_like(X)
    for index, member in enumerate(family):
        rows = winner == index
        if np.any(rows):
            covectors[rows] = numerical_gradient(member, X[rows])
    return infimum, _linear_certificate(values[winner, np.arange(len(X))], covectors, X, box, k)


def lipschitz_constant(X: np.ndarray, Y: np.ndarray) -> float:
    """max |Y_i - Y_j| / |X_i - X_j| over distinct pairs"""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    if len(X) < 2:
        return 0.0
    dx = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)
    dy = np.linalg.norm(Y[:, None, :] - Y[None, :, :], axis=-1)
    mask = dx > 1e-12
    return float(np.max(dy[mask] / dx[mask])) if np.any(mask) else 0.0


def stable_lipschitz(X: np.ndarray, Y: np.ndarray, factor: float = 2.0) -> tuple[float, float, bool]:
    """Estimate on all pairs, estimate on the first half, and whether the first stays within factor of the second"""
    full = lipschitz_constant(X, Y)
    half = lipschitz_constant(X[: max(2, len(X) // 2)], Y[: max(2, len(Y) // 2)])
    stable = bool(np.isfinite(full)) and (len(X) < 4 or full <= factor * half + 1e-12)
    return full, half, stable


@dataclass(frozen=True)
class LipschitzEstimate:
    empirical: float
    bound: float


def lipschitz_estimate(
    f: ScalarField, box: Box, samples: int, k: Optional[float] = None, rng: Optional[np.random.Generator] = None
) -> LipschitzEstimate:
    """Empirical Lipschitz constant and the bound max |l_x| + w(diam) for a k-semi-concave field"""
    rng = rng if rng is not None else np.random.default_rng(0)
    X = box.sample(rng, samples)
    values = _evaluate(f, X)
    gradients = numerical_gradient(f, X)
    modulus = k if k is not None else estimate_linear_modulus(f, box, samples, np.random.default_rng(rng.integers(2**32)))
    bound = float(np.max(np.linalg.norm(gradients, axis=-1)) + modulus * box.diameter)
    return LipschitzEstimate(lipschitz_constant(X, values), bound)


def nondifferentiability_fraction(
    f: ScalarField, box: Box, per_axis: int, threshold: float = 1e-3, h: float = 1e-6
) -> float:
    """Fraction of grid points where a one-sided difference quotient pair disagrees by more than threshold"""
    X = box.grid(per_axis)
    values = _evaluate(f, X)
    disagree = np.zeros(len(X), dtype=bool)
    for k in range(box.dim):
        e = np.zeros(box.dim)
        e[k] = h
        forward = (_evaluate(f, X + e) - values) / h
        backward = (values - _evaluate(f, X - e)) / h
        disagree |= np.abs(forward - backward) > threshold
    return float(np.mean(disagree))


def touching_criterion(
    lower_field: ScalarField,
    upper_field: ScalarField,
    contact: np.ndarray,
    box: Box,
    samples: int = 400,
    rng: Optional[np.random.Generator] = None,
) -> CertificateReport:
    """A semi-convex function below a semi-concave one is differentiable where they touch"""
    rng = rng if rng is not None else np.random.default_rng(0)
    contact = np.atleast_2d(np.asarray(contact, dtype=float))
    X = box.sample(rng, samples)
    below, above = _evaluate(lower_field, X), _evaluate(upper_field, X)
    scale = max(1.0, float(np.max(np.abs(above))))
    excess = float(np.max(below - above))
    if excess > CONTACT_TOLERANCE * scale:
        raise PreconditionError("lower function exceeds the upper one", excess=excess)
    gap = float(np.max(np.abs(_evaluate(lower_field, contact) - _evaluate(upper_field, contact))))
    if gap > CONTACT_TOLERANCE * scale:
        raise PreconditionError("functions do not touch on the contact set", gap=gap)

    grad_lower = numerical_gradient(lower_field, contact)
    grad_upper = numerical_gradient(upper_field, contact)
    disagreement = float(np.max(np.linalg.norm(grad_lower - grad_upper, axis=-1)))
    lipschitz, lipschitz_half, stable = stable_lipschitz(contact, grad_lower)
    passed = disagreement <= GRADIENT_AGREEMENT and stable
    return CertificateReport.of(
        "touching_criterion",
        passed,
        {"gradient_disagreement": disagreement, "gradient_lipschitz": lipschitz, "gradient_lipschitz_half": lipschitz_half},
        {
            "contact_points": int(len(contact)),
            "semiconvexity_modulus": estimate_linear_modulus(lambda Z: -_evaluate(lower_field, Z), box, samples, rng),
            "semiconcavity_modulus": estimate_linear_modulus(upper_field, box, samples, rng),
        },
    )
