"""Chart-based complete Riemannian manifolds.

Each model uses a single global chart: the identity on R^n, the fundamental
domain [0,1)^n of the flat torus, stereographic projection from the south
pole for the round sphere, and the unit disk for the Poincare model of the
hyperbolic plane.  Array-level methods accept leading batch axes and are
what the flows and solvers use; the Point/Tangent methods implement the
public operations on single points.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Any, Mapping, Optional

import numpy as np

from app.errors import AmbiguityError, DomainError
from app.models import ManifoldKind, ManifoldSpec

logger = logging.getLogger(__name__)

ANTIPODAL_TOLERANCE = 1e-9
CUT_LOCUS_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class Point:
    coords: np.ndarray
    chart_id: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=float).reshape(-1))

    @property
    def dim(self) -> int:
        return int(self.coords.shape[0])

    def __repr__(self) -> str:
        return f"Point({self.coords.tolist()})"


@dataclass(frozen=True, eq=False)
class Tangent:
    base: Point
    components: np.ndarray

    def __post_init__(self) -> None:
        components = np.asarray(self.components, dtype=float).reshape(-1)
        if components.shape != self.base.coords.shape:
            raise DomainError("tangent components do not match the base point dimension")
        if not np.all(np.isfinite(components)):
            raise DomainError("tangent components must be finite")
        object.__setattr__(self, "components", components)


def quadratic_form(matrix: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...ij,...j->...", u, matrix, v)


class ManifoldModel:
    """Base class: subclasses provide the chart geometry on coordinate arrays"""

    kind: ManifoldKind

    def __init__(self, dim: int, params: Optional[Mapping[str, float]] = None):
        self.dim = int(dim)
        self.params: dict[str, float] = dict(params or {})

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, params={self.params})"

    @property
    def spec(self) -> ManifoldSpec:
        return ManifoldSpec(kind=self.kind, dim=self.dim, params=self.params)

    @property
    def is_flat(self) -> bool:
        return False

    # array-level geometry -------------------------------------------------

    def check_coords(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.dim:
            raise DomainError(f"expected {self.dim} chart coordinates, got {x.shape[-1]}")
        if not np.all(np.isfinite(x)):
            raise DomainError("chart coordinates must be finite")

    def canonicalize(self, x: np.ndarray) -> np.ndarray:
        return x

    def metric_tensor(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def metric_inverse(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.metric_tensor(x))

    def metric_quadratic_derivative(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Components k of v^T (d_k G) v"""
        raise NotImplementedError

    def exp_coords(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dist_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def lifts(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Chart representatives of y that a curve from x may end on, nearest first"""
        return y[None, :]

    def cut_locus(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """True where y is joined to x by more than one minimizing geodesic"""
        return np.zeros(np.broadcast_shapes(x.shape, y.shape)[:-1], dtype=bool)

    def sq_norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return quadratic_form(self.metric_tensor(x), v, v)

    def pairwise_dist(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        return self.dist_coords(xs[:, None, :], ys[None, :, :])

    # point-level operations -----------------------------------------------

    def point(self, coords: Any) -> Point:
        x = np.asarray(coords, dtype=float).reshape(-1)
        self.check_coords(x)
        return Point(self.canonicalize(x))

    def tangent(self, base: Point, components: Any) -> Tangent:
        return Tangent(base, np.asarray(components, dtype=float))

    def metric(self, x: Point, u: Any, v: Any) -> float:
        self.check_coords(x.coords)
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return float(quadratic_form(self.metric_tensor(x.coords), u, v))

    def norm(self, v: Tangent) -> float:
        return float(np.sqrt(max(self.metric(v.base, v.components, v.components), 0.0)))

    def exp(self, v: Tangent, t: float = 1.0) -> Point:
        if t < 0:
            raise DomainError("exp is evaluated for t >= 0 only", t=t)
        self.check_coords(v.base.coords)
        if t == 0 or not np.any(v.components):
            return v.base
        return self.point(self.exp_coords(v.base.coords, t * v.components))

    def log(self, x: Point, y: Point) -> Tangent:
        self.check_coords(x.coords)
        self.check_coords(y.coords)
        return Tangent(x, self.log_coords(x.coords, y.coords))

    def dist(self, x: Point, y: Point) -> float:
        self.check_coords(x.coords)
        self.check_coords(y.coords)
        return float(self.dist_coords(x.coords, y.coords))


class EuclideanSpace(ManifoldModel):
    kind = ManifoldKind.EUCLIDEAN

    @property
    def is_flat(self) -> bool:
        return True

    def metric_tensor(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.eye(self.dim), x.shape + (self.dim,))

    def metric_inverse(self, x: np.ndarray) -> np.ndarray:
        return self.metric_tensor(x)

    def metric_quadratic_derivative(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(x.shape, v.shape))

    def sq_norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.sum(v * v, axis=-1)

    def exp_coords(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return x + v

    def log_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return y - x

    def dist_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.linalg.norm(y - x, axis=-1)


class FlatTorus(EuclideanSpace):
    """R^n / Z^n with the flat metric; coordinates live in [0,1)^n"""

    kind = ManifoldKind.TORUS

    def __init__(self, dim: int, params: Optional[Mapping[str, float]] = None):
        super().__init__(dim, params)
        self._translates = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=self.dim)))

    def canonicalize(self, x: np.ndarray) -> np.ndarray:
        wrapped = x - np.floor(x)
        return np.where(wrapped >= 1.0, wrapped - 1.0, wrapped)

    def exp_coords(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.canonicalize(x + v)

    def _displacements(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        # all 3^n lattice translates of y - x, on a new axis before the coordinates
        diff = self.canonicalize(y) - self.canonicalize(x)
        return diff[..., None, :] + self._translates

    def log_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        displacements = self._displacements(x, y)
        nearest = np.argmin(np.linalg.norm(displacements, axis=-1), axis=-1)
        return np.take_along_axis(displacements, nearest[..., None, None], axis=-2)[..., 0, :]

    def dist_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.min(np.linalg.norm(self._displacements(x, y), axis=-1), axis=-1)

    def cut_locus(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        # two lattice translates of y tie for the shortest displacement
        lengths = np.sort(np.linalg.norm(self._displacements(x, y), axis=-1), axis=-1)
        return lengths[..., 1] - lengths[..., 0] <= CUT_LOCUS_TOLERANCE * (1.0 + lengths[..., 0])

    def lifts(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        displacements = self._displacements(x, y)
        order = np.argsort(np.linalg.norm(displacements, axis=-1), kind="stable")
        return x + displacements[order]


class ConformalModel(ManifoldModel):
    """Metrics of the form g = f(x) * identity in the chart"""

    def conformal_factor(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def conformal_gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def metric_tensor(self, x: np.ndarray) -> np.ndarray:
        return self.conformal_factor(x)[..., None, None] * np.eye(self.dim)

    def metric_inverse(self, x: np.ndarray) -> np.ndarray:
        return np.eye(self.dim) / self.conformal_factor(x)[..., None, None]

    def metric_quadratic_derivative(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.conformal_gradient(x) * np.sum(v * v, axis=-1)[..., None]

    def sq_norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.conformal_factor(x) * np.sum(v * v, axis=-1)


class RoundSphere(ConformalModel):
    """Sphere of radius R in the stereographic chart from the south pole (north pole at the origin)"""

    kind = ManifoldKind.SPHERE2

    def __init__(self, dim: int = 2, params: Optional[Mapping[str, float]] = None):
        super().__init__(2, params)
        self.radius = float(self.params.setdefault("radius", 1.0))

    def conformal_factor(self, x: np.ndarray) -> np.ndarray:
        s = np.sum(x * x, axis=-1)
        return 4.0 * self.radius**2 / (1.0 + s) ** 2

    def conformal_gradient(self, x: np.ndarray) -> np.ndarray:
        s = np.sum(x * x, axis=-1)
        return (-16.0 * self.radius**2 / (1.0 + s) ** 3)[..., None] * x

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Unit-sphere point of chart coordinates x"""
        s = np.sum(x * x, axis=-1)
        d = 1.0 + s
        return np.concatenate([2.0 * x / d[..., None], ((1.0 - s) / d)[..., None]], axis=-1)

    def project(self, p: np.ndarray) -> np.ndarray:
        denominator = 1.0 + p[..., 2]
        if np.any(denominator < 1e-12):
            raise DomainError("geodesic reaches the projection pole of the stereographic chart")
        return p[..., :2] / denominator[..., None]

    def _jacobian(self, x: np.ndarray) -> np.ndarray:
        # d(embed)/dx, shape (..., 3, 2); columns are orthogonal with length 2/(1+s)
        s = np.sum(x * x, axis=-1)
        d = 1.0 + s
        top = 2.0 * np.eye(2) / d[..., None, None] - 4.0 * x[..., :, None] * x[..., None, :] / (d**2)[..., None, None]
        bottom = (-4.0 * x / (d**2)[..., None])[..., None, :]
        return np.concatenate([top, bottom], axis=-2)

    def exp_coords(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        p = self.embed(x)
        w = np.einsum("...ij,...j->...i", self._jacobian(x), v)
        theta = np.linalg.norm(w, axis=-1)
        moved = np.cos(theta)[..., None] * p + np.sinc(theta / np.pi)[..., None] * w
        return self.project(moved)

    def _angle(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p, q = self.embed(x), self.embed(y)
        return np.arctan2(np.linalg.norm(np.cross(p, q), axis=-1), np.sum(p * q, axis=-1))

    def log_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p, q = self.embed(x), self.embed(y)
        cos_theta = np.sum(p * q, axis=-1)
        theta = np.arctan2(np.linalg.norm(np.cross(p, q), axis=-1), cos_theta)
        if np.any(np.pi - theta < ANTIPODAL_TOLERANCE):
            raise AmbiguityError("log is not unique for antipodal points on the sphere")
        w = (q - cos_theta[..., None] * p) / np.sinc(theta / np.pi)[..., None]
        scale = (2.0 / (1.0 + np.sum(x * x, axis=-1))) ** 2
        return np.einsum("...ji,...j->...i", self._jacobian(x), w) / scale[..., None]

    def dist_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.radius * self._angle(x, y)

    def cut_locus(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.pi - self._angle(x, y) < ANTIPODAL_TOLERANCE

    def antipodal(self, x: np.ndarray, y: np.ndarray) -> bool:
        return bool(np.any(self.cut_locus(x, y)))

    def great_circle_length(self) -> float:
        return 2.0 * np.pi * self.radius


class PoincareDisk(ConformalModel):
    """Hyperbolic plane in the unit disk with g = 4 (1 - |x|^2)^-2 identity"""

    kind = ManifoldKind.HYPERBOLIC2

    def __init__(self, dim: int = 2, params: Optional[Mapping[str, float]] = None):
        super().__init__(2, params)

    def check_coords(self, x: np.ndarray) -> None:
        super().check_coords(x)
        if np.any(np.sum(x * x, axis=-1) >= 1.0):
            raise DomainError("Poincare disk coordinates must satisfy |x| < 1")

    def conformal_factor(self, x: np.ndarray) -> np.ndarray:
        return 4.0 / (1.0 - np.sum(x * x, axis=-1)) ** 2

    def conformal_gradient(self, x: np.ndarray) -> np.ndarray:
        return (16.0 / (1.0 - np.sum(x * x, axis=-1)) ** 3)[..., None] * x

    @staticmethod
    def mobius_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        ab = np.sum(a * b, axis=-1)
        a2 = np.sum(a * a, axis=-1)
        b2 = np.sum(b * b, axis=-1)
        numerator = (1.0 + 2.0 * ab + b2)[..., None] * a + (1.0 - a2)[..., None] * b
        return numerator / (1.0 + 2.0 * ab + a2 * b2)[..., None]

    def exp_coords(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        lam = 2.0 / (1.0 - np.sum(x * x, axis=-1))
        speed = np.linalg.norm(v, axis=-1)
        safe = np.where(speed > 0, speed, 1.0)
        step = (np.tanh(lam * speed / 2.0) / safe)[..., None] * v
        return self.mobius_add(x, step)

    def log_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        lam = 2.0 / (1.0 - np.sum(x * x, axis=-1))
        w = self.mobius_add(-x, y)
        size = np.linalg.norm(w, axis=-1)
        safe = np.where(size > 0, size, 1.0)
        return (2.0 / lam * np.arctanh(np.minimum(size, 1.0 - 1e-16)) / safe)[..., None] * w

    def dist_coords(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        size = np.linalg.norm(self.mobius_add(-x, y), axis=-1)
        return 2.0 * np.arctanh(np.minimum(size, 1.0 - 1e-16))


MANIFOLD_TYPES: dict[ManifoldKind, type[ManifoldModel]] = {
    ManifoldKind.EUCLIDEAN: EuclideanSpace,
    ManifoldKind.TORUS: FlatTorus,
    ManifoldKind.SPHERE2: RoundSphere,
    ManifoldKind.HYPERBOLIC2: PoincareDisk,
}


def build_manifold(spec: ManifoldSpec) -> ManifoldModel:
    manifold = MANIFOLD_TYPES[spec.kind](spec.dim, spec.params)
    logger.debug("built %r", manifold)
    return manifold


def builtin_manifolds() -> list[ManifoldModel]:
    return [EuclideanSpace(2), FlatTorus(2), RoundSphere(), PoincareDisk()]
