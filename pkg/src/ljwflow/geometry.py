"""Embedded manifolds and first-order Riemannian calculus.

Manifolds are represented by ambient-coordinate data: a tangent projector
field P(x), a retraction, and a membership test.  Two families cover the
shipped scenarios: the unit sphere in R^3 and flat periodic charts
(circle, torus) where the projector is the identity and the retraction
wraps coordinates into [0, 2*pi).

All vector operations accept either a single point of shape (N,) or a
batch of shape (..., N); reductions run over the last axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import OffManifoldError, StepSizeError, UnsupportedOperationError

TWO_PI = 2.0 * np.pi

# Central-difference step for first derivatives: eps**(1/3) balances
# truncation against rounding for smooth fields.
FD_STEP = float(np.finfo(float).eps ** (1.0 / 3.0))


@dataclass(frozen=True)
class EmbeddedManifold:
    """Compact manifold given in ambient coordinates.

    projector(x) returns the N x N orthogonal projector onto the tangent
    space; retract_point(z) maps ambient points near M back onto M and
    dretract(z, w) is its derivative.  For periodic charts ``wrap``
    canonicalises coordinates; elsewhere it is the identity.
    """

    name: str
    ambient_dim: int
    intrinsic_dim: int
    projector: Callable[[np.ndarray], np.ndarray]
    retract_point: Callable[[np.ndarray], np.ndarray]
    dretract: Callable[[np.ndarray, np.ndarray], np.ndarray]
    membership: Callable[[np.ndarray, float], np.ndarray]
    distance: Callable[[np.ndarray, np.ndarray], np.ndarray]
    tangent_basis: Callable[[np.ndarray], np.ndarray]
    wrap: Callable[[np.ndarray], np.ndarray]
    periodic: bool = False
    membership_tol: float = 1e-9

    def retract(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """First-order retraction: retract(x, 0) == x exactly."""
        return self.retract_point(np.asarray(x) + np.asarray(v))

    def contains(self, x: np.ndarray, tol: float | None = None) -> bool:
        t = self.membership_tol if tol is None else tol
        return bool(np.all(self.membership(np.asarray(x, dtype=float), t)))

    def require(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.contains(x):
            raise OffManifoldError(
                f"point {x!r} fails the membership test of {self.name}")
        return x

    def project(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Apply P(x) to v (no membership check; see tangent_project)."""
        P = self.projector(x)
        return P @ np.asarray(v, dtype=float)


@dataclass
class VectorField:
    """Tangent vector field on a manifold, pointwise evaluator plus an
    optional analytic directional derivative.

    ``derivative(x, v)`` must return the ambient directional derivative
    of the evaluator along v (the plain Jacobian action, no projection).
    """

    fn: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    differentiable: bool = True
    name: str = "field"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(x), dtype=float)


def constant_field(vec: np.ndarray, name: str = "const") -> VectorField:
    v = np.asarray(vec, dtype=float)
    return VectorField(fn=lambda x: v.copy(),
                       derivative=lambda x, d: np.zeros_like(v),
                       name=name)


# ---------------------------------------------------------------------------
# factories


def unit_sphere() -> EmbeddedManifold:
    """Unit sphere S^2 in R^3 with closest-point retraction."""

    def projector(x):
        x = np.asarray(x, dtype=float)
        return np.eye(3) - np.outer(x, x)

    def retract_point(z):
        z = np.asarray(z, dtype=float)
        nz = np.linalg.norm(z, axis=-1, keepdims=True)
        if np.any(nz < 0.5):
            raise StepSizeError("step left the retraction domain of S^2")
        return z / nz

    def dretract(z, w):
        z = np.asarray(z, dtype=float)
        w = np.asarray(w, dtype=float)
        nz = np.linalg.norm(z, axis=-1, keepdims=True)
        zh = z / nz
        return (w - zh * np.sum(zh * w, axis=-1, keepdims=True)) / nz

    def membership(x, tol):
        return np.abs(np.linalg.norm(x, axis=-1) - 1.0) <= tol

    def distance(x, y):
        c = np.clip(np.sum(np.asarray(x) * np.asarray(y), axis=-1), -1.0, 1.0)
        return np.arccos(c)

    def tangent_basis(x):
        x = np.asarray(x, dtype=float)
        i0 = int(np.argmin(np.abs(x)))
        e = np.zeros(3)
        e[i0] = 1.0
        u = e - e.dot(x) * x
        u /= np.linalg.norm(u)
        return np.stack([u, np.cross(x, u)], axis=1)

    return EmbeddedManifold(
        name="sphere2", ambient_dim=3, intrinsic_dim=2,
        projector=projector, retract_point=retract_point, dretract=dretract,
        membership=membership, distance=distance,
        tangent_basis=tangent_basis, wrap=lambda x: np.asarray(x, dtype=float),
        periodic=False)


def flat_torus(dim: int, name: str | None = None) -> EmbeddedManifold:
    """Flat torus as a periodic chart on [0, 2*pi)^dim; P(x) = I."""

    eye = np.eye(dim)

    def projector(x):
        return eye.copy()

    def wrap(x):
        return np.mod(np.asarray(x, dtype=float), TWO_PI)

    def membership(x, tol):
        return np.all(np.isfinite(np.asarray(x, dtype=float)), axis=-1)

    def distance(x, y):
        d = np.abs(wrap(x) - wrap(y))
        d = np.minimum(d, TWO_PI - d)
        return np.linalg.norm(d, axis=-1)

    return EmbeddedManifold(
        name=name or f"torus{dim}", ambient_dim=dim, intrinsic_dim=dim,
        projector=projector, retract_point=wrap,
        dretract=lambda z, w: np.asarray(w, dtype=float),
        membership=membership, distance=distance,
        tangent_basis=lambda x: eye.copy(), wrap=wrap, periodic=True)


def circle() -> EmbeddedManifold:
    """Circle as the 1-dimensional periodic chart."""
    return flat_torus(1, name="circle")


# ---------------------------------------------------------------------------
# first-order operations


def tangent_project(man: EmbeddedManifold, x: np.ndarray,
                    v: np.ndarray) -> np.ndarray:
    """Orthogonal projection of an ambient vector onto T_x M."""
    x = man.require(x)
    return man.project(x, v)


def directional_derivative(man: EmbeddedManifold,
                           fn: Callable[[np.ndarray], np.ndarray],
                           x: np.ndarray, v: np.ndarray,
                           h: float | None = None) -> np.ndarray:
    """Central finite difference of a (vector- or matrix-valued) map
    along the retraction curve through x with velocity v."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return np.zeros_like(np.asarray(fn(x), dtype=float))
    if h is None:
        h = FD_STEP * max(1.0, float(np.linalg.norm(x)))
    step = h / nv
    fp = np.asarray(fn(man.retract(x, step * v)), dtype=float)
    fm = np.asarray(fn(man.retract(x, -step * v)), dtype=float)
    return (fp - fm) / (2.0 * step)


def _field_derivative(man, Z: VectorField, x, v):
    if not Z.differentiable:
        raise UnsupportedOperationError(
            f"field {Z.name!r} is flagged non-differentiable")
    if Z.derivative is not None:
        return np.asarray(Z.derivative(x, v), dtype=float)
    return directional_derivative(man, Z.fn, x, v)


def levi_civita_derivative(man: EmbeddedManifold, Z: VectorField,
                           x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Covariant derivative of the ambient-induced metric connection:
    project the ambient directional derivative, P(x) DZ(x) v."""
    x = man.require(x)
    v = np.asarray(v, dtype=float)
    return man.project(x, _field_derivative(man, Z, x, v))


def levi_civita_transport(man: EmbeddedManifold, points: np.ndarray,
                          v0: np.ndarray,
                          max_step: float = 0.7) -> np.ndarray:
    """Discrete parallel transport along a polygonal path on M.

    Per step: project the previous vector with P(x_{k+1}), rescale to
    preserve the norm.  Raises StepSizeError when consecutive points are
    farther apart than ``max_step``.
    """
    pts = np.asarray(points, dtype=float)
    out = np.empty((pts.shape[0],) + np.shape(v0))
    out[0] = v0
    for k in range(pts.shape[0] - 1):
        if float(man.distance(pts[k], pts[k + 1])) > max_step:
            raise StepSizeError(
                f"transport step {k} exceeds max_step={max_step}")
        w = man.project(pts[k + 1], out[k])
        n0 = np.linalg.norm(out[k])
        n1 = np.linalg.norm(w)
        out[k + 1] = w * (n0 / n1) if n1 > 1e-300 else w
    return out


def lie_bracket(man: EmbeddedManifold, Z1: VectorField, Z2: VectorField,
                x: np.ndarray) -> np.ndarray:
    """[Z1, Z2](x) = DZ2(x) Z1(x) - DZ1(x) Z2(x)."""
    x = man.require(x)
    return (_field_derivative(man, Z2, x, Z1(x))
            - _field_derivative(man, Z1, x, Z2(x)))


# ---------------------------------------------------------------------------
# deterministic low-discrepancy sampling (used by validation and checks)


def halton_points(man: EmbeddedManifold, count: int,
                  skip: int = 20) -> np.ndarray:
    """Deterministic quasi-random points on M (Halton sequence in the
    chart, area-uniform on the sphere)."""
    from scipy.stats import qmc

    dim = man.intrinsic_dim
    sampler = qmc.Halton(d=dim, scramble=False)
    if skip:
        sampler.fast_forward(skip)
    u = sampler.random(count)
    if man.periodic:
        return u * TWO_PI
    if man.name == "sphere2":
        z = 2.0 * u[:, 0] - 1.0
        phi = TWO_PI * u[:, 1]
        r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    raise UnsupportedOperationError(f"no sampler for manifold {man.name}")
