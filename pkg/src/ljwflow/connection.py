"""Geometry induced by a diffusion coefficient.

A diffusion system carries an ambient N x m coefficient matrix X(x) whose
columns span the image subbundle I(X) inside the tangent bundle.  The
metric carried over from R^m through X, the adjoint Y(x), and the induced
metric connection on I(X) (together with its adjoint semi-connection,
curvature and Ricci contraction) are all computed here from X alone.

Differentiation is by central finite differences along retraction curves;
curvature comes from connection coefficients of the induced connection in
a tangent-space retraction chart, differenced once more.  Results are
cached per point; an oracle is deterministic for identical queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (OffManifoldError, PreconditionError,
                     RankDegeneracyError, SectionError,
                     UnsupportedScenarioError)
from .geometry import (EmbeddedManifold, VectorField, directional_derivative,
                       lie_bracket)

RANK_RTOL = 1e-8        # singular values below RANK_RTOL * sigma_max are zero
RANK_GAP = 10.0         # gray zone around the threshold triggers an error
SECTION_RTOL = 1e-6     # membership tolerance for sections of I(X)

# finite-difference steps: first-level (connection coefficients) and
# second-level (their chart derivatives, entering curvature)
H_FIRST = float(np.finfo(float).eps ** (1.0 / 3.0))
H_SECOND = 3e-4


@dataclass
class DiffusionSystem:
    """Diffusion data: coefficient X, drift A, and the carrier manifold."""

    manifold: EmbeddedManifold
    noise_dim: int
    coefficient: Callable[[np.ndarray], np.ndarray]   # x -> (N, m)
    drift: VectorField | None = None
    scenario_id: str = "custom"
    pack: "object | None" = None     # optional vectorized closed forms

    def coeff(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.coefficient(np.asarray(x, dtype=float)),
                          dtype=float)

    def drift_vec(self, x: np.ndarray) -> np.ndarray:
        if self.drift is None:
            return np.zeros(self.manifold.ambient_dim)
        return self.drift(x)


@dataclass(frozen=True)
class SubbundlePoint:
    """Pointwise data of the image subbundle I(X)_x.

    frame: ambient basis of I(X)_x, orthonormal in the induced metric;
    right: the matching orthonormal basis of (ker X)^perp in R^m;
    Y: ambient matrix of the metric adjoint of X(x) (kills the ambient
    orthocomplement of I(X)_x); e = Y X, the orthogonal projection of
    R^m onto (ker X)^perp.
    """

    x: np.ndarray
    rank: int
    frame: np.ndarray          # (N, r)
    right: np.ndarray          # (m, r)
    singular_values: np.ndarray
    Y: np.ndarray              # (m, N)
    e: np.ndarray              # (m, m)

    def coeffs(self, v: np.ndarray) -> np.ndarray:
        """Induced-metric coordinates of v in the frame (v in I(X)_x)."""
        return self.right.T @ (self.Y @ np.asarray(v, dtype=float))

    def lift(self, c: np.ndarray) -> np.ndarray:
        return self.frame @ np.asarray(c, dtype=float)

    def inner(self, u: np.ndarray, w: np.ndarray) -> float:
        """Induced metric on I(X)_x."""
        return float(self.coeffs(u) @ self.coeffs(w))

    def ambient_project(self, v: np.ndarray) -> np.ndarray:
        """Ambient-orthogonal projection onto I(X)_x (equals X Y v)."""
        return self.lift(self.coeffs(v))

    def section_residual(self, v: np.ndarray) -> float:
        return float(np.linalg.norm(v - self.ambient_project(v)))


def image_subbundle(sys: DiffusionSystem, x: np.ndarray) -> SubbundlePoint:
    """SVD factorisation of X(x) with an explicit rank-gap guard."""
    x = sys.manifold.require(x)
    Xm = sys.coeff(x)
    U, S, Vt = np.linalg.svd(Xm, full_matrices=False)
    smax = float(S[0]) if S.size else 0.0
    if smax == 0.0:
        raise RankDegeneracyError(
            f"coefficient vanishes at {x!r} in {sys.scenario_id}")
    tol = RANK_RTOL * smax
    gray = (S > tol / RANK_GAP) & (S < tol * RANK_GAP)
    if np.any(gray):
        raise RankDegeneracyError(
            f"ambiguous numerical rank at {x!r}: singular values {S!r} "
            f"fall inside the gray zone around {tol:.3e}")
    r = int(np.sum(S > tol))
    Ur, Sr, Vr = U[:, :r], S[:r], Vt[:r].T
    Y = Vr @ np.diag(1.0 / Sr) @ Ur.T
    return SubbundlePoint(
        x=np.array(x, dtype=float), rank=r, frame=Xm @ Vr, right=Vr,
        singular_values=Sr.copy(), Y=Y, e=Vr @ Vr.T)


def adjoint_Y(sys: DiffusionSystem, x: np.ndarray) -> np.ndarray:
    """Ambient matrix of the metric adjoint Y(x): I(X)_x -> R^m."""
    return image_subbundle(sys, x).Y


@dataclass(frozen=True)
class CurvatureMap:
    """Curvature of the induced connection for a fixed direction pair,
    as a linear map on I(X)_x in the induced-orthonormal frame."""

    sub: SubbundlePoint
    matrix: np.ndarray          # (r, r)

    def apply(self, w: np.ndarray) -> np.ndarray:
        if self.sub.section_residual(w) > SECTION_RTOL * (
                1.0 + float(np.linalg.norm(w))):
            raise SectionError("curvature argument is not in I(X)_x")
        return self.sub.lift(self.matrix @ self.sub.coeffs(w))


class ConnectionOracle:
    """Cached evaluator for the induced-connection calculus of a system.

    Construction is cheap; all fields are computed on demand and
    memoized, so identical queries return identical values.
    """

    def __init__(self, sys: DiffusionSystem,
                 expected_rank: int | None = None):
        self.system = sys
        self.manifold = sys.manifold
        self.expected_rank = expected_rank
        self._subs: dict[bytes, SubbundlePoint] = {}
        self._curv: dict[bytes, tuple] = {}
        self._ric: dict[bytes, np.ndarray] = {}

    # -- subbundle ---------------------------------------------------------

    def sub(self, x: np.ndarray) -> SubbundlePoint:
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        hit = self._subs.get(key)
        if hit is None:
            hit = image_subbundle(self.system, x)
            if (self.expected_rank is not None
                    and hit.rank != self.expected_rank):
                raise RankDegeneracyError(
                    f"rank {hit.rank} at {x!r}, expected "
                    f"{self.expected_rank}")
            self._subs[key] = hit
        return hit

    def check_section(self, Z: VectorField, x: np.ndarray) -> None:
        z = Z(x)
        res = self.sub(x).section_residual(z)
        if res > SECTION_RTOL * (1.0 + float(np.linalg.norm(z))):
            raise SectionError(
                f"field {Z.name!r} is not a section of I(X) at {x!r} "
                f"(residual {res:.3e})")

    # -- first-order calculus ----------------------------------------------

    def ljw_derivative(self, Z: VectorField, x: np.ndarray,
                       v: np.ndarray) -> np.ndarray:
        """Induced-connection covariant derivative of a section Z of
        I(X) along an arbitrary tangent direction v."""
        x = self.manifold.require(x)
        self.check_section(Z, x)

        def pulled(y):
            return self.sub(y).Y @ Z(y)

        d = directional_derivative(self.manifold, pulled, x, v)
        return self.system.coeff(x) @ d

    def adjoint_semi_derivative(self, Z1: VectorField, Z2: VectorField,
                                x: np.ndarray) -> np.ndarray:
        """Semi-connection derivative of Z1 along the I(X) direction
        Z2(x): induced derivative of Z2 along Z1 minus the bracket."""
        x = self.manifold.require(x)
        return (self.ljw_derivative(Z2, x, Z1(x))
                - lie_bracket(self.manifold, Z1, Z2, x))

    def semi_connector(self, x: np.ndarray, w: np.ndarray,
                       v: np.ndarray) -> np.ndarray:
        """Connector of the semi-connection: the correction making
        ambient differentiation along w in I(X)_x covariant on TM."""
        x = np.asarray(x, dtype=float)
        sub = self.sub(x)
        if sub.section_residual(w) > SECTION_RTOL * (
                1.0 + float(np.linalg.norm(w))):
            raise SectionError("semi-connection direction must lie in I(X)")
        c = sub.Y @ np.asarray(w, dtype=float)

        de = directional_derivative(self.manifold,
                                    lambda y: self.sub(y).e, x, v)
        dX = directional_derivative(self.manifold,
                                    lambda y: self.system.coeff(y), x, v)
        return self.system.coeff(x) @ (de @ c) - dX @ c

    # -- curvature -----------------------------------------------------------

    def _connection_coeffs(self, x, E, sub0, u, h1):
        """Connection coefficients Gamma[i, a, b] of the induced
        connection at chart point u, in the frame spanned by the
        coefficient applied to the centre's right-singular basis."""
        man = self.manifold
        n = E.shape[1]
        r = sub0.rank
        y = man.retract(x, E @ u)
        suby = self.sub(y)
        M = suby.e @ sub0.right                      # (m, r)
        Xy = self.system.coeff(y)
        G = np.empty((n, r, r))
        for i in range(n):
            up = u.copy(); up[i] += h1
            um = u.copy(); um[i] -= h1
            ep = self.sub(man.retract(x, E @ up)).e @ sub0.right
            em = self.sub(man.retract(x, E @ um)).e @ sub0.right
            d = (ep - em) / (2.0 * h1)
            rhs = suby.Y @ (Xy @ d)                  # (m, r)
            C, *_ = np.linalg.lstsq(M, rhs, rcond=None)
            G[i] = C
        return G

    def curvature_data(self, x: np.ndarray):
        """Cached curvature tensor R[i, j, a, b] at x: chart-direction
        pair (i, j), frame indices (a, b); plus chart basis and frame."""
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        hit = self._curv.get(key)
        if hit is not None:
            return hit
        man = self.manifold
        x = man.require(x)
        sub0 = self.sub(x)
        E = man.tangent_basis(x)
        n = E.shape[1]
        r = sub0.rank
        scale = max(1.0, float(np.linalg.norm(x)))
        h1 = H_FIRST * scale
        h2 = H_SECOND * scale
        G0 = self._connection_coeffs(x, E, sub0, np.zeros(n), h1)
        dG = np.empty((n, n, r, r))
        for i in range(n):
            up = np.zeros(n); up[i] = h2
            Gp = self._connection_coeffs(x, E, sub0, up, h1)
            Gm = self._connection_coeffs(x, E, sub0, -up, h1)
            dG[i] = (Gp - Gm) / (2.0 * h2)
        R = np.zeros((n, n, r, r))
        for i in range(n):
            for j in range(i + 1, n):
                Rij = dG[i][j] - dG[j][i] + G0[i] @ G0[j] - G0[j] @ G0[i]
                R[i, j] = Rij
                R[j, i] = -Rij
        data = (E, R, sub0)
        self._curv[key] = data
        return data

    def curvature(self, x: np.ndarray, u1: np.ndarray,
                  u2: np.ndarray) -> CurvatureMap:
        E, R, sub0 = self.curvature_data(x)
        b1 = E.T @ np.asarray(u1, dtype=float)
        b2 = E.T @ np.asarray(u2, dtype=float)
        mat = np.einsum("i,j,ijab->ab", b1, b2, R)
        return CurvatureMap(sub=sub0, matrix=mat)

    def ricci_matrix(self, x: np.ndarray) -> np.ndarray:
        """Ambient matrix of the Ricci contraction T_x M -> I(X)_x:
        trace of the curvature over an induced-orthonormal frame."""
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        hit = self._ric.get(key)
        if hit is not None:
            return hit
        E, R, sub0 = self.curvature_data(x)
        alpha = sub0.frame.T @ E              # (r, n): frame in chart coords
        M2 = np.einsum("ai,ijab->bj", alpha, R)
        mat = sub0.frame @ (M2 @ E.T)         # (N, N)
        self._ric[key] = mat
        return mat

    def ricci_sharp(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.ricci_matrix(x) @ np.asarray(u, dtype=float)

    # -- residual diagnostics ------------------------------------------------

    def reproducing_residual(self, x: np.ndarray, trials: int = 4,
                             seed: int = 0) -> float:
        """max |X Y v - v| over random unit v in I(X)_x."""
        sub = self.sub(x)
        rng = np.random.default_rng(seed)
        Xm = self.system.coeff(x)
        worst = 0.0
        for _ in range(trials):
            c = rng.standard_normal(sub.rank)
            c /= np.linalg.norm(c)
            v = sub.lift(c)
            worst = max(worst, float(np.linalg.norm(Xm @ (sub.Y @ v) - v))
                        / max(1.0, float(np.linalg.norm(v))))
        return worst

    def projector_residuals(self, x: np.ndarray) -> tuple[float, float]:
        """(idempotency, symmetry) residuals of e(x) = Y X."""
        e = self.sub(x).e
        return (float(np.abs(e @ e - e).max()),
                float(np.abs(e - e.T).max()))

    def metric_compat_residual(self, x: np.ndarray, Z1: VectorField,
                               Z2: VectorField, v: np.ndarray) -> float:
        """Compatibility of the induced connection with the induced
        metric along direction v, for sections Z1, Z2 of I(X)."""
        x = self.manifold.require(x)

        def pair(y):
            s = self.sub(y)
            return float((s.Y @ Z1(y)) @ (s.Y @ Z2(y)))

        lhs = directional_derivative(self.manifold, pair, x, v)
        sub = self.sub(x)
        rhs = (sub.inner(self.ljw_derivative(Z1, x, v), Z2(x))
               + sub.inner(Z1(x), self.ljw_derivative(Z2, x, v)))
        return float(abs(lhs - rhs))


# ---------------------------------------------------------------------------
# module-level delegates matching the operation names


def ljw_derivative(oracle: ConnectionOracle, Z: VectorField, x, v):
    return oracle.ljw_derivative(Z, x, v)


def adjoint_semi_derivative(oracle: ConnectionOracle, Z1: VectorField,
                            Z2: VectorField, x):
    return oracle.adjoint_semi_derivative(Z1, Z2, x)


def curvature(oracle: ConnectionOracle, x, u1, u2) -> CurvatureMap:
    return oracle.curvature(x, u1, u2)


def ricci_sharp(oracle: ConnectionOracle, x, u):
    return oracle.ricci_sharp(x, u)


# ---------------------------------------------------------------------------
# scenario-level hypotheses


def constant_rank_check(sys: DiffusionSystem, points: np.ndarray) -> int:
    """Verify the coefficient has one numerical rank across sample
    points; returns that rank or raises RankDegeneracyError."""
    ranks = set()
    for p in np.atleast_2d(points):
        ranks.add(image_subbundle(sys, p).rank)
        if len(ranks) > 1:
            raise RankDegeneracyError(
                f"rank varies across {sys.scenario_id}: {sorted(ranks)}")
    return ranks.pop()


def injectivity_defect(sys: DiffusionSystem, points: np.ndarray) -> float:
    """Smallest relative singular value of the stacked coefficient over
    sample points; zero means some noise direction acts trivially."""
    stack = np.concatenate([sys.coeff(p) for p in np.atleast_2d(points)],
                           axis=0)
    s = np.linalg.svd(stack, compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def require_injective(sys: DiffusionSystem, points: np.ndarray,
                      rtol: float = 1e-8) -> None:
    if injectivity_defect(sys, points) <= rtol:
        raise UnsupportedScenarioError(
            f"coefficient of {sys.scenario_id} is not injective into "
            f"vector fields")


def drift_image_residual(sys: DiffusionSystem, points: np.ndarray) -> float:
    """max relative distance of the drift from I(X) over sample points."""
    worst = 0.0
    for p in np.atleast_2d(points):
        a = sys.drift_vec(p)
        sub = image_subbundle(sys, p)
        worst = max(worst, sub.section_residual(a)
                    / max(1.0, float(np.linalg.norm(a))))
    return worst


def require_drift_in_image(sys: DiffusionSystem, points: np.ndarray,
                           rtol: float = 1e-9) -> None:
    res = drift_image_residual(sys, points)
    if res > rtol:
        raise PreconditionError(
            f"drift of {sys.scenario_id} leaves the image subbundle "
            f"(residual {res:.3e}); the intrinsic filtered flow is "
            f"undefined")
