"""Paired Monte Carlo checks of the integration-by-parts and filtering
identities.

Every check estimates both sides of an identity from common random
numbers and reports statistics of the per-sample difference, whose
variance is far below either side's.  Sample index i always consumes
noise stream (seed, i), so estimates do not depend on chunking or on
how chunks are distributed over workers; reductions use exact summation
and are therefore order-independent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .connection import (DiffusionSystem, require_drift_in_image,
                         require_injective)
from .errors import (GridError, PreconditionError, UnsupportedOperationError)
from .flow import FieldPack, resolve_pack, simulate_batch
from .geometry import halton_points
from .noise import CameronMartinPath, girsanov_weights, increments_block

CHUNK = 8192            # fixed chunk size; never varies with worker count
GRAD_TOL = 1e-6         # gradient-oracle acceptance vs finite differences

DEFAULT_STEPS = 1024
DEFAULT_HORIZON = 1.0
DEFAULT_SAMPLES = 100_000


def chunk_ranges(n: int) -> list[tuple[int, int]]:
    """The fixed (start, count) decomposition shared by all drivers."""
    return [(s, min(CHUNK, n - s)) for s in range(0, n, CHUNK)]


def _exact_mean(a: np.ndarray) -> float:
    return math.fsum(a.tolist()) / a.size if a.size else 0.0


def _exact_stderr(a: np.ndarray, mean: float) -> float:
    if a.size < 2:
        return 0.0
    var = math.fsum(((float(v) - mean) ** 2 for v in a.tolist()))
    return math.sqrt(var / (a.size - 1)) / math.sqrt(a.size)


@dataclass(frozen=True)
class CylindricalFunctional:
    """Functional of finitely many path values.

    value/gradient consume stacked evaluation points of shape
    (batch, p, q, ambient): p evaluation times by q flow copies.  The
    gradient is ambient per slot; estimators project it to the tangent
    space before pairing.
    """

    times: tuple
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    num_points: int = 1
    name: str = "F"

    @property
    def num_times(self) -> int:
        return len(self.times)

    def validate_gradient(self, manifold, configs: np.ndarray,
                          tol: float = GRAD_TOL) -> float:
        """Compare the gradient oracle against central differences along
        retraction curves at the given (count, p, q, N) configurations.
        Returns the worst deviation; raises PreconditionError above tol.
        """
        p, q = self.num_times, self.num_points
        worst = 0.0
        for xs in np.asarray(configs, dtype=float):
            if xs.shape[:2] != (p, q):
                raise PreconditionError("probe configuration shape mismatch")
            grads = self.gradient(xs[None])[0]
            for i in range(p):
                for j in range(q):
                    x = xs[i, j]
                    basis = manifold.tangent_basis(x)
                    gproj = manifold.project(x, grads[i, j])
                    h = 1e-5 * max(1.0, float(np.linalg.norm(x)))
                    for c in range(basis.shape[1]):
                        v = basis[:, c]
                        up = xs.copy()
                        dn = xs.copy()
                        up[i, j] = manifold.retract(x, h * v)
                        dn[i, j] = manifold.retract(x, -h * v)
                        fd = float(self.value(up[None])[0]
                                   - self.value(dn[None])[0]) / (2.0 * h)
                        an = float(gproj @ v)
                        worst = max(worst, abs(fd - an) / (1.0 + abs(an)))
        if worst > tol:
            raise PreconditionError(
                f"gradient oracle of {self.name!r} deviates from finite "
                f"differences by {worst:.3e} (tolerance {tol})")
        return worst


@dataclass
class EstimatorResult:
    """Two-sided estimate with common-random-number pairing."""

    lhs_mean: float
    lhs_stderr: float
    rhs_mean: float
    rhs_stderr: float
    paired_mean: float
    paired_stderr: float
    z: float
    count: int
    extras: dict = field(default_factory=dict)
    lhs_samples: np.ndarray | None = None
    rhs_samples: np.ndarray | None = None

    @staticmethod
    def from_samples(lhs: np.ndarray, rhs: np.ndarray, keep: bool = False,
                     extras: dict | None = None) -> "EstimatorResult":
        lhs = np.asarray(lhs, dtype=float)
        rhs = np.asarray(rhs, dtype=float)
        d = lhs - rhs
        lm = _exact_mean(lhs)
        rm = _exact_mean(rhs)
        dm = _exact_mean(d)
        ds = _exact_stderr(d, dm)
        if ds == 0.0:
            z = 0.0 if dm == 0.0 else math.inf
        else:
            z = abs(dm) / ds
        return EstimatorResult(
            lhs_mean=lm, lhs_stderr=_exact_stderr(lhs, lm),
            rhs_mean=rm, rhs_stderr=_exact_stderr(rhs, rm),
            paired_mean=dm, paired_stderr=ds, z=z, count=lhs.size,
            extras=dict(extras or {}),
            lhs_samples=lhs if keep else None,
            rhs_samples=rhs if keep else None)


# ---------------------------------------------------------------------------
# shared kernel plumbing


def _nodes_for_times(times: Sequence[float], L: int, T: float) -> list[int]:
    dt = T / L
    nodes = []
    prev = -1
    for t in times:
        node = int(round(float(t) / dt))
        if node < 0 or node > L or abs(node * dt - float(t)) > 1e-9 * max(
                1.0, T):
            raise GridError(f"evaluation time {t!r} is not a grid node")
        if node <= prev:
            raise GridError("evaluation times must be strictly increasing")
        prev = node
        nodes.append(node)
    return nodes


def _probe_points(sys: DiffusionSystem, fallback, count: int = 16):
    try:
        return halton_points(sys.manifold, count)
    except UnsupportedOperationError:
        return np.atleast_2d(np.asarray(fallback, dtype=float))


def _project_slot(pack: FieldPack, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return pack.project_cols(x, g[:, :, None])[:, :, 0]


def _stack_snaps(res, nodes, key):
    return np.stack([res.snaps[nd][key] for nd in nodes], axis=1)


def _paired_lhs(pack, F, xs, Vs):
    """dF along the flow-integral field: sum of projected-gradient
    pairings over the (time, point) slots."""
    lhs = np.zeros(xs.shape[0])
    grads = np.asarray(F.gradient(xs), dtype=float)
    if grads.shape != xs.shape:
        raise PreconditionError(
            f"gradient of {F.name!r} returned shape {grads.shape}, "
            f"expected {xs.shape}")
    for i in range(xs.shape[1]):
        for j in range(xs.shape[2]):
            g = _project_slot(pack, xs[:, i, j], grads[:, i, j])
            lhs += np.einsum("bi,bi->b", g, Vs[:, i, j])
    return lhs


def ibp_samples_chunk(sys: DiffusionSystem, points, F: CylindricalFunctional,
                      k: CameronMartinPath, L: int, T: float, seed: int,
                      start: int, count: int, *, filtered: bool,
                      variant: str = "eq8"):
    """Per-sample two sides of the derivative identity for sample
    indices [start, start+count): the derivative-flow version when
    filtered=False, the filtered-flow version when filtered=True."""
    pack = resolve_pack(sys)
    dt = T / L
    m = sys.noise_dim
    nodes = _nodes_for_times(F.times, L, T)
    slopes = k.slope_steps(L, T)
    incs = increments_block(seed, start, count, L, m, dt)
    xs_slots = []
    vs_slots = []
    ito = None
    vkey = "VW" if filtered else "VJ"
    for x0 in np.atleast_2d(np.asarray(points, dtype=float)):
        res = simulate_batch(pack, x0, incs, dt,
                             want_J=not filtered, want_W=filtered,
                             variant=variant, kdot_steps=slopes,
                             snap_steps=nodes)
        xs_slots.append(_stack_snaps(res, nodes, "x"))
        vs_slots.append(_stack_snaps(res, nodes, vkey))
        ito = res.ito_kM if filtered else res.ito_kB
    xs = np.stack(xs_slots, axis=2)        # (B, p, q, N)
    Vs = np.stack(vs_slots, axis=2)
    lhs = _paired_lhs(pack, F, xs, Vs)
    rhs = np.asarray(F.value(xs), dtype=float) * ito
    return lhs, rhs


def _assemble(kernel, n: int):
    parts = None
    for start, count in chunk_ranges(n):
        out = kernel(start, count)
        if parts is None:
            parts = [[] for _ in out]
        for slot, arr in zip(parts, out):
            slot.append(arr)
    if parts is None:
        return ()
    return tuple(np.concatenate(slot) for slot in parts)


# ---------------------------------------------------------------------------
# public checks


def estimate_eq5_multipoint(sys: DiffusionSystem, points, F, k, n: int,
                            seed: int, *, L: int = DEFAULT_STEPS,
                            T: float = DEFAULT_HORIZON,
                            keep_samples: bool = False) -> EstimatorResult:
    """Derivative identity for one flow realization observed at several
    start points simultaneously (all driven by the same noise)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if F.num_points != points.shape[0]:
        raise PreconditionError(
            f"functional expects {F.num_points} flow copies, "
            f"got {points.shape[0]} start points")
    require_injective(sys, _probe_points(sys, points))

    def kernel(start, count):
        return ibp_samples_chunk(sys, points, F, k, L, T, seed, start,
                                 count, filtered=False)

    lhs, rhs = _assemble(kernel, n)
    return EstimatorResult.from_samples(lhs, rhs, keep=keep_samples)


def estimate_eq4(sys: DiffusionSystem, x0, F, k, n: int, seed: int, *,
                 L: int = DEFAULT_STEPS, T: float = DEFAULT_HORIZON,
                 keep_samples: bool = False) -> EstimatorResult:
    """Derivative identity along the flow from a single start point."""
    return estimate_eq5_multipoint(sys, [x0], F, k, n, seed, L=L, T=T,
                                   keep_samples=keep_samples)


def estimate_eq9(sys: DiffusionSystem, x0, F, k, n: int, seed: int,
                 variant: str = "eq8", *, L: int = DEFAULT_STEPS,
                 T: float = DEFAULT_HORIZON,
                 keep_samples: bool = False) -> EstimatorResult:
    """Derivative identity with the filtered flow in place of the
    derivative flow and the filtered increments on the right side."""
    if F.num_points != 1:
        raise PreconditionError("filtered identity takes a single point")
    if variant == "eq7" and sys.drift is not None:
        require_drift_in_image(sys, _probe_points(sys, [x0], count=64))

    def kernel(start, count):
        return ibp_samples_chunk(sys, [x0], F, k, L, T, seed, start, count,
                                 filtered=True, variant=variant)

    lhs, rhs = _assemble(kernel, n)
    return EstimatorResult.from_samples(lhs, rhs, keep=keep_samples)


def girsanov_samples_chunk(sys, x0, F, k, tau, L, T, seed, start, count):
    pack = resolve_pack(sys)
    dt = T / L
    nodes = _nodes_for_times(F.times, L, T)
    slopes = k.slope_steps(L, T)
    incs = increments_block(seed, start, count, L, sys.noise_dim, dt)
    if tau == 0.0:
        shifted = incs
    else:
        shifted = incs + tau * dt * slopes[None]
    res_s = simulate_batch(pack, np.asarray(x0, float), shifted, dt,
                           snap_steps=nodes)
    xs_s = _stack_snaps(res_s, nodes, "x")[:, :, None]
    lhs = np.asarray(F.value(xs_s), dtype=float)
    if tau == 0.0:
        base = lhs
    else:
        res_b = simulate_batch(pack, np.asarray(x0, float), incs, dt,
                               snap_steps=nodes)
        xs_b = _stack_snaps(res_b, nodes, "x")[:, :, None]
        base = np.asarray(F.value(xs_b), dtype=float)
    w = girsanov_weights(tau, slopes, incs, dt)
    return lhs, base * w, w


def girsanov_reweight_check(sys: DiffusionSystem, x0, F, k, tau: float,
                            n: int, seed: int, *, L: int = DEFAULT_STEPS,
                            T: float = DEFAULT_HORIZON,
                            keep_samples: bool = False) -> EstimatorResult:
    """Quasi-invariance under the shift: shifted-flow expectation versus
    the reweighted base expectation, with common noise."""
    if not abs(tau) <= 1.0:
        raise PreconditionError(f"|tau| must be at most 1, got {tau!r}")
    if F.num_points != 1:
        raise PreconditionError("reweighting check takes a single point")

    def kernel(start, count):
        return girsanov_samples_chunk(sys, x0, F, k, tau, L, T, seed,
                                      start, count)

    lhs, rhs, w = _assemble(kernel, n)
    wm = _exact_mean(w)
    extras = {"weight_mean": wm, "weight_stderr": _exact_stderr(w, wm)}
    return EstimatorResult.from_samples(lhs, rhs, keep=keep_samples,
                                        extras=extras)


def tau_samples_chunk(sys, x0, F, k, tau_step, L, T, seed, start, count):
    pack = resolve_pack(sys)
    dt = T / L
    nodes = _nodes_for_times(F.times, L, T)
    slopes = k.slope_steps(L, T)
    incs = increments_block(seed, start, count, L, sys.noise_dim, dt)

    def fvals(arr):
        res = simulate_batch(pack, np.asarray(x0, float), arr, dt,
                             snap_steps=nodes)
        xs = _stack_snaps(res, nodes, "x")[:, :, None]
        return np.asarray(F.value(xs), dtype=float)

    shift = dt * slopes[None]
    cd = (fvals(incs + tau_step * shift)
          - fvals(incs - tau_step * shift)) / (2.0 * tau_step)
    half = 0.5 * tau_step
    cd_half = (fvals(incs + half * shift)
               - fvals(incs - half * shift)) / (2.0 * half)
    lhs4, _ = ibp_samples_chunk(sys, [x0], F, k, L, T, seed, start, count,
                                filtered=False)
    return cd, lhs4, cd_half


def tau_derivative_check(sys: DiffusionSystem, x0, F, k, tau_step: float,
                         n: int, seed: int, *, L: int = DEFAULT_STEPS,
                         T: float = DEFAULT_HORIZON,
                         keep_samples: bool = False) -> EstimatorResult:
    """Central difference in the shift size against the derivative-flow
    side, with a Richardson estimate of the quadratic bias."""
    if not (0.0 < tau_step <= 0.5):
        raise PreconditionError(
            f"tau_step must lie in (0, 0.5], got {tau_step!r}")
    if F.num_points != 1:
        raise PreconditionError("derivative check takes a single point")

    def kernel(start, count):
        return tau_samples_chunk(sys, x0, F, k, tau_step, L, T, seed,
                                 start, count)

    cd, lhs4, cd_half = _assemble(kernel, n)
    cdm = _exact_mean(cd)
    chm = _exact_mean(cd_half)
    # leading bias is quadratic in tau_step: step-halving leaves 1/4 of
    # it, so the gap recovers 3/4 of the full-step bias
    bias_bound = abs(cdm - chm) * (4.0 / 3.0)
    extras = {"bias_bound": bias_bound, "cd_half_mean": chm}
    return EstimatorResult.from_samples(cd, lhs4, keep=keep_samples,
                                        extras=extras)


def conditional_samples_chunk(sys, x0, v0, g, u, Lt, dt, seed, start,
                              count, variant):
    pack = resolve_pack(sys)
    incs = increments_block(seed, start, count, Lt, sys.noise_dim, dt)
    res = simulate_batch(pack, np.asarray(x0, float), incs, dt,
                         want_J=True, want_W=True, variant=variant)
    c0 = res.E0.T @ np.asarray(v0, dtype=float)
    Jv = np.einsum("bik,k->bi", res.J, c0)
    Wv = np.einsum("bik,k->bi", res.W, c0)
    gv = np.asarray(g(res.x), dtype=float)
    uv = np.asarray(u(res.x), dtype=float)
    lhs = gv * np.einsum("bi,bi->b", Jv, uv)
    rhs = gv * np.einsum("bi,bi->b", Wv, uv)
    return lhs, rhs


def conditional_flow_check(sys: DiffusionSystem, x0, v0, g: Callable,
                           u: Callable, t: float, n: int, seed: int,
                           variant: str = "eq8", *,
                           L: int = DEFAULT_STEPS, T: float = DEFAULT_HORIZON,
                           keep_samples: bool = False) -> EstimatorResult:
    """Tower-property consequence of the filtering identity: pairing the
    derivative flow against a test field has the same mean as pairing
    the filtered flow, for path-measurable weights g.

    g and u must accept batched points (B, N); u returns (B, N).
    """
    node = _nodes_for_times([t], L, T)[0]
    if node == 0:
        raise GridError("conditioning time must be positive")
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    pack = resolve_pack(sys)
    E0 = pack.frame(x0)
    res = float(np.linalg.norm(v0 - E0 @ (E0.T @ v0)))
    if res > 1e-8 * (1.0 + float(np.linalg.norm(v0))):
        raise PreconditionError("v0 is not tangent at the start point")
    dt = T / L
    if variant == "eq7" and sys.drift is not None:
        require_drift_in_image(sys, _probe_points(sys, [x0], count=64))

    def kernel(start, count):
        return conditional_samples_chunk(sys, x0, v0, g, u, node, dt, seed,
                                         start, count, variant)

    lhs, rhs = _assemble(kernel, n)
    return EstimatorResult.from_samples(lhs, rhs, keep=keep_samples)
