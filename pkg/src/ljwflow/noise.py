"""Driving noise, Cameron-Martin directions, and change-of-measure weights.

Sample paths are indexed: path ``index`` under ``master_seed`` is always
generated from the same counter-based stream, no matter how samples are
batched or distributed across workers.  Estimators built on top inherit
bit-level reproducibility from this property.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GridError, PreconditionError


def time_grid(steps: int, horizon: float) -> tuple[float, np.ndarray]:
    """Uniform grid with ``steps`` intervals on [0, horizon]."""
    if int(steps) != steps or steps < 1:
        raise GridError(f"steps must be a positive integer, got {steps!r}")
    if not (horizon > 0.0) or not np.isfinite(horizon):
        raise GridError(f"horizon must be positive and finite, got {horizon!r}")
    steps = int(steps)
    dt = horizon / steps
    return dt, np.linspace(0.0, horizon, steps + 1)


def increments_block(master_seed: int, index_start: int, count: int,
                     steps: int, dim: int, dt: float) -> np.ndarray:
    """Brownian increments for paths index_start .. index_start+count-1.

    Shape (count, steps, dim).  Row i depends only on
    (master_seed, index_start + i), so any chunking of indices
    reassembles to the identical array.
    """
    if index_start < 0 or count < 0:
        raise PreconditionError("path indices must be non-negative")
    root = np.random.Philox(key=master_seed)
    out = np.empty((count, steps, dim))
    for i in range(count):
        gen = np.random.Generator(root.jumped(index_start + i))
        out[i] = gen.standard_normal((steps, dim))
    out *= np.sqrt(dt)
    return out


@dataclass(frozen=True)
class DrivingNoise:
    """One path of the driving Brownian motion on the step grid."""

    T: float
    dt: float
    dB: np.ndarray            # (steps, dim)
    master_seed: int
    index: int

    @property
    def steps(self) -> int:
        return self.dB.shape[0]

    @property
    def dim(self) -> int:
        return self.dB.shape[1]

    def path(self) -> np.ndarray:
        """Noise values at nodes, starting from zero: (steps+1, dim)."""
        out = np.zeros((self.steps + 1, self.dim))
        np.cumsum(self.dB, axis=0, out=out[1:])
        return out


def sample_noise(T: float, L: int, seed: int, index: int, *,
                 dim: int) -> DrivingNoise:
    """Reproducible driving noise for one sample index.

    dim (the noise dimension m) is keyword-only; it is fixed by the
    diffusion system the noise will drive.
    """
    dt, _ = time_grid(L, T)
    dB = increments_block(seed, index, 1, L, dim, dt)[0]
    return DrivingNoise(T=float(T), dt=dt, dB=dB, master_seed=seed,
                        index=index)


@dataclass(frozen=True)
class CameronMartinPath:
    """Absolutely continuous shift direction t -> k(t) with square
    integrable slope, represented by its slope function."""

    kdot: Callable[[float], np.ndarray]
    dim: int
    name: str = "k"

    def slope_steps(self, steps: int, horizon: float) -> np.ndarray:
        """Slopes at left endpoints of the step grid: (steps, dim)."""
        dt, times = time_grid(steps, horizon)
        out = np.empty((steps, self.dim))
        for k in range(steps):
            out[k] = np.asarray(self.kdot(times[k]), dtype=float)
        return out

    def slope_nodes(self, steps: int, horizon: float) -> np.ndarray:
        """Slopes on nodes, last node reusing the final step value,
        matching the trapezoidal accumulation of flow integrals."""
        s = self.slope_steps(steps, horizon)
        return np.concatenate([s, s[-1:]], axis=0)

    def value_nodes(self, steps: int, horizon: float) -> np.ndarray:
        """The piecewise-linear path k itself on nodes; k(0) = 0."""
        dt, _ = time_grid(steps, horizon)
        s = self.slope_steps(steps, horizon)
        out = np.zeros((steps + 1, self.dim))
        np.cumsum(s * dt, axis=0, out=out[1:])
        return out

    def energy(self, steps: int, horizon: float) -> float:
        """Squared Cameron-Martin norm of k on the step grid."""
        dt, _ = time_grid(steps, horizon)
        s = self.slope_steps(steps, horizon)
        return float(np.sum(s * s) * dt)


def linear_direction(u: np.ndarray, name: str = "k") -> CameronMartinPath:
    """k(t) = t * u, the constant-slope direction."""
    u = np.asarray(u, dtype=float)
    return CameronMartinPath(kdot=lambda t: u, dim=u.shape[0], name=name)


def girsanov_log_weight(tau: float, slope_steps: np.ndarray,
                        dB: np.ndarray, dt: float) -> np.ndarray:
    """log-density of the shifted measure against the reference, on the
    step grid: tau * sum <kdot, dB> - tau^2/2 * |k|_H^2.

    dB has shape (batch, steps, dim) or (steps, dim).
    """
    dB = np.asarray(dB, dtype=float)
    single = dB.ndim == 2
    if single:
        dB = dB[None]
    ito = np.einsum("bkd,kd->b", dB, slope_steps)
    energy = float(np.sum(slope_steps * slope_steps) * dt)
    logw = tau * ito - 0.5 * tau * tau * energy
    return logw[0] if single else logw


def girsanov_weights(tau: float, slope_steps: np.ndarray, dB: np.ndarray,
                     dt: float) -> np.ndarray:
    """Batched change-of-measure weights on raw increment arrays."""
    return np.exp(girsanov_log_weight(tau, slope_steps, dB, dt))


def shifted_increments(tau: float, slope_steps: np.ndarray,
                       dB: np.ndarray, dt: float) -> np.ndarray:
    """Increments of the shifted noise B + tau * k on the step grid."""
    dB = np.asarray(dB, dtype=float)
    if dB.ndim == 2:
        return dB + tau * dt * slope_steps
    return dB + tau * dt * slope_steps[None]
