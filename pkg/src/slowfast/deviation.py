"""Normalized deviation of the slow component and its Gaussian limit.

The deviation process divides the difference between the slow path and its
averaged limit by sqrt(eps).  As eps -> 0 its law approaches a linear SDE
driven by the slow Brownian motion (through the averaged-coefficient
Jacobians) plus an independent driver carrying the homogenized diffusion.
Depending on how fast the time-averaging residual decays, an extra constant
drift can appear, or the homogenized driver can drop out entirely; both
variants are expressible through the optional fields of LimitOUSpec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, CouplingError, IntegrationDivergedError
from .engine import (CoupledPair, TimeGrid, _apply_diffusion,
                     resolve_coefficients, run_batched)
from .noise import (PURPOSE_W2, PURPOSE_WTILDE, NoiseStream, SubstreamBlocks)
from .poisson import psd_sqrt
from .systems import SystemSpec


@dataclass
class DeviationPath:
    """Deviation trajectory (Y_eps - Y_bar)/sqrt(eps) on a shared macro grid."""

    grid: TimeGrid
    z: np.ndarray            # (n+1, d2)
    pair: CoupledPair
    eps: float


def build_deviation(pair: CoupledPair, eps: Optional[float] = None) -> DeviationPath:
    """Exact pointwise normalization of a coupled pair; z[0] = 0."""
    if eps is None:
        eps = pair.eps
    if not math.isclose(eps, pair.eps, rel_tol=0.0, abs_tol=0.0):
        raise CouplingError(
            f"pair was simulated at eps={pair.eps}, not eps={eps}")
    if pair.y_eps.shape != pair.y_bar.shape:
        raise CouplingError("trajectories live on different grids")
    z = (pair.y_eps - pair.y_bar) / math.sqrt(eps)
    return DeviationPath(grid=pair.grid, z=z, pair=pair, eps=eps)


@dataclass(frozen=True)
class LimitOUSpec:
    """Coefficient suppliers of the limiting linear deviation equation.

    drift_jac(y) -> (d2, d2): Jacobian of the double-averaged drift;
    sigma(y) -> (d2, k): homogenized diffusion against the extra driver
    (zero matrix to disable, as in the slow-residual variant);
    diffusion_jac(y) -> (d2, m2, d2): Jacobian of the averaged slow
    diffusion, contracted with z against the slow driver (None = zero);
    extra_drift(y) -> (d2,): constant-in-z drift appearing at the critical
    residual-decay rate (None = zero).  ``theta`` records the normalization
    exponent this coefficient set corresponds to (theta > 1/2: plain
    sqrt(eps) scaling).
    """

    drift_jac: Callable
    sigma: Callable
    diffusion_jac: Optional[Callable] = None
    extra_drift: Optional[Callable] = None
    theta: float = 1.0


def _linmap(mat, z):
    """(d,k?) or (B,d,k?) matrix times z rows."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim == 2:
        return z @ mat.T
    return np.einsum("bij,bj->bi", mat, z)


def _jac_diffusion(tensor, z, dw):
    """Contract (d2, m2, d2) (or batched) with z, then with the increment."""
    tensor = np.asarray(tensor, dtype=float)
    if tensor.ndim == 3:
        gz = np.einsum("imj,bj->bim", tensor, z)
    else:
        gz = np.einsum("bimj,bj->bim", tensor, z)
    return np.einsum("bim,bm->bi", gz, dw)


def simulate_limit_ou(spec: LimitOUSpec, bar_path: np.ndarray, grid: TimeGrid,
                      noise: NoiseStream) -> np.ndarray:
    """Euler-Maruyama for the limiting deviation equation along one bar path.

    The slow driver reuses purpose tag 1 (the same increments that drove the
    averaged path); the homogenized driver uses tag 2, an independent stream.
    Starts from zero by construction.
    """
    bar_path = np.atleast_2d(np.asarray(bar_path, dtype=float))
    n, dt = grid.n_steps, grid.dt
    if bar_path.shape[0] != n + 1:
        raise ConfigurationError("bar path and grid do not match")
    d2 = bar_path.shape[1]
    sig0 = np.asarray(spec.sigma(bar_path[0]), dtype=float)
    k = sig0.shape[-1]
    m2 = None
    if spec.diffusion_jac is not None:
        m2 = np.asarray(spec.diffusion_jac(bar_path[0]), dtype=float).shape[-2]
    dwt = noise.with_tag(PURPOSE_WTILDE).increments(n, k, dt)
    dw2 = noise.with_tag(PURPOSE_W2).increments(n, m2, dt) if m2 else None
    Z = np.zeros((n + 1, d2))
    z = np.zeros((1, d2))
    for i in range(n):
        yb = bar_path[i]
        drift = _linmap(spec.drift_jac(yb), z)
        if spec.extra_drift is not None:
            drift = drift + np.asarray(spec.extra_drift(yb), dtype=float)
        z_new = z + dt * drift + _apply_diffusion(spec.sigma(yb), dwt[i][None, :])
        if dw2 is not None:
            z_new = z_new + _jac_diffusion(spec.diffusion_jac(yb), z,
                                           dw2[i][None, :])
        z = z_new
        if not np.isfinite(z).all():
            raise IntegrationDivergedError(f"non-finite state at step {i + 1}",
                                           step=i + 1)
        Z[i + 1] = z[0]
    return Z


def _limit_batch(spec: LimitOUSpec, coeffs, y0, T, n_steps, seed, path_start,
                 n_batch, d2, m2, k_tilde):
    dt = T / n_steps
    sqrt_dt = math.sqrt(dt)
    w2 = SubstreamBlocks(seed, PURPOSE_W2, path_start, n_batch)
    wt = SubstreamBlocks(seed, PURPOSE_WTILDE, path_start, n_batch)
    yb = np.broadcast_to(np.asarray(y0, dtype=float), (n_batch, d2)).copy()
    z = np.zeros((n_batch, d2))
    chunk = max(16, min(n_steps, 4_000_000 // max(1, n_batch)))
    step = 0
    while step < n_steps:
        c = min(chunk, n_steps - step)
        dw2 = w2.read(c, m2) * sqrt_dt
        dwt = wt.read(c, k_tilde) * sqrt_dt
        for j in range(c):
            drift = _linmap(spec.drift_jac(yb), z)
            if spec.extra_drift is not None:
                drift = drift + np.asarray(spec.extra_drift(yb), dtype=float)
            z_new = z + dt * drift \
                + _apply_diffusion(spec.sigma(yb), dwt[:, j, :])
            if spec.diffusion_jac is not None:
                z_new = z_new + _jac_diffusion(spec.diffusion_jac(yb), z,
                                               dw2[:, j, :])
            yb = yb + dt * np.asarray(coeffs.double_bar_F(yb), dtype=float) \
                + _apply_diffusion(coeffs.bar_G(yb), dw2[:, j, :])
            z = z_new
            step_abs = step + j + 1
            if step_abs % max(1, n_steps // 10) == 0 and not np.isfinite(z).all():
                raise IntegrationDivergedError(
                    f"non-finite deviation state by step {step_abs}",
                    step=step_abs)
        step += c
    return z, yb


def limit_terminal_ensemble(spec: LimitOUSpec, sys: SystemSpec, y0, T: float,
                            n_steps: int, n_paths: int, seed: int, *,
                            coeffs=None, batch_size: int = 50_000,
                            threads: int = 1):
    """Terminal samples of the limiting deviation over an ensemble.

    Each path simulates its own averaged trajectory (tag-1 substream) and the
    deviation equation on top of it (tags 1 and 2).  Returns (z_T, ybar_T),
    both (n_paths, d2).
    """
    coeffs = resolve_coefficients(sys, coeffs)
    d2 = sys.d2
    k_tilde = np.asarray(spec.sigma(np.atleast_1d(np.asarray(y0, dtype=float))),
                         dtype=float).shape[-1]

    def worker(start, count):
        return _limit_batch(spec, coeffs, y0, T, n_steps, seed, start, count,
                            d2, sys.m2, k_tilde)

    parts = run_batched(n_paths, batch_size, threads, worker)
    z = np.concatenate([p[0] for p in parts], axis=0)
    yb = np.concatenate([p[1] for p in parts], axis=0)
    return z, yb


def jacobian_fd(f: Callable, y, h: float = 1e-3) -> np.ndarray:
    """Central-difference Jacobian of f at y; J[i, j] = df_i/dy_j.

    When f is a Monte Carlo estimator it must hold its random numbers fixed
    across evaluations (common random numbers), otherwise the noise term
    scales like SE/h and drowns the derivative.
    """
    if h <= 0:
        raise ConfigurationError("h must be positive")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = y.shape[0]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fp = np.atleast_1d(np.asarray(f(y + e), dtype=float))
        fm = np.atleast_1d(np.asarray(f(y - e), dtype=float))
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise ConfigurationError("non-finite evaluation in Jacobian stencil")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)


def _constant_or_callable(fn, probe_ys, tol=1e-9):
    """Detect a y-independent supplier and freeze it to a constant array."""
    vals = [np.asarray(fn(y), dtype=float) for y in probe_ys]
    if all(np.max(np.abs(v - vals[0])) <= tol for v in vals[1:]):
        const = vals[0]
        return lambda y: const
    return fn


def limit_spec_from_oracles(sys: SystemSpec, y_ref=None, h: float = 1e-3,
                            theta: float = 1.0) -> LimitOUSpec:
    """Assemble the limit-equation coefficients from a system's oracles.

    Jacobians come from central differences of the averaged-coefficient
    oracles; the homogenized diffusion is the symmetric PSD square root of
    the oracle limit matrix.  Suppliers that turn out constant are frozen.
    """
    if sys.oracles is None or sys.oracles.double_bar_F is None \
            or sys.oracles.bar_G is None \
            or sys.oracles.double_bar_sigma_sq is None:
        raise ConfigurationError("system lacks the required oracles")
    orc = sys.oracles
    if y_ref is None:
        y_ref = np.zeros(sys.d2)
    y_ref = np.atleast_1d(np.asarray(y_ref, dtype=float))
    probes = [y_ref, y_ref + 0.7, y_ref - 1.3]

    def drift_jac(y):
        return jacobian_fd(lambda yy: orc.double_bar_F(yy), y, h)

    def diffusion_jac(y):
        flat = jacobian_fd(
            lambda yy: np.asarray(orc.bar_G(yy), dtype=float).reshape(-1), y, h)
        return flat.reshape(sys.d2, sys.m2, sys.d2)

    def sigma(y):
        return psd_sqrt(np.asarray(orc.double_bar_sigma_sq(y), dtype=float))

    drift_jac = _constant_or_callable(drift_jac, probes)
    diffusion_jac_c = _constant_or_callable(diffusion_jac, probes)
    sigma = _constant_or_callable(sigma, probes)
    dj = diffusion_jac_c
    if np.max(np.abs(np.asarray(dj(y_ref), dtype=float))) <= 1e-12:
        dj = None
    return LimitOUSpec(drift_jac=drift_jac, sigma=sigma, diffusion_jac=dj,
                       extra_drift=None, theta=theta)
