"""Frozen fast dynamics and the evolution family of invariant laws.

With the slow variable held at a fixed parameter value y and real
(unrescaled) time, the fast equation

    dX = b(t, X, y) dt + sigma(t, X, y) dW1

is an ergodic time-inhomogeneous diffusion.  Its time-indexed invariant laws
are approximated by particle clouds obtained from long burn-in simulation:
exponential mixing forgets the initializer at a geometric rate, so a cloud
evolved from time t - burn_in approximates the invariant law at time t with
bias ~ exp(-delta * burn_in).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, IntegrationDivergedError, MixingProbeError
from .engine import TimeGrid, _apply_diffusion, run_batched, simulate_generic
from .noise import PURPOSE_W1, NoiseStream, SubstreamBlocks, derive_seed
from .stats import EnsembleMoments, ensemble_moments
from .systems import SystemSpec

DEFAULT_FROZEN_DT = 5e-3
DEFAULT_BURN_IN = 20.0
_CHUNK_TARGET_WORDS = 4_000_000


@dataclass
class ParticleCloud:
    """Uniform-weight empirical approximation of the invariant law at (t, y)."""

    t: float
    y: np.ndarray
    particles: np.ndarray     # (n, d1)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    def moments(self) -> EnsembleMoments:
        return ensemble_moments(self.particles)

    def mean(self) -> np.ndarray:
        return self.particles.mean(axis=0)

    def cov(self) -> np.ndarray:
        return self.moments().cov


@dataclass
class MixingEstimate:
    """Fitted exponential decay rate of synchronously coupled clouds."""

    delta_hat: float
    lags: np.ndarray
    log_distances: np.ndarray
    residual: float           # rms residual of the linear fit


def _frozen_batch(sys: SystemSpec, y, t0: float, dt: float, n_steps: int,
                  x0s: np.ndarray, seed: int, path_start: int,
                  snapshot_steps: Optional[np.ndarray] = None,
                  integrand: Optional[Callable] = None):
    """Vectorized Euler-Maruyama for the frozen equation over one path batch.

    Optionally records particle snapshots at given step indices and a running
    trapezoid integral of ``integrand(t, X) -> (B, k)`` along each path.
    Returns (endpoint, snapshots, integral).
    """
    n_batch, d1 = x0s.shape
    m1 = sys.m1
    yrow = np.broadcast_to(np.asarray(y, dtype=float), (n_batch, sys.d2))
    w1 = SubstreamBlocks(seed, PURPOSE_W1, path_start, n_batch)
    x = x0s.astype(float).copy()
    sqrt_dt = math.sqrt(dt)

    snap_lookup = {}
    snapshots = None
    if snapshot_steps is not None:
        snapshot_steps = np.asarray(snapshot_steps, dtype=int)
        snapshots = np.empty((len(snapshot_steps), n_batch, d1))
        snap_lookup = {int(s): i for i, s in enumerate(snapshot_steps)}
        if 0 in snap_lookup:
            snapshots[snap_lookup[0]] = x

    integ = None
    g_prev = None
    if integrand is not None:
        g_prev = np.asarray(integrand(t0, x), dtype=float)
        integ = np.zeros_like(g_prev)

    chunk = max(16, min(max(n_steps, 1), _CHUNK_TARGET_WORDS // max(1, n_batch)))
    step = 0
    while step < n_steps:
        c = min(chunk, n_steps - step)
        dw = w1.read(c, m1) * sqrt_dt
        for j in range(c):
            t = t0 + (step + j) * dt
            x = x + dt * np.asarray(sys.b(t, x, yrow), dtype=float) \
                + _apply_diffusion(sys.sigma(t, x, yrow), dw[:, j, :])
            if integrand is not None:
                g_new = np.asarray(integrand(t + dt, x), dtype=float)
                integ += (0.5 * dt) * (g_prev + g_new)
                g_prev = g_new
            k = step + j + 1
            if k in snap_lookup:
                if not np.isfinite(x).all():
                    raise IntegrationDivergedError(
                        f"non-finite particle by step {k}", step=k)
                snapshots[snap_lookup[k]] = x
        step += c
    if not np.isfinite(x).all():
        bad = np.flatnonzero(~np.isfinite(x).all(axis=1))
        raise IntegrationDivergedError(
            f"non-finite particle at end of frozen run (path {path_start + int(bad[0])})",
            step=n_steps, path_index=path_start + int(bad[0]))
    return x, snapshots, integ


def frozen_ensemble(sys: SystemSpec, y, t0: float, t1: float, x0s: np.ndarray,
                    dt: float = DEFAULT_FROZEN_DT, seed: int = 0, *,
                    snapshot_times=None, integrand=None, path_offset: int = 0,
                    batch_size: int = 20_000, threads: int = 1):
    """Evolve an ensemble of frozen paths from t0 to t1.

    Returns (endpoints, snapshots, integrals); ``snapshot_times`` are snapped
    to grid times.  Particle i always consumes substream (seed, offset+i, W1).
    """
    if t1 < t0:
        raise ConfigurationError("t1 must be >= t0")
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    n = x0s.shape[0]
    n_steps = int(round((t1 - t0) / dt)) if t1 > t0 else 0
    snap_steps = None
    if snapshot_times is not None:
        snap_steps = np.array(
            [int(round((s - t0) / dt)) for s in snapshot_times], dtype=int)
        if np.any(snap_steps < 0) or np.any(snap_steps > n_steps):
            raise ConfigurationError("snapshot times outside [t0, t1]")

    def worker(start, count):
        return _frozen_batch(sys, y, t0, dt, n_steps, x0s[start:start + count],
                             seed, path_offset + start,
                             snapshot_steps=snap_steps, integrand=integrand)

    parts = run_batched(n, batch_size, threads, worker)
    endpoints = np.concatenate([p[0] for p in parts], axis=0)
    snapshots = None
    if snap_steps is not None:
        snapshots = np.concatenate([p[1] for p in parts], axis=1)
    integrals = None
    if integrand is not None:
        integrals = np.concatenate([p[2] for p in parts], axis=0)
    return endpoints, snapshots, integrals


def simulate_frozen(sys: SystemSpec, s: float, t: float, y, x0,
                    dt: float = DEFAULT_FROZEN_DT,
                    noise: NoiseStream = NoiseStream(0)) -> np.ndarray:
    """Endpoint of one frozen path from (s, x0) to time t; t = s returns x0."""
    if t < s:
        raise ConfigurationError("t must be >= s")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if t == s:
        return x0.copy()
    yv = np.asarray(y, dtype=float)

    def drift(tt, x):
        return np.asarray(sys.b(tt, x[None, :], yv[None, :]), dtype=float)[0]

    def diffusion(tt, x):
        sig = np.asarray(sys.sigma(tt, x[None, :], yv[None, :]), dtype=float)
        return sig if sig.ndim == 2 else sig[0]

    n_steps = max(1, int(round((t - s) / dt)))
    grid = TimeGrid(s, t, n_steps)
    traj = simulate_generic(drift, diffusion, x0, grid,
                            noise.with_tag(PURPOSE_W1))
    return traj[-1]


def initial_spread(n_particles: int, d1: int, seed: int) -> np.ndarray:
    """Standard-normal cloud initializer (overlaps the dissipative basin)."""
    g = NoiseStream(derive_seed(seed, 101), purpose_tag=PURPOSE_W1).generator()
    return g.standard_normal((n_particles, d1))


def estimate_invariant_cloud(sys: SystemSpec, t: float, y, n_particles: int,
                             burn_in: float = DEFAULT_BURN_IN,
                             dt: float = DEFAULT_FROZEN_DT, seed: int = 0, *,
                             threads: int = 1) -> ParticleCloud:
    """Particle approximation of the invariant law at (t, y).

    Evolves ``n_particles`` independent frozen paths from time t - burn_in
    (standard-normal start) to t; by exponential mixing the endpoint cloud
    approximates the invariant law with initializer bias ~ exp(-delta*burn_in).

    Note the burn-in may reach into negative times.  The built-ins define
    their coefficients for all real t; for a user system defined only on
    t >= 0, pick t >= burn_in or extend the coefficients.
    """
    if burn_in <= 0:
        raise ConfigurationError("burn_in must be positive")
    if n_particles < 1:
        raise ConfigurationError("need at least one particle")
    x0s = initial_spread(n_particles, sys.d1, seed)
    endpoints, _, _ = frozen_ensemble(sys, y, t - burn_in, t, x0s, dt=dt,
                                      seed=seed, threads=threads)
    return ParticleCloud(t=t, y=np.atleast_1d(np.asarray(y, dtype=float)),
                         particles=endpoints)


def push_cloud(sys: SystemSpec, cloud: ParticleCloud, t1: float,
               dt: float = DEFAULT_FROZEN_DT, seed: int = 0, *,
               threads: int = 1) -> ParticleCloud:
    """Push a cloud forward under the frozen dynamics to time t1 (fresh noise)."""
    endpoints, _, _ = frozen_ensemble(sys, cloud.y, cloud.t, t1, cloud.particles,
                                      dt=dt, seed=derive_seed(seed, 202),
                                      threads=threads)
    return ParticleCloud(t=t1, y=cloud.y, particles=endpoints)


def semigroup_apply(sys: SystemSpec, s: float, t: float, y, phi: Callable,
                    start, n_paths: int = 4000, dt: float = DEFAULT_FROZEN_DT,
                    seed: int = 0, *, threads: int = 1):
    """Monte Carlo value of the two-parameter expectation operator.

    ``start`` is either a point x0 (replicated over ``n_paths`` independent
    paths) or a ParticleCloud whose particles are pushed individually.
    Returns (value, standard error) of the mean of ``phi`` over endpoints.
    """
    if t < s:
        raise ConfigurationError("t must be >= s")
    if isinstance(start, ParticleCloud):
        x0s = start.particles
    else:
        x0 = np.atleast_1d(np.asarray(start, dtype=float))
        x0s = np.broadcast_to(x0, (n_paths, sys.d1)).copy()
    endpoints, _, _ = frozen_ensemble(sys, y, s, t, x0s, dt=dt, seed=seed,
                                      threads=threads)
    vals = np.asarray(phi(endpoints), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(vals.shape[0])
    if mean.size == 1:
        return float(mean[0]), float(se[0])
    return mean, se


def probe_mixing_rate(sys: SystemSpec, y, t_anchor: float, lags,
                      n_particles: int = 2000, dt: float = DEFAULT_FROZEN_DT,
                      seed: int = 0, separation: float = 4.0) -> MixingEstimate:
    """Exponential mixing rate from synchronously coupled ensembles.

    Two ensembles start at t_anchor separated by ``separation`` in every fast
    coordinate and share Brownian increments; the mean distance at each lag
    then decays like exp(-delta * lag).  A least-squares line on the log
    distances yields delta_hat.  Raises MixingProbeError when the distances
    are degenerate or fail to decay (dissipativity violation or too-short lags).
    """
    lags = np.sort(np.asarray(lags, dtype=float))
    if lags.size < 3:
        raise ConfigurationError("need at least 3 lags")
    g = NoiseStream(derive_seed(seed, 303)).generator()
    base = g.standard_normal((n_particles, sys.d1))
    xa = base + 0.5 * separation
    xb = base - 0.5 * separation
    times = t_anchor + lags
    _, snap_a, _ = frozen_ensemble(sys, y, t_anchor, float(times[-1]), xa,
                                   dt=dt, seed=seed, snapshot_times=times)
    _, snap_b, _ = frozen_ensemble(sys, y, t_anchor, float(times[-1]), xb,
                                   dt=dt, seed=seed, snapshot_times=times)
    dist = np.sqrt(((snap_a - snap_b) ** 2).sum(axis=2)).mean(axis=1)
    if np.any(dist <= 1e-13):
        raise MixingProbeError(
            "coupled ensembles coincide; initial separation lost to rounding "
            "or initializations identical")
    logd = np.log(dist)
    if not np.all(np.diff(dist) < 0.0):
        raise MixingProbeError(
            f"distances not strictly decreasing over lags {lags.tolist()}: "
            f"{dist.tolist()}; dissipativity violated or lags too short")
    A = np.vstack([lags, np.ones_like(lags)]).T
    coef, res, _, _ = np.linalg.lstsq(A, logd, rcond=None)
    slope = float(coef[0])
    rms = float(np.sqrt(res[0] / lags.size)) if res.size else 0.0
    if slope >= 0.0:
        raise MixingProbeError(f"fitted decay rate nonpositive ({-slope:.3g})")
    return MixingEstimate(delta_hat=-slope, lags=lags, log_distances=logd,
                          residual=rms)
