"""Deterministic, seedable Euler-Maruyama integration.

Single-path operations (`simulate_generic`, `simulate_multiscale`,
`simulate_averaged_coupled`) materialize full trajectories; the batched
kernel behind `coupled_ensemble_stats` streams thousands of paths through
chunked noise blocks and records only macro-grid reductions.  Both consume
the same per-path substreams, so path p of an ensemble is bit-identical to
the corresponding single-path simulation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, IntegrationDivergedError
from .noise import PURPOSE_W1, PURPOSE_W2, NoiseStream, SubstreamBlocks
from .systems import SystemSpec

DEFAULT_H_REL = 1e-2          # micro step = h_rel * eps, keeps the explicit
                              # scheme stable against the O(1/eps) fast drift
_CHUNK_TARGET_WORDS = 16_000_000


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [t0, t1] with n_steps steps."""

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("t1 must exceed t0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclass
class PathBundle:
    """One path's Brownian increments per driver role plus derived trajectories."""

    grid: TimeGrid
    increments: dict = field(default_factory=dict)     # tag -> (n_steps, m)
    trajectories: dict = field(default_factory=dict)   # name -> (n_steps+1, d)


def make_bundle(grid: TimeGrid, noise: NoiseStream, roles: dict) -> PathBundle:
    """Materialize increments ~ N(0, dt) for each purpose tag in ``roles``.

    ``roles`` maps purpose_tag -> number of Brownian coordinates.
    """
    inc = {
        int(tag): noise.with_tag(tag).increments(grid.n_steps, m, grid.dt)
        for tag, m in roles.items()
    }
    return PathBundle(grid=grid, increments=inc)


def _apply_diffusion(sig, dw):
    """sig: (d, m) or (B, d, m); dw: (m,) or (B, m) -> drift-shaped output."""
    sig = np.asarray(sig, dtype=float)
    if sig.ndim == 2:
        return dw @ sig.T
    return np.einsum("...im,...m->...i", sig, dw)


def simulate_generic(drift: Callable, diffusion: Callable, x0, grid: TimeGrid,
                     noise: NoiseStream, increments: Optional[np.ndarray] = None
                     ) -> np.ndarray:
    """Euler-Maruyama for dX = drift(t, X) dt + diffusion(t, X) dW.

    Returns the trajectory with shape (n_steps + 1, d).  Raises
    IntegrationDivergedError (with the step index) if the state leaves the
    finite range.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.shape[0]
    dt = grid.dt
    sig0 = np.asarray(diffusion(grid.t0, x0), dtype=float)
    if sig0.ndim != 2 or sig0.shape[0] != d:
        raise ConfigurationError(
            f"diffusion must return a ({d}, m) matrix, got shape {sig0.shape}"
        )
    m = sig0.shape[1]
    if increments is None:
        increments = noise.increments(grid.n_steps, m, dt)
    if increments.shape != (grid.n_steps, m):
        raise ConfigurationError("increments shape does not match grid/diffusion")
    traj = np.empty((grid.n_steps + 1, d))
    traj[0] = x0
    x = x0.copy()
    for k in range(grid.n_steps):
        t = grid.t0 + k * dt
        x = x + np.asarray(drift(t, x), dtype=float) * dt \
            + _apply_diffusion(diffusion(t, x), increments[k])
        if not np.isfinite(x).all():
            raise IntegrationDivergedError(
                f"non-finite state at step {k + 1} (t={t + dt:.6g})", step=k + 1
            )
        traj[k + 1] = x
    return traj


def micro_step_count(T: float, eps: float, h_rel: float = DEFAULT_H_REL,
                     multiple_of: int = 1) -> int:
    """Smallest step count that is a multiple of ``multiple_of`` with dt <= h_rel*eps."""
    n = max(1, math.ceil(T / (h_rel * eps)))
    k = math.ceil(n / multiple_of)
    return k * multiple_of


def check_micro_grid(grid: TimeGrid, eps: float, h_rel: float = DEFAULT_H_REL):
    if not (0.0 < eps <= 1.0):
        raise ConfigurationError(f"eps must lie in (0, 1], got {eps}")
    if grid.dt > h_rel * eps * (1.0 + 1e-12):
        raise ConfigurationError(
            f"grid.dt={grid.dt:.3g} exceeds h_rel*eps={h_rel * eps:.3g}; "
            "the fast drift is O(1/eps), refine the grid or raise h_rel explicitly"
        )


def simulate_multiscale(sys: SystemSpec, eps: float, x0, y0, grid: TimeGrid,
                        noise: NoiseStream, h_rel: float = DEFAULT_H_REL,
                        return_bundle: bool = False):
    """Coupled Euler-Maruyama for the eps-scaled slow-fast system.

    X uses drift b(t/eps,.)/eps and diffusion sigma(t/eps,.)/sqrt(eps) with
    driver tag 0; Y uses F(t/eps,.), G(t/eps,.) with driver tag 1.  The tag-1
    increments are exactly the ones `simulate_averaged_coupled` aggregates,
    which makes pathwise comparisons of Y and its averaged limit meaningful.
    """
    check_micro_grid(grid, eps, h_rel)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if x0.shape != (sys.d1,) or y0.shape != (sys.d2,):
        raise ConfigurationError("x0/y0 dimensions do not match the system")
    n, dt = grid.n_steps, grid.dt
    dw1 = noise.with_tag(PURPOSE_W1).increments(n, sys.m1, dt)
    dw2 = noise.with_tag(PURPOSE_W2).increments(n, sys.m2, dt)
    inv_eps = 1.0 / eps
    sq_inv = 1.0 / math.sqrt(eps)
    X = np.empty((n + 1, sys.d1))
    Y = np.empty((n + 1, sys.d2))
    X[0], Y[0] = x0, y0
    x, y = x0[None, :].copy(), y0[None, :].copy()
    for k in range(n):
        tau = (grid.t0 + k * dt) * inv_eps
        bx = np.asarray(sys.b(tau, x, y), dtype=float)
        fx = np.asarray(sys.F(tau, x, y), dtype=float)
        x = x + (dt * inv_eps) * bx \
            + sq_inv * _apply_diffusion(sys.sigma(tau, x, y), dw1[k][None, :])
        y = y + dt * fx + _apply_diffusion(sys.G(tau, y), dw2[k][None, :])
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise IntegrationDivergedError(
                f"non-finite state at step {k + 1}", step=k + 1
            )
        X[k + 1], Y[k + 1] = x[0], y[0]
    if return_bundle:
        bundle = PathBundle(grid=grid, increments={PURPOSE_W1: dw1, PURPOSE_W2: dw2},
                            trajectories={"X_eps": X, "Y_eps": Y})
        return X, Y, bundle
    return X, Y


class OracleCoefficients:
    """Averaged drift/diffusion pulled from a system's analytic oracles."""

    def __init__(self, sys: SystemSpec):
        if sys.oracles is None or sys.oracles.double_bar_F is None \
                or sys.oracles.bar_G is None:
            raise ConfigurationError(
                "system has no averaged-coefficient oracles; estimate and "
                "tabulate them first (averaging module)"
            )
        self._f = sys.oracles.double_bar_F
        self._g = sys.oracles.bar_G

    def double_bar_F(self, y):
        return np.asarray(self._f(y), dtype=float)

    def bar_G(self, y):
        return np.asarray(self._g(y), dtype=float)


def resolve_coefficients(sys: SystemSpec, coeffs=None):
    if coeffs is not None:
        return coeffs
    return OracleCoefficients(sys)


def simulate_averaged_coupled(sys: SystemSpec, y0, grid: TimeGrid,
                              noise: NoiseStream, coeffs=None,
                              micro_substeps: int = 1,
                              return_increments: bool = False):
    """Averaged slow equation driven by the same tag-1 noise as the full system.

    ``grid`` is the trajectory grid; each of its steps aggregates
    ``micro_substeps`` consecutive micro increments of the tag-1 substream, so
    the sum of micro increments per step equals the used increment exactly.
    """
    coeffs = resolve_coefficients(sys, coeffs)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    n, dt = grid.n_steps, grid.dt
    if micro_substeps < 1:
        raise ConfigurationError("micro_substeps must be >= 1")
    dt_micro = dt / micro_substeps
    micro = noise.with_tag(PURPOSE_W2).increments(n * micro_substeps, sys.m2, dt_micro)
    dw2 = micro.reshape(n, micro_substeps, sys.m2).sum(axis=1)
    Y = np.empty((n + 1, sys.d2))
    Y[0] = y0
    y = y0[None, :].copy()
    for k in range(n):
        y = y + dt * np.asarray(coeffs.double_bar_F(y), dtype=float) \
            + _apply_diffusion(coeffs.bar_G(y), dw2[k][None, :])
        if not np.isfinite(y).all():
            raise IntegrationDivergedError(
                f"non-finite state at step {k + 1}", step=k + 1
            )
        Y[k + 1] = y[0]
    if return_increments:
        return Y, dw2
    return Y


@dataclass
class CoupledPair:
    """Macro-grid samples of (Y_eps, Y_bar) driven by the same tag-1 stream."""

    grid: TimeGrid
    y_eps: np.ndarray       # (n_macro + 1, d2)
    y_bar: np.ndarray       # (n_macro + 1, d2)
    eps: float
    noise: NoiseStream
    n_micro: int


@dataclass
class CoupledStats:
    """Macro-grid reductions over a coupled ensemble."""

    times: np.ndarray           # (n_macro + 1,)
    devq_mean: np.ndarray       # E |Y_eps - Y_bar|^q per node
    devq_se: np.ndarray
    n_paths: int
    eps: float
    q: float
    z_terminal: Optional[np.ndarray] = None      # (n_paths, d2)
    fluct_terminal: Optional[np.ndarray] = None  # (n_paths, d2)
    x_terminal: Optional[np.ndarray] = None
    y_terminal: Optional[np.ndarray] = None

    @property
    def sup_error(self) -> float:
        return float(np.max(self.devq_mean))

    @property
    def sup_error_se(self) -> float:
        return float(self.devq_se[int(np.argmax(self.devq_mean))])


def _coupled_batch(sys: SystemSpec, eps: float, x0, y0, T: float,
                   n_micro: int, n_macro: int, seed: int, path_start: int,
                   n_batch: int, q: float, coeffs, fluct,
                   collect_z: bool, collect_state: bool):
    d1, d2, m1, m2 = sys.d1, sys.d2, sys.m1, sys.m2
    dt = T / n_micro
    k_per_macro = n_micro // n_macro
    inv_eps = 1.0 / eps
    sqrt_dt = math.sqrt(dt)
    diff_scale = 1.0 / math.sqrt(eps)

    w1 = SubstreamBlocks(seed, PURPOSE_W1, path_start, n_batch)
    w2 = SubstreamBlocks(seed, PURPOSE_W2, path_start, n_batch)

    x = np.broadcast_to(np.asarray(x0, dtype=float), (n_batch, d1)).copy()
    y = np.broadcast_to(np.asarray(y0, dtype=float), (n_batch, d2)).copy()
    yb = y.copy()

    sum_devq = np.zeros(n_macro + 1)
    sumsq_devq = np.zeros(n_macro + 1)

    integ = np.zeros((n_batch, d2)) if fluct is not None else None
    g_prev = np.asarray(fluct(0.0, x, y), dtype=float) if fluct is not None else None

    chunk = max(16, min(n_micro, _CHUNK_TARGET_WORDS // max(1, n_batch)))
    step = 0
    # node 0 contributes zero deviation by construction
    while step < n_micro:
        c = min(chunk, n_micro - step)
        dw1 = w1.read(c, m1) * sqrt_dt
        dw2 = w2.read(c, m2) * sqrt_dt
        for j in range(c):
            t = (step + j) * dt
            tau = t * inv_eps
            bx = np.asarray(sys.b(tau, x, y), dtype=float)
            fx = np.asarray(sys.F(tau, x, y), dtype=float)
            x = x + (dt * inv_eps) * bx \
                + diff_scale * _apply_diffusion(sys.sigma(tau, x, y), dw1[:, j, :])
            y = y + dt * fx + _apply_diffusion(sys.G(tau, y), dw2[:, j, :])
            yb = yb + dt * np.asarray(coeffs.double_bar_F(yb), dtype=float) \
                + _apply_diffusion(coeffs.bar_G(yb), dw2[:, j, :])
            if fluct is not None:
                tau_next = (t + dt) * inv_eps
                g_new = np.asarray(fluct(tau_next, x, y), dtype=float)
                integ += (0.5 * dt) * (g_prev + g_new)
                g_prev = g_new
            gstep = step + j + 1
            if gstep % k_per_macro == 0:
                node = gstep // k_per_macro
                if not (np.isfinite(x).all() and np.isfinite(y).all()
                        and np.isfinite(yb).all()):
                    bad = np.flatnonzero(
                        ~(np.isfinite(x).all(axis=1) & np.isfinite(y).all(axis=1)
                          & np.isfinite(yb).all(axis=1))
                    )
                    first = int(bad[0]) if bad.size else 0
                    raise IntegrationDivergedError(
                        f"non-finite state by step {gstep} "
                        f"(path {path_start + first}, eps={eps:g})",
                        step=gstep, path_index=path_start + first,
                    )
                dev = np.sqrt(((y - yb) ** 2).sum(axis=1)) ** q
                sum_devq[node] += dev.sum()
                sumsq_devq[node] += (dev * dev).sum()
        step += c

    out = {"sum_devq": sum_devq, "sumsq_devq": sumsq_devq}
    if collect_z:
        out["z_terminal"] = (y - yb) / math.sqrt(eps)
    if fluct is not None:
        out["fluct_terminal"] = integ
    if collect_state:
        out["x_terminal"] = x
        out["y_terminal"] = y
    return out


def run_batched(n_total: int, batch_size: int, threads: int, worker):
    """Run ``worker(start, count)`` over contiguous batches; results in batch order."""
    spans = [(s, min(batch_size, n_total - s))
             for s in range(0, n_total, batch_size)]
    if threads <= 1 or len(spans) == 1:
        return [worker(s, c) for s, c in spans]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        futures = [ex.submit(worker, s, c) for s, c in spans]
        return [f.result() for f in futures]


def coupled_ensemble_stats(sys: SystemSpec, eps: float, x0, y0, T: float,
                           n_paths: int, seed: int, *, q: float = 2.0,
                           n_macro: int = 100, h_rel: float = DEFAULT_H_REL,
                           coeffs=None, fluct=None, collect_z: bool = False,
                           collect_state: bool = False, path_offset: int = 0,
                           batch_size: int = 10_000, threads: int = 1
                           ) -> CoupledStats:
    """Monte Carlo reductions over ``n_paths`` coupled (Y_eps, Y_bar) paths.

    Per macro node, the mean and SE of |Y_eps - Y_bar|^q; optionally the
    terminal normalized deviations (Y_T - Ybar_T)/sqrt(eps) and the terminal
    running integral of a fluctuation functional ``fluct(tau, x, y)``.
    Path states are bit-identical for any batch size, thread count or total
    path count; the cross-path reductions are bit-identical for a fixed
    batch size under any thread count (summation grouping follows batches).
    """
    if not (0.0 < eps <= 1.0):
        raise ConfigurationError(f"eps must lie in (0, 1], got {eps}")
    coeffs = resolve_coefficients(sys, coeffs)
    n_micro = micro_step_count(T, eps, h_rel, multiple_of=n_macro)

    def worker(start, count):
        return _coupled_batch(sys, eps, x0, y0, T, n_micro, n_macro, seed,
                              path_offset + start, count, q, coeffs, fluct,
                              collect_z, collect_state)

    parts = run_batched(n_paths, batch_size, threads, worker)
    sum_devq = np.sum([p["sum_devq"] for p in parts], axis=0)
    sumsq_devq = np.sum([p["sumsq_devq"] for p in parts], axis=0)
    mean = sum_devq / n_paths
    var = np.maximum(sumsq_devq / n_paths - mean ** 2, 0.0)
    se = np.sqrt(var / n_paths)
    times = np.linspace(0.0, T, n_macro + 1)

    def gather(key):
        if key not in parts[0]:
            return None
        return np.concatenate([p[key] for p in parts], axis=0)

    return CoupledStats(
        times=times, devq_mean=mean, devq_se=se, n_paths=n_paths, eps=eps, q=q,
        z_terminal=gather("z_terminal"), fluct_terminal=gather("fluct_terminal"),
        x_terminal=gather("x_terminal"), y_terminal=gather("y_terminal"),
    )


def simulate_coupled_pair(sys: SystemSpec, eps: float, x0, y0, T: float,
                          n_macro: int, noise: NoiseStream,
                          h_rel: float = DEFAULT_H_REL, coeffs=None) -> CoupledPair:
    """One coupled (Y_eps, Y_bar) path sampled on the macro grid.

    Both components consume the same tag-1 substream of ``noise`` on the
    shared micro grid, so their difference isolates the averaging error.
    """
    coeffs = resolve_coefficients(sys, coeffs)
    n_micro = micro_step_count(T, eps, h_rel, multiple_of=n_macro)
    grid = TimeGrid(0.0, T, n_micro)
    X, Y = simulate_multiscale(sys, eps, x0, y0, grid, noise, h_rel=h_rel)
    # Y_bar integrates on the same micro grid (micro_substeps=1) so that its
    # discretization error stays subdominant to the averaging error.
    Yb = simulate_averaged_coupled(sys, y0, grid, noise, coeffs=coeffs)
    k = n_micro // n_macro
    macro_grid = TimeGrid(0.0, T, n_macro)
    return CoupledPair(grid=macro_grid, y_eps=Y[::k].copy(), y_bar=Yb[::k].copy(),
                       eps=eps, noise=noise, n_micro=n_micro)
