"""Averaged drift/diffusion estimators and their time-averaging residuals.

Two averaging stages: first in the fast variable against the invariant law
at fixed time (bar quantities), then in time over a long window (double-bar
quantities).  For time-periodic systems one period is an exact window; for
general systems the window length trades residual decay against cost, so the
residual curves kappa1/kappa2 are estimated and reported rather than assumed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError
from .frozen import (DEFAULT_BURN_IN, DEFAULT_FROZEN_DT, ParticleCloud,
                     frozen_ensemble, initial_spread)
from .systems import SystemSpec

TWO_PI = 2.0 * math.pi


def estimate_bar_F(sys: SystemSpec, t: float, y, cloud: ParticleCloud):
    """Particle average of the slow drift against the invariant cloud at (t, y).

    Returns (value, se) with shapes (d2,).  SE is zero when F does not
    depend on the fast variable.
    """
    if cloud.n < 1:
        raise ConfigurationError("empty cloud")
    yrow = np.broadcast_to(np.asarray(y, dtype=float), (cloud.n, sys.d2))
    vals = np.asarray(sys.F(t, cloud.particles, yrow), dtype=float)
    vals = np.broadcast_to(vals, (cloud.n, sys.d2))
    value = vals.mean(axis=0)
    if cloud.n > 1:
        se = vals.std(axis=0, ddof=1) / math.sqrt(cloud.n)
    else:
        se = np.zeros(sys.d2)
    return value, se


def _trapezoid_weights(n_nodes: int, h: float) -> np.ndarray:
    w = np.full(n_nodes, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _node_grid(T_avg: float, n_nodes: Optional[int], period: Optional[float]):
    """Trapezoid node times on [0, T_avg]; default density 64 nodes per cycle."""
    if n_nodes is None:
        cycle = period if period is not None else TWO_PI
        n_nodes = max(8, int(math.ceil(64 * T_avg / cycle)))
    if n_nodes % 2:
        n_nodes += 1          # even count so the half window lands on a node
    h = T_avg / n_nodes
    return np.linspace(0.0, T_avg, n_nodes + 1), h


def _resolve_window(sys: SystemSpec, T_avg: Optional[float]) -> float:
    if T_avg is None:
        if sys.period is None:
            raise ConfigurationError(
                "T_avg required for systems without a declared period")
        return float(sys.period)
    if T_avg <= 0:
        raise ConfigurationError("T_avg must be positive")
    return float(T_avg)


def _is_full_period_window(sys: SystemSpec, T_avg: float) -> bool:
    if sys.period is None:
        return False
    ratio = T_avg / sys.period
    return abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1


@dataclass
class TimeAverageEstimate:
    """Time-averaged particle estimate with its error components."""

    value: np.ndarray        # (d2,)
    se: np.ndarray           # (d2,) Monte Carlo standard error
    window_bias: float       # self-estimate of the finite-window residual
    T_avg: float
    n_nodes: int

    @property
    def combined_error(self) -> np.ndarray:
        return self.se + self.window_bias


def _stationary_snapshots(sys: SystemSpec, y, times: np.ndarray,
                          n_particles: int, burn_in: float, dt: float,
                          seed: int, threads: int = 1) -> np.ndarray:
    """Snapshots (n_times, N, d1) of one stationary ensemble along shared paths.

    One burn-in reaching back before time 0 serves every node: clouds at
    different times are cheap because the paths are shared.
    """
    x0s = initial_spread(n_particles, sys.d1, seed)
    _, snaps, _ = frozen_ensemble(sys, y, -burn_in, float(times[-1]), x0s,
                                  dt=dt, seed=seed, snapshot_times=times,
                                  threads=threads)
    return snaps


def _bar_F_node_values(sys: SystemSpec, y, times: np.ndarray,
                       snaps: np.ndarray) -> np.ndarray:
    """F evaluated on each node's cloud: shape (n_times, N, d2)."""
    n = snaps.shape[1]
    yrow = np.broadcast_to(np.asarray(y, dtype=float), (n, sys.d2))
    out = np.empty((len(times), n, sys.d2))
    for j, t in enumerate(times):
        out[j] = np.broadcast_to(
            np.asarray(sys.F(t, snaps[j], yrow), dtype=float), (n, sys.d2))
    return out


def estimate_double_bar_F(sys: SystemSpec, y, T_avg: Optional[float] = None,
                          n_time_nodes: Optional[int] = None,
                          cloud_budget: int = 4000,
                          burn_in: float = DEFAULT_BURN_IN,
                          dt: float = DEFAULT_FROZEN_DT, seed: int = 0, *,
                          threads: int = 1) -> TimeAverageEstimate:
    """Double average of the slow drift: fast variable first, then time.

    Trapezoid quadrature of the node-wise cloud averages over [0, T_avg];
    the SE comes from per-particle time averages (correct under the shared
    burn-in paths).  ``window_bias`` self-estimates the finite-window
    residual by comparing against the half window; it is exactly zero for a
    whole number of declared periods.
    """
    T = _resolve_window(sys, T_avg)
    times, h = _node_grid(T, n_time_nodes, sys.period)
    snaps = _stationary_snapshots(sys, y, times, cloud_budget, burn_in, dt,
                                  seed, threads)
    node_vals = _bar_F_node_values(sys, y, times, snaps)
    w = _trapezoid_weights(len(times), h) / T
    per_particle = np.tensordot(w, node_vals, axes=(0, 0))   # (N, d2)
    value = per_particle.mean(axis=0)
    se = per_particle.std(axis=0, ddof=1) / math.sqrt(per_particle.shape[0])
    if _is_full_period_window(sys, T):
        bias = 0.0
    else:
        # envelope of sub-window averages around the full-window value;
        # tracks the kappa1-scale residual without assuming its constant
        bias = 0.0
        n = len(times) - 1
        for frac in (0.5, 0.625, 0.75, 0.875):
            j = int(round(frac * n))
            w_sub = _trapezoid_weights(j + 1, h) / times[j]
            a_sub = np.tensordot(w_sub, node_vals[: j + 1], axes=(0, 0)).mean(axis=0)
            bias = max(bias, float(np.max(np.abs(value - a_sub))))
    return TimeAverageEstimate(value=value, se=se, window_bias=bias,
                               T_avg=T, n_nodes=len(times) - 1)


@dataclass
class BarGEstimate:
    value: np.ndarray      # (d2, m2)
    residual: float        # time-averaged squared HS distance to the average
    T_avg: float


def estimate_bar_G(sys: SystemSpec, y, T_avg: Optional[float] = None,
                   n_time_nodes: Optional[int] = None) -> BarGEstimate:
    """Time average of the slow diffusion and the achieved L2 residual.

    The constant matrix minimizing the time-averaged squared
    Hilbert-Schmidt distance to G(t, y) is the plain time average; the
    residual reported is that minimal value.
    """
    T = _resolve_window(sys, T_avg)
    times, h = _node_grid(T, n_time_nodes, sys.period)
    yv = np.atleast_2d(np.asarray(y, dtype=float))
    g_nodes = np.empty((len(times), sys.d2, sys.m2))
    for j, t in enumerate(times):
        g = np.asarray(sys.G(t, yv), dtype=float)
        g_nodes[j] = g if g.ndim == 2 else g[0]
    w = _trapezoid_weights(len(times), h) / T
    g_bar = np.tensordot(w, g_nodes, axes=(0, 0))
    sq = ((g_nodes - g_bar) ** 2).sum(axis=(1, 2))
    residual = float(np.tensordot(w, sq, axes=(0, 0)))
    return BarGEstimate(value=g_bar, residual=residual, T_avg=T)


def _loglog_slope(xs: np.ndarray, ys: np.ndarray) -> float:
    lx, ly = np.log(xs), np.log(ys)
    lx = lx - lx.mean()
    return float((lx * (ly - ly.mean())).sum() / (lx * lx).sum())


@dataclass
class KappaCurves:
    """Sampled decay of the time-averaging residuals over window lengths."""

    T_values: np.ndarray
    kappa1: np.ndarray
    kappa1_se: np.ndarray
    kappa1_censored: np.ndarray    # bool: value below 2*SE, excluded from fit
    kappa2: np.ndarray
    kappa1_slope: Optional[float]
    kappa2_slope: Optional[float]


def estimate_kappa_curves(sys: SystemSpec, y, T_list,
                          cloud_budget: int = 4000,
                          burn_in: float = DEFAULT_BURN_IN,
                          dt: float = DEFAULT_FROZEN_DT, seed: int = 0, *,
                          reference_F=None, reference_G=None,
                          threads: int = 1) -> KappaCurves:
    """Residual curves of the double time-average over a grid of windows.

    kappa1(T) = |(1/T) int_0^T barF(t,y) dt - doublebarF(y)| / (1 + |y|),
    kappa2(T) = sqrt((1/T) int_0^T |G(t,y)-barG(y)|_HS^2 dt / (1 + |y|^2)).

    References default to the system oracles, else to the largest-window
    estimate.  Values below twice their SE are censored out of the log-log
    slope fits (fits need >= 3 surviving points, else slope is None).
    """
    T_list = np.sort(np.asarray(T_list, dtype=float))
    if T_list.size < 3:
        raise ConfigurationError("need at least 3 window lengths")
    yv = np.atleast_1d(np.asarray(y, dtype=float))
    T_max = float(T_list[-1])
    cycle = sys.period if sys.period is not None else TWO_PI
    h = cycle / 64.0
    n_nodes = int(math.ceil(T_max / h))
    times = np.linspace(0.0, T_max, n_nodes + 1)
    h = times[1] - times[0]
    snaps = _stationary_snapshots(sys, yv, times, cloud_budget, burn_in, dt,
                                  seed, threads)
    node_vals = _bar_F_node_values(sys, yv, times, snaps)

    if reference_F is None and sys.oracles is not None \
            and sys.oracles.double_bar_F is not None:
        reference_F = np.asarray(sys.oracles.double_bar_F(yv), dtype=float)
    if reference_G is None and sys.oracles is not None \
            and sys.oracles.bar_G is not None:
        reference_G = np.asarray(sys.oracles.bar_G(yv), dtype=float)

    if reference_G is None:
        reference_G = estimate_bar_G(sys, yv, T_avg=T_max).value

    norm1 = 1.0 + float(np.linalg.norm(yv))
    norm2 = math.sqrt(1.0 + float(np.linalg.norm(yv)) ** 2)

    # squared HS distance of G(t, y) to the reference, on the fine node grid
    yv2 = np.atleast_2d(yv)
    g_sq = np.empty(len(times))
    for jg, tg in enumerate(times):
        g = np.asarray(sys.G(tg, yv2), dtype=float)
        g = g if g.ndim == 2 else g[0]
        g_sq[jg] = ((g - reference_G) ** 2).sum()

    k1 = np.empty(T_list.size)
    k1_se = np.empty(T_list.size)
    k2 = np.empty(T_list.size)
    window_means = []
    for i, T in enumerate(T_list):
        j_end = min(max(int(round(T / h)), 2), n_nodes)
        T_eff = times[j_end]
        w = _trapezoid_weights(j_end + 1, h) / T_eff
        per_particle = np.tensordot(w, node_vals[: j_end + 1], axes=(0, 0))
        a = per_particle.mean(axis=0)
        window_means.append(a)
        a_se = per_particle.std(axis=0, ddof=1) / math.sqrt(per_particle.shape[0])
        k1_se[i] = float(np.max(a_se)) / norm1
        k2[i] = math.sqrt(max(float(np.tensordot(w, g_sq[: j_end + 1],
                                                 axes=(0, 0))), 0.0)) / norm2
    ref_F = reference_F if reference_F is not None else window_means[-1]
    for i, a in enumerate(window_means):
        k1[i] = float(np.max(np.abs(a - ref_F))) / norm1

    censored = k1 <= 2.0 * k1_se
    ok = ~censored
    k1_slope = _loglog_slope(T_list[ok], k1[ok]) if ok.sum() >= 3 else None
    pos2 = k2 > 1e-14
    k2_slope = _loglog_slope(T_list[pos2], k2[pos2]) if pos2.sum() >= 3 else None
    return KappaCurves(T_values=T_list, kappa1=k1, kappa1_se=k1_se,
                       kappa1_censored=censored, kappa2=k2,
                       kappa1_slope=k1_slope, kappa2_slope=k2_slope)


@dataclass(frozen=True)
class AveragedCoefficients:
    """Bundle of averaged-coefficient estimators for one system."""

    bar_F: Callable                      # (t, y, cloud) -> (value, se)
    double_bar_F: Callable               # (y) -> TimeAverageEstimate
    bar_G: Callable                      # (y) -> BarGEstimate
    kappa1_curve: Optional[np.ndarray] = None   # columns: T, value, se
    kappa2_curve: Optional[np.ndarray] = None   # columns: T, value


def averaged_coefficients(sys: SystemSpec, y_probe=None, T_list=None,
                          cloud_budget: int = 4000, seed: int = 0, *,
                          threads: int = 1) -> AveragedCoefficients:
    """Assemble the estimator bundle, with residual curves when requested.

    The kappa curves are sampled at ``y_probe`` (default: origin) over the
    window grid ``T_list``; estimator callables stay lazy and reusable.
    """
    curves1 = curves2 = None
    if T_list is not None:
        yv = np.zeros(sys.d2) if y_probe is None else np.atleast_1d(y_probe)
        kc = estimate_kappa_curves(sys, yv, T_list, cloud_budget=cloud_budget,
                                   seed=seed, threads=threads)
        curves1 = np.column_stack([kc.T_values, kc.kappa1, kc.kappa1_se])
        curves2 = np.column_stack([kc.T_values, kc.kappa2])
    return AveragedCoefficients(
        bar_F=lambda t, y, cloud: estimate_bar_F(sys, t, y, cloud),
        double_bar_F=lambda y, **kw: estimate_double_bar_F(
            sys, y, cloud_budget=cloud_budget, seed=seed, threads=threads, **kw),
        bar_G=lambda y, **kw: estimate_bar_G(sys, y, **kw),
        kappa1_curve=curves1, kappa2_curve=curves2)


class CoefficientTable:
    """Tabulated averaged coefficients on a 1-d slow grid, linearly interpolated.

    The export/import format is a JSON object with keys ``y_grid``,
    ``double_bar_F`` (+ ``_se``), ``bar_G`` and ``meta``; it is the exchange
    format the SDE engine consumes when a system carries no oracles.
    """

    def __init__(self, y_grid, F_values, F_se, G_values, meta=None):
        self.y_grid = np.asarray(y_grid, dtype=float)
        self.F_values = np.asarray(F_values, dtype=float)     # (K, d2)
        self.F_se = np.asarray(F_se, dtype=float)
        self.G_values = np.asarray(G_values, dtype=float)     # (K, d2, m2)
        self.meta = dict(meta or {})
        if self.F_values.shape[1] != 1:
            raise ConfigurationError("tabulated coefficients support d2 == 1")
        if not np.all(np.diff(self.y_grid) > 0):
            raise ConfigurationError("y grid must be strictly increasing")

    def double_bar_F(self, y):
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1)
        vals = np.interp(flat, self.y_grid, self.F_values[:, 0])
        return vals.reshape(y.shape)

    def bar_G(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim <= 1:
            v = np.empty(self.G_values.shape[1:])
            for i in range(v.shape[0]):
                for j in range(v.shape[1]):
                    v[i, j] = np.interp(float(y.reshape(-1)[0]), self.y_grid,
                                        self.G_values[:, i, j])
            return v
        flat = y[:, 0]
        out = np.empty((y.shape[0],) + self.G_values.shape[1:])
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                out[:, i, j] = np.interp(flat, self.y_grid, self.G_values[:, i, j])
        return out

    def to_dict(self) -> dict:
        return {
            "y_grid": self.y_grid.tolist(),
            "double_bar_F": self.F_values.tolist(),
            "double_bar_F_se": self.F_se.tolist(),
            "bar_G": self.G_values.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoefficientTable":
        return cls(d["y_grid"], d["double_bar_F"], d["double_bar_F_se"],
                   d["bar_G"], d.get("meta"))


def tabulate_coefficients(sys: SystemSpec, y_grid, T_avg: Optional[float] = None,
                          n_time_nodes: Optional[int] = None,
                          cloud_budget: int = 4000,
                          burn_in: float = DEFAULT_BURN_IN,
                          dt: float = DEFAULT_FROZEN_DT, seed: int = 0, *,
                          threads: int = 1) -> CoefficientTable:
    """Estimate double-bar coefficients on a slow grid (d2 == 1).

    The same seed drives every grid point (common random numbers), which
    keeps the tabulated curve smooth in y.
    """
    if sys.d2 != 1:
        raise ConfigurationError("tabulation supports d2 == 1")
    y_grid = np.asarray(y_grid, dtype=float)
    F_vals, F_ses, G_vals = [], [], []
    for yk in y_grid:
        est = estimate_double_bar_F(sys, [yk], T_avg=T_avg,
                                    n_time_nodes=n_time_nodes,
                                    cloud_budget=cloud_budget, burn_in=burn_in,
                                    dt=dt, seed=seed, threads=threads)
        F_vals.append(est.value)
        F_ses.append(est.se)
        G_vals.append(estimate_bar_G(sys, [yk], T_avg=T_avg,
                                     n_time_nodes=n_time_nodes).value)
    meta = {"system": sys.name, "params": sys.params,
            "T_avg": T_avg if T_avg is not None else sys.period,
            "cloud_budget": cloud_budget, "seed": seed}
    return CoefficientTable(y_grid, np.array(F_vals), np.array(F_ses),
                            np.array(G_vals), meta)


def save_table(path, table: CoefficientTable):
    Path(path).write_text(json.dumps(table.to_dict(), indent=1, sort_keys=True))


def load_table(path) -> CoefficientTable:
    return CoefficientTable.from_dict(json.loads(Path(path).read_text()))
