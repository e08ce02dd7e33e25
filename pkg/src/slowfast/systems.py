"""Slow-fast system descriptions and built-in analytically solvable test systems.

A system couples a fast equation in x (time scale t/eps) to a slow equation
in y:

    dX = (1/eps) b(t/eps, X, Y) dt + (1/sqrt(eps)) sigma(t/eps, X, Y) dW1
    dY = F(t/eps, X, Y) dt + G(t/eps, Y) dW2

Coefficient evaluators receive a scalar time ``t`` and state arrays with a
leading batch axis (``x: (N, d1)``, ``y: (N, d2)``) and must be pure,
finite-valued and numpy-broadcastable.  Matrix-valued coefficients may return
a constant ``(d, m)`` array, which broadcasts against any batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError

SQRT2 = math.sqrt(2.0)
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class AnalyticOracles:
    """Closed-form reference quantities for a test system.

    Every provided callable must be pure and finite valued.  All are optional;
    estimators fall back to Monte Carlo when an oracle is missing.
    """

    invariant_mean: Optional[Callable] = None   # (t, y) -> (d1,)
    invariant_cov: Optional[Callable] = None    # (t, y) -> (d1, d1)
    bar_F: Optional[Callable] = None            # (t, y) -> (d2,)
    double_bar_F: Optional[Callable] = None     # (y,) -> (d2,)
    bar_G: Optional[Callable] = None            # (y,) -> (d2, m2)
    phi: Optional[Callable] = None              # (t, x, y) -> (d2,)
    double_bar_sigma_sq: Optional[Callable] = None  # (y,) -> (d2, d2)


@dataclass(frozen=True)
class SystemSpec:
    """Complete description of one slow-fast system.

    ``alpha``/``beta`` are declared Hoelder exponents (metadata only, never
    verified).  ``period`` declares time periodicity of all four coefficients;
    estimators use it to pick exact averaging windows.  Instances are
    immutable and safe to share across workers; evaluators must be reentrant.
    """

    d1: int
    d2: int
    b: Callable
    sigma: Callable
    F: Callable
    G: Callable
    m1: int = 1
    m2: int = 1
    alpha: float = 1.0
    beta: float = 1.0
    period: Optional[float] = None
    oracles: Optional[AnalyticOracles] = None
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d1 < 1 or self.d2 < 1 or self.m1 < 1 or self.m2 < 1:
            raise ValueError("dimensions must be positive")
        if not (0.0 < self.alpha <= 1.0 and 0.0 < self.beta <= 1.0):
            raise ValueError("alpha, beta must lie in (0, 1]")
        if self.period is not None and self.period <= 0.0:
            raise ValueError("period must be positive")

    def with_coefficients(self, **kw) -> "SystemSpec":
        """Copy of this system with some coefficients replaced (oracles dropped)."""
        return replace(self, oracles=None, name=self.name + "*", **kw)


def _single_tone_mean(c: float, omega: float) -> Callable[[float], float]:
    # bounded solution of m' = -m + c*sin(omega t)
    denom = 1.0 + omega * omega

    def m(t):
        return c * (np.sin(omega * t) - omega * np.cos(omega * t)) / denom

    return m


def _ou_like_system(mean_fn, c_terms, kappa, g0, period, name, params):
    """Shared construction for the 1d linear-Gaussian fast systems.

    Fast equation dX = -(X - s(t)) dt + sqrt(2) dW1 with forcing
    s(t) = sum of sine tones; its time-indexed invariant law is
    N(m(t), 1) where m is the bounded solution of m' = -m + s(t).
    Slow equation dY = (X - kappa*Y) dt + g0 dW2.
    """
    if kappa <= 0.0:
        raise ValueError(
            "kappa must be positive: the averaged slow equation would not be "
            "dissipative and ensemble moments could grow without bound"
        )
    if g0 < 0.0:
        raise ValueError("g0 must be nonnegative")

    def forcing(t):
        s = 0.0
        for amp, omega in c_terms:
            s = s + amp * np.sin(omega * t)
        return s

    def b(t, x, y):
        return -(x - forcing(t))

    sigma_const = np.array([[SQRT2]])

    def sigma(t, x, y):
        return sigma_const

    def F(t, x, y):
        return x - kappa * y

    g_const = np.array([[float(g0)]])

    def G(t, y):
        return g_const

    def invariant_mean(t, y=None):
        return np.atleast_1d(np.asarray(mean_fn(t), dtype=float))

    def invariant_cov(t, y=None):
        return np.array([[1.0]])

    def bar_F(t, y):
        return mean_fn(t) - kappa * np.asarray(y, dtype=float)

    def double_bar_F(y):
        return -kappa * np.asarray(y, dtype=float)

    def bar_G(y):
        return g_const

    def phi(t, x, y):
        return x - mean_fn(t)

    def double_bar_sigma_sq(y):
        return np.array([[2.0]])

    oracles = AnalyticOracles(
        invariant_mean=invariant_mean,
        invariant_cov=invariant_cov,
        bar_F=bar_F,
        double_bar_F=double_bar_F,
        bar_G=bar_G,
        phi=phi,
        double_bar_sigma_sq=double_bar_sigma_sq,
    )
    return SystemSpec(
        d1=1, d2=1, b=b, sigma=sigma, F=F, G=G, m1=1, m2=1,
        alpha=1.0, beta=1.0, period=period, oracles=oracles,
        name=name, params=params,
    )


def builtin_periodic_ou(c: float = 1.0, kappa: float = 1.0, g0: float = 1.0) -> SystemSpec:
    """Periodically forced fast OU coupled to a linear slow equation.

    b(t,x,y) = -(x - c sin t), sigma = sqrt(2), F = x - kappa*y, G = g0,
    period 2*pi.  Invariant law at time t is N(m(t), 1) with
    m(t) = c (sin t - cos t)/2, which gives closed forms for every averaged
    and homogenized quantity (see the attached oracles).
    """
    mean_fn = _single_tone_mean(c, 1.0)
    return _ou_like_system(
        mean_fn, [(c, 1.0)], kappa, g0,
        period=TWO_PI, name="periodic_ou",
        params={"c": c, "kappa": kappa, "g0": g0},
    )


def builtin_quasi_periodic(c1: float = 1.0, c2: float = 1.0,
                           kappa: float = 1.0, g0: float = 1.0) -> SystemSpec:
    """Quasi-periodic stressor: forcing c1*sin t + c2*sin(sqrt(2) t).

    Same linear-Gaussian structure as :func:`builtin_periodic_ou`; the
    bounded mean is the sum of the two single-tone responses
    c*(sin wt - w cos wt)/(1+w^2), and no finite period exists.
    """
    m1 = _single_tone_mean(c1, 1.0)
    m2 = _single_tone_mean(c2, math.sqrt(2.0))

    def mean_fn(t):
        return m1(t) + m2(t)

    return _ou_like_system(
        mean_fn, [(c1, 1.0), (c2, math.sqrt(2.0))], kappa, g0,
        period=None, name="quasi_periodic",
        params={"c1": c1, "c2": c2, "kappa": kappa, "g0": g0},
    )


def builtin_nonlinear() -> SystemSpec:
    """Nonlinear stress system without oracles, for estimator cross-checks.

    b = -x + tanh(y) sin t, sigma = sqrt(2), F = sin(x) - y, G = 1.
    Dissipative: <x, b> <= -x^2/2 + 1/2 for all (t, y).
    """
    sigma_const = np.array([[SQRT2]])
    g_const = np.array([[1.0]])

    def b(t, x, y):
        return -x + np.tanh(y) * np.sin(t)

    def sigma(t, x, y):
        return sigma_const

    def F(t, x, y):
        return np.sin(x) - y

    def G(t, y):
        return g_const

    return SystemSpec(
        d1=1, d2=1, b=b, sigma=sigma, F=F, G=G, m1=1, m2=1,
        alpha=1.0, beta=1.0, period=TWO_PI, oracles=None,
        name="nonlinear", params={},
    )


BUILTIN_SYSTEMS = {
    "periodic_ou": builtin_periodic_ou,
    "quasi_periodic": builtin_quasi_periodic,
    "nonlinear": builtin_nonlinear,
}


def make_system(name: str, params: Optional[dict] = None) -> SystemSpec:
    """Instantiate a built-in system by name with a parameter map."""
    try:
        factory = BUILTIN_SYSTEMS[name]
    except KeyError:
        raise KeyError(
            f"unknown system {name!r}; available: {sorted(BUILTIN_SYSTEMS)}"
        ) from None
    return factory(**(params or {}))


def _random_probe_inputs(sys: SystemSpec, n: int, seed: int, t_max: float = 50.0):
    rng = np.random.default_rng(seed)
    ts = rng.uniform(0.0, t_max, size=n)
    xs = rng.normal(0.0, 3.0, size=(n, sys.d1))
    ys = rng.normal(0.0, 3.0, size=(n, sys.d2))
    return ts, xs, ys


def purity_defect(sys: SystemSpec, n: int = 1000, seed: int = 0) -> float:
    """Max abs difference between repeated evaluations on random inputs.

    Zero means every coefficient is bit-reproducible.
    """
    ts, xs, ys = _random_probe_inputs(sys, n, seed)
    worst = 0.0
    for t, x, y in zip(ts, xs, ys):
        xr, yr = x[None, :], y[None, :]
        for f in (lambda: sys.b(t, xr, yr), lambda: sys.sigma(t, xr, yr),
                  lambda: sys.F(t, xr, yr), lambda: sys.G(t, yr)):
            a, bb = np.asarray(f()), np.asarray(f())
            if not (np.isfinite(a).all() and np.isfinite(bb).all()):
                return math.inf
            worst = max(worst, float(np.max(np.abs(a - bb), initial=0.0)))
    return worst


def periodicity_defect(sys: SystemSpec, n: int = 100, seed: int = 0) -> float:
    """Max abs |f(t + period) - f(t)| over random probes; requires a period."""
    if sys.period is None:
        raise ConfigurationError("system declares no period")
    tau = sys.period
    ts, xs, ys = _random_probe_inputs(sys, n, seed)
    worst = 0.0
    for t, x, y in zip(ts, xs, ys):
        xr, yr = x[None, :], y[None, :]
        pairs = (
            (sys.b(t, xr, yr), sys.b(t + tau, xr, yr)),
            (sys.sigma(t, xr, yr), sys.sigma(t + tau, xr, yr)),
            (sys.F(t, xr, yr), sys.F(t + tau, xr, yr)),
            (sys.G(t, yr), sys.G(t + tau, yr)),
        )
        for a, bb in pairs:
            worst = max(worst, float(np.max(np.abs(np.asarray(a) - np.asarray(bb)), initial=0.0)))
    return worst
