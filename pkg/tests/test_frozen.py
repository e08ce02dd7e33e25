import math

import numpy as np
import pytest
from scipy import stats as sps

from slowfast.errors import ConfigurationError, MixingProbeError
from slowfast.frozen import (estimate_invariant_cloud, probe_mixing_rate,
                             push_cloud, semigroup_apply, simulate_frozen)
from slowfast.noise import NoiseStream
from slowfast.systems import builtin_periodic_ou

# variation-of-constants mean of the frozen path from (0, 0) to pi at c=1
MEAN_0_PI = 0.5 * (1.0 + math.exp(-math.pi))


def test_identity_at_equal_times():
    sys_ = builtin_periodic_ou()
    out = simulate_frozen(sys_, 1.3, 1.3, [0.0], [0.7], noise=NoiseStream(0))
    assert np.array_equal(out, np.array([0.7]))


def test_zero_diffusion_gives_deterministic_flow():
    import dataclasses
    sys_ = dataclasses.replace(builtin_periodic_ou(c=0.0),
                               sigma=lambda t, x, y: np.zeros((1, 1)),
                               oracles=None)
    out = simulate_frozen(sys_, 0.0, 1.0, [0.0], [1.0], dt=1e-4,
                          noise=NoiseStream(1))
    assert abs(out[0] - math.exp(-1.0)) < 1e-3


def test_frozen_mean_matches_variation_of_constants():
    sys_ = builtin_periodic_ou(c=1.0)
    val, se = semigroup_apply(sys_, 0.0, math.pi, [0.0], lambda x: x[:, 0],
                              0.0, n_paths=10_000, seed=7)
    assert abs(val - MEAN_0_PI) <= 3.0 * se


def test_cloud_matches_oracle_moments():
    sys_ = builtin_periodic_ou(c=1.0)
    cloud = estimate_invariant_cloud(sys_, math.pi / 2.0, [0.0], 10_000,
                                     burn_in=20.0, seed=5)
    mom = cloud.moments()
    assert abs(mom.mean[0] - 0.5) <= 3.0 * mom.mean_se[0]
    assert abs(mom.cov[0, 0] - 1.0) <= 3.0 * mom.var_se[0]
    assert abs(cloud.weights.sum() - 1.0) <= 1e-12


def test_unforced_cloud_is_standard_normal():
    sys_ = builtin_periodic_ou(c=0.0)
    cloud = estimate_invariant_cloud(sys_, 2.0, [0.0], 10_000, seed=9)
    stat = sps.kstest(cloud.particles[:, 0], "norm").statistic
    crit_1pct = 1.6276 / math.sqrt(cloud.n)
    assert stat < crit_1pct


def test_evolution_system_consistency():
    # pushing the cloud at time 0 forward to pi reproduces the cloud at pi
    sys_ = builtin_periodic_ou(c=1.0)
    cloud0 = estimate_invariant_cloud(sys_, 0.0, [0.0], 10_000, seed=11)
    pushed = push_cloud(sys_, cloud0, math.pi, seed=13)
    direct = estimate_invariant_cloud(sys_, math.pi, [0.0], 10_000, seed=15)
    a, b = pushed.moments(), direct.moments()
    se_mean = math.hypot(a.mean_se[0], b.mean_se[0])
    se_var = math.hypot(a.var_se[0], b.var_se[0])
    assert abs(a.mean[0] - b.mean[0]) <= 3.0 * se_mean
    assert abs(a.cov[0, 0] - b.cov[0, 0]) <= 3.0 * se_var


def test_semigroup_normalization_is_exact():
    sys_ = builtin_periodic_ou(c=1.0)
    val, se = semigroup_apply(sys_, 0.0, 0.5, [0.0], lambda x: np.ones(len(x)),
                              0.3, n_paths=500, seed=3)
    assert val == 1.0 and se == 0.0


def test_semigroup_invariance_identity():
    # expectation from the cloud at s equals the plain average at t
    sys_ = builtin_periodic_ou(c=1.0)
    phi = lambda x: x[:, 0] ** 2
    cloud0 = estimate_invariant_cloud(sys_, 0.0, [0.0], 8000, seed=17)
    lhs, lhs_se = semigroup_apply(sys_, 0.0, math.pi, [0.0], phi, cloud0, seed=19)
    cloud1 = estimate_invariant_cloud(sys_, math.pi, [0.0], 8000, seed=21)
    rhs = float(phi(cloud1.particles).mean())
    rhs_se = float(phi(cloud1.particles).std(ddof=1) / math.sqrt(cloud1.n))
    # truth for reference: m(pi)^2 + 1 = 1.25
    assert abs(lhs - rhs) <= 3.0 * math.hypot(lhs_se, rhs_se)
    assert abs(lhs - 1.25) <= 4.0 * lhs_se


def test_mixing_rate_matches_relaxation():
    sys_ = builtin_periodic_ou(c=1.0)
    est = probe_mixing_rate(sys_, [0.0], 0.0, [0.5, 1.0, 1.5, 2.0, 3.0], seed=23)
    assert abs(est.delta_hat - 1.0) <= 0.3

    import dataclasses
    stiff = dataclasses.replace(
        builtin_periodic_ou(c=1.0),
        b=lambda t, x, y: -2.0 * (x - np.sin(t)), oracles=None)
    est2 = probe_mixing_rate(stiff, [0.0], 0.0, [0.25, 0.5, 0.75, 1.0, 1.5],
                             seed=25)
    assert abs(est2.delta_hat - 2.0) <= 0.5


def test_mixing_probe_rejects_degenerate_initializations():
    sys_ = builtin_periodic_ou(c=1.0)
    with pytest.raises(MixingProbeError):
        probe_mixing_rate(sys_, [0.0], 0.0, [0.5, 1.0, 1.5], seed=27,
                          separation=0.0)


def test_fokker_planck_oracle_identity():
    # d/dt int x d(mu_t) equals int b d(mu_t): m'(t) = -m(t) + c sin t
    c = 1.0
    sys_ = builtin_periodic_ou(c=c)
    m = lambda t: sys_.oracles.invariant_mean(t, None)[0]
    for t in np.linspace(0.0, 7.0, 29):
        m_dot = 0.5 * c * (math.cos(t) + math.sin(t))
        assert abs(m_dot - (-m(t) + c * math.sin(t))) <= 1e-12


def test_fokker_planck_monte_carlo():
    # finite difference in t of the cloud mean vs the cloud average of b,
    # with paired particles (same substreams) so the difference SE is sharp
    sys_ = builtin_periodic_ou(c=1.0)
    t0, h = math.pi / 2.0, 0.25
    lo = estimate_invariant_cloud(sys_, t0 - h, [0.0], 8000, seed=31)
    hi = estimate_invariant_cloud(sys_, t0 + h, [0.0], 8000, seed=31)
    diff = (hi.particles[:, 0] - lo.particles[:, 0]) / (2.0 * h)
    lhs = float(diff.mean())
    lhs_se = float(diff.std(ddof=1) / math.sqrt(diff.size))
    mid = estimate_invariant_cloud(sys_, t0, [0.0], 8000, seed=33)
    bvals = sys_.b(t0, mid.particles, np.zeros((mid.n, 1)))[:, 0]
    rhs = float(bvals.mean())
    rhs_se = float(bvals.std(ddof=1) / math.sqrt(mid.n))
    # allow the O(h^2) finite-difference truncation alongside the MC error
    fd_tol = h * h / 6.0
    assert abs(lhs - rhs) <= 3.0 * math.hypot(lhs_se, rhs_se) + fd_tol


def test_burn_in_validation():
    sys_ = builtin_periodic_ou()
    with pytest.raises(ConfigurationError):
        estimate_invariant_cloud(sys_, 0.0, [0.0], 100, burn_in=0.0)
    with pytest.raises(ConfigurationError):
        probe_mixing_rate(sys_, [0.0], 0.0, [0.5, 1.0])
