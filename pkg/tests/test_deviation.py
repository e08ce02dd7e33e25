import math

import numpy as np
import pytest

from slowfast.deviation import (LimitOUSpec, build_deviation, jacobian_fd,
                                limit_spec_from_oracles,
                                limit_terminal_ensemble, simulate_limit_ou)
from slowfast.engine import (TimeGrid, simulate_averaged_coupled,
                             simulate_coupled_pair)
from slowfast.errors import ConfigurationError, CouplingError
from slowfast.noise import (PURPOSE_W2, PURPOSE_WTILDE, NoiseStream)
from slowfast.systems import builtin_periodic_ou

LIMIT_VAR = 1.0 - math.exp(-2.0)        # 0.8646647167633873


def test_deviation_normalization_is_exact():
    sys_ = builtin_periodic_ou(c=1.0, kappa=1.0, g0=1.0)
    pair = simulate_coupled_pair(sys_, 0.04, 0.0, 1.0, 1.0, 25, NoiseStream(1))
    dev = build_deviation(pair)
    assert dev.z[0, 0] == 0.0
    assert np.array_equal(dev.z, (pair.y_eps - pair.y_bar) / math.sqrt(0.04))


def test_unit_eps_is_plain_difference():
    sys_ = builtin_periodic_ou(c=1.0, kappa=1.0, g0=1.0)
    pair = simulate_coupled_pair(sys_, 1.0, 0.0, 1.0, 1.0, 25, NoiseStream(2))
    dev = build_deviation(pair, 1.0)
    assert np.array_equal(dev.z, pair.y_eps - pair.y_bar)


def test_eps_mismatch_is_a_coupling_error():
    sys_ = builtin_periodic_ou()
    pair = simulate_coupled_pair(sys_, 0.1, 0.0, 1.0, 1.0, 10, NoiseStream(3))
    with pytest.raises(CouplingError):
        build_deviation(pair, 0.05)


def test_limit_flow_with_zero_noise_is_zero():
    spec = LimitOUSpec(drift_jac=lambda y: np.array([[-1.0]]),
                       sigma=lambda y: np.zeros((1, 1)))
    grid = TimeGrid(0.0, 1.0, 100)
    bar = np.ones((101, 1))
    Z = simulate_limit_ou(spec, bar, grid, NoiseStream(4))
    assert np.all(Z == 0.0)


def test_limit_variance_matches_ou_formula():
    sys_ = builtin_periodic_ou(c=1.0, kappa=1.0, g0=1.0)
    spec = limit_spec_from_oracles(sys_, y_ref=[1.0])
    z, _ = limit_terminal_ensemble(spec, sys_, 1.0, 1.0, 400, 100_000, seed=5,
                                   threads=2)
    var = z[:, 0].var(ddof=1)
    se = var * math.sqrt(2.0 / (z.shape[0] - 1))
    assert abs(var - LIMIT_VAR) <= 3.0 * se


def test_slow_residual_variant_constant_extra_drift():
    # homogenized noise switched off, constant extra drift 1:
    # E Z_1 = int_0^1 e^{-(1-s)} ds = 1 - e^{-1}
    spec = LimitOUSpec(drift_jac=lambda y: np.array([[-1.0]]),
                       sigma=lambda y: np.zeros((1, 1)),
                       extra_drift=lambda y: np.array([1.0]),
                       theta=0.4)
    grid = TimeGrid(0.0, 1.0, 2000)
    bar = np.ones((grid.n_steps + 1, 1))
    Z = simulate_limit_ou(spec, bar, grid, NoiseStream(6))
    assert abs(Z[-1, 0] - (1.0 - math.exp(-1.0))) < 1e-3


def test_single_path_matches_ensemble_path():
    sys_ = builtin_periodic_ou(c=1.0, kappa=1.0, g0=1.0)
    spec = LimitOUSpec(
        drift_jac=lambda y: np.array([[-1.0]]),
        sigma=lambda y: np.array([[math.sqrt(2.0)]]),
        diffusion_jac=lambda y: np.full((1, 1, 1), 0.3),
        extra_drift=lambda y: np.array([0.1]),
    )
    grid = TimeGrid(0.0, 1.0, 64)
    z_ens, yb_ens = limit_terminal_ensemble(spec, sys_, 1.0, 1.0, 64, 3, seed=7)
    for p in range(3):
        noise = NoiseStream(7, path_index=p)
        bar = simulate_averaged_coupled(sys_, 1.0, grid, noise)
        Z = simulate_limit_ou(spec, bar, grid, noise)
        assert np.array_equal(Z[-1], z_ens[p])
        assert np.array_equal(bar[-1], yb_ens[p])


def test_deviation_variance_approaches_limit():
    sys_ = builtin_periodic_ou(c=1.0, kappa=1.0, g0=1.0)
    from slowfast.engine import coupled_ensemble_stats
    st = coupled_ensemble_stats(sys_, 1e-2, 0.0, 1.0, 1.0, 10_000, seed=8,
                                collect_z=True, threads=2)
    var = st.z_terminal[:, 0].var(ddof=1)
    assert abs(var - LIMIT_VAR) <= 0.1 * LIMIT_VAR


def test_jacobian_of_linear_map_is_exact():
    J = jacobian_fd(lambda y: -1.7 * y, np.array([0.3, -0.2]), h=1e-3)
    assert np.max(np.abs(J + 1.7 * np.eye(2))) <= 1e-10


def test_jacobian_of_square():
    J = jacobian_fd(lambda y: y ** 2, np.array([2.0]), h=1e-3)
    assert abs(J[0, 0] - 4.0) <= 1e-5


def test_jacobian_of_estimated_double_average():
    # common random numbers across the stencil: same seed per evaluation
    from slowfast.averaging import estimate_double_bar_F
    sys_ = builtin_periodic_ou(c=1.0, kappa=1.0)

    def f(y):
        return estimate_double_bar_F(sys_, y, cloud_budget=1000, seed=9).value

    J = jacobian_fd(f, np.array([1.0]), h=0.25)
    assert abs(J[0, 0] - (-1.0)) <= 0.05


def test_jacobian_rejects_non_finite():
    with pytest.raises(ConfigurationError):
        jacobian_fd(lambda y: np.array([np.inf]), np.array([0.0]))
    with pytest.raises(ConfigurationError):
        jacobian_fd(lambda y: y, np.array([0.0]), h=0.0)


def test_drivers_are_uncorrelated():
    n = 100_000
    a = NoiseStream(10, purpose_tag=PURPOSE_W2).normals(n, 1)[:, 0]
    b = NoiseStream(10, purpose_tag=PURPOSE_WTILDE).normals(n, 1)[:, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_limit_is_linear_in_the_homogenized_coefficient():
    sys_ = builtin_periodic_ou(c=1.0, kappa=1.0, g0=1.0)
    base = LimitOUSpec(drift_jac=lambda y: np.array([[-1.0]]),
                       sigma=lambda y: np.array([[1.0]]))
    double = LimitOUSpec(drift_jac=lambda y: np.array([[-1.0]]),
                         sigma=lambda y: np.array([[2.0]]))
    z1, _ = limit_terminal_ensemble(base, sys_, 1.0, 1.0, 200, 50_000, seed=11)
    z2, _ = limit_terminal_ensemble(double, sys_, 1.0, 1.0, 200, 50_000, seed=12)
    sd1, sd2 = z1[:, 0].std(ddof=1), z2[:, 0].std(ddof=1)
    ratio_se = math.sqrt(1.0 / z1.shape[0]) * 2.0      # ~SE of the SD ratio
    assert abs(sd2 / sd1 - 2.0) <= 3.0 * 2.0 * ratio_se


def test_oracle_limit_spec_freezes_constants():
    sys_ = builtin_periodic_ou(c=1.0, kappa=1.0, g0=1.0)
    spec = limit_spec_from_oracles(sys_, y_ref=[0.0])
    assert spec.diffusion_jac is None                  # constant slow diffusion
    assert np.allclose(spec.drift_jac(np.array([2.0])), [[-1.0]], atol=1e-9)
    assert np.allclose(spec.sigma(np.array([2.0])), [[math.sqrt(2.0)]],
                       atol=1e-12)
