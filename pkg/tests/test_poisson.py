import dataclasses
import math

import numpy as np
import pytest

from slowfast.errors import HomogenizationError, RejectedSourceError
from slowfast.frozen import estimate_invariant_cloud
from slowfast.noise import derive_seed
from slowfast.poisson import (PoissonSolution, check_centering,
                              estimate_double_bar_sigma, estimate_sigma_sq,
                              measure_mixing, psd_sqrt, solve_poisson,
                              verify_poisson_residual)
from slowfast.systems import builtin_periodic_ou


def centered_source(sys_):
    bar_F = sys_.oracles.bar_F
    return lambda t, x, y: sys_.F(t, x, y) - bar_F(t, y)


def test_zero_source_returns_zero_exactly():
    sys_ = builtin_periodic_ou()
    val = solve_poisson(sys_, lambda t, x, y: np.zeros_like(y), 0.0, 1.0,
                        [0.0], n_paths=200, seed=1)
    assert np.all(val.value == 0.0) and np.all(val.se == 0.0)


def test_solution_matches_oracle_at_two_probes():
    sys_ = builtin_periodic_ou(c=1.0)
    src = centered_source(sys_)
    # phi(0, 1) = 1 - m(0) = 1.5
    v1 = solve_poisson(sys_, src, 0.0, 1.0, [0.0], n_paths=4000, seed=2)
    assert abs(v1.value[0] - 1.5) <= max(3.0 * v1.se[0], v1.tail_bound)
    # phi(pi/2, 0.5) = 0.5 - m(pi/2) = 0
    v2 = solve_poisson(sys_, src, math.pi / 2.0, 0.5, [0.0], n_paths=4000, seed=3)
    assert abs(v2.value[0]) <= 3.0 * v2.se[0]


def test_centering_check_passes_for_self_centered_source():
    sys_ = builtin_periodic_ou(c=1.0)
    times = [0.0, 1.0, 2.0]
    clouds = [estimate_invariant_cloud(sys_, t, [0.0], 2000,
                                       seed=derive_seed(4, i))
              for i, t in enumerate(times)]
    means = {t: float(sys_.F(t, c.particles,
                             np.zeros((c.n, 1))).mean()) for t, c in zip(times, clouds)}

    def f(t, x, y):
        return sys_.F(t, x, y) - means[float(t)]

    report = check_centering(sys_, f, times, [0.0], clouds=clouds)
    assert report.passed
    assert np.max(np.abs(report.means)) < 1e-12


def test_centering_check_rejects_raw_drift():
    sys_ = builtin_periodic_ou(c=1.0, kappa=1.0)
    report = check_centering(sys_, sys_.F, [0.0, 1.0], [1.0],
                             n_particles=2000, seed=5)
    assert not report.passed
    with pytest.raises(RejectedSourceError):
        solve_poisson(sys_, sys_.F, 0.0, 1.0, [1.0], n_paths=200, seed=5)


def test_centering_check_accepts_odd_source_of_symmetric_law():
    sys_ = builtin_periodic_ou(c=0.0)
    report = check_centering(sys_, lambda t, x, y: x ** 3, [0.0, 1.5], [0.0],
                             n_particles=3000, seed=6)
    assert report.passed


def test_residual_of_analytic_solution():
    sys_ = builtin_periodic_ou(c=1.0)
    rng = np.random.default_rng(7)
    for _ in range(5):
        t = rng.uniform(0.0, 6.0)
        x = rng.normal()
        rep = verify_poisson_residual(sys_, sys_.oracles.phi, t, x, [0.0])
        assert abs(rep.residual[0]) <= 1e-8


def test_residual_vanishes_for_fast_free_drift():
    sys_ = dataclasses.replace(builtin_periodic_ou(),
                               F=lambda t, x, y: np.sin(t) - y, oracles=None)
    phi0 = lambda t, x, y: np.zeros((x.shape[0], 1))
    rep = verify_poisson_residual(sys_, phi0, 0.9, 0.4, [0.2],
                                  bar_F=[math.sin(0.9) - 0.2])
    assert abs(rep.residual[0]) <= 1e-12


def test_residual_of_monte_carlo_solution_within_error_bar():
    sys_ = builtin_periodic_ou(c=1.0)
    src = centered_source(sys_)
    delta = measure_mixing(sys_, [0.0], seed=8).delta_hat
    sol = PoissonSolution(sys_, src, delta, n_paths=1500, seed=8)
    rng = np.random.default_rng(9)
    for _ in range(10):
        t = rng.uniform(0.0, 6.0)
        x = rng.normal()
        rep = verify_poisson_residual(sys_, sol, t, x, [0.0])
        assert abs(rep.residual[0]) <= 3.0 * rep.error_bar[0]


def test_solution_is_centered():
    sys_ = builtin_periodic_ou(c=1.0)
    src = centered_source(sys_)
    delta = measure_mixing(sys_, [0.0], seed=10).delta_hat
    sol = PoissonSolution(sys_, src, delta, n_paths=1, seed=10)
    for i, t in enumerate(np.linspace(0.0, 2.0 * math.pi, 5)):
        cloud = estimate_invariant_cloud(sys_, t, [0.0], 3000,
                                         seed=derive_seed(11, i))
        vals = sol.value_batch(t, cloud.particles, [0.0])[:, 0]
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean()) <= 3.0 * se


def test_truncation_consistency():
    sys_ = builtin_periodic_ou(c=1.0)
    src = centered_source(sys_)
    delta = measure_mixing(sys_, [0.0], seed=12).delta_hat
    a = PoissonSolution(sys_, src, delta, t_trunc=6.0, n_paths=2000, seed=12)
    b = PoissonSolution(sys_, src, delta, t_trunc=12.0, n_paths=2000, seed=12)
    va, vb = a.value(0.0, 1.0, [0.0]), b.value(0.0, 1.0, [0.0])
    tol = a.tail_bound + 3.0 * math.hypot(va.se[0], vb.se[0])
    assert abs(va.value[0] - vb.value[0]) <= tol


def test_sigma_sq_matches_oracle():
    sys_ = builtin_periodic_ou(c=1.0)
    src = centered_source(sys_)
    delta = measure_mixing(sys_, [0.0], seed=13).delta_hat
    sol = PoissonSolution(sys_, src, delta, seed=13)
    cloud = estimate_invariant_cloud(sys_, 0.3, [0.0], 8000, seed=14)
    est = estimate_sigma_sq(sys_, 0.3, [0.0], cloud, sol, n_rep=2)
    assert est.value[0, 0] == est.value.T[0, 0]
    assert abs(est.value[0, 0] - 2.0) <= 3.0 * est.se[0, 0]


def test_sigma_sq_zero_for_fast_free_drift():
    sys_ = dataclasses.replace(builtin_periodic_ou(),
                               F=lambda t, x, y: np.sin(t) - y, oracles=None)
    cloud = estimate_invariant_cloud(sys_, 0.3, [0.2], 1000, seed=15)
    phi0 = np.zeros((cloud.n, 1))
    est = estimate_sigma_sq(sys_, 0.3, [0.2], cloud, phi0,
                            bar_F_value=[math.sin(0.3) - 0.2])
    assert np.all(est.value == 0.0)


def test_sigma_sq_scales_quadratically_in_the_source():
    sys_ = builtin_periodic_ou(c=1.0)
    orc = sys_.oracles
    a = 2.0
    scaled = dataclasses.replace(
        sys_, F=lambda t, x, y: a * sys_.F(t, x, y), oracles=None)
    delta = measure_mixing(sys_, [0.0], seed=16).delta_hat
    src1 = centered_source(sys_)
    srca = lambda t, x, y: a * src1(t, x, y)
    sol1 = PoissonSolution(sys_, src1, delta, seed=16)
    sola = PoissonSolution(sys_, srca, delta, seed=16)
    cloud = estimate_invariant_cloud(sys_, 0.3, [0.0], 3000, seed=17)
    base = estimate_sigma_sq(sys_, 0.3, [0.0], cloud, sol1, n_rep=2)
    big = estimate_sigma_sq(scaled, 0.3, [0.0], cloud, sola, n_rep=2,
                            bar_F_value=a * np.asarray(orc.bar_F(0.3, [0.0])))
    assert big.value[0, 0] == pytest.approx(a * a * base.value[0, 0], rel=1e-12)


def test_inconsistent_solution_raises_homogenization_error():
    sys_ = builtin_periodic_ou(c=1.0)
    cloud = estimate_invariant_cloud(sys_, 0.3, [0.0], 4000, seed=18)
    m = sys_.oracles.invariant_mean(0.3, None)[0]
    wrong_phi = -(cloud.particles - m)           # sign-flipped solution
    with pytest.raises(HomogenizationError):
        estimate_sigma_sq(sys_, 0.3, [0.0], cloud, wrong_phi)


def test_double_bar_sigma_and_kappa3():
    sys_ = builtin_periodic_ou(c=1.0)
    dbs = estimate_double_bar_sigma(
        sys_, [0.0], n_particles=2000, seed=19, horizon=7.0, dt=0.01,
        T_list=math.pi * np.array([2, 3, 5, 7, 9]))
    assert abs(dbs.sigma_sq[0, 0] - 2.0) <= 3.0 * dbs.sigma_sq_se[0, 0]
    assert abs(dbs.sigma[0, 0] - math.sqrt(2.0)) <= 0.1
    # square-root roundtrip
    assert np.max(np.abs(dbs.sigma @ dbs.sigma.T - dbs.sigma_sq)) <= 1e-10
    assert dbs.kappa3_slope is not None
    assert -1.3 <= dbs.kappa3_slope <= -0.7


def test_double_bar_sigma_vanishes_for_fast_free_drift():
    from slowfast.systems import AnalyticOracles
    sys_ = dataclasses.replace(
        builtin_periodic_ou(), F=lambda t, x, y: np.sin(t) - y,
        oracles=AnalyticOracles(bar_F=lambda t, y: np.sin(t) - np.asarray(y)))
    dbs = estimate_double_bar_sigma(sys_, [0.0], T_avg=2.0 * math.pi,
                                    n_particles=200, horizon=2.0, dt=0.02,
                                    delta_hat=1.0, seed=20)
    assert np.all(dbs.sigma_sq == 0.0)
    assert np.all(dbs.sigma == 0.0)


def test_sigma_table_export(tmp_path):
    import json
    from slowfast.poisson import tabulate_double_bar_sigma
    sys_ = builtin_periodic_ou(c=1.0)
    path = tmp_path / "sigma.json"
    table = tabulate_double_bar_sigma(
        sys_, [-1.0, 0.0, 1.0], path=path, n_particles=300, horizon=4.0,
        dt=0.02, delta_hat=1.0, seed=21)
    doc = json.loads(path.read_text())
    assert doc["y_grid"] == [-1.0, 0.0, 1.0]
    assert len(doc["double_bar_sigma_sq"]) == 3
    # the homogenized matrix of this system does not depend on y
    flat = np.array(table["double_bar_sigma_sq"]).reshape(3)
    assert np.max(np.abs(flat - flat.mean())) < 0.5


def test_psd_sqrt_clamps_negative_eigenvalues():
    m = np.array([[1.0, 0.0], [0.0, -1e-8]])
    r = psd_sqrt(m)
    assert np.allclose(r @ r.T, np.array([[1.0, 0.0], [0.0, 0.0]]), atol=1e-12)
