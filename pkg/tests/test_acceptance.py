"""Acceptance suite: every criterion at its stated tolerance and budget.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS/FAIL line
per criterion.  The heavy sweeps (strong, fluctuation, weak) share
module-scoped fixtures; total runtime is dominated by the weak sweep.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from slowfast.averaging import estimate_bar_G, estimate_double_bar_F
from slowfast.frozen import estimate_invariant_cloud, push_cloud
from slowfast.harness import (ExperimentConfig, run_fluctuation_sweep,
                              run_strong_sweep, run_weak_sweep)
from slowfast.noise import derive_seed
from slowfast.poisson import (estimate_double_bar_sigma,
                              measure_mixing, PoissonSolution, solve_poisson,
                              verify_poisson_residual)
from slowfast.systems import builtin_periodic_ou

SEED = 20250810
LIMIT_VAR = 1.0 - math.exp(-2.0)


def report(criterion: int, ok: bool, detail: str):
    status = "PASS" if ok else "FAIL"
    print(f"\n[criterion {criterion:2d}] {status}: {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


def sweep_config(tmp_dir: str, **kw) -> ExperimentConfig:
    base = dict(
        system="periodic_ou",
        system_params={"c": 1.0, "kappa": 1.0, "g0": 1.0},
        T=1.0,
        eps_list=(1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5, 1e-3),
        q=2.0, n_paths=10_000, n_macro=100, seed=SEED,
        out_dir=tmp_dir, threads=2,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def oracle_system():
    return builtin_periodic_ou(c=1.0, kappa=1.0, g0=1.0)


@pytest.fixture(scope="module")
def strong_result(tmp_path_factory):
    out = tmp_path_factory.mktemp("strong_a")
    cfg = sweep_config(str(out))
    t0 = time.perf_counter()
    res = run_strong_sweep(cfg)
    return res, cfg, time.perf_counter() - t0


@pytest.fixture(scope="module")
def weak_result(tmp_path_factory):
    out = tmp_path_factory.mktemp("weak")
    cfg = sweep_config(str(out), n_paths=100_000, n_paths_limit=200_000,
                       limit_n_steps=400, batch_size=10_000)
    t0 = time.perf_counter()
    res = run_weak_sweep(cfg)
    return res, cfg, time.perf_counter() - t0


def test_criterion_1_invariant_measure_oracle(oracle_system):
    t0 = time.perf_counter()
    targets = {0.0: -0.5, math.pi / 2.0: 0.5, math.pi: 0.5}
    detail = []
    ok = True
    for i, (t, m_true) in enumerate(targets.items()):
        cloud = estimate_invariant_cloud(oracle_system, t, [0.0], 10_000,
                                         burn_in=20.0, seed=derive_seed(SEED, 1, i),
                                         threads=2)
        mom = cloud.moments()
        ok &= abs(mom.mean[0] - m_true) <= 3.0 * mom.mean_se[0]
        ok &= abs(mom.cov[0, 0] - 1.0) <= 3.0 * mom.var_se[0]
        detail.append(f"t={t:.2f}: mean {mom.mean[0]:+.4f} (want {m_true:+.1f} "
                      f"+-{3 * mom.mean_se[0]:.4f}), var {mom.cov[0, 0]:.4f}")
    wall = time.perf_counter() - t0
    ok &= wall < 30.0
    report(1, ok, "; ".join(detail) + f"; wall {wall:.1f}s < 30s")


def test_criterion_2_evolution_system_property(oracle_system):
    t0 = time.perf_counter()
    cloud0 = estimate_invariant_cloud(oracle_system, 0.0, [0.0], 10_000,
                                      seed=derive_seed(SEED, 2, 0), threads=2)
    pushed = push_cloud(oracle_system, cloud0, math.pi,
                        seed=derive_seed(SEED, 2, 1), threads=2)
    direct = estimate_invariant_cloud(oracle_system, math.pi, [0.0], 10_000,
                                      seed=derive_seed(SEED, 2, 2), threads=2)
    a, b = pushed.moments(), direct.moments()
    dm = abs(a.mean[0] - b.mean[0])
    dv = abs(a.cov[0, 0] - b.cov[0, 0])
    se_m = math.hypot(a.mean_se[0], b.mean_se[0])
    se_v = math.hypot(a.var_se[0], b.var_se[0])
    wall = time.perf_counter() - t0
    ok = dm <= 3.0 * se_m and dv <= 3.0 * se_v and wall < 60.0
    report(2, ok, f"pushforward (0 -> pi): |dmean|={dm:.4f} <= {3 * se_m:.4f}, "
                  f"|dvar|={dv:.4f} <= {3 * se_v:.4f}; wall {wall:.1f}s < 60s")


def test_criterion_3_double_average(oracle_system):
    import dataclasses
    t0 = time.perf_counter()
    est = estimate_double_bar_F(oracle_system, [3.0], cloud_budget=4000,
                                seed=derive_seed(SEED, 3), threads=2)
    ok_f = abs(est.value[0] - (-3.0)) <= 3.0 * est.se[0]
    osc = dataclasses.replace(
        oracle_system, G=lambda t, y: np.array([[1.0 + 0.5 * np.sin(t)]]),
        oracles=None)
    bg = estimate_bar_G(osc, [0.0], T_avg=2.0 * math.pi)
    ok_g = abs(bg.residual - 0.125) <= 1e-4
    wall = time.perf_counter() - t0
    ok = ok_f and ok_g and wall < 120.0
    report(3, ok, f"double avg drift {est.value[0]:+.4f} (want -3 "
                  f"+-{3 * est.se[0]:.4f}); bar_G residual {bg.residual:.6f} "
                  f"(want 0.125 +-1e-4); wall {wall:.1f}s < 120s")


def test_criterion_4_poisson_solver(oracle_system):
    t0 = time.perf_counter()
    orc = oracle_system.oracles
    src = lambda t, x, y: oracle_system.F(t, x, y) - orc.bar_F(t, y)
    val = solve_poisson(oracle_system, src, 0.0, 1.0, [0.0], n_paths=4000,
                        seed=derive_seed(SEED, 4), threads=2)
    tol = max(3.0 * val.se[0], val.tail_bound)
    ok_value = abs(val.value[0] - 1.5) <= tol

    delta = measure_mixing(oracle_system, [0.0], seed=derive_seed(SEED, 4, 1))
    sol = PoissonSolution(oracle_system, src, delta.delta_hat, n_paths=1,
                          seed=derive_seed(SEED, 4, 2))
    worst_z = 0.0
    for i, t in enumerate(np.linspace(0.0, 2.0 * math.pi, 5)):
        cloud = estimate_invariant_cloud(oracle_system, t, [0.0], 3000,
                                         seed=derive_seed(SEED, 4, 3, i),
                                         threads=2)
        vals = sol.value_batch(t, cloud.particles, [0.0])[:, 0]
        z = abs(vals.mean()) / (vals.std(ddof=1) / math.sqrt(vals.size))
        worst_z = max(worst_z, float(z))
    ok_centered = worst_z <= 3.0

    rng = np.random.default_rng(derive_seed(SEED, 4, 4) % 2 ** 32)
    worst_res = 0.0
    for _ in range(5):
        rep = verify_poisson_residual(oracle_system, orc.phi,
                                      rng.uniform(0.0, 6.0), rng.normal(), [0.0])
        worst_res = max(worst_res, abs(rep.residual[0]))
    ok_res = worst_res <= 1e-8
    wall = time.perf_counter() - t0
    ok = ok_value and ok_centered and ok_res and wall < 180.0
    report(4, ok, f"solution {val.value[0]:.4f} (want 1.5 +-{tol:.4f}); "
                  f"centering max |z|={worst_z:.2f} <= 3; analytic residual "
                  f"{worst_res:.2e} <= 1e-8; wall {wall:.1f}s < 180s")


def test_criterion_5_homogenized_coefficient(oracle_system):
    t0 = time.perf_counter()
    dbs = estimate_double_bar_sigma(
        oracle_system, [0.0], n_particles=3500, horizon=7.0, dt=0.01,
        seed=derive_seed(SEED, 5),
        T_list=math.pi * np.array([2.0, 3.0, 5.0, 7.0, 9.0]))
    ok_val = abs(dbs.sigma_sq[0, 0] - 2.0) <= 3.0 * dbs.sigma_sq_se[0, 0]
    ok_slope = dbs.kappa3_slope is not None \
        and -1.3 <= dbs.kappa3_slope <= -0.7
    wall = time.perf_counter() - t0
    ok = ok_val and ok_slope and wall < 180.0
    report(5, ok, f"homogenized sq {dbs.sigma_sq[0, 0]:.4f} (want 2 "
                  f"+-{3 * dbs.sigma_sq_se[0, 0]:.4f}); kappa3 slope "
                  f"{dbs.kappa3_slope:.3f} in [-1.3, -0.7]; wall {wall:.1f}s < 180s")


def test_criterion_6_strong_rate(strong_result):
    res, cfg, wall = strong_result
    ok = res.fit is not None and 0.8 <= res.fit.slope <= 1.3 and wall < 900.0
    pts = ", ".join(f"{p.eps:.4g}:{p.error:.3e}" for p in res.points)
    report(6, ok, f"strong slope {res.fit.slope:.4f} in [0.8, 1.3] "
                  f"(ci {res.fit.slope_ci[0]:.3f}..{res.fit.slope_ci[1]:.3f}; "
                  f"points {pts}); wall {wall:.0f}s < 900s")


def test_criterion_7_fluctuation_rate(tmp_path):
    cfg = sweep_config(str(tmp_path))
    t0 = time.perf_counter()
    res = run_fluctuation_sweep(cfg)
    wall = time.perf_counter() - t0
    ok = res.fit is not None and 0.8 <= res.fit.slope <= 1.3 and wall < 900.0
    report(7, ok, f"fluctuation slope {res.fit.slope:.4f} in [0.8, 1.3]; "
                  f"wall {wall:.0f}s < 900s")


def test_criterion_8_weak_clt(weak_result):
    res, cfg, wall = weak_result
    var_small_eps = res.diagnostics["per_eps"][-1]["var"][0]
    var_err = abs(var_small_eps - LIMIT_VAR)
    ok = var_err <= 0.05
    detail = [f"|Var Z(1e-3) - {LIMIT_VAR:.4f}| = {var_err:.4f} <= 0.05"]
    for name in cfg.phis:
        pts = res.per_phi_points[name]
        fit = res.per_phi_fits[name]
        used = [p for p in pts if not p.censored]
        first, last = used[0], used[-1]
        comb = math.hypot(first.stderr, last.stderr)
        decreasing = last.error < first.error - 3.0 * comb
        slope_ok = fit is not None and fit.slope >= 0.3
        ok &= decreasing and slope_ok
        detail.append(f"{name}: slope {fit.slope if fit else float('nan'):.3f} "
                      f">= 0.3, decay {first.error:.4f} -> {last.error:.4f}")
    ok &= wall < 1800.0
    report(8, ok, "; ".join(detail) + f"; wall {wall:.0f}s < 1800s")


def test_criterion_9_determinism(strong_result, tmp_path):
    res_a, cfg_a, _ = strong_result
    cfg_b = sweep_config(str(tmp_path))
    res_b = run_strong_sweep(cfg_b)
    bytes_a = Path(res_a.csv_paths["strong"]).read_bytes()
    bytes_b = Path(res_b.csv_paths["strong"]).read_bytes()
    ok = bytes_a == bytes_b
    report(9, ok, f"rerun of the strong sweep produced byte-identical CSV "
                  f"({len(bytes_a)} bytes)")
