"""Monte Carlo toolkit for non-autonomous slow-fast stochastic systems.

Simulates coupled fast/slow SDEs whose coefficients oscillate in time,
estimates the evolution family of invariant laws of the frozen fast
dynamics, builds averaged and homogenized coefficients through a
Feynman-Kac solver for the time-inhomogeneous Poisson equation, and runs
seeded eps-sweeps that measure strong and weak convergence rates of the
averaging approximation.
"""

from .errors import (ConfigurationError, CouplingError, HomogenizationError,
                     IntegrationDivergedError, MixingProbeError, RateFitError,
                     RejectedSourceError, SlowFastError)
from .systems import (AnalyticOracles, SystemSpec, builtin_nonlinear,
                      builtin_periodic_ou, builtin_quasi_periodic, make_system)
from .noise import (PURPOSE_W1, PURPOSE_W2, PURPOSE_WTILDE, NoiseStream,
                    derive_seed)
from .engine import (CoupledPair, OracleCoefficients, PathBundle, TimeGrid,
                     coupled_ensemble_stats, make_bundle,
                     simulate_averaged_coupled, simulate_coupled_pair,
                     simulate_generic, simulate_multiscale)
from .frozen import (MixingEstimate, ParticleCloud, estimate_invariant_cloud,
                     probe_mixing_rate, push_cloud, semigroup_apply,
                     simulate_frozen)
from .averaging import (AveragedCoefficients, CoefficientTable,
                        averaged_coefficients, estimate_bar_F, estimate_bar_G,
                        estimate_double_bar_F, estimate_kappa_curves,
                        load_table, save_table, tabulate_coefficients)
from .poisson import (PoissonSolution, check_centering, estimate_double_bar_sigma,
                      estimate_sigma_sq, psd_sqrt, solve_poisson,
                      tabulate_double_bar_sigma, verify_poisson_residual)
from .deviation import (DeviationPath, LimitOUSpec, build_deviation,
                        jacobian_fd, limit_spec_from_oracles,
                        limit_terminal_ensemble, simulate_limit_ou)
from .harness import (ExperimentConfig, RateFit, RatePoint, fit_rate,
                      run_fluctuation_sweep, run_kappa_curves,
                      run_strong_sweep, run_weak_sweep)
from .stats import EnsembleMoments, ensemble_moments

__version__ = "0.1.0"
