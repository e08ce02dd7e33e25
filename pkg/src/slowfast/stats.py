"""Small moment/standard-error helpers shared by the estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnsembleMoments:
    """Mean vector, covariance matrix and standard errors of an MC ensemble."""

    mean: np.ndarray      # (d,)
    cov: np.ndarray       # (d, d)
    n: int
    mean_se: np.ndarray   # (d,)
    var_se: np.ndarray    # (d,) standard error of the diagonal variances


def ensemble_moments(samples: np.ndarray) -> EnsembleMoments:
    """Moments of ``samples`` with shape (n, d); n >= 2 required for SEs."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = samples.shape
    mean = samples.mean(axis=0)
    centered = samples - mean
    if n > 1:
        cov = centered.T @ centered / (n - 1)
    else:
        cov = np.zeros((d, d))
    var = np.diag(cov).copy()
    mean_se = np.sqrt(var / n)
    # SE of the sample variance from the fourth central moment
    m4 = (centered ** 4).mean(axis=0)
    var_se = np.sqrt(np.maximum(m4 - var ** 2, 0.0) / n)
    return EnsembleMoments(mean=mean, cov=cov, n=n, mean_se=mean_se, var_se=var_se)


def mean_and_se(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise mean and its standard error for (n, d) samples."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    if n > 1:
        se = samples.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        se = np.zeros_like(mean)
    return mean, se
