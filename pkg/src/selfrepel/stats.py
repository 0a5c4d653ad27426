"""Error bars for correlated and weighted samples."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


def autocorrelation(x) -> np.ndarray:
    """Normalised autocorrelation function of a 1-d series (FFT based)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acf = np.fft.irfft(f * np.conj(f), size)[:n]
    if acf[0] == 0:
        out = np.zeros(n)
        out[0] = 1.0
        return out
    return acf / acf[0]


def integrated_time(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's self-consistent window."""
    x = np.asarray(x, dtype=float)
    if len(x) < 4:
        return 1.0
    rho = autocorrelation(x)
    taus = 2.0 * np.cumsum(rho) - 1.0
    window = np.arange(len(taus)) < c * taus
    m = int(np.argmin(window)) if not window.all() else len(taus) - 1
    return float(max(taus[m], 1.0))


def effective_sample_size(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(len(x) / integrated_time(x))


def batch_means_stderr(x, n_batches: int = 20) -> float:
    """Standard error of the mean from non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    n_batches = min(n_batches, len(x))
    if n_batches < 2:
        return float("nan")
    size = len(x) // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def mean_stderr(x) -> float:
    """Standard error of the mean from the integrated autocorrelation time."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return float("nan")
    return float(np.sqrt(integrated_time(x) * x.var(ddof=1) / len(x)))


def normalized_weights(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    return np.exp(log_w - logsumexp(log_w))


def weights_ess(log_w) -> float:
    """Kish effective sample size 1 / Σ w̃² of self-normalised weights."""
    w = normalized_weights(log_w)
    return float(1.0 / np.sum(w**2))
