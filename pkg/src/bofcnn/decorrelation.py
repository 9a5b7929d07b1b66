"""Codebook decorrelation penalty and its gradient.

Redundancy between two codebook items is their squared Pearson
correlation; the penalty sums it over all ordered pairs i != j and is
added to the task loss weighted by beta. Only the center vectors receive
gradient from this term.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError


@dataclass
class RegularizerConfig:
    """beta weights the penalty; epsilon guards zero-variance centers."""

    beta: float = 0.0
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


def pearson_correlation(a: np.ndarray, b: np.ndarray, epsilon: float = 1e-12) -> float:
    """Pearson correlation across coordinates, epsilon-guarded.

    A constant vector has (near-)zero variance and correlates ~0 with
    everything instead of producing NaN.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ConfigError(f"expected equal-length vectors, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ConfigError("correlation needs vectors of length >= 2")
    za = a - a.mean()
    zb = b - b.mean()
    return float(za @ zb / np.sqrt((za @ za + epsilon) * (zb @ zb + epsilon)))


def squared_correlation(a: np.ndarray, b: np.ndarray, epsilon: float = 1e-12) -> float:
    """Similarity in [0,1]: squared Pearson correlation."""
    return pearson_correlation(a, b, epsilon) ** 2


def _correlations(centers: np.ndarray, epsilon: float):
    """Pairwise correlation matrix [K,K] plus the centered rows and
    their guarded variances."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 2:
        raise ConfigError(f"centers must be [K>=2, D], got {centers.shape}")
    if centers.shape[1] < 2:
        raise ConfigError("correlation needs center dimension >= 2")
    z = centers - centers.mean(axis=1, keepdims=True)
    s = np.einsum("kd,kd->k", z, z) + epsilon
    corr = (z @ z.T) / np.sqrt(np.outer(s, s))
    return corr, z, s


def correlation_matrix(centers: np.ndarray, epsilon: float = 1e-12) -> np.ndarray:
    return _correlations(centers, epsilon)[0]


def dictionary_penalty(centers: np.ndarray, epsilon: float = 1e-12) -> float:
    """Sum of squared correlations over all ordered pairs i != j."""
    corr = _correlations(centers, epsilon)[0]
    sq = corr * corr
    return float(sq.sum() - np.trace(sq))


def mean_offdiag_squared_correlation(centers: np.ndarray, epsilon: float = 1e-12) -> float:
    """Average redundancy of a codebook, in [0,1]."""
    k = centers.shape[0]
    return dictionary_penalty(centers, epsilon) / (k * (k - 1))


def dictionary_penalty_gradient(centers: np.ndarray, epsilon: float = 1e-12) -> np.ndarray:
    """Exact gradient of ``dictionary_penalty`` w.r.t. every center row."""
    corr, z, s = _correlations(centers, epsilon)
    np.fill_diagonal(corr, 0.0)
    scaled = corr / np.sqrt(np.outer(s, s))
    row = (corr * corr).sum(axis=1) / s
    grad = 4.0 * (scaled @ z - row[:, None] * z)
    # chain through the per-row centering z = c - mean(c)
    return grad - grad.mean(axis=1, keepdims=True)


def augmented_loss(task_loss: float, centers: np.ndarray,
                   config: RegularizerConfig) -> float:
    """task_loss + beta * penalty; exactly task_loss when beta == 0."""
    if not np.isfinite(task_loss):
        raise NumericError(f"task loss is not finite: {task_loss}")
    if config.beta == 0.0:
        return float(task_loss)
    penalty = dictionary_penalty(centers, config.epsilon)
    total = task_loss + config.beta * penalty
    if not np.isfinite(total):
        raise NumericError("augmented loss overflowed")
    return float(total)
