"""Bag-of-features pooling with a learnable RBF codebook.

Each spatial feature vector is soft-assigned to K codebook items by a
softmax over negative scaled Euclidean distances; the per-position
memberships are averaged into a K-bin histogram per sample.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .tensor import DTYPE, Rng
from .layers import Layer

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-3  # smallest admissible RBF scale, re-applied after each update


class Codebook:
    """K center vectors in R^D plus K strictly positive scales."""

    def __init__(self, centers: np.ndarray, scales: np.ndarray):
        centers = np.ascontiguousarray(centers, dtype=DTYPE)
        scales = np.ascontiguousarray(scales, dtype=DTYPE)
        if centers.ndim != 2 or centers.shape[0] < 2:
            raise ConfigError(
                f"codebook needs at least 2 centers [K,D], got shape {centers.shape}")
        if scales.shape != (centers.shape[0],):
            raise ShapeError(
                f"scales shape {scales.shape} does not match {centers.shape[0]} centers")
        if (scales < SCALE_FLOOR).any():
            raise ConfigError(f"all scales must be >= {SCALE_FLOOR}")
        self.centers = centers
        self.scales = scales

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def clamp_scales(self):
        np.maximum(self.scales, SCALE_FLOOR, out=self.scales)

    def copy(self) -> "Codebook":
        return Codebook(self.centers.copy(), self.scales.copy())

    def to_record(self) -> dict:
        return {
            "codebook_size": self.size,
            "feature_dim": self.dim,
            "centers": self.centers.tolist(),
            "scales": self.scales.tolist(),
        }

    @classmethod
    def from_record(cls, record: dict) -> "Codebook":
        cb = cls(np.array(record["centers"], dtype=DTYPE),
                 np.array(record["scales"], dtype=DTYPE))
        if cb.size != record["codebook_size"] or cb.dim != record["feature_dim"]:
            raise ConfigError("codebook record header does not match its payload")
        return cb

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_record(), f)

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path) as f:
            return cls.from_record(json.load(f))


def init_gaussian(rng: Rng, size: int, dim: int) -> Codebook:
    """Centers ~ N(0, 1/sqrt(D)) per coordinate, unit scales."""
    centers = rng.normal((size, dim), 0.0, 1.0 / np.sqrt(dim))
    return Codebook(centers, np.ones(size, dtype=DTYPE))


def init_from_features(rng: Rng, size: int, features: np.ndarray) -> Codebook:
    """Centers copied from ``size`` distinct feature vectors of one batch.

    features: [B, D, P]. Falls back to gaussian init (with a warning) when
    fewer than ``size`` distinct vectors exist.
    """
    if features.ndim != 3:
        raise ShapeError(f"features must be [B,D,P], got {features.shape}")
    vectors = np.unique(
        features.transpose(0, 2, 1).reshape(-1, features.shape[1]), axis=0)
    if vectors.shape[0] < size:
        log.warning(
            "only %d distinct feature vectors for %d codebook items; "
            "falling back to gaussian init", vectors.shape[0], size)
        return init_gaussian(rng, size, features.shape[1])
    pick = rng.permutation(vectors.shape[0])[:size]
    return Codebook(vectors[pick], np.ones(size, dtype=DTYPE))


def init_codebook(rng: Rng, size: int, dim: int, strategy: str = "gaussian",
                  features: np.ndarray = None) -> Codebook:
    if size < 2:
        raise ConfigError(f"codebook size must be >= 2, got {size}")
    if dim < 1:
        raise ConfigError(f"feature dim must be >= 1, got {dim}")
    if strategy == "gaussian":
        return init_gaussian(rng, size, dim)
    if strategy == "sample":
        if features is None:
            raise ConfigError("sample init needs a feature batch")
        if features.shape[1] != dim:
            raise ShapeError(f"feature dim {features.shape[1]} != codebook dim {dim}")
        return init_from_features(rng, size, features)
    raise ConfigError(f"unknown codebook init strategy {strategy!r}")


@dataclass
class QuantizedBatch:
    psi: np.ndarray        # [B, K, P] per-position memberships, columns sum to 1
    histogram: np.ndarray  # [B, K] per-sample mean membership, rows sum to 1


def _distances(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Euclidean distances [B, K, P] between positions and centers."""
    x2 = np.einsum("bdn,bdn->bn", features, features)
    c2 = np.einsum("kd,kd->k", centers, centers)
    cross = np.einsum("kd,bdn->bkn", centers, features)
    d2 = x2[:, None, :] + c2[None, :, None] - 2.0 * cross
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def bof_forward(features: np.ndarray, codebook: Codebook, cache: dict = None):
    """Soft-quantize [B, D, P] features; returns a QuantizedBatch.

    Scores -d/m are softmax-normalized over the K axis with
    max-subtraction. Pass a dict as ``cache`` to retain what
    ``bof_backward`` needs.
    """
    if features.ndim != 3:
        raise ShapeError(f"features must be [B,D,P], got {features.shape}")
    if features.shape[1] != codebook.dim:
        raise ShapeError(
            f"feature dim {features.shape[1]} != codebook dim {codebook.dim}")
    if (codebook.scales < SCALE_FLOOR).any():
        raise StateError(f"codebook scales below {SCALE_FLOOR}")
    d = _distances(features, codebook.centers)
    scores = -d / codebook.scales[None, :, None]
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    psi = scores / scores.sum(axis=1, keepdims=True)
    histogram = psi.mean(axis=2)
    if cache is not None:
        cache.update(features=features, distances=d, psi=psi,
                     centers=codebook.centers.copy(), scales=codebook.scales.copy())
    return QuantizedBatch(psi=psi, histogram=histogram)


def bof_backward(cache: dict, grad_histogram: np.ndarray):
    """Exact gradients of the histogram w.r.t. features, centers, scales.

    Returns (grad_features [B,D,P], grad_centers [K,D], grad_scales [K]).
    At a zero distance the norm is non-differentiable; the 0 subgradient
    is used for that term.
    """
    if not cache:
        raise StateError("bof backward called before forward")
    x, d, psi = cache["features"], cache["distances"], cache["psi"]
    centers, scales = cache["centers"], cache["scales"]
    b, k, p = psi.shape
    if grad_histogram.shape != (b, k):
        raise ShapeError(
            f"grad histogram shape {grad_histogram.shape}, expected {(b, k)}")
    g_psi = np.broadcast_to(grad_histogram[:, :, None] / p, psi.shape)
    # softmax jacobian over the K axis
    inner = np.einsum("bkn,bkn->bn", g_psi, psi)
    g_score = psi * (g_psi - inner[:, None, :])
    inv_m = 1.0 / scales
    g_dist = g_score * (-inv_m[None, :, None])
    grad_scales = np.einsum("bkn,bkn->k", g_score, d) * inv_m * inv_m
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(d > 0.0, g_dist / d, 0.0)
    u_pos = u.sum(axis=1)          # [B, P]
    u_item = u.sum(axis=(0, 2))    # [K]
    grad_features = x * u_pos[:, None, :] - np.einsum("bkn,kd->bdn", u, centers)
    grad_centers = centers * u_item[:, None] - np.einsum("bkn,bdn->kd", u, x)
    return grad_features, grad_centers, grad_scales


class BofPooling(Layer):
    """Pooling layer: [B,C,H,W] -> [B,K] histogram over a learned codebook."""

    def __init__(self, codebook: Codebook):
        super().__init__()
        self.codebook = codebook
        self.params = {"centers": codebook.centers, "scales": codebook.scales}
        self._init_grads()
        self._cache = {}
        self._shape_in = None

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"bof pooling expects rank-4 input, got {x.shape}")
        if x.shape[1] != self.codebook.dim:
            raise ShapeError(
                f"channels {x.shape[1]} != codebook dim {self.codebook.dim}")
        self._shape_in = x.shape
        features = x.reshape(x.shape[0], x.shape[1], -1)
        self._cache = {}
        return bof_forward(features, self.codebook, cache=self._cache).histogram

    def backward(self, grad_out):
        if self._shape_in is None:
            raise StateError("bof backward called before forward")
        grad_features, grad_centers, grad_scales = bof_backward(self._cache, grad_out)
        self.grads["centers"] += grad_centers
        self.grads["scales"] += grad_scales
        return grad_features.reshape(self._shape_in)

    def constrain(self):
        self.codebook.clamp_scales()
