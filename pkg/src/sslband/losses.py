"""Recognition loss terms and the first-layer group penalty.

All recognition terms are batch *sums*; the trainer divides by the batch
size. Centers never receive gradients; they move only via ``update_centers``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor_core import FilterBank4, softmax


@dataclass
class LossWeights:
    lambda_g: float = 1.0
    gamma: float = 0.01

    def __post_init__(self):
        for name in ("lambda_g", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class CenterBank:
    centers: np.ndarray
    update_scale: float = 0.001

    def __post_init__(self):
        if not 0 < self.update_scale <= 1:
            raise ConfigError(f"update_scale must be in (0, 1], got {self.update_scale}")
        if not np.all(np.isfinite(self.centers)):
            raise ConfigError("centers must be finite")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def zeros(cls, k: int, feature_dim: int, update_scale: float = 0.001, dtype=np.float64) -> "CenterBank":
        return cls(np.zeros((k, feature_dim), dtype=dtype), update_scale)


def one_hot(labels: np.ndarray, k: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed cross-entropy of softmax probabilities against one-hot ``labels``.

    Returns the scalar loss and ``d loss / d logits = p - y``.
    """
    if labels.shape != logits.shape:
        raise ConfigError(f"labels shape {labels.shape} != logits shape {logits.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ConfigError("every label row must be one-hot")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-(labels * log_p).sum())
    return loss, softmax(logits) - labels


def center_loss(features: np.ndarray, labels: np.ndarray, bank: CenterBank, gamma: float):
    """``gamma/2 * sum_i ||f_i - c_{y_i}||^2`` and its gradient w.r.t. the features."""
    labels = np.asarray(labels)
    if labels.max(initial=-1) >= bank.k or labels.min(initial=0) < 0:
        raise ConfigError("label outside the center bank")
    diff = features - bank.centers[labels]
    return float(0.5 * gamma * (diff * diff).sum()), gamma * diff


def update_centers(bank: CenterBank, features: np.ndarray, labels: np.ndarray) -> CenterBank:
    """Move each present class center toward its batch mean feature, in place.

    ``c_j <- c_j - scale * mean_{i: y_i = j}(c_j - f_i)``; absent classes are untouched.
    """
    labels = np.asarray(labels)
    for j in np.unique(labels):
        members = features[labels == j]
        delta = (bank.centers[j] - members).mean(axis=0)
        bank.centers[j] -= bank.update_scale * delta
    return bank


def group_norms(first_layer: FilterBank4 | np.ndarray) -> np.ndarray:
    w = first_layer.weights if isinstance(first_layer, FilterBank4) else first_layer
    return np.sqrt((w * w).sum(axis=(0, 2, 3)))


def group_lasso(first_layer: FilterBank4 | np.ndarray, groups=None) -> tuple[float, np.ndarray]:
    """Sum over bands of the l2 norm of that band's first-layer weights.

    ``groups`` may be the band slices from ``band_groups``; by default the
    channel axis of ``first_layer`` defines them.
    """
    if groups is None:
        norms = group_norms(first_layer)
    else:
        norms = np.array([np.sqrt((g * g).sum()) for g in groups])
    return float(norms.sum()), norms


def group_lasso_grad(w: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Subgradient of the group penalty: ``w_g / max(||w_g||, floor)`` per band."""
    norms = group_norms(w)
    return w / np.maximum(norms, floor).reshape(1, -1, 1, 1)


def total_loss(recognition_loss: float, penalty: float, weights: LossWeights) -> float:
    return recognition_loss + weights.lambda_g * penalty
