"""Adam, the group shrinkage step for first-layer bands, and band pruning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .losses import group_norms

DEFAULT_EPS = 1e-3
CONVENTIONAL_EPS = 1e-8


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = DEFAULT_EPS
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def bias_corrected_v(self, name: str) -> np.ndarray:
        return self.v[name] / (1 - self.beta2**self.t)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update of every array in ``params``, in place."""
    state.t += 1
    bc1 = 1 - state.beta1**state.t
    bc2 = 1 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def adam_group_step_sizes(state: AdamState, name: str) -> np.ndarray:
    """Per-band step size Adam applied to the first-layer weights ``name``.

    Adam scales each coordinate by ``lr / (sqrt(v_hat) + eps)``; the prox step
    needs one scalar per group, so the group's root-mean ``v_hat`` is used.
    """
    v_hat = state.bias_corrected_v(name)
    rms = np.sqrt(v_hat.mean(axis=(0, 2, 3)))
    return state.lr / (rms + state.eps)


def adam_layer_step_size(state: AdamState, name: str) -> float:
    """One Adam step size for the whole array ``name`` (root-mean ``v_hat`` over all entries)."""
    rms = float(np.sqrt(state.bias_corrected_v(name).mean()))
    return state.lr / (rms + state.eps)


def prox_group_shrink(w: np.ndarray, kappa: float | np.ndarray) -> np.ndarray:
    """Block soft-thresholding of each band group ``w[:, g]`` of a (L, C, P, Q) bank.

    ``w_g <- max(0, 1 - kappa_g / ||w_g||) * w_g``. ``kappa`` is a scalar or one
    value per band. Returns a new array.
    """
    kappa = np.broadcast_to(np.asarray(kappa, dtype=np.float64), (w.shape[1],))
    if np.any(kappa < 0):
        raise ConfigError("kappa must be >= 0")
    norms = group_norms(w).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > kappa, 1 - kappa / norms, 0.0)
    scale = np.where(kappa == 0, 1.0, scale)
    return w * scale.astype(w.dtype).reshape(1, -1, 1, 1)


@dataclass
class PruneSchedule:
    start_epoch: int = 5
    threshold_rel: float = 1e-3
    check_every: int = 1

    def __post_init__(self):
        if self.start_epoch < 1:
            raise ConfigError("prune start_epoch must be >= 1")
        if not 0 < self.threshold_rel < 1:
            raise ConfigError("prune threshold_rel must be in (0, 1)")
        if self.check_every < 1:
            raise ConfigError("prune check_every must be >= 1")

    def due(self, epoch: int) -> bool:
        return epoch >= self.start_epoch and (epoch - self.start_epoch) % self.check_every == 0


def prune_bands(net, norms: np.ndarray, schedule: PruneSchedule, epoch: int) -> np.ndarray:
    """Permanently mask bands whose group norm fell below ``threshold_rel * max``.

    Bands with an exactly zero group are always masked when a check is due.
    The mask only ever shrinks. Returns the updated ``net.active_bands``.
    """
    if epoch < 1:
        raise ConfigError("epoch must be >= 1")
    if schedule.due(epoch):
        norms = np.asarray(norms, dtype=np.float64)
        weak = (norms < schedule.threshold_rel * norms.max()) | (norms == 0)
        net.active_bands = net.active_bands & ~weak
        net.apply_band_mask()
    return net.active_bands
