"""Joint training of the classifier and first-layer band selection.

One step: forward in training mode, softmax + center loss averaged over the
batch, backprop, Adam on all parameters, then block shrinkage of the
first-layer band groups with strength ``lambda_g / batch``. Centers move by
their own scaled rule after each step. Pruning runs at epoch boundaries.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericalError
from .losses import (
    CenterBank,
    LossWeights,
    center_loss,
    group_lasso,
    group_lasso_grad,
    one_hot,
    softmax_ce,
    update_centers,
)
from .model import Network
from .optimizer import (
    DEFAULT_EPS,
    AdamState,
    PruneSchedule,
    adam_group_step_sizes,
    adam_layer_step_size,
    adam_step,
    prox_group_shrink,
    prune_bands,
)

log = logging.getLogger(__name__)

TRACE_HEADER = "# sslband training trace v1"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.001
    adam_eps: float = DEFAULT_EPS
    lambda_g: float = 1.0
    gamma: float = 0.01
    center_update_scale: float = 0.001
    sparsity: str = "prox"  # "prox" or "subgradient"
    # shrinkage step: "adam" = Adam's root-mean step size over the whole first layer,
    # "adam_group" = one Adam step size per band group, "lr" = the raw learning rate
    prox_step: str = "adam"
    prune: PruneSchedule | None = field(default_factory=PruneSchedule)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.prune, dict):
            self.prune = PruneSchedule(**self.prune)
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.sparsity not in ("prox", "subgradient"):
            raise ConfigError(f"unknown sparsity mode {self.sparsity!r}")
        if self.prox_step not in ("adam", "adam_group", "lr"):
            raise ConfigError(f"unknown prox_step {self.prox_step!r}")
        LossWeights(self.lambda_g, self.gamma)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_g, self.gamma)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRecord:
    epoch: int
    train_loss: float
    recognition_loss: float
    group_penalty: float
    norms: np.ndarray
    active_bands: int


@dataclass
class TrainResult:
    net: Network
    centers: CenterBank
    trace: list[TraceRecord]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        b = order[start : start + batch_size]
        if b.size >= 2:  # batch norm needs two samples
            yield b


def train(
    net: Network,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    trace_path: str | Path | None = None,
) -> TrainResult:
    """Train ``net`` in place on ``x`` (N, C, H, W) with class indices ``labels``."""
    k = net.config.num_classes
    labels = np.asarray(labels)
    if x.shape[0] != labels.shape[0]:
        raise ConfigError("x and labels disagree on sample count")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError("labels must be class indices in [0, num_classes)")
    dtype = net.dtype
    x = x.astype(dtype, copy=False)
    targets = one_hot(labels, k, dtype)
    centers = CenterBank.zeros(k, net.feature_dim, cfg.center_update_scale, dtype)
    state = AdamState(lr=cfg.lr, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    w1_name = "0.weight"
    trace: list[TraceRecord] = []
    net.apply_band_mask()

    for epoch in range(1, cfg.epochs + 1):
        objective_sum = lr_sum = 0.0
        n_steps = 0
        for step, b in enumerate(_batches(x.shape[0], cfg.batch_size, rng)):
            n = b.size
            lam = cfg.lambda_g / n
            net.zero_grad()
            try:
                feats, logits = net.forward(x[b], train=True)
                ce, g_logits = softmax_ce(logits, targets[b])
                cl, g_feats = center_loss(feats, labels[b], centers, cfg.gamma)
                l_r = (ce + cl) / n
                if not np.isfinite(l_r):
                    raise NumericalError("non-finite loss")
                net.backward(g_feats / n, g_logits / n)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}, step {step}") from None

            w1 = net.first_layer.params["weight"]
            g1 = net.first_layer.grads["weight"]
            if cfg.sparsity == "subgradient" and lam > 0:
                g1 += (lam * group_lasso_grad(w1)).astype(dtype)
            g1[:, ~net.active_bands] = 0

            params = {name: p for name, p, _ in net.parameters()}
            grads = {name: g for name, _, g in net.parameters()}
            adam_step(params, grads, state)

            if cfg.sparsity == "prox" and lam > 0:
                if cfg.prox_step == "adam":
                    step_size = adam_layer_step_size(state, w1_name)
                elif cfg.prox_step == "adam_group":
                    step_size = adam_group_step_sizes(state, w1_name)
                else:
                    step_size = cfg.lr
                w1[...] = prox_group_shrink(w1, step_size * lam)
            if not net.active_bands.all():
                net.apply_band_mask()
                state.m[w1_name][:, ~net.active_bands] = 0
                state.v[w1_name][:, ~net.active_bands] = 0

            update_centers(centers, feats, labels[b])
            penalty, _ = group_lasso(w1)
            objective_sum += l_r + lam * penalty
            lr_sum += l_r
            n_steps += 1

        if n_steps == 0:
            raise ConfigError("training set too small for a single batch of 2")
        penalty, norms = group_lasso(net.first_layer.params["weight"])
        if cfg.prune is not None:
            prune_bands(net, norms, cfg.prune, epoch)
            penalty, norms = group_lasso(net.first_layer.params["weight"])
        rec = TraceRecord(
            epoch,
            objective_sum / n_steps,
            lr_sum / n_steps,
            penalty,
            norms.astype(np.float64),
            int(net.active_bands.sum()),
        )
        trace.append(rec)
        log.debug("epoch %d loss %.5f R_g %.4f active %d", epoch, rec.train_loss, penalty, rec.active_bands)

    if trace_path is not None:
        write_trace(trace, trace_path)
    return TrainResult(net, centers, trace)


# ----------------------------------------------------------------------------
# trace files
#
# line 1: TRACE_HEADER
# line 2: column names
# then one comma-separated record per epoch:
#   epoch, train_loss, recognition_loss, group_penalty, norm_0 .. norm_{C-1}, active_bands
# train_loss is the mean per-step objective L_r/n + (lambda_g/n) R_g, recognition_loss
# the mean per-sample L_r, group_penalty R_g of the first layer at the end of the epoch.


def trace_columns(num_bands: int) -> list[str]:
    return ["epoch", "train_loss", "recognition_loss", "group_penalty"] + [
        f"norm_{c}" for c in range(num_bands)
    ] + ["active_bands"]


def write_trace(trace: list[TraceRecord], path: str | Path):
    if not trace:
        raise ConfigError("empty trace")
    lines = [TRACE_HEADER, ",".join(trace_columns(len(trace[0].norms)))]
    for r in trace:
        vals = [str(r.epoch), repr(float(r.train_loss)), repr(float(r.recognition_loss)), repr(float(r.group_penalty))]
        vals += [repr(float(v)) for v in r.norms]
        vals.append(str(r.active_bands))
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path: str | Path) -> list[TraceRecord]:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2 or lines[0] != TRACE_HEADER:
        raise FormatError(f"{path}: not a training trace")
    cols = lines[1].split(",")
    num_bands = len(cols) - 5
    if num_bands < 1 or cols != trace_columns(num_bands):
        raise FormatError(f"{path}: unexpected trace columns")
    out = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split(",")
        if len(parts) != len(cols):
            raise FormatError(f"{path}:{lineno}: expected {len(cols)} fields, got {len(parts)}")
        out.append(
            TraceRecord(
                int(parts[0]),
                float(parts[1]),
                float(parts[2]),
                float(parts[3]),
                np.array([float(v) for v in parts[4:-1]]),
                int(parts[-1]),
            )
        )
    return out
