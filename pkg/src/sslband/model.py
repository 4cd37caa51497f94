"""VGG-style classifier whose first convolution sees every spectral band.

The first conv layer's channel axis has one entry per band. ``band_groups``
exposes the per-band weight slices that the group penalty acts on, and the
network keeps an explicit mask of which bands are still active.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .tensor_core import (
    BatchNorm,
    Conv2d,
    FilterBank4,
    Flatten,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool2,
    ReLU,
    check_finite,
)

CHECKPOINT_MAGIC = b"BPN1"


@dataclass
class ModelConfig:
    input_bands: int
    num_classes: int
    input_size: tuple[int, int] = (32, 32)
    conv_blocks: list[tuple[int, int]] = field(default_factory=lambda: [(16, 2), (32, 2)])
    kernel_size: int = 3
    head: str = "gap"  # "gap" or "fc"
    head_dim: int | None = None  # FC head width; None means 8x the last block's filters
    use_batchnorm: bool = True
    first_layer_batchnorm: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        self.conv_blocks = [tuple(int(v) for v in b) for b in self.conv_blocks]
        self.validate()

    def validate(self):
        if self.input_bands < 1:
            raise ConfigError("input_bands must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not self.conv_blocks:
            raise ConfigError("at least one conv block is required")
        if any(f < 1 or n < 1 for f, n in self.conv_blocks):
            raise ConfigError(f"invalid conv_blocks {self.conv_blocks}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if self.head not in ("gap", "fc"):
            raise ConfigError(f"unknown head {self.head!r}")
        factor = 2 ** len(self.conv_blocks)
        h, w = self.input_size
        if h % factor or w % factor:
            raise ConfigError(f"input size {h}x{w} not divisible by {factor} ({len(self.conv_blocks)} pooled blocks)")

    @property
    def resolved_head_dim(self) -> int:
        return self.head_dim if self.head_dim is not None else 8 * self.conv_blocks[-1][0]

    @property
    def penultimate_spatial(self) -> tuple[int, int]:
        factor = 2 ** len(self.conv_blocks)
        return self.input_size[0] // factor, self.input_size[1] // factor

    @property
    def feature_dim(self) -> int:
        return self.conv_blocks[-1][0] if self.head == "gap" else self.resolved_head_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_first_layer_by_duplication(base: FilterBank4 | np.ndarray, num_bands: int) -> FilterBank4:
    """Expand 3-channel filters to ``num_bands`` channels by cycling base channels.

    Channel ``c`` is base channel ``c % 3`` times ``3 / num_bands``; the rescale
    keeps the response to a spectrally flat input equal to the base response
    when ``num_bands`` is a multiple of 3.
    """
    w = base.weights if isinstance(base, FilterBank4) else np.asarray(base)
    if w.ndim != 4:
        raise ConfigError("base filter bank must be 4-D")
    nb = w.shape[1]
    idx = np.arange(num_bands) % nb
    return FilterBank4(w[:, idx] * (nb / num_bands))


class Network:
    """Ordered layers split into a trunk (producing features) and a classifier."""

    def __init__(self, config: ModelConfig, trunk: list[Layer], classifier: Linear):
        self.config = config
        self.trunk = trunk
        self.classifier = classifier
        self.active_bands = np.ones(config.input_bands, dtype=bool)

    @property
    def layers(self) -> list[Layer]:
        return [*self.trunk, self.classifier]

    @property
    def first_layer(self) -> Conv2d:
        return self.trunk[0]  # type: ignore[return-value]

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def dtype(self):
        return self.first_layer.params["weight"].dtype

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """``(name, param, grad)`` triples in build order."""
        out = []
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                out.append((f"{i}.{k}", layer.params[k], layer.grads[k]))
        return out

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, batch: np.ndarray, train: bool = False) -> tuple[np.ndarray, np.ndarray]:
        if batch.ndim != 4 or batch.shape[1] != self.config.input_bands:
            raise ConfigError(
                f"batch shape {batch.shape} does not match {self.config.input_bands} input bands"
            )
        x = batch.astype(self.dtype, copy=False)
        for layer in self.trunk:
            x = layer.forward(x, train)
        features = x
        logits = self.classifier.forward(features, train)
        return check_finite(features, "features"), check_finite(logits, "logits")

    def backward(self, grad_features: np.ndarray | None, grad_logits: np.ndarray) -> np.ndarray:
        g = self.classifier.backward(grad_logits)
        if grad_features is not None:
            g = g + grad_features
        for layer in reversed(self.trunk):
            g = layer.backward(g)
        return g

    def apply_band_mask(self):
        """Zero the weights and gradients of every inactive band."""
        w = self.first_layer.params["weight"]
        w[:, ~self.active_bands] = 0
        self.first_layer.grads["weight"][:, ~self.active_bands] = 0


def build(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Network:
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    trunk: list[Layer] = []
    in_ch = config.input_bands
    first = True
    for filters, n_convs in config.conv_blocks:
        for _ in range(n_convs):
            if first:
                base = he_normal(rng, (filters, 3, k, k), fan_in=3 * k * k)
                w = init_first_layer_by_duplication(base, in_ch).weights
                first = False
            else:
                w = he_normal(rng, (filters, in_ch, k, k), fan_in=in_ch * k * k)
            trunk.append(Conv2d(w.astype(dtype), stride=1, pad=(k - 1) // 2))
            if config.use_batchnorm and (len(trunk) > 1 or config.first_layer_batchnorm):
                trunk.append(BatchNorm(filters, dtype))
            trunk.append(ReLU())
            in_ch = filters
        trunk.append(MaxPool2())
    if config.head == "gap":
        trunk.append(GlobalAvgPool())
        feat = in_ch
    else:
        ph, pw = config.penultimate_spatial
        flat = in_ch * ph * pw
        feat = config.resolved_head_dim
        trunk.append(Flatten())
        trunk.append(Linear(he_normal(rng, (flat, feat), fan_in=flat).astype(dtype)))
        if config.use_batchnorm:
            trunk.append(BatchNorm(feat, dtype))
        trunk.append(ReLU())
    classifier = Linear(he_normal(rng, (feat, config.num_classes), fan_in=feat).astype(dtype))
    return Network(config, trunk, classifier)


def band_groups(net: Network) -> list[np.ndarray]:
    """One view per band: ``w1[:, g, :, :]``. Writing into a view edits the network."""
    w = net.first_layer.params["weight"]
    return [w[:, g] for g in range(w.shape[1])]


# ----------------------------------------------------------------------------
# checkpoint files
#
# layout (little-endian):
#   b"BPN1"
#   u32 n, then n bytes of UTF-8 JSON model config
#   u32 dtype code of the network that was saved (4 or 8, informational)
#   for each layer in build order, for each param then each buffer:
#       u32 count, then count float32 values
#   ceil(C / 8) bytes: active-band bitmask, bit c of byte c // 8 (LSB first)


def _arrays(net: Network) -> list[np.ndarray]:
    out = []
    for layer in net.layers:
        out.extend(layer.params.values())
        out.extend(layer.buffers().values())
    return out


def save_checkpoint(net: Network, path: str | Path):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", net.dtype.itemsize))
    for arr in _arrays(net):
        buf.write(struct.pack("<I", arr.size))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(np.packbits(net.active_bands, bitorder="little").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, dtype=np.float32) -> Network:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated checkpoint", pos)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (n,) = struct.unpack("<I", take(4))
    try:
        config = ModelConfig.from_dict(json.loads(take(n).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", 8) from exc
    take(4)
    net = build(config, seed=0, dtype=dtype)
    for arr in _arrays(net):
        at = pos
        (count,) = struct.unpack("<I", take(4))
        if count != arr.size:
            raise FormatError(f"blob has {count} values, expected {arr.size}", at)
        arr[...] = np.frombuffer(take(4 * count), dtype="<f4").reshape(arr.shape)
    nbytes = (config.input_bands + 7) // 8
    bits = np.unpackbits(np.frombuffer(take(nbytes), dtype=np.uint8), bitorder="little")
    net.active_bands = bits[: config.input_bands].astype(bool)
    if pos != len(raw):
        raise FormatError("trailing bytes after band mask", pos)
    return net
