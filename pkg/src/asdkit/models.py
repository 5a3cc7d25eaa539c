"""Model assembly: convolutional autoencoders (unsupervised and
semi-supervised) and the dense baseline autoencoder.

Layers follow a static layer-sequence backprop scheme: each layer caches
whatever its backward pass needs during forward, so a graph is one
ordered list of layers plus an optional classification head reading the
bottleneck activation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .errors import ConfigError, IntegrityError, ShapeError
from .frontend import Spectrogram
from .ops import Parameter

CHECKPOINT_FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _glorot_uniform(rng: np.random.Generator, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    name = ""

    def params(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2D(Layer):
    """3x3 same-padding convolution.

    Caches the unfolded input columns from forward so the weight gradient
    is a single matmul; ``skip_input_grad`` elides the input gradient for
    the first layer of a graph.
    """

    def __init__(self, name, c_in, c_out, rng, dtype, skip_input_grad=False):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.skip_input_grad = skip_input_grad
        self.w = Parameter(f"{name}.w", _glorot_uniform(
            rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9, dtype))
        self.b = Parameter(f"{name}.b", np.zeros(c_out, dtype=dtype))
        self._cols = None
        self._shape = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train):
        if x.shape[1] != self.c_in:
            raise ShapeError(
                f"{self.name}: input has {x.shape[1]} channels, expected {self.c_in}"
            )
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            b * h * w, c * 9
        )
        w2 = self.w.value.reshape(self.c_out, c * 9)
        y = cols @ w2.T
        y += self.b.value
        if train:
            self._cols = cols
            self._shape = x.shape
        return np.ascontiguousarray(
            y.reshape(b, h, w, self.c_out).transpose(0, 3, 1, 2)
        )

    def backward(self, grad_out):
        b, c, h, w = self._shape
        go2 = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(
            b * h * w, self.c_out
        )
        self.b.grad += go2.sum(axis=0)
        self.w.grad += (go2.T @ self._cols).reshape(self.w.value.shape)
        self._cols = None
        if self.skip_input_grad:
            return None
        gp = np.pad(grad_out, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))
        wf = self.w.value[:, :, ::-1, ::-1]
        dx = np.tensordot(gwin, wf, axes=([1, 4, 5], [0, 2, 3]))
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


class BatchNorm(Layer):
    """Per-channel batch normalization over 4-d NCHW or 2-d inputs."""

    def __init__(self, name, n_channels, dtype, momentum=0.99, eps=1e-3):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(n_channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(n_channels, dtype=dtype))
        self.running_mean = np.zeros(n_channels, dtype=dtype)
        self.running_var = np.ones(n_channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x, train):
        y, cache = ops.batchnorm_forward(
            x, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var,
            train=train, momentum=self.momentum, eps=self.eps,
        )
        self._cache = cache if train else None
        return y

    def backward(self, grad_out):
        dx, dgamma, dbeta = ops.batchnorm_backward(grad_out, self._cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        self._cache = None
        return dx


class ReLU(Layer):
    def __init__(self, name):
        self.name = name
        self._x = None

    def forward(self, x, train):
        if train:
            self._x = x
        return ops.relu(x)

    def backward(self, grad_out):
        dx = ops.relu_backward(grad_out, self._x)
        self._x = None
        return dx


class MaxPool2x2(Layer):
    def __init__(self, name):
        self.name = name
        self._idx = None
        self._shape = None

    def forward(self, x, train):
        y, idx = ops.maxpool2x2(x)
        if train:
            self._idx, self._shape = idx, x.shape
        return y

    def backward(self, grad_out):
        dx = ops.maxpool2x2_backward(grad_out, self._idx, self._shape)
        self._idx = None
        return dx


class Upsample2x(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, x, train):
        return ops.upsample2x(x)

    def backward(self, grad_out):
        return ops.upsample2x_backward(grad_out)


class Flatten(Layer):
    def __init__(self, name):
        self.name = name
        self._shape = None

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)


class Reshape(Layer):
    def __init__(self, name, target_chw):
        self.name = name
        self.target_chw = tuple(target_chw)

    def forward(self, x, train):
        return x.reshape((x.shape[0],) + self.target_chw)

    def backward(self, grad_out):
        return grad_out.reshape(grad_out.shape[0], -1)


class Dense(Layer):
    """Affine layer, linear activation (compose with ReLU externally)."""

    def __init__(self, name, d_in, d_out, rng, dtype):
        self.name = name
        self.w = Parameter(f"{name}.w", _glorot_uniform(
            rng, (d_in, d_out), d_in, d_out, dtype))
        self.b = Parameter(f"{name}.b", np.zeros(d_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train):
        if train:
            self._x = x
        return ops.dense_forward(x, self.w.value, self.b.value)

    def backward(self, grad_out):
        dx, dw, db = ops.dense_backward(grad_out, self._x, self.w.value)
        self.w.grad += dw
        self.b.grad += db
        self._x = None
        return dx


# ---------------------------------------------------------------------------
# configurations
# ---------------------------------------------------------------------------

@dataclass
class AEConfig:
    """Convolutional autoencoder configuration.

    ``loss_weights`` are the (reconstruction, classification) weights;
    they must sum to 1, with the unsupervised case being (1, 0).
    """

    n_bins: int = 64
    frames_per_segment: int = 64
    encoder_filters: tuple[int, ...] = (32, 64, 128)
    bottleneck_dim: int = 128
    n_classes: int | None = None
    loss_weights: tuple[float, float] = (1.0, 0.0)
    dtype: str = "float32"

    def __post_init__(self):
        self.encoder_filters = tuple(int(f) for f in self.encoder_filters)
        self.loss_weights = (float(self.loss_weights[0]), float(self.loss_weights[1]))
        if len(self.encoder_filters) != 3:
            raise ConfigError(
                f"encoder needs exactly 3 ConvBlocks, got {len(self.encoder_filters)}"
            )
        if self.n_bins % 8 or self.frames_per_segment % 8:
            raise ConfigError(
                f"input dims must be divisible by 8 (three 2x poolings), "
                f"got {self.n_bins}x{self.frames_per_segment}"
            )
        alpha, beta = self.loss_weights
        if alpha < 0 or beta < 0 or abs(alpha + beta - 1.0) > 1e-9:
            raise ConfigError(
                f"loss weights must be nonnegative and sum to 1, got "
                f"({alpha}, {beta})"
            )
        if self.n_classes is not None and self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        flat = self.encoder_filters[-1] * (self.n_bins // 8) * (self.frames_per_segment // 8)
        if self.bottleneck_dim < 1 or self.bottleneck_dim >= flat:
            raise ConfigError(
                f"bottleneck {self.bottleneck_dim} must be the minimum-width point "
                f"(flattened encoder output is {flat})"
            )

    def to_dict(self) -> dict:
        return {
            "n_bins": self.n_bins,
            "frames_per_segment": self.frames_per_segment,
            "encoder_filters": list(self.encoder_filters),
            "bottleneck_dim": self.bottleneck_dim,
            "n_classes": self.n_classes,
            "loss_weights": list(self.loss_weights),
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        return cls(
            n_bins=d["n_bins"],
            frames_per_segment=d["frames_per_segment"],
            encoder_filters=tuple(d["encoder_filters"]),
            bottleneck_dim=d["bottleneck_dim"],
            n_classes=d["n_classes"],
            loss_weights=tuple(d["loss_weights"]),
            dtype=d["dtype"],
        )


@dataclass
class BaselineConfig:
    """Dense baseline: 640-in, 4x128 encoder, 8-wide bottleneck, mirror out."""

    input_dim: int = 640
    hidden_units: int = 128
    n_hidden: int = 4
    bottleneck_dim: int = 8
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_dim != 640:
            raise ConfigError(f"baseline input dim must be 640, got {self.input_dim}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_units": self.hidden_units,
            "n_hidden": self.n_hidden,
            "bottleneck_dim": self.bottleneck_dim,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# model graph
# ---------------------------------------------------------------------------

class ModelGraph:
    """Ordered layer stack with a reconstruction head and an optional
    classification head reading the bottleneck activation."""

    def __init__(self, family, layers, bottleneck_index, classifier, metadata,
                 input_shape):
        self.family = family
        self.layers = layers
        self.bottleneck_index = bottleneck_index
        self.classifier = classifier
        self.metadata = dict(metadata)
        self.input_shape = tuple(input_shape)  # per-sample, without batch dim

    def forward(self, x: np.ndarray, train: bool = False):
        """Run the stack; returns (reconstruction, logits-or-None)."""
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {x.shape[1:]} != model input {self.input_shape}"
            )
        act = x
        bottleneck = None
        for i, layer in enumerate(self.layers):
            act = layer.forward(act, train)
            if i == self.bottleneck_index:
                bottleneck = act
        logits = None
        if self.classifier is not None:
            logits = self.classifier.forward(bottleneck, train)
        return act, logits

    def backward(self, d_recon: np.ndarray, d_logits: np.ndarray | None = None):
        """Accumulate parameter gradients from a forward(train=True) pass."""
        g = d_recon
        for layer in reversed(self.layers[self.bottleneck_index + 1:]):
            g = layer.backward(g)
        if self.classifier is not None and d_logits is not None:
            g = g + self.classifier.backward(d_logits)
        for layer in reversed(self.layers[: self.bottleneck_index + 1]):
            g = layer.backward(g)

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        if self.classifier is not None:
            out.extend(self.classifier.params())
        return out

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and BN running buffers, in stable order."""
        out = {}
        all_layers = list(self.layers)
        if self.classifier is not None:
            all_layers.append(self.classifier)
        for layer in all_layers:
            for p in layer.params():
                out[p.name] = p.value
            out.update(layer.buffers())
        return out

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


def _conv_block(prefix, c_in, filters, rng, dtype, direction, first=False):
    layers = [
        Conv2D(f"{prefix}.conv1", c_in, filters, rng, dtype, skip_input_grad=first),
        BatchNorm(f"{prefix}.bn1", filters, dtype),
        ReLU(f"{prefix}.relu1"),
        Conv2D(f"{prefix}.conv2", filters, filters, rng, dtype),
        BatchNorm(f"{prefix}.bn2", filters, dtype),
        ReLU(f"{prefix}.relu2"),
    ]
    if direction == "encoder":
        layers.append(MaxPool2x2(f"{prefix}.pool"))
    else:
        layers.append(Upsample2x(f"{prefix}.upsample"))
    return layers


def _build_conv_ae(config: AEConfig, rng: np.random.Generator, family: str,
                   metadata: dict | None) -> ModelGraph:
    dtype = _DTYPES[config.dtype]
    f1, f2, f3 = config.encoder_filters
    h8, w8 = config.n_bins // 8, config.frames_per_segment // 8
    flat = f3 * h8 * w8

    layers = []
    c = 1
    for i, f in enumerate(config.encoder_filters, start=1):
        layers.extend(_conv_block(f"enc{i}", c, f, rng, dtype, "encoder", first=(i == 1)))
        c = f
    layers.append(Flatten("flatten"))
    layers.append(Dense("bottleneck", flat, config.bottleneck_dim, rng, dtype))
    bottleneck_index = len(layers) - 1
    layers.append(Dense("expand", config.bottleneck_dim, flat, rng, dtype))
    layers.append(Reshape("unflatten", (f3, h8, w8)))
    for i, f in enumerate(reversed(config.encoder_filters), start=1):
        layers.extend(_conv_block(f"dec{i}", c, f, rng, dtype, "decoder"))
        c = f
    layers.append(Conv2D("out_conv", c, 1, rng, dtype))

    classifier = None
    if family == "semisupervised":
        classifier = Dense("classifier", config.bottleneck_dim, config.n_classes,
                           rng, dtype)

    meta = {"family": family, "config": config.to_dict()}
    meta.update(metadata or {})
    meta["config_hash"] = hashlib.sha256(
        json.dumps(meta["config"], sort_keys=True).encode()
    ).hexdigest()
    return ModelGraph(family, layers, bottleneck_index, classifier, meta,
                      (1, config.n_bins, config.frames_per_segment))


def build_unsupervised(config: AEConfig, rng: np.random.Generator | int,
                       metadata: dict | None = None) -> ModelGraph:
    """Symmetric conv autoencoder trained with plain reconstruction MSE."""
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    if config.n_classes is not None:
        raise ConfigError("unsupervised model must not declare n_classes")
    if config.loss_weights != (1.0, 0.0):
        raise ConfigError("unsupervised model uses loss weights (1, 0)")
    return _build_conv_ae(config, rng, "unsupervised", metadata)


def build_semisupervised(config: AEConfig, rng: np.random.Generator | int,
                         metadata: dict | None = None) -> ModelGraph:
    """Conv autoencoder plus a softmax machine-type head on the bottleneck."""
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    if config.n_classes is None:
        raise ConfigError("semi-supervised model requires n_classes >= 2")
    return _build_conv_ae(config, rng, "semisupervised", metadata)


def build_baseline_dense(config: BaselineConfig, rng: np.random.Generator | int,
                         metadata: dict | None = None) -> ModelGraph:
    """Dense autoencoder over 640-dim stacked-mel vectors."""
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    dtype = _DTYPES[config.dtype]
    h, nh, bd = config.hidden_units, config.n_hidden, config.bottleneck_dim
    layers = []
    d = config.input_dim
    for i in range(1, nh + 1):
        layers.extend([
            Dense(f"enc{i}.fc", d, h, rng, dtype),
            BatchNorm(f"enc{i}.bn", h, dtype),
            ReLU(f"enc{i}.relu"),
        ])
        d = h
    layers.append(Dense("bottleneck.fc", d, bd, rng, dtype))
    bottleneck_index = len(layers) - 1
    layers.extend([BatchNorm("bottleneck.bn", bd, dtype), ReLU("bottleneck.relu")])
    d = bd
    for i in range(1, nh + 1):
        layers.extend([
            Dense(f"dec{i}.fc", d, h, rng, dtype),
            BatchNorm(f"dec{i}.bn", h, dtype),
            ReLU(f"dec{i}.relu"),
        ])
        d = h
    layers.append(Dense("out_fc", d, config.input_dim, rng, dtype))

    meta = {"family": "baseline-dense", "config": config.to_dict()}
    meta.update(metadata or {})
    meta["config_hash"] = hashlib.sha256(
        json.dumps(meta["config"], sort_keys=True).encode()
    ).hexdigest()
    return ModelGraph("baseline-dense", layers, bottleneck_index, None, meta,
                      (config.input_dim,))


# ---------------------------------------------------------------------------
# spectrogram segmentation
# ---------------------------------------------------------------------------

def _reflect_indices(n: int, length: int) -> np.ndarray:
    """Reflection (no-repeat-edge) index extension of range(n) to `length`."""
    if n == 1:
        return np.zeros(length, dtype=np.int64)
    period = 2 * n - 2
    k = np.arange(length, dtype=np.int64) % period
    return np.where(k < n, k, period - k)


def segment_starts(n_frames: int, frames_per_segment: int, hop_frames: int) -> list[int]:
    """Sliding starts plus a tail-anchored start so [0, T) is covered."""
    starts = list(range(0, n_frames - frames_per_segment + 1, hop_frames))
    tail = n_frames - frames_per_segment
    if starts[-1] != tail:
        starts.append(tail)
    return starts


def segment_spectrogram(spec: Spectrogram, frames_per_segment: int,
                        hop_frames: int = 32) -> list[np.ndarray]:
    """Cut an F x T spectrogram into fixed-width (F, frames_per_segment)
    segments; clips shorter than one segment are reflection-padded."""
    if frames_per_segment % 8:
        raise ConfigError(
            f"frames_per_segment must be divisible by 8, got {frames_per_segment}"
        )
    if not 1 <= hop_frames <= frames_per_segment:
        raise ConfigError(
            f"hop_frames must be in [1, {frames_per_segment}] so segments cover "
            f"the clip, got {hop_frames}"
        )
    v = spec.values
    t = v.shape[1]
    if t < frames_per_segment:
        idx = _reflect_indices(t, frames_per_segment)
        return [np.ascontiguousarray(v[:, idx])]
    return [
        np.ascontiguousarray(v[:, s: s + frames_per_segment])
        for s in segment_starts(t, frames_per_segment, hop_frames)
    ]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_BUILDERS = {
    "unsupervised": (AEConfig, build_unsupervised),
    "semisupervised": (AEConfig, build_semisupervised),
    "baseline-dense": (BaselineConfig, build_baseline_dense),
}


def _arrays_checksum(arrays: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for key in arrays:
        digest.update(key.encode())
        digest.update(np.ascontiguousarray(arrays[key]).tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str | Path, model: ModelGraph) -> None:
    """Self-describing checkpoint: layer/shape manifest, raw values and a
    content checksum, written atomically."""
    arrays = model.named_arrays()
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "family": model.family,
        "metadata": model.metadata,
        "entries": [
            {"key": k, "shape": list(v.shape), "dtype": str(v.dtype)}
            for k, v in arrays.items()
        ],
        "checksum": _arrays_checksum(arrays),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> ModelGraph:
    """Rebuild the architecture from its config and restore all arrays;
    refuses checkpoints whose content checksum does not verify."""
    path = Path(path)
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise IntegrityError(
                f"{path}: unsupported checkpoint version {meta['format_version']}"
            )
        arrays = {e["key"]: z[e["key"]] for e in meta["entries"]}
    if _arrays_checksum(arrays) != meta["checksum"]:
        raise IntegrityError(f"{path}: checkpoint checksum mismatch; refusing to load")
    family = meta["family"]
    if family not in _BUILDERS:
        raise IntegrityError(f"{path}: unknown model family {family!r}")
    config_cls, builder = _BUILDERS[family]
    config = config_cls.from_dict(meta["metadata"]["config"])
    extra = {k: v for k, v in meta["metadata"].items()
             if k not in ("family", "config", "config_hash")}
    model = builder(config, np.random.default_rng(0), metadata=extra)
    target = model.named_arrays()
    if set(target) != set(arrays):
        raise IntegrityError(f"{path}: checkpoint keys do not match architecture")
    for key, value in arrays.items():
        if target[key].shape != value.shape:
            raise IntegrityError(
                f"{path}: shape mismatch for {key}: {value.shape} vs "
                f"{target[key].shape}"
            )
        target[key][...] = value
    return model
