"""Small convolutional classifier used as the attack target.

The model is an ordered list of layers. The default stack is three
conv/leaky-ReLU/max-pool blocks, one hidden dense layer, and a logit head
(softmax is applied by :func:`predict` and the loss). Public APIs take images
as (H, W, 3) or batched (N, H, W, 3) arrays in [0, 1].
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

DEFAULT_REJECT_THRESHOLD = 0.25


class WeightFileError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_resolution: int = 32
    channels: int = 3
    num_classes: int = 29
    conv_blocks: tuple[tuple[int, int], ...] = ((16, 3), (32, 3), (64, 3))
    dense_width: int = 128
    leaky_slope: float = 0.01

    def __post_init__(self):
        self.conv_blocks = tuple((int(f), int(k)) for f, k in self.conv_blocks)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.channels < 1 or self.input_resolution < 1:
            raise ValueError("channels and input_resolution must be positive")
        pools = len(self.conv_blocks)
        if self.input_resolution % (2 ** pools):
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by 2^{pools}"
            )
        for f, k in self.conv_blocks:
            if f < 1 or k < 1 or k % 2 == 0:
                raise ValueError(f"conv block ({f}, {k}) needs positive filters and odd kernel")
        if self.dense_width < 0:
            raise ValueError("dense_width must be >= 0 (0 disables the hidden layer)")


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    weight_decay: float = 0.0005
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")


@dataclass
class Prediction:
    label: int
    score: float
    recognized: bool
    probabilities: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float


# ---------------------------------------------------------------------------
# Layers


class Conv2D:
    kind = "conv"

    def __init__(self, name: str, in_channels: int, filters: int, kernel: int, pad: int | None = None):
        self.name = name
        self.in_channels, self.filters, self.kernel = in_channels, filters, kernel
        self.pad = kernel // 2 if pad is None else pad

    def param_shapes(self):
        k = self.kernel
        return {
            f"{self.name}.weight": (self.filters, self.in_channels, k, k),
            f"{self.name}.bias": (self.filters,),
        }

    def fans(self):
        k2 = self.kernel * self.kernel
        return self.in_channels * k2, self.filters * k2

    def __call__(self, x, p):
        return ad.conv2d(x, p[f"{self.name}.weight"], p[f"{self.name}.bias"], 1, self.pad)


class Dense:
    kind = "dense"

    def __init__(self, name: str, fan_in: int, units: int):
        self.name, self.fan_in, self.units = name, fan_in, units

    def param_shapes(self):
        return {
            f"{self.name}.weight": (self.fan_in, self.units),
            f"{self.name}.bias": (self.units,),
        }

    def fans(self):
        return self.fan_in, self.units

    def __call__(self, x, p):
        return ad.dense(x, p[f"{self.name}.weight"], p[f"{self.name}.bias"])


class LeakyReLU:
    kind = "act"

    def __init__(self, name: str, slope: float):
        self.name, self.slope = name, slope

    def param_shapes(self):
        return {}

    def __call__(self, x, p):
        return ad.leaky_relu(x, self.slope)


class MaxPool:
    kind = "pool"

    def __init__(self, name: str):
        self.name = name

    def param_shapes(self):
        return {}

    def __call__(self, x, p):
        return ad.max_pool2d(x)


class Flatten:
    kind = "flatten"

    def __init__(self, name: str = "flatten"):
        self.name = name

    def param_shapes(self):
        return {}

    def __call__(self, x, p):
        return ad.flatten(x)


def build_layers(cfg: ModelConfig) -> list:
    layers = []
    c, res = cfg.channels, cfg.input_resolution
    for i, (filters, kernel) in enumerate(cfg.conv_blocks, start=1):
        layers += [
            Conv2D(f"conv{i}", c, filters, kernel),
            LeakyReLU(f"act{i}", cfg.leaky_slope),
            MaxPool(f"pool{i}"),
        ]
        c, res = filters, res // 2
    layers.append(Flatten())
    width = c * res * res
    if cfg.dense_width:
        layers += [Dense("dense1", width, cfg.dense_width), LeakyReLU("act_dense", cfg.leaky_slope)]
        width = cfg.dense_width
    layers.append(Dense("head", width, cfg.num_classes))
    return layers


# ---------------------------------------------------------------------------
# Model


def _as_batch(images: np.ndarray) -> tuple[np.ndarray, bool]:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return images[None], True
    if images.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (N, H, W, C) images, got {images.shape}")
    return images, False


class Model:
    """Layer list plus named float64 parameters."""

    def __init__(self, config: ModelConfig | None = None, layers: list | None = None,
                 params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.custom_layers = layers is not None
        if layers is None:
            if config is None:
                config = ModelConfig()
            layers = build_layers(config)
        elif config is None:
            raise ValueError("a config is required alongside custom layers")
        self.config = config
        self.layers = layers
        self.params = params if params is not None else init_params(layers, seed)
        shapes = self.param_shapes()
        if list(self.params) != list(shapes):
            raise ValueError("parameter names do not match the layer list")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    @property
    def conv_layer_names(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "conv"]

    @property
    def resolution(self) -> int:
        return self.config.input_resolution

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def copy(self) -> "Model":
        params = {k: v.copy() for k, v in self.params.items()}
        if self.custom_layers:
            return Model(self.config, self.layers, params)
        return Model(self.config, params=params)

    def check_images(self, images: np.ndarray) -> None:
        r, c = self.config.input_resolution, self.config.channels
        if images.shape[1:] != (r, r, c):
            raise ValueError(
                f"image shape {images.shape[1:]} does not match model input ({r}, {r}, {c})"
            )

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None,
                capture: str | None = None) -> tuple[Tensor, Tensor | None]:
        """Run the layer stack on an NHWC tensor.

        With ``capture`` set to a layer name, that layer's output is re-rooted
        as a fresh leaf requiring grad and returned alongside the logits, so
        callers can differentiate with respect to it.
        """
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        captured = None
        for layer in self.layers:
            x = layer(x, params)
            if layer.name == capture:
                x = Tensor(x.data, requires_grad=True)
                captured = x
        if capture is not None and captured is None:
            raise ValueError(f"no layer named {capture!r}")
        return x, captured

    def logits(self, images: np.ndarray) -> np.ndarray:
        batch, single = _as_batch(images)
        self.check_images(batch)
        z, _ = self.forward(Tensor(batch))
        return z.data[0] if single else z.data

    def probabilities(self, images: np.ndarray) -> np.ndarray:
        return ad.softmax(self.logits(images))

    def input_gradient(self, images: np.ndarray,
                       objective: Callable[[Tensor], Tensor]) -> tuple[np.ndarray, np.ndarray, float]:
        """Gradient of ``objective(logits)`` with respect to the input images.

        Returns (gradient shaped like ``images``, logits, objective value).
        """
        batch, single = _as_batch(images)
        self.check_images(batch)
        x = Tensor(batch, requires_grad=True)
        z, _ = self.forward(x)
        loss = objective(z)
        (g,) = ad.grad(loss, [x])
        return (g[0] if single else g), (z.data[0] if single else z.data), float(loss.data)

    def loss_gradient(self, images: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
        """Per-example cross-entropy input gradients (summed loss, so no 1/N)."""
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        g, z, _ = self.input_gradient(
            images, lambda z: ad.softmax_cross_entropy(z, labels, reduction="sum")
        )
        return g, z


def init_params(layers: Sequence, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for layer in layers:
        for name, shape in layer.param_shapes().items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape)
            else:
                fan_in, fan_out = layer.fans()
                a = math.sqrt(6.0 / (fan_in + fan_out))
                params[name] = rng.uniform(-a, a, size=shape)
    return params


# ---------------------------------------------------------------------------
# Prediction and evaluation


def prediction_from_probs(probs: np.ndarray, reject_threshold: float) -> Prediction:
    label = int(np.argmax(probs))  # first maximum -> lowest index on ties
    score = float(probs[label])
    return Prediction(label, score, score >= reject_threshold, probs)


def predict(model: Model, image: np.ndarray,
            reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> Prediction:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"predict expects one (H, W, C) image, got {image.shape}")
    return prediction_from_probs(model.probabilities(image), reject_threshold)


def predict_batch(model: Model, images: np.ndarray,
                  reject_threshold: float = DEFAULT_REJECT_THRESHOLD,
                  batch_size: int = 256) -> list[Prediction]:
    out = []
    for start in range(0, len(images), batch_size):
        probs = model.probabilities(images[start:start + batch_size])
        out += [prediction_from_probs(p, reject_threshold) for p in probs]
    return out


def predicted_labels(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    labels = [
        np.argmax(model.logits(images[s:s + batch_size]), axis=1)
        for s in range(0, len(images), batch_size)
    ]
    return np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, examples) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    images, labels = _examples_arrays(examples)
    k = model.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    pred = predicted_labels(model, images)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return float(np.trace(confusion) / confusion.sum()), confusion


def _examples_arrays(examples) -> tuple[np.ndarray, np.ndarray]:
    from .data import stack

    if isinstance(examples, tuple):
        images, labels = examples
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
    else:
        images, labels = stack(examples)
    if len(labels) == 0:
        raise ValueError("no examples to evaluate")
    return images, labels


# ---------------------------------------------------------------------------
# Training


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, weight_decay: float) -> None:
    """In-place SGD; L2 decay applies to weights, not biases."""
    for name, g in grads.items():
        w = params[name]
        if weight_decay and not name.endswith(".bias"):
            g = g + weight_decay * w
        w -= lr * g


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: x0.1 at 50% and again at 75% of the epochs (0-based epoch)."""
    lr = cfg.learning_rate
    if epoch >= cfg.epochs * 0.5:
        lr *= 0.1
    if epoch >= cfg.epochs * 0.75:
        lr *= 0.1
    return lr


def train(model_cfg: ModelConfig, data, cfg: TrainConfig,
          model: Model | None = None) -> tuple[Model, list[EpochMetrics]]:
    """Mini-batch SGD with weight decay on the train split; validates each epoch.

    ``data`` is a DatasetSplit. Passing ``model`` continues from its weights
    instead of a fresh seeded initialisation.
    """
    if not data.train:
        raise ValueError("training split is empty")
    if not data.val:
        raise ValueError("validation split is empty")
    for split_name in ("train", "val"):
        for i, ex in enumerate(getattr(data, split_name)):
            if not 0 <= ex.class_id < model_cfg.num_classes:
                raise ValueError(
                    f"{split_name}[{i}] ({ex.source_path or 'unnamed'}): label {ex.class_id} "
                    f"outside [0, {model_cfg.num_classes})"
                )
    images, labels = _examples_arrays(data.train)
    if model is None:
        model = Model(model_cfg, seed=cfg.seed)
    model.check_images(images)
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = len(labels)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            params = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
            z, _ = model.forward(Tensor(images[idx]), params)
            loss = ad.softmax_cross_entropy(z, labels[idx])
            names = list(params)
            grads = ad.grad(loss, [params[k] for k in names])
            sgd_step(model.params, dict(zip(names, grads)), lr, cfg.weight_decay)
            total += float(loss.data) * len(idx)
            seen += len(idx)
        val_acc, _ = evaluate(model, data.val)
        history.append(EpochMetrics(epoch + 1, total / seen, val_acc))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch + 1, total / seen, val_acc)
    return model, history


# ---------------------------------------------------------------------------
# Weight files

MAGIC = b"SGNSTRM1"


def serialize_config(cfg: ModelConfig) -> bytes:
    out = struct.pack("<IIII", cfg.input_resolution, cfg.channels, cfg.num_classes,
                      len(cfg.conv_blocks))
    for f, k in cfg.conv_blocks:
        out += struct.pack("<II", f, k)
    out += struct.pack("<Id", cfg.dense_width, cfg.leaky_slope)
    return out


def dump_weights(model: Model) -> bytes:
    if model.custom_layers:
        raise ValueError("only config-built models can be saved")
    body = MAGIC + serialize_config(model.config)
    for name in model.param_shapes():
        body += np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def save_weights(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_weights(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFileError(
                f"truncated weight file: need {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads_weights(buf: bytes, expected: ModelConfig | None = None) -> Model:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise WeightFileError("unrecognized format: bad magic at offset 0")
    res, ch, k, nblocks = r.unpack("<IIII", "config header")
    if nblocks > 64:
        raise WeightFileError(f"implausible conv block count {nblocks} at offset {r.pos - 4}")
    blocks = tuple(r.unpack("<II", f"conv block {i}") for i in range(nblocks))
    dense_width, slope = r.unpack("<Id", "dense width / slope")
    try:
        cfg = ModelConfig(res, ch, k, blocks, dense_width, slope)
    except ValueError as exc:
        raise WeightFileError(f"invalid model config in weight file: {exc}") from None
    if expected is not None and expected != cfg:
        raise WeightFileError(f"weight file config {cfg} does not match expected {expected}")
    params = {}
    for name, shape in Model(cfg).param_shapes().items():
        count = int(np.prod(shape))
        raw = r.take(8 * count, name)
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    crc_offset = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(buf):
        raise WeightFileError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}")
    if zlib.crc32(buf[:crc_offset]) != crc:
        raise WeightFileError(f"checksum mismatch at offset {crc_offset}")
    return Model(cfg, params=params)


def load_weights(path, expected: ModelConfig | None = None) -> Model:
    with open(path, "rb") as fh:
        return loads_weights(fh.read(), expected)
