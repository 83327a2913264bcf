"""Network builders: fused capsule network, plain capsule network, Small-VGG.

Parameters are allocated lazily from a generator keyed by (seed, name), so a
model can be constructed and its parameters counted without materialising
tens of millions of floats, and initial values do not depend on the order in
which parameters are touched.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .capsule import (
    LossWeights,
    capsule_lengths,
    capsule_predictions,
    count_parameters,
    dynamic_routing,
    margin_loss,
    one_hot,
    primary_capsules,
    reconstruction_loss,
)
from .io import atomic_write_bytes
from .tensor import Tensor

IMAGE_SHAPE = (120, 160)
CLASS_NAMES = ("no_alcohol", "alcohol")
FILTER_OPTIONS = (64, 128, 256)
KERNEL_OPTIONS = (3, 5, 7, 9, 11)
CHECKPOINT_MAGIC = b"FCAP"
CHECKPOINT_VERSION = 1


class GeometryError(ValueError):
    pass


class Parameter(Tensor):
    """Trainable leaf tensor whose values are drawn on first access."""

    def __init__(self, name: str, shape, fan_in: int, fan_out: int, seed: int, init: str = "glorot"):
        self.name = name
        self._shape = tuple(int(s) for s in shape)
        self._fan = (fan_in, fan_out)
        self._seed = seed
        self._init = init
        self._value = None
        self.requires_grad = True
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ""
        self._consumed = False

    @property
    def data(self) -> np.ndarray:
        if self._value is None:
            if self._init == "zeros":
                self._value = np.zeros(self._shape)
            else:
                rng = T.named_rng(self._seed, self.name)
                self._value = T.glorot_uniform(self._shape, *self._fan, rng)
        return self._value

    @data.setter
    def data(self, value) -> None:
        value = np.asarray(value, dtype=T.DTYPE)
        if value.shape != self._shape:
            raise ValueError(f"parameter {self.name}: shape {self._shape} is fixed, got {value.shape}")
        self._value = value

    @property
    def shape(self):
        return self._shape

    @property
    def size(self) -> int:
        return int(np.prod(self._shape))

    @property
    def ndim(self) -> int:
        return len(self._shape)

    @property
    def materialized(self) -> bool:
        return self._value is not None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self._shape})"


@dataclass(frozen=True)
class FCapsNetConfig:
    """Shared configuration for the fused and the plain capsule networks.

    The fused network uses ``filters``/``kernel_size`` per branch, projects
    each branch to ``branch_channels`` maps and groups the fused maps into
    ``primary_dim``-dimensional capsules. The plain network instead applies a
    3x3 stride-2 primary convolution producing ``num_capsules`` capsule types
    of dimension ``capsule_dim``.
    """

    filters: int = 256
    kernel_size: int = 3
    num_capsules: int = 8
    primary_dim: int = 2
    branch_channels: int = 2
    capsule_dim: int = 16
    dense_width: int = 1024
    routing_iterations: int = 3
    reduction: str = "decimate"
    routing_gradient: str = "full"
    image_shape: tuple[int, int] = IMAGE_SHAPE
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.filters < 1 or self.branch_channels < 1 or self.dense_width < 1 or self.capsule_dim < 1:
            raise ValueError("filters, branch_channels, dense_width and capsule_dim must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if not 1 <= self.routing_iterations <= 5:
            raise ValueError(f"routing_iterations must be in 1..5, got {self.routing_iterations}")
        if self.num_capsules < 1 or self.primary_dim < 1:
            raise ValueError("num_capsules and primary_dim must be positive")
        if (2 * self.branch_channels) % self.primary_dim:
            raise ValueError("fused channel count must be divisible by primary_dim")
        if self.reduction not in ("decimate", "maxpool"):
            raise ValueError(f"reduction must be 'decimate' or 'maxpool', got {self.reduction!r}")
        if self.routing_gradient not in ("full", "last"):
            raise ValueError(f"routing_gradient must be 'full' or 'last', got {self.routing_gradient!r}")


@dataclass(frozen=True)
class SmallVGGConfig:
    filters: tuple[int, int, int] = (32, 32, 32)
    dense_width: int = 7200
    dropout: float = 0.5
    batch_size: int = 16
    epochs: int = 100
    image_shape: tuple[int, int] = IMAGE_SHAPE

    def __post_init__(self):
        if len(self.filters) != 3 or any(int(f) < 1 for f in self.filters):
            raise ValueError(f"Small-VGG needs three positive filter counts, got {self.filters}")
        if self.dense_width < 1:
            raise ValueError("dense_width must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        h, w = self.image_shape
        if h % 8 or w % 8:
            raise GeometryError(f"three 2x2 poolings need image sides divisible by 8, got {h}x{w}")


class CapsOutput(NamedTuple):
    norms: Tensor  # [B, 2]
    capsules: Tensor  # [B, 2, dim]
    reconstruction: Tensor  # [B, H, W]
    features: Tensor  # last feature map before capsule grouping


class Model:
    """Container of named parameters plus a forward pass."""

    architecture = "model"
    conv_layers: tuple[str, ...] = ()

    def __init__(self, config, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self._params: dict[str, Parameter] = {}

    def _param(self, name, shape, fan_in, fan_out, init="glorot") -> Parameter:
        p = Parameter(name, shape, fan_in, fan_out, self.seed, init)
        self._params[name] = p
        return p

    def _conv(self, name, out_ch, in_ch, k) -> tuple[Parameter, Parameter]:
        w = self._param(f"{name}.weight", (out_ch, in_ch, k, k), in_ch * k * k, out_ch * k * k)
        b = self._param(f"{name}.bias", (out_ch,), 0, 0, init="zeros")
        return w, b

    def _dense(self, name, out_dim, in_dim) -> tuple[Parameter, Parameter]:
        w = self._param(f"{name}.weight", (out_dim, in_dim), in_dim, out_dim)
        b = self._param(f"{name}.bias", (out_dim,), 0, 0, init="zeros")
        return w, b

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return count_parameters(self)

    def _check_images(self, images) -> np.ndarray:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=T.DTYPE)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1:] != tuple(self.config.image_shape):
            raise ValueError(f"expected images of shape {tuple(self.config.image_shape)}, got {arr.shape[1:]}")
        return arr

    # subclasses implement: loss_and_scores(images, labels, rng, gate), _scores(batch),
    # feature_map(images, layer), scores_from(layer, features)

    def loss(self, images, labels, rng=None, gate: bool = True) -> Tensor:
        return self.loss_and_scores(images, labels, rng, gate)[0]

    def predict_scores(self, images, batch_size: int = 32) -> np.ndarray:
        arr = self._check_images(images)
        out = []
        with T.no_grad():
            for start in range(0, len(arr), batch_size):
                out.append(self._scores(arr[start : start + batch_size]))
        return np.concatenate(out, axis=0)


class CapsNet(Model):
    """Capsule network with either two class branches (fusion) or one stem."""

    def __init__(self, config: FCapsNetConfig, fusion: bool, seed: int = 0):
        super().__init__(config, seed)
        self.fusion = fusion
        self.architecture = "fcapsnet" if fusion else "capsnet"
        c = config
        H, W = c.image_shape
        k = c.kernel_size
        if k > H or k > W:
            raise GeometryError(f"kernel {k}x{k} does not fit a {H}x{W} image")
        if H % 2 or W % 2:
            raise GeometryError(
                f"conv {k}x{k}, stride 1, same padding keeps {H}x{W}; the stride-2 reduction then gives "
                f"{H / 2:g}x{W / 2:g}, which is not an integral capsule grid"
            )
        self.grid = (H // 2, W // 2)
        gh, gw = self.grid
        if fusion:
            self.conv_layers = ("fused",)
            for branch in CLASS_NAMES:
                self._conv(f"branch_{branch}.conv", c.filters, 1, k)
                self._conv(f"branch_{branch}.project", c.branch_channels, c.filters, 1)
            fused_channels = 2 * c.branch_channels
            self.in_dim = c.primary_dim
            self.num_primary = fused_channels * gh * gw // c.primary_dim
        else:
            self.conv_layers = ("conv1", "primary")
            self._conv("conv1", c.filters, 1, k)
            self._conv("primary", c.num_capsules * c.capsule_dim, c.filters, 3)
            self.in_dim = c.capsule_dim
            self.num_primary = c.num_capsules * gh * gw
        D = c.capsule_dim
        self._param("routing.weight", (self.num_primary, 2, D, self.in_dim), self.num_primary * self.in_dim, D)
        self._dense("decoder.hidden", c.dense_width, 2 * D)
        self._dense("decoder.output", H * W, c.dense_width)

    # -- stages ---------------------------------------------------------------
    def _p(self, name) -> Parameter:
        return self._params[name]

    def _branch(self, x: Tensor, branch: str) -> Tensor:
        c = self.config
        w, b = self._p(f"branch_{branch}.conv.weight"), self._p(f"branch_{branch}.conv.bias")
        if c.reduction == "decimate":
            # stride-2 convolution == stride-1 convolution sampled at even positions
            h = T.relu(T.conv2d(x, w, b, stride=2, padding="same"))
        else:
            h = T.relu(T.maxpool2d(T.conv2d(x, w, b, stride=1, padding="same"), 2))
        return T.conv2d(h, self._p(f"branch_{branch}.project.weight"), self._p(f"branch_{branch}.project.bias"))

    def feature_map(self, images, layer: str | None = None, gate_labels=None) -> Tensor:
        """Feature map named ``layer`` ([B, C, h, w]) for a batch of images."""
        layer = layer or self.conv_layers[-1]
        if layer not in self.conv_layers:
            raise ValueError(f"{layer!r} is not a convolutional layer of {self.architecture}; choose from {self.conv_layers}")
        arr = self._check_images(images)
        x = Tensor(arr[:, None])
        if self.fusion:
            maps = []
            for idx, branch in enumerate(CLASS_NAMES):
                m = self._branch(x, branch)
                if gate_labels is not None:
                    mask = (np.asarray(gate_labels) == idx).astype(float)[:, None, None, None]
                    m = T.gate(m, mask)
                maps.append(m)
            return T.concat(maps, axis=1)
        h = T.relu(T.conv2d(x, self._p("conv1.weight"), self._p("conv1.bias"), padding="same"))
        if layer == "conv1":
            return h
        return self._primary_from_conv1(h)

    def _primary_from_conv1(self, h: Tensor) -> Tensor:
        return T.conv2d(h, self._p("primary.weight"), self._p("primary.bias"), stride=2, padding="same")

    def capsules_from(self, layer: str, features: Tensor):
        if not self.fusion and layer == "conv1":
            features = self._primary_from_conv1(features)
        dim = self.config.primary_dim if self.fusion else self.config.capsule_dim
        u = primary_capsules(features, dim)
        u_hat = capsule_predictions(u, self._p("routing.weight"))
        return dynamic_routing(
            u_hat, self.config.routing_iterations, detach_history=self.config.routing_gradient == "last"
        )

    def scores_from(self, layer: str, features: Tensor) -> Tensor:
        return capsule_lengths(self.capsules_from(layer, features).outputs)

    def decode(self, capsules: Tensor, mask_labels) -> Tensor:
        B, n_out, D = capsules.shape
        mask = np.zeros((B, n_out, D))
        mask[np.arange(B), np.asarray(mask_labels, dtype=int)] = 1.0
        flat = T.reshape(T.mul(capsules, Tensor(mask)), (B, n_out * D))
        hidden = T.relu(T.dense(flat, self._p("decoder.hidden.weight"), self._p("decoder.hidden.bias")))
        out = T.sigmoid(T.dense(hidden, self._p("decoder.output.weight"), self._p("decoder.output.bias")))
        return T.reshape(out, (B,) + tuple(self.config.image_shape))

    def forward(self, images, labels=None, gate: bool = False) -> CapsOutput:
        """Full pass; the decoder is masked by ``labels`` when given, else by the prediction."""
        layer = self.conv_layers[-1]
        feats = self.feature_map(images, layer, gate_labels=labels if (gate and self.fusion) else None)
        state = self.capsules_from(layer, feats)
        norms = capsule_lengths(state.outputs)
        mask_labels = labels if labels is not None else norms.data.argmax(axis=1)
        recon = self.decode(state.outputs, mask_labels)
        return CapsOutput(norms, state.outputs, recon, feats)

    def loss_and_scores(self, images, labels, rng=None, gate: bool = True) -> tuple[Tensor, np.ndarray]:
        """Batch sum of margin loss plus weighted reconstruction loss, and the class scores."""
        arr = self._check_images(images)
        labels = np.asarray(labels, dtype=int)
        out = self.forward(arr, labels=labels, gate=gate)
        total = margin_loss(out.norms, one_hot(labels, 2), self.config.loss)
        if self.config.loss.reconstruction_weight > 0:
            total = T.add(total, reconstruction_loss(out.reconstruction, arr, self.config.loss.reconstruction_weight))
        return total, out.norms.data

    def _scores(self, batch: np.ndarray) -> np.ndarray:
        layer = self.conv_layers[-1]
        return capsule_lengths(self.capsules_from(layer, self.feature_map(batch, layer)).outputs).data


class SmallVGG(Model):
    architecture = "smallvgg"
    conv_layers = ("conv1", "conv2", "conv3")

    def __init__(self, config: SmallVGGConfig, seed: int = 0):
        super().__init__(config, seed)
        c1, c2, c3 = (int(f) for f in config.filters)
        self._conv("conv1", c1, 1, 3)
        self._conv("conv2", c2, c1, 3)
        self._conv("conv3", c3, c2, 3)
        H, W = config.image_shape
        self._dense("dense1", config.dense_width, c3 * (H // 8) * (W // 8))
        self._dense("dense2", 2, config.dense_width)

    def _block(self, x: Tensor, name: str) -> Tensor:
        return T.relu(T.conv2d(x, self._params[f"{name}.weight"], self._params[f"{name}.bias"], padding="same"))

    def feature_map(self, images, layer: str | None = None) -> Tensor:
        layer = layer or self.conv_layers[-1]
        if layer not in self.conv_layers:
            raise ValueError(f"{layer!r} is not a convolutional layer of smallvgg; choose from {self.conv_layers}")
        h = Tensor(self._check_images(images)[:, None])
        for name in self.conv_layers:
            h = self._block(h, name)
            if name == layer:
                return h
            h = T.maxpool2d(h, 2)
        raise AssertionError("unreachable")

    def logits_from(self, layer: str, features: Tensor, rng=None, training: bool = False) -> Tensor:
        h = features
        idx = self.conv_layers.index(layer)
        h = T.maxpool2d(h, 2)
        for name in self.conv_layers[idx + 1 :]:
            h = T.maxpool2d(self._block(h, name), 2)
        rate = self.config.dropout
        h = T.dropout(T.flatten(h), rate, rng, training)
        h = T.relu(T.dense(h, self._params["dense1.weight"], self._params["dense1.bias"]))
        h = T.dropout(h, rate, rng, training)
        return T.dense(h, self._params["dense2.weight"], self._params["dense2.bias"])

    def scores_from(self, layer: str, features: Tensor) -> Tensor:
        return self.logits_from(layer, features)

    def loss_and_scores(self, images, labels, rng=None, gate: bool = True) -> tuple[Tensor, np.ndarray]:
        """Summed cross-entropy and softmax scores; dropout is active when ``rng`` is given."""
        labels = np.asarray(labels, dtype=int)
        feats = self.feature_map(images, "conv1")
        logits = self.logits_from("conv1", feats, rng=rng, training=rng is not None)
        logp = T.log_softmax(logits, axis=1)
        picked = T.mul(logp, one_hot(labels, 2))
        return T.neg(T.tsum(picked)), np.exp(logp.data)

    def _scores(self, batch: np.ndarray) -> np.ndarray:
        logits = self.logits_from("conv1", self.feature_map(batch, "conv1")).data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def build_fcapsnet(config: FCapsNetConfig | None = None, seed: int = 0) -> CapsNet:
    return CapsNet(config or FCapsNetConfig(), fusion=True, seed=seed)


def build_capsnet(config: FCapsNetConfig | None = None, seed: int = 0) -> CapsNet:
    return CapsNet(config or FCapsNetConfig(), fusion=False, seed=seed)


def build_smallvgg(config: SmallVGGConfig | None = None, seed: int = 0) -> SmallVGG:
    return SmallVGG(config or SmallVGGConfig(), seed=seed)


def build_model(architecture: str, config, seed: int = 0) -> Model:
    if architecture == "fcapsnet":
        return build_fcapsnet(config, seed)
    if architecture == "capsnet":
        return build_capsnet(config, seed)
    if architecture == "smallvgg":
        return build_smallvgg(config, seed)
    raise ValueError(f"unknown architecture {architecture!r}")


def classify(model: Model, image) -> tuple[int, np.ndarray]:
    """Label and per-class scores (capsule lengths, or softmax probabilities) for one image."""
    arr = np.asarray(image, dtype=T.DTYPE)
    if arr.shape != tuple(model.config.image_shape):
        raise ValueError(f"classify expects one {tuple(model.config.image_shape)} image, got {arr.shape}")
    scores = model.predict_scores(arr[None])[0]
    return int(np.argmax(scores)), scores


# -- configuration (de)serialisation -----------------------------------------


def config_to_items(config) -> list[tuple[str, str]]:
    items = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            items.extend((f"{f.name}.{k}", v) for k, v in config_to_items(value))
        elif isinstance(value, tuple):
            items.append((f.name, ",".join(str(v) for v in value)))
        else:
            items.append((f.name, repr(value) if isinstance(value, float) else str(value)))
    return items


def config_from_items(cls, items: dict[str, str]):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name == "loss":
            sub = {k.split(".", 1)[1]: v for k, v in items.items() if k.startswith("loss.")}
            kwargs["loss"] = config_from_items(LossWeights, sub)
            continue
        if f.name not in items:
            continue
        raw = items[f.name]
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, tuple):
            kwargs[f.name] = tuple(int(v) for v in raw.split(","))
        elif isinstance(default, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return cls(**kwargs)


def config_class(architecture: str):
    return SmallVGGConfig if architecture == "smallvgg" else FCapsNetConfig


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, key=value config block, then each parameter's float64 values."""
    lines = [f"architecture={model.architecture}", f"seed={model.seed}"]
    lines += [f"{k}={v}" for k, v in config_to_items(model.config)]
    block = "\n".join(lines).encode("utf-8")
    params = model.parameters()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(block)), block]
    chunks.append(struct.pack("<I", len(params)))
    for p in params:
        values = np.ascontiguousarray(p.data, dtype="<f8").reshape(-1)
        chunks.append(struct.pack("<Q", values.size))
        chunks.append(values.tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic at byte 0)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} at byte 4")
    (block_len,) = struct.unpack_from("<I", raw, 8)
    block = raw[12 : 12 + block_len].decode("utf-8")
    items = dict(line.split("=", 1) for line in block.splitlines() if line)
    architecture = items.pop("architecture")
    seed = int(items.pop("seed"))
    model = build_model(architecture, config_from_items(config_class(architecture), items), seed)
    offset = 12 + block_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    params = model.parameters()
    if count != len(params):
        raise ValueError(f"{path}: {count} tensors stored but {architecture} has {len(params)} (byte {offset - 4})")
    for p in params:
        (n,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        if n != p.size:
            raise ValueError(f"{path}: tensor {p.name} has {n} values, expected {p.size} (byte {offset - 8})")
        p.data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(T.DTYPE).reshape(p.shape)
        offset += 8 * n
    return model
