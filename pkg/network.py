"""
Declarative layer graph, forward/backward execution and training loop.

A network is a linear chain of LayerSpec entries (fire modules branch
internally). Parameters live in a flat name -> array map on ModelState, e.g.
"conv1.weight", "fire1.expand3x3.bias", "bn1.running_var".
"""

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from chunker import print_chunk_statistics, shuffled_chunks
from dataset import PatchSet
from errors import ConfigError, DatasetError, DimensionError, UnknownLayerError
from raster import write_pixels
from stats import print_epoch_progress
from tensor_ops import (
    AdamState,
    BatchNormParams,
    ConvParams,
    Tensor,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    bce_loss,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    maxpool3x3,
    maxpool_backward,
    relu,
    relu_backward,
    softmax,
)

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "maxpool", "fire", "batchnorm", "flatten", "dense", "relu", "softmax")

# kind-specific fields carried by LayerSpec (serialized in this order)
KIND_FIELDS = {
    "conv": ("in_channels", "out_channels", "kernel", "stride", "padding"),
    "maxpool": ("stride",),
    "fire": ("in_channels", "squeeze", "expand1x1", "expand3x3"),
    "batchnorm": ("channels",),
    "flatten": (),
    "dense": ("in_features", "units"),
    "relu": (),
    "softmax": (),
}

FIRE_BRANCHES = ("squeeze", "expand1x1", "expand3x3")
BN_TRAINABLE = ("gamma", "beta")
BN_RUNNING = ("running_mean", "running_var")


@dataclass
class LayerSpec:
    """
    One layer of the chain.

    Attributes:
        kind: One of LAYER_KINDS
        name: Unique layer name (auto-assigned when empty)
        in_channels / out_channels / kernel / stride / padding: conv fields
        squeeze / expand1x1 / expand3x3: fire widths (output = expand1x1 + expand3x3)
        channels: batchnorm channel count
        in_features / units: dense fields
    """

    kind: str
    name: str = ""
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    squeeze: Optional[int] = None
    expand1x1: Optional[int] = None
    expand3x3: Optional[int] = None
    channels: Optional[int] = None
    in_features: Optional[int] = None
    units: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary holding only the fields of this kind."""
        data: Dict[str, Any] = {"kind": self.kind, "name": self.name}
        for key in KIND_FIELDS.get(self.kind, ()):
            data[key] = getattr(self, key)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LayerSpec':
        """Create LayerSpec from dictionary."""
        kind = data.get("kind")
        if kind not in KIND_FIELDS:
            raise ConfigError(f"Unknown layer kind '{kind}' (expected one of {', '.join(LAYER_KINDS)})")
        extra = set(data) - set(KIND_FIELDS[kind]) - {"kind", "name"}
        if extra:
            raise ConfigError(f"Layer '{data.get('name', kind)}': unexpected fields {sorted(extra)}")
        return cls(**data)


@dataclass
class NetworkConfig:
    """
    Declarative network description.

    Attributes:
        input_shape: Per-sample input (channels, height, width)
        layers: Ordered layer list; must end with softmax over class_count outputs
        class_count: Number of output classes (2)
    """

    input_shape: Tuple[int, int, int]
    layers: List[LayerSpec]
    class_count: int = 2

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        seen = set()
        for idx, spec in enumerate(self.layers):
            if not spec.name:
                spec.name = f"{spec.kind}{idx}"
            if spec.name in seen:
                raise ConfigError(f"Duplicate layer name '{spec.name}'")
            seen.add(spec.name)

    @property
    def layer_names(self) -> List[str]:
        return [spec.name for spec in self.layers]

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise UnknownLayerError(f"Unknown layer '{name}'; valid layers: {', '.join(self.layer_names)}")

    def output_shapes(self) -> List[Tuple[int, ...]]:
        """
        Statically check the chain and return each layer's per-sample output shape.

        Raises:
            ConfigError: If any layer's declared input does not match its predecessor
        """
        if self.class_count != 2:
            raise ConfigError(f"Only two-class heads are supported, got class_count={self.class_count}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ConfigError("The last layer must be softmax")

        shape: Tuple[int, ...] = self.input_shape
        shapes = []
        for idx, spec in enumerate(self.layers):
            shape = _infer_layer_shape(spec, shape, is_last=idx == len(self.layers) - 1)
            shapes.append(shape)
        if shape != (self.class_count,):
            raise ConfigError(f"Network output shape {shape} != ({self.class_count},)")
        return shapes

    def param_shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        """Parameter names and shapes in layer order."""
        shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        for spec in self.layers:
            for name, shape in _layer_param_shapes(spec):
                shapes[name] = shape
        return shapes

    def to_dict(self) -> Dict[str, Any]:
        """Convert to the JSON layout stored in model files."""
        return {
            "input": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [spec.to_dict() for spec in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NetworkConfig':
        """Create NetworkConfig from its JSON layout and shape-check it."""
        try:
            config = cls(
                input_shape=tuple(data["input"]),
                layers=[LayerSpec.from_dict(item) for item in data["layers"]],
                class_count=data.get("class_count", 2),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Malformed network config: {e}") from e
        config.output_shapes()
        return config


def _require(spec: LayerSpec, *keys: str) -> None:
    for key in keys:
        value = getattr(spec, key)
        if value is None or value < 1:
            raise ConfigError(f"Layer '{spec.name}' ({spec.kind}) needs a positive '{key}'")


def _infer_layer_shape(spec: LayerSpec, shape: Tuple[int, ...], is_last: bool) -> Tuple[int, ...]:
    kind = spec.kind
    if kind not in KIND_FIELDS:
        raise ConfigError(f"Unknown layer kind '{kind}'")
    if kind == "softmax" and not is_last:
        raise ConfigError(f"softmax layer '{spec.name}' must be the last layer")

    if kind in ("conv", "maxpool", "fire", "batchnorm") and len(shape) != 3:
        raise ConfigError(f"Layer '{spec.name}' ({kind}) needs a (C, H, W) input, got {shape}")
    if kind in ("dense", "softmax") and len(shape) != 1:
        raise ConfigError(f"Layer '{spec.name}' ({kind}) needs a flat input; add a flatten layer (got {shape})")

    if kind == "conv":
        _require(spec, "in_channels", "out_channels", "kernel", "stride")
        c, h, w = shape
        if c != spec.in_channels:
            raise ConfigError(f"Layer '{spec.name}': expects {spec.in_channels} input channels, predecessor gives {c}")
        if spec.padding < 0:
            raise ConfigError(f"Layer '{spec.name}': padding must be >= 0")
        hp, wp = h + 2 * spec.padding, w + 2 * spec.padding
        if hp < spec.kernel or wp < spec.kernel:
            raise ConfigError(f"Layer '{spec.name}': input {h}x{w} too small for kernel {spec.kernel}")
        return (spec.out_channels, (hp - spec.kernel) // spec.stride + 1, (wp - spec.kernel) // spec.stride + 1)

    if kind == "maxpool":
        _require(spec, "stride")
        c, h, w = shape
        if h < 3 or w < 3:
            raise ConfigError(f"Layer '{spec.name}': input {h}x{w} smaller than the 3x3 pool window")
        return (c, (h - 3) // spec.stride + 1, (w - 3) // spec.stride + 1)

    if kind == "fire":
        _require(spec, "in_channels", "squeeze", "expand1x1", "expand3x3")
        c, h, w = shape
        if c != spec.in_channels:
            raise ConfigError(f"Layer '{spec.name}': expects {spec.in_channels} input channels, predecessor gives {c}")
        return (spec.expand1x1 + spec.expand3x3, h, w)

    if kind == "batchnorm":
        _require(spec, "channels")
        if shape[0] != spec.channels:
            raise ConfigError(f"Layer '{spec.name}': expects {spec.channels} channels, predecessor gives {shape[0]}")
        return shape

    if kind == "flatten":
        return (int(np.prod(shape)),)

    if kind == "dense":
        _require(spec, "in_features", "units")
        if shape[0] != spec.in_features:
            raise ConfigError(f"Layer '{spec.name}': expects {spec.in_features} features, predecessor gives {shape[0]}")
        return (spec.units,)

    return shape  # relu, softmax


def _layer_param_shapes(spec: LayerSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    if spec.kind == "conv":
        return [
            (f"{spec.name}.weight", (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)),
            (f"{spec.name}.bias", (spec.out_channels,)),
        ]
    if spec.kind == "fire":
        return [
            (f"{spec.name}.squeeze.weight", (spec.squeeze, spec.in_channels, 1, 1)),
            (f"{spec.name}.squeeze.bias", (spec.squeeze,)),
            (f"{spec.name}.expand1x1.weight", (spec.expand1x1, spec.squeeze, 1, 1)),
            (f"{spec.name}.expand1x1.bias", (spec.expand1x1,)),
            (f"{spec.name}.expand3x3.weight", (spec.expand3x3, spec.squeeze, 3, 3)),
            (f"{spec.name}.expand3x3.bias", (spec.expand3x3,)),
        ]
    if spec.kind == "batchnorm":
        return [(f"{spec.name}.{key}", (spec.channels,)) for key in BN_TRAINABLE + BN_RUNNING]
    if spec.kind == "dense":
        return [
            (f"{spec.name}.weight", (spec.units, spec.in_features)),
            (f"{spec.name}.bias", (spec.units,)),
        ]
    return []


def squeezenet_config(
    input_size: int = 20,
    channels: int = 3,
    conv1_filters: int = 32,
    fire_squeeze: int = 16,
    fire_expand1x1: int = 64,
    fire_expand3x3: int = 64,
    fire_count: int = 2,
    dense_units: int = 56
) -> NetworkConfig:
    """
    Build the default SqueezeNet-style binary classifier.

    Conv 3x3 (pad 1) -> ReLU -> MaxPool s2 -> Fire x fire_count -> MaxPool s2
    -> BatchNorm -> Flatten -> Dense -> ReLU -> Dense(2) -> Softmax.
    The 20x20 and 30x30 presets share this layer list; only the flatten size
    differs.
    """
    fire_out = fire_expand1x1 + fire_expand3x3
    layers = [
        LayerSpec("conv", "conv1", in_channels=channels, out_channels=conv1_filters, kernel=3, padding=1),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1", stride=2),
    ]
    fire_in = conv1_filters
    for i in range(fire_count):
        layers.append(LayerSpec("fire", f"fire{i + 1}", in_channels=fire_in, squeeze=fire_squeeze,
                                expand1x1=fire_expand1x1, expand3x3=fire_expand3x3))
        fire_in = fire_out
    layers += [
        LayerSpec("maxpool", "pool2", stride=2),
        LayerSpec("batchnorm", "bn1", channels=fire_in),
        LayerSpec("flatten", "flatten"),
    ]

    # flatten size depends on the input extent
    shape: Tuple[int, ...] = (channels, input_size, input_size)
    for spec in layers:
        shape = _infer_layer_shape(spec, shape, is_last=False)
    layers += [
        LayerSpec("dense", "dense1", in_features=shape[0], units=dense_units),
        LayerSpec("relu", "relu2"),
        LayerSpec("dense", "dense2", in_features=dense_units, units=2),
        LayerSpec("softmax", "softmax"),
    ]
    config = NetworkConfig(input_shape=(channels, input_size, input_size), layers=layers)
    config.output_shapes()
    return config


def config_from_settings(settings) -> NetworkConfig:
    """Build the default network from config.NetworkSettings."""
    return squeezenet_config(
        input_size=settings.input_size,
        channels=settings.channels,
        conv1_filters=settings.conv1_filters,
        fire_squeeze=settings.fire_squeeze,
        fire_expand1x1=settings.fire_expand1x1,
        fire_expand3x3=settings.fire_expand3x3,
        fire_count=settings.fire_count,
        dense_units=settings.dense_units,
    )


@dataclass
class ModelState:
    """
    Network configuration plus parameter values.

    Attributes:
        config: Network description
        parameters: Name -> float32 array, including batch-norm running stats
        metadata: Training metadata (epochs, seed, ...)
    """

    config: NetworkConfig
    parameters: Dict[str, Tensor]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def trainable_names(self) -> List[str]:
        """Parameter names updated by the optimizer (everything except running stats)."""
        return [name for name in self.parameters if not name.endswith(BN_RUNNING)]

    def owner(self, name: str) -> str:
        """Layer name owning a parameter."""
        layer = name.split(".", 1)[0]
        self.config.layer(layer)
        return layer

    def parameter_bytes(self) -> int:
        """Total float parameter bytes (running stats included)."""
        return int(sum(p.nbytes for p in self.parameters.values()))

    def copy(self) -> 'ModelState':
        """Deep copy of parameters; config is shared (treated as immutable)."""
        return ModelState(
            config=self.config,
            parameters=OrderedDict((k, v.copy()) for k, v in self.parameters.items()),
            metadata=dict(self.metadata),
        )


@dataclass
class TrainingConfig:
    """
    Training settings.

    Attributes:
        lr: Adam learning rate
        batch_size: Mini-batch size; the last partial batch is kept
        epochs: Number of passes over the data
        seed: Seed for shuffling
        shuffle: Shuffle before every epoch
    """

    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 20
    seed: int = 42
    shuffle: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochRecord:
    """Loss and accuracy of one training epoch."""

    epoch: int
    loss: float
    accuracy: float
    samples: int

    def to_dict(self) -> Dict[str, Any]:
        return {"epoch": self.epoch, "loss": self.loss, "accuracy": self.accuracy, "samples": self.samples}


@dataclass
class TrainingLog:
    """Per-epoch training history."""

    epochs: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.epochs.append(record)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.epochs]

    def to_dict(self) -> Dict[str, Any]:
        return {"epochs": [r.to_dict() for r in self.epochs]}


def init_model(config: NetworkConfig, seed: int = 42) -> ModelState:
    """
    Randomly initialize a model.

    Conv and dense weights use He-uniform fan-in scaling; biases are zero;
    batch norm starts as the identity (gamma=1, beta=0, mean=0, var=1).
    """
    config.output_shapes()
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in config.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            limit = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif name.endswith((".gamma", ".running_var")):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return ModelState(config=config, parameters=params, metadata={"epochs": 0, "seed": seed})


def zero_model(config: NetworkConfig) -> ModelState:
    """Model with all weights and biases zero and identity batch norm."""
    model = init_model(config, seed=0)
    for name, value in model.parameters.items():
        if name.endswith(".weight") or name.endswith(".bias"):
            value[...] = 0
    return model


# ---------------------------------------------------------------------------
# Layer helpers
# ---------------------------------------------------------------------------

def _conv_params(model: ModelState, prefix: str, stride: int = 1, padding: int = 0) -> ConvParams:
    p = model.parameters
    return ConvParams(weights=p[f"{prefix}.weight"], bias=p[f"{prefix}.bias"], stride=stride, padding=padding)


def _bn_params(model: ModelState, name: str) -> BatchNormParams:
    p = model.parameters
    return BatchNormParams(
        gamma=p[f"{name}.gamma"], beta=p[f"{name}.beta"],
        running_mean=p[f"{name}.running_mean"], running_var=p[f"{name}.running_var"],
    )


def _fire_params(model: ModelState, name: str) -> Tuple[ConvParams, ConvParams, ConvParams]:
    return (
        _conv_params(model, f"{name}.squeeze"),
        _conv_params(model, f"{name}.expand1x1"),
        _conv_params(model, f"{name}.expand3x3", padding=1),
    )


def _check_fire(squeeze: ConvParams, expand1: ConvParams, expand3: ConvParams) -> None:
    if squeeze.kernel != (1, 1) or expand1.kernel != (1, 1) or expand3.kernel != (3, 3):
        raise DimensionError("fire module needs 1x1 squeeze, 1x1 expand and 3x3 expand kernels")
    if expand3.padding != 1:
        raise DimensionError("fire 3x3 expand branch must use padding 1")
    for branch in (expand1, expand3):
        if branch.in_channels != squeeze.out_channels:
            raise DimensionError(
                f"fire expand branch expects {branch.in_channels} channels, squeeze gives {squeeze.out_channels}"
            )


def _fire_forward_cached(input, squeeze, expand1, expand3):
    _check_fire(squeeze, expand1, expand3)
    s_pre = conv2d_forward(input, squeeze)
    s_act = relu(s_pre)
    e1_pre = conv2d_forward(s_act, expand1)
    e3_pre = conv2d_forward(s_act, expand3)
    out = np.concatenate([relu(e1_pre), relu(e3_pre)], axis=1)
    return out, (s_pre, s_act, e1_pre, e3_pre)


def fire_forward(input: Tensor, squeeze: ConvParams, expand1: ConvParams, expand3: ConvParams) -> Tensor:
    """
    Fire module: ReLU(squeeze 1x1) feeding [ReLU(expand 1x1) || ReLU(expand 3x3, pad 1)].

    Args:
        input: Tensor (N, C, H, W)
        squeeze: 1x1 squeeze convolution
        expand1: 1x1 expand convolution
        expand3: 3x3 expand convolution with padding 1

    Returns:
        Tensor (N, expand1_out + expand3_out, H, W)
    """
    return _fire_forward_cached(input, squeeze, expand1, expand3)[0]


def fire_backward(input, squeeze, expand1, expand3, cache, grad_out):
    """Gradients of a fire module; returns (grad_input, {branch: (grad_w, grad_b)})."""
    s_pre, s_act, e1_pre, e3_pre = cache
    split = expand1.out_channels
    g1 = relu_backward(e1_pre, grad_out[:, :split])
    g3 = relu_backward(e3_pre, grad_out[:, split:])
    ds1, gw1, gb1 = conv2d_backward(s_act, expand1, g1)
    ds3, gw3, gb3 = conv2d_backward(s_act, expand3, g3)
    ds = relu_backward(s_pre, ds1 + ds3)
    dx, gws, gbs = conv2d_backward(input, squeeze, ds)
    return dx, {"squeeze": (gws, gbs), "expand1x1": (gw1, gb1), "expand3x3": (gw3, gb3)}


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Per-layer inputs and auxiliary values kept by a train-mode forward pass."""

    entries: List[Tuple[LayerSpec, Tensor, Any]]
    logits: Tensor


def _check_batch(model: ModelState, batch: Tensor) -> None:
    expected = tuple(model.config.input_shape)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise DimensionError(f"batch shape {batch.shape} does not match (N, {', '.join(map(str, expected))})")


def _run_layers(
    model: ModelState,
    batch: Tensor,
    mode: str,
    keep_cache: bool,
    capture: Optional[Dict[str, Tensor]] = None
) -> Tuple[Tensor, Optional[ForwardCache]]:
    _check_batch(model, batch)
    entries: List[Tuple[LayerSpec, Tensor, Any]] = []
    x = batch
    logits = None
    for spec in model.config.layers:
        aux = None
        x_in = x
        if spec.kind == "conv":
            x = conv2d_forward(x, _conv_params(model, spec.name, spec.stride, spec.padding))
        elif spec.kind == "maxpool":
            x, aux = maxpool3x3(x, spec.stride)
        elif spec.kind == "fire":
            x, aux = _fire_forward_cached(x, *_fire_params(model, spec.name))
        elif spec.kind == "batchnorm":
            x = batchnorm_forward(x, _bn_params(model, spec.name), mode)
        elif spec.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif spec.kind == "dense":
            p = model.parameters
            x = dense_forward(x, p[f"{spec.name}.weight"], p[f"{spec.name}.bias"])
        elif spec.kind == "relu":
            x = relu(x)
        elif spec.kind == "softmax":
            logits = x
            x = softmax(x)
        if keep_cache:
            entries.append((spec, x_in, aux))
        if capture is not None:
            capture[spec.name] = x
    cache = ForwardCache(entries=entries, logits=logits) if keep_cache else None
    return x, cache


def forward(model: ModelState, batch: Tensor, mode: str = "infer") -> Tuple[Tensor, Optional[ForwardCache]]:
    """
    Run the network.

    Args:
        model: Model to run
        batch: Tensor (N, C, H, W) matching the config input
        mode: "train" (batch statistics, running stats updated, cache kept)
            or "infer" (running statistics, deterministic, no cache)

    Returns:
        Tuple of (class probabilities (N, 2), cache or None)
    """
    if mode not in ("train", "infer"):
        raise ValueError(f'Invalid forward mode "{mode}"')
    return _run_layers(model, batch, mode, keep_cache=mode == "train")


def predict_scores(model: ModelState, batch: Tensor) -> np.ndarray:
    """Positive-class probability for each sample (infer mode)."""
    probs, _ = forward(model, batch, "infer")
    return probs[:, 1]


def layer_outputs(model: ModelState, batch: Tensor, mode: str = "infer") -> Dict[str, Tensor]:
    """Output of every layer, keyed by layer name."""
    capture: Dict[str, Tensor] = {}
    _run_layers(model, batch, mode, keep_cache=False, capture=capture)
    return capture


def backward(model: ModelState, cache: ForwardCache, grad_logits: Tensor) -> Dict[str, Tensor]:
    """
    Backpropagate a gradient w.r.t. the logits (softmax input).

    Args:
        model: Model used for the forward pass
        cache: Cache from a train-mode forward
        grad_logits: Gradient of the loss w.r.t. the logits, shape (N, 2)

    Returns:
        Gradient for every trainable parameter, keyed by name
    """
    grads: Dict[str, Tensor] = {}
    g = grad_logits
    p = model.parameters
    for spec, x_in, aux in reversed(cache.entries):
        if spec.kind == "softmax":
            continue
        if spec.kind == "conv":
            g, gw, gb = conv2d_backward(x_in, _conv_params(model, spec.name, spec.stride, spec.padding), g)
            grads[f"{spec.name}.weight"], grads[f"{spec.name}.bias"] = gw, gb
        elif spec.kind == "maxpool":
            g = maxpool_backward(aux, g)
        elif spec.kind == "fire":
            g, branch_grads = fire_backward(x_in, *_fire_params(model, spec.name), aux, g)
            for branch, (gw, gb) in branch_grads.items():
                grads[f"{spec.name}.{branch}.weight"], grads[f"{spec.name}.{branch}.bias"] = gw, gb
        elif spec.kind == "batchnorm":
            g, gg, gbeta = batchnorm_backward(x_in, _bn_params(model, spec.name), g)
            grads[f"{spec.name}.gamma"], grads[f"{spec.name}.beta"] = gg, gbeta
        elif spec.kind == "flatten":
            g = g.reshape(x_in.shape)
        elif spec.kind == "dense":
            g, gw, gb = dense_backward(x_in, p[f"{spec.name}.weight"], g)
            grads[f"{spec.name}.weight"], grads[f"{spec.name}.bias"] = gw, gb
        elif spec.kind == "relu":
            g = relu_backward(x_in, g)
    return grads


def loss_and_grads(model: ModelState, batch: Tensor, labels: np.ndarray) -> Tuple[float, Tensor, Dict[str, Tensor]]:
    """
    Train-mode forward, BCE loss and backward in one call.

    Returns:
        Tuple of (loss, probabilities, parameter gradients)
    """
    probs, cache = forward(model, batch, "train")
    loss, grad_logits = bce_loss(probs, labels)
    return loss, probs, backward(model, cache, grad_logits)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def frozen_parameter_names(model: ModelState, freeze_until: Optional[str]) -> List[str]:
    """Parameters of every layer up to and including freeze_until."""
    if not freeze_until:
        return []
    model.config.layer(freeze_until)
    frozen_layers = []
    for spec in model.config.layers:
        frozen_layers.append(spec.name)
        if spec.name == freeze_until:
            break
    return [name for name in model.parameters if name.split(".", 1)[0] in frozen_layers]


def train(
    model: ModelState,
    dataset: PatchSet,
    cfg: TrainingConfig,
    verbose: bool = False,
    very_verbose: bool = False,
    frozen: Sequence[str] = ()
) -> Tuple[ModelState, TrainingLog]:
    """
    Train with Adam on mini-batches of BCE loss.

    Args:
        model: Model to train (updated in place)
        dataset: Labeled patches at the model's input size
        cfg: Training settings
        verbose: Print one progress line per epoch
        very_verbose: Also print per-batch losses
        frozen: Parameter names to keep fixed

    Returns:
        Tuple of (trained model, per-epoch loss/accuracy log)

    Raises:
        DatasetError: If the dataset is empty
    """
    n = len(dataset)
    if n == 0:
        raise DatasetError("Cannot train on an empty dataset")
    _check_batch(model, dataset.patches[:1])

    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    trainable = [name for name in model.trainable_names() if name not in set(frozen)]
    log = TrainingLog()

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        batches = shuffled_chunks(n, cfg.batch_size, rng, cfg.shuffle)
        if very_verbose and epoch == 0:
            print_chunk_statistics(batches)
        total_loss = 0.0
        correct = 0
        for b, idx in enumerate(batches):
            x = dataset.patches[idx]
            y = dataset.labels[idx]
            loss, probs, grads = loss_and_grads(model, x, y)
            adam_step(model.parameters, {name: grads[name] for name in trainable}, state)
            total_loss += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y).sum())
            if very_verbose:
                print(f"    batch {b + 1}/{len(batches)}: loss {loss:.6f}")
            logger.debug("epoch %d batch %d loss %.6f", epoch + 1, b + 1, loss)

        record = EpochRecord(epoch=epoch + 1, loss=total_loss / n, accuracy=correct / n, samples=n)
        log.append(record)
        if verbose:
            print_epoch_progress(record, cfg.epochs, time.perf_counter() - start)

    model.metadata["epochs"] = int(model.metadata.get("epochs", 0)) + cfg.epochs
    model.metadata["seed"] = cfg.seed
    model.metadata["lr"] = cfg.lr
    model.metadata["batch_size"] = cfg.batch_size
    return model, log


# ---------------------------------------------------------------------------
# Activation maps
# ---------------------------------------------------------------------------

@dataclass
class ActivationGrid:
    """Tiled activation maps of one layer."""

    layer: str
    grid: np.ndarray  # (H, W) uint8
    tiles: int
    tile_shape: Tuple[int, int]
    columns: int


def tile_activations(maps: np.ndarray) -> Tuple[np.ndarray, int]:
    """
    Normalize each channel map to [0, 255] and tile them into one image.

    Constant maps become 0. Tiles are separated by a 1-pixel 0-valued gap.

    Args:
        maps: Array (C, H, W)

    Returns:
        Tuple of (uint8 grid, number of columns)
    """
    c, h, w = maps.shape
    columns = int(math.ceil(math.sqrt(c)))
    rows = int(math.ceil(c / columns))
    grid = np.zeros((rows * (h + 1) - 1, columns * (w + 1) - 1), dtype=np.uint8)
    for i in range(c):
        m = maps[i].astype(np.float64)
        lo, hi = m.min(), m.max()
        tile = np.zeros((h, w), dtype=np.float64) if hi <= lo else (m - lo) / (hi - lo) * 255.0
        r, col = divmod(i, columns)
        grid[r * (h + 1):r * (h + 1) + h, col * (w + 1):col * (w + 1) + w] = np.rint(tile).astype(np.uint8)
    return grid, columns


def dump_activations(model: ModelState, sample: Tensor, layer_name: str, path: Optional[str] = None) -> ActivationGrid:
    """
    Write the per-channel activation maps of one layer as a grayscale raster.

    Args:
        model: Model to run (infer mode)
        sample: One sample (C, H, W) or a batch of one
        layer_name: Layer whose output is dumped
        path: Output PGM path (skipped when None)

    Returns:
        ActivationGrid with one tile per output channel

    Raises:
        UnknownLayerError: Layer does not exist (message lists valid names)
    """
    model.config.layer(layer_name)
    batch = sample[None] if sample.ndim == 3 else sample
    out = layer_outputs(model, batch, "infer")[layer_name][0]
    maps = out if out.ndim == 3 else out.reshape(-1, 1, 1)
    grid, columns = tile_activations(maps)
    if path:
        write_pixels(grid[:, :, None], path)
    return ActivationGrid(layer=layer_name, grid=grid, tiles=maps.shape[0],
                          tile_shape=(maps.shape[1], maps.shape[2]), columns=columns)
