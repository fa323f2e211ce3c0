"""Classifier definitions: a plain MLP and a small conv net.

Parameterized layers (conv and dense) are indexed 1..L in forward order;
activations and pooling carry no parameters and no index. The index is what
depth-weighted gradient aggregation refers to, so it must be unambiguous.

A ParameterSet is treated as immutable while scoring; training owns it
exclusively while updating. Model files are versioned JSON with
full-precision floats, so serialize -> deserialize round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, FormatError, ShapeError
from .rng import derive_rng

MODEL_FORMAT_VERSION = 1

ARCHITECTURES = ("mlp", "small_cnn")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; all shapes are derived from it."""

    architecture: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = (64, 64)
    conv_channels: tuple[int, ...] = (32, 32)
    kernel_size: int = 4
    dense_width: int = 128
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        if self.architecture not in ARCHITECTURES:
            raise DomainError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 2:
            raise DomainError("num_classes must be >= 2")
        if any(v <= 0 for v in self.input_shape):
            raise ShapeError(f"invalid input shape {self.input_shape}")
        if self.architecture == "mlp":
            if len(self.input_shape) != 1:
                raise ShapeError("mlp expects a flat input shape (d,)")
            if any(wd <= 0 for wd in self.hidden):
                raise ShapeError("mlp hidden widths must be positive")
        else:
            if len(self.input_shape) != 3:
                raise ShapeError("small_cnn expects an input shape (c, h, w)")
            layer_plan(self)  # raises if spatial dims collapse


@dataclass(frozen=True)
class LayerSpec:
    name: str
    layer_index: int
    kind: str  # "dense" | "conv"
    weight_shape: tuple[int, ...]
    bias_shape: tuple[int, ...]
    fan_in: int


def layer_plan(config: ModelConfig) -> list[LayerSpec]:
    """Ordered parameterized-layer specs for a config."""
    specs: list[LayerSpec] = []

    def bias_shape(width: int) -> tuple[int, ...]:
        return (width,) if config.use_bias else (0,)

    if config.architecture == "mlp":
        dims = (config.input_shape[0],) + config.hidden + (config.num_classes,)
        for i in range(len(dims) - 1):
            specs.append(
                LayerSpec(
                    name=f"dense{i + 1}",
                    layer_index=i + 1,
                    kind="dense",
                    weight_shape=(dims[i], dims[i + 1]),
                    bias_shape=bias_shape(dims[i + 1]),
                    fan_in=dims[i],
                )
            )
        return specs

    cin, h, w = config.input_shape
    k = config.kernel_size
    idx = 1
    for cout in config.conv_channels:
        if h < k or w < k:
            raise ShapeError(f"conv{idx}: kernel {k}x{k} exceeds feature map {h}x{w}")
        specs.append(
            LayerSpec(
                name=f"conv{idx}",
                layer_index=idx,
                kind="conv",
                weight_shape=(cout, cin, k, k),
                bias_shape=bias_shape(cout),
                fan_in=cin * k * k,
            )
        )
        h, w = h - k + 1, w - k + 1
        cin = cout
        idx += 1
    h, w = h // 2, w // 2
    if h < 1 or w < 1:
        raise ShapeError("feature map collapsed before the dense stage")
    feat = cin * h * w
    specs.append(
        LayerSpec(
            name="dense1",
            layer_index=idx,
            kind="dense",
            weight_shape=(feat, config.dense_width),
            bias_shape=bias_shape(config.dense_width),
            fan_in=feat,
        )
    )
    specs.append(
        LayerSpec(
            name="dense2",
            layer_index=idx + 1,
            kind="dense",
            weight_shape=(config.dense_width, config.num_classes),
            bias_shape=bias_shape(config.num_classes),
            fan_in=config.dense_width,
        )
    )
    return specs


@dataclass
class Layer:
    name: str
    layer_index: int
    kind: str
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class ParameterSet:
    config: ModelConfig
    layers: list[Layer] = field(default_factory=list)

    @property
    def num_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            self.config,
            [Layer(l.name, l.layer_index, l.kind, l.weight.copy(), l.bias.copy()) for l in self.layers],
        )


@dataclass(frozen=True)
class ProbVector:
    """Class-probability vector: entries >= 0 summing to 1 within 1e-9."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or p.size < 2:
            raise ShapeError(f"probability vector must be 1-D with >= 2 entries, got {p.shape}")
        if np.any(p < 0.0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise DomainError("probabilities must be non-negative and sum to 1")

    @property
    def num_classes(self) -> int:
        return self.probs.size

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.probs))  # lowest index wins ties


def init_parameters(config: ModelConfig, seed: int) -> ParameterSet:
    """He-scaled random weights (std sqrt(2/fan_in)), zero biases."""
    layers = []
    for spec in layer_plan(config):
        rng = derive_rng(seed, "init", spec.name)
        weight = rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / spec.fan_in)
        layers.append(Layer(spec.name, spec.layer_index, spec.kind, weight, np.zeros(spec.bias_shape)))
    return ParameterSet(config, layers)


def _check_input(config: ModelConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if config.architecture == "mlp":
        if x.ndim == 1 and x.shape == config.input_shape:
            return x.reshape(1, -1)
        if x.ndim == 2 and x.shape[1] == config.input_shape[0]:
            return x
        raise ShapeError(f"expected input shape {config.input_shape} or (n, {config.input_shape[0]}), got {x.shape}")
    if x.shape != config.input_shape:
        raise ShapeError(f"expected input shape {config.input_shape}, got {x.shape}")
    return x


def make_leaves(params: ParameterSet) -> list[tuple[Tensor, Tensor]]:
    """Leaf tensors for every layer's weight and bias, in layer order."""
    return [(Tensor(layer.weight), Tensor(layer.bias)) for layer in params.layers]


def _forward_parts(
    params: ParameterSet,
    x: Tensor,
    leaves: list[tuple[Tensor, Tensor]],
) -> tuple[Tensor, Tensor]:
    """Returns (pre-final activation, logits); x is already shaped/validated."""
    cfg = params.config
    if cfg.architecture == "mlp":
        t = x
        prefinal = x  # single-layer model: nothing between input and final dense
        for i, (w, b) in enumerate(leaves):
            t = add_rowvec_dense(t, w, b)
            if i < len(leaves) - 1:
                t = ad.relu(t)
                if i == len(leaves) - 2:
                    prefinal = t
        return prefinal, t

    t = x
    conv_count = len(cfg.conv_channels)
    for i in range(conv_count):
        w, b = leaves[i]
        if b.data.size:
            t = ad.relu(ad.conv2d(t, w, b))
        else:
            t = ad.relu(ad.conv2d(t, w, Tensor(np.zeros(w.data.shape[0]))))
    t = ad.maxpool2d(t)
    t = ad.reshape(t, (1, int(np.prod(t.shape))))
    w1, b1 = leaves[conv_count]
    t = prefinal = ad.relu(add_rowvec_dense(t, w1, b1))
    w2, b2 = leaves[conv_count + 1]
    return prefinal, add_rowvec_dense(t, w2, b2)


def add_rowvec_dense(t: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = ad.matmul(t, w)
    return ad.add_rowvec(out, b) if b.data.size else out


def forward_logits(params: ParameterSet, x) -> Tensor:
    """Logits for one input (or a batch, mlp only). The returned tensor
    carries the computation record needed for any subsequent backward."""
    logits, _ = forward_with_leaves(params, x)
    return logits


def forward_with_leaves(params: ParameterSet, x) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
    """Logits plus the parameter leaves to request gradients for.

    x may be a Tensor leaf (kept in the record, e.g. for input gradients)
    or a plain array.
    """
    if isinstance(x, Tensor):
        _check_input(params.config, x.data)
        xt = x
        if params.config.architecture == "mlp" and x.data.ndim == 1:
            xt = ad.reshape(x, (1, x.data.shape[0]))
    else:
        xt = Tensor(_check_input(params.config, x))
    leaves = make_leaves(params)
    _, logits = _forward_parts(params, xt, leaves)
    return logits, leaves


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params: ParameterSet, x) -> ProbVector:
    logits = forward_logits(params, x)
    if logits.data.shape[0] != 1:
        raise ShapeError("predict_proba expects a single input")
    return ProbVector(_stable_softmax(logits.data[0]))


def predict_proba_batch(params: ParameterSet, xs: np.ndarray) -> np.ndarray:
    """Row-wise probabilities for a batch; mlp models only."""
    logits = forward_logits(params, xs)
    return _stable_softmax(logits.data)


# ---------------------------------------------------------------------------
# inserted dropout
# ---------------------------------------------------------------------------


@dataclass
class DropoutModel:
    """A trained model with an extra dropout layer before the final dense
    layer. Masks use inverted scaling (kept units divided by 1 - rate), so
    rate 0 reproduces the clean forward bit-for-bit."""

    params: ParameterSet
    rate: float

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise DomainError(f"dropout rate must be in [0, 1), got {self.rate}")

    def _prefinal(self, x) -> np.ndarray:
        xt = Tensor(_check_input(self.params.config, x))
        leaves = make_leaves(self.params)
        prefinal, _ = _forward_parts(self.params, xt, leaves)
        return prefinal.data

    def stochastic_proba(self, x, rng: np.random.Generator) -> ProbVector:
        h = self._prefinal(x)
        if self.rate > 0.0:
            keep = 1.0 - self.rate
            mask = (rng.random(h.shape) >= self.rate).astype(np.float64)
            h = h * mask / keep
        final = self.params.layers[-1]
        logits = h @ final.weight
        if final.bias.size:
            logits = logits + final.bias[None, :]
        return ProbVector(_stable_softmax(logits[0]))


def insert_dropout(params: ParameterSet, rate: float) -> DropoutModel:
    if not params.layers or params.layers[-1].kind != "dense":
        raise DomainError("model has no final dense layer to precede with dropout")
    return DropoutModel(params, float(rate))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _config_to_dict(config: ModelConfig) -> dict:
    return {
        "architecture": config.architecture,
        "input_shape": list(config.input_shape),
        "num_classes": config.num_classes,
        "hidden": list(config.hidden),
        "conv_channels": list(config.conv_channels),
        "kernel_size": config.kernel_size,
        "dense_width": config.dense_width,
        "use_bias": config.use_bias,
    }


def _config_from_dict(doc: dict) -> ModelConfig:
    required = {
        "architecture",
        "input_shape",
        "num_classes",
        "hidden",
        "conv_channels",
        "kernel_size",
        "dense_width",
        "use_bias",
    }
    missing = required - doc.keys()
    if missing:
        raise FormatError(f"model config missing keys: {sorted(missing)}")
    unknown = doc.keys() - required
    if unknown:
        raise FormatError(f"model config has unknown keys: {sorted(unknown)}")
    return ModelConfig(
        architecture=doc["architecture"],
        input_shape=tuple(doc["input_shape"]),
        num_classes=int(doc["num_classes"]),
        hidden=tuple(doc["hidden"]),
        conv_channels=tuple(doc["conv_channels"]),
        kernel_size=int(doc["kernel_size"]),
        dense_width=int(doc["dense_width"]),
        use_bias=bool(doc["use_bias"]),
    )


def serialize_model(params: ParameterSet, path: str) -> None:
    entries = []
    for layer in params.layers:
        for tag, arr in (("weight", layer.weight), ("bias", layer.bias)):
            entries.append(
                {
                    "name": f"{layer.name}.{tag}",
                    "layer_index": layer.layer_index,
                    "shape": list(arr.shape),
                    "data": arr.reshape(-1).tolist(),
                }
            )
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": _config_to_dict(params.config),
        "layers": entries,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def deserialize_model(path: str) -> ParameterSet:
    if not os.path.exists(path):
        raise FormatError(f"model file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise FormatError("model file missing format_version")
    if doc["format_version"] != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {doc['format_version']}")
    if "config" not in doc or "layers" not in doc:
        raise FormatError("model file missing config or layers")
    config = _config_from_dict(doc["config"])
    plan = layer_plan(config)
    expected = []
    for spec in plan:
        expected.append((f"{spec.name}.weight", spec, "weight"))
        expected.append((f"{spec.name}.bias", spec, "bias"))
    entries = doc["layers"]
    if len(entries) != len(expected):
        raise FormatError(f"model file has {len(entries)} tensors, expected {len(expected)}")
    tensors: dict[str, np.ndarray] = {}
    for entry, (name, spec, tag) in zip(entries, expected):
        if entry.get("name") != name:
            raise FormatError(f"unexpected tensor {entry.get('name')!r}, expected {name!r}")
        if int(entry.get("layer_index", -1)) != spec.layer_index:
            raise FormatError(f"tensor {name}: layer_index {entry.get('layer_index')} != {spec.layer_index}")
        shape = tuple(entry.get("shape", ()))
        want = spec.weight_shape if tag == "weight" else spec.bias_shape
        if shape != want:
            raise FormatError(f"tensor {name}: shape {shape} != {want}")
        data = np.asarray(entry.get("data", []), dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise FormatError(f"tensor {name}: {data.size} values for shape {shape}")
        tensors[name] = data.reshape(shape)
    layers = [
        Layer(spec.name, spec.layer_index, spec.kind, tensors[f"{spec.name}.weight"], tensors[f"{spec.name}.bias"])
        for spec in plan
    ]
    return ParameterSet(config, layers)
