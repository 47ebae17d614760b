"""Desk-scale neural network core.

Dense and convolutional layers over float64 ``numpy`` arrays, with exact
reverse-mode gradients, a feature-extractor / classifier split and two task
losses (cross-entropy and Dice).

Parameters live in a ``ParameterSet``: a plain ``dict`` mapping parameter names
to arrays, always kept in sorted-name order. Names encode the model position::

    features.00.weight          feature layer 0
    head.01.bias                single-head classifier layer 1
    heads.03.00.weight          classifier layer 0 of head 3 (multi-head)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import AlignmentError, ConfigurationError, DataError, NumericalError

ParameterSet = Dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# Layer, head and loss specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    seed: int = 0


@dataclass(frozen=True)
class Conv2D:
    """Valid (unpadded) stride-1 convolution over ``(channels, height, width)``."""

    in_channels: int
    out_channels: int
    kernel_size: int
    seed: int = 0


@dataclass(frozen=True)
class MaxPool2D:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    kernel_size: int
    seed: int = 0


@dataclass(frozen=True)
class ReLU:
    seed: int = 0


@dataclass(frozen=True)
class Flatten:
    seed: int = 0


LayerSpec = Union[Dense, Conv2D, MaxPool2D, ReLU, Flatten]
_PARAMETERIZED = (Dense, Conv2D)


@dataclass(frozen=True)
class SingleHead:
    """One classifier shared by every center."""

    @property
    def num_heads(self) -> int:
        return 1


@dataclass(frozen=True)
class MultiHead:
    """One identically shaped classifier per center on a shared feature extractor."""

    num_centers: int

    @property
    def num_heads(self) -> int:
        return self.num_centers


HeadSetting = Union[SingleHead, MultiHead]


@dataclass(frozen=True)
class CrossEntropy:
    """Softmax cross-entropy on class-index labels (softmax folded in via log-sum-exp)."""


@dataclass(frozen=True)
class Dice:
    """Soft Dice loss on sigmoid outputs against binary masks."""

    smoothing: float = 1.0

    def __post_init__(self):
        if not self.smoothing > 0:
            raise ConfigurationError("Dice smoothing must be positive")


LossKind = Union[CrossEntropy, Dice]


def _output_shape(layer: LayerSpec, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise AlignmentError(f"Dense expects input shape ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise AlignmentError(
                f"Conv2D expects ({layer.in_channels}, H, W) input, got {shape}"
            )
        k = layer.kernel_size
        if shape[1] < k or shape[2] < k:
            raise AlignmentError(f"Conv2D kernel {k} larger than input {shape}")
        return (layer.out_channels, shape[1] - k + 1, shape[2] - k + 1)
    if isinstance(layer, MaxPool2D):
        k = layer.kernel_size
        if len(shape) != 3 or shape[1] < k or shape[2] < k:
            raise AlignmentError(f"MaxPool2D({k}) cannot pool input shape {shape}")
        return (shape[0], shape[1] // k, shape[2] // k)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise ConfigurationError(f"unknown layer kind: {layer!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a model: feature extractor, classifier head(s) and head setting.

    ``input_shape`` is the shape of one instance (batch dimension excluded).
    Layer dimensions are checked on construction.
    """

    input_shape: Tuple[int, ...]
    feature_layers: Tuple[LayerSpec, ...]
    head_layers: Tuple[LayerSpec, ...]
    head_setting: HeadSetting = SingleHead()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "feature_layers", tuple(self.feature_layers))
        object.__setattr__(self, "head_layers", tuple(self.head_layers))
        if not self.head_layers:
            raise ConfigurationError("a model needs at least one head layer")
        if self.head_setting.num_heads < 1:
            raise ConfigurationError("MultiHead needs at least one center")
        shape = self.input_shape
        for layer in self.feature_layers:
            shape = _output_shape(layer, shape)
        object.__setattr__(self, "_feature_shape", shape)
        for layer in self.head_layers:
            shape = _output_shape(layer, shape)
        if len(shape) != 1:
            raise AlignmentError(f"head output must be a flat logit vector, got shape {shape}")
        object.__setattr__(self, "_output_shape", shape)

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return self._feature_shape

    @property
    def output_dim(self) -> int:
        return self._output_shape[0]

    @property
    def is_multi_head(self) -> bool:
        return isinstance(self.head_setting, MultiHead)


def mlp_spec(
    input_dim: int,
    hidden: Sequence[int],
    num_classes: int,
    head_setting: HeadSetting = SingleHead(),
    head_hidden: Sequence[int] = (),
) -> ModelSpec:
    """Dense ReLU network: ``hidden`` widths form the feature extractor, the head maps to logits."""
    features: List[LayerSpec] = []
    width = input_dim
    for i, h in enumerate(hidden):
        features += [Dense(width, h, seed=i), ReLU()]
        width = h
    head: List[LayerSpec] = []
    for i, h in enumerate(head_hidden):
        head += [Dense(width, h, seed=100 + i), ReLU()]
        width = h
    head.append(Dense(width, num_classes, seed=100 + len(head_hidden)))
    return ModelSpec((input_dim,), tuple(features), tuple(head), head_setting)


# ---------------------------------------------------------------------------
# Parameter sets
# ---------------------------------------------------------------------------


def _head_prefix(model: ModelSpec, head: int) -> str:
    return f"heads.{head:02d}" if model.is_multi_head else "head"


def _layer_slots(model: ModelSpec):
    """Yield ``(prefix, layer, index, head)`` for every layer; ``head`` is None for features."""
    for i, layer in enumerate(model.feature_layers):
        yield f"features.{i:02d}", layer, i, None
    for h in range(model.head_setting.num_heads):
        for i, layer in enumerate(model.head_layers):
            yield f"{_head_prefix(model, h)}.{i:02d}", layer, i, h


def _layer_param_shapes(layer: LayerSpec) -> Dict[str, Tuple[int, ...]]:
    if isinstance(layer, Dense):
        return {"weight": (layer.in_features, layer.out_features), "bias": (layer.out_features,)}
    if isinstance(layer, Conv2D):
        k = layer.kernel_size
        return {
            "weight": (layer.out_channels, layer.in_channels, k, k),
            "bias": (layer.out_channels,),
        }
    return {}


def parameter_shapes(model: ModelSpec) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for prefix, layer, _, _ in _layer_slots(model):
        for name, shape in _layer_param_shapes(layer).items():
            shapes[f"{prefix}.{name}"] = shape
    return dict(sorted(shapes.items()))


def _init_layer(layer: LayerSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    shapes = _layer_param_shapes(layer)
    if not shapes:
        return {}
    if isinstance(layer, Dense):
        fan_in, fan_out = layer.in_features, layer.out_features
    else:
        area = layer.kernel_size * layer.kernel_size
        fan_in, fan_out = layer.in_channels * area, layer.out_channels * area
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return {
        "weight": rng.uniform(-bound, bound, size=shapes["weight"]),
        "bias": np.zeros(shapes["bias"]),
    }


def _layer_rng(seed: int, layer: LayerSpec, index: int, head: Optional[int]):
    slot = 0 if head is None else head + 1
    return np.random.default_rng([seed, layer.seed, slot, index])


def init_params(model: ModelSpec, seed: int = 0) -> ParameterSet:
    """Glorot-uniform weights and zero biases, fully determined by ``(model, seed)``."""
    params = {}
    for prefix, layer, index, head in _layer_slots(model):
        for name, value in _init_layer(layer, _layer_rng(seed, layer, index, head)).items():
            params[f"{prefix}.{name}"] = value
    return dict(sorted(params.items()))


def check_aligned(a: ParameterSet, b: ParameterSet, what: str = "parameter sets") -> None:
    """Raise ``AlignmentError`` unless ``a`` and ``b`` have the same names and shapes."""
    if a.keys() != b.keys():
        missing = sorted(set(a) ^ set(b))
        raise AlignmentError(f"{what} differ in names: {missing}")
    for name in a:
        if np.shape(a[name]) != np.shape(b[name]):
            raise AlignmentError(
                f"{what} differ in shape for {name!r}: {np.shape(a[name])} vs {np.shape(b[name])}"
            )


def check_model_params(model: ModelSpec, params: ParameterSet) -> None:
    expected = parameter_shapes(model)
    if params.keys() != expected.keys():
        raise AlignmentError(f"parameters do not match model: {sorted(set(params) ^ set(expected))}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise AlignmentError(f"parameter {name!r} has shape {params[name].shape}, model expects {shape}")


def zeros_like(params: ParameterSet) -> ParameterSet:
    return {name: np.zeros_like(value) for name, value in params.items()}


def copy_params(params: ParameterSet) -> ParameterSet:
    return {name: value.copy() for name, value in params.items()}


def params_equal(a: ParameterSet, b: ParameterSet) -> bool:
    """Bit-exact equality of two parameter sets."""
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def split_params(model: ModelSpec, params: ParameterSet) -> Tuple[ParameterSet, ParameterSet]:
    """Partition parameters into feature-extractor and classifier parts."""
    check_model_params(model, params)
    features = {k: v for k, v in params.items() if k.startswith("features.")}
    heads = {k: v for k, v in params.items() if not k.startswith("features.")}
    return features, heads


def merge_params(*parts: ParameterSet) -> ParameterSet:
    merged: ParameterSet = {}
    for part in parts:
        overlap = merged.keys() & part.keys()
        if overlap:
            raise AlignmentError(f"parameter parts overlap: {sorted(overlap)}")
        merged.update(part)
    return dict(sorted(merged.items()))


def head_param_names(model: ModelSpec, head_index: int) -> List[str]:
    prefix = _head_prefix(model, head_index) + "."
    return [name for name in parameter_shapes(model) if name.startswith(prefix)]


def _resolve_head(model: ModelSpec, head_index: Optional[int]) -> int:
    if not model.is_multi_head:
        if head_index not in (None, 0):
            raise ConfigurationError("single-head models take no head index")
        return 0
    if head_index is None:
        raise ConfigurationError("a head index is required for multi-head models")
    if not 0 <= head_index < model.head_setting.num_heads:
        raise ConfigurationError(
            f"head index {head_index} out of range for {model.head_setting.num_heads} heads"
        )
    return head_index


def replace_head(
    model: ModelSpec, params: ParameterSet, new_seed: int, head_index: int = 0
) -> ParameterSet:
    """Re-initialize one classifier head from ``new_seed``, leaving everything else untouched."""
    if not model.is_multi_head:
        raise ConfigurationError("replace_head requires a multi-head model")
    head = _resolve_head(model, head_index)
    features, heads = split_params(model, params)
    prefix = _head_prefix(model, head)
    kept = {k: v for k, v in heads.items() if not k.startswith(prefix + ".")}
    fresh = {
        f"{prefix}.{i:02d}.{name}": value
        for i, layer in enumerate(model.head_layers)
        for name, value in _init_layer(layer, _layer_rng(new_seed, layer, i, head)).items()
    }
    return merge_params(features, kept, fresh)


# ---------------------------------------------------------------------------
# Forward and backward passes
# ---------------------------------------------------------------------------


def _conv_forward(x, weight, bias):
    k = weight.shape[-1]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("bchwij,ocij->bohw", windows, weight) + bias[None, :, None, None]


def _conv_backward(x, weight, dy):
    k = weight.shape[-1]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    d_weight = np.einsum("bchwij,bohw->ocij", windows, dy)
    d_bias = dy.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    out_h, out_w = dy.shape[2], dy.shape[3]
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + out_h, j : j + out_w] += np.einsum("bohw,oc->bchw", dy, weight[:, :, i, j])
    return dx, d_weight, d_bias


def _pool_windows(x, k):
    b, c, h, w = x.shape
    oh, ow = h // k, w // k
    cropped = x[:, :, : oh * k, : ow * k]
    return cropped.reshape(b, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, k * k)


def _layer_forward(layer, params, prefix, x):
    if isinstance(layer, Dense):
        return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"], x
    if isinstance(layer, Conv2D):
        return _conv_forward(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"]), x
    if isinstance(layer, MaxPool2D):
        windows = _pool_windows(x, layer.kernel_size)
        argmax = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
        return y, (x.shape, argmax)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0), x
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    raise ConfigurationError(f"unknown layer kind: {layer!r}")


def _layer_backward(layer, params, prefix, cache, dy, grads):
    if isinstance(layer, Dense):
        grads[f"{prefix}.weight"] = cache.T @ dy
        grads[f"{prefix}.bias"] = dy.sum(axis=0)
        return dy @ params[f"{prefix}.weight"].T
    if isinstance(layer, Conv2D):
        dx, d_weight, d_bias = _conv_backward(cache, params[f"{prefix}.weight"], dy)
        grads[f"{prefix}.weight"] = d_weight
        grads[f"{prefix}.bias"] = d_bias
        return dx
    if isinstance(layer, MaxPool2D):
        shape, argmax = cache
        k = layer.kernel_size
        b, c, oh, ow = argmax.shape
        scattered = np.zeros((b, c, oh, ow, k * k))
        np.put_along_axis(scattered, argmax[..., None], dy[..., None], axis=-1)
        scattered = scattered.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(shape)
        dx[:, :, : oh * k, : ow * k] = scattered.reshape(b, c, oh * k, ow * k)
        return dx
    if isinstance(layer, ReLU):
        return dy * (cache > 0)
    if isinstance(layer, Flatten):
        return dy.reshape(cache)
    raise ConfigurationError(f"unknown layer kind: {layer!r}")


class ForwardPass(NamedTuple):
    """Everything ``backward`` needs from one forward evaluation."""

    logits: np.ndarray
    features: np.ndarray
    feature_caches: Tuple
    head_caches: Tuple
    head_index: int


def _check_batch(model: ModelSpec, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != len(model.input_shape) + 1 or batch.shape[1:] != model.input_shape:
        raise AlignmentError(
            f"batch shape {batch.shape} does not match model input (B, {', '.join(map(str, model.input_shape))})"
        )
    return batch


def _run_features(model, params, x):
    caches = []
    for i, layer in enumerate(model.feature_layers):
        x, cache = _layer_forward(layer, params, f"features.{i:02d}", x)
        caches.append(cache)
    return x, tuple(caches)


def forward_pass(
    model: ModelSpec, params: ParameterSet, batch: np.ndarray, head_index: Optional[int] = None
) -> ForwardPass:
    head = _resolve_head(model, head_index)
    check_model_params(model, params)
    x = _check_batch(model, batch)
    features, feature_caches = _run_features(model, params, x)
    prefix = _head_prefix(model, head)
    out, head_caches = features, []
    for i, layer in enumerate(model.head_layers):
        out, cache = _layer_forward(layer, params, f"{prefix}.{i:02d}", out)
        head_caches.append(cache)
    return ForwardPass(out, features, feature_caches, tuple(head_caches), head)


def forward(
    model: ModelSpec, params: ParameterSet, batch: np.ndarray, head_index: Optional[int] = None
) -> np.ndarray:
    """Evaluate ``M(x, theta)``.

    Parameters
    ----------
    model : ModelSpec
        Architecture; ``params`` must be aligned with it.
    params : ParameterSet
        Model weights.
    batch : numpy.ndarray
        Instances, batch-major, each of shape ``model.input_shape``.
    head_index : int, optional
        Classifier to route through. Required for multi-head models.

    Returns
    -------
    numpy.ndarray
        Logits of shape ``(batch, model.output_dim)``.
    """
    return forward_pass(model, params, batch, head_index).logits


def extract_features(model: ModelSpec, params: ParameterSet, batch: np.ndarray) -> np.ndarray:
    """Feature-extractor output ``F(x, theta)``."""
    check_model_params(model, params)
    features, _ = _run_features(model, params, _check_batch(model, batch))
    return features


def backward(
    model: ModelSpec,
    params: ParameterSet,
    fp: ForwardPass,
    d_logits: np.ndarray,
    d_features: Optional[np.ndarray] = None,
) -> ParameterSet:
    """Gradient of a scalar objective given its derivatives w.r.t. logits and (optionally) features.

    Parameters of heads other than ``fp.head_index`` receive exact zeros.
    """
    grads: ParameterSet = {}
    prefix = _head_prefix(model, fp.head_index)
    dy = d_logits
    for i in reversed(range(len(model.head_layers))):
        dy = _layer_backward(model.head_layers[i], params, f"{prefix}.{i:02d}", fp.head_caches[i], dy, grads)
    if d_features is not None:
        dy = dy + d_features
    for i in reversed(range(len(model.feature_layers))):
        dy = _layer_backward(model.feature_layers[i], params, f"features.{i:02d}", fp.feature_caches[i], dy, grads)
    return {name: grads.get(name, np.zeros_like(value)) for name, value in params.items()}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _class_labels(labels, logits) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise DataError(f"expected {logits.shape[0]} class labels, got shape {labels.shape}")
    as_int = labels.astype(np.int64)
    if not np.array_equal(as_int, labels):
        raise DataError("class labels must be integers")
    if labels.size and (as_int.min() < 0 or as_int.max() >= logits.shape[1]):
        raise DataError(f"label out of class range [0, {logits.shape[1]})")
    return as_int


def _mask_labels(labels, logits) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise DataError(f"Dice targets must have shape {logits.shape}, got {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("Dice targets must be binary masks")
    return labels


def task_loss(logits: np.ndarray, labels, loss: LossKind = CrossEntropy()) -> Tuple[float, np.ndarray]:
    """Batch-mean task loss and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    batch = logits.shape[0]
    if batch == 0:
        raise DataError("empty batch")
    if isinstance(loss, CrossEntropy):
        y = _class_labels(labels, logits)
        logp = log_softmax(logits)
        rows = np.arange(batch)
        value = -logp[rows, y].mean()
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        return float(value), grad / batch
    if isinstance(loss, Dice):
        t = _mask_labels(labels, logits)
        p = expit(logits)
        s = loss.smoothing
        overlap = (p * t).sum(axis=1, keepdims=True)
        denom = p.sum(axis=1, keepdims=True) + t.sum(axis=1, keepdims=True) + s
        dice = (2.0 * overlap + s) / denom
        d_dice_dp = (2.0 * t * denom - (2.0 * overlap + s)) / denom**2
        grad = -d_dice_dp * p * (1.0 - p) / batch
        return float((1.0 - dice).mean()), grad
    raise ConfigurationError(f"unknown loss kind: {loss!r}")


def loss_and_grad(
    model: ModelSpec,
    params: ParameterSet,
    batch: np.ndarray,
    labels,
    loss: LossKind = CrossEntropy(),
    head_index: Optional[int] = None,
) -> Tuple[float, ParameterSet]:
    """Batch-mean task loss and its exact parameter gradient."""
    if len(batch) == 0:
        raise DataError("empty batch")
    fp = forward_pass(model, params, batch, head_index)
    value, d_logits = task_loss(fp.logits, labels, loss)
    if not np.isfinite(value):
        raise NumericalError("non-finite task loss")
    return value, backward(model, params, fp, d_logits)


def score(logits: np.ndarray, labels, loss: LossKind = CrossEntropy()) -> float:
    """Percentage score: accuracy for classification, hard-threshold Dice x 100 for masks."""
    logits = np.asarray(logits)
    if logits.shape[0] == 0:
        raise DataError("cannot score an empty split")
    if isinstance(loss, CrossEntropy):
        y = _class_labels(labels, logits)
        return float(100.0 * np.mean(logits.argmax(axis=1) == y))
    t = _mask_labels(labels, logits)
    pred = (logits > 0).astype(np.float64)
    s = loss.smoothing
    dice = (2.0 * (pred * t).sum(axis=1) + s) / (pred.sum(axis=1) + t.sum(axis=1) + s)
    return float(100.0 * dice.mean())
