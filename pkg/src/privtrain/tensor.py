"""Dense tensor math and reverse-mode gradients for small feed-forward models.

Tensors are plain row-major ``numpy.ndarray`` objects in single (float32) or
double (float64) precision.  A model is a :class:`ModelSpec` (an ordered list
of layers ending in exactly one loss head) plus a :class:`ParamSet`.  The
backward pass can keep the batch dimension on every parameter gradient, which
is what differentially private training needs: per-example gradients come
out of one forward and one backward pass, and the reduction over examples is
left to the caller.

Layouts: dense inputs are ``(m, features)``; image inputs are ``(m, C, H, W)``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

PRECISIONS = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Raised when an activation or loss stops being finite."""


class StaleActivationsError(ValueError):
    pass


def dtype_for(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def as_tensor(x, precision: str = "double") -> Tensor:
    """Copy ``x`` into a C-contiguous array of the requested precision, rejecting NaN/Inf."""
    t = np.ascontiguousarray(x, dtype=dtype_for(precision))
    if not np.all(np.isfinite(t)):
        raise NumericError("tensor contains non-finite values")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul precision mismatch: {a.dtype} vs {b.dtype}")
    # einsum's own loop, not BLAS: each output row is then bitwise the same
    # whatever the number of rows, which keeps micro-batching exact
    return np.einsum("ik,kn->in", a, b)


# --------------------------------------------------------------------------
# layer kinds


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class MaxPool2d:
    window: int
    kind: str = field(default="maxpool2d", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class SoftmaxXentHead:
    classes: int
    kind: str = field(default="softmax_xent_head", init=False)


@dataclass(frozen=True)
class SquaredLossHead:
    """Regression head, ``loss = sum_j (y_j - t_j)**2``. Meant for tests."""

    outputs: int
    kind: str = field(default="squared_loss_head", init=False)


_LAYER_KINDS = {
    "dense": Dense,
    "relu": ReLU,
    "conv2d": Conv2d,
    "maxpool2d": MaxPool2d,
    "flatten": Flatten,
    "softmax_xent_head": SoftmaxXentHead,
    "squared_loss_head": SquaredLossHead,
}
_HEADS = (SoftmaxXentHead, SquaredLossHead)


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv2d: size {n} (pad {pad}) is not tiled by kernel {k} at stride {stride}")
    return span // stride + 1


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or not isinstance(self.layers[-1], _HEADS):
            raise ShapeError("model must end in a loss head")
        if sum(isinstance(l, _HEADS) for l in self.layers) != 1:
            raise ShapeError("model must contain exactly one loss head")
        object.__setattr__(self, "_shapes", tuple(self._infer_shapes()))

    def _infer_shapes(self):
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise ShapeError(f"layer {i} dense expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(f"layer {i} conv2d expects ({layer.in_channels}, H, W), got {shape}")
                shape = (
                    layer.out_channels,
                    _conv_out(shape[1], layer.kernel, layer.stride, layer.pad),
                    _conv_out(shape[2], layer.kernel, layer.stride, layer.pad),
                )
            elif isinstance(layer, MaxPool2d):
                w = layer.window
                if len(shape) != 3 or shape[1] % w or shape[2] % w:
                    raise ShapeError(f"layer {i} maxpool2d window {w} does not tile {shape}")
                shape = (shape[0], shape[1] // w, shape[2] // w)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, SoftmaxXentHead):
                if shape != (layer.classes,):
                    raise ShapeError(f"softmax head expects ({layer.classes},), got {shape}")
            elif isinstance(layer, SquaredLossHead):
                if shape != (layer.outputs,):
                    raise ShapeError(f"squared-loss head expects ({layer.outputs},), got {shape}")
            out.append(shape)
        return out

    @property
    def output_shapes(self) -> tuple:
        return self._shapes

    @property
    def head(self):
        return self.layers[-1]

    def param_shapes(self) -> list[tuple[str, tuple]]:
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shapes.append((f"{i}.weight", (layer.in_features, layer.out_features)))
                shapes.append((f"{i}.bias", (layer.out_features,)))
            elif isinstance(layer, Conv2d):
                k = layer.kernel
                shapes.append((f"{i}.weight", (layer.out_channels, layer.in_channels, k, k)))
                shapes.append((f"{i}.bias", (layer.out_channels,)))
        return shapes

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            try:
                layers.append(_LAYER_KINDS[kind](**entry))
            except KeyError:
                raise ValueError(f"unknown layer kind {kind!r}") from None
        return cls(tuple(d["input_shape"]), tuple(layers))

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


def mlp(in_features: int, hidden: Sequence[int], classes: int) -> ModelSpec:
    """Dense/ReLU stack with a softmax cross-entropy head."""
    layers = []
    prev = in_features
    for h in hidden:
        layers += [Dense(prev, h), ReLU()]
        prev = h
    layers += [Dense(prev, classes), SoftmaxXentHead(classes)]
    return ModelSpec((in_features,), tuple(layers))


# --------------------------------------------------------------------------
# parameters

_tokens = itertools.count(1)


class ParamSet:
    """Ordered, named model parameters.

    A ParamSet is treated as immutable: updates build a new one via
    :meth:`replace`, which also issues a fresh ``token`` so that activations
    recorded against older parameters can be detected as stale.
    """

    def __init__(self, items):
        items = [(str(name), np.asarray(value)) for name, value in items]
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self._items = dict(items)
        self.token = next(_tokens)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    @property
    def dtype(self):
        # None for a parameter-free model
        return next(iter(self._items.values())).dtype if self._items else None

    @property
    def size(self) -> int:
        return sum(v.size for v in self._items.values())

    def replace(self, values: dict) -> "ParamSet":
        new = []
        for name, old in self._items.items():
            v = np.asarray(values.get(name, old), dtype=old.dtype)
            if v.shape != old.shape:
                raise ShapeError(f"parameter {name}: shape {v.shape} != {old.shape}")
            new.append((name, v))
        return ParamSet(new)

    def astype(self, precision: str) -> "ParamSet":
        dt = dtype_for(precision)
        return ParamSet([(n, v.astype(dt)) for n, v in self._items.items()])

    def flat(self) -> Tensor:
        return np.concatenate([v.ravel() for v in self._items.values()])

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes, dtypes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._items.values(), other._items.values())
        )

    def __repr__(self):
        inner = ", ".join(f"{n}{tuple(v.shape)}" for n, v in self._items.items())
        return f"ParamSet({inner})"


def init_params(spec: ModelSpec, rng: np.random.Generator, precision: str = "single") -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    dt = dtype_for(precision)
    items = []
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            items.append((name, np.zeros(shape, dtype=dt)))
            continue
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            rf = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rf, shape[0] * rf
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        items.append((name, rng.uniform(-limit, limit, size=shape).astype(dt)))
    return ParamSet(items)


@dataclass
class PerExampleGrads:
    """Per-parameter gradients whose leading axis indexes the examples."""

    grads: dict
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        for name, g in self.grads.items():
            if g.shape[0] != self.batch_size:
                raise ShapeError(f"{name}: leading dimension {g.shape[0]} != batch size {self.batch_size}")

    def __getitem__(self, name):
        return self.grads[name]

    def names(self):
        return list(self.grads)

    def example(self, i: int) -> dict:
        return {n: g[i] for n, g in self.grads.items()}

    def sum(self) -> dict:
        return {n: g.sum(axis=0) for n, g in self.grads.items()}


# --------------------------------------------------------------------------
# baseline operators


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: Tensor, d_out: Tensor) -> Tensor:
    return d_out * (x > 0)


def _windows(x: Tensor, k: int, stride: int) -> Tensor:
    """(m, C, H, W) -> (m, C, H', W', k, k) strided view."""
    v = sliding_window_view(x, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _fold_windows(dwin: Tensor, shape: tuple, stride: int) -> Tensor:
    """Adjoint of :func:`_windows`: scatter-add window gradients back to the image."""
    m, c, ho, wo, k, _ = dwin.shape
    out = np.zeros(shape, dtype=dwin.dtype)
    for a in range(k):
        for b in range(k):
            out[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += dwin[..., a, b]
    return out


def conv2d_forward(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    k = weight.shape[2]
    _conv_out(x.shape[2], k, stride, pad)
    _conv_out(x.shape[3], k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, k, stride)
    out = np.einsum("bchwkl,ockl->bohw", win, weight)
    return out + bias[None, :, None, None]


def conv2d_backward(x: Tensor, weight: Tensor, d_out: Tensor, stride: int = 1, pad: int = 0, per_example: bool = False):
    """Return ``(dx, dweight, dbias)``; with ``per_example`` the weight/bias grads keep axis 0."""
    k = weight.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, k, stride)
    if per_example:
        dw = np.einsum("bohw,bchwkl->bockl", d_out, win)
        db = d_out.sum(axis=(2, 3))
    else:
        dw = np.tensordot(d_out, win, axes=([0, 2, 3], [0, 2, 3]))
        db = d_out.sum(axis=(0, 2, 3))
    dwin = np.einsum("bohw,ockl->bchwkl", d_out, weight)
    dxp = _fold_windows(dwin, xp.shape, stride)
    dx = dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def _pool_view(x: Tensor, window: int) -> Tensor:
    m, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool window {window} does not tile {x.shape}")
    return x.reshape(m, c, h // window, window, w // window, window).transpose(0, 1, 2, 4, 3, 5)


def maxpool_forward(x: Tensor, window: int):
    """Branching reference max-pool (stride == window). Returns ``(out, argidx)``."""
    v = _pool_view(x, window)
    flat = v.reshape(*v.shape[:4], window * window)
    idx = np.argmax(flat, axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx


def maxpool_backward(d_out: Tensor, argidx: Tensor, input_shape: tuple, window: int) -> Tensor:
    m, c, ho, wo = d_out.shape
    dflat = np.zeros((m, c, ho, wo, window * window), dtype=d_out.dtype)
    np.put_along_axis(dflat, argidx[..., None], d_out[..., None], axis=-1)
    return dflat.reshape(m, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(input_shape)


def _mask_pool_backward(d_out: Tensor, mask: Tensor, input_shape: tuple) -> Tensor:
    # mask: (m, C, H', W', w, w) one-hot per window
    m, c, ho, wo, w, _ = mask.shape
    g = mask * d_out[..., None, None]
    return g.transpose(0, 1, 2, 4, 3, 5).reshape(input_shape)


# --------------------------------------------------------------------------
# forward / backward


def _log_softmax(z: Tensor) -> Tensor:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _class_onehot(labels: Tensor, classes: int, dtype, oblivious: bool) -> Tensor:
    if oblivious:
        from .oblivious import oonehot

        return oonehot(labels, classes).astype(dtype)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    out = np.zeros((labels.shape[0], classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels.astype(np.intp)] = 1
    return out


@dataclass
class ForwardPass:
    activations: list
    loss: float
    predictions: Tensor
    per_example_loss: Tensor
    spec: ModelSpec = field(repr=False)
    params_token: int = field(repr=False)
    oblivious: bool = False
    caches: list = field(default_factory=list, repr=False)

    def __iter__(self):
        return iter((self.activations, self.loss, self.predictions))


def _check_finite(a: Tensor, where: str):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite activation after {where}")


def _run_layers(spec: ModelSpec, params: ParamSet, batch: Tensor, oblivious: bool):
    if batch.ndim < 1 or batch.shape[0] < 1:
        raise ShapeError("batch must have a positive leading dimension")
    if tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape[1:]} != model input {spec.input_shape}")
    dt = params.dtype
    if dt is None:
        dt = batch.dtype if batch.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    if batch.dtype != dt:
        batch = batch.astype(dt)
    acts = [batch]
    caches = []
    a = batch
    for i, layer in enumerate(spec.layers[:-1]):
        cache = None
        if isinstance(layer, Dense):
            a = matmul(a, params[f"{i}.weight"]) + params[f"{i}.bias"]
        elif isinstance(layer, ReLU):
            a = relu_forward(a)
        elif isinstance(layer, Conv2d):
            a = conv2d_forward(a, params[f"{i}.weight"], params[f"{i}.bias"], layer.stride, layer.pad)
        elif isinstance(layer, MaxPool2d):
            if oblivious:
                from .oblivious import omaxpool2d

                a, cache = omaxpool2d(a, layer.window, layer.window)
            else:
                a, cache = maxpool_forward(a, layer.window)
        elif isinstance(layer, Flatten):
            a = a.reshape(a.shape[0], -1)
        _check_finite(a, f"layer {i} ({layer.kind})")
        acts.append(a)
        caches.append(cache)
    return acts, caches


def _head(spec: ModelSpec, out: Tensor, labels, oblivious: bool):
    """Return (per-example loss, predictions, d per-example loss / d head input)."""
    head = spec.head
    m = out.shape[0]
    if isinstance(head, SoftmaxXentHead):
        labels = np.asarray(labels)
        if labels.shape != (m,):
            raise ShapeError(f"expected {m} class labels, got shape {labels.shape}")
        logp = _log_softmax(out)
        probs = np.exp(logp)
        onehot = _class_onehot(labels, head.classes, out.dtype, oblivious)
        losses = -(onehot * logp).sum(axis=1)
        return losses, probs, probs - onehot
    labels = np.asarray(labels, dtype=out.dtype).reshape(m, -1)
    if labels.shape != out.shape:
        raise ShapeError(f"regression targets {labels.shape} != outputs {out.shape}")
    r = out - labels
    return (r * r).sum(axis=1), out, 2 * r


def model_forward(spec: ModelSpec, params: ParamSet, batch: Tensor, labels, oblivious: bool = False) -> ForwardPass:
    """Run the model on a batch and score it.

    ``loss`` is the mean over the batch; ``per_example_loss`` keeps the
    individual terms.  The returned object is the activation record that
    :func:`backward_per_example` and :func:`backward` consume.
    """
    acts, caches = _run_layers(spec, params, batch, oblivious)
    losses, preds, _ = _head(spec, acts[-1], labels, oblivious)
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    return ForwardPass(acts, loss, preds, losses, spec, params.token, oblivious, caches)


def predict(spec: ModelSpec, params: ParamSet, batch: Tensor, oblivious: bool = False) -> Tensor:
    """Class probabilities (or regression outputs) without computing a loss."""
    acts, _ = _run_layers(spec, params, batch, oblivious)
    out = acts[-1]
    if isinstance(spec.head, SoftmaxXentHead):
        return np.exp(_log_softmax(out))
    return out


def _backward(spec, params, fwd: ForwardPass, labels, per_example: bool):
    if fwd.spec is not spec and fwd.spec != spec:
        raise StaleActivationsError("activations were recorded for a different model spec")
    if fwd.params_token != params.token:
        raise StaleActivationsError("activations were recorded against different parameters")
    acts = fwd.activations
    _, _, d = _head(spec, acts[-1], labels, fwd.oblivious)
    grads = {}
    for i in range(len(spec.layers) - 2, -1, -1):
        layer = spec.layers[i]
        x = acts[i]
        if isinstance(layer, Dense):
            w = params[f"{i}.weight"]
            if per_example:
                grads[f"{i}.weight"] = np.einsum("bi,bo->bio", x, d)
                grads[f"{i}.bias"] = d.copy()
            else:
                grads[f"{i}.weight"] = x.T @ d
                grads[f"{i}.bias"] = d.sum(axis=0)
            d = np.einsum("bo,io->bi", d, w)
        elif isinstance(layer, ReLU):
            d = relu_backward(x, d)
        elif isinstance(layer, Conv2d):
            d, dw, db = conv2d_backward(x, params[f"{i}.weight"], d, layer.stride, layer.pad, per_example)
            grads[f"{i}.weight"], grads[f"{i}.bias"] = dw, db
        elif isinstance(layer, MaxPool2d):
            cache = fwd.caches[i]
            if fwd.oblivious:
                d = _mask_pool_backward(d, cache, x.shape)
            else:
                d = maxpool_backward(d, cache, x.shape, layer.window)
        elif isinstance(layer, Flatten):
            d = d.reshape(x.shape)
    return {name: grads[name] for name, _ in spec.param_shapes()}


def backward_per_example(spec: ModelSpec, params: ParamSet, fwd: ForwardPass, labels) -> PerExampleGrads:
    """Gradient of each example's own loss, batch axis intact (nothing summed over examples)."""
    grads = _backward(spec, params, fwd, labels, per_example=True)
    return PerExampleGrads(grads, fwd.activations[0].shape[0])


def backward(spec: ModelSpec, params: ParamSet, fwd: ForwardPass, labels) -> dict:
    """Aggregate gradient of the *summed* batch loss, reduced inside each layer.

    Divide by the batch size to get the gradient of ``fwd.loss`` (the mean).
    """
    return _backward(spec, params, fwd, labels, per_example=False)


def mean_loss(spec: ModelSpec, params: ParamSet, batch: Tensor, labels, oblivious: bool = False) -> float:
    losses, _, _ = _head(spec, _run_layers(spec, params, batch, oblivious)[0][-1], labels, oblivious)
    return float(losses.mean())


def numeric_gradient(spec: ModelSpec, params: ParamSet, batch: Tensor, labels, h: float = 1e-5) -> dict:
    """Central-difference gradient of the mean batch loss, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step size must be positive")
    if params.dtype != np.float64:
        raise ValueError("numeric_gradient requires double precision parameters")
    out = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            plus = value.copy()
            plus[idx] = orig + h
            minus = value.copy()
            minus[idx] = orig - h
            lp = mean_loss(spec, params.replace({name: plus}), batch, labels)
            lm = mean_loss(spec, params.replace({name: minus}), batch, labels)
            g[idx] = (lp - lm) / (2 * h)
        out[name] = g
    return out
