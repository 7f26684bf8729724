"""Dense numeric substrate for the localiser and classifier networks.

Tensors are plain ``float64`` numpy arrays in row-major order. Images and
feature maps use the ``(batch, height, width, channels)`` layout throughout.
Every layer caches what it needs during ``forward`` and accumulates parameter
gradients into :class:`Param.grad` during ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError

CONSTRAINTS = ("none", "stiefel", "centred")


@dataclass
class Param:
    """A learnable array together with its gradient and update rule."""

    value: np.ndarray
    constraint: str = "none"
    learning_rate: float = 1e-3
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.constraint not in CONSTRAINTS:
            raise ConfigurationError(f"unknown constraint {self.constraint!r}")
        if self.constraint == "stiefel":
            if self.value.ndim != 2 or self.value.shape[0] <= self.value.shape[1]:
                raise ConfigurationError(
                    f"stiefel parameter must be a tall matrix, got shape {self.value.shape}"
                )
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass
class LayerSpec:
    """Declarative description of one layer.

    ``kind`` is one of ``conv``, ``relu``, ``maxpool`` or ``fc``. Only the
    size fields relevant to the kind are read.
    """

    kind: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int | None = None
    window: int = 2
    units: int = 0
    zero_init: bool = False

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# functional layers


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _conv_out(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or stride < 1:
        raise ConfigurationError(
            f"kernel {kernel} with pad {pad} does not fit spatial extent {size}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    xp = _pad_hw(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (n, ho, wo, c, kh, kw) -> (n, ho, wo, kh, kw, c)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlate ``x`` (n,H,W,Cin) with ``w`` (kh,kw,Cin,Cout), add ``b``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ConfigurationError(
            f"conv2d channel mismatch: input {x.shape}, weights {w.shape}"
        )
    if b.shape != (w.shape[3],):
        raise ConfigurationError(f"conv2d bias shape {b.shape} != ({w.shape[3]},)")
    kh, kw, cin, cout = w.shape
    _conv_out(x.shape[1], kh, stride, pad)
    _conv_out(x.shape[2], kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    n, ho, wo = cols.shape[:3]
    out = cols.reshape(n * ho * wo, -1) @ w.reshape(-1, cout) + b
    return out.reshape(n, ho, wo, cout), cols


def conv2d_backward(grad: np.ndarray, x_shape, cols: np.ndarray, w: np.ndarray,
                    stride: int = 1, pad: int = 0, need_input_grad: bool = True):
    """Return ``(dx, dw, db)`` for :func:`conv2d`; ``dx`` is ``None`` when not needed."""
    kh, kw, cin, cout = w.shape
    n, ho, wo = grad.shape[:3]
    g2 = grad.reshape(-1, cout)
    dw = (cols.reshape(n * ho * wo, -1).T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcols = (g2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    _, h, wd, _ = x_shape
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def maxpool(x: np.ndarray, window: int):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Returns the pooled map and the flat argmax inside each window (first
    maximum in row-major order on ties).
    """
    n, h, w, c = x.shape
    if window < 1 or window > h or window > w:
        raise ConfigurationError(f"pool window {window} exceeds spatial extent {h}x{w}")
    ho, wo = h // window, w // window
    blocks = x[:, :ho * window, :wo * window, :].reshape(n, ho, window, wo, window, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(grad: np.ndarray, x_shape, arg: np.ndarray, window: int) -> np.ndarray:
    n, h, w, c = x_shape
    ho, wo = grad.shape[1:3]
    blocks = np.zeros((n, ho, wo, c, window * window))
    np.put_along_axis(blocks, arg[..., None], grad[..., None], axis=-1)
    blocks = blocks.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(x_shape)
    dx[:, :ho * window, :wo * window, :] = blocks.reshape(n, ho * window, wo * window, c)
    return dx


def fully_connected(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ConfigurationError(f"fc shape mismatch: input {x.shape}, weights {w.shape}")
    return x @ w + b


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Batch-mean softmax cross-entropy and its gradient w.r.t. ``logits``.

    For a single example the gradient is ``softmax(logits) - one_hot(label)``.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise InputError(f"labels {labels} out of range for {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    idx = np.arange(n)
    loss = -log_p[idx, labels].mean()
    grad = np.exp(log_p)
    grad[idx, labels] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    def params(self) -> list[Param]:
        return []

    def named_params(self) -> dict[str, Param]:
        return {}


class Conv2D(Layer):
    def __init__(self, weight: Param, bias: Param, stride: int = 1, pad: int = 0):
        self.weight, self.bias, self.stride, self.pad = weight, bias, stride, pad

    def forward(self, x):
        self._x_shape = x.shape
        out, self._cols = conv2d(x, self.weight.value, self.bias.value, self.stride, self.pad)
        return out

    def backward(self, grad, need_input_grad=True):
        dx, dw, db = conv2d_backward(grad, self._x_shape, self._cols, self.weight.value,
                                     self.stride, self.pad, need_input_grad)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def named_params(self):
        return {"weight": self.weight, "bias": self.bias}


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return relu(x)

    def backward(self, grad):
        return relu_backward(grad, self._x)


class MaxPool(Layer):
    def __init__(self, window: int):
        self.window = window

    def forward(self, x):
        self._x_shape = x.shape
        out, self._arg = maxpool(x, self.window)
        return out

    def backward(self, grad):
        return maxpool_backward(grad, self._x_shape, self._arg, self.window)


class Dense(Layer):
    """Fully connected layer; flattens any trailing dims of its input."""

    def __init__(self, weight: Param, bias: Param):
        self.weight, self.bias = weight, bias

    def forward(self, x):
        self._in_shape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        return fully_connected(self._x, self.weight.value, self.bias.value)

    def backward(self, grad):
        self.weight.grad += self._x.T @ grad
        self.bias.grad += grad.sum(axis=0)
        return (grad @ self.weight.value.T).reshape(self._in_shape)

    def named_params(self):
        return {"weight": self.weight, "bias": self.bias}


class Sequential:
    """A fixed chain of layers with hand-wired backward."""

    def __init__(self, layers: Sequence[Layer], specs: Sequence[LayerSpec] = (),
                 input_shape: tuple = ()):
        self.layers = list(layers)
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad, need_input_grad: bool = True):
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and not need_input_grad and isinstance(layer, Conv2D):
                return layer.backward(grad, need_input_grad=False)
            grad = layer.backward(grad)
        return grad

    def named_params(self) -> dict[str, Param]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_params().items():
                out[f"{i}.{name}"] = p
        return out

    def params(self) -> list[Param]:
        return list(self.named_params().values())


def build_sequential(specs: Sequence[LayerSpec], input_shape: tuple,
                     rng: np.random.Generator, learning_rate: float = 1e-3) -> Sequential:
    """Instantiate ``specs`` for per-example input shape ``(H, W, C)`` or ``(features,)``.

    Conv and fc weights get He-scaled Gaussian init; a spec flagged
    ``zero_init`` gets all-zero weights and biases.
    """
    shape = tuple(input_shape)
    layers: list[Layer] = []
    for spec in specs:
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ConfigurationError("conv layer needs an (H, W, C) input")
            h, w, c = shape
            pad = spec.kernel // 2 if spec.pad is None else spec.pad
            if spec.out_channels < 1 or spec.stride < 1:
                raise ConfigurationError("conv needs positive out_channels and stride")
            ho = _conv_out(h, spec.kernel, spec.stride, pad)
            wo = _conv_out(w, spec.kernel, spec.stride, pad)
            wshape = (spec.kernel, spec.kernel, c, spec.out_channels)
            if spec.zero_init:
                wv = np.zeros(wshape)
            else:
                wv = rng.normal(0.0, np.sqrt(2.0 / (spec.kernel ** 2 * c)), wshape)
            layers.append(Conv2D(Param(wv, learning_rate=learning_rate),
                                 Param(np.zeros(spec.out_channels), learning_rate=learning_rate),
                                 spec.stride, pad))
            shape = (ho, wo, spec.out_channels)
        elif spec.kind == "relu":
            layers.append(ReLU())
        elif spec.kind == "maxpool":
            if len(shape) != 3:
                raise ConfigurationError("maxpool needs an (H, W, C) input")
            h, w, c = shape
            if spec.window < 1 or spec.window > h or spec.window > w:
                raise ConfigurationError(f"pool window {spec.window} exceeds extent {h}x{w}")
            layers.append(MaxPool(spec.window))
            shape = (h // spec.window, w // spec.window, c)
        elif spec.kind == "fc":
            fan_in = int(np.prod(shape))
            if spec.units < 1:
                raise ConfigurationError("fc needs a positive unit count")
            if spec.zero_init:
                wv = np.zeros((fan_in, spec.units))
            else:
                wv = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, spec.units))
            layers.append(Dense(Param(wv, learning_rate=learning_rate),
                                Param(np.zeros(spec.units), learning_rate=learning_rate)))
            shape = (spec.units,)
        else:
            raise ConfigurationError(f"unknown layer kind {spec.kind!r}")
    net = Sequential(layers, specs, input_shape)
    net.output_shape = shape
    return net


def sgd_step(param: Param, lr: float | None = None):
    """Plain unconstrained update ``value -= lr * grad``."""
    lr = param.learning_rate if lr is None else lr
    param.value = param.value - lr * param.grad


def finite_diff_check(op: Callable, inputs: Sequence[np.ndarray], epsilon: float = 1e-5,
                      wrt: Sequence[int] | None = None) -> float:
    """Compare analytic gradients against central differences.

    ``op(*inputs)`` must return ``(value, grads)`` where ``value`` is a scalar
    and ``grads[i]`` is d value / d inputs[i]. Returns the maximum over all
    checked entries of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    _, grads = op(*inputs)
    wrt = range(len(inputs)) if wrt is None else wrt
    worst = 0.0
    for i in wrt:
        x = inputs[i]
        analytic = np.asarray(grads[i], dtype=np.float64).reshape(x.shape)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = op(*inputs)[0]
            flat[j] = orig - epsilon
            fm = op(*inputs)[0]
            flat[j] = orig
            numeric = (fp - fm) / (2 * epsilon)
            a = analytic.reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return float(worst)
