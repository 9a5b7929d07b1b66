"""Network layers with explicit forward/backward passes.

Activations are [batch, channels, height, width] float64 arrays (or
[batch, features] after flatten/pooling). Every layer caches what its
backward pass needs; calling backward before forward is a StateError.
Parameter gradients accumulate into ``grads`` until ``zero_grads``.
"""

import numpy as np

from .errors import ConfigError, DataError, ShapeError, StateError
from .tensor import DTYPE, Rng


def _im2col(xp: np.ndarray, k: int, height: int, width: int, out=None) -> np.ndarray:
    """Gather kxk windows of a padded map into [B, C, k, k, H, W]."""
    b, c = xp.shape[:2]
    if out is None or out.shape != (b, c, k, k, height, width):
        out = np.empty((b, c, k, k, height, width), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, :, i, j] = xp[:, :, i : i + height, j : j + width]
    return out


class Layer:
    """Base layer: no parameters, training-mode flag."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def constrain(self):
        """Re-project parameters onto their valid set after an update."""

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Conv2d(Layer):
    """3x3 cross-correlation, stride 1, zero same-padding.

    He-normal weight init (stddev sqrt(2/fan_in)), zero bias. Set
    ``needs_input_grad = False`` on the first layer of a stack to skip
    the input-gradient conv in backward.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: Rng, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ConfigError("kernel size must be odd for same-padding")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        fan_in = in_channels * kernel_size * kernel_size
        self.params = {
            "weight": rng.normal((out_channels, in_channels, kernel_size, kernel_size),
                                 0.0, np.sqrt(2.0 / fan_in)),
            "bias": np.zeros(out_channels, dtype=DTYPE),
        }
        self._init_grads()
        self.needs_input_grad = True
        self._cols = None        # cached im2col of the padded input
        self._pad = None         # reusable padded-input buffer
        self._dpad = None        # reusable padded-grad buffer for backward
        self._shape_in = None

    def _conv(self, x, w, pad_buf, cols_buf):
        """Same-padding cross-correlation; returns (out, cols, pad_buf)."""
        b, c, h, wd = x.shape
        p = self.k // 2
        if pad_buf is None or pad_buf.shape != (b, c, h + 2 * p, wd + 2 * p):
            pad_buf = np.zeros((b, c, h + 2 * p, wd + 2 * p), dtype=DTYPE)
        pad_buf[:, :, p : p + h, p : p + wd] = x
        cols = _im2col(pad_buf, self.k, h, wd, out=cols_buf)
        out = np.matmul(w.reshape(w.shape[0], -1)[None],
                        cols.reshape(b, c * self.k * self.k, h * wd))
        return out.reshape(b, w.shape[0], h, wd), cols, pad_buf

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv expects [B,{self.in_channels},H,W], got {x.shape}")
        out, self._cols, self._pad = self._conv(
            x, self.params["weight"], self._pad, self._cols)
        self._shape_in = x.shape
        out += self.params["bias"][None, :, None, None]
        return out

    def backward(self, grad_out):
        if self._shape_in is None:
            raise StateError("conv backward called before forward")
        b, _, h, wd = self._shape_in
        if grad_out.shape != (b, self.out_channels, h, wd):
            raise ShapeError(f"grad shape {grad_out.shape} does not match output")
        cols = self._cols.reshape(b, -1, h * wd)
        gout = grad_out.reshape(b, self.out_channels, h * wd)
        self.grads["weight"] += np.einsum("bon,bmn->om", gout, cols).reshape(
            self.params["weight"].shape)
        self.grads["bias"] += grad_out.sum(axis=(0, 2, 3))
        if not self.needs_input_grad:
            return None
        # input gradient = same-pad conv of grad_out with the flipped,
        # in/out-transposed kernel
        w_flip = np.ascontiguousarray(
            self.params["weight"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_in, _, self._dpad = self._conv(grad_out, w_flip, self._dpad, None)
        return grad_in


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("relu backward called before forward")
        return np.where(self._mask, grad_out, 0.0)


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2. Gradient goes to the first maximal
    element of each window in row-major scan order."""

    def __init__(self):
        super().__init__()
        self._idx = None
        self._shape_in = None

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool expects rank-4 input, got {x.shape}")
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
        win = (x.reshape(b, c, h // 2, 2, w // 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h // 2, w // 2, 4))
        self._idx = win.argmax(axis=4)
        self._shape_in = x.shape
        return np.take_along_axis(win, self._idx[..., None], axis=4)[..., 0]

    def backward(self, grad_out):
        if self._idx is None:
            raise StateError("maxpool backward called before forward")
        b, c, h, w = self._shape_in
        dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(dwin, self._idx[..., None], grad_out[..., None], axis=4)
        return (dwin.reshape(b, c, h // 2, w // 2, 2, 2)
                    .transpose(0, 1, 2, 4, 3, 5)
                    .reshape(b, c, h, w))


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._shape_in = None

    def forward(self, x):
        self._shape_in = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        if self._shape_in is None:
            raise StateError("flatten backward called before forward")
        return grad_out.reshape(self._shape_in)


class Dense(Layer):
    """Fully connected layer, He-normal init, zero bias."""

    def __init__(self, in_features: int, out_features: int, rng: Rng):
        super().__init__()
        self.in_features = in_features
        self.params = {
            "weight": rng.normal((in_features, out_features),
                                 0.0, np.sqrt(2.0 / in_features)),
            "bias": np.zeros(out_features, dtype=DTYPE),
        }
        self._init_grads()
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects [B,{self.in_features}], got {x.shape}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("dense backward called before forward")
        self.grads["weight"] += self._x.T @ grad_out
        self.grads["bias"] += grad_out.sum(axis=0)
        return grad_out @ self.params["weight"].T


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-rate); identity at inference."""

    def __init__(self, rate: float, rng: Rng):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self._rng = rng
        self._scaled_mask = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._scaled_mask = None
            return x
        keep = self._rng.uniform(x.shape) >= self.rate
        self._scaled_mask = keep / (1.0 - self.rate)
        return x * self._scaled_mask

    def backward(self, grad_out):
        if self._scaled_mask is None:
            return grad_out
        return grad_out * self._scaled_mask


class GlobalMaxPool(Layer):
    """[B,C,H,W] -> [B,C] per-channel spatial max; gradient to the first
    maximal position in row-major order."""

    def __init__(self):
        super().__init__()
        self._idx = None
        self._shape_in = None

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"gmp expects rank-4 input, got {x.shape}")
        flat = x.reshape(x.shape[0], x.shape[1], -1)
        self._idx = flat.argmax(axis=2)
        self._shape_in = x.shape
        return np.take_along_axis(flat, self._idx[..., None], axis=2)[..., 0]

    def backward(self, grad_out):
        if self._idx is None:
            raise StateError("gmp backward called before forward")
        b, c, h, w = self._shape_in
        dflat = np.zeros((b, c, h * w), dtype=DTYPE)
        np.put_along_axis(dflat, self._idx[..., None], grad_out[..., None], axis=2)
        return dflat.reshape(self._shape_in)


class GlobalAvgPool(Layer):
    """[B,C,H,W] -> [B,C] per-channel spatial mean."""

    def __init__(self):
        super().__init__()
        self._shape_in = None

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"gap expects rank-4 input, got {x.shape}")
        self._shape_in = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad_out):
        if self._shape_in is None:
            raise StateError("gap backward called before forward")
        b, c, h, w = self._shape_in
        return np.broadcast_to(
            grad_out[:, :, None, None] / (h * w), self._shape_in).copy()


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and its gradient w.r.t. logits.

    Computed with max-subtraction; grad = (softmax - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B,classes], got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch")
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"labels must be in [0,{n_classes - 1}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -log_probs[np.arange(b), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad


class LayerStack:
    """Ordered layers driven as one model; single-threaded per instance."""

    def __init__(self, layers: list):
        self.layers = layers

    def train(self):
        for layer in self.layers:
            layer.training = True

    def eval(self):
        for layer in self.layers:
            layer.training = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def constrain(self):
        for layer in self.layers:
            layer.constrain()

    def named_parameters(self) -> list:
        """(name, param, grad) triples in stack order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out.append((f"{i}.{type(layer).__name__}.{name}", p, layer.grads[name]))
        return out

    def parameters(self) -> list:
        return [p for _, p, _ in self.named_parameters()]

    def gradients(self) -> list:
        return [g for _, _, g in self.named_parameters()]

    def state(self) -> list:
        return [p.copy() for p in self.parameters()]

    def load_state(self, arrays: list):
        params = self.parameters()
        if len(arrays) != len(params):
            raise StateError(f"state has {len(arrays)} arrays, model has {len(params)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ShapeError(f"state shape {a.shape} != parameter shape {p.shape}")
            p[...] = a
