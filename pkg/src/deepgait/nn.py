"""Small numpy neural-network kernels with hand-written backward passes.

Convolutional activations are channel-first: ``(channel, batch, sensor, time)``,
which keeps im2col and its adjoint free of transposes. A batch of IMU windows
enters the network as ``(1, B, 6, 149)``; dense activations are ``(B, N)``.

Each op comes as a pair of pure functions (``*_forward`` / ``*_backward``) and
as a layer object that caches what its backward pass needs. Layers expose
``params`` and ``grads`` dicts keyed by parameter name so the optimizer can
walk them without knowing layer types.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class ShapeMismatch(ValueError):
    pass


def _check_ndim(x, ndim, what):
    if x.ndim != ndim:
        raise ShapeMismatch(f"{what}: expected {ndim}-d array, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution (3x3, stride 1, zero "same" padding on both spatial axes)

def _im2col(x):
    """(C, B, H, W) -> (C*9, B*H*W) patch matrix of the zero-padded input."""
    C, B, H, W = x.shape
    xp = np.zeros((C, B, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((C, 9, B, H, W), dtype=x.dtype)
    for k in range(9):
        di, dj = divmod(k, 3)
        cols[:, k] = xp[:, :, di:di + H, dj:dj + W]
    return cols.reshape(C * 9, B * H * W)


def _col2im(cols, shape):
    C, B, H, W = shape
    cols = cols.reshape(C, 9, B, H, W)
    gxp = np.zeros((C, B, H + 2, W + 2), dtype=cols.dtype)
    for k in range(9):
        di, dj = divmod(k, 3)
        gxp[:, :, di:di + H, dj:dj + W] += cols[:, k]
    return gxp[:, :, 1:-1, 1:-1]


def _as_batch(x):
    if x.ndim == 3:
        return x[:, None], True
    _check_ndim(x, 4, "conv2d input")
    return x, False


def conv2d_forward(x, w, b, cols=None):
    """Same-padded 3x3 convolution on a channel-first ``(C_in, B, H, W)`` array.

    ``out[o, n, i, j] = b[o] + sum_{c, di, dj} w[o, c, di, dj] * xpad[c, n, i + di, j + dj]``

    A 3-d ``x`` of shape (C_in, H, W) is a single sample.
    """
    x, single = _as_batch(x)
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeMismatch(f"conv2d kernel must be (C_out, C_in, 3, 3), got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv2d: kernel expects {w.shape[1]} input channels, input has {x.shape[0]}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d bias shape {b.shape} does not match {w.shape[0]} output channels")
    C, B, H, W = x.shape
    O = w.shape[0]
    if cols is None:
        cols = _im2col(x)
    out = w.reshape(O, C * 9) @ cols
    out += b[:, None]
    out = out.reshape(O, B, H, W)
    return out[:, 0] if single else out


def conv2d_backward(x, w, grad_out, cols=None):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv2d_forward`."""
    x, single = _as_batch(x)
    if single:
        grad_out = grad_out[:, None]
    C, B, H, W = x.shape
    O = w.shape[0]
    if grad_out.shape != (O, B, H, W):
        raise ShapeMismatch(f"conv2d grad_out shape {grad_out.shape}, expected {(O, B, H, W)}")
    if cols is None:
        cols = _im2col(x)
    g2 = grad_out.reshape(O, B * H * W)
    grad_w = (g2 @ cols.T).reshape(w.shape)
    grad_b = g2.sum(axis=1)
    grad_x = _col2im(w.reshape(O, C * 9).T @ g2, x.shape)
    return (grad_x[:, 0] if single else grad_x), grad_w, grad_b


# --------------------------------------------------------------------------
# elementwise / pooling

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    if grad_out.shape != x.shape:
        raise ShapeMismatch(f"relu grad shape {grad_out.shape} != input shape {x.shape}")
    return grad_out * (x > 0)


def maxpool_time_forward(x):
    """1x2 max pooling along the last (time) axis; odd extents drop the last sample.

    Returns ``(out, idx)`` where ``idx`` is True where the later element of a
    pair was selected. Ties resolve to the earlier sample.
    """
    if x.shape[-1] < 2:
        raise ShapeMismatch(f"maxpool_time needs a time extent >= 2, got {x.shape[-1]}")
    wo = x.shape[-1] // 2
    even, odd = x[..., 0:2 * wo:2], x[..., 1:2 * wo:2]
    idx = odd > even
    return np.where(idx, odd, even), idx


def maxpool_time_backward(in_shape, idx, grad_out):
    if grad_out.shape != idx.shape:
        raise ShapeMismatch(f"maxpool grad shape {grad_out.shape} != output shape {idx.shape}")
    wo = idx.shape[-1]
    grad = np.zeros(in_shape, dtype=grad_out.dtype)
    grad[..., 0:2 * wo:2] = np.where(idx, 0, grad_out)
    grad[..., 1:2 * wo:2] = np.where(idx, grad_out, 0)
    return grad


def _bn_axes(x):
    if x.ndim == 4:
        return (1, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeMismatch(f"batchnorm expects 2-d or 4-d input, got shape {x.shape}")


def _per_channel(v, ndim):
    return v.reshape(-1, 1, 1, 1) if ndim == 4 else v.reshape(1, -1)


def _channels(x):
    return x.shape[0] if x.ndim == 4 else x.shape[1]


def batchnorm_forward(x, gamma, beta, running_mean, running_var, *, train,
                      momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In train mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, PyTorch convention). Returns
    ``(out, cache)``; ``cache`` is None in infer mode.
    """
    axes = _bn_axes(x)
    C = _channels(x)
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"batchnorm parameters must have shape ({C},)")
    if not train:
        scale = gamma / np.sqrt(running_var + eps)
        shift = beta - running_mean * scale
        return x * _per_channel(scale, x.ndim) + _per_channel(shift, x.ndim), None
    mean = x.mean(axis=axes)
    xc = x - _per_channel(mean, x.ndim)
    var = (xc * xc).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * _per_channel(inv_std, x.ndim)
    m = x.size // C
    running_mean *= 1 - momentum
    running_mean += momentum * mean
    running_var *= 1 - momentum
    running_var += momentum * var * (m / max(m - 1, 1))
    out = xhat * _per_channel(gamma, x.ndim) + _per_channel(beta, x.ndim)
    return out, (xhat, inv_std, gamma)


def batchnorm_backward(cache, grad_out):
    """Return ``(grad_x, grad_gamma, grad_beta)`` for a train-mode forward."""
    xhat, inv_std, gamma = cache
    if grad_out.shape != xhat.shape:
        raise ShapeMismatch(f"batchnorm grad shape {grad_out.shape} != {xhat.shape}")
    axes = _bn_axes(xhat)
    nd = xhat.ndim
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    m = xhat.size // _channels(xhat)
    gxhat = grad_out * _per_channel(gamma, nd)
    grad_x = (_per_channel(inv_std / m, nd)
              * (m * gxhat
                 - _per_channel(gxhat.sum(axis=axes), nd)
                 - xhat * _per_channel((gxhat * xhat).sum(axis=axes), nd)))
    return grad_x, grad_gamma, grad_beta


def dense_forward(x, w, b):
    _check_ndim(x, 2, "dense input")
    if w.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w.T + b


def dense_backward(x, w, grad_out):
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ShapeMismatch(f"dense grad_out shape {grad_out.shape}")
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def dropout_mask(shape, p, rng, dtype=np.float64):
    """Inverted-dropout mask: entries are 0 or 1/(1-p)."""
    if p == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def dropout_forward(x, mask):
    if mask is None:
        return x
    if mask.shape != x.shape:
        raise ShapeMismatch(f"dropout mask shape {mask.shape} != input shape {x.shape}")
    return x * mask


def dropout_backward(mask, grad_out):
    return grad_out if mask is None else grad_out * mask


# --------------------------------------------------------------------------
# layer objects

class Layer:
    """Base class: parameter-free layers only override forward/backward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def describe(self) -> str:
        return type(self).__name__


class Conv2D(Layer):
    def __init__(self, c_in, c_out, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.params = {"w": np.zeros((c_out, c_in, 3, 3), dtype), "b": np.zeros(c_out, dtype)}

    def forward(self, x, train=False):
        self._x = x
        self._cols = _im2col(x)
        return conv2d_forward(x, self.params["w"], self.params["b"], cols=self._cols)

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.params["w"], grad, cols=self._cols)
        self.grads = {"w": gw, "b": gb}
        self._cols = None
        return gx

    def describe(self):
        return f"Conv3x3 {self.c_in}->{self.c_out}"


class ReLU(Layer):
    def forward(self, x, train=False):
        self._x = x
        return relu_forward(x)

    def backward(self, grad):
        return relu_backward(self._x, grad)


class BatchNorm(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype),
                        "running_var": np.ones(channels, dtype)}

    def forward(self, x, train=False):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train=train, momentum=self.momentum, eps=self.eps)
        return out

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("batchnorm backward requires a train-mode forward")
        gx, gg, gb = batchnorm_backward(self._cache, grad)
        self.grads = {"gamma": gg, "beta": gb}
        return gx

    def describe(self):
        return f"BatchNorm {self.channels}"


class MaxPoolTime(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        out, self._idx = maxpool_time_forward(x)
        return out

    def backward(self, grad):
        return maxpool_time_backward(self._shape, self._idx, grad)

    def describe(self):
        return "MaxPool 1x2"


class Flatten(Layer):
    """(C, B, H, W) -> (B, C*H*W)."""

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)

    def backward(self, grad):
        C, B, H, W = self._shape
        return grad.reshape(B, C, H, W).transpose(1, 0, 2, 3)


class Dense(Layer):
    def __init__(self, n_in, n_out, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params = {"w": np.zeros((n_out, n_in), dtype), "b": np.zeros(n_out, dtype)}

    def forward(self, x, train=False):
        self._x = x
        return dense_forward(x, self.params["w"], self.params["b"])

    def backward(self, grad):
        gx, gw, gb = dense_backward(self._x, self.params["w"], grad)
        self.grads = {"w": gw, "b": gb}
        return gx

    def describe(self):
        return f"Dense {self.n_in}->{self.n_out}"


class Dropout(Layer):
    def __init__(self, p=0.5, rng=None):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, train=False):
        self._mask = dropout_mask(x.shape, self.p, self.rng, x.dtype) if train and self.p > 0 else None
        return dropout_forward(x, self._mask)

    def backward(self, grad):
        return dropout_backward(self._mask, grad)

    def describe(self):
        return f"Dropout p={self.p}"


def param_count(obj) -> int:
    """Trainable parameter count of a layer or an iterable of layers.

    Batch-norm running statistics are buffers, not parameters.
    """
    if isinstance(obj, Layer):
        return obj.param_count()
    return sum(param_count(layer) for layer in obj)


# --------------------------------------------------------------------------
# tensor blobs: b"DGTN" | u1 dtype code | u1 ndim | ndim x u8 extents | LE data

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}
_MAGIC = b"DGTN"


def tensor_to_bytes(a) -> bytes:
    a = np.asarray(a)
    dt = a.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise TypeError(f"unsupported dtype for serialization: {a.dtype}")
    header = _MAGIC + struct.pack("<BB", _CODES[dt], a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a, dtype=dt).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != _MAGIC:
        raise ValueError("not a tensor blob")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 6)
    dt = _DTYPES[code]
    off = 6 + 8 * ndim
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + n * dt.itemsize:
        raise ValueError("tensor blob length does not match its header")
    return np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, a):
    Path(path).write_bytes(tensor_to_bytes(a))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
