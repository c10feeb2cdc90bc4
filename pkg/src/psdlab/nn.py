"""A small numpy neural-network engine: layers with explicit forward/backward.

Arrays are NCHW for images and (N, features) after flattening. The reference
path is float64; networks may run in float32 for speed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# functional forms

def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(x, k, padding, stride):
    """(N, C, H, W) -> columns (N*Ho*Wo, C*k*k) plus (Ho, Wo)."""
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_forward(x, weights, bias, padding=2, stride=1):
    """Cross-correlation: out[n,f,i,j] = b[f] + sum w[f,c,u,v] xpad[n,c,i*s+u,j*s+v]."""
    n, c, h, w = x.shape
    f, cw, k, k2 = weights.shape
    if cw != c:
        raise ShapeError(f"input has {c} channels, filters expect {cw}")
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"{h}x{w} input is smaller than the {k}x{k} kernel")
    cols, ho, wo = _im2col(x, k, padding, stride)
    out = cols @ weights.reshape(f, -1).T + bias
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)


def conv2d_backward(x, weights, grad_out, padding=2, stride=1, cols=None):
    """Returns (grad_input, grad_weights, grad_bias)."""
    n, c, h, w = x.shape
    f, _, k, _ = weights.shape
    if cols is None:
        cols, ho, wo = _im2col(x, k, padding, stride)
    else:
        ho, wo = grad_out.shape[2:]
    if grad_out.shape != (n, f, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {(n, f, ho, wo)}")
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, f)
    grad_w = (g2.T @ cols).reshape(weights.shape)
    grad_b = g2.sum(axis=0)
    gcols = (g2 @ weights.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for u in range(k):
        for v in range(k):
            gxp[:, :, u:u + span_h:stride, v:v + span_w:stride] += gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return gxp, grad_w, grad_b


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError("batch norm expects 2-D or 4-D input")


def batchnorm_forward(x, gamma, beta, mode="train", running_mean=None, running_var=None,
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalization; returns (out, cache).

    In train mode the running statistics (if given) are updated in place with
    the unbiased batch variance.
    """
    axes, shape = _bn_axes(x)
    if mode == "train":
        count = x.size // x.shape[1]
        if x.shape[0] < 2:
            raise ShapeError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * count / max(count - 1, 1)
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, mode)


def batchnorm_backward(grad_out, cache):
    """Returns (grad_input, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma, mode = cache
    axes, shape = _bn_axes(grad_out)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    g = grad_out * gamma.reshape(shape)
    if mode == "infer":
        return g * inv_std.reshape(shape), grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    grad_x = (inv_std.reshape(shape) / m) * (
        m * g - g.sum(axis=axes).reshape(shape) - xhat * (g * xhat).sum(axis=axes).reshape(shape))
    return grad_x, grad_gamma, grad_beta


def pool_output_size(n, pool=3, stride=2):
    return (n - pool) // stride + 1


def maxpool_forward(x, pool=3, stride=2):
    """Returns (out, argmax) with argmax in [0, pool*pool) per output cell.

    No padding; ties resolve to the first maximum in row-major window order.
    """
    n, c, h, w = x.shape
    if h < pool or w < pool:
        raise ShapeError(f"{h}x{w} input is smaller than the {pool}x{pool} pooling window")
    win = sliding_window_view(x, (pool, pool), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], pool * pool)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(grad_out, arg, input_shape, pool=3, stride=2):
    gx = np.zeros(input_shape, dtype=grad_out.dtype)
    ho, wo = grad_out.shape[2:]
    for u in range(pool):
        for v in range(pool):
            mask = arg == (u * pool + v)
            gx[:, :, u:u + stride * (ho - 1) + 1:stride, v:v + stride * (wo - 1) + 1:stride] += grad_out * mask
    return gx


def dropout(x, p=0.2, mode="train", rng=None, per_channel=False):
    """Inverted dropout; returns (out, mask). ``per_channel`` drops whole feature maps."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if mode != "train" or p == 0:
        return x, None
    if rng is None:
        rng = np.random.default_rng()
    shape = x.shape[:2] + (1,) * (x.ndim - 2) if per_channel else x.shape
    mask = (rng.random(shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dense_forward(x, weights, bias):
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"input of shape {x.shape} does not fit weights {weights.shape}")
    return x @ weights + bias


def dense_backward(x, weights, grad_out):
    """Returns (grad_input, grad_weights, grad_bias)."""
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def half_mse_loss(pred, target):
    """loss = sum((pred - target)**2) / (2 * pred.size); returns (loss, grad)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(0.5 * np.sum(diff.astype(np.float64) ** 2) / diff.size), diff / diff.size


@dataclass
class OptimizerState:
    lr: float = 1e-4
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)


def sgdm_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """Classical momentum, in place: v <- m v - lr g; w <- w + v."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        v *= state.momentum
        v -= state.lr * g
        w += v


# ---------------------------------------------------------------------------
# layers

@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)


class Layer:
    kind = ""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind, {})

    def output_shape(self, shape):
        return shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels, filters, kernel=5, padding=2, stride=1, rng=None, dtype=np.float64):
        super().__init__()
        self.in_channels, self.filters = in_channels, filters
        self.kernel, self.padding, self.stride = kernel, padding, stride
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.params["w"] = (rng.standard_normal((filters, in_channels, kernel, kernel))
                            * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(filters, dtype=dtype)

    def spec(self):
        return LayerSpec(self.kind, dict(in_channels=self.in_channels, filters=self.filters,
                                         kernel=self.kernel, padding=self.padding, stride=self.stride))

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{h}x{w} input is too small for a {self.kernel}x{self.kernel} kernel")
        return (self.filters, ho, wo)

    def forward(self, x, train=False):
        self._x = x
        self._cols, ho, wo = _im2col(x, self.kernel, self.padding, self.stride)
        w = self.params["w"]
        out = self._cols @ w.reshape(self.filters, -1).T + self.params["b"]
        return out.reshape(x.shape[0], ho, wo, self.filters).transpose(0, 3, 1, 2)

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.params["w"], grad, self.padding, self.stride, cols=self._cols)
        self.grads["w"], self.grads["b"] = gw, gb
        self._cols = None
        return gx


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def spec(self):
        return LayerSpec(self.kind, dict(channels=self.channels))

    def forward(self, x, train=False):
        out, self._cache = batchnorm_forward(x, self.params["gamma"], self.params["beta"],
                                             "train" if train else "infer",
                                             self.buffers["running_mean"], self.buffers["running_var"])
        return out

    def backward(self, grad):
        gx, self.grads["gamma"], self.grads["beta"] = batchnorm_backward(grad, self._cache)
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._x = x
        return relu(x)

    def backward(self, grad):
        return relu_backward(self._x, grad)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, pool=3, stride=2):
        super().__init__()
        self.pool, self.stride = pool, stride

    def spec(self):
        return LayerSpec(self.kind, dict(pool=self.pool, stride=self.stride))

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.pool or w < self.pool:
            raise ShapeError(f"{h}x{w} feature map is smaller than the {self.pool}x{self.pool} pool")
        return (c, pool_output_size(h, self.pool, self.stride), pool_output_size(w, self.pool, self.stride))

    def forward(self, x, train=False):
        self._shape = x.shape
        out, self._arg = maxpool_forward(x, self.pool, self.stride)
        return out

    def backward(self, grad):
        return maxpool_backward(grad, self._arg, self._shape, self.pool, self.stride)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p=0.2, per_channel=False, seed=0):
        super().__init__()
        self.p, self.per_channel, self.seed = p, per_channel, seed
        self.rng = np.random.default_rng(seed)

    def spec(self):
        return LayerSpec(self.kind, dict(p=self.p, per_channel=self.per_channel, seed=self.seed))

    def forward(self, x, train=False):
        out, self._mask = dropout(x, self.p, "train" if train else "infer", self.rng, self.per_channel)
        return out

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, inputs, units, rng=None, dtype=np.float64):
        super().__init__()
        self.inputs, self.units = inputs, units
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["w"] = (rng.standard_normal((inputs, units)) * np.sqrt(2.0 / inputs)).astype(dtype)
        self.params["b"] = np.zeros(units, dtype=dtype)

    def spec(self):
        return LayerSpec(self.kind, dict(inputs=self.inputs, units=self.units))

    def output_shape(self, shape):
        if shape != (self.inputs,):
            raise ShapeError(f"dense layer expects {self.inputs} inputs, got {shape}")
        return (self.units,)

    def forward(self, x, train=False):
        self._x = x
        return dense_forward(x, self.params["w"], self.params["b"])

    def backward(self, grad):
        gx, self.grads["w"], self.grads["b"] = dense_backward(self._x, self.params["w"], grad)
        return gx


class OutputLinear(Dense):
    """Final regression layer; a dense layer with no activation after it."""

    kind = "output-linear"


class Network:
    """Ordered layer stack with flat access to parameters and gradients."""

    def __init__(self, layers, input_shape, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)

    def shapes(self):
        """Dry-run shape pass; returns the per-layer output shapes."""
        shape = self.input_shape
        out = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self):
        return {f"{i}.{name}": p for i, layer in enumerate(self.layers) for name, p in layer.params.items()}

    def named_grads(self):
        return {f"{i}.{name}": g for i, layer in enumerate(self.layers) for name, g in layer.grads.items()}

    def named_buffers(self):
        return {f"{i}.{name}": b for i, layer in enumerate(self.layers) for name, b in layer.buffers.items()}

    def param_count(self) -> int:
        return int(sum(p.size for p in self.named_params().values()))

    def state(self):
        """Copies of all parameters, buffers and dropout generator states."""
        tensors = {k: v.copy() for k, v in {**self.named_params(), **self.named_buffers()}.items()}
        rngs = {i: layer.rng.bit_generator.state for i, layer in enumerate(self.layers)
                if isinstance(layer, Dropout)}
        return tensors, rngs

    def load_state(self, state):
        tensors, rngs = state
        for name, arr in {**self.named_params(), **self.named_buffers()}.items():
            arr[...] = tensors[name]
        for i, st in rngs.items():
            self.layers[i].rng.bit_generator.state = st


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: 8-byte magic b"PSDCKPT1", uint64 little-endian header length, UTF-8
# JSON header, then each tensor listed in header["tensors"] as float64
# little-endian values in C order, concatenated in header order.

MAGIC = b"PSDCKPT1"


def save_checkpoint(path, network: Network, extra: dict | None = None) -> None:
    tensors = {**network.named_params(), **network.named_buffers()}
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "format": "psdlab-checkpoint/1",
        "input_shape": list(network.input_shape),
        "dtype": network.dtype.name,
        "layers": [asdict(layer.spec()) for layer in network.layers],
        "tensors": entries,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path):
    """Returns (header dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path} is not a psdlab checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return header, arrays


def build_layer(spec: dict, dtype=np.float64) -> Layer:
    kind, p = spec["kind"], spec["params"]
    if kind == "conv":
        return Conv2D(p["in_channels"], p["filters"], p["kernel"], p["padding"], p["stride"], dtype=dtype)
    if kind == "batchnorm":
        return BatchNorm(p["channels"], dtype=dtype)
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool(p["pool"], p["stride"])
    if kind == "dropout":
        return Dropout(p["p"], p["per_channel"], p["seed"])
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(p["inputs"], p["units"], dtype=dtype)
    if kind == "output-linear":
        return OutputLinear(p["inputs"], p["units"], dtype=dtype)
    raise ValueError(f"unknown layer kind {kind!r}")


def load_checkpoint(path, dtype=None) -> tuple[Network, dict]:
    header, arrays = read_checkpoint(path)
    dtype = np.dtype(dtype or header.get("dtype", "float64"))
    net = Network([build_layer(s, dtype) for s in header["layers"]], header["input_shape"], dtype)
    for name, arr in {**net.named_params(), **net.named_buffers()}.items():
        arr[...] = arrays[name]
    return net, header.get("extra", {})
