"""Sequential networks with hand-written backward passes.

Layer ``l`` maps ``trace.inputs[l]`` to ``trace.outputs[l]``. When a
dropout plan is active at layer ``L``, ``outputs[L]`` keeps the clean
activations and ``inputs[L + 1]`` holds the masked, rescaled ones.
"""

from dataclasses import dataclass, field
import math
import struct

import numpy as np

from . import tensor as T
from .exceptions import DimensionError, FormatError, ValidationError

MAGIC = b"EDCK"
VERSION = 1


class Layer:
    kind = None
    has_params = False

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2D(Layer):
    kind = 1
    has_params = True

    def __init__(self, weights, bias, stride=1, pad=0):
        self.weights = T.as_tensor(weights)
        self.bias = T.as_tensor(bias)
        self.stride = int(stride)
        self.pad = int(pad)
        if self.weights.ndim != 4 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"Conv2D: weights {self.weights.shape} / bias {self.bias.shape}"
            )

    def output_shape(self, in_shape):
        C, H, W = in_shape
        K, Ck, kh, kw = self.weights.shape
        if C != Ck:
            raise DimensionError(f"Conv2D expects {Ck} channels, got {C}")
        return (
            K,
            T.conv_output_size(H, kh, self.stride, self.pad),
            T.conv_output_size(W, kw, self.stride, self.pad),
        )

    def forward(self, x):
        K, C, kh, kw = self.weights.shape
        cols, Ho, Wo = T.im2col(x, kh, kw, self.stride, self.pad)
        out = T._conv_cols(cols, self.weights, self.bias, x.shape[0], Ho, Wo)
        return out, (cols, x.shape)

    def backward(self, dout, cache, need_dx=True):
        cols, x_shape = cache
        K, C, kh, kw = self.weights.shape
        d = dout.transpose(1, 0, 2, 3).reshape(K, -1)
        dW = (d @ cols.T).reshape(self.weights.shape)
        db = d.sum(axis=1)
        dx = self.input_adjoint(dout, x_shape) if need_dx else None
        return dx, (T.as_tensor(dW), T.as_tensor(db))

    def input_adjoint(self, dout, x_shape, weights=None):
        """Transpose of the convolution applied to ``dout``."""
        w = self.weights if weights is None else weights
        K, C, kh, kw = w.shape
        if self.stride == 1 and kh - 1 - self.pad >= 0 and kw == kh:
            flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            return T.conv2d(dout, flipped, np.zeros(C, T.DTYPE), 1, kh - 1 - self.pad)
        d = dout.transpose(1, 0, 2, 3).reshape(K, -1)
        return T.col2im(w.reshape(K, -1).T @ d, x_shape, kh, kw, self.stride, self.pad)

    def __repr__(self):
        return f"Conv2D({self.weights.shape}, stride={self.stride}, pad={self.pad})"


class MaxPool2D(Layer):
    kind = 2

    def __init__(self, window=2, stride=2):
        self.window = int(window)
        self.stride = int(stride)

    def output_shape(self, in_shape):
        C, H, W = in_shape
        if self.window > H or self.window > W:
            raise DimensionError(f"MaxPool2D window {self.window} exceeds {H}x{W}")
        return (C, (H - self.window) // self.stride + 1, (W - self.window) // self.stride + 1)

    def forward(self, x):
        out, idx = T.maxpool2d(x, self.window, self.stride)
        return out, (idx, x.shape)

    def backward(self, dout, cache):
        idx, x_shape = cache
        return T.unpool(dout, idx, x_shape), None

    def __repr__(self):
        return f"MaxPool2D(window={self.window}, stride={self.stride})"


class ReLU(Layer):
    kind = 3

    def forward(self, x):
        out = np.maximum(x, T.DTYPE(0))
        return out, None

    def backward(self, dout, cache):
        raise AssertionError("ReLU backward needs its output; handled by Network")


class Flatten(Layer):
    kind = 4

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), None


class Dense(Layer):
    """Fully-connected layer; ``weights[i, j]`` connects input ``i`` to output ``j``."""

    kind = 5
    has_params = True

    def __init__(self, weights, bias):
        self.weights = T.as_tensor(weights)
        self.bias = T.as_tensor(bias)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise DimensionError(f"Dense: weights {self.weights.shape} / bias {self.bias.shape}")

    def output_shape(self, in_shape):
        if in_shape != (self.weights.shape[0],):
            raise DimensionError(f"Dense expects ({self.weights.shape[0]},), got {in_shape}")
        return (self.weights.shape[1],)

    def forward(self, x):
        out = x @ self.weights
        out += self.bias
        return out, x

    def backward(self, dout, cache):
        x = cache
        dW = x.T @ dout
        db = dout.sum(axis=0)
        dx = dout @ self.weights.T
        return dx, (T.as_tensor(dW), T.as_tensor(db))

    def __repr__(self):
        return f"Dense({self.weights.shape[0]} -> {self.weights.shape[1]})"


class Network:
    """Ordered layer list with a frozen snapshot of the initial parameters."""

    def __init__(self, layers, input_shape, initial_weights=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = tuple(layer.output_shape(shape))
            shapes.append(shape)
        self.shapes = shapes
        if initial_weights is None:
            initial_weights = [(l.weights.copy(), l.bias.copy()) for l in self.param_layers()]
        initial_weights = [(T.as_tensor(w).copy(), T.as_tensor(b).copy()) for w, b in initial_weights]
        for (w, b), layer in zip(initial_weights, self.param_layers(), strict=True):
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise DimensionError("initial weights do not match layer shapes")
            w.setflags(write=False)
            b.setflags(write=False)
        self.initial_weights = initial_weights

    def param_layers(self):
        return [l for l in self.layers if l.has_params]

    def param_index(self, layer_index):
        """Position of ``layers[layer_index]`` among parameterised layers."""
        return [i for i, l in enumerate(self.layers) if l.has_params].index(layer_index)

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    def width(self, layer_index):
        return int(np.prod(self.shapes[layer_index]))

    def dropout_layer(self):
        """Index of the rectified output of the first fully-connected layer."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], ReLU):
                    return i + 1
                return i
        raise ValidationError("network has no fully-connected layer")

    def last_conv_layer(self):
        """Index of the rectified output of the last convolution."""
        idx = [i for i, l in enumerate(self.layers) if isinstance(l, Conv2D)]
        if not idx:
            raise ValidationError("network has no convolution layer")
        i = idx[-1]
        if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], ReLU):
            return i + 1
        return i

    def copy(self):
        return load_checkpoint_bytes(checkpoint_bytes(self))

    def __repr__(self):
        body = ", ".join(repr(l) for l in self.layers)
        return f"Network(input={self.input_shape}, [{body}])"


@dataclass
class ForwardTrace:
    inputs: list
    outputs: list
    caches: list
    plan: object = None
    net_id: int = 0
    logits: np.ndarray = field(default=None, repr=False)
    probs: np.ndarray = field(default=None, repr=False)

    @property
    def batch_size(self):
        return self.inputs[0].shape[0]


def softmax(logits):
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _apply_plan(out, plan):
    factor = plan.factor
    B = out.shape[0]
    if factor.shape[-1] != int(np.prod(out.shape[1:])):
        raise DimensionError(
            f"dropout mask width {factor.shape[-1]} does not match layer width "
            f"{int(np.prod(out.shape[1:]))}"
        )
    if factor.shape[0] not in (1, B):
        raise DimensionError(f"dropout masks for {factor.shape[0]} samples, batch has {B}")
    return (out.reshape(B, -1) * factor).reshape(out.shape)


def _run(net, trace, start, plan):
    x = trace.inputs[start]
    for l in range(start, len(net.layers)):
        out, cache = net.layers[l].forward(x)
        trace.outputs[l] = out
        trace.caches[l] = cache
        if plan is not None and l == plan.layer_index:
            out = _apply_plan(out, plan)
        if l + 1 < len(net.layers):
            trace.inputs[l + 1] = out
        x = out
    trace.logits = trace.outputs[-1]
    trace.probs = softmax(trace.logits)
    return trace


def forward(net, batch, plan=None):
    batch = T.as_tensor(batch)
    if batch.ndim == len(net.input_shape):
        batch = batch[None]
    if tuple(batch.shape[1:]) != net.input_shape:
        raise DimensionError(f"batch {batch.shape} does not match input {net.input_shape}")
    if plan is not None and not 0 <= plan.layer_index < len(net.layers):
        raise ValidationError(f"dropout layer {plan.layer_index} out of range")
    n = len(net.layers)
    trace = ForwardTrace([None] * n, [None] * n, [None] * n, plan, id(net))
    trace.inputs[0] = batch
    return _run(net, trace, 0, plan)


def forward_from(net, trace, plan):
    """Recompute only the layers above ``plan.layer_index``, reusing ``trace``."""
    if trace.net_id != id(net):
        raise ValidationError("trace was not produced by this network")
    L = plan.layer_index
    n = len(net.layers)
    new = ForwardTrace(
        trace.inputs[: L + 1] + [None] * (n - L - 1),
        trace.outputs[: L + 1] + [None] * (n - L - 1),
        trace.caches[: L + 1] + [None] * (n - L - 1),
        plan,
        id(net),
    )
    out = _apply_plan(new.outputs[L], plan)
    if L + 1 == n:
        new.outputs[L] = trace.outputs[L]
        new.logits = out
        new.probs = softmax(out)
        return new
    new.inputs[L + 1] = out
    return _run(net, new, L + 1, plan)


def loss_softmax_ce(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"{labels.shape[0]} labels for {B} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValidationError(f"labels must lie in [0, {K})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsum - z[rows, labels]))
    p = np.exp(z - logsum[:, None])
    p[rows, labels] -= 1.0
    return loss, T.as_tensor(p / B)


def backward(net, trace, dlogits, plan=None):
    """Gradients for every layer (``None`` for parameter-free layers)."""
    if trace.net_id != id(net) or len(trace.outputs) != len(net.layers):
        raise ValidationError("trace was not produced by this network")
    if plan is not trace.plan:
        raise ValidationError("backward plan differs from the forward plan")
    d = T.as_tensor(dlogits)
    if d.shape != trace.logits.shape:
        raise DimensionError(f"dlogits {d.shape} vs logits {trace.logits.shape}")
    grads = [None] * len(net.layers)
    for l in range(len(net.layers) - 1, -1, -1):
        if plan is not None and l == plan.layer_index:
            d = (d.reshape(d.shape[0], -1) * plan.factor).reshape(d.shape)
        layer = net.layers[l]
        if isinstance(layer, ReLU):
            d = d * (trace.outputs[l] > 0)
        elif isinstance(layer, Conv2D):
            d, grads[l] = layer.backward(d, trace.caches[l], need_dx=l > 0)
        else:
            d, g = layer.backward(d, trace.caches[l])
            grads[l] = g
    return grads


def sgd_step(net, grads, lr):
    if len(grads) != len(net.layers):
        raise ValidationError(f"{len(grads)} gradient entries for {len(net.layers)} layers")
    lr = T.DTYPE(lr)
    for layer, g in zip(net.layers, grads):
        if not layer.has_params:
            continue
        if g is None:
            raise ValidationError(f"missing gradient for {layer!r}")
        dW, db = g
        if dW.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ValidationError(f"gradient shapes do not match {layer!r}")
        layer.weights -= lr * dW
        layer.bias -= lr * db


def _he_normal(rng, shape, fan_in):
    return T.as_tensor(rng.normal(shape, std=math.sqrt(2.0 / fan_in)))


def build_cnn2(num_classes, input_shape=(3, 32, 32), rng=None, channels=(32, 32, 64),
               fc_width=2048, kernel=5):
    """Three conv-relu-pool stages, then fc-relu-fc."""
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    rng = rng if rng is not None else T.Rng(0)
    layers = []
    c = input_shape[0]
    for k in channels:
        fan_in = c * kernel * kernel
        layers.append(Conv2D(_he_normal(rng, (k, c, kernel, kernel), fan_in),
                             np.zeros(k, T.DTYPE), stride=1, pad=kernel // 2))
        layers += [ReLU(), MaxPool2D(2, 2)]
        c = k
    layers.append(Flatten())
    flat = Network(layers, input_shape).shapes[-1][0]
    layers += [
        Dense(_he_normal(rng, (flat, fc_width), flat), np.zeros(fc_width, T.DTYPE)),
        ReLU(),
        Dense(_he_normal(rng, (fc_width, num_classes), fc_width), np.zeros(num_classes, T.DTYPE)),
    ]
    return Network(layers, input_shape)


def build_cnn2_mini(num_classes, input_shape=(3, 32, 32), rng=None):
    """Narrow CNN-2 sized for single-core CPU training."""
    return build_cnn2(num_classes, input_shape, rng, channels=(8, 16, 16), fc_width=256)


def build_mlp(num_classes, input_shape, rng=None, hidden=64):
    """Flatten, fc-relu, fc; the dropout layer is the hidden ReLU."""
    rng = rng if rng is not None else T.Rng(0)
    d = int(np.prod(input_shape))
    return Network(
        [
            Flatten(),
            Dense(_he_normal(rng, (d, hidden), d), np.zeros(hidden, T.DTYPE)),
            ReLU(),
            Dense(_he_normal(rng, (hidden, num_classes), hidden), np.zeros(num_classes, T.DTYPE)),
        ],
        input_shape,
    )


ARCHITECTURES = {"cnn2": build_cnn2, "cnn2-mini": build_cnn2_mini, "mlp": build_mlp}


# -- checkpoint format -------------------------------------------------------
#
#   "EDCK" | u16 version | u32 C, H, W | u32 n_layers
#   per layer: u8 kind, then
#       Conv2D:    u32 stride, u32 pad, u32 K, C, kh, kw
#       MaxPool2D: u32 window, u32 stride
#       ReLU, Flatten: nothing
#       Dense:     u32 n_in, u32 n_out
#   current weights: per parameterised layer, weights then bias, f32
#   initial weights: same layout
#
# Everything little-endian.


def checkpoint_bytes(net):
    parts = [MAGIC, struct.pack("<H", VERSION),
             struct.pack("<3I", *net.input_shape), struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<B", layer.kind))
        if isinstance(layer, Conv2D):
            parts.append(struct.pack("<6I", layer.stride, layer.pad, *layer.weights.shape))
        elif isinstance(layer, MaxPool2D):
            parts.append(struct.pack("<2I", layer.window, layer.stride))
        elif isinstance(layer, Dense):
            parts.append(struct.pack("<2I", *layer.weights.shape))
    for w, b in [(l.weights, l.bias) for l in net.param_layers()] + net.initial_weights:
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(net))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes", self.pos, self.path)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(T.DTYPE).reshape(shape)


def load_checkpoint_bytes(buf, path=None):
    r = _Reader(bytes(buf), path)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic", 0, path)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    input_shape = r.unpack("<3I")
    (n_layers,) = r.unpack("<I")
    table = []
    for _ in range(n_layers):
        at = r.pos
        (kind,) = r.unpack("<B")
        if kind == Conv2D.kind:
            table.append((kind, r.unpack("<6I")))
        elif kind == MaxPool2D.kind:
            table.append((kind, r.unpack("<2I")))
        elif kind in (ReLU.kind, Flatten.kind):
            table.append((kind, ()))
        elif kind == Dense.kind:
            table.append((kind, r.unpack("<2I")))
        else:
            raise FormatError(f"unknown layer kind {kind}", at, path)

    def param_shapes():
        for kind, hp in table:
            if kind == Conv2D.kind:
                yield hp[2:], (hp[2],)
            elif kind == Dense.kind:
                yield hp, (hp[1],)

    current = [(r.floats(ws), r.floats(bs)) for ws, bs in param_shapes()]
    initial = [(r.floats(ws), r.floats(bs)) for ws, bs in param_shapes()]
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after checkpoint", r.pos, path)
    layers = []
    it = iter(current)
    for kind, hp in table:
        if kind == Conv2D.kind:
            w, b = next(it)
            layers.append(Conv2D(w.copy(), b.copy(), stride=hp[0], pad=hp[1]))
        elif kind == MaxPool2D.kind:
            layers.append(MaxPool2D(*hp))
        elif kind == ReLU.kind:
            layers.append(ReLU())
        elif kind == Flatten.kind:
            layers.append(Flatten())
        else:
            w, b = next(it)
            layers.append(Dense(w.copy(), b.copy()))
    try:
        return Network(layers, input_shape, initial)
    except DimensionError as e:
        raise FormatError(f"inconsistent layer table: {e}", None, path) from e


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    return load_checkpoint_bytes(buf, str(path))
