"""Differentiable operators.

Each op validates shapes up front, computes the forward result in plain
numpy, and attaches a closure that converts the output adjoint into adjoint
contributions for its inputs. Binary elementwise ops require identical
shapes; there is no implicit broadcasting anywhere in the engine.
"""

import numpy as np

from .tensor import Tensor, add_adjoint, make_node

LEAKY_SLOPE = 0.01


def _require(cond, message):
    if not cond:
        raise ValueError(message)


def _scalar(g):
    """Adjoint of a size-1 output as a python float."""
    return float(np.asarray(g).reshape(-1)[0])


def _same_shape(name, a, b):
    _require(a.shape == b.shape,
             f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    _same_shape("add", a, b)

    def backward(g, table):
        add_adjoint(table, a, g)
        add_adjoint(table, b, g)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    _same_shape("sub", a, b)

    def backward(g, table):
        add_adjoint(table, a, g)
        add_adjoint(table, b, -g)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    _same_shape("mul", a, b)
    a_vals, b_vals = a.data, b.data

    def backward(g, table):
        add_adjoint(table, a, g * b_vals)
        add_adjoint(table, b, g * a_vals)

    return make_node(a_vals * b_vals, (a, b), backward, "mul")


def scale(x, factor):
    factor = float(factor)

    def backward(g, table):
        add_adjoint(table, x, g * factor)

    return make_node(x.data * factor, (x,), backward, "scale")


def shift(x, offset):
    """Add a python constant elementwise."""
    offset = float(offset)

    def backward(g, table):
        add_adjoint(table, x, g)

    return make_node(x.data + offset, (x,), backward, "shift")


def absolute(x):
    vals = x.data

    def backward(g, table):
        add_adjoint(table, x, g * np.sign(vals))

    return make_node(np.abs(vals), (x,), backward, "absolute")


def tanh(x):
    out_vals = np.tanh(x.data)

    def backward(g, table):
        add_adjoint(table, x, g * (1.0 - out_vals * out_vals))

    return make_node(out_vals, (x,), backward, "tanh")


def leaky_relu(x, slope=LEAKY_SLOPE):
    # subgradient at exactly 0 takes the positive branch
    gate = np.where(x.data >= 0.0, 1.0, slope)

    def backward(g, table):
        add_adjoint(table, x, g * gate)

    return make_node(x.data * gate, (x,), backward, "leaky_relu")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    _require(int(np.prod(shape, dtype=np.int64)) == x.size,
             f"reshape: cannot view {x.shape} as {shape}")
    old_shape = x.shape

    def backward(g, table):
        add_adjoint(table, x, g.reshape(old_shape))

    return make_node(x.data.reshape(shape), (x,), backward, "reshape")


def concat(parts):
    """Join 1-D tensors end to end."""
    parts = tuple(parts)
    _require(len(parts) >= 1, "concat: need at least one part")
    for p in parts:
        _require(p.data.ndim == 1, f"concat: parts must be 1-D, got {p.shape}")
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g, table):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            add_adjoint(table, p, g[lo:hi])

    values = np.concatenate([p.data for p in parts])
    return make_node(values, parts, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def linear(x, weight, bias):
    """weight (D_out, D_in) @ x (D_in,) + bias (D_out,)."""
    _require(x.data.ndim == 1, f"linear: input must be 1-D, got {x.shape}")
    _require(weight.data.ndim == 2 and weight.shape[1] == x.size,
             f"linear: weight {weight.shape} does not match input {x.shape}")
    _require(bias.shape == (weight.shape[0],),
             f"linear: bias {bias.shape} does not match weight {weight.shape}")
    x_vals, w_vals = x.data, weight.data

    def backward(g, table):
        add_adjoint(table, x, w_vals.T @ g)
        add_adjoint(table, weight, np.outer(g, x_vals))
        add_adjoint(table, bias, g)

    return make_node(w_vals @ x_vals + bias.data, (x, weight, bias),
                     backward, "linear")


def l2_distance(a, b):
    """Euclidean distance between two same-shape tensors, as a scalar.

    The gradient at coincident inputs is defined as zero.
    """
    _same_shape("l2_distance", a, b)
    diff = a.data - b.data
    dist = float(np.sqrt(np.sum(diff * diff)))

    def backward(g, table):
        if dist == 0.0:
            return
        d = (_scalar(g) / dist) * diff
        add_adjoint(table, a, d)
        add_adjoint(table, b, -d)

    return make_node(np.asarray(dist), (a, b), backward, "l2_distance")


# ---------------------------------------------------------------------------
# probability heads


def softmax(x):
    _require(x.data.ndim == 1, f"softmax: input must be 1-D, got {x.shape}")
    shifted = x.data - np.max(x.data)
    e = np.exp(shifted)
    y = e / np.sum(e)

    def backward(g, table):
        inner = float(np.dot(g, y))
        add_adjoint(table, x, y * (g - inner))

    return make_node(y, (x,), backward, "softmax")


def cross_entropy(logits, label):
    """Negative log softmax probability of the true class (stable fused form)."""
    _require(logits.data.ndim == 1,
             f"cross_entropy: logits must be 1-D, got {logits.shape}")
    label = int(label)
    _require(0 <= label < logits.size,
             f"cross_entropy: label {label} out of range for {logits.shape}")
    z = logits.data - np.max(logits.data)
    lse = float(np.log(np.sum(np.exp(z))))
    loss = lse - float(z[label])

    def backward(g, table):
        p = np.exp(z - lse)
        p[label] -= 1.0
        add_adjoint(table, logits, _scalar(g) * p)

    return make_node(np.asarray(loss), (logits,), backward, "cross_entropy")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logit(logit, target):
    """Binary cross-entropy against a logit, target in [0, 1]."""
    _require(logit.size == 1,
             f"bce_with_logit: logit must be scalar, got {logit.shape}")
    target = float(target)
    _require(0.0 <= target <= 1.0, f"bce_with_logit: target {target} not in [0,1]")
    z = logit.data.reshape(())
    loss = float(np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z))))

    def backward(g, table):
        s = _sigmoid(z.reshape(1))[0]
        add_adjoint(table, logit,
                    (_scalar(g) * (s - target)) * np.ones_like(logit.data))

    return make_node(np.asarray(loss), (logit,), backward, "bce_with_logit")


# ---------------------------------------------------------------------------
# pooling


def stats_pool(x, floor=1e-10):
    """Mean and population std over time: (T, D) -> (2D,), std floored."""
    _require(x.data.ndim == 2, f"stats_pool: input must be (T, D), got {x.shape}")
    t = x.shape[0]
    mu = x.data.mean(axis=0)
    centered = x.data - mu
    var = (centered * centered).mean(axis=0)
    sd = np.sqrt(var + floor)
    d = x.shape[1]

    def backward(g, table):
        g_mu, g_sd = g[:d], g[d:]
        dx = g_mu / t + (g_sd / (t * sd)) * centered
        add_adjoint(table, x, dx)

    return make_node(np.concatenate([mu, sd]), (x,), backward, "stats_pool")


def avg_pool2d(x, size=2):
    """Non-overlapping mean pooling over the spatial axes of (C, H, W).

    Trailing rows/columns that do not fill a window are dropped.
    """
    _require(x.data.ndim == 3, f"avg_pool2d: input must be (C,H,W), got {x.shape}")
    size = int(size)
    c, h, w = x.shape
    ho, wo = h // size, w // size
    _require(ho >= 1 and wo >= 1,
             f"avg_pool2d: input {x.shape} smaller than window {size}")
    he, we = ho * size, wo * size
    blocks = x.data[:, :he, :we].reshape(c, ho, size, wo, size)
    out = blocks.mean(axis=(2, 4))

    def backward(g, table):
        dx = np.zeros((c, h, w))
        spread = np.repeat(np.repeat(g / (size * size), size, axis=1),
                           size, axis=2)
        dx[:, :he, :we] = spread
        add_adjoint(table, x, dx)

    return make_node(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x):
    """(C, H, W) -> (C,), mean over all spatial positions."""
    _require(x.data.ndim == 3,
             f"global_avg_pool: input must be (C,H,W), got {x.shape}")
    c, h, w = x.shape

    def backward(g, table):
        add_adjoint(table, x, np.broadcast_to(g[:, None, None] / (h * w),
                                              (c, h, w)))

    return make_node(x.data.mean(axis=(1, 2)), (x,), backward,
                     "global_avg_pool")


def channel_scale(x, gate):
    """Multiply each channel of (C, H, W) by a per-channel gate (C,)."""
    _require(x.data.ndim == 3,
             f"channel_scale: input must be (C,H,W), got {x.shape}")
    _require(gate.shape == (x.shape[0],),
             f"channel_scale: gate {gate.shape} does not match {x.shape}")
    x_vals, g_vals = x.data, gate.data

    def backward(g, table):
        add_adjoint(table, x, g * g_vals[:, None, None])
        add_adjoint(table, gate, np.sum(g * x_vals, axis=(1, 2)))

    return make_node(x_vals * g_vals[:, None, None], (x, gate), backward,
                     "channel_scale")


# ---------------------------------------------------------------------------
# convolution


def _im2col(padded, k):
    """(C, Hp, Wp) -> (C*k*k, Ho*Wo) patch matrix."""
    c = padded.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    ho, wo = win.shape[1], win.shape[2]
    col = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return col, ho, wo


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _conv2d_values(x, kernel, padding):
    c_out = kernel.shape[0]
    col, ho, wo = _im2col(_pad_hw(x, padding), kernel.shape[2])
    return (kernel.reshape(c_out, -1) @ col).reshape(c_out, ho, wo)


def conv2d(x, kernel, padding):
    """Cross-correlation of (C_in, H, W) with (C_out, C_in, k, k), k odd.

    padding pads both spatial axes symmetrically with zeros; (k-1)/2
    preserves the spatial shape.
    """
    _require(x.data.ndim == 3, f"conv2d: input must be (C,H,W), got {x.shape}")
    _require(kernel.data.ndim == 4,
             f"conv2d: kernel must be (O,C,k,k), got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    _require(kh == kw, f"conv2d: kernel must be square, got {kernel.shape}")
    _require(kh % 2 == 1, f"conv2d: kernel size must be odd, got {kh}")
    _require(c_in == x.shape[0],
             f"conv2d: kernel expects {c_in} channels, input has {x.shape[0]}")
    padding = int(padding)
    _require(padding >= 0, f"conv2d: negative padding {padding}")
    h, w = x.shape[1], x.shape[2]
    _require(h + 2 * padding >= kh and w + 2 * padding >= kh,
             f"conv2d: input {x.shape} too small for kernel {kh}")
    x_vals, k_vals = x.data, kernel.data

    def backward(g, table):
        if x.requires_grad:
            flipped = np.ascontiguousarray(
                k_vals[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            full = _conv2d_values(_pad_hw(g, kh - 1), flipped, 0)
            if padding:
                full = full[:, padding:padding + h, padding:padding + w]
            add_adjoint(table, x, full)
        if kernel.requires_grad:
            # patch matrix is recomputed here rather than cached: the forward
            # graph would otherwise hold O(C*k*k*H*W) per conv node
            col, _, _ = _im2col(_pad_hw(x_vals, padding), kh)
            dk = (g.reshape(c_out, -1) @ col.T).reshape(k_vals.shape)
            add_adjoint(table, kernel, dk)

    return make_node(_conv2d_values(x_vals, k_vals, padding), (x, kernel),
                     backward, "conv2d")


def conv1d(x, kernel, dilation=1):
    """Dilated 1-D convolution over time: (T, D_in) -> (T', D_out).

    kernel is (D_out, D_in, k); no padding, so T' = T - (k-1)*dilation.
    """
    _require(x.data.ndim == 2, f"conv1d: input must be (T, D), got {x.shape}")
    _require(kernel.data.ndim == 3,
             f"conv1d: kernel must be (O, D, k), got {kernel.shape}")
    d_out, d_in, k = kernel.shape
    _require(d_in == x.shape[1],
             f"conv1d: kernel expects dim {d_in}, input has {x.shape[1]}")
    dilation = int(dilation)
    _require(dilation >= 1, f"conv1d: dilation must be >= 1, got {dilation}")
    t = x.shape[0]
    t_out = t - (k - 1) * dilation
    _require(t_out >= 1,
             f"conv1d: {t} frames too few for kernel {k} dilation {dilation}")
    x_vals, k_vals = x.data, kernel.data

    out = np.zeros((t_out, d_out))
    for j in range(k):
        out += x_vals[j * dilation:j * dilation + t_out] @ k_vals[:, :, j].T

    def backward(g, table):
        if x.requires_grad:
            dx = np.zeros_like(x_vals)
            for j in range(k):
                dx[j * dilation:j * dilation + t_out] += g @ k_vals[:, :, j]
            add_adjoint(table, x, dx)
        if kernel.requires_grad:
            dk = np.empty_like(k_vals)
            for j in range(k):
                dk[:, :, j] = g.T @ x_vals[j * dilation:j * dilation + t_out]
            add_adjoint(table, kernel, dk)

    return make_node(out, (x, kernel), backward, "conv1d")


# every differentiable op; the gradient-check suite must cover all of these
OP_NAMES = (
    "add", "sub", "mul", "scale", "shift", "absolute", "tanh", "leaky_relu",
    "reshape", "concat", "linear", "l2_distance", "softmax", "cross_entropy",
    "bce_with_logit", "stats_pool", "avg_pool2d", "global_avg_pool",
    "channel_scale", "conv2d", "conv1d",
)
