"""NHWC layer primitives with hand-written backward passes.

Every forward returns ``(out, cache)``; the matching backward takes the
upstream gradient and the cache and returns input/parameter gradients.
Functions are dtype-generic: training runs in float32, the gradient checker
in float64.
"""
import numpy as np

from . import _accel

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.2


class NonFiniteActivation(FloatingPointError):
    """Raised when a layer produces NaN or inf; carries the layer name."""

    def __init__(self, layer):
        super().__init__(f"non-finite activation in layer {layer!r}")
        self.layer = layer


def check_finite(x, layer):
    if not np.isfinite(x).all():
        raise NonFiniteActivation(layer)
    return x


def _out_side(n, k, s, p):
    return (n + 2 * p - k) // s + 1


# --- strided convolution ----------------------------------------------------

def conv2d_forward(x, w, b, stride, pad):
    """x: (N, H, W, Cin); w: (k, k, Cin, Cout); b: (Cout,)."""
    n, h, wd, cin = x.shape
    k = w.shape[0]
    ho, wo = _out_side(h, k, stride, pad), _out_side(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = _accel.im2col(xp, k, stride, ho, wo).reshape(n * ho * wo, k * k * cin)
    out = cols @ w.reshape(k * k * cin, -1) + b
    return out.reshape(n, ho, wo, -1), (cols, x.shape, w, stride, pad)


def conv2d_backward(dout, cache, need_dx=True, need_dw=True):
    """Returns ``(dx, dw, db)``; skipped pieces come back as None."""
    cols, xshape, w, stride, pad = cache
    n, h, wd, cin = xshape
    k, cout = w.shape[0], w.shape[3]
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape) if need_dw else None
    db = d2.sum(axis=0) if need_dw else None
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, k, k, cin)
    dxp = _accel.col2im(dcols, h + 2 * pad, wd + 2 * pad, stride)
    dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
    return dx, dw, db


# --- transposed convolution (exact side doubling) -------------------------

def conv_transpose2d_forward(x, w, b, stride, pad, output_pad):
    """x: (N, H, W, Cin); w: (k, k, Cout, Cin); out side (H-1)*s - 2p + k + output_pad."""
    n, h, wd, cin = x.shape
    k, cout = w.shape[0], w.shape[2]
    ho = (h - 1) * stride - 2 * pad + k + output_pad
    wo = (wd - 1) * stride - 2 * pad + k + output_pad
    xf = x.reshape(-1, cin)
    cols = (xf @ w.reshape(-1, cin).T).reshape(n, h, wd, k, k, cout)
    outp = _accel.col2im(cols, ho + 2 * pad, wo + 2 * pad, stride)
    out = outp[:, pad : pad + ho, pad : pad + wo, :] + b
    return np.ascontiguousarray(out), (xf, x.shape, w, stride, pad)


def conv_transpose2d_backward(dout, cache, need_dx=True, need_dw=True):
    xf, xshape, w, stride, pad = cache
    n, h, wd, cin = xshape
    k, cout = w.shape[0], w.shape[2]
    dp = np.pad(dout, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else dout
    cols = _accel.im2col(dp, k, stride, h, wd).reshape(n * h * wd, k * k * cout)
    dx = (cols @ w.reshape(-1, cin)).reshape(xshape) if need_dx else None
    dw = (cols.T @ xf).reshape(w.shape) if need_dw else None
    db = dout.sum(axis=(0, 1, 2)) if need_dw else None
    return dx, dw, db


# --- batch normalisation -----------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, update_stats=True):
    """Per-channel normalisation over all non-channel axes.

    In train mode batch statistics are used and, if ``update_stats``, the
    running estimates are returned updated (new arrays; inputs untouched).
    Returns ``(out, cache, new_running_mean, new_running_var)``.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            m = x.size // x.shape[-1]
            unbiased = var * (m / max(m - 1, 1))
            running_mean = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mean
            running_var = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased
            running_mean = running_mean.astype(x.dtype)
            running_var = running_var.astype(x.dtype)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    out = xhat * gamma + beta
    return out, (xhat, inv_std, gamma, train), running_mean, running_var


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# --- activations -------------------------------------------------------------

class PatternTape:
    """Records (or replays) rectifier on/off masks in call order.

    Used by the gradient checker: replaying the masks of the base point pins
    the network to a single linear piece, so finite differences stay valid
    when a +-h perturbation would otherwise cross a kink.  Not thread-safe.
    """

    def __init__(self, pinned=None):
        self.masks = []
        self.pinned = pinned
        self.pos = 0


_tape = None


class activation_patterns:
    """Context manager installing a PatternTape for the duration of the block."""

    def __init__(self, pinned=None):
        self.tape = PatternTape(pinned)

    def __enter__(self):
        global _tape
        self._prev, _tape = _tape, self.tape
        return self.tape

    def __exit__(self, *exc):
        global _tape
        _tape = self._prev
        return False


def _rectifier_mask(x):
    mask = x > 0
    tape = _tape
    if tape is None:
        return mask
    if tape.pinned is not None:
        mask = tape.pinned[tape.pos]
        tape.pos += 1
        return mask
    tape.masks.append(mask)
    return mask


def leaky_relu_forward(x, slope=LEAKY_SLOPE):
    mask = _rectifier_mask(x)
    return np.where(mask, x, x * x.dtype.type(slope)), (mask, slope)


def leaky_relu_backward(dout, cache):
    mask, slope = cache
    return np.where(mask, dout, dout * dout.dtype.type(slope))


def relu_forward(x):
    mask = _rectifier_mask(x)
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, dout.dtype.type(0))


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dout, y):
    return dout * (1 - y * y)


def sigmoid(x):
    # split form keeps exp() from overflowing for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- layer chains --------------------------------------------------------------

class Layer:
    """One conv/tconv -> optional batch norm -> activation stage."""

    __slots__ = ("name", "op", "bn", "act", "stride", "pad", "output_pad")

    def __init__(self, name, op, bn, act, stride=2, pad=2, output_pad=1):
        self.name, self.op, self.bn, self.act = name, op, bn, act
        self.stride, self.pad, self.output_pad = stride, pad, output_pad

    def __repr__(self):
        return f"Layer({self.name!r}, {self.op}, bn={self.bn}, act={self.act})"


def init_layer(rng, layer, cin, cout, k, dtype=np.float32, std=0.02):
    """Weights ~ N(0, std); biases 0; batch-norm scale 1, shift 0, running stats (0, 1)."""
    if layer.op == "conv":
        shape = (k, k, cin, cout)
    else:
        shape = (k, k, cout, cin)
    p = {
        f"{layer.name}.weight": rng.normal(0.0, std, size=shape).astype(dtype),
        f"{layer.name}.bias": np.zeros(cout, dtype=dtype),
    }
    if layer.bn:
        p[f"{layer.name}.bn_scale"] = np.ones(cout, dtype=dtype)
        p[f"{layer.name}.bn_shift"] = np.zeros(cout, dtype=dtype)
        p[f"{layer.name}.running_mean"] = np.zeros(cout, dtype=dtype)
        p[f"{layer.name}.running_var"] = np.ones(cout, dtype=dtype)
    return p


BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer(name):
    return name.endswith(BUFFER_SUFFIXES)


def layer_forward(params, layer, x, train, update_stats, new_buffers):
    """Run one stage; new running statistics (if any) are written to ``new_buffers``."""
    n = layer.name
    w, b = params[f"{n}.weight"], params[f"{n}.bias"]
    if layer.op == "conv":
        z, conv_cache = conv2d_forward(x, w, b, layer.stride, layer.pad)
    else:
        z, conv_cache = conv_transpose2d_forward(x, w, b, layer.stride, layer.pad, layer.output_pad)
    bn_cache = None
    if layer.bn:
        z, bn_cache, rm, rv = batchnorm_forward(
            z, params[f"{n}.bn_scale"], params[f"{n}.bn_shift"],
            params[f"{n}.running_mean"], params[f"{n}.running_var"], train, update_stats)
        if train and update_stats:
            new_buffers[f"{n}.running_mean"] = rm
            new_buffers[f"{n}.running_var"] = rv
    # checked before the activation: relu's mask would turn NaN into 0
    check_finite(z, n)
    if layer.act == "lrelu":
        out, act_cache = leaky_relu_forward(z)
    elif layer.act == "relu":
        out, act_cache = relu_forward(z)
    elif layer.act == "tanh":
        out, act_cache = tanh_forward(z)
    else:
        out, act_cache = z, None
    return out, (conv_cache, bn_cache, act_cache)


def layer_backward(layer, dout, cache, grads, need_dx=True):
    """Backward through one stage.  With ``grads=None`` only dx is computed."""
    conv_cache, bn_cache, act_cache = cache
    need_dw = grads is not None
    if grads is None:
        grads = {}
    n = layer.name
    if layer.act == "lrelu":
        dz = leaky_relu_backward(dout, act_cache)
    elif layer.act == "relu":
        dz = relu_backward(dout, act_cache)
    elif layer.act == "tanh":
        dz = tanh_backward(dout, act_cache)
    else:
        dz = dout
    if layer.bn:
        dz, grads[f"{n}.bn_scale"], grads[f"{n}.bn_shift"] = batchnorm_backward(dz, bn_cache)
    if layer.op == "conv":
        dx, dw, db = conv2d_backward(dz, conv_cache, need_dx, need_dw)
    else:
        dx, dw, db = conv_transpose2d_backward(dz, conv_cache, need_dx, need_dw)
    if need_dw:
        grads[f"{n}.weight"], grads[f"{n}.bias"] = dw, db
    return dx


def chain_forward(params, layers, x, train, update_stats, new_buffers):
    outs, caches = [], []
    for layer in layers:
        x, cache = layer_forward(params, layer, x, train, update_stats, new_buffers)
        outs.append(x)
        caches.append(cache)
    return outs, caches


def chain_backward(layers, caches, grads, dout_last=None, injected=None, need_dx=True):
    """Backpropagate through a chain.

    ``injected`` maps a layer index to an extra gradient arriving at that
    layer's output (used for encoder taps).  Returns the input gradient, or
    None when ``need_dx`` is false.
    """
    injected = injected or {}
    d = dout_last
    for idx in range(len(layers) - 1, -1, -1):
        extra = injected.get(idx)
        if extra is not None:
            d = extra if d is None else d + extra
        if d is None:
            continue
        d = layer_backward(layers[idx], d, caches[idx], grads, need_dx or idx > 0)
    return d if need_dx else None
