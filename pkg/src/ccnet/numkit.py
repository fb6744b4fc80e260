"""Dense float64 kernels with hand-written backward passes.

Feature maps are laid out H x W x C.  Every kernel also accepts a leading
batch axis, so ``(N, H, W, C)`` maps and ``(N, d)`` vectors go through the
same code path as single features.
"""

import numpy as np

from .errors import OracleError, ShapeError

DTYPE = np.float64


def as_feature_vec(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError(f"feature vector must be 1-D and nonempty, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("feature vector has non-finite entries")
    return x


def as_feature_map(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or x.size == 0:
        raise ShapeError(f"feature map must be H x W x C and nonempty, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("feature map has non-finite entries")
    return x


# ---------------------------------------------------------------- affine

def affine_map(weights, bias, x):
    """y = W x + b for x of shape (d,) or (N, d)."""
    weights = np.asarray(weights, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"affine_map: weights {weights.shape} incompatible with input {x.shape}")
    y = x @ weights.T
    if bias is not None:
        y = y + bias
    return y


def affine_backward(dy, weights, x):
    """Return (dW, db, dx) for ``y = W x + b`` given upstream dL/dy."""
    dy = np.asarray(dy, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 1:
        dW = np.outer(dy, x)
        db = dy.copy()
    else:
        dW = dy.T @ x
        db = dy.sum(axis=0)
    dx = dy @ weights
    return dW, db, dx


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


# ---------------------------------------------------------------- conv2d

def conv_output_shape(h, w, kh, kw, stride, padding):
    """Output spatial size: floor((h + 2p - kh) / s) + 1, likewise for w."""
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def _batched(x, ndim):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected {ndim}-D input or a batch of them, got shape {x.shape}")


def _windows(xp, kh, kw, stride):
    # (N, Hp-kh+1, Wp-kw+1, C, kh, kw) view, then subsample by stride
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of an H x W x C map with a (kh, kw, C_in, C_out) kernel."""
    xb, single = _batched(x, 3)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (kh, kw, C_in, C_out), got {kernel.shape}")
    kh, kw, cin, _ = kernel.shape
    if cin != xb.shape[3]:
        raise ShapeError(f"kernel expects {cin} input channels, map has {xb.shape[3]}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    _, h, w, _ = xb.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    y = np.einsum("nhwcij,ijco->nhwo", _windows(xp, kh, kw, stride), kernel, optimize=True)
    if bias is not None:
        y = y + bias
    return y[0] if single else y


def conv2d_backward(dy, x, kernel, stride=1, padding=0):
    """Return (dx, dkernel, dbias) for :func:`conv2d`."""
    xb, single = _batched(x, 3)
    dyb = dy[None] if single else dy
    kernel = np.asarray(kernel, dtype=DTYPE)
    kh, kw = kernel.shape[:2]
    xp = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    dkernel = np.einsum("nhwcij,nhwo->ijco", _windows(xp, kh, kw, stride), dyb, optimize=True)
    dbias = dyb.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    oh, ow = dyb.shape[1:3]
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dyb @ kernel[i, j].T
    dx = dxp[:, padding:padding + xb.shape[1], padding:padding + xb.shape[2], :]
    return (dx[0] if single else dx), dkernel, dbias


# ---------------------------------------------------------------- pooling

def global_pool(x, mode="avg"):
    """Per-channel global average or maximum of an H x W x C map (batched ok)."""
    xb, single = _batched(x, 3)
    if xb.shape[1] * xb.shape[2] == 0:
        raise ShapeError("cannot pool an empty map")
    if mode == "avg":
        y = xb.mean(axis=(1, 2))
    elif mode == "max":
        y = xb.max(axis=(1, 2))
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return y[0] if single else y


def global_pool_backward(dy, x, mode="avg"):
    xb, single = _batched(x, 3)
    dyb = np.atleast_2d(dy)
    n, h, w, c = xb.shape
    if mode == "avg":
        dx = np.broadcast_to(dyb[:, None, None, :] / (h * w), xb.shape).copy()
    elif mode == "max":
        # first row-major argmax per channel takes the whole gradient
        flat = xb.reshape(n, h * w, c)
        idx = np.argmax(flat, axis=1)
        dflat = np.zeros_like(flat)
        dflat[np.arange(n)[:, None], idx, np.arange(c)[None, :]] = dyb
        dx = dflat.reshape(xb.shape)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return dx[0] if single else dx


# ---------------------------------------------------------------- sigmoid

_SIG_LO = np.finfo(DTYPE).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(x):
    """Logistic function, clamped so the result stays strictly inside (0, 1)
    even where float64 would round to 0 or 1 (|x| beyond ~37 / ~708)."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, _SIG_LO, _SIG_HI, out=out)
    return out if out.ndim else float(out)


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------- gradient oracle

def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """Max absolute deviation scaled by the gradient's largest magnitude.

    Elementwise ratios blow up on near-zero components, so the reference
    scale is the infinity norm of the two gradients.
    """
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    diff = np.max(np.abs(a - n), initial=0.0)
    if scale == 0.0:
        return diff
    return diff / scale


class GradTape:
    """Per-parameter gradient accumulators keyed by parameter name."""

    def __init__(self, params):
        self._shapes = {k: np.shape(v) for k, v in params.items()}
        self.grads = {k: np.zeros(s, dtype=DTYPE) for k, s in self._shapes.items()}

    def add(self, name, grad):
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self._shapes[name]:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, expected {self._shapes[name]}")
        self.grads[name] += grad

    def update(self, grads):
        for k, g in grads.items():
            self.add(k, g)

    def clear(self):
        for g in self.grads.values():
            g.fill(0.0)

    def __getitem__(self, name):
        return self.grads[name]
