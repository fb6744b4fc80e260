"""Adaptive layer normalization (ALNU) and the classical baselines.

ALNU standardizes each feature map as a whole, then rescales and shifts it by
two scalars, gamma and beta, each predicted from the *un-normalized* map by a
small adaptive learning block (ALB):

    conv3x3 -> ReLU -> conv3x3 -> ReLU -> (global avg + global max) -> linear -> sigmoid

All functions accept a single ``(H, W, C)`` map or a batch ``(N, H, W, C)``.
Forward functions return ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and the cache.
"""

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import ConfigError, ShapeError

EPSILON = 1e-5


@dataclass
class AlbParams:
    conv1_w: np.ndarray  # (3, 3, C, C')
    conv1_b: np.ndarray  # (C',)
    conv2_w: np.ndarray  # (3, 3, C', C')
    conv2_b: np.ndarray  # (C',)
    conv3_w: np.ndarray  # (C',) -- 1x1 conv on the pooled 1x1 map
    conv3_b: np.ndarray  # () scalar

    FIELDS = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b")

    def arrays(self):
        return {k: getattr(self, k) for k in self.FIELDS}

    @classmethod
    def from_arrays(cls, arrays):
        return cls(**{k: arrays[k] for k in cls.FIELDS})

    def __post_init__(self):
        if np.shape(self.conv3_b) != ():
            raise ShapeError("ALB final conv must produce a single scalar")


@dataclass
class AlnuParams:
    gamma_block: AlbParams
    beta_block: AlbParams
    epsilon: float = EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("ALNU epsilon must be positive")

    def arrays(self):
        out = {f"gamma.{k}": v for k, v in self.gamma_block.arrays().items()}
        out.update({f"beta.{k}": v for k, v in self.beta_block.arrays().items()})
        return out

    @classmethod
    def from_arrays(cls, arrays, epsilon=EPSILON):
        g = {k[6:]: v for k, v in arrays.items() if k.startswith("gamma.")}
        b = {k[5:]: v for k, v in arrays.items() if k.startswith("beta.")}
        return cls(AlbParams.from_arrays(g), AlbParams.from_arrays(b), epsilon)


def alb_width(channels):
    return max(channels // 4, 4)


def init_alb(rng, channels, zero_last=True):
    """He-uniform conv weights; the final linear map starts at zero (output 0.5)."""
    hidden = alb_width(channels)

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    conv3_w = np.zeros(hidden) if zero_last else he((hidden,), hidden)
    return AlbParams(
        conv1_w=he((3, 3, channels, hidden), 9 * channels),
        conv1_b=np.zeros(hidden),
        conv2_w=he((3, 3, hidden, hidden), 9 * hidden),
        conv2_b=np.zeros(hidden),
        conv3_w=conv3_w,
        conv3_b=np.zeros(()),
    )


def init_alnu(rng, channels, epsilon=EPSILON):
    return AlnuParams(init_alb(rng, channels), init_alb(rng, channels), epsilon)


# ---------------------------------------------------------------- statistics

def layer_stats(f):
    """Mean and population standard deviation over every entry of a map."""
    f = np.asarray(f, dtype=nk.DTYPE)
    if f.size == 0:
        raise ShapeError("cannot take statistics of an empty map")
    mu = f.mean()
    sigma = np.sqrt(np.mean((f - mu) ** 2))
    return float(mu), float(sigma)


def normalize(f, mu, sigma, epsilon=EPSILON):
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    return (np.asarray(f, dtype=nk.DTYPE) - mu) / np.sqrt(sigma ** 2 + epsilon)


def _standardize(x, axes, eps):
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv, inv


def _standardize_backward(dxhat, xhat, inv, axes):
    n = np.prod([xhat.shape[a] for a in axes])
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    return inv / n * (n * dxhat - s1 - xhat * s2)


# ---------------------------------------------------------------- ALB

def _batch(f):
    f = np.asarray(f, dtype=nk.DTYPE)
    if f.ndim == 3:
        return f[None], True
    if f.ndim == 4:
        return f, False
    raise ShapeError(f"expected an H x W x C map or a batch of them, got shape {f.shape}")


def alb_forward(params, f):
    """Scalar in (0, 1) per map, plus the cache for :func:`alb_backward`."""
    x, single = _batch(f)
    z1 = nk.conv2d(x, params.conv1_w, params.conv1_b, padding=1)
    a1 = nk.relu(z1)
    z2 = nk.conv2d(a1, params.conv2_w, params.conv2_b, padding=1)
    a2 = nk.relu(z2)
    pooled = nk.global_pool(a2, "avg") + nk.global_pool(a2, "max")
    logit = pooled @ params.conv3_w + params.conv3_b
    out = nk.sigmoid(logit)
    out = np.atleast_1d(out)
    cache = (params, x, z1, a1, z2, a2, pooled, out, single)
    return (float(out[0]) if single else out), cache


def alb_backward(dout, cache):
    """Return (df, grads) where grads is keyed like :meth:`AlbParams.arrays`."""
    params, x, z1, a1, z2, a2, pooled, out, single = cache
    dout = np.atleast_1d(np.asarray(dout, dtype=nk.DTYPE))
    dlogit = nk.sigmoid_backward(dout, out)
    grads = {
        "conv3_w": dlogit @ pooled,
        "conv3_b": np.asarray(dlogit.sum()),
    }
    dpooled = np.outer(dlogit, params.conv3_w)
    da2 = nk.global_pool_backward(dpooled, a2, "avg") + nk.global_pool_backward(dpooled, a2, "max")
    dz2 = nk.relu_backward(da2, z2)
    da1, grads["conv2_w"], grads["conv2_b"] = nk.conv2d_backward(dz2, a1, params.conv2_w, padding=1)
    dz1 = nk.relu_backward(da1, z1)
    dx, grads["conv1_w"], grads["conv1_b"] = nk.conv2d_backward(dz1, x, params.conv1_w, padding=1)
    return (dx[0] if single else dx), grads


# ---------------------------------------------------------------- ALNU

def alnu_forward(params, f):
    x, single = _batch(f)
    xhat, inv = _standardize(x, (1, 2, 3), params.epsilon)
    gamma, gcache = alb_forward(params.gamma_block, x)
    beta, bcache = alb_forward(params.beta_block, x)
    out = xhat * gamma[:, None, None, None] + beta[:, None, None, None]
    cache = (xhat, inv, gamma, gcache, bcache, single)
    return (out[0] if single else out), cache


def alnu_backward(dout, cache):
    """Gradient w.r.t. the input map and every ALB weight (``gamma.*``/``beta.*``)."""
    xhat, inv, gamma, gcache, bcache, single = cache
    dout = dout[None] if single else dout
    dgamma = (dout * xhat).sum(axis=(1, 2, 3))
    dbeta = dout.sum(axis=(1, 2, 3))
    dx = _standardize_backward(dout * gamma[:, None, None, None], xhat, inv, (1, 2, 3))
    dxg, ggrads = alb_backward(dgamma, gcache)
    dxb, bgrads = alb_backward(dbeta, bcache)
    dx = dx + dxg + dxb
    grads = {f"gamma.{k}": v for k, v in ggrads.items()}
    grads.update({f"beta.{k}": v for k, v in bgrads.items()})
    return (dx[0] if single else dx), grads


# ---------------------------------------------------------------- baselines

NORM_MODES = ("BN", "IN", "LN", "GN")


def baseline_norm(f, mode, state=None):
    """BN / IN / LN / GN with a per-channel affine ``state['gamma']``, ``state['beta']``.

    LN standardizes each map over all of H*W*C, IN each channel of each map,
    BN each channel across the batch, GN each group of ``state['groups']``
    channels.  Returns ``(out, cache)``.
    """
    state = state or {}
    eps = state.get("eps", EPSILON)
    x = np.asarray(f, dtype=nk.DTYPE)
    if mode == "BN":
        if x.ndim != 4:
            raise ConfigError("BN needs a batch of maps (N, H, W, C)")
        single = False
    else:
        x, single = _batch(x)
    n, h, w, c = x.shape
    gamma = np.asarray(state.get("gamma", np.ones(c)), dtype=nk.DTYPE)
    beta = np.asarray(state.get("beta", np.zeros(c)), dtype=nk.DTYPE)

    if mode == "GN":
        groups = int(state.get("groups", 1))
        if groups < 1 or c % groups:
            raise ConfigError(f"GN group count {groups} does not divide {c} channels")
        view = x.reshape(n, h, w, groups, c // groups)
        axes = (1, 2, 4)
    elif mode == "LN":
        view, axes = x, (1, 2, 3)
    elif mode == "IN":
        view, axes = x, (1, 2)
    elif mode == "BN":
        view, axes = x, (0, 1, 2)
    else:
        raise ConfigError(f"unknown normalization mode {mode!r}")

    xhat_v, inv = _standardize(view, axes, eps)
    xhat = xhat_v.reshape(x.shape)
    out = xhat * gamma + beta
    cache = (xhat_v, inv, axes, gamma, x.shape, single)
    return (out[0] if single else out), cache


def baseline_norm_backward(dout, cache):
    xhat_v, inv, axes, gamma, shape, single = cache
    dout = dout[None] if single else dout
    xhat = xhat_v.reshape(shape)
    grads = {
        "gamma": (dout * xhat).sum(axis=(0, 1, 2)),
        "beta": dout.sum(axis=(0, 1, 2)),
    }
    dxhat = (dout * gamma).reshape(xhat_v.shape)
    dx = _standardize_backward(dxhat, xhat_v, inv, axes).reshape(shape)
    return (dx[0] if single else dx), grads
