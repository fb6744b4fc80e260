"""Desk-scale multi-branch encoder: one independent branch per modality.

Each branch computes ``f = part2(norm(part1(x)))`` where ``norm`` is ALNU (or
a baseline / identity for ablations) applied to an H x W x C feature map.
The retrieval feature is ``neck(f)``, a per-dimension standardization with a
learned scale and no bias (a BNNeck): batch statistics while training,
running statistics otherwise.  The classifier head reads the same neck
feature; metric losses read ``f``.

Parameters live in flat dicts keyed ``"<modality>.<layer>.<name>"`` so that
the optimizer and checkpoints never need to know the structure.

Checkpoint (``CCNL``) layout, little-endian: ``b"CCNL"``, u32 version, then
blocks of (u32 name length, name bytes, u32 rank, u32 dims x rank, float64
payload) until end of file.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import normalization as nrm
from . import numkit as nk
from .data import MODALITIES
from .errors import FormatError, InputError, ShapeError

NORM_VARIANTS = ("none", "IN", "LN", "ALNU")
NECK_EPS = 1e-5


@dataclass(frozen=True)
class ModelDims:
    input_shape: tuple = (32,)  # (d,) for vectors, (H, W, C) for maps
    hidden: int = 64
    mid_shape: tuple = (4, 4, 4)  # map entering the normalization unit
    feat_dim: int = 32
    part2_hidden: int = 32

    @property
    def input_kind(self):
        return "vector" if len(self.input_shape) == 1 else "map"

    @property
    def mid_size(self):
        return int(np.prod(self.mid_shape))


@dataclass
class BranchParams:
    """One modality's weights; arrays are shared with the owning ModelParams."""

    params: dict
    buffers: dict
    dims: ModelDims
    norm: str

    def alnu(self):
        return nrm.AlnuParams.from_arrays(
            {k[5:]: v for k, v in self.params.items() if k.startswith("alnu.")})


@dataclass
class ModelParams:
    params: dict
    buffers: dict
    dims: ModelDims
    norm: str
    class_count: int
    modalities: tuple = MODALITIES
    extras: dict = field(default_factory=dict)  # loss-side parameters (learned centers)

    def branch(self, m):
        name = self.modalities[m] if isinstance(m, int) else m
        pre = name + "."
        return BranchParams(
            {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)},
            {k[len(pre):]: v for k, v in self.buffers.items() if k.startswith(pre)},
            self.dims, self.norm)


def init_params(seed, dims=ModelDims(), class_count=10, norm="ALNU", modalities=MODALITIES):
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, unit neck scale.

    The head uses bound 1 / sqrt(fan_in).  ALB final layers start at zero, so a
    fresh ALNU outputs 0.5 * f_hat + 0.5.
    """
    if norm not in NORM_VARIANTS:
        raise InputError(f"unknown norm variant {norm!r}")
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params, buffers = {}, {}
    c_mid = dims.mid_shape[2]
    for mod in modalities:
        p = {}
        if dims.input_kind == "vector":
            d_in = dims.input_shape[0]
            p["part1.fc1.w"] = he((dims.hidden, d_in), d_in)
            p["part1.fc1.b"] = np.zeros(dims.hidden)
            p["part1.fc2.w"] = he((dims.mid_size, dims.hidden), dims.hidden)
            p["part1.fc2.b"] = np.zeros(dims.mid_size)
        else:
            c_in = dims.input_shape[2]
            p["part1.conv.w"] = he((3, 3, c_in, c_mid), 9 * c_in)
            p["part1.conv.b"] = np.zeros(c_mid)
        if norm == "ALNU":
            for k, v in nrm.init_alnu(rng, c_mid).arrays().items():
                p["alnu." + k] = v
        elif norm in ("IN", "LN"):
            p["norm.gamma"] = np.ones(c_mid)
            p["norm.beta"] = np.zeros(c_mid)
        p["part2.fc1.w"] = he((dims.part2_hidden, dims.mid_size), dims.mid_size)
        p["part2.fc1.b"] = np.zeros(dims.part2_hidden)
        p["part2.fc2.w"] = he((dims.feat_dim, dims.part2_hidden), dims.part2_hidden)
        p["part2.fc2.b"] = np.zeros(dims.feat_dim)
        p["neck.scale"] = np.ones(dims.feat_dim)
        bound = 1.0 / np.sqrt(dims.feat_dim)
        p["head.w"] = rng.uniform(-bound, bound, size=(class_count, dims.feat_dim))
        params.update({f"{mod}.{k}": v for k, v in p.items()})
        buffers[f"{mod}.neck.mean"] = np.zeros(dims.feat_dim)
        buffers[f"{mod}.neck.var"] = np.ones(dims.feat_dim)
    return ModelParams(params, buffers, dims, norm, class_count, tuple(modalities))


# ---------------------------------------------------------------- forward / backward

def encoder_forward(bp, x, training=False):
    """Run one branch on a batch ``x`` of shape (N, *input_shape).

    Returns ``(feature, neck_feature, logits), cache``.
    """
    p, dims = bp.params, bp.dims
    x = np.asarray(x, dtype=nk.DTYPE)
    if x.shape[1:] != tuple(dims.input_shape):
        raise ShapeError(f"branch expects inputs of shape {dims.input_shape}, got {x.shape[1:]}")
    n = x.shape[0]
    c = {"x": x}
    if dims.input_kind == "vector":
        c["z1"] = nk.affine_map(p["part1.fc1.w"], p["part1.fc1.b"], x)
        c["a1"] = nk.relu(c["z1"])
        c["z2"] = nk.affine_map(p["part1.fc2.w"], p["part1.fc2.b"], c["a1"])
        mid = nk.relu(c["z2"]).reshape((n,) + tuple(dims.mid_shape))
    else:
        c["z1"] = nk.conv2d(x, p["part1.conv.w"], p["part1.conv.b"], padding=1)
        mid = nk.relu(c["z1"])
    c["mid"] = mid

    if bp.norm == "ALNU":
        normed, c["norm"] = nrm.alnu_forward(bp.alnu(), mid)
    elif bp.norm in ("IN", "LN"):
        normed, c["norm"] = nrm.baseline_norm(
            mid, bp.norm, {"gamma": p["norm.gamma"], "beta": p["norm.beta"]})
    else:
        normed = mid
    c["flat"] = normed.reshape(n, -1)
    c["z3"] = nk.affine_map(p["part2.fc1.w"], p["part2.fc1.b"], c["flat"])
    c["a3"] = nk.relu(c["z3"])
    c["z4"] = nk.affine_map(p["part2.fc2.w"], p["part2.fc2.b"], c["a3"])
    feat = nk.relu(c["z4"])
    if training:
        c["std"], c["inv"] = nrm._standardize(feat, (0,), NECK_EPS)
    else:
        c["std"] = (feat - bp.buffers["neck.mean"]) / np.sqrt(bp.buffers["neck.var"] + NECK_EPS)
        c["inv"] = None
    neck = c["std"] * p["neck.scale"]
    c["neck"] = neck
    logits = neck @ p["head.w"].T
    return (feat, neck, logits), c


def encoder_backward(bp, dfeat, dlogits, cache, dstd=None):
    """Branch-local gradients given dL/dfeature, dL/dlogits and optionally
    dL/d(standardized feature) for losses placed inside the neck."""
    p, dims, c = bp.params, bp.dims, cache
    g = {}
    g["head.w"] = dlogits.T @ c["neck"]
    dneck = dlogits @ p["head.w"]
    g["neck.scale"] = (dneck * c["std"]).sum(axis=0)
    dstd_total = dneck * p["neck.scale"]
    if dstd is not None:
        dstd_total = dstd_total + dstd
    if c["inv"] is None:
        dfeat = dfeat + dstd_total / np.sqrt(bp.buffers["neck.var"] + NECK_EPS)
    else:
        dfeat = dfeat + nrm._standardize_backward(dstd_total, c["std"], c["inv"], (0,))

    dz4 = nk.relu_backward(dfeat, c["z4"])
    g["part2.fc2.w"], g["part2.fc2.b"], da3 = nk.affine_backward(dz4, p["part2.fc2.w"], c["a3"])
    dz3 = nk.relu_backward(da3, c["z3"])
    g["part2.fc1.w"], g["part2.fc1.b"], dflat = nk.affine_backward(dz3, p["part2.fc1.w"], c["flat"])
    dnormed = dflat.reshape(c["mid"].shape)

    if bp.norm == "ALNU":
        dmid, ng = nrm.alnu_backward(dnormed, c["norm"])
        g.update({"alnu." + k: v for k, v in ng.items()})
    elif bp.norm in ("IN", "LN"):
        dmid, ng = nrm.baseline_norm_backward(dnormed, c["norm"])
        g["norm.gamma"], g["norm.beta"] = ng["gamma"], ng["beta"]
    else:
        dmid = dnormed

    n = c["x"].shape[0]
    if dims.input_kind == "vector":
        dz2 = nk.relu_backward(dmid.reshape(n, -1), c["z2"])
        g["part1.fc2.w"], g["part1.fc2.b"], da1 = nk.affine_backward(dz2, p["part1.fc2.w"], c["a1"])
        dz1 = nk.relu_backward(da1, c["z1"])
        g["part1.fc1.w"], g["part1.fc1.b"], _ = nk.affine_backward(dz1, p["part1.fc1.w"], c["x"])
    else:
        dz1 = nk.relu_backward(dmid, c["z1"])
        _, g["part1.conv.w"], g["part1.conv.b"] = nk.conv2d_backward(dz1, c["x"], p["part1.conv.w"], padding=1)
    return g


def model_forward(mp, inputs, training=False):
    """All branches on inputs of shape (N, M, *input_shape).

    Returns ``(features, neck_features, logits), caches`` with arrays of shape
    (N, M, d_f), (N, M, d_f) and (N, M, classes).
    """
    inputs = np.asarray(inputs, dtype=nk.DTYPE)
    if inputs.ndim < 3 or inputs.shape[1] != len(mp.modalities):
        raise ShapeError(f"expected (N, {len(mp.modalities)}, ...) inputs, got {inputs.shape}")
    outs, caches = [], []
    for m in range(len(mp.modalities)):
        o, c = encoder_forward(mp.branch(m), inputs[:, m], training)
        outs.append(o)
        caches.append(c)
    feats, necks, logits = (np.stack([o[j] for o in outs], axis=1) for j in range(3))
    return (feats, necks, logits), caches


def model_backward(mp, dfeats, dlogits, caches, dstd=None):
    grads = {}
    for m, mod in enumerate(mp.modalities):
        g = encoder_backward(mp.branch(m), dfeats[:, m], dlogits[:, m], caches[m],
                             None if dstd is None else dstd[:, m])
        grads.update({f"{mod}.{k}": v for k, v in g.items()})
    return grads


def update_neck_stats(mp, feats, momentum=0.1):
    """EMA update of the neck running statistics from a (N, M, d_f) batch."""
    for m, mod in enumerate(mp.modalities):
        f = feats[:, m]
        mean, var = mp.buffers[f"{mod}.neck.mean"], mp.buffers[f"{mod}.neck.var"]
        mean *= 1 - momentum
        mean += momentum * f.mean(axis=0)
        var *= 1 - momentum
        var += momentum * f.var(axis=0)


def sample_forward(mp, sample):
    """Per-modality neck features (M, d_f) and their concatenation (M * d_f,)."""
    if not sample.complete:
        raise InputError("training/forward path needs every modality present")
    inputs = np.stack(sample.inputs)[None]
    (_, necks, _), _ = model_forward(mp, inputs)
    return necks[0], necks[0].reshape(-1)


def extract_features(mp, inputs, batch=256):
    """Neck features (N, M, d_f) for a stack of complete samples."""
    inputs = np.asarray(inputs, dtype=nk.DTYPE)
    out = [model_forward(mp, inputs[i:i + batch])[0][1] for i in range(0, len(inputs), batch)]
    return np.concatenate(out) if out else np.zeros((0, len(mp.modalities), mp.dims.feat_dim))


# ---------------------------------------------------------------- checkpoints

CCNL_MAGIC = b"CCNL"
CCNL_VERSION = 1
_NORM_CODE = {n: i for i, n in enumerate(NORM_VARIANTS)}


def _blocks(mp):
    yield "meta.input_shape", np.array(mp.dims.input_shape, dtype=np.float64)
    yield "meta.mid_shape", np.array(mp.dims.mid_shape, dtype=np.float64)
    yield "meta.widths", np.array([mp.dims.hidden, mp.dims.feat_dim, mp.dims.part2_hidden], dtype=np.float64)
    yield "meta.norm", np.array(float(_NORM_CODE[mp.norm]))
    yield "meta.class_count", np.array(float(mp.class_count))
    for k, v in mp.params.items():
        yield "param." + k, v
    for k, v in mp.buffers.items():
        yield "buffer." + k, v
    for k, v in mp.extras.items():
        yield "extra." + k, v


def save_checkpoint(path, mp):
    with open(path, "wb") as fh:
        fh.write(CCNL_MAGIC + struct.pack("<I", CCNL_VERSION))
        for name, arr in _blocks(mp):
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CCNL_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8 or struct.unpack_from("<I", blob, 4)[0] != CCNL_VERSION:
        raise FormatError(f"{path}: unsupported or missing version")
    pos, blocks = 8, {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(name.encode()) != nlen:
                raise FormatError(f"{path}: truncated block name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + size > len(blob):
                raise FormatError(f"{path}: truncated payload for {name}")
            blocks[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error:
        raise FormatError(f"{path}: truncated block header") from None

    try:
        widths = blocks["meta.widths"].astype(int)
        dims = ModelDims(
            input_shape=tuple(int(v) for v in blocks["meta.input_shape"]),
            hidden=int(widths[0]),
            mid_shape=tuple(int(v) for v in blocks["meta.mid_shape"]),
            feat_dim=int(widths[1]),
            part2_hidden=int(widths[2]),
        )
        norm = NORM_VARIANTS[int(blocks["meta.norm"])]
        class_count = int(blocks["meta.class_count"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing metadata block {exc}") from None
    params = {k[6:]: v for k, v in blocks.items() if k.startswith("param.")}
    buffers = {k[7:]: v for k, v in blocks.items() if k.startswith("buffer.")}
    extras = {k[6:]: v for k, v in blocks.items() if k.startswith("extra.")}
    modalities = tuple(dict.fromkeys(k.split(".", 1)[0] for k in params))
    return ModelParams(params, buffers, dims, norm, class_count, modalities, extras)
