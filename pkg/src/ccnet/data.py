"""Multi-modal identity data: synthetic generator, JSONL manifests, PK sampling
and the ``CCNF`` embedding binary.

Manifest lines look like::

    {"id": 3, "time": 7, "split": "query", "modality": {"rgb": [...], "tir": [...]}}

Omitting a modality key marks that modality missing for the sample.

``CCNF`` layout (little-endian): ``b"CCNF"``, u32 version, u32 count, u32 dim,
then ``count * dim`` float32 values, row-major.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InputError

MODALITIES = ("rgb", "nir", "tir")
SPLITS = ("train", "gallery", "query")


@dataclass
class Sample:
    identity: int
    time_label: int
    inputs: tuple  # one array (or None when missing) per modality
    split: str = "train"

    def __post_init__(self):
        self.inputs = tuple(None if x is None else np.asarray(x, dtype=np.float64) for x in self.inputs)
        if not any(x is not None for x in self.inputs):
            raise InputError(f"empty sample: identity {self.identity} has no modality present")
        if self.split not in SPLITS:
            raise InputError(f"unknown split {self.split!r}")

    @property
    def mask(self):
        return np.array([x is not None for x in self.inputs])

    @property
    def complete(self):
        return all(x is not None for x in self.inputs)


@dataclass
class DatasetManifest:
    samples: list
    modalities: tuple = MODALITIES

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    def identities(self, split=None):
        return sorted({s.identity for s in self.samples if split is None or s.split == split})

    def metadata(self, split):
        subset = self.split(split)
        return {
            "id": np.array([s.identity for s in subset], dtype=np.int64),
            "time": np.array([s.time_label for s in subset], dtype=np.int64),
        }

    def stack(self, split):
        """Inputs of one split as an (N, M, ...) array; every sample must be complete."""
        subset = self.split(split)
        if not all(s.complete for s in subset):
            raise InputError(f"split {split!r} has samples with missing modalities")
        return np.stack([np.stack(s.inputs) for s in subset])

    def validate(self):
        queries = self.split("query")
        gallery = {}
        for s in self.split("gallery"):
            gallery.setdefault(s.identity, set()).add(s.time_label)
        for q in queries:
            if not gallery.get(q.identity, set()) - {q.time_label}:
                raise InputError(
                    f"query identity {q.identity} (time {q.time_label}) has no gallery sample "
                    "with a different time label")
        return self


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator.

    Each identity gets a base vector inside a shared ``latent_dim``-dimensional
    subspace of the input space.  Modality m adds a fixed offset (a global
    one plus an identity-specific gap).  Each capture session (time label)
    adds environmental noise, mostly inside a separate ``nuisance_dim``
    subspace plus a little isotropic noise, and a multiplicative
    illumination gain per modality; each sample adds a small jitter.  With
    probability ``distortion_rate`` one modality of a sample is heavily
    corrupted.  ``sample_noise_scale`` scales every random term at once.
    """

    id_count: int = 20
    samples_per_id: int = 8
    dim: int = 32
    modality_offset_scale: float = 1.0
    sample_noise_scale: float = 1.0
    distortion_rate: float = 0.1
    seed: int = 0
    latent_dim: int = 8
    nuisance_dim: int = 8
    isotropic_noise: float = 0.25
    time_labels_per_id: int = 4
    time_label_pool: int = 28
    gain_scale: float = 0.6
    jitter_scale: float = 0.25
    distortion_scale: float = 4.0
    train_fraction: float = 0.5

    def __post_init__(self):
        if self.id_count < 2:
            raise ConfigError("id_count must be >= 2")
        if self.samples_per_id < 1 or self.dim < 1:
            raise ConfigError("samples_per_id and dim must be positive")
        if self.latent_dim < 1 or self.nuisance_dim < 0 or self.latent_dim + self.nuisance_dim > self.dim:
            raise ConfigError("latent_dim + nuisance_dim must fit in dim (latent_dim >= 1)")
        for name in ("modality_offset_scale", "sample_noise_scale", "gain_scale",
                     "jitter_scale", "distortion_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.distortion_rate <= 1:
            raise ConfigError("distortion_rate must lie in [0, 1]")
        if not 1 <= self.time_labels_per_id <= self.time_label_pool:
            raise ConfigError("time_labels_per_id must be between 1 and time_label_pool")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")


def generate_synthetic(cfg):
    """Deterministic manifest from ``cfg``.

    The first ``train_fraction`` of identities form the train split.  For the
    rest, the first sample of every session that has at least two samples
    becomes a query and everything else goes to the gallery, so each query
    has one same-session duplicate and cross-session positives.
    """
    rng = np.random.default_rng(cfg.seed)
    M, d = len(MODALITIES), cfg.dim
    noise = cfg.sample_noise_scale
    k, kn = cfg.latent_dim, cfg.nuisance_dim
    basis = np.linalg.qr(rng.normal(size=(d, k + kn)))[0]
    id_basis, env_basis = basis[:, :k], basis[:, k:]
    # both signals get the norm of an isotropic N(0, I_d) draw
    id_scale = np.sqrt(d / k)
    env_scale = np.sqrt(d / kn) if kn else 0.0
    global_offset = cfg.modality_offset_scale * rng.normal(size=(M, d))
    n_train = max(1, min(cfg.id_count - 1, int(round(cfg.id_count * cfg.train_fraction))))
    T = cfg.time_labels_per_id

    samples = []
    for ident in range(cfg.id_count):
        base = id_scale * id_basis @ rng.normal(size=k)
        id_gap = 0.5 * cfg.modality_offset_scale * rng.normal(size=(M, d))
        times = np.sort(rng.choice(cfg.time_label_pool, size=T, replace=False))
        env = noise * (env_scale * rng.normal(size=(T, M, kn)) @ env_basis.T
                       + cfg.isotropic_noise * rng.normal(size=(T, M, d)))
        gain = np.exp(noise * cfg.gain_scale * rng.normal(size=(T, M)))
        sessions = [n * T // cfg.samples_per_id for n in range(cfg.samples_per_id)]
        for n, sess in enumerate(sessions):
            jitter = noise * cfg.jitter_scale * rng.normal(size=(M, d))
            x = gain[sess][:, None] * (base + global_offset + id_gap + env[sess] + jitter)
            if rng.random() < cfg.distortion_rate:
                bad = rng.integers(M)
                x[bad] = x[bad] + noise * cfg.distortion_scale * rng.normal(size=d)
            if ident < n_train:
                split = "train"
            else:
                first = sessions.index(sess) == n
                split = "query" if first and sessions.count(sess) >= 2 else "gallery"
            samples.append(Sample(ident, int(times[sess]), tuple(x), split))
    manifest = DatasetManifest(samples)
    _demote_orphan_queries(manifest)
    return manifest.validate()


def _demote_orphan_queries(manifest):
    gallery = {}
    for s in manifest.split("gallery"):
        gallery.setdefault(s.identity, set()).add(s.time_label)
    for s in manifest.samples:
        if s.split == "query" and not gallery.get(s.identity, set()) - {s.time_label}:
            s.split = "gallery"


# ---------------------------------------------------------------- PK sampling

@dataclass
class MiniBatch:
    """P identities x K samples; ``inputs`` has shape (P, K, M, ...)."""

    identities: np.ndarray  # (P,) identity ids
    sample_index: np.ndarray  # (P, K) indices into the source sample list
    inputs: np.ndarray = field(repr=False)

    @property
    def image_count(self):
        return self.inputs.shape[0] * self.inputs.shape[1] * self.inputs.shape[2]


def pk_sample(samples, P, K, rng):
    """Draw P distinct identities and K samples of each.

    Identities with at least K samples are drawn without replacement.  Smaller
    identities contribute every sample once and fill the rest by drawing with
    replacement.
    """
    if isinstance(samples, DatasetManifest):
        samples = samples.split("train")
    by_id = {}
    for i, s in enumerate(samples):
        by_id.setdefault(s.identity, []).append(i)
    ids = sorted(by_id)
    if P > len(ids):
        raise ConfigError(f"P={P} exceeds the {len(ids)} available identities")
    if K < 1:
        raise ConfigError("K must be positive")
    chosen = rng.choice(len(ids), size=P, replace=False)
    index = np.empty((P, K), dtype=np.int64)
    for row, c in enumerate(chosen):
        pool = np.array(by_id[ids[c]])
        if len(pool) >= K:
            index[row] = rng.choice(pool, size=K, replace=False)
        else:
            extra = rng.choice(pool, size=K - len(pool), replace=True)
            index[row] = np.concatenate([pool, extra])
    inputs = np.stack([np.stack([np.stack(samples[j].inputs) for j in row]) for row in index])
    return MiniBatch(np.array([ids[c] for c in chosen]), index, inputs)


def batches_per_epoch(n_samples, P, K):
    return math.ceil(n_samples / (P * K))


# ---------------------------------------------------------------- manifest IO

def save_manifest(manifest, path):
    with open(path, "w") as fh:
        for s in manifest.samples:
            rec = {
                "id": int(s.identity),
                "time": int(s.time_label),
                "split": s.split,
                "modality": {m: x.tolist() for m, x in zip(manifest.modalities, s.inputs) if x is not None},
            }
            fh.write(json.dumps(rec) + "\n")


def load_manifest(path, modalities=MODALITIES):
    samples = []
    shape = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            for key in ("id", "time", "split", "modality"):
                if key not in rec:
                    raise FormatError(f"line {lineno}: missing field {key!r}")
            mods = rec["modality"]
            if not isinstance(mods, dict):
                raise FormatError(f"line {lineno}: 'modality' must be an object")
            unknown = set(mods) - set(modalities)
            if unknown:
                raise FormatError(f"line {lineno}: unknown modality key(s) {sorted(unknown)}")
            inputs = []
            for m in modalities:
                if m not in mods:
                    inputs.append(None)
                    continue
                try:
                    x = np.asarray(mods[m], dtype=np.float64)
                except (TypeError, ValueError):
                    raise FormatError(f"line {lineno}: modality {m!r} is not a numeric array") from None
                if shape is None:
                    shape = x.shape
                elif x.shape != shape:
                    raise FormatError(f"line {lineno}: modality {m!r} has shape {x.shape}, expected {shape}")
                inputs.append(x)
            try:
                samples.append(Sample(int(rec["id"]), int(rec["time"]), tuple(inputs), rec["split"]))
            except InputError as exc:
                raise FormatError(f"line {lineno}: {exc}") from None
    return DatasetManifest(samples, tuple(modalities))


# ---------------------------------------------------------------- CCNF embeddings

CCNF_MAGIC = b"CCNF"
CCNF_VERSION = 1
_CCNF_HEADER = struct.Struct("<4sIII")


def write_embeddings(path, features):
    features = np.asarray(features)
    if features.ndim != 2:
        raise InputError(f"embeddings must be (count, dim), got shape {features.shape}")
    with open(path, "wb") as fh:
        fh.write(_CCNF_HEADER.pack(CCNF_MAGIC, CCNF_VERSION, *features.shape))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_embeddings(path):
    """Float32 array of shape (count, dim)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CCNF_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, dim = _CCNF_HEADER.unpack_from(blob)
    if magic != CCNF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CCNF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = blob[_CCNF_HEADER.size:]
    if len(payload) != 4 * count * dim:
        raise FormatError(f"{path}: header says {count}x{dim} floats, payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
