"""Seeded PK-batch training of the multi-branch encoder.

Objective per batch: mean over samples of the per-branch cross entropy, plus
``lam`` times the configured metric-learning term.  The metric term sees the
pre-neck features by default; ``metric_on="neck"`` moves it onto the
batch-standardized neck input instead.
"""

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from . import model as mdl
from .data import batches_per_epoch, pk_sample
from .errors import ConfigError, TrainingError

LOSS_VARIANTS = ("ce_only", "center", "hc", "cdc_s", "cdc_m", "cdc")
LOG_HEADER = ("epoch", "lr", "L_ce", "L_cdc_s", "L_cdc_m", "L_total",
              "intra_sample_dist", "intra_modality_dist")


def canonical_loss(name):
    name = name.lstrip("+").replace("+", "_").lower()
    if name not in LOSS_VARIANTS:
        raise ConfigError(f"unknown loss variant {name!r}; choose from {LOSS_VARIANTS}")
    return name


def canonical_norm(name):
    for n in mdl.NORM_VARIANTS:
        if name.lower() == n.lower():
            return n
    raise ConfigError(f"unknown norm variant {name!r}; choose from {mdl.NORM_VARIANTS}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    lr_initial: float = 3.5e-4
    decay_epochs: tuple = (30, 55)
    decay_factor: float = 0.1
    P: int = 8
    K: int = 4
    lam: float = losses.LAMBDA
    alpha: float = losses.ALPHA
    seed: int = 0
    loss_variant: str = "cdc"
    norm_variant: str = "ALNU"
    neck_momentum: float = 0.1
    metric_on: str = "feature"

    def __post_init__(self):
        object.__setattr__(self, "loss_variant", canonical_loss(self.loss_variant))
        object.__setattr__(self, "norm_variant", canonical_norm(self.norm_variant))
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.lr_initial <= 0:
            raise ConfigError("lr_initial must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        if self.epochs < 1 or self.P < 1 or self.K < 1:
            raise ConfigError("epochs, P and K must be positive")
        if self.lam < 0 or self.alpha < 0:
            raise ConfigError("lambda and alpha must be nonnegative")
        if self.metric_on not in ("feature", "neck"):
            raise ConfigError(f"metric_on must be 'feature' or 'neck', got {self.metric_on!r}")
        if self.loss_variant in ("cdc", "cdc_s") and self.K < 2:
            raise ConfigError("sample-center loss needs K >= 2")

    def to_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state, params, grads, lr):
    """In-place bias-corrected Adam update of every parameter that has a gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ConfigError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {np.shape(p)}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


def lr_schedule(epoch, cfg):
    """Piecewise-constant step decay: multiply by ``decay_factor`` at each decay epoch."""
    n = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr_initial * cfg.decay_factor ** n


# ---------------------------------------------------------------- objective

def _mean_pairwise_dist(C):
    # C: (P, n, D); mean Euclidean distance over unordered pairs, averaged over identities
    n = C.shape[1]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, k=1)
    d = np.sqrt(((C[:, iu[0]] - C[:, iu[1]]) ** 2).sum(-1))
    return float(d.mean())


def batch_objective(mp, inputs, labels, cfg, backward=True):
    """Loss terms and full parameter gradients for one (P, K, M, ...) batch.

    ``labels`` are class indices (P,).  Returns ``(terms, grads, extra_grads,
    feats)``; with ``backward=False`` only ``terms`` is computed and the
    gradient slots are None.
    """
    P, K, M = inputs.shape[:3]
    flat = inputs.reshape((P * K, M) + inputs.shape[3:])
    (feats, _, logits), caches = mdl.model_forward(mp, flat, training=True)
    sample_labels = np.repeat(labels, K)
    if cfg.metric_on == "neck":
        F = np.stack([c["std"] for c in caches], axis=1).reshape(P, K, M, -1)
    else:
        F = feats.reshape(P, K, M, -1)

    ce = losses.cross_entropy(logits, sample_labels)
    dlogits = losses.cross_entropy_gradient(logits, sample_labels)
    terms = {
        "L_ce": ce,
        "L_cdc_s": losses.cdc_sample_loss(F) if K >= 2 else 0.0,
        "L_cdc_m": losses.cdc_modality_loss(F),
        "intra_sample_dist": _mean_pairwise_dist(losses.sample_centers(F)),
        "intra_modality_dist": _mean_pairwise_dist(losses.modality_centers(F)),
    }

    v = cfg.loss_variant
    extra_grads = {}
    if v == "ce_only":
        aux, dF = 0.0, np.zeros_like(F)
    elif v == "cdc":
        aux, dF = terms["L_cdc_s"] + cfg.alpha * terms["L_cdc_m"], losses.cdc_gradient(F, cfg.alpha)
    elif v == "cdc_s":
        aux, dF = terms["L_cdc_s"], losses.cdc_sample_gradient(F)
    elif v in ("cdc_m", "hc"):
        aux, dF = losses.hc_loss(F), losses.hc_gradient(F)
    else:
        centers = mp.extras["centers"]
        aux = losses.center_loss(F, labels, centers)
        dF, dcenters = losses.center_gradient(F, labels, centers)
        extra_grads["centers"] = cfg.lam * dcenters
    terms["L_total"] = losses.total_loss(ce, aux, cfg.lam)
    if not backward:
        return terms, None, None, feats

    dF = cfg.lam * dF.reshape(feats.shape)
    if cfg.metric_on == "neck":
        grads = mdl.model_backward(mp, np.zeros_like(feats), dlogits, caches, dstd=dF)
    else:
        grads = mdl.model_backward(mp, dF, dlogits, caches)
    return terms, grads, extra_grads, feats


def fit(manifest, cfg, dims=None, params=None):
    """Train on the manifest's train split.  Returns ``(params, log_rows)``.

    Train identities are mapped to class indices in sorted order.  One epoch
    is ``ceil(train_samples / (P*K))`` PK batches.
    """
    train = manifest.split("train")
    if not train:
        raise ConfigError("manifest has no train samples")
    classes = sorted({s.identity for s in train})
    class_of = {c: i for i, c in enumerate(classes)}
    if dims is None:
        dims = mdl.ModelDims(input_shape=tuple(train[0].inputs[0].shape))
    if params is None:
        params = mdl.init_params(cfg.seed, dims, len(classes), cfg.norm_variant,
                                 manifest.modalities)
    if cfg.loss_variant == "center" and "centers" not in params.extras:
        params.extras["centers"] = np.zeros((len(classes), params.dims.feat_dim))

    rng = np.random.default_rng([cfg.seed, 1])
    opt, opt_extra = OptimizerState(), OptimizerState()
    n_batches = batches_per_epoch(len(train), cfg.P, cfg.K)
    log = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        acc = {k: 0.0 for k in LOG_HEADER[2:]}
        for b in range(n_batches):
            batch = pk_sample(train, cfg.P, cfg.K, rng)
            labels = np.array([class_of[i] for i in batch.identities])
            terms, grads, extra, feats = batch_objective(params, batch.inputs, labels, cfg)
            if not math.isfinite(terms["L_total"]):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b}: "
                    + ", ".join(f"{k}={v!r}" for k, v in terms.items()))
            adam_step(opt, params.params, grads, lr)
            if extra:
                adam_step(opt_extra, params.extras, extra, lr)
            mdl.update_neck_stats(params, feats, cfg.neck_momentum)
            for k in acc:
                acc[k] += terms[k]
        log.append({"epoch": epoch, "lr": lr, **{k: v / n_batches for k, v in acc.items()}})
    return params, log


def log_to_csv(log):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for row in log:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_HEADER[1:]])
    return buf.getvalue()
