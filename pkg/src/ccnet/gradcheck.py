"""Finite-difference suite behind the ``gradcheck`` command.

Each check compares an analytic gradient with central differences and
reports the max relative error (see ``numkit.relative_error``) over the
concatenated gradient of everything the check differentiates.  Fixtures
are tiny and seeded; all parameters get a random jitter first so no ReLU
sits exactly on its kink.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import losses
from . import model as mdl
from . import normalization as nrm
from .numkit import finite_diff_grad, relative_error
from .training import TrainConfig, batch_objective

TOLERANCE = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)


def _dict_fd(objective, arrays, names=None):
    """Finite-difference gradients of ``objective()`` w.r.t. arrays mutated in place."""
    out = {}
    for name in names or arrays:
        p = arrays[name]

        def f(v, p=p):
            old = p.copy()
            p[...] = v
            try:
                return objective()
            finally:
                p[...] = old

        out[name] = finite_diff_grad(f, p.copy())
    return out


def _worst(analytic, numeric):
    # one relative error over the whole concatenated gradient, so a parameter
    # whose gradient is ~0 (dead unit, saturated gate) is judged on the common scale
    keys = sorted(numeric)
    a = np.concatenate([np.ravel(analytic[k]) for k in keys])
    n = np.concatenate([np.ravel(numeric[k]) for k in keys])
    return relative_error(a, n)


def check_cdc(rng, batches=10, shape=(3, 3, 3, 4), alpha=losses.ALPHA, grad_scale=1.0):
    """Closed-form CdC gradient against differences of the pairwise loss."""
    worst = 0.0
    for _ in range(batches):
        F = rng.normal(size=shape)
        a = grad_scale * losses.cdc_gradient(F, alpha)
        n = finite_diff_grad(lambda x: losses.cdc_loss(x, alpha), F)
        worst = max(worst, relative_error(a, n))
    return worst


def check_term(rng, loss, grad, shape=(3, 3, 3, 4)):
    F = rng.normal(size=shape)
    return relative_error(grad(F), finite_diff_grad(loss, F))


def check_center(rng, shape=(3, 3, 3, 4), classes=5):
    F = rng.normal(size=shape)
    labels = rng.choice(classes, size=shape[0], replace=False)
    centers = rng.normal(size=(classes, shape[-1]))
    dF, dc = losses.center_gradient(F, labels, centers)
    nF = finite_diff_grad(lambda x: losses.center_loss(x, labels, centers), F)
    nc = finite_diff_grad(lambda c: losses.center_loss(F, labels, c), centers)
    return max(relative_error(dF, nF), relative_error(dc, nc))


def check_cross_entropy(rng, n=6, heads=3, classes=5):
    logits = rng.normal(size=(n, heads, classes))
    labels = rng.integers(classes, size=n)
    a = losses.cross_entropy_gradient(logits, labels)
    return relative_error(a, finite_diff_grad(lambda z: losses.cross_entropy(z, labels), logits))


def _jittered_alnu(rng, channels):
    p = nrm.init_alnu(rng, channels)
    arrays = {k: np.array(v + 0.1 * rng.normal(size=np.shape(v))) for k, v in p.arrays().items()}
    return nrm.AlnuParams.from_arrays(arrays)


def check_alb(rng, shape=(2, 4, 4, 8)):
    params = _jittered_alnu(rng, shape[-1]).gamma_block
    x = rng.normal(size=shape)
    w = rng.normal(size=shape[0])
    out, cache = nrm.alb_forward(params, x)
    dx, grads = nrm.alb_backward(w, cache)
    arrays = params.arrays()
    n = _dict_fd(lambda: float(w @ nrm.alb_forward(nrm.AlbParams.from_arrays(arrays), x)[0]), arrays)
    nx = finite_diff_grad(lambda v: float(w @ nrm.alb_forward(params, v)[0]), x)
    return max(_worst(grads, n), relative_error(dx, nx))


def check_alnu(rng, shape=(2, 4, 4, 8)):
    params = _jittered_alnu(rng, shape[-1])
    arrays = params.arrays()
    x = 2.0 * rng.normal(size=shape) + 1.0
    w = rng.normal(size=shape)

    def loss_p():
        return float((w * nrm.alnu_forward(nrm.AlnuParams.from_arrays(arrays), x)[0]).sum())

    out, cache = nrm.alnu_forward(params, x)
    dx, grads = nrm.alnu_backward(w, cache)
    nx = finite_diff_grad(lambda v: float((w * nrm.alnu_forward(params, v)[0]).sum()), x)
    return max(_worst(grads, _dict_fd(loss_p, arrays)), relative_error(dx, nx))


def check_baseline_norm(rng, mode, shape=(3, 2, 2, 4)):
    state = {"gamma": rng.normal(size=shape[-1]), "beta": rng.normal(size=shape[-1]), "groups": 2}
    x = rng.normal(size=shape)
    w = rng.normal(size=shape)
    out, cache = nrm.baseline_norm(x, mode, state)
    dx, grads = nrm.baseline_norm_backward(w, cache)
    nx = finite_diff_grad(lambda v: float((w * nrm.baseline_norm(v, mode, state)[0]).sum()), x)
    ng = _dict_fd(lambda: float((w * nrm.baseline_norm(x, mode, state)[0]).sum()),
                  {"gamma": state["gamma"], "beta": state["beta"]})
    return max(relative_error(dx, nx), _worst(grads, ng))


TOY_DIMS = mdl.ModelDims(input_shape=(6,), hidden=5, mid_shape=(2, 2, 2), feat_dim=4, part2_hidden=5)
TOY_MAP_DIMS = mdl.ModelDims(input_shape=(4, 4, 2), hidden=5, mid_shape=(4, 4, 2), feat_dim=4,
                             part2_hidden=5)


def toy_model(rng, norm, dims=TOY_DIMS, class_count=4):
    mp = mdl.init_params(int(rng.integers(2**31)), dims, class_count, norm)
    for v in mp.params.values():
        v += 0.2 * rng.normal(size=v.shape)
    for k, v in mp.buffers.items():
        v[...] = rng.uniform(0.5, 1.5, size=v.shape) if k.endswith("var") else 0.1 * rng.normal(size=v.shape)
    return mp


def check_encoder(rng, norm, dims=TOY_DIMS, n=4):
    """Inference-mode encoder: random linear readout of (feature, logits)."""
    mp = toy_model(rng, norm, dims)
    bp = mp.branch(0)
    x = rng.normal(size=(n,) + tuple(dims.input_shape))
    wf = rng.normal(size=(n, dims.feat_dim))
    wl = rng.normal(size=(n, mp.class_count))

    def loss():
        (f, _, z), _ = mdl.encoder_forward(bp, x)
        return float((wf * f).sum() + (wl * z).sum())

    _, cache = mdl.encoder_forward(bp, x)
    grads = mdl.encoder_backward(bp, wf, wl, cache)
    return _worst(grads, _dict_fd(loss, bp.params))


def check_composite(rng, loss_variant, norm, metric_on="feature", P=2, K=2, lam=0.7, alpha=0.6):
    """Full training objective (CE + lam * metric term) w.r.t. every model parameter."""
    mp = toy_model(rng, norm)
    if loss_variant == "center":
        mp.extras["centers"] = rng.normal(size=(mp.class_count, mp.dims.feat_dim))
    cfg = TrainConfig(loss_variant=loss_variant, norm_variant=norm, lam=lam, alpha=alpha,
                      P=P, K=K, metric_on=metric_on)
    x = rng.normal(size=(P, K, len(mp.modalities)) + tuple(mp.dims.input_shape))
    labels = rng.choice(mp.class_count, size=P, replace=False)
    objective = lambda: batch_objective(mp, x, labels, cfg, backward=False)[0]["L_total"]
    _, grads, extra, _ = batch_objective(mp, x, labels, cfg)
    worst = _worst(grads, _dict_fd(objective, mp.params))
    if extra:
        worst = max(worst, _worst(extra, {k: lam * v for k, v in _dict_fd(
            lambda: batch_objective(mp, x, labels, replace(cfg, lam=1.0), backward=False)[0]["L_total"],
            mp.extras).items()}))
    return worst


def run_suite(seed=0, grad_scale=1.0, tolerance=TOLERANCE, cdc_batches=10):
    """All checks in a fixed order; ``grad_scale`` != 1 corrupts the CdC gradient (negative control)."""
    rng = np.random.default_rng(seed)
    checks = [
        ("cdc", lambda: check_cdc(rng, cdc_batches, grad_scale=grad_scale)),
        ("cdc_sample", lambda: check_term(rng, losses.cdc_sample_loss, losses.cdc_sample_gradient)),
        ("cdc_modality", lambda: check_term(rng, losses.cdc_modality_loss, losses.cdc_modality_gradient)),
        ("center", lambda: check_center(rng)),
        ("cross_entropy", lambda: check_cross_entropy(rng)),
        ("alb", lambda: check_alb(rng)),
        ("alnu", lambda: check_alnu(rng)),
    ]
    checks += [(f"norm_{m}", lambda m=m: check_baseline_norm(rng, m)) for m in nrm.NORM_MODES]
    checks += [(f"encoder_{n}", lambda n=n: check_encoder(rng, n)) for n in mdl.NORM_VARIANTS]
    checks.append(("encoder_map_ALNU", lambda: check_encoder(rng, "ALNU", TOY_MAP_DIMS)))
    for loss, norm in (("ce_only", "none"), ("cdc", "none"), ("cdc", "ALNU"), ("cdc", "LN"),
                       ("center", "IN"), ("hc", "none"), ("cdc_s", "none")):
        checks.append((f"composite_{loss}_{norm}", lambda l=loss, n=norm: check_composite(rng, l, n)))
    checks.append(("composite_cdc_ALNU_neck",
                   lambda: check_composite(rng, "cdc", "ALNU", metric_on="neck")))
    return [CheckResult(name, float(fn()), tolerance) for name, fn in checks]
