"""Composite experiments: held-out evaluation, ablation grid, hyper-parameter sweep."""

from dataclasses import replace

import numpy as np

from . import evaluation as ev
from . import model as mdl
from .data import SynthConfig, generate_synthetic
from .training import TrainConfig, fit

ABLATION_VARIANTS = {
    "baseline": ("ce_only", "none"),
    "+cdc": ("cdc", "none"),
    "+cdc+alnu": ("cdc", "ALNU"),
}
TABLE5_VARIANTS = {
    "baseline": ("ce_only", "none"),
    "+IN": ("ce_only", "IN"),
    "+LN": ("ce_only", "LN"),
    "+ALNU": ("ce_only", "ALNU"),
    "+center": ("center", "none"),
    "+hc": ("hc", "none"),
    "+cdc_s": ("cdc_s", "none"),
    "+cdc_m": ("cdc_m", "none"),
    "+cdc": ("cdc", "none"),
    "+cdc+alnu": ("cdc", "ALNU"),
}
LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
ALPHA_GRID = LAMBDA_GRID


def test_features(params, manifest):
    """Neck features and metadata of the query and gallery splits."""
    q = mdl.extract_features(params, manifest.stack("query"))
    g = mdl.extract_features(params, manifest.stack("gallery"))
    return q, g, manifest.metadata("query"), manifest.metadata("gallery")


def heldout_metrics(params, manifest, protocol="time_label", subset="R+N+T"):
    q, g, qm, gm = test_features(params, manifest)
    return ev.modality_subset_eval(q, g, qm, gm, subset, protocol)


def run_ablation(seeds=range(5), variants=ABLATION_VARIANTS, synth=SynthConfig(),
                 train=TrainConfig(), protocol="time_label"):
    """Held-out metrics per (variant, seed).

    Each seed regenerates the dataset and re-initializes the model, so the
    spread covers both data and optimization randomness.
    """
    results = {name: [] for name in variants}
    for seed in seeds:
        manifest = generate_synthetic(replace(synth, seed=seed))
        for name, (loss, norm) in variants.items():
            cfg = replace(train, seed=seed, loss_variant=loss, norm_variant=norm)
            params, _ = fit(manifest, cfg)
            m = heldout_metrics(params, manifest, protocol)
            results[name].append({k: float(m[k]) for k in ("mAP", "rank1", "rank5", "rank10")})
    return results


def median_metric(results, key="mAP"):
    return {name: float(np.median([r[key] for r in rows])) for name, rows in results.items()}


def sweep_grid(lambdas=LAMBDA_GRID, alphas=ALPHA_GRID, fixed_alpha=0.6, fixed_lambda=0.3):
    """(param, lambda, alpha) cells: lambdas at fixed alpha, then alphas at fixed lambda."""
    cells = [("lambda", lam, fixed_alpha) for lam in lambdas]
    cells += [("alpha", fixed_lambda, a) for a in alphas]
    return cells


def run_sweep(manifest, train, cells, protocol="time_label"):
    rows = []
    for param, lam, alpha in cells:
        params, _ = fit(manifest, replace(train, lam=lam, alpha=alpha))
        m = heldout_metrics(params, manifest, protocol)
        rows.append({"param": param, "lambda": lam, "alpha": alpha,
                     **{k: float(m[k]) for k in ("mAP", "rank1", "rank5", "rank10")}})
    return rows
