"""Retrieval evaluation: ranking under a junk protocol, CMC, mAP, modality
subsets, masked modality centers and the random-missing experiment.

Metadata is a dict of equal-length arrays, at least ``"id"`` plus whatever
field the protocol filter needs (``"time"``, ``"camera"``, ``"viewpoint"``).
Junk gallery entries are dropped from both the ranking and the positive set;
queries left with no positive are skipped when averaging.
"""

import csv
import io
import os
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, InputError, MetricError, ShapeError

PROTOCOLS = {"time_label": "time", "camera": "camera", "viewpoint": "viewpoint", "none": None}
SUBSET_TOKENS = {"R": 0, "N": 1, "T": 2}
DEFAULT_SUBSETS = ("R", "N", "T", "R+N", "R+T", "N+T", "R+N+T")
MISSING_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
REPORT_HEADER = ("protocol", "subset", "ratio", "trial", "mAP", "rank1", "rank5", "rank10")


def distance_matrix(queries, gallery, chunk=512):
    """Plain Euclidean distances, shape (n_queries, n_gallery)."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ShapeError(f"cannot compare features of shape {q.shape} and {g.shape}")
    out = np.empty((len(q), len(g)))
    for i in range(0, len(q), chunk):
        diff = q[i:i + chunk, None, :] - g[None, :, :]
        out[i:i + chunk] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def apply_protocol_filter(query_meta, gallery_meta, kind="time_label"):
    """Boolean junk matrix: gallery entries with the query's id AND the same filter field."""
    if kind not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {kind!r}")
    q_id = np.asarray(query_meta["id"])
    g_id = np.asarray(gallery_meta["id"])
    field = PROTOCOLS[kind]
    if field is None:
        return np.zeros((len(q_id), len(g_id)), dtype=bool)
    if field not in query_meta or field not in gallery_meta:
        raise ConfigError(f"protocol {kind!r} needs a {field!r} field in the metadata")
    same_id = q_id[:, None] == g_id[None, :]
    same_field = np.asarray(query_meta[field])[:, None] == np.asarray(gallery_meta[field])[None, :]
    return same_id & same_field


@dataclass
class RankingResult:
    order: list  # per query: gallery indices by nondecreasing distance, junk removed
    positives: list  # per query: bool flags aligned with ``order``
    query_ids: np.ndarray

    @property
    def valid(self):
        return [bool(p.any()) for p in self.positives]


def rank_gallery(distmat, query_meta, gallery_meta, protocol="time_label"):
    distmat = np.asarray(distmat, dtype=np.float64)
    junk = apply_protocol_filter(query_meta, gallery_meta, protocol)
    if distmat.shape != junk.shape:
        raise ShapeError(f"distance matrix {distmat.shape} does not match metadata {junk.shape}")
    g_id = np.asarray(gallery_meta["id"])
    q_id = np.asarray(query_meta["id"])
    order, positives = [], []
    for qi in range(len(q_id)):
        idx = np.argsort(distmat[qi], kind="stable")
        idx = idx[~junk[qi, idx]]
        order.append(idx)
        positives.append(g_id[idx] == q_id[qi])
    return RankingResult(order, positives, q_id)


def _valid_positives(rankings):
    rows = [p for p in rankings.positives if p.any()]
    if not rows:
        raise MetricError("no query has a positive gallery match")
    return rows


def compute_cmc(rankings, max_rank=50):
    """Rank-k hit rates for k = 1..max_rank (index k-1)."""
    rows = _valid_positives(rankings)
    first = np.array([int(np.argmax(p)) for p in rows])
    hits = np.array([np.count_nonzero(first < k) for k in range(1, max_rank + 1)])
    return hits / len(rows)


def average_precision(positives):
    """Mean over positives of precision at their rank, accumulated exactly."""
    ranks = np.flatnonzero(positives) + 1
    if len(ranks) == 0:
        raise MetricError("average precision of a query without positives")
    return sum(Fraction(j, int(r)) for j, r in enumerate(ranks, 1)) / len(ranks)


def compute_map(rankings):
    rows = _valid_positives(rankings)
    return float(sum(average_precision(p) for p in rows) / len(rows))


def evaluate(query_feats, gallery_feats, query_meta, gallery_meta, protocol="time_label"):
    dist = distance_matrix(query_feats, gallery_feats)
    ranking = rank_gallery(dist, query_meta, gallery_meta, protocol)
    cmc = compute_cmc(ranking, max_rank=max(10, len(gallery_feats)))
    return {"mAP": compute_map(ranking), "rank1": cmc[0], "rank5": cmc[4], "rank10": cmc[9], "cmc": cmc}


# ---------------------------------------------------------------- modality handling

def masked_center(features, mask):
    """Mean of the present modalities: (M, D) + (M,) -> (D,), or batched (N, M, D) + (N, M)."""
    f = np.asarray(features, dtype=np.float64)
    t = np.asarray(mask, dtype=np.float64)
    if t.shape != f.shape[:-1]:
        raise ShapeError(f"mask shape {t.shape} does not match features {f.shape}")
    total = t.sum(axis=-1, keepdims=True)
    if np.any(total == 0):
        raise InputError("mask has no modality present")
    return (t[..., None] * f).sum(axis=-2) / total


def parse_subset(subset):
    tokens = [t.strip() for t in subset.split("+")] if isinstance(subset, str) else list(subset)
    tokens = [t for t in tokens if t]
    if not tokens:
        raise ConfigError("empty modality subset")
    bad = [t for t in tokens if t not in SUBSET_TOKENS]
    if bad:
        raise ConfigError(f"unknown modality token(s) {bad}; use R, N, T")
    return [SUBSET_TOKENS[t] for t in tokens]


def subset_features(features, subset):
    """Concatenate the chosen modality blocks of (N, M, D) features."""
    idx = parse_subset(subset)
    f = np.asarray(features)
    return f[:, idx, :].reshape(len(f), -1)


def modality_subset_eval(query_feats, gallery_feats, query_meta, gallery_meta, subset,
                         protocol="time_label"):
    return evaluate(subset_features(query_feats, subset), subset_features(gallery_feats, subset),
                    query_meta, gallery_meta, protocol)


def center_eval(query_feats, gallery_feats, query_meta, gallery_meta, protocol="time_label",
                query_mask=None, gallery_mask=None):
    """Evaluate every sample by its masked modality center (all present by default)."""
    qm = np.ones(query_feats.shape[:2]) if query_mask is None else query_mask
    gm = np.ones(gallery_feats.shape[:2]) if gallery_mask is None else gallery_mask
    return evaluate(masked_center(query_feats, qm), masked_center(gallery_feats, gm),
                    query_meta, gallery_meta, protocol)


@dataclass(frozen=True)
class MissingConfig:
    ratios: tuple = MISSING_RATIOS
    trials: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if any(not 0 <= r <= 1 for r in self.ratios):
            raise ConfigError("missing ratios must lie in [0, 1]")


def random_missing_mask(n, M, ratio, rng):
    """(n, M) presence mask: round(ratio*n) samples lose modalities.

    Of those, ``count // 2`` lose one modality and the rest lose two (one
    modality always survives when M == 3).
    """
    mask = np.ones((n, M), dtype=bool)
    count = int(round(ratio * n))
    hit = rng.permutation(n)[:count]
    n_one = count // 2
    for j, s in enumerate(hit):
        drop = 1 if j < n_one else min(2, M - 1)
        mask[s, rng.choice(M, size=drop, replace=False)] = False
    return mask


def missing_experiment(query_feats, gallery_feats, query_meta, gallery_meta, cfg=MissingConfig(),
                       protocol="time_label"):
    """Mean metrics per missing ratio; every sample is represented by its masked center.

    Masks are drawn jointly over queries and gallery (the whole test set).
    Returns ``(summary_rows, trial_rows)``.
    """
    nq, M = query_feats.shape[:2]
    ng = gallery_feats.shape[0]
    summary, trials = [], []
    for ri, ratio in enumerate(cfg.ratios):
        per_trial = []
        for t in range(cfg.trials):
            rng = np.random.default_rng([cfg.seed, ri, t])
            mask = random_missing_mask(nq + ng, M, ratio, rng)
            m = center_eval(query_feats, gallery_feats, query_meta, gallery_meta, protocol,
                            mask[:nq], mask[nq:])
            per_trial.append(m)
            trials.append({"ratio": ratio, "trial": t, **_scalars(m)})
        summary.append({"ratio": ratio, **{k: exact_mean([m[k] for m in per_trial])
                                           for k in ("mAP", "rank1", "rank5", "rank10")}})
    return summary, trials


def exact_mean(values):
    """Mean of floats with a single rounding; the mean of identical values is that value."""
    return float(sum(Fraction(float(v)) for v in values) / len(values))


def _scalars(m):
    return {k: float(m[k]) for k in ("mAP", "rank1", "rank5", "rank10")}


# ---------------------------------------------------------------- reports

def report_rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([r["protocol"], r["subset"], _fmt(r.get("ratio", 0.0)), r.get("trial", 0)]
                   + [_fmt(r[k]) for k in ("mAP", "rank1", "rank5", "rank10")])
    return buf.getvalue()


def _fmt(v):
    return f"{float(v):.6f}"


def emit_report(rows, path):
    """Write ``<path>.csv`` and ``<path>.svg``; returns the two paths.

    Rows carrying several distinct ratios are drawn as one curve per metric
    against the ratio; otherwise as grouped bars per (protocol, subset).
    """
    rows = list(rows)
    if not rows:
        raise MetricError("no metrics to report")
    base = os.fspath(path)
    if base.endswith(".csv"):
        base = base[:-4]
    text = report_rows_to_csv(rows)
    svg = _render_svg(rows)
    with open(base + ".csv", "w", newline="") as fh:
        fh.write(text)
    with open(base + ".svg", "w") as fh:
        fh.write(svg)
    return base + ".csv", base + ".svg"


def _render_svg(rows):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = ("mAP", "rank1", "rank5", "rank10")
    with matplotlib.rc_context({"svg.hashsalt": "ccnet", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        ratios = sorted({float(r.get("ratio", 0.0)) for r in rows})
        if len(ratios) > 1:
            for k in metrics:
                ys = [np.mean([r[k] for r in rows if float(r.get("ratio", 0.0)) == x]) for x in ratios]
                ax.plot(ratios, ys, marker="o", label=k)
            ax.set_xlabel("missing ratio")
        else:
            labels = [f"{r['protocol']}:{r['subset']}" for r in rows]
            x = np.arange(len(rows))
            width = 0.2
            for j, k in enumerate(metrics):
                ax.bar(x + (j - 1.5) * width, [r[k] for r in rows], width, label=k)
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return buf.getvalue()
