"""Cross-directional center (CdC) loss, comparison losses and the total objective.

Batch features are a float array ``F`` of shape ``(P, K, M, D)``: P identities,
K samples per identity, M modalities, D feature dims.  Every identity in the
batch contributes independently; nothing is divided by P.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ShapeError

ALPHA = 0.6
LAMBDA = 0.3


@dataclass(frozen=True)
class CdcConfig:
    alpha: float = ALPHA
    lam: float = LAMBDA

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ConfigError("alpha and lambda must be nonnegative")


def _check(F):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 4:
        raise ShapeError(f"batch features must be (P, K, M, D), got shape {F.shape}")
    if F.shape[0] < 1:
        raise ShapeError("batch has no identities")
    return F


def sample_centers(F):
    """Mean over modalities of each sample: shape (P, K, D)."""
    F = _check(F)
    if F.shape[2] < 1:
        raise ShapeError("empty modality axis")
    return F.mean(axis=2)


def modality_centers(F):
    """Mean over samples of each modality: shape (P, M, D)."""
    F = _check(F)
    if F.shape[1] < 1:
        raise ShapeError("empty sample axis")
    return F.mean(axis=1)


def _pairwise_sq_sum(C):
    # sum over unordered pairs a<b of ||C_a - C_b||^2 over all identities;
    # the full difference tensor holds every pair twice
    diff = C[:, :, None, :] - C[:, None, :, :]
    return float(np.vdot(diff, diff)) / 2


def _sample_term(F):
    K = F.shape[1]
    if K < 2:
        raise ConfigError("sample-center loss needs K >= 2 samples per identity")
    return _pairwise_sq_sum(F.mean(axis=2)) / (2 * K * (K - 1))


def _modality_term(F):
    M = F.shape[2]
    if M < 2:
        raise ConfigError("modality-center loss needs M >= 2 modalities")
    return _pairwise_sq_sum(F.mean(axis=1)) / (2 * M * (M - 1))


def cdc_sample_loss(F):
    return _sample_term(_check(F))


def cdc_modality_loss(F):
    return _modality_term(_check(F))


def cdc_loss(F, alpha=ALPHA):
    F = _check(F)
    return _sample_term(F) + alpha * _modality_term(F)


def cdc_gradient(F, alpha=ALPHA):
    """Closed-form dL_CdC/dF, same shape as F.

    dL/df[i,k,m] = (C_S[i,k] - fbar_i) / (M (K-1)) + alpha (C_M[i,m] - fbar_i) / (K (M-1))
    """
    F = _check(F)
    _, K, M, _ = F.shape
    if K < 2 or M < 2:
        raise ConfigError("CdC gradient needs K >= 2 and M >= 2")
    fbar = F.mean(axis=(1, 2), keepdims=True)
    cs = sample_centers(F)[:, :, None, :]
    cm = modality_centers(F)[:, None, :, :]
    return (cs - fbar) / (M * (K - 1)) + alpha * (cm - fbar) / (K * (M - 1))


def cdc_sample_gradient(F):
    F = _check(F)
    _, K, M, _ = F.shape
    if K < 2:
        raise ConfigError("sample-center loss needs K >= 2 samples per identity")
    fbar = F.mean(axis=(1, 2), keepdims=True)
    return np.broadcast_to((sample_centers(F)[:, :, None] - fbar) / (M * (K - 1)), F.shape).copy()


def cdc_modality_gradient(F):
    F = _check(F)
    _, K, M, _ = F.shape
    if M < 2:
        raise ConfigError("modality-center loss needs M >= 2 modalities")
    fbar = F.mean(axis=(1, 2), keepdims=True)
    return np.broadcast_to((modality_centers(F)[:, None] - fbar) / (K * (M - 1)), F.shape).copy()


def hc_loss(F):
    """Hetero-center loss: the modality-center term on its own."""
    return cdc_modality_loss(F)


def hc_gradient(F):
    return cdc_modality_gradient(F)


def center_loss(F, labels, centers):
    """Mean squared distance of every feature to its identity center, scaled by 1/2.

    L = 1 / (2 N) * sum ||f - c_y||^2 with N = P*K*M features pooled over
    modalities.  ``centers`` is indexed by label: ``centers[labels[i]]``.
    """
    F = _check(F)
    diff = _center_diff(F, labels, centers)
    n = F.shape[0] * F.shape[1] * F.shape[2]
    return float(np.sum(diff ** 2)) / (2 * n)


def center_gradient(F, labels, centers):
    """Return (dF, dcenters) for :func:`center_loss`."""
    F = _check(F)
    diff = _center_diff(F, labels, centers)
    n = F.shape[0] * F.shape[1] * F.shape[2]
    dF = diff / n
    dcenters = np.zeros_like(np.asarray(centers, dtype=np.float64))
    np.add.at(dcenters, np.asarray(labels), -dF.sum(axis=(1, 2)))
    return dF, dcenters


def _center_diff(F, labels, centers):
    labels = np.asarray(labels)
    centers = np.asarray(centers, dtype=np.float64)
    if labels.shape != (F.shape[0],):
        raise ShapeError("need one label per identity in the batch")
    if labels.min() < 0 or labels.max() >= len(centers):
        raise ConfigError("no learned center for some identity in the batch")
    return F - centers[labels][:, None, None, :]


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Softmax cross entropy summed over branch heads, averaged over samples.

    ``logits`` has shape (N, M, C) (or (M, C) for one sample) and ``labels``
    shape (N,).
    """
    logits, labels = _ce_inputs(logits, labels)
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, labels[:, None, None].repeat(logits.shape[1], 1), axis=2)
    return float(-picked.sum() / logits.shape[0])


def cross_entropy_gradient(logits, labels):
    raw = np.asarray(logits)
    logits, labels = _ce_inputs(logits, labels)
    probs = np.exp(_log_softmax(logits))
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), :, labels] = 1.0
    grad = (probs - onehot) / logits.shape[0]
    return grad.reshape(raw.shape)


def _ce_inputs(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 2:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if logits.ndim != 3 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.min() < 0 or labels.max() >= logits.shape[2]:
        raise InputError(f"label out of range for {logits.shape[2]} classes")
    return logits, labels


def total_loss(ce, cdc, lam=LAMBDA):
    return ce + lam * cdc
