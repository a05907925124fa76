"""Permutation-free training objective and posterior alignment utilities."""
from __future__ import annotations

from itertools import permutations

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

CLAMP = 1e-7
MAX_ENUMERATED_SPEAKERS = 6


def bce(posteriors: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy between posteriors and binary labels.

    Posteriors are clamped to [1e-7, 1 - 1e-7] inside the logs.
    """
    labels = np.asarray(labels, dtype=posteriors.dtype)
    if posteriors.shape != labels.shape:
        raise ShapeError(f"posteriors {posteriors.shape} vs labels {labels.shape}")
    n_speakers, n_frames = labels.shape
    y = ag.clip(posteriors, CLAMP, 1.0 - CLAMP)
    pos = ag.mul(Tensor(labels), ag.log(y))
    neg = ag.mul(Tensor(1.0 - labels), ag.log(ag.add(ag.scale(y, -1.0), 1.0)))
    total = ag.sum_all(ag.add(pos, neg))
    return ag.scale(total, -1.0 / (n_speakers * n_frames))


def pit_loss(posteriors: Tensor, labels: np.ndarray) -> tuple[Tensor, tuple[int, ...]]:
    """Minimum BCE over all row permutations of the labels.

    Returns the minimizing loss (gradients flow through that branch only)
    and the applied permutation. Ties go to the lexicographically smallest
    permutation. Enumeration is factorial, so the speaker count is capped.
    """
    labels = np.asarray(labels)
    n_speakers = labels.shape[0]
    if n_speakers > MAX_ENUMERATED_SPEAKERS:
        raise ValueError(f"{n_speakers} speakers exceed the enumeration cap of {MAX_ENUMERATED_SPEAKERS}")
    best_loss, best_perm = None, None
    for perm in permutations(range(n_speakers)):
        loss = bce(posteriors, labels[list(perm), :])
        if best_loss is None or loss.item() < best_loss.item():
            best_loss, best_perm = loss, perm
    return best_loss, best_perm


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation with the zero-variance convention: degenerate rows give 0."""
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0
    return float((a * b).sum() / denom)


def best_permutation_by_correlation(y_ref: np.ndarray, y_other: np.ndarray) -> tuple[int, ...]:
    """Row permutation of ``y_other`` maximizing summed per-speaker correlation.

    Used to align per-channel posteriors before averaging. Ties go to the
    lexicographically smallest permutation.
    """
    y_ref = np.asarray(y_ref)
    y_other = np.asarray(y_other)
    if y_ref.shape != y_other.shape:
        raise ShapeError(f"posterior shapes differ: {y_ref.shape} vs {y_other.shape}")
    n_speakers = y_ref.shape[0]
    if n_speakers > MAX_ENUMERATED_SPEAKERS:
        raise ValueError(f"{n_speakers} speakers exceed the enumeration cap of {MAX_ENUMERATED_SPEAKERS}")
    best_score, best_perm = None, None
    for perm in permutations(range(n_speakers)):
        score = sum(_pearson(y_ref[s], y_other[p]) for s, p in enumerate(perm))
        if best_score is None or score > best_score + 1e-12:
            best_score, best_perm = score, perm
    return best_perm
