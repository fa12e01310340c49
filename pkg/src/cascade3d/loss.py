"""Softmax, class-balancing weights and the masked weighted cross-entropy.

Logits are channels-last arrays ``(..., K)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, EmptyMaskError


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits passed to softmax")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights ``(1 - N_i / N_C) / (K - 1)``."""

    weights: tuple[float, ...]
    region_count: int
    class_counts: tuple[int, ...]

    @classmethod
    def from_counts(cls, class_counts, region_count: int | None = None) -> "ClassWeights":
        counts = tuple(int(c) for c in class_counts)
        k = len(counts)
        if k < 2:
            raise ValueError("need at least two classes")
        n_c = sum(counts) if region_count is None else int(region_count)
        if n_c <= 0:
            raise EmptyMaskError("class weights need a non-empty candidate region")
        lam = tuple((1.0 - n / n_c) / (k - 1) for n in counts)
        return cls(lam, n_c, counts)

    @property
    def num_classes(self) -> int:
        return len(self.weights)

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.weights, dtype=dtype)


def class_weights(labels, region, num_classes: int | None = None) -> ClassWeights:
    """Count classes inside ``region`` (a CandidateRegion or bool mask)."""
    mask = getattr(region, "mask", region)
    data = getattr(labels, "data", labels)
    k = num_classes if num_classes is not None else labels.num_classes
    inside = np.asarray(data)[np.asarray(mask, dtype=bool)]
    if inside.size == 0:
        raise EmptyMaskError("class weights need a non-empty candidate region")
    return ClassWeights.from_counts(np.bincount(inside, minlength=k)[:k])


def pooled_class_weights(pairs, num_classes: int) -> ClassWeights:
    """Weights from class counts summed over several (labels, region) pairs."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels, region in pairs:
        mask = getattr(region, "mask", region)
        inside = np.asarray(getattr(labels, "data", labels))[mask]
        counts += np.bincount(inside, minlength=num_classes)[:num_classes]
    return ClassWeights.from_counts(counts)


def weighted_ce(logits, labels, mask, weights) -> tuple[float, np.ndarray]:
    """Masked class-weighted cross-entropy and its gradient w.r.t. ``logits``.

    ``loss = sum_{x in mask} w[label(x)] * -log p[label(x)](x) / N_in``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != labels.shape or labels.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: logits {logits.shape}, labels {labels.shape}, mask {mask.shape}"
        )
    n_in = int(np.count_nonzero(mask))
    if n_in == 0:
        raise EmptyMaskError("loss window contains no candidate-region voxels")
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits")
    lam = weights.as_array(np.float64) if isinstance(weights, ClassWeights) else np.asarray(weights, np.float64)
    k = logits.shape[-1]

    lg = logits[mask].astype(np.float64)
    lab = labels[mask].astype(np.intp)
    logp = log_softmax(lg)
    w = lam[lab]
    loss = float(-(w * logp[np.arange(lab.size), lab]).sum() / n_in)

    g = np.exp(logp)
    g[np.arange(lab.size), lab] -= 1.0
    g *= (w / n_in)[:, None]
    grad = np.zeros(logits.shape, dtype=logits.dtype)
    grad[mask] = g.reshape(-1, k)
    return loss, grad
