"""Class weights, Beta(1, beta) weight reversal, weighted batch samplers and mixup."""

from dataclasses import dataclass

import numpy as np

from .nn import MixedTargets


@dataclass
class ClassWeights:
    """Forward weights ``v``, raw reversed values ``s`` and the reversed distribution ``v_tilde``."""

    forward: np.ndarray
    raw_reversed: np.ndarray
    reversed: np.ndarray
    beta: float


def class_weights(selected_noisy_labels, class_count):
    """L1-normalized class counts of the selected samples."""
    counts = np.bincount(np.asarray(selected_noisy_labels, dtype=np.int64), minlength=class_count)
    total = counts.sum()
    if total == 0:
        raise ValueError("cannot compute class weights of an empty selection")
    return counts / total


def beta_mapping(w, beta):
    """Beta(1, beta) density at ``w``: ``beta * (1 - w) ** (beta - 1)`` since B(1, beta) = 1 / beta."""
    w = np.asarray(w, dtype=np.float64)
    if beta == 1:
        return np.ones_like(w)
    return beta * np.power(1.0 - w, beta - 1.0)


def reverse_weights(forward, beta):
    forward = np.asarray(forward, dtype=np.float64)
    if beta < 1:
        raise ValueError(f"beta must be >= 1, got {beta}")
    if np.any(forward < 0) or np.any(forward > 1):
        raise ValueError("weights must lie in [0, 1]")
    raw = beta_mapping(forward, beta)
    total = raw.sum()
    if not total > 0:
        raise ValueError("reversed weights sum to zero")
    return ClassWeights(forward, raw, raw / total, float(beta))


def per_sample_draw_weights(selected, noisy_labels, class_dist):
    """Per-sample weights giving selected samples of class k total mass ``class_dist[k]``.

    Mass assigned to a class with no selected samples is spread proportionally
    over the nonempty classes. If no nonempty class carries mass (a one-class
    selection under reversed weights), every selected sample gets equal weight.
    Returns ``(weights, redistributed)``.
    """
    selected = np.asarray(selected, dtype=bool)
    labels = np.asarray(noisy_labels, dtype=np.int64)
    dist = np.asarray(class_dist, dtype=np.float64)
    if abs(dist.sum() - 1.0) > 1e-9:
        raise ValueError("class distribution must sum to 1")
    counts = np.bincount(labels[selected], minlength=dist.size)
    orphaned = (dist > 0) & (counts == 0)
    redistributed = bool(orphaned.any())
    if not selected.any():
        raise ValueError("empty selection")
    if redistributed:
        dist = np.where(counts > 0, dist, 0.0)
        if dist.sum() == 0:
            dist = counts.astype(np.float64)
        dist = dist / dist.sum()
    per_class = np.divide(dist, counts, out=np.zeros_like(dist), where=counts > 0)
    return np.where(selected, per_class[labels], 0.0), redistributed


def weighted_batch(rng, weights, size):
    """``size`` i.i.d. indices drawn with probability proportional to ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    total = weights.sum()
    if not total > 0:
        raise ValueError("all sampling weights are zero")
    cdf = np.cumsum(weights / total)
    idx = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
    return np.minimum(idx, weights.size - 1)


def sample_beta(rng, alpha, size):
    """Beta(alpha, alpha) via two independent Gamma(alpha) draws."""
    g1 = rng.standard_gamma(alpha, size)
    g2 = rng.standard_gamma(alpha, size)
    return g1 / (g1 + g2)


@dataclass
class MixupBatch:
    features: np.ndarray
    targets: MixedTargets
    alpha: float

    def __len__(self):
        return self.features.shape[0]


def mixup_batch(x_a, y_a, x_b, y_b, alpha, rng, per_row=True, gamma=None):
    """Pair row j of A with row j of B: ``gamma * x_a + (1 - gamma) * x_b``.

    ``gamma`` overrides the Beta(alpha, alpha) draw (scalar or per-row array).
    """
    x_a = np.atleast_2d(np.asarray(x_a, dtype=np.float64))
    x_b = np.atleast_2d(np.asarray(x_b, dtype=np.float64))
    if x_a.shape != x_b.shape:
        raise ValueError(f"batch shapes differ: {x_a.shape} vs {x_b.shape}")
    if len(y_a) != x_a.shape[0] or len(y_b) != x_b.shape[0]:
        raise ValueError("labels and features differ in batch size")
    n = x_a.shape[0]
    if gamma is None:
        if not alpha > 0:
            raise ValueError("mixup alpha must be positive")
        gamma = sample_beta(rng, alpha, n) if per_row else np.full(n, sample_beta(rng, alpha, 1)[0])
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))
    mixed = gamma[:, None] * x_a + (1.0 - gamma[:, None]) * x_b
    return MixupBatch(mixed, MixedTargets(y_a, y_b, gamma), float(alpha))
