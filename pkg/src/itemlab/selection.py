"""Noisy-sample selection criteria evaluated on expert heads, and selection metrics.

Three criteria are provided: global small-loss ranking, a two-component 1-D
Gaussian mixture fitted to the losses, and prediction fluctuation over a short
window of epochs.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import log_softmax, softmax

log = logging.getLogger(__name__)

CRITERIA = ("small_loss", "gmm", "fluctuation")


def expert_heads(n_heads, excluded_head):
    """Heads acting as experts when ``excluded_head`` is the classifier.

    With a single head there are no experts; that head selects for itself.
    """
    if not 0 <= excluded_head < n_heads:
        raise IndexError(f"excluded head {excluded_head} outside [0, {n_heads - 1}]")
    heads = [h for h in range(n_heads) if h != excluded_head]
    return heads or [excluded_head]


def compute_expert_losses(net, features, noisy_labels, excluded_head):
    """Per-sample CE averaged over every head except ``excluded_head``."""
    heads = expert_heads(net.n_heads, excluded_head)
    logits = net.forward_all_heads(np.atleast_2d(features))[heads]
    labels = np.asarray(noisy_labels, dtype=np.int64)
    rows = np.arange(labels.size)
    per_head = np.stack([-log_softmax(lg)[rows, labels] for lg in logits])
    return per_head.mean(axis=0)


def expert_predictions(net, features, excluded_head):
    """Argmax of the softmax averaged over the expert heads."""
    heads = expert_heads(net.n_heads, excluded_head)
    probs = softmax(net.forward_all_heads(np.atleast_2d(features))[heads]).mean(axis=0)
    return np.argmax(probs, axis=1)


def small_loss_keep_fraction(epoch, noise_rate, ramp_epochs=10):
    """``1 - noise_rate * min(epoch / ramp_epochs, 1)``, clipped away from zero."""
    ramp = min(epoch / ramp_epochs, 1.0) if ramp_epochs > 0 else 1.0
    return max(1.0 - noise_rate * ramp, 1e-6)


def select_small_loss(losses, keep_fraction):
    """Flag the ``ceil(keep_fraction * N)`` smallest losses; ties go to lower indices."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("empty loss vector")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    n = losses.size
    # round first so e.g. 0.6 * 1525 = 915.0000000000001 keeps 915
    keep = min(n, max(1, math.ceil(round(keep_fraction * n, 9))))
    order = np.argsort(losses, kind="stable")
    selected = np.zeros(n, dtype=bool)
    selected[order[:keep]] = True
    return selected


@dataclass
class Gmm2:
    """Two 1-D Gaussian components fitted on min-max normalized values.

    ``lo`` and ``hi`` are the raw-value range used for normalization. ``status``
    is ``"ok"``, ``"max_iter"`` or ``"degenerate"``.
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    lo: float = 0.0
    hi: float = 1.0
    status: str = "ok"
    n_iter: int = 0
    log_likelihoods: list = field(default_factory=list)

    def normalize(self, values):
        values = np.asarray(values, dtype=np.float64)
        span = self.hi - self.lo
        return (values - self.lo) / span if span > 0 else np.zeros_like(values)

    def component_log_densities(self, x):
        """``log(pi_k) + log N(x | mu_k, sigma_k)`` as an ``(n, 2)`` array."""
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.means) / self.stds
        return np.log(self.weights) - 0.5 * z**2 - np.log(self.stds) - 0.5 * math.log(2 * math.pi)

    def posterior_low(self, raw_values):
        """Posterior probability of the low-mean component for raw values."""
        logd = self.component_log_densities(self.normalize(raw_values))
        return np.exp(logd[:, 0] - np.logaddexp(logd[:, 0], logd[:, 1]))


def _total_log_likelihood(gmm, x):
    logd = gmm.component_log_densities(x)
    return float(np.logaddexp(logd[:, 0], logd[:, 1]).sum())


def fit_gmm2(values, max_iter=100, tol=1e-6, std_floor=1e-4):
    """EM fit of a two-component 1-D Gaussian mixture.

    Values are min-max normalized to [0, 1]. Initialization splits the sorted
    values at the median. Standard deviations are clamped at ``std_floor`` in
    the M-step, which keeps EM monotone. Iteration stops when the log-likelihood
    gain drops below ``tol`` or after ``max_iter`` M-steps.
    """
    raw = np.asarray(values, dtype=np.float64).ravel()
    if raw.size < 4:
        raise ValueError(f"need at least 4 values, got {raw.size}")
    lo, hi = float(raw.min()), float(raw.max())
    if not hi > lo:
        log.warning("fit_gmm2: all %d values equal; returning degenerate fit", raw.size)
        return Gmm2(
            np.array([0.5, 0.5]), np.zeros(2), np.full(2, std_floor), lo, hi, status="degenerate"
        )
    x = (raw - lo) / (hi - lo)
    xs = np.sort(x)
    half = xs.size // 2
    parts = (xs[:half], xs[half:])
    gmm = Gmm2(
        weights=np.array([p.size / xs.size for p in parts]),
        means=np.array([p.mean() for p in parts]),
        stds=np.array([max(p.std(), std_floor) for p in parts]),
        lo=lo,
        hi=hi,
        status="max_iter",
    )
    ll = _total_log_likelihood(gmm, x)
    gmm.log_likelihoods.append(ll)
    for it in range(1, max_iter + 1):
        logd = gmm.component_log_densities(x)
        resp = np.exp(logd - np.logaddexp(logd[:, :1], logd[:, 1:]))
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            gmm.status = "degenerate"
            break
        means = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - means) ** 2).sum(axis=0) / nk
        gmm.weights = nk / nk.sum()
        gmm.means = means
        gmm.stds = np.maximum(np.sqrt(var), std_floor)
        gmm.n_iter = it
        new_ll = _total_log_likelihood(gmm, x)
        if new_ll < ll - 1e-9 * max(1.0, abs(ll)):
            raise RuntimeError(f"EM log-likelihood decreased at iteration {it}: {ll} -> {new_ll}")
        gmm.log_likelihoods.append(new_ll)
        if new_ll - ll < tol:
            gmm.status = "ok"
            ll = new_ll
            break
        ll = new_ll
    order = np.argsort(gmm.means, kind="stable")
    gmm.weights, gmm.means, gmm.stds = gmm.weights[order], gmm.means[order], gmm.stds[order]
    return gmm


def select_gmm(losses, gmm, threshold=0.5):
    """Select samples whose low-loss-component posterior is at least ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return gmm.posterior_low(losses) >= threshold


class PredictionHistory:
    """Ring buffer of the last ``window`` per-sample predicted labels."""

    def __init__(self, n, window=3):
        if window < 2:
            raise ValueError("fluctuation window must hold at least 2 epochs")
        self.window = window
        self._rows = np.zeros((window, n), dtype=np.int64)
        self._count = 0

    def __len__(self):
        return min(self._count, self.window)

    def append(self, predictions):
        self._rows[self._count % self.window] = predictions
        self._count += 1

    def as_array(self):
        """Recorded epochs oldest first, shape ``(len(self), n)``."""
        k = len(self)
        idx = [(self._count - k + j) % self.window for j in range(k)]
        return self._rows[idx]


def fluctuation_events(history, noisy_labels):
    """True where some earlier epoch predicted the label and a later one did not."""
    history = np.atleast_2d(history)
    correct = history == np.asarray(noisy_labels)[None, :]
    seen_correct = np.logical_or.accumulate(correct, axis=0)
    return np.any(seen_correct[:-1] & ~correct[1:], axis=0)


@dataclass
class SelectionState:
    """Per-sample selection flags, cached expert losses and prediction history."""

    selected: np.ndarray
    expert_loss: np.ndarray
    history: PredictionHistory
    status: str = "ok"

    @classmethod
    def empty(cls, n, window=3):
        return cls(np.ones(n, dtype=bool), np.zeros(n), PredictionHistory(n, window))


def update_history(state, net, features, excluded_head):
    state.history.append(expert_predictions(net, features, excluded_head))


def select_fluctuation(state, noisy_labels):
    """Reject samples with a correct-to-incorrect flip inside the window.

    Before two epochs are recorded every sample is kept and ``state.status``
    becomes ``"warmup"``.
    """
    n = len(noisy_labels)
    if len(state.history) < 2:
        state.status = "warmup"
        return np.ones(n, dtype=bool)
    state.status = "ok"
    return ~fluctuation_events(state.history.as_array(), noisy_labels)


@dataclass
class ClassSelectionMetrics:
    precision: np.ndarray
    recall: np.ndarray
    fscore: np.ndarray

    @property
    def macro_f(self):
        return float(self.fscore.mean())

    @property
    def macro_precision(self):
        return float(self.precision.mean())

    @property
    def macro_recall(self):
        return float(self.recall.mean())


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def selection_metrics(selected, noisy_labels, true_labels, class_count):
    """Per-class selection precision, recall and F-score against label cleanliness.

    P_k = #(selected, clean, noisy == k) / #(selected, noisy == k)
    R_k = #(selected, clean, noisy == k) / #(clean, noisy == k)
    Vanishing denominators give 0.
    """
    selected = np.asarray(selected, dtype=bool)
    noisy = np.asarray(noisy_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if not selected.shape == noisy.shape == true.shape:
        raise ValueError("selected, noisy_labels and true_labels must have equal length")
    clean = noisy == true
    k = class_count
    hit = np.bincount(noisy[selected & clean], minlength=k)
    chosen = np.bincount(noisy[selected], minlength=k)
    relevant = np.bincount(noisy[clean], minlength=k)
    p = _safe_ratio(hit, chosen)
    r = _safe_ratio(hit, relevant)
    f = _safe_ratio(2 * p * r, p + r)
    return ClassSelectionMetrics(p, r, f)


@dataclass
class ImbalanceRatio:
    """Max over min per-class count; with an empty class the ratio covers nonzero classes only."""

    ratio: float
    empty_class: bool

    @property
    def effective(self):
        return math.inf if self.empty_class else self.ratio


def imbalance_ratio(selected, noisy_labels, class_count):
    counts = np.bincount(np.asarray(noisy_labels)[np.asarray(selected, dtype=bool)], minlength=class_count)
    nonzero = counts[counts > 0]
    if nonzero.size == 0:
        return ImbalanceRatio(math.nan, True)
    return ImbalanceRatio(float(nonzero.max() / nonzero.min()), bool(np.any(counts == 0)))
