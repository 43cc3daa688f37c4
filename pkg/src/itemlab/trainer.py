"""Training loops: warmup, the per-epoch select / weight / mixed-sampling loop,
its semi-supervised variant, and the ablation baselines.

Epochs are counted 1..T over the whole run; the first ``warmup_epochs`` of
them train one randomly drawn head on the full noisy set, the remaining ones
select a clean subset with the expert heads and train on mixed batches.
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import selection as sel
from .config import RunConfig, config_as_dict, dump_config
from .data import BlobSpec, LabeledDataset, NoiseSpec, generate_blobs, inject_noise, load_csv
from .nn import MultiHeadNet, NonFiniteLossError, SGD, backward_step, ensemble_probabilities, save_checkpoint
from .rng import RngStreams, stream
from .sampling import (
    ClassWeights,
    class_weights,
    mixup_batch,
    per_sample_draw_weights,
    reverse_weights,
    weighted_batch,
)

log = logging.getLogger(__name__)

SINGLE_HEAD_MODES = ("baseline_ce", "baseline_single_head")
JOINT = "joint"


class TrainingAborted(NonFiniteLossError):
    def __init__(self, epoch, iteration, message):
        super().__init__(f"epoch {epoch}, iteration {iteration}: {message}")
        self.epoch = epoch
        self.iteration = iteration


@dataclass(frozen=True)
class TrainView:
    """What the training loop may see: features and noisy labels, never true labels."""

    features: np.ndarray
    noisy_labels: np.ndarray
    class_count: int

    @classmethod
    def of(cls, dataset):
        return cls(dataset.features, dataset.noisy_labels, dataset.class_count)

    def __len__(self):
        return self.features.shape[0]


def build_datasets(config):
    """Noisy training set and clean balanced test set for ``config``."""
    if config.data_source == "csv":
        train = load_csv(config.data_path)
        test = load_csv(config.test_path, train.class_count)
    else:
        spec = BlobSpec(
            config.class_count, tuple(config.class_sizes), config.dim, config.separation, config.std, config.seed
        )
        train = generate_blobs(spec)
        test_spec = replace(spec, sizes=(config.test_per_class,) * config.class_count)
        test_seed = int(stream(config.seed, "test_data").integers(0, 2**63))
        test = generate_blobs(test_spec, sample_seed=test_seed)
    if config.noise_ratio > 0:
        train = inject_noise(train, NoiseSpec(config.noise_kind, config.noise_ratio, config.seed))
    return train, test


def evaluate(net, dataset):
    """Ensemble accuracy over all heads: ``(overall, per_class)`` against true labels."""
    probs = ensemble_probabilities(net, dataset.features)
    pred = np.argmax(probs, axis=1)
    hit = pred == dataset.true_labels
    k = dataset.class_count
    per_class_total = np.bincount(dataset.true_labels, minlength=k)
    per_class_hit = np.bincount(dataset.true_labels[hit], minlength=k)
    per_class = np.divide(
        per_class_hit, per_class_total, out=np.zeros(k), where=per_class_total > 0
    )
    return float(hit.mean()), per_class


def ce_epoch(net, opt, view, batch_size, perm_rng, next_head):
    """Shuffled plain-CE pass over ``view``; ``next_head()`` picks the head per batch.

    Returns the list of batch losses.
    """
    n = len(view)
    perm = perm_rng.permutation(n)
    losses = []
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        losses.append(backward_step(net, opt, view.features[idx], view.noisy_labels[idx], next_head()))
    return losses


def warmup(net, view, epochs, opt, rng, head_rng, batch_size, per_iteration=True, dry_run=False):
    """Train randomly drawn heads with plain CE on the full noisy set.

    With ``per_iteration`` every mini-batch draws its own head; otherwise one
    head is drawn per epoch. ``dry_run`` only performs the draws (one per epoch,
    or ``ceil(N / batch_size)`` per epoch). Returns the drawn head indices.
    """
    draws = []

    def next_head():
        draws.append(int(head_rng.integers(net.n_heads)))
        return draws[-1]

    batches = math.ceil(len(view) / batch_size)
    for _ in range(epochs):
        if per_iteration:
            if dry_run:
                for _ in range(batches):
                    next_head()
            else:
                ce_epoch(net, opt, view, batch_size, rng, next_head)
        else:
            head = next_head()
            if not dry_run:
                ce_epoch(net, opt, view, batch_size, rng, lambda: head)
    return draws


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    test_accuracy: float
    class_accuracy: np.ndarray
    selected_counts: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    fscore: np.ndarray
    imbalance: sel.ImbalanceRatio
    head_draws: np.ndarray
    weights: ClassWeights = None
    flags: tuple = ()

    @property
    def macro_f(self):
        return float(self.fscore.mean())


METRIC_COLUMNS = [
    "epoch",
    "class",
    "phase",
    "selected",
    "precision",
    "recall",
    "fscore",
    "test_accuracy",
    "weight_v",
    "weight_s",
    "weight_v_tilde",
    "train_loss",
    "imbalance_ratio",
    "empty_class",
    "head_draws",
    "flags",
]


def fmt(x):
    if x is None or (isinstance(x, str) and x == ""):
        return ""
    return format(float(x), ".17g")


@dataclass
class MetricsLog:
    config: RunConfig
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    optimizer_steps: int = 0

    def write_csv(self, path):
        """One row per (epoch, class) plus a summary row with ``class = all``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in self.records:
                k = len(r.class_accuracy)
                for c in range(k):
                    w.writerow(
                        [
                            r.epoch,
                            c,
                            r.phase,
                            int(r.selected_counts[c]),
                            fmt(r.precision[c]),
                            fmt(r.recall[c]),
                            fmt(r.fscore[c]),
                            fmt(r.class_accuracy[c]),
                            fmt(r.weights.forward[c]) if r.weights else "",
                            fmt(r.weights.raw_reversed[c]) if r.weights else "",
                            fmt(r.weights.reversed[c]) if r.weights else "",
                            "",
                            "",
                            "",
                            "",
                            "",
                        ]
                    )
                w.writerow(
                    [
                        r.epoch,
                        "all",
                        r.phase,
                        int(r.selected_counts.sum()),
                        fmt(r.precision.mean()),
                        fmt(r.recall.mean()),
                        fmt(r.fscore.mean()),
                        fmt(r.test_accuracy),
                        "",
                        "",
                        "",
                        fmt(r.train_loss),
                        fmt(r.imbalance.ratio),
                        int(r.imbalance.empty_class),
                        ";".join(str(int(h)) for h in r.head_draws),
                        ";".join(r.flags),
                    ]
                )

    def summary(self):
        final = self.records[-1]
        return {
            "mode": self.config.mode,
            "criterion": self.config.criterion,
            "seed": self.config.seed,
            "epochs": len(self.records),
            "final_test_accuracy": final.test_accuracy,
            "best_test_accuracy": max(r.test_accuracy for r in self.records),
            "final_macro_selection_f": final.macro_f,
            "final_min_class_selection_f": float(final.fscore.min()),
            "final_imbalance_ratio": final.imbalance.ratio,
            "final_imbalance_empty_class": final.imbalance.empty_class,
            "final_class_accuracy": final.class_accuracy.tolist(),
            "final_class_fscore": final.fscore.tolist(),
            "final_class_precision": final.precision.tolist(),
            "final_class_recall": final.recall.tolist(),
            "final_selected_counts": final.selected_counts.tolist(),
            "head_draw_totals": np.sum([r.head_draws for r in self.records], axis=0).tolist(),
            "optimizer_steps": self.optimizer_steps,
            "config": config_as_dict(self.config),
        }

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(json_safe(self.summary()), fh, sort_keys=True, indent=2, allow_nan=False)
            fh.write("\n")


def json_safe(obj):
    # NaN and inf are not JSON; encode them as strings
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [json_safe(v) for v in obj]
    return obj


class Trainer:
    """Holds one run's data, network, optimizer, selection state and RNG streams."""

    def __init__(self, config, datasets=None):
        self.config = config.validate()
        self.streams = RngStreams(config.seed)
        self.train_set, self.test_set = datasets if datasets is not None else build_datasets(config)
        self.view = TrainView.of(self.train_set)
        n_heads = 1 if config.mode in SINGLE_HEAD_MODES else config.experts + 1
        self.net = MultiHeadNet.init(
            self.view.features.shape[1],
            config.hidden,
            self.view.class_count,
            n_heads,
            self.streams["init"],
            config.activation,
        )
        self.opt = SGD(config.lr, config.momentum, config.weight_decay, list(config.lr_steps))
        self.state = sel.SelectionState.empty(len(self.view), config.window)
        self.current_head = 0
        self.log = MetricsLog(config)
        self.epoch = 0
        self._epoch_draws = np.zeros(n_heads, dtype=np.int64)

    # -- selection -----------------------------------------------------------

    def select(self, epoch):
        """Refresh the clean-set flags once for ``epoch`` using the expert heads."""
        cfg, view = self.config, self.view
        excluded = self.current_head
        self.log.events.append(("select", epoch, excluded))
        flags = []
        if cfg.criterion == "fluctuation":
            sel.update_history(self.state, self.net, view.features, excluded)
            selected = sel.select_fluctuation(self.state, view.noisy_labels)
            if self.state.status != "ok":
                flags.append("fluctuation_" + self.state.status)
        else:
            losses = sel.compute_expert_losses(self.net, view.features, view.noisy_labels, excluded)
            self.state.expert_loss = losses
            if cfg.criterion == "small_loss":
                keep = sel.small_loss_keep_fraction(epoch, cfg.rho_hat, cfg.keep_ramp_epochs)
                selected = sel.select_small_loss(losses, keep)
            else:
                gmm = sel.fit_gmm2(losses, cfg.gmm_max_iter, cfg.gmm_tol, cfg.gmm_std_floor)
                if gmm.status == "degenerate":
                    flags.append("gmm_degenerate")
                selected = sel.select_gmm(losses, gmm, cfg.gmm_threshold)
        self.state.selected = selected
        return selected, flags

    def compute_weights(self, epoch, selected):
        self.log.events.append(("weights", epoch))
        v = class_weights(self.view.noisy_labels[selected], self.view.class_count)
        return reverse_weights(v, self.config.beta)

    # -- iteration kernels ---------------------------------------------------

    def draw_head(self):
        head = int(self.streams["head_draw"].integers(self.net.n_heads))
        self._epoch_draws[head] += 1
        self.current_head = head
        return head

    def _step(self, x, targets, head):
        loss = backward_step(self.net, self.opt, x, targets, head)
        self.log.optimizer_steps += 1
        return loss

    def _mixed_step(self, ia, ib, head, gamma=None):
        x, y = self.view.features, self.view.noisy_labels
        mb = mixup_batch(
            x[ia], y[ia], x[ib], y[ib], self.config.alpha, self.streams["mixup"], self.config.mixup_per_row, gamma
        )
        return self._step(mb.features, mb.targets, head)

    def _ssl_step(self, ia, ib, head, unselected, flags):
        cfg, view = self.config, self.view
        b = cfg.batch_size
        rng = self.streams["ssl"]
        if unselected.size == 0:
            flags.add("ssl_empty_noise_set")
            return self._mixed_step(ia, ib, head)
        iu = unselected[rng.integers(unselected.size, size=2 * b)]
        xu = view.features[iu]
        if cfg.ssl_jitter > 0:
            xu = xu + cfg.ssl_jitter * rng.standard_normal(xu.shape)
        probs = ensemble_probabilities(self.net, xu)
        pseudo = np.argmax(probs, axis=1)
        keep = np.ones(len(iu), dtype=bool)
        if cfg.ssl_threshold is not None:
            keep = probs.max(axis=1) >= cfg.ssl_threshold
        if not keep.any():
            flags.add("ssl_all_filtered")
            return self._mixed_step(ia, ib, head)
        xp, yp = xu[keep], pseudo[keep]
        labeled = np.concatenate([ia, ib])
        partner = np.arange(labeled.size) % xp.shape[0]
        mb = mixup_batch(
            view.features[labeled],
            view.noisy_labels[labeled],
            xp[partner],
            yp[partner],
            cfg.alpha,
            self.streams["mixup"],
            cfg.mixup_per_row,
        )
        return self._step(mb.features, mb.targets, head)

    # -- epochs --------------------------------------------------------------

    def plain_epoch(self, head=None, per_iteration=True):
        """Shuffled CE pass over the whole noisy set; returns mean batch loss.

        ``head`` pins a head; otherwise heads are drawn per batch or, with
        ``per_iteration=False``, once for the epoch.
        """
        if head is None and not per_iteration:
            head = self.draw_head()
        if head is None:
            next_head = self.draw_head
        elif head == JOINT:
            next_head = lambda: None  # noqa: E731
        else:
            next_head = lambda: head  # noqa: E731

        def counted():
            self.log.optimizer_steps += 1
            return next_head()

        losses = ce_epoch(self.net, self.opt, self.view, self.config.batch_size, self.streams["warmup"], counted)
        return float(np.mean(losses))

    def run_epoch_item(self, selected, weights, gamma=None, ssl=False):
        """Mixed-sampling iterations over one epoch (``ceil(|selected| / b)`` of them)."""
        cfg, view = self.config, self.view
        mode = cfg.mode
        b = cfg.batch_size
        w_v, redistributed_v = per_sample_draw_weights(selected, view.noisy_labels, weights.forward)
        if mode == "no_mixed_sampling":
            w_vt, redistributed_vt = selected.astype(np.float64), False
        else:
            w_vt, redistributed_vt = per_sample_draw_weights(selected, view.noisy_labels, weights.reversed)
        flags = set()
        if redistributed_v or redistributed_vt:
            flags.add("mass_redistributed")
        unselected = np.flatnonzero(~selected)
        iterations = math.ceil(int(selected.sum()) / b)
        losses = []
        for _ in range(iterations):
            ia = weighted_batch(self.streams["sampler_v"], w_v, b)
            ib = weighted_batch(self.streams["sampler_vtilde"], w_vt, b)
            head = self.draw_head()
            if mode == "no_mixup":
                x, y = view.features, view.noisy_labels
                losses.append(0.5 * (self._step(x[ia], y[ia], head) + self._step(x[ib], y[ib], head)))
            elif ssl:
                losses.append(self._ssl_step(ia, ib, head, unselected, flags))
            else:
                losses.append(self._mixed_step(ia, ib, head, gamma))
        self.log.events.append(("train", self.epoch, iterations))
        return float(np.mean(losses)), sorted(flags)

    def _record(self, epoch, phase, loss, selected, weights, flags):
        acc, class_acc = evaluate(self.net, self.test_set)
        k = self.view.class_count
        m = sel.selection_metrics(selected, self.train_set.noisy_labels, self.train_set.true_labels, k)
        self.log.records.append(
            EpochRecord(
                epoch=epoch,
                phase=phase,
                train_loss=loss,
                test_accuracy=acc,
                class_accuracy=class_acc,
                selected_counts=np.bincount(self.train_set.noisy_labels[selected], minlength=k),
                precision=m.precision,
                recall=m.recall,
                fscore=m.fscore,
                imbalance=sel.imbalance_ratio(selected, self.train_set.noisy_labels, k),
                head_draws=self._epoch_draws.copy(),
                weights=weights,
                flags=tuple(flags),
            )
        )
        self._epoch_draws[:] = 0
        log.debug("epoch %d %s loss=%.4f acc=%.4f", epoch, phase, loss, acc)

    def _guarded(self, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NonFiniteLossError as exc:
            raise TrainingAborted(self.epoch, self.opt.step_count, str(exc)) from exc

    def run(self):
        cfg = self.config
        all_selected = np.ones(len(self.view), dtype=bool)
        for epoch in range(1, cfg.epochs + 1):
            self.epoch = epoch
            self.opt.set_epoch(epoch)
            if epoch <= cfg.warmup_epochs or cfg.mode == "baseline_ce":
                if cfg.mode == "baseline_ce":
                    loss = self._guarded(self.plain_epoch, 0)
                elif cfg.warmup_head_draw == "joint":
                    loss = self._guarded(self.plain_epoch, JOINT)
                else:
                    loss = self._guarded(self.plain_epoch, per_iteration=cfg.warmup_head_draw == "iteration")
                if cfg.criterion == "fluctuation" and cfg.mode != "baseline_ce":
                    sel.update_history(self.state, self.net, self.view.features, self.current_head)
                phase = "warmup" if epoch <= cfg.warmup_epochs else "train"
                self._record(epoch, phase, loss, all_selected, None, ())
                continue
            selected, flags = self.select(epoch)
            if not selected.any():
                flags.append("empty_selection")
                loss = self._guarded(self.plain_epoch)
                self._record(epoch, "train", loss, selected, None, flags)
                continue
            weights = self.compute_weights(epoch, selected)
            loss, more = self._guarded(self.run_epoch_item, selected, weights, ssl=cfg.mode == "item_ssl")
            self._record(epoch, "train", loss, selected, weights, flags + more)
        return self.log


def run_item(config, datasets=None):
    """Full run for any mode; returns the :class:`MetricsLog` and the trainer."""
    trainer = Trainer(config, datasets)
    return trainer.run(), trainer


def run_item_ssl(config, datasets=None):
    return run_item(replace(config, mode="item_ssl"), datasets)


def run_baseline(config, arm, datasets=None):
    if arm not in ("baseline_ce", "baseline_single_head", "no_mixed_sampling", "no_mixup"):
        raise ValueError(f"unknown ablation arm {arm!r}")
    return run_item(replace(config, mode=arm), datasets)


def write_outputs(metrics, trainer, out_dir):
    """metrics.csv, summary.json, checkpoint.bin and the resolved config.txt."""
    os.makedirs(out_dir, exist_ok=True)
    metrics.write_csv(os.path.join(out_dir, "metrics.csv"))
    metrics.write_summary(os.path.join(out_dir, "summary.json"))
    save_checkpoint(trainer.net, trainer.opt, os.path.join(out_dir, "checkpoint.bin"))
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(dump_config(metrics.config))
