import csv
import io
import os
import tempfile
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from itemlab import trainer as tr
from itemlab.config import RunConfig
from itemlab.data import BlobSpec, LabeledDataset, generate_blobs
from itemlab.nn import SGD, MultiHeadNet, ensemble_predict
from itemlab.sampling import ClassWeights

SMALL = RunConfig(class_count=4, class_sizes=(120, 90, 60, 30), dim=8, test_per_class=50, epochs=12, warmup_epochs=4)
CLEAN_EASY = replace(SMALL, separation=8.0, noise_ratio=0.0)


def csv_text(log):
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.csv")
        log.write_csv(path)
        with open(path) as fh:
            return fh.read()


class TestWarmup:
    def setup_method(self):
        ds = generate_blobs(BlobSpec(4, (100, 80, 60, 40), 8, 6.0, 1.0, 0))
        self.view = tr.TrainView.of(ds)
        self.ds = ds

    def _net(self):
        return MultiHeadNet.init(8, (16,), 4, 5, np.random.default_rng(0))

    def test_zero_epochs_is_noop(self):
        net = self._net()
        before = [p.copy() for p in net.parameters()]
        draws = tr.warmup(net, self.view, 0, SGD(), np.random.default_rng(0), np.random.default_rng(1), 32)
        assert draws == []
        assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))

    def test_trained_heads_fit_separable_blobs(self):
        net = self._net()
        draws = tr.warmup(
            net, self.view, 10, SGD(lr=0.05), np.random.default_rng(0), np.random.default_rng(1), 32, per_iteration=False
        )
        for h in set(draws):
            acc = np.mean(np.argmax(net.forward(self.ds.features, h), axis=1) == self.ds.true_labels)
            assert acc >= 0.95

    def test_dry_run_head_frequencies(self):
        draws = tr.warmup(
            self._net(), self.view, 1000, SGD(), None, np.random.default_rng(3), 32, per_iteration=False, dry_run=True
        )
        freq = np.bincount(draws, minlength=5) / 1000
        assert np.all(np.abs(freq - 0.2) <= 0.05)


class TestEpoch:
    def test_reduces_to_clean_set_ce(self):
        cfg = replace(SMALL, experts=1, batch_size=16)
        t = tr.Trainer(cfg)
        ref = tr.Trainer(cfg)
        selected = np.random.default_rng(0).random(len(t.view)) < 0.7
        v = np.bincount(t.view.noisy_labels[selected], minlength=4) / selected.sum()
        weights = ClassWeights(v, np.ones(4), v, 1.0)
        loss, _ = t.run_epoch_item(selected, weights, gamma=1.0)

        # same draws by hand, trained with plain integer-label CE
        from itemlab.nn import backward_step
        from itemlab.sampling import per_sample_draw_weights, weighted_batch

        w, _ = per_sample_draw_weights(selected, ref.view.noisy_labels, v)
        losses = []
        for _ in range(int(np.ceil(selected.sum() / 16))):
            ia = weighted_batch(ref.streams["sampler_v"], w, 16)
            weighted_batch(ref.streams["sampler_vtilde"], w, 16)
            head = ref.draw_head()
            ref.streams["mixup"].standard_gamma(1.0, 16)
            ref.streams["mixup"].standard_gamma(1.0, 16)
            losses.append(backward_step(ref.net, ref.opt, ref.view.features[ia], ref.view.noisy_labels[ia], head))
        assert loss == pytest.approx(np.mean(losses), abs=1e-12)
        for a, b in zip(t.net.parameters(), ref.net.parameters()):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_head_draws_uniform(self):
        t = tr.Trainer(SMALL)
        draws = np.bincount([t.draw_head() for _ in range(10_000)], minlength=5) / 10_000
        assert np.all(np.abs(draws - 0.2) <= 0.05)

    def test_no_mixup_two_steps_per_iteration(self):
        t = tr.Trainer(replace(SMALL, mode="no_mixup", batch_size=32))
        selected = np.ones(len(t.view), bool)
        v = np.bincount(t.view.noisy_labels, minlength=4) / len(t.view)
        before = t.log.optimizer_steps
        t.run_epoch_item(selected, ClassWeights(v, np.ones(4), v, 1.0))
        assert t.log.optimizer_steps - before == 2 * int(np.ceil(len(t.view) / 32))


class TestRun:
    def test_classifier_head_excluded_from_selection(self, monkeypatch):
        seen = []
        original = tr.sel.compute_expert_losses

        def spy(net, x, y, excluded):
            seen.append(excluded)
            return original(net, x, y, excluded)

        monkeypatch.setattr(tr.sel, "compute_expert_losses", spy)
        t = tr.Trainer(SMALL)
        heads_before_select = []
        original_select = t.select

        def select(epoch):
            heads_before_select.append(t.current_head)
            return original_select(epoch)

        t.select = select
        t.run()
        assert seen == heads_before_select
        assert len(seen) == SMALL.epochs - SMALL.warmup_epochs

    def test_event_order(self):
        log, _ = tr.run_item(SMALL)
        train_events = [e for e in log.events if e[1] > SMALL.warmup_epochs]
        for epoch in range(SMALL.warmup_epochs + 1, SMALL.epochs + 1):
            kinds = [e[0] for e in train_events if e[1] == epoch]
            assert kinds == ["select", "weights", "train"]

    def test_deterministic_csv(self):
        a, _ = tr.run_item(SMALL)
        b, _ = tr.run_item(SMALL)
        assert csv_text(a) == csv_text(b)
        assert a.summary() == b.summary()

    def test_csv_shape(self):
        log, _ = tr.run_item(SMALL)
        rows = list(csv.DictReader(io.StringIO(csv_text(log))))
        assert len(rows) == SMALL.epochs * (4 + 1)
        for epoch in range(1, SMALL.epochs + 1):
            classes = [r["class"] for r in rows if int(r["epoch"]) == epoch]
            assert classes == ["0", "1", "2", "3", "all"]

    def test_training_view_hides_truth(self):
        t = tr.Trainer(SMALL)
        assert not hasattr(t.view, "true_labels")

    def test_noise_free_item_close_to_plain_ce(self):
        cfg = replace(SMALL, noise_ratio=0.0, epochs=30, warmup_epochs=10)
        item, _ = tr.run_item(cfg)
        ce, _ = tr.run_baseline(cfg, "baseline_ce")
        assert abs(item.records[-1].test_accuracy - ce.records[-1].test_accuracy) <= 0.03

    def test_arms_share_data_and_init(self):
        trainers = [tr.Trainer(replace(SMALL, mode=m)) for m in ("item", "baseline_ce", "no_mixup")]
        for t in trainers[1:]:
            assert t.train_set == trainers[0].train_set and t.test_set == trainers[0].test_set
            for a, b in zip(t.net.trunk, trainers[0].net.trunk):
                assert np.array_equal(a[0], b[0])
            assert np.array_equal(t.net.heads[0][0], trainers[0].net.heads[0][0])

    def test_single_head_modes(self):
        assert tr.Trainer(replace(SMALL, mode="baseline_single_head")).net.n_heads == 1
        assert tr.Trainer(replace(SMALL, mode="item")).net.n_heads == 5

    def test_head_draws_over_run_uniform(self):
        log, _ = tr.run_item(replace(SMALL, epochs=40))
        totals = np.sum([r.head_draws for r in log.records], axis=0)
        freq = totals / totals.sum()
        assert np.all(np.abs(freq - 0.2) <= 0.05)
        assert stats.chisquare(totals).pvalue > 0.01

    def test_empty_selection_falls_back(self, monkeypatch):
        t = tr.Trainer(SMALL)
        monkeypatch.setattr(t, "select", lambda epoch: (np.zeros(len(t.view), bool), []))
        log = t.run()
        assert "empty_selection" in log.records[-1].flags

    def test_nonfinite_loss_aborts_with_position(self):
        with pytest.raises(tr.TrainingAborted) as err:
            with np.errstate(all="ignore"):
                tr.run_item(replace(SMALL, lr=1e6))
        assert err.value.epoch >= 1 and err.value.iteration >= 0

    @pytest.mark.parametrize("criterion", ["small_loss", "gmm", "fluctuation"])
    def test_every_criterion_runs(self, criterion):
        log, _ = tr.run_item(replace(SMALL, criterion=criterion))
        last = log.records[-1]
        assert last.selected_counts.sum() <= 300
        assert np.isfinite(last.test_accuracy)


class TestSsl:
    def test_filter_all_equals_item(self):
        item, _ = tr.run_item(SMALL)
        ssl, _ = tr.run_item_ssl(replace(SMALL, ssl_threshold=1.01))
        assert [r.train_loss for r in ssl.records] == [r.train_loss for r in item.records]
        assert [r.test_accuracy for r in ssl.records] == [r.test_accuracy for r in item.records]
        assert "ssl_all_filtered" in ssl.records[-1].flags

    def test_pseudo_labels_are_ensemble_predictions(self, monkeypatch):
        t = tr.Trainer(replace(SMALL, mode="item_ssl"))
        checked = []
        original = tr.mixup_batch

        def spy(xa, ya, xb, yb, *args, **kwargs):
            if len(ya) == 2 * t.config.batch_size:
                assert np.array_equal(np.asarray(yb), ensemble_predict(t.net, xb))
                checked.append(True)
            return original(xa, ya, xb, yb, *args, **kwargs)

        monkeypatch.setattr(tr, "mixup_batch", spy)
        t.run()
        assert checked

    def test_empty_noise_set_degrades(self):
        cfg = replace(SMALL, mode="item_ssl")
        t = tr.Trainer(cfg)
        selected = np.ones(len(t.view), bool)
        v = np.bincount(t.view.noisy_labels, minlength=4) / len(t.view)
        _, flags = t.run_epoch_item(selected, ClassWeights(v, np.ones(4), v, 1.0), ssl=True)
        assert "ssl_empty_noise_set" in flags

    def test_clean_separable_ssl_not_worse(self):
        wins = 0
        for seed in range(5):
            cfg = replace(CLEAN_EASY, seed=seed)
            item, _ = tr.run_item(cfg)
            ssl, _ = tr.run_item_ssl(cfg)
            wins += ssl.records[-1].test_accuracy >= item.records[-1].test_accuracy
        assert wins >= 3


class TestEvaluate:
    def _identity_net(self, k):
        return MultiHeadNet([[np.eye(k), np.zeros(k)]], [[np.eye(k), np.zeros(k)]], "identity")

    def test_perfect(self):
        ds = LabeledDataset(np.eye(3) * 5, [0, 1, 2], [0, 1, 2], 3)
        acc, per_class = tr.evaluate(self._identity_net(3), ds)
        assert acc == 1.0 and per_class.tolist() == [1.0, 1.0, 1.0]

    def test_constant_classifier(self):
        y = np.repeat(np.arange(4), 25)
        net = MultiHeadNet([[np.zeros((2, 2)), np.zeros(2)]], [[np.zeros((2, 4)), np.array([1.0, 0, 0, 0])]])
        acc, per_class = tr.evaluate(net, LabeledDataset(np.ones((100, 2)), y, y, 4))
        assert acc == 0.25 and per_class.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_random_net_random_labels(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 10, 1000)
        ds = LabeledDataset(rng.normal(size=(1000, 5)), y, y, 10)
        net = MultiHeadNet.init(5, (8,), 10, 3, rng)
        acc, _ = tr.evaluate(net, ds)
        assert 0.05 <= acc <= 0.18
