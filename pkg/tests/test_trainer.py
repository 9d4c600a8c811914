import numpy as np
import pytest

from imbalance_lab import tensor as T
from imbalance_lab.anchors import AnchorConfig
from imbalance_lab.detector import DetectorConfig, init_detector
from imbalance_lab.losses import LossConfig
from imbalance_lab.samplers import SamplerConfig
from imbalance_lab.scenes import DatasetSpec, generate
from imbalance_lab.trainer import (
    BALANCE_WINDOW,
    RECORD_COLUMNS,
    IterationLog,
    RunRecord,
    Schedule,
    TrainingSetup,
    detector_config_for,
    is_flagged_unstable,
    loss_balance_report,
    train,
    train_step,
)

GUIDED = LossConfig(guided=True, optimal_bias=True)


@pytest.fixture(scope="module")
def setup(small_split, anchor_config):
    return TrainingSetup(small_split[0], anchor_config)


def _train(setup, loss, iterations=6, lr=0.01, seed=0, sampler=None, **kw):
    return train(
        setup.scenes, DetectorConfig(), loss, sampler or SamplerConfig(), Schedule(iterations, lr, 4), setup.anchor_config, seed, setup, **kw
    )


def _grads(store, root):
    # backward only resets what the root reaches; clear stale grads first
    for v in store.params.values():
        v.grad = None
    T.backward(root)
    return {k: np.zeros_like(v.data) if v.grad is None else v.grad.copy() for k, v in store.params.items()}


class TestGuidedRun:
    def test_weighted_cls_equals_reg(self, setup):
        _, rec = _train(setup, GUIDED, iterations=8)
        assert rec.completed and len(rec.rows) == 8
        for r in rec.rows:
            assert abs(r.L_cls_weighted - r.L_reg) <= 1e-9 * max(1.0, r.L_reg)

    def test_logged_w_is_loss_ratio(self, setup):
        loss = LossConfig(guided=True, optimal_bias=True, stage_factor=2.0)
        _, rec = _train(setup, loss, iterations=5)
        for r in rec.rows:
            assert abs(r.w - 2.0 * r.L_reg / r.L_cls_raw) <= 1e-12 * r.w

    def test_update_is_literal_gradient_combination(self, setup):
        det = detector_config_for(DetectorConfig(), GUIDED)
        store = init_detector(det, setup.stats, 0.05)
        scenes, matches = setup.scenes[:4], setup.matches[:4]
        rng = np.random.default_rng(0)

        # two separate backward passes on a frozen copy
        probe = store.clone()
        _, losses = train_step(probe, det, GUIDED, SamplerConfig(), scenes, matches, None, rng, step=False)
        g_reg, g_cls = _grads(probe, losses["L_reg"]), _grads(probe, losses["L_cls"])
        w = float(losses["L_reg"].data) / float(losses["L_cls"].data)

        before = {k: v.copy() for k, v in store.arrays().items()}
        train_step(store, det, GUIDED, SamplerConfig(), scenes, matches, None, rng)
        for k, old in before.items():
            expect = old - 0.05 * (g_reg[k] + w * g_cls[k])
            np.testing.assert_allclose(store[k].data, expect, rtol=0, atol=1e-9)
        assert store.t == 1

    def test_deterministic(self, setup):
        a = _train(setup, GUIDED, iterations=4, seed=3)
        b = _train(setup, GUIDED, iterations=4, seed=3)
        assert a[1].to_csv() == b[1].to_csv()
        assert a[1].config_digest == b[1].config_digest
        for k in a[0].names():
            assert a[0][k].data.tobytes() == b[0][k].data.tobytes()

    def test_seed_changes_run(self, setup):
        a = _train(setup, GUIDED, iterations=3, seed=0)[1]
        b = _train(setup, GUIDED, iterations=3, seed=1)[1]
        assert a.to_csv() != b.to_csv()

    def test_initial_check_in_header(self, setup):
        _, rec = _train(setup, LossConfig(optimal_bias=True), iterations=1)
        h = rec.header_dict()
        assert h["initial_L_cls_measured"] == rec.rows[0].L_cls_raw
        assert h["initial_pi"] == pytest.approx(setup.stats.N_f_total / (setup.stats.N_total * 3), rel=1e-9)
        assert "initial_L_cls_analytic_dataset" in h and "initial_L_cls_analytic_dataset_alt_n" in h


class TestSkipsAndDivergence:
    def test_background_batches_skipped_but_counted(self):
        scenes = generate(DatasetSpec(num_scenes=12, H=32, W=32, C=3, objects_per_scene=(0, 1), object_size=(6, 14), seed=5))
        setup = TrainingSetup(scenes, AnchorConfig())
        empty = [m.N_f == 0 for m in setup.matches]
        assert any(empty) and not all(empty)
        store, rec = train(scenes, DetectorConfig(), GUIDED, SamplerConfig(), Schedule(12, 0.01, 1), AnchorConfig(), 0, setup)
        assert [r.t for r in rec.rows] == list(range(12))
        assert store.t == 12
        skipped = [r for r in rec.rows if r.skipped]
        assert len(skipped) == sum(empty)
        assert all(r.L_cls_raw == 0.0 and r.w == 0.0 for r in skipped)

    def test_divergence_leaves_partial_record(self, setup):
        store, rec = _train(setup, LossConfig(fixed_w=1.0), iterations=50, lr=1e4)
        assert rec.diverged
        assert rec.diverged_at is not None and len(rec.rows) == rec.diverged_at
        assert rec.divergence_reason
        assert is_flagged_unstable(rec)
        assert store.t == rec.diverged_at

    def test_ohem_and_biased_samplers_run(self, setup):
        for sampler in (SamplerConfig(strategy="ohem", k=64), SamplerConfig(strategy="biased", batch_size=64)):
            _, rec = _train(setup, LossConfig(optimal_bias=True), iterations=2, sampler=sampler)
            assert rec.completed


class TestBalanceReport:
    def test_guided_windows_are_one(self, setup):
        _, rec = _train(setup, GUIDED, iterations=6)
        report = loss_balance_report(rec, window=2)
        assert len(report) == 3
        assert all(abs(w.mean_ratio - 1.0) < 1e-9 and not w.imbalanced for w in report)
        assert not is_flagged_unstable(rec, window=2)

    def test_small_fixed_weight_flagged(self, setup):
        _, rec = _train(setup, LossConfig(fixed_w=1e-3, init_pi=0.01), iterations=4)
        report = loss_balance_report(rec, window=2)
        assert report[0].mean_ratio > 5.0 and report[0].imbalanced
        assert is_flagged_unstable(rec, window=2)

    def test_stop_when_flagged_keeps_prefix(self, setup):
        loss = LossConfig(fixed_w=1e-3, init_pi=0.01)
        _, stopped = _train(setup, loss, iterations=120, stop_when_flagged=True)
        _, plain = _train(setup, loss, iterations=BALANCE_WINDOW)
        assert stopped.status == "flagged" and is_flagged_unstable(stopped)
        assert stopped.rows == plain.rows

    def test_stop_when_flagged_never_fires_for_guided(self, setup):
        _, rec = _train(setup, GUIDED, iterations=BALANCE_WINDOW + 3, stop_when_flagged=True)
        assert rec.completed and len(rec.rows) == BALANCE_WINDOW + 3

    def test_empty_record(self):
        assert loss_balance_report(RunRecord()) == []
        assert not is_flagged_unstable(RunRecord())

    def test_skipped_rows_ignored(self):
        rows = [IterationLog(0, True, 0, 0, 0, 0, 0.1), IterationLog(1, False, 2.0, 2.0, 1.0, 1.0, 0.1)]
        report = loss_balance_report(RunRecord(rows=rows), window=5)
        assert len(report) == 1 and report[0].mean_ratio == 0.5


class TestRecordIO:
    def test_csv_round_trip(self, setup):
        _, rec = _train(setup, GUIDED, iterations=3)
        text = rec.to_csv()
        assert text.splitlines()[0] == ",".join(RECORD_COLUMNS)
        back = RunRecord.from_csv(text, rec.header_dict())
        assert back.rows == rec.rows
        assert back.status == "completed" and back.config_digest == rec.config_digest

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            Schedule(10, 0.0, 4)
        with pytest.raises(ValueError):
            Schedule(10, 0.1, 0)
