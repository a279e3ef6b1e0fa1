"""
Tests for the desk-scale harness: synthetic dataset, matched-filter
baseline, tiny backbone, trainer, benchmark and output formatters.

Multi-seed training comparisons and wall-clock ratios are marked slow:
    pytest --run-slow tests/test_harness.py
"""

import io
import statistics
from dataclasses import replace

import numpy as np
import pytest

import ops
from backbone import TinyResNet
from bench import BenchRow, SweepPoint, bench, parse_sweep
from config import BENCH_BATCH
from dataset import (
    dataset_checksum,
    generate_dataset,
    log_kernel,
    matched_filter_classify,
)
from exceptions import ConfigurationError, DivergenceError
from formatters import (
    FileWriter,
    format_bench_csv,
    format_checkpoint_summary,
    format_csv,
    format_suite_report,
    format_training_summary,
)
from gradcheck import GradcheckReport
from gradcheck_suite import SuiteReport
from models import BackboneSpec, ScsaConfig, SyntheticDatasetSpec, TrainSpec
from scsa import flop_estimate
from tensor import ParamStore, Tensor, load_checkpoint, make_rng
from trainer import EpochRecord, TrainingResult, clip_grad_norm, evaluate, train


# ============================================================================
# DATASET
# ============================================================================

@pytest.mark.unit
class TestSyntheticDataset:

    def test_same_seed_same_bytes(self, tiny_dataset_spec):
        first = generate_dataset(tiny_dataset_spec)
        second = generate_dataset(tiny_dataset_spec)
        assert dataset_checksum(*first) == dataset_checksum(*second)

    def test_different_seed_different_bytes(self, tiny_dataset_spec):
        first = generate_dataset(tiny_dataset_spec)
        other = generate_dataset(replace(tiny_dataset_spec, seed=8))
        assert dataset_checksum(*first) != dataset_checksum(*other)

    def test_class_balanced_split(self, tiny_dataset_spec):
        train_set, val_set = generate_dataset(tiny_dataset_spec)
        assert train_set.class_counts(4) == [8, 8, 8, 8]
        assert val_set.class_counts(4) == [2, 2, 2, 2]
        assert train_set.images.shape == (32, 1, 16, 16)
        assert train_set.images.dtype == np.float64
        assert val_set.labels.dtype == np.int64

    def test_every_channel_carries_the_same_pattern(self, tiny_dataset_spec):
        spec = replace(tiny_dataset_spec, image_size=(3, 16, 16))
        train_set, _ = generate_dataset(spec)
        np.testing.assert_array_equal(train_set.images[:, 0], train_set.images[:, 2])

    def test_radius_must_fit_the_image(self):
        with pytest.raises(ConfigurationError) as exc:
            SyntheticDatasetSpec(image_size=(1, 8, 8), blob_scales=(1.0, 2.0, 3.0, 8.0))
        assert exc.value.key_path == "blob_scales"

    def test_one_radius_per_class(self):
        with pytest.raises(ConfigurationError):
            SyntheticDatasetSpec(num_classes=3, blob_scales=(1.0, 2.0))

    def test_split_must_leave_validation_samples(self):
        with pytest.raises(ConfigurationError) as exc:
            SyntheticDatasetSpec(samples_per_class=2, train_fraction=0.9)
        assert exc.value.key_path == "train_fraction"


@pytest.mark.unit
class TestMatchedFilter:

    def test_log_kernel_is_zero_sum(self):
        kernel = log_kernel(2.0)
        assert kernel.shape == (17, 17)
        assert abs(kernel.sum()) < 1e-12
        assert kernel[8, 8] > 0

    def test_noise_free_blobs_are_classified_exactly(self):
        spec = SyntheticDatasetSpec(
            seed=5, num_classes=3, samples_per_class=10, image_size=(1, 64, 64),
            blob_scales=(1.5, 3.0, 6.0), noise_sigma=0.0, distractor_amplitude=0.05,
        )
        train_set, val_set = generate_dataset(spec)
        images = np.concatenate([train_set.images, val_set.images])
        labels = np.concatenate([train_set.labels, val_set.labels])
        predicted = matched_filter_classify(images, spec.blob_scales)
        assert np.array_equal(predicted, labels)


# ============================================================================
# BACKBONE
# ============================================================================

@pytest.mark.unit
class TestTinyResNet:

    def test_parameter_layout(self, tiny_backbone, scsa_cfg):
        model = TinyResNet(tiny_backbone, scsa_cfg, make_rng(0))
        names = model.store.names()
        assert names[0] == "stem.weight"
        assert names[-1] == "head.bias"
        assert "stage0.block0.attn.smsa.conv.0.weight" in names
        assert "stage1.block0.attn.pcsa.q.weight" in names
        # widths 8 -> 8 keep the identity shortcut, 8 -> 16 with stride 2 projects
        assert "stage0.block0.shortcut.weight" not in names
        assert model.store["stage1.block0.shortcut.weight"].shape == (16, 8, 1, 1)

    def test_no_attention_variant(self, tiny_backbone, scsa_cfg):
        model = TinyResNet(replace(tiny_backbone, attention="none"), scsa_cfg, make_rng(0))
        assert not any(".attn." in name for name in model.store.names())

    def test_logits_and_predictions(self, tiny_backbone, scsa_cfg, rng):
        model = TinyResNet(tiny_backbone, scsa_cfg, make_rng(0))
        images = rng.standard_normal((3, 1, 16, 16))
        assert model.forward(Tensor(images)).shape == (3, 4)
        predicted = model.predict(images)
        assert predicted.shape == (3,)
        assert set(predicted.tolist()) <= {0, 1, 2, 3}

    def test_same_seed_same_initialization(self, tiny_backbone, scsa_cfg):
        a = TinyResNet(tiny_backbone, scsa_cfg, make_rng(4))
        b = TinyResNet(tiny_backbone, scsa_cfg, make_rng(4))
        for pa, pb in zip(a.store, b.store):
            np.testing.assert_array_equal(pa.value.data, pb.value.data)

    def test_attention_blocks_start_with_a_larger_residual_kernel(self, tiny_backbone, scsa_cfg):
        bound = np.sqrt(6.0 / (8 * 9))
        with_attention = TinyResNet(tiny_backbone, scsa_cfg, make_rng(0))
        plain = TinyResNet(replace(tiny_backbone, attention="none"), scsa_cfg, make_rng(0))
        attended = np.abs(with_attention.store["stage0.block0.conv2.weight"].value.data).max()
        unattended = np.abs(plain.store["stage0.block0.conv2.weight"].value.data).max()
        assert unattended <= 0.1 * bound
        assert 0.3 * bound < attended <= 0.4 * bound

    def test_stage_width_must_fit_attention(self, scsa_cfg):
        spec = BackboneSpec(in_channels=1, stem_channels=8, stage_channels=(6,), blocks_per_stage=1)
        with pytest.raises(ConfigurationError) as exc:
            TinyResNet(spec, scsa_cfg, make_rng(0))
        assert exc.value.key_path == "stage_channels"


# ============================================================================
# TRAINER
# ============================================================================

@pytest.mark.integration
class TestTrainer:

    def test_log_has_one_record_per_epoch(self, tiny_dataset_spec, tiny_backbone, scsa_cfg,
                                          short_train_spec):
        stream = io.StringIO()
        result = train(tiny_backbone, scsa_cfg, generate_dataset(tiny_dataset_spec),
                       short_train_spec, log_stream=stream)
        records = [EpochRecord.from_json(line) for line in stream.getvalue().splitlines()]
        assert [r.epoch for r in records] == [1, 2]
        assert records == result.records
        assert all(np.isfinite(r.train_loss) for r in records)
        assert all(0.0 <= r.val_acc <= 1.0 for r in records)

    def test_runs_are_bit_reproducible(self, tiny_dataset_spec, tiny_backbone, scsa_cfg,
                                       short_train_spec):
        data = generate_dataset(tiny_dataset_spec)
        first = train(tiny_backbone, scsa_cfg, data, short_train_spec)
        second = train(tiny_backbone, scsa_cfg, data, short_train_spec)
        assert first.losses() == second.losses()
        for pa, pb in zip(first.model.store, second.model.store):
            np.testing.assert_array_equal(pa.value.data, pb.value.data)

    def test_clipped_run_stays_reproducible(self, tiny_dataset_spec, tiny_backbone, scsa_cfg,
                                            short_train_spec):
        data = generate_dataset(tiny_dataset_spec)
        spec = replace(short_train_spec, grad_clip=1e-3)
        first = train(tiny_backbone, scsa_cfg, data, spec)
        second = train(tiny_backbone, scsa_cfg, data, spec)
        assert first.losses() == second.losses()
        assert first.losses() != train(tiny_backbone, scsa_cfg, data,
                                       replace(short_train_spec, grad_clip=0.0)).losses()

    def test_zero_learning_rate_keeps_the_loss(self, tiny_dataset_spec, tiny_backbone, scsa_cfg):
        spec = TrainSpec(lr=0.0, epochs=3, batch_size=8, milestones=())
        result = train(tiny_backbone, scsa_cfg, generate_dataset(tiny_dataset_spec), spec)
        losses = result.losses()
        assert losses[1] == pytest.approx(losses[0], rel=1e-9)
        assert losses[2] == pytest.approx(losses[0], rel=1e-9)
        assert len({r.val_acc for r in result.records}) == 1

    def test_non_finite_loss_raises(self, monkeypatch, tiny_dataset_spec, tiny_backbone, scsa_cfg,
                                    short_train_spec):
        monkeypatch.setattr(ops, "cross_entropy",
                            lambda logits, labels, tape=None: Tensor(np.array([np.nan])))
        with pytest.raises(DivergenceError) as exc:
            train(tiny_backbone, scsa_cfg, generate_dataset(tiny_dataset_spec), short_train_spec)
        assert exc.value.epoch == 1

    def test_checkpoint_holds_every_parameter(self, tmp_path, tiny_dataset_spec, tiny_backbone,
                                              scsa_cfg, short_train_spec):
        path = tmp_path / "run.scsk"
        result = train(tiny_backbone, scsa_cfg, generate_dataset(tiny_dataset_spec),
                       replace(short_train_spec, epochs=1), checkpoint_path=path)
        state = load_checkpoint(path)
        assert list(state) == result.model.store.names()
        np.testing.assert_array_equal(state["head.weight"].data, result.model.store["head.weight"].value.data)

    def test_threaded_evaluation_matches_serial(self, tiny_dataset_spec, tiny_backbone, scsa_cfg):
        _, val_set = generate_dataset(tiny_dataset_spec)
        model = TinyResNet(tiny_backbone, scsa_cfg, make_rng(2))
        assert evaluate(model, val_set, 3, workers=2) == evaluate(model, val_set, 3, workers=1)


@pytest.mark.unit
class TestGradientClipping:

    def _store(self):
        store = ParamStore()
        a = store.add("a", np.zeros(1))
        b = store.add("b", np.zeros(1))
        a.grad.data[...] = 3.0
        b.grad.data[...] = 4.0
        return store, a, b

    def test_norm_above_bound_is_rescaled(self):
        store, a, b = self._store()
        assert clip_grad_norm(store, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose([a.grad.data[0], b.grad.data[0]], [0.6, 0.8])

    def test_norm_below_bound_is_untouched(self):
        store, a, b = self._store()
        clip_grad_norm(store, 10.0)
        assert (a.grad.data[0], b.grad.data[0]) == (3.0, 4.0)

    def test_zero_bound_disables_clipping(self):
        store, a, _ = self._store()
        assert clip_grad_norm(store, 0.0) == pytest.approx(5.0)
        assert a.grad.data[0] == 3.0


@pytest.mark.unit
class TestTrainingResult:

    def test_decreasing_epochs(self):
        result = TrainingResult(records=[EpochRecord(i + 1, loss, 0.5)
                                         for i, loss in enumerate([1.0, 0.8, 0.9, 0.7, 0.6])])
        assert result.decreasing_epochs() == 3
        assert result.final_val_acc == 0.5

    def test_empty_result(self):
        assert TrainingResult().final_val_acc == 0.0
        assert format_training_summary("run", TrainingResult()) == ["run: no epochs recorded"]

    def test_epoch_record_json(self):
        record = EpochRecord(3, 0.25, 0.75)
        assert EpochRecord.from_json(record.to_json()) == record


@pytest.mark.slow
@pytest.mark.integration
class TestLearningSignal:
    """Full-budget runs on the default dataset and backbone (seeds 0-4, 20 epochs)."""

    SEEDS = (0, 1, 2, 3, 4)

    def _run(self, attention, seed):
        backbone = BackboneSpec(attention=attention)
        data = generate_dataset(SyntheticDatasetSpec(seed=seed))
        return train(backbone, ScsaConfig(), data, TrainSpec(seed=seed))

    def test_attention_does_not_hurt_mean_accuracy(self):
        with_attention = [self._run("scsa", s) for s in self.SEEDS]
        baseline = [self._run("none", s) for s in self.SEEDS]
        assert statistics.mean(r.final_val_acc for r in with_attention) >= \
            statistics.mean(r.final_val_acc for r in baseline)
        for result in with_attention + baseline:
            assert result.decreasing_epochs() >= 15


# ============================================================================
# BENCHMARK
# ============================================================================

@pytest.mark.unit
class TestSweepParsing:

    def test_default_sweep(self):
        points = parse_sweep("C=16;HW=28,56,112")
        assert points == [SweepPoint("baseline", 16, s, s) for s in (28, 56, 112)]

    def test_cartesian_product(self):
        points = parse_sweep("preset=baseline,wo-pcsa;C=16;H=28;W=28,56")
        assert len(points) == 4
        assert points[0] == SweepPoint("baseline", 16, 28, 28)
        assert points[-1] == SweepPoint("wo-pcsa", 16, 28, 56)

    @pytest.mark.parametrize("text", [
        "C=16",
        "HW=28",
        "C=16;HW=28;H=28",
        "C=x;HW=28",
        "C=16;HW=0",
        "C=16;D=3;HW=28",
        "C=16;HW=",
        "preset=nope;C=16;HW=28",
        "C16;HW=28",
    ])
    def test_bad_sweeps(self, text):
        with pytest.raises(ConfigurationError):
            parse_sweep(text)


@pytest.mark.unit
class TestBench:

    def test_rows_pair_timing_with_flops(self):
        rows = bench([SweepPoint("baseline", 8, 8, 8), SweepPoint("wo-pcsa", 8, 8, 8)])
        assert [r.preset for r in rows] == ["baseline", "wo-pcsa"]
        assert rows[0].flops == flop_estimate(8, 8, 8, ScsaConfig()).total
        assert rows[1].flops < rows[0].flops
        assert all(r.median_ms > 0 for r in rows)

    def test_minimum_repeats(self):
        with pytest.raises(ConfigurationError):
            bench([SweepPoint("baseline", 8, 8, 8)], repeats=4)

    def test_minimum_warmup(self):
        with pytest.raises(ConfigurationError):
            bench([SweepPoint("baseline", 8, 8, 8)], warmup=1)

    def test_empty_batch_rejected(self):
        with pytest.raises(ConfigurationError):
            bench([SweepPoint("baseline", 8, 8, 8)], batch=0)

    def test_throughput_counts_the_whole_batch(self):
        row, = bench([SweepPoint("baseline", 8, 8, 8)], batch=4)
        assert row.images_per_sec == pytest.approx(4 / (row.median_ms / 1e3))

    def test_default_batch_outweighs_call_overhead(self):
        assert BENCH_BATCH >= 32

    @pytest.mark.slow
    def test_time_grows_with_resolution(self):
        rows = bench(parse_sweep("C=16;HW=28,56,112"))
        for small, large in zip(rows, rows[1:]):
            assert 2.5 <= large.median_ms / small.median_ms <= 6.0


# ============================================================================
# FORMATTERS
# ============================================================================

@pytest.mark.unit
class TestFormatters:

    def test_csv_quoting(self):
        assert format_csv(("a", "b"), [["1", "x,y"]]) == ["a,b", '1,"x,y"']

    def test_bench_csv(self):
        row = BenchRow("baseline", 16, 28, 28, 1.23456, 70560, 810.0)
        assert format_bench_csv([row]) == ["preset,C,H,W,median_ms,flops",
                                           "baseline,16,28,28,1.2346,70560"]

    def test_suite_report(self):
        report = SuiteReport((GradcheckReport("op.relu", 1e-10, 1e-4, True),
                              GradcheckReport("op.add", 0.5, 1e-4, False)), ("scale",))
        lines = format_suite_report(report)
        assert lines[1] == "GRADIENT CHECKS"
        assert lines[3].startswith("op.relu") and lines[3].endswith("ok")
        assert lines[4].endswith("FAIL")
        assert "missing checks for: scale" in lines[5]
        assert lines[-1] == "FAILED: 1/2 checks within tolerance"

    def test_checkpoint_summary(self):
        lines = format_checkpoint_summary({"pcsa.q.weight": Tensor(np.ones(8)),
                                           "head.bias": Tensor(np.array([-1.0, 1.0]))})
        assert lines[0] == "2 tensors"
        assert lines[1] == "pcsa.q.weight   [8]   mean=1 std=0 min=1 max=1"
        assert lines[2].startswith("head.bias       [2]   mean=0 std=1 min=-1 max=1")

    def test_training_summary(self):
        result = TrainingResult(records=[EpochRecord(1, 1.5, 0.25), EpochRecord(2, 1.0, 0.5)])
        lines = format_training_summary("seed=0", result)
        assert lines[0] == "seed=0: 2 epochs"
        assert "(decreased in 1/1 epochs)" in lines[1]
        assert lines[2].endswith("0.5000")

    def test_file_writer(self, tmp_path):
        path = tmp_path / "out.csv"
        FileWriter(str(path)).write_lines(["a,b", "1,2"])
        assert path.read_text(encoding="utf-8") == "a,b\n1,2\n"
        assert FileWriter.lines_to_content([]) == ""
