"""
Integration tests for the scsa command line.

Every test drives main.run() with an argv list, exactly as the console
script does, and checks the exit code plus what reached stdout or disk.

Exit codes: 0 ok, 1 validation, 2 numerical failure, 3 I/O.

To run only these tests:
    pytest tests/test_integration.py -v

To run only integration tests using markers:
    pytest -m integration -v
"""

import json
import logging
from unittest.mock import patch

import numpy as np
import pytest

from main import run
from tensor import Tensor, dump_tensor


TINY_CONFIG = {
    "dataset": {
        "seed": 7,
        "samples_per_class": 10,
        "image_size": [1, 16, 16],
        "blob_scales": [1.0, 1.5, 2.5, 3.5],
        "noise_sigma": 0.05,
    },
    "backbone": {"in_channels": 1, "stem_channels": 8, "stage_channels": [8, 16], "blocks_per_stage": 1},
    "train": {"epochs": 2, "batch_size": 8, "milestones": [1]},
}


def _cli(*argv):
    return run(list(argv), configure_logging=False)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
    return str(path)


# ============================================================================
# GLOBAL FLAGS AND USAGE ERRORS
# ============================================================================

@pytest.mark.integration
class TestGlobalFlags:

    def test_print_defaults_is_a_valid_config(self, capsys):
        assert _cli("--print-defaults") == 0
        defaults = json.loads(capsys.readouterr().out)
        assert defaults["scsa"]["smsa"]["kernel_sizes"] == [3, 5, 7, 9]
        assert defaults["scsa"]["pcsa"]["heads"] == 1
        assert defaults["train"]["milestones"] == [12, 18]

    def test_print_constants(self, capsys):
        assert _cli("--print-constants") == 0
        assert capsys.readouterr().out.strip()

    def test_version(self):
        assert _cli("--version") == 0

    def test_verbose_and_quiet_conflict(self):
        assert _cli("-v", "-q", "gradcheck", "--filter", "op.relu") == 1

    def test_missing_command(self):
        assert _cli() == 1

    def test_unknown_command(self):
        assert _cli("evaluate") == 1

    def test_invalid_seed_in_environment(self, monkeypatch):
        monkeypatch.setenv("SCSA_SEED", "abc")
        assert _cli("gradcheck", "--filter", "op.relu") == 1


# ============================================================================
# GRADCHECK
# ============================================================================

@pytest.mark.integration
class TestGradcheckCommand:

    def test_single_op_passes(self, capsys):
        assert _cli("gradcheck", "--filter", "op.sigmoid") == 0
        out = capsys.readouterr().out
        assert "op.sigmoid" in out
        assert "PASSED: 1/1 checks within tolerance" in out

    def test_impossible_tolerance_fails(self, capsys):
        assert _cli("gradcheck", "--filter", "op.sigmoid", "--tol", "1e-15") == 2
        assert "FAILED: 0/1" in capsys.readouterr().out

    def test_corrupted_backward_fails(self):
        assert _cli("gradcheck", "--filter", "op.linear", "--corrupt-backward", "linear") == 2

    def test_unknown_op_to_corrupt(self):
        assert _cli("gradcheck", "--corrupt-backward", "no_such_op") == 1

    def test_no_matching_checks(self):
        assert _cli("gradcheck", "--filter", "op.no_such_op") == 1

    def test_non_positive_tolerance(self):
        assert _cli("gradcheck", "--tol", "0") == 1

    def test_json_report(self, capsys):
        assert _cli("gradcheck", "--filter", "op.add", "--json") == 0
        report = json.loads(capsys.readouterr().out)
        assert report["passed"] is True
        assert [r["name"] for r in report["results"]] == ["op.add"]


# ============================================================================
# ABLATE
# ============================================================================

@pytest.mark.integration
class TestAblateCommand:

    def test_baseline_row(self, capsys):
        assert _cli("ablate", "--preset", "baseline") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "preset,shape_ok,gradcheck_max_rel_err,gradcheck_passed,flops,params,val_acc"
        assert len(lines) == 2
        fields = lines[1].split(",")
        assert fields[:2] == ["baseline", "true"]
        assert fields[3] == "true"
        # C=64, H=W=56
        assert fields[4] == "1059968"
        assert fields[5] == "1024"
        assert fields[6] == ""

    def test_unknown_preset(self, caplog):
        with caplog.at_level(logging.ERROR):
            assert _cli("ablate", "--preset", "wo-everything") == 1
        assert "baseline" in caplog.text

    def test_preset_and_all_are_exclusive(self):
        assert _cli("ablate", "--preset", "baseline", "--all") == 1

    def test_short_training_fills_accuracy(self, tiny_config, tmp_path):
        output = tmp_path / "ablation.csv"
        code = _cli("ablate", "--preset", "wo-pcsa", "--config", tiny_config,
                    "--train-epochs", "1", "--output", str(output))
        assert code == 0
        row = output.read_text(encoding="utf-8").splitlines()[1].split(",")
        assert row[0] == "wo-pcsa"
        assert 0.0 <= float(row[6]) <= 1.0

    @pytest.mark.slow
    def test_all_presets(self, capsys):
        assert _cli("ablate", "--all") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 14
        assert all(line.split(",")[1] == "true" for line in lines[1:])


# ============================================================================
# TRAIN AND DUMP
# ============================================================================

@pytest.mark.integration
class TestTrainCommand:

    def test_train_with_log_and_checkpoint(self, tiny_config, tmp_path, capsys):
        log = tmp_path / "run.jsonl"
        checkpoint = tmp_path / "run.scsk"
        assert _cli("train", "--config", tiny_config, "--log", str(log),
                    "--checkpoint", str(checkpoint)) == 0
        records = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines()]
        assert [r["epoch"] for r in records] == [1, 2]
        assert set(records[0]) == {"epoch", "train_loss", "val_acc"}

        capsys.readouterr()
        assert _cli("dump", "--checkpoint", str(checkpoint)) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].endswith("tensors")
        assert any(line.startswith("stage0.block0.attn.smsa.conv.0.weight") for line in out)

    def test_attention_off_logs_to_stdout(self, tiny_config, capsys):
        assert _cli("train", "--config", tiny_config, "--attention", "off") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[1])["epoch"] == 2

    def test_seed_from_environment_is_reproducible(self, tiny_config, capsys, monkeypatch):
        monkeypatch.setenv("SCSA_SEED", "3")
        assert _cli("train", "--config", tiny_config, "--attention", "off") == 0
        first = capsys.readouterr().out
        assert _cli("train", "--config", tiny_config, "--attention", "off", "--seed", "3") == 0
        assert capsys.readouterr().out == first

    def test_missing_config_file(self, tmp_path):
        assert _cli("train", "--config", str(tmp_path / "absent.json")) == 3

    def test_malformed_config_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        assert _cli("train", "--config", str(path)) == 1

    def test_unknown_config_key_is_reported_with_its_path(self, tmp_path, caplog):
        path = tmp_path / "typo.json"
        path.write_text(json.dumps({"scsa": {"pcsa": {"head": 2}}}), encoding="utf-8")
        with caplog.at_level(logging.ERROR):
            assert _cli("train", "--config", str(path)) == 1
        assert "scsa.pcsa.head" in caplog.text

    def test_incompatible_stage_width(self, tmp_path):
        path = tmp_path / "width.json"
        path.write_text(json.dumps({"backbone": {"stage_channels": [16, 30]}}), encoding="utf-8")
        assert _cli("train", "--config", str(path)) == 1


@pytest.mark.integration
class TestDumpCommand:

    def test_tensor_dump(self, tmp_path, capsys):
        path = tmp_path / "x.scst"
        dump_tensor(path, Tensor(np.ones((2, 3))))
        assert _cli("dump", "--tensor", str(path)) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "1 tensors"
        assert "[2,3]   mean=1 std=0 min=1 max=1" in out[1]

    def test_malformed_checkpoint(self, tmp_path):
        path = tmp_path / "garbage.scsk"
        path.write_bytes(b"garbage bytes")
        assert _cli("dump", "--checkpoint", str(path)) == 3

    def test_missing_tensor_file(self, tmp_path):
        assert _cli("dump", "--tensor", str(tmp_path / "absent.scst")) == 3


# ============================================================================
# BENCH
# ============================================================================

@pytest.mark.integration
class TestBenchCommand:

    def test_sweep_to_file(self, tmp_path):
        output = tmp_path / "bench.csv"
        assert _cli("bench", "--sweep", "C=8;HW=8,12,16", "--output", str(output)) == 0
        lines = output.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "preset,C,H,W,median_ms,flops"
        assert [line.split(",")[2] for line in lines[1:]] == ["8", "12", "16"]

    def test_flop_breakdown_is_logged(self, capsys, caplog):
        with caplog.at_level(logging.INFO):
            assert _cli("bench", "--sweep", "preset=wo-pcsa;C=8;HW=8", "--flops") == 0
        assert "attention_product" in caplog.text
        assert capsys.readouterr().out.splitlines()[1].startswith("wo-pcsa,8,8,8,")

    def test_bad_sweep(self):
        assert _cli("bench", "--sweep", "C=16;HW=abc") == 1

    def test_too_few_repeats(self):
        assert _cli("bench", "--sweep", "C=8;HW=8", "--repeats", "3") == 1

    def test_explicit_batch(self, capsys):
        assert _cli("bench", "--sweep", "C=8;HW=8", "--batch", "2") == 0
        assert capsys.readouterr().out.splitlines()[1].startswith("baseline,8,8,8,")

    def test_empty_batch(self):
        assert _cli("bench", "--sweep", "C=8;HW=8", "--batch", "0") == 1

    def test_unwritable_output(self, tmp_path):
        with patch("builtins.open", side_effect=IOError("Permission denied")):
            assert _cli("bench", "--sweep", "C=8;HW=8", "--output", str(tmp_path / "b.csv")) == 3
