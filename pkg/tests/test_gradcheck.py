"""
Tests for the finite-difference oracle and the gradient-check suite.

The full suite (every op, module variant and preset) is marked slow; the
op checks and a few module checks run by default.
"""

import numpy as np
import pytest

import ops
from exceptions import ConfigurationError, NonFiniteError
from gradcheck import GradcheckReport, finite_diff_gradcheck
from gradcheck_suite import build_cases, missing_op_checks, run_case, run_gradcheck_suite
from tensor import Parameter, Tensor


def _sigmoid(inputs, tape):
    return ops.sigmoid(inputs[0], tape=tape)


# ============================================================================
# ORACLE
# ============================================================================

@pytest.mark.unit
class TestFiniteDiffGradcheck:

    def test_correct_gradient_passes(self, rng):
        report = finite_diff_gradcheck(_sigmoid, [Tensor(rng.standard_normal((2, 3, 4)))], name="sig")
        assert report.passed
        assert report.max_rel_error < 1e-6
        assert report.name == "sig"
        assert report.targets[0].coords_checked == 24

    def test_parameter_targets_are_checked(self, rng):
        w = Parameter("w", rng.standard_normal(3))
        b = Parameter("b", rng.standard_normal(3))
        x = Tensor(rng.standard_normal((2, 3, 4)))
        report = finite_diff_gradcheck(
            lambda inputs, tape: ops.per_channel_affine(inputs[0], w, b, tape=tape), [x], [w, b])
        assert report.passed
        assert [t.name for t in report.targets] == ["input0", "w", "b"]

    def test_corrupted_backward_is_caught(self, rng):
        x = Tensor(rng.standard_normal((2, 3)))
        with ops.corrupted_backward("scale"):
            report = finite_diff_gradcheck(lambda inputs, tape: ops.scale(inputs[0], 2.0, tape=tape), [x])
        assert not report.passed
        # analytic 2.2 g against numeric 2 g
        assert report.max_rel_error == pytest.approx(0.2 / 2.2, rel=1e-5)

    def test_inputs_restored_bitwise(self, rng):
        data = rng.standard_normal((2, 3, 4))
        x = Tensor(data.copy())
        finite_diff_gradcheck(_sigmoid, [x])
        np.testing.assert_array_equal(x.data, data)

    def test_float32_rejected(self):
        x = Tensor(np.ones((1, 2), dtype=np.float32))
        with pytest.raises(ConfigurationError):
            finite_diff_gradcheck(_sigmoid, [x])

    def test_non_finite_output(self):
        x = Tensor(np.ones((1, 2)))
        with pytest.raises(NonFiniteError):
            finite_diff_gradcheck(lambda inputs, tape: ops.scale(inputs[0], float("nan"), tape=tape), [x])

    def test_coordinate_cap(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 5)))
        report = finite_diff_gradcheck(_sigmoid, [x], max_coords=7)
        assert report.targets[0].coords_checked == 7

    def test_combine_keeps_worst(self):
        a = GradcheckReport("op.x", 1e-9, 1e-4, True)
        b = GradcheckReport("op.x", 3e-3, 1e-4, False)
        merged = GradcheckReport.combine("op.x", [a, b])
        assert merged.max_rel_error == 3e-3
        assert not merged.passed
        assert str(merged).startswith("FAIL op.x")


# ============================================================================
# SUITE
# ============================================================================

@pytest.mark.unit
class TestGradcheckSuite:

    def test_every_registered_op_has_a_check(self):
        assert missing_op_checks(build_cases()) == []

    def test_dropping_a_check_is_reported(self):
        cases = [c for c in build_cases() if c.op != "relu"]
        assert missing_op_checks(cases) == ["relu"]
        suite = run_gradcheck_suite(pattern="op.sigmoid", cases=cases)
        assert suite.missing_ops == ("relu",)
        assert not suite.passed

    def test_case_names(self):
        names = [c.name for c in build_cases()]
        assert "op.dwconv1d" in names
        assert "smsa.unshared" in names
        assert "pcsa.heads2-shuffle" in names
        assert "scsa.baseline" in names
        assert len([n for n in names if n.startswith("scsa.")]) == 13

    def test_op_checks_pass(self):
        suite = run_gradcheck_suite(pattern="op.")
        assert len(suite.results) == len(ops.DIFFERENTIABLE_OPS)
        assert suite.passed, [str(r) for r in suite.failures]

    def test_corrupting_one_op_fails_only_its_check(self):
        suite = run_gradcheck_suite(pattern="op.", corrupt_op="linear")
        assert [r.name for r in suite.failures] == ["op.linear"]

    def test_glob_pattern(self):
        suite = run_gradcheck_suite(pattern="op.avg_pool_over_*")
        assert sorted(r.name for r in suite.results) == ["op.avg_pool_over_height", "op.avg_pool_over_width"]

    @pytest.mark.parametrize("name", ["smsa.default", "smsa.bn", "smsa.unshared", "pcsa.default",
                                      "pcsa.heads2-shuffle"])
    def test_module_checks_pass(self, name):
        case = next(c for c in build_cases() if c.name == name)
        report = run_case(case, seed=0)
        assert report.passed, str(report)

    def test_runs_are_deterministic(self):
        first = run_gradcheck_suite(pattern="pcsa.")
        second = run_gradcheck_suite(pattern="pcsa.")
        assert [r.max_rel_error for r in first.results] == [r.max_rel_error for r in second.results]

    def test_baseline_composition_passes(self):
        suite = run_gradcheck_suite(pattern="scsa.baseline")
        assert len(suite.results) == 1
        assert suite.passed, str(suite.results[0])

    def test_report_to_dict(self):
        suite = run_gradcheck_suite(pattern="op.relu")
        data = suite.to_dict()
        assert data["passed"] is True
        assert data["results"][0]["name"] == "op.relu"
        assert data["missing_ops"] == []

    @pytest.mark.slow
    def test_full_suite_passes(self):
        suite = run_gradcheck_suite()
        assert suite.passed, [str(r) for r in suite.failures]
