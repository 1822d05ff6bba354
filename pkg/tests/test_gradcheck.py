"""Tests that the analytic inversion gradients agree with finite differences."""

from __future__ import annotations

import pytest

from eavesdrop.gradcheck import TOLERANCE, GradCheck, check_case, run_suite
from eavesdrop.numerics import Rng


class TestGradCheck:
    @pytest.mark.parametrize("kind", ["linear", "mlp"])
    @pytest.mark.parametrize("case", range(3))
    def test_gradients_match(self, kind: str, case: int):
        ex, eg = check_case(kind, Rng(11).child("gradcheck", kind, case))
        assert ex < TOLERANCE
        assert eg < TOLERANCE

    def test_without_tv(self):
        ex, eg = check_case("linear", Rng(12), lambda_tv=0.0)
        assert ex < TOLERANCE and eg < TOLERANCE

    def test_per_stream_normalization(self):
        ex, eg = check_case("mlp", Rng(13), power_norm="per_stream")
        assert ex < TOLERANCE and eg < TOLERANCE

    def test_suite_covers_both_kinds(self):
        results = run_suite(seed=1, cases=1)
        assert [(r.kind, r.case) for r in results] == [("linear", 0), ("mlp", 0)]
        assert all(r.passed for r in results)

    def test_passed_needs_both_errors_small(self):
        assert not GradCheck("linear", 0, 0.0, 1.0).passed
        assert GradCheck("linear", 0, 0.0, 0.0).passed
