"""End-to-end verification suite, one test per pinned criterion.

Each test delegates to ``acceptance.run_criterion`` so the command line
(``mfstop acceptance``) and the test suite exercise identical code, and
prints the same one-line pass/fail summary the command emits.
"""

from __future__ import annotations

from mfstop import acceptance


def _run(index):
    result = acceptance.run_criterion(index)
    print(result.line)
    assert result.passed, result.detail
    return result


def test_criterion_01_aggregation_identity():
    _run(1)


def test_criterion_02_dynamic_programming():
    _run(2)


def test_criterion_03_stop_monotonicity():
    _run(3)


def test_criterion_04_mean_variance_collapse():
    _run(4)


def test_criterion_05_shortfall_duality():
    _run(5)


def test_criterion_06_distortion_evaluator():
    _run(6)


def test_criterion_07_mollifier():
    _run(7)


def test_criterion_08_derivative_calculus():
    _run(8)


def test_criterion_09_obstacle_residual():
    _run(9)


def test_criterion_10_exactness_layer():
    _run(10)
