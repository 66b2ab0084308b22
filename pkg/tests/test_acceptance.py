"""Acceptance suite: runs every verification criterion at its stated
tolerance and prints one pass/fail line per criterion. The expensive grid
sweep is built once and shared by the checks that consume it."""

import pytest

from koopbound.acceptance import AcceptanceContext, run_check


@pytest.fixture(scope="module")
def ctx():
    return AcceptanceContext()


def _run_criterion(ctx, number):
    result = run_check(ctx, number)
    status = "PASS" if result.passed else "FAIL"
    print(f"[{status}] criterion {result.name} ({result.runtime_s:.2f}s): "
          f"{result.detail}")
    assert result.passed, f"criterion {result.name}: {result.detail}"


def test_criterion_01_analytic_optimality_certificate(ctx):
    _run_criterion(ctx, 1)


def test_criterion_02_optimal_cost_reproduction(ctx):
    _run_criterion(ctx, 2)


def test_criterion_03_exact_bilinear_recovery(ctx):
    _run_criterion(ctx, 3)


def test_criterion_04_envelope_fit_optimality(ctx):
    _run_criterion(ctx, 4)


def test_criterion_05_riccati_solver_certificate(ctx):
    _run_criterion(ctx, 5)


def test_criterion_06_value_deviation_bound_sweep(ctx):
    _run_criterion(ctx, 6)


def test_criterion_07_controller_deviation_bound_sweep(ctx):
    _run_criterion(ctx, 7)


def test_criterion_08_adversarial_dominance(ctx):
    _run_criterion(ctx, 8)


def test_criterion_09_bound_monotonicity(ctx):
    _run_criterion(ctx, 9)


def test_criterion_10_sweep_determinism(ctx):
    _run_criterion(ctx, 10)
