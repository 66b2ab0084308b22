"""Tests for the deviation bounds and their empirical measurement. Oracles:
hand-substituted bound values, the analytic optimum as a cost floor, and an
exactly-representable lifted system for which the nominal controller is
optimal."""

import numpy as np
import pytest

from koopbound.deviation import (
    adversarial_error_sweep,
    analyze_point,
    bound_slack,
    controller_deviation_bound,
    grid_sweep,
    measure_controller_deviation,
    measure_value_deviation,
    sweep_summary,
    sweep_to_csv,
    value_deviation_bound,
    _tail_matrix,
)
from koopbound.dynamics import (
    analytic_controller,
    analytic_value,
    benchmark_system,
    make_weights,
)
from koopbound.edmd import collect_data, identify_model
from koopbound.lifting import build_monomial_basis


@pytest.fixture(scope="module")
def pipeline():
    sys_ = benchmark_system()
    basis = build_monomial_basis(2, 4)
    data = collect_data(sys_, n_traj=40, t_len=1.0, step=0.01, seed=42)
    model = identify_model(data, basis, lipschitz_resolution=201)
    weights = make_weights(np.eye(2), np.eye(1), model.c_sel)
    return sys_, model, weights, _tail_matrix(sys_, weights)


class TestValueDeviationBound:
    def test_zero_coefficients(self):
        assert value_deviation_bound(0, 0, 5.0, 1.0, 1.0, 0.75, 4.0) == 0.0

    def test_hand_substitution(self):
        # max(2*0.1*2/1, 2*0.05/1) * sqrt(0.75*4) = 0.4*sqrt(3)
        val = value_deviation_bound(0.1, 0.05, 2.0, 1.0, 1.0, 0.75, 4.0)
        assert val == pytest.approx(0.69282, abs=1e-5)

    def test_square_root_homogeneity(self):
        base = value_deviation_bound(0.1, 0.05, 2.0, 1.0, 1.0, 0.75, 4.0)
        doubled = value_deviation_bound(0.1, 0.05, 2.0, 1.0, 1.0, 1.5, 8.0)
        assert doubled == pytest.approx(2.0 * base, rel=1e-12)

    def test_rejects_negative_inputs(self):
        with pytest.raises(ValueError):
            value_deviation_bound(-0.1, 0, 1, 1, 1, 1, 1)
        with pytest.raises(ValueError):
            value_deviation_bound(0.1, 0, 1, 0.0, 1, 1, 1)

    def test_monotonicity(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c1, c2, lip, v0, ge = rng.uniform(0.01, 5.0, size=5)
            lq, lr = rng.uniform(0.1, 5.0, size=2)
            base = value_deviation_bound(c1, c2, lip, lq, lr, v0, ge)
            up = 1.0 + rng.uniform(0.01, 1.0)
            assert value_deviation_bound(c1 * up, c2, lip, lq, lr, v0, ge) >= base
            assert value_deviation_bound(c1, c2, lip, lq * up, lr, v0, ge) <= base
            assert value_deviation_bound(c1, c2, lip, lq, lr * up, v0, ge) <= base


class TestControllerDeviationBound:
    def test_zero(self):
        assert controller_deviation_bound(0.0, 1.0) == 0.0
        assert controller_deviation_bound(0.0, 1e-12) == 0.0

    def test_hand_substitution(self):
        # 2*1*(1 + sqrt(2))
        assert controller_deviation_bound(1.0, 1.0) == pytest.approx(4.82843, abs=1e-5)

    def test_strictly_increasing(self):
        vals = [controller_deviation_bound(d, 2.0) for d in np.linspace(0.01, 5, 50)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_undefined_at_zero_value(self):
        with pytest.raises(ValueError):
            controller_deviation_bound(1.0, 0.0)


class TestBoundSlack:
    def test_floor_dominates_small_bounds(self):
        assert bound_slack(0.001) == 0.01

    def test_relative_dominates_large_bounds(self):
        assert bound_slack(10.0) == pytest.approx(0.5)


class TestMeasureValueDeviation:
    def test_origin(self, pipeline):
        sys_, model, weights, tail = pipeline
        vm = measure_value_deviation(sys_, model, weights, np.zeros(2),
                                     tail_matrix=tail)
        assert vm.v_measured == 0.0
        assert vm.v0 == 0.0

    def test_optimality_floor(self, pipeline):
        # no controller beats the true optimum
        sys_, model, weights, tail = pipeline
        vm = measure_value_deviation(sys_, model, weights, np.array([1.0, 1.0]),
                                     tail_matrix=tail)
        assert vm.v_measured >= analytic_value(np.array([1.0, 1.0])) - 1e-3

    def test_measured_close_to_nominal(self, pipeline):
        sys_, model, weights, tail = pipeline
        x0 = np.array([0.6, -0.4])
        vm = measure_value_deviation(sys_, model, weights, x0, tail_matrix=tail)
        assert abs(vm.v_measured - vm.v0) < 0.1
        assert not vm.region_exit

    def test_region_exit_flag(self, pipeline):
        sys_, model, weights, tail = pipeline
        with pytest.warns(UserWarning, match="outside"):
            vm = measure_value_deviation(sys_, model, weights,
                                         np.array([1.4, 0.0]), tail_matrix=tail)
        assert vm.region_exit


class TestMeasureControllerDeviation:
    def test_origin_is_zero(self, pipeline):
        sys_, model, weights, _ = pipeline
        dev = measure_controller_deviation(sys_, model, weights, np.zeros(2),
                                           analytic_controller)
        assert dev == 0.0

    def test_small_on_benchmark(self, pipeline):
        sys_, model, weights, _ = pipeline
        dev = measure_controller_deviation(sys_, model, weights,
                                           np.array([1.0, 1.0]),
                                           analytic_controller)
        assert 0.0 <= dev < 0.05

    def test_stride_does_not_change_result(self, pipeline):
        sys_, model, weights, _ = pipeline
        x0 = np.array([0.8, 0.5])
        full = measure_controller_deviation(sys_, model, weights, x0,
                                            analytic_controller, eval_stride=1)
        strided = measure_controller_deviation(sys_, model, weights, x0,
                                               analytic_controller, eval_stride=5)
        assert strided == pytest.approx(full, rel=1e-3, abs=1e-8)

    def test_exact_model_gives_zero_deviation(self, pipeline):
        # feed the SDRE controller itself as the reference: deviation vanishes
        sys_, model, weights, _ = pipeline
        from koopbound.control import SdreController
        from koopbound.lifting import lift

        ref = SdreController(model, weights)
        controller = lambda x: ref.solve(lift(model.basis, x))[0]
        dev = measure_controller_deviation(sys_, model, weights,
                                           np.array([0.5, 0.5]), controller)
        assert dev <= 1e-16


class TestAdversarialSweep:
    def test_zero_sample_reproduces_nominal(self, pipeline):
        _, model, weights, _ = pipeline
        sw = adversarial_error_sweep(model, weights, np.array([0.7, -0.3]),
                                     n_samples=5, seed=3, horizon=10.0,
                                     step=2e-2)
        assert sw.sample_kinds[0] == "zero"
        assert sw.sample_costs[0] == pytest.approx(sw.nominal_cost, abs=1e-9)

    def test_all_admissible_errors_within_bound(self, pipeline):
        _, model, weights, _ = pipeline
        sw = adversarial_error_sweep(model, weights, np.array([1.0, 1.0]),
                                     n_samples=40, seed=4, horizon=15.0,
                                     step=2e-2)
        assert sw.diverged == 0
        assert sw.all_within_bound
        assert sw.max_abs_deviation <= sw.delta_v_max + bound_slack(sw.delta_v_max)

    def test_gradient_direction_dominates_random(self, pipeline):
        # the worst-case proxy should produce the largest cost increase
        _, model, weights, _ = pipeline
        sw = adversarial_error_sweep(model, weights, np.array([0.9, 0.9]),
                                     n_samples=30, seed=5, horizon=15.0,
                                     step=2e-2)
        costs = dict(zip(sw.sample_kinds, sw.sample_costs))
        random_costs = [c for k, c in zip(sw.sample_kinds, sw.sample_costs)
                        if k.startswith("random")]
        assert costs["grad+"] >= max(random_costs) - 1e-9
        assert costs["grad-"] <= min(random_costs) + 1e-9

    def test_zero_envelope_collapses_samples(self, pipeline):
        import dataclasses

        _, model, weights, _ = pipeline
        clean = dataclasses.replace(model, c1=0.0, c2=0.0)
        sw = adversarial_error_sweep(clean, weights, np.array([0.5, 0.5]),
                                     n_samples=8, seed=6, horizon=10.0,
                                     step=2e-2)
        assert sw.delta_v_max == 0.0
        np.testing.assert_allclose(sw.sample_costs, sw.nominal_cost, atol=1e-12)


class TestAnalyzePointAndSweep:
    def test_origin_report_is_all_zero(self, pipeline):
        sys_, model, weights, tail = pipeline
        r = analyze_point(sys_, model, weights, np.zeros(2),
                          analytic_value=analytic_value,
                          analytic_controller=analytic_controller,
                          tail_matrix=tail)
        assert r.v0_star == 0.0 and r.delta_v_max == 0.0
        assert r.value_gap == 0.0 and r.controller_dev_bound == 0.0
        assert r.ok_thm_value and r.ok_thm_controller

    def test_bounds_hold_at_corner(self, pipeline):
        sys_, model, weights, tail = pipeline
        r = analyze_point(sys_, model, weights, np.array([1.0, 1.0]),
                          analytic_value=analytic_value,
                          analytic_controller=analytic_controller,
                          tail_matrix=tail)
        assert r.error is None
        assert r.value_gap <= r.delta_v_max + bound_slack(r.delta_v_max)
        assert (r.controller_dev_integral
                <= r.controller_dev_bound + bound_slack(r.controller_dev_bound))
        assert r.ok_thm_value and r.ok_thm_controller

    def test_small_sweep_structure(self, pipeline):
        sys_, model, weights, _ = pipeline
        reports = grid_sweep(sys_, model, weights, resolution=2, step=1e-2,
                             analytic_value=analytic_value,
                             analytic_controller=analytic_controller)
        assert len(reports) == 4
        corners = {tuple(r.x0) for r in reports}
        assert corners == {(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)}
        # row-major ordering
        assert tuple(reports[0].x0) == (-1.0, -1.0)
        assert tuple(reports[1].x0) == (-1.0, 1.0)

    def test_sweep_parallel_matches_serial(self, pipeline):
        sys_, model, weights, _ = pipeline
        kwargs = dict(resolution=3, step=1e-2,
                      analytic_value=analytic_value,
                      analytic_controller=analytic_controller)
        serial = grid_sweep(sys_, model, weights, jobs=1, **kwargs)
        parallel = grid_sweep(sys_, model, weights, jobs=2, **kwargs)
        for a, b in zip(serial, parallel):
            assert a.v0_star == b.v0_star
            assert a.delta_v_max == b.delta_v_max
            assert a.v_measured == b.v_measured

    def test_csv_and_summary(self, pipeline, tmp_path):
        sys_, model, weights, _ = pipeline
        reports = grid_sweep(sys_, model, weights, resolution=2, step=1e-2,
                             analytic_value=analytic_value,
                             analytic_controller=analytic_controller)
        path = tmp_path / "sweep.csv"
        sweep_to_csv(reports, path, metadata={"config_digest": "deadbeef"})
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "# config_digest=deadbeef"
        assert lines[1].startswith("x1,x2,V0,grad_energy,dVmax,")
        assert len(lines) == 2 + 4
        summary = sweep_summary(reports)
        assert summary["points"] == 4
        assert summary["errors"] == 0
        assert summary["value_violations"] == 0
