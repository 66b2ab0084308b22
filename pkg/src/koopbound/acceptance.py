"""End-to-end verification suite: ten checks covering the analytic
certificates, identification oracles, Riccati solver guarantees, deviation
bounds on the full pipeline, adversarial dominance, and reproducibility.
Used by the `verify` CLI command and by the acceptance test module."""

from __future__ import annotations

import math
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .control import solve_care
from .deviation import (
    adversarial_error_sweep,
    bound_slack,
    controller_deviation_bound,
    grid_sweep,
    sweep_to_csv,
    value_deviation_bound,
)
from .dynamics import (
    analytic_controller,
    analytic_value,
    analytic_value_gradient,
    benchmark_system,
    hjb_residual,
    integrate,
    linearize,
    make_weights,
    quadratic_cost,
)
from .edmd import collect_data, fit_error_coefficients, identify, identify_model
from .lifting import build_monomial_basis

__all__ = ["CheckResult", "AcceptanceContext", "run_checks", "CHECKS"]


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    runtime_s: float
    detail: str


class AcceptanceContext:
    """Shared pipeline artifacts, built lazily and reused across checks."""

    def __init__(self, config=None):
        from .cli import RunConfig

        self.cfg = config or RunConfig()
        self._cache: dict = {}

    def _get(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    @property
    def system(self):
        return self._get("system", benchmark_system)

    @property
    def basis(self):
        return self._get("basis", lambda: build_monomial_basis(2, self.cfg.degree))

    @property
    def model(self):
        def build():
            data = collect_data(
                self.system, n_traj=self.cfg.n_traj, t_len=self.cfg.t_len,
                step=self.cfg.data_step, seed=self.cfg.seed,
                u_max=self.cfg.u_max, hold=self.cfg.excitation_hold)
            return identify_model(
                data, self.basis,
                lipschitz_region=tuple(tuple(iv) for iv in self.cfg.region),
                lipschitz_resolution=self.cfg.lipschitz_resolution,
                beta=self.cfg.beta)
        return self._get("model", build)

    @property
    def weights(self):
        from .lifting import projection_matrix

        # built from the basis selector so fast checks never trigger the
        # full identification
        return self._get("weights", lambda: make_weights(
            np.array(self.cfg.qbar), np.array(self.cfg.r),
            projection_matrix(self.basis)))

    @property
    def sweep_reports(self):
        def build():
            cfg = self.cfg
            return grid_sweep(
                self.system, self.model, self.weights,
                region=tuple(tuple(iv) for iv in cfg.region),
                resolution=cfg.resolution, horizon=cfg.horizon,
                step=cfg.sim_step, jobs=cfg.effective_jobs(),
                settle_tol=cfg.settle_tol, epsilon=cfg.epsilon,
                analytic_value=analytic_value,
                analytic_controller=analytic_controller,
                slack_rel=cfg.slack_rel, slack_floor=cfg.slack_floor,
                ctrl_eval_stride=cfg.ctrl_eval_stride,
                ctrl_settle_tol=cfg.ctrl_settle_tol)
        return self._get("sweep", build)


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------

def check_hjb_certificate(ctx: AcceptanceContext) -> tuple[bool, str]:
    """1: analytic value/controller pair satisfies the optimality equation."""
    w = ctx.weights
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-1, 1, size=2)
        res = hjb_residual(ctx.system, w, analytic_value, analytic_controller,
                           x, grad_fn=analytic_value_gradient)
        worst = max(worst, abs(res))
    return worst <= 1e-10, f"max |residual| = {worst:.3e} (<= 1e-10)"


def check_optimal_cost(ctx: AcceptanceContext) -> tuple[bool, str]:
    """2: closed-loop cost of the analytic controller equals the value."""
    w = ctx.weights
    a_lin, b_lin = linearize(ctx.system)
    p_lin = solve_care(a_lin, b_lin, w.qbar, w.r).p
    traj = integrate(ctx.system, analytic_controller, np.array([1.0, 1.0]),
                     horizon=20.0, step=1e-3, weights=w, settle_tol=1e-6)
    cost = quadratic_cost(traj, w, tail_matrix=p_lin)
    err = abs(cost.total - 0.75)
    return err <= 1e-3, f"cost = {cost.total:.6f}, |cost - 0.75| = {err:.2e} (<= 1e-3)"


def check_edmd_recovery(ctx: AcceptanceContext) -> tuple[bool, str]:
    """3: exact recovery of a known bilinear lifted system."""
    rng = np.random.default_rng(7)
    N, m, T = 5, 1, 5000
    a = rng.standard_normal((N, N))
    a -= (np.max(np.linalg.eigvals(a).real) + 0.5) * np.eye(N)
    b0 = rng.standard_normal((N, m))
    b1 = rng.standard_normal((N, N))
    zs = rng.standard_normal((T, N))
    us = rng.uniform(-2, 2, size=(T, m))
    z1 = a @ zs.T + b0 @ us.T + b1 @ zs.T * us[:, 0]
    w0 = np.concatenate([zs.T, us.T, us[:, 0] * zs.T], axis=0)
    ah, b0h, blh = identify(w0, z1)
    err = max(np.abs(ah - a).max(), np.abs(b0h - b0).max(),
              np.abs(blh[0] - b1).max())
    res = z1 - np.concatenate([ah, b0h, blh[0]], axis=1) @ w0
    c1, c2 = fit_error_coefficients(
        np.linalg.norm(res, axis=0), np.linalg.norm(zs, axis=1),
        np.linalg.norm(us, axis=1))
    ok = err <= 1e-6 and c1 <= 1e-8 and c2 <= 1e-8
    return ok, f"max matrix error = {err:.2e} (<= 1e-6), c1 = {c1:.2e}, c2 = {c2:.2e} (<= 1e-8)"


def check_fit_optimality(ctx: AcceptanceContext) -> tuple[bool, str]:
    """4: envelope fit matches a grid-search oracle and stays feasible."""
    worst_coord = 0.0
    worst_slack = 0.0
    for seed in range(20):
        rng = np.random.default_rng(400 + seed)
        T = 50
        z = rng.uniform(0.1, 0.9, size=T)
        u = rng.uniform(0.6, 1.4, size=T)
        u[rng.random(T) < 0.1] = 0.0
        r = rng.uniform(0.0, 1.0, size=T)
        c1, c2 = fit_error_coefficients(r, z, u)
        g1, g2 = _grid_search_envelope(r, z, u)
        worst_coord = max(worst_coord, abs(c1 - g1), abs(c2 - g2))
        worst_slack = min(worst_slack, float((c1 * z + c2 * u - r).min()))
    ok = worst_coord <= 2e-4 and worst_slack >= -1e-12
    return ok, (f"max coord diff = {worst_coord:.2e} (<= 2e-4), "
                f"min slack = {worst_slack:.2e} (>= -1e-12)")


def _grid_search_envelope(r, z, u, beta=1.0, step=1e-4):
    has_u = u > 0
    c1_floor = float(np.max(r[u == 0] / z[u == 0])) if np.any(u == 0) else 0.0
    c1_cap = float(np.max(r[z > 0] / z[z > 0])) if np.any(z > 0) else 0.0
    grid = np.arange(0.0, max(c1_floor, c1_cap) + 2 * step, step)
    grid = grid[grid >= c1_floor - 1e-15]
    if np.any(has_u):
        need = (r[has_u] - grid[:, None] * z[has_u]) / u[has_u]
        c2 = np.maximum(need.max(axis=1), 0.0)
    else:
        c2 = np.zeros(len(grid))
    k = int(np.argmin(grid + beta * c2))
    return float(grid[k]), float(c2[k])


def check_care_certificate(ctx: AcceptanceContext) -> tuple[bool, str]:
    """5: solver certificate on random stabilizable instances + closed forms."""
    s1 = solve_care(np.array([[0.0]]), np.array([[1.0]]),
                    np.array([[1.0]]), np.array([[1.0]]))
    s2 = solve_care(np.array([[-1.0]]), np.array([[0.0]]),
                    np.array([[1.0]]), np.array([[1.0]]))
    scalar_err = max(abs(s1.p[0, 0] - 1.0), abs(s2.p[0, 0] - 0.5))
    if scalar_err > 1e-10:
        return False, f"scalar closed forms off by {scalar_err:.2e}"

    worst_res, worst_sym, worst_eig, worst_cl = 0.0, 0.0, 0.0, -np.inf
    for seed in range(50):
        rng = np.random.default_rng(5000 + seed)
        n = int(rng.integers(2, 15))
        m = int(rng.integers(1, 3))
        a = rng.standard_normal((n, n))
        a -= (np.max(np.linalg.eigvals(a).real) - rng.uniform(-1.0, 0.5)) * np.eye(n)
        b = rng.standard_normal((n, m))
        qh = rng.standard_normal((n, max(1, n // 2)))
        q = qh @ qh.T
        r = np.eye(m) * rng.uniform(0.5, 2.0)
        sol = solve_care(a, b, q, r)
        res = a.T @ sol.p + sol.p @ a \
            - sol.p @ b @ np.linalg.solve(r, b.T @ sol.p) + q
        worst_res = max(worst_res, np.linalg.norm(res, "fro")
                        / max(1.0, np.linalg.norm(q, "fro")))
        worst_sym = max(worst_sym, float(np.abs(sol.p - sol.p.T).max()))
        worst_eig = max(worst_eig, -float(np.linalg.eigvalsh(sol.p).min()))
        closed = a - b @ np.linalg.solve(r, b.T @ sol.p)
        worst_cl = max(worst_cl, float(np.max(np.linalg.eigvals(closed).real)))
    ok = (worst_res <= 1e-9 and worst_sym <= 1e-12 and worst_eig <= 1e-10
          and worst_cl < 0)
    return ok, (f"scaled residual <= {worst_res:.2e} (<= 1e-9), asymmetry "
                f"{worst_sym:.1e}, min eig >= {-worst_eig:.1e}, "
                f"closed-loop abscissa {worst_cl:.3f} (< 0)")


def check_value_bound_sweep(ctx: AcceptanceContext) -> tuple[bool, str]:
    """6: analytic optimality gap within the value bound across the grid."""
    cfg = ctx.cfg
    reports = ctx.sweep_reports
    fails, unexplained = [], []
    for r in reports:
        if r.error is not None:
            unexplained.append(r)
            continue
        tol = r.delta_v_max + bound_slack(r.delta_v_max, cfg.slack_rel,
                                          cfg.slack_floor)
        if r.value_gap is not None and r.value_gap > tol:
            fails.append(r)
            if not r.flags:
                unexplained.append(r)
    rate = 1.0 - len(fails) / len(reports)
    ok = rate >= 0.99 and not unexplained
    return ok, (f"gap <= bound+slack at {rate:.1%} of {len(reports)} points "
                f"(>= 99%), {len(unexplained)} unexplained")


def check_controller_bound_sweep(ctx: AcceptanceContext) -> tuple[bool, str]:
    """7: measured controller deviation within its bound across the grid."""
    cfg = ctx.cfg
    reports = ctx.sweep_reports
    fails, unexplained = [], []
    for r in reports:
        if r.error is not None or r.controller_dev_integral is None:
            unexplained.append(r)
            continue
        tol = r.controller_dev_bound + bound_slack(
            r.controller_dev_bound, cfg.slack_rel, cfg.slack_floor)
        if r.controller_dev_integral > tol:
            fails.append(r)
            if not r.flags:
                unexplained.append(r)
    rate = 1.0 - len(fails) / len(reports)
    ok = rate >= 0.99 and not unexplained
    return ok, (f"deviation <= bound+slack at {rate:.1%} of {len(reports)} "
                f"points (>= 99%), {len(unexplained)} unexplained")


def _adversarial_task(args):
    model, weights, x0, cfg_tuple = args
    n_samples, seed, horizon, step, settle, slack_rel, slack_floor = cfg_tuple
    return adversarial_error_sweep(
        model, weights, np.array(x0), n_samples=n_samples, seed=seed,
        horizon=horizon, step=step, settle_tol=settle,
        slack_rel=slack_rel, slack_floor=slack_floor)


def check_adversarial_dominance(ctx: AcceptanceContext) -> tuple[bool, str]:
    """8: admissible error realizations never beat the value bound."""
    cfg = ctx.cfg
    rng = np.random.default_rng(88)
    x0s = rng.uniform(-1, 1, size=(10, 2))
    tasks = [(ctx.model, ctx.weights, tuple(x0),
              (cfg.adv_samples, 1234 + i, cfg.adv_horizon, cfg.adv_step,
               cfg.adv_settle_tol, cfg.slack_rel, cfg.slack_floor))
             for i, x0 in enumerate(x0s)]
    jobs = min(cfg.effective_jobs(), len(tasks))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            sweeps = list(pool.map(_adversarial_task, tasks))
    else:
        sweeps = [_adversarial_task(t) for t in tasks]

    worst_margin = -np.inf
    zero_err = 0.0
    for sw in sweeps:
        tol = sw.delta_v_max + bound_slack(sw.delta_v_max, cfg.slack_rel,
                                           cfg.slack_floor)
        worst_margin = max(worst_margin, sw.max_abs_deviation - tol)
        zero_err = max(zero_err, abs(sw.sample_costs[0] - sw.nominal_cost))
    all_within = all(sw.all_within_bound for sw in sweeps)
    ok = all_within and worst_margin <= 0 and zero_err <= 1e-9
    return ok, (f"max bound overshoot = {worst_margin:.3e} (<= 0), zero-error "
                f"sample mismatch = {zero_err:.2e} (<= 1e-9), "
                f"{cfg.adv_samples} samples x {len(sweeps)} states")


def check_bound_monotonicity(ctx: AcceptanceContext) -> tuple[bool, str]:
    """9: bound formulas are monotone in every argument as claimed."""
    rng = np.random.default_rng(9)
    ok = True
    for _ in range(1000):
        c1, c2, lip, v0, ge = rng.uniform(0.01, 5.0, size=5)
        lq, lr = rng.uniform(0.1, 5.0, size=2)
        base = value_deviation_bound(c1, c2, lip, lq, lr, v0, ge)
        up = 1.0 + rng.uniform(0.01, 1.0)
        ok &= value_deviation_bound(c1 * up, c2, lip, lq, lr, v0, ge) >= base
        ok &= value_deviation_bound(c1, c2 * up, lip, lq, lr, v0, ge) >= base
        ok &= value_deviation_bound(c1, c2, lip * up, lq, lr, v0, ge) >= base
        ok &= value_deviation_bound(c1, c2, lip, lq, lr, v0 * up, ge) >= base
        ok &= value_deviation_bound(c1, c2, lip, lq, lr, v0, ge * up) >= base
        ok &= value_deviation_bound(c1, c2, lip, lq * up, lr, v0, ge) <= base
        ok &= value_deviation_bound(c1, c2, lip, lq, lr * up, v0, ge) <= base
        if not ok:
            break
    ctrl_ok = controller_deviation_bound(0.0, rng.uniform(0.1, 10)) == 0.0
    dv = np.sort(rng.uniform(0.01, 10.0, size=100))
    vals = [controller_deviation_bound(d, 1.0) for d in dv]
    ctrl_ok &= all(b > a for a, b in zip(vals, vals[1:]))
    return ok and ctrl_ok, ("monotone in (c1, c2, L, V0, energy), "
                            "anti-monotone in eigenvalue floors, controller "
                            "bound zero at zero and strictly increasing")


def check_sweep_determinism(ctx: AcceptanceContext) -> tuple[bool, str]:
    """10: reduced-resolution sweeps are byte-identical across job counts."""
    import dataclasses

    cfg = dataclasses.replace(ctx.cfg, resolution=11, sim_step=1e-2)
    outputs = []
    for jobs in (cfg.effective_jobs(), 1):
        reports = grid_sweep(
            ctx.system, ctx.model, ctx.weights,
            region=tuple(tuple(iv) for iv in cfg.region),
            resolution=cfg.resolution, horizon=cfg.horizon, step=cfg.sim_step,
            jobs=jobs, settle_tol=cfg.settle_tol, epsilon=cfg.epsilon,
            analytic_value=analytic_value,
            analytic_controller=analytic_controller,
            slack_rel=cfg.slack_rel, slack_floor=cfg.slack_floor,
            ctrl_eval_stride=cfg.ctrl_eval_stride,
            ctrl_settle_tol=cfg.ctrl_settle_tol)
        with tempfile.TemporaryDirectory() as td:
            path = Path(td) / "sweep.csv"
            sweep_to_csv(reports, path, metadata=cfg.metadata())
            outputs.append(path.read_bytes())
    ok = outputs[0] == outputs[1]
    return ok, (f"11x11 sweep at step 1e-2, jobs={ctx.cfg.effective_jobs()} vs "
                f"jobs=1: {'identical' if ok else 'DIFFER'} "
                f"({len(outputs[0])} bytes)")


CHECKS = [
    (1, "analytic optimality certificate", check_hjb_certificate, False),
    (2, "optimal-cost reproduction", check_optimal_cost, False),
    (3, "exact bilinear recovery", check_edmd_recovery, False),
    (4, "envelope-fit optimality", check_fit_optimality, False),
    (5, "Riccati solver certificate", check_care_certificate, False),
    (6, "value-deviation bound sweep", check_value_bound_sweep, True),
    (7, "controller-deviation bound sweep", check_controller_bound_sweep, True),
    (8, "adversarial dominance", check_adversarial_dominance, True),
    (9, "bound monotonicity", check_bound_monotonicity, False),
    (10, "sweep determinism", check_sweep_determinism, True),
]

# wall-time budgets in seconds; criterion 7 reuses criterion 6's sweep and
# carries no budget of its own
RUNTIME_BUDGETS = {1: 1.0, 2: 5.0, 3: 10.0, 4: 10.0, 5: 10.0, 6: 600.0,
                   8: 120.0, 9: 1.0, 10: 120.0}


def run_check(ctx: AcceptanceContext, criterion: int) -> CheckResult:
    crit, name, fn, _slow = next(c for c in CHECKS if c[0] == criterion)
    t0 = time.perf_counter()
    try:
        passed, detail = fn(ctx)
    except Exception as exc:
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    elapsed = time.perf_counter() - t0
    budget = RUNTIME_BUDGETS.get(crit)
    if budget is not None:
        detail += f"; runtime {elapsed:.2f}s (< {budget:.0f}s)"
        if elapsed >= budget:
            passed = False
    return CheckResult(criterion=crit, name=f"{crit:2d} {name}",
                       passed=passed, runtime_s=elapsed, detail=detail)


def run_checks(config=None, skip_slow: bool = False,
               only: Optional[list[int]] = None) -> list[CheckResult]:
    ctx = AcceptanceContext(config)
    results = []
    for crit, _name, _fn, slow in CHECKS:
        if skip_slow and slow:
            continue
        if only is not None and crit not in only:
            continue
        results.append(run_check(ctx, crit))
    return results
