"""Command-line front end: data generation, identification, per-point
analysis, grid sweeps with figure rendering, and the verification suite.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .control import CareSolverError
from .deviation import (
    analyze_point,
    grid_sweep,
    sweep_summary,
    sweep_to_csv,
)
from .dynamics import (
    ControlAffineSystem,
    analytic_controller,
    analytic_value,
    benchmark_system,
    make_weights,
)
from .edmd import DataSet, LiftedBilinearModel, collect_data, identify_model
from .lifting import build_monomial_basis

__all__ = ["RunConfig", "main", "PLANTS"]

USAGE_ERROR, NUMERICAL_ERROR, VERIFY_ERROR = 1, 2, 3


@dataclass
class PlantEntry:
    factory: object
    analytic_value: object = None
    analytic_controller: object = None


PLANTS = {
    "benchmark2d": PlantEntry(
        factory=benchmark_system,
        analytic_value=analytic_value,
        analytic_controller=analytic_controller,
    ),
}


@dataclass
class RunConfig:
    """Every knob of the pipeline; round-trips losslessly through JSON."""

    plant: str = "benchmark2d"
    degree: int = 4
    n_traj: int = 40
    t_len: float = 1.0
    data_step: float = 0.01
    u_max: float = 2.0
    excitation_hold: float = 0.1
    seed: int = 42
    qbar: list = dataclasses.field(default_factory=lambda: [[1.0, 0.0], [0.0, 1.0]])
    r: list = dataclasses.field(default_factory=lambda: [[1.0]])
    region: list = dataclasses.field(
        default_factory=lambda: [[-1.0, 1.0], [-1.0, 1.0]])
    resolution: int = 21
    lipschitz_resolution: int = 201
    horizon: float = 20.0
    sim_step: float = 1e-3
    settle_tol: float = 1e-3
    ctrl_settle_tol: float = 1e-2
    ctrl_eval_stride: int = 5
    divergence_guard: float = 1e6
    adv_samples: int = 200
    adv_step: float = 2e-2
    adv_horizon: float = 15.0
    adv_settle_tol: float = 1e-3
    beta: float = 1.0
    epsilon: float = 0.0
    slack_rel: float = 0.05
    slack_floor: float = 0.01
    out_dir: str = "out"
    jobs: int = 0  # 0 means all available cores
    figures: bool = True

    # fields that select where/how results are emitted, not what they are;
    # excluded from the digest so reruns with different --jobs or --out
    # produce identical data artifacts
    _NON_SEMANTIC = ("out_dir", "jobs", "figures")

    def __post_init__(self):
        if self.plant not in PLANTS:
            raise ValueError(f"unknown plant {self.plant!r}; "
                             f"builtins: {sorted(PLANTS)}")
        positives = ["degree", "n_traj", "t_len", "data_step", "u_max",
                     "excitation_hold", "horizon", "sim_step",
                     "divergence_guard", "adv_samples", "adv_step",
                     "adv_horizon", "beta", "lipschitz_resolution"]
        for name in positives:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")
        if self.epsilon < 0 or self.slack_rel < 0 or self.slack_floor < 0:
            raise ValueError("epsilon and slack terms must be nonnegative")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1)

    def digest(self) -> str:
        payload = {k: v for k, v in dataclasses.asdict(self).items()
                   if k not in self._NON_SEMANTIC}
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def effective_jobs(self) -> int:
        return self.jobs if self.jobs > 0 else (os.cpu_count() or 1)

    def metadata(self) -> dict:
        return {"config_digest": self.digest(), "tool_version": __version__}


def _build_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("seed", "jobs", "n_traj", "t_len", "resolution", "beta",
                 "epsilon"):
        val = getattr(args, name.replace("-", "_"), None)
        if val is not None:
            overrides[name] = val
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "step", None) is not None:
        overrides["data_step" if args.command == "gen-data" else "sim_step"] = args.step
    if getattr(args, "no_figures", False):
        overrides["figures"] = False
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _load_plant(cfg: RunConfig) -> tuple[ControlAffineSystem, PlantEntry]:
    entry = PLANTS[cfg.plant]
    return entry.factory(), entry


def _weights(cfg: RunConfig, model: LiftedBilinearModel):
    return make_weights(np.array(cfg.qbar), np.array(cfg.r), model.c_sel)


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    system, _ = _load_plant(cfg)
    data = collect_data(
        system, n_traj=cfg.n_traj, t_len=cfg.t_len, step=cfg.data_step,
        seed=cfg.seed, u_max=cfg.u_max, hold=cfg.excitation_hold,
        init_region=tuple(tuple(iv) for iv in cfg.region),
        guard=cfg.divergence_guard)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.csv"
    data.to_csv(path, metadata=cfg.metadata())
    print(f"wrote {path}: {data.n_snapshots} snapshots from {cfg.n_traj} "
          f"trajectories ({data.meta['excitation']})")
    return 0


def cmd_identify(args) -> int:
    cfg = _build_config(args)
    data_path = Path(args.data)
    if not data_path.exists():
        print(f"error: data file not found: {data_path}", file=sys.stderr)
        return USAGE_ERROR
    data = DataSet.from_csv(data_path)
    basis = build_monomial_basis(len(cfg.region), cfg.degree)
    model = identify_model(
        data, basis,
        lipschitz_region=tuple(tuple(iv) for iv in cfg.region),
        lipschitz_resolution=cfg.lipschitz_resolution,
        beta=cfg.beta, meta=cfg.metadata())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "model.json"
    model.to_json(path)
    stats = model.residual_stats
    print(f"wrote {path}")
    print(f"residuals: max={stats.max:.6g} mean={stats.mean:.6g} rms={stats.rms:.6g}")
    print(f"error envelope: c1={model.c1:.6g} c2={model.c2:.6g} "
          f"L_p={model.lipschitz.value:.6g}")
    return 0


def _load_model(args) -> LiftedBilinearModel | None:
    path = Path(args.model)
    if not path.exists():
        print(f"error: model file not found: {path}", file=sys.stderr)
        return None
    return LiftedBilinearModel.from_json(path)


def cmd_analyze(args) -> int:
    cfg = _build_config(args)
    system, entry = _load_plant(cfg)
    model = _load_model(args)
    if model is None:
        return USAGE_ERROR
    weights = _weights(cfg, model)
    x0 = np.array([float(v) for v in args.x0.split(",")])
    report = analyze_point(
        system, model, weights, x0,
        horizon=cfg.horizon, step=cfg.sim_step, settle_tol=cfg.settle_tol,
        guard=cfg.divergence_guard, epsilon=cfg.epsilon,
        analytic_value=entry.analytic_value,
        analytic_controller=entry.analytic_controller,
        slack_rel=cfg.slack_rel, slack_floor=cfg.slack_floor,
        ctrl_eval_stride=cfg.ctrl_eval_stride,
        ctrl_settle_tol=cfg.ctrl_settle_tol)

    rows = [
        ("x0", np.array2string(report.x0, separator=", ")),
        ("V0*", f"{report.v0_star:.6g}"),
        ("grad energy", f"{report.grad_energy:.6g}"),
        ("dV_max", f"{report.delta_v_max:.6g}"),
        ("V measured", f"{report.v_measured:.6g}"),
        ("V* analytic", "-" if report.v_star_analytic is None
         else f"{report.v_star_analytic:.6g}"),
        ("gap V*-V0*", "-" if report.value_gap is None
         else f"{report.value_gap:.6g}"),
        ("ctrl deviation", "-" if report.controller_dev_integral is None
         else f"{report.controller_dev_integral:.6g}"),
        ("ctrl bound", f"{report.controller_dev_bound:.6g}"),
        ("value bound ok", str(report.ok_thm_value)),
        ("ctrl bound ok", str(report.ok_thm_controller)),
        ("flags", ";".join(report.flags) or "-"),
    ]
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        **cfg.metadata(),
        "x0": report.x0.tolist(),
        "v0_star": report.v0_star,
        "grad_energy": report.grad_energy,
        "delta_v_max": report.delta_v_max,
        "v_measured": report.v_measured,
        "v_star_analytic": report.v_star_analytic,
        "value_gap": report.value_gap,
        "controller_dev_integral": report.controller_dev_integral,
        "controller_dev_bound": report.controller_dev_bound,
        "ok_value_bound": report.ok_thm_value,
        "ok_controller_bound": report.ok_thm_controller,
        "flags": list(report.flags),
        "error": report.error,
    }
    path = out / "analysis.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
    print(f"wrote {path}")
    return 0 if report.error is None else NUMERICAL_ERROR


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    system, entry = _load_plant(cfg)
    model = _load_model(args)
    if model is None:
        return USAGE_ERROR
    weights = _weights(cfg, model)
    reports = grid_sweep(
        system, model, weights,
        region=tuple(tuple(iv) for iv in cfg.region),
        resolution=cfg.resolution, horizon=cfg.horizon, step=cfg.sim_step,
        jobs=cfg.effective_jobs(), settle_tol=cfg.settle_tol,
        guard=cfg.divergence_guard, epsilon=cfg.epsilon,
        analytic_value=entry.analytic_value,
        analytic_controller=entry.analytic_controller,
        slack_rel=cfg.slack_rel, slack_floor=cfg.slack_floor,
        ctrl_eval_stride=cfg.ctrl_eval_stride,
        ctrl_settle_tol=cfg.ctrl_settle_tol)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    sweep_to_csv(reports, csv_path, metadata=cfg.metadata())
    summary = {**cfg.metadata(), **sweep_summary(reports)}
    summary_path = out / "summary.json"
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=1)
    print(f"wrote {csv_path} ({len(reports)} rows) and {summary_path}")
    print(f"value-bound violations: {summary['value_violations']}, "
          f"controller-bound violations: {summary['controller_violations']}, "
          f"errors: {summary['errors']}")
    if cfg.figures:
        from .figures import render_sweep_figures

        for p in render_sweep_figures(reports, out):
            print(f"wrote {p}")
    return 0 if summary["errors"] == 0 else NUMERICAL_ERROR


def cmd_verify(args) -> int:
    from .acceptance import run_checks

    cfg = _build_config(args)
    results = run_checks(cfg, skip_slow=(args.skip == "slow"))
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name:<{width}}  ({r.runtime_s:7.2f}s)  {r.detail}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else VERIFY_ERROR


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="koopbound",
                     description="Data-driven bilinear optimal control with "
                                 "suboptimality certificates")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_shared(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, help="parallel workers (0 = all cores)")

    p = sub.add_parser("gen-data", parents=[], help="generate excitation data")
    add_shared(p)
    p.add_argument("--n-traj", dest="n_traj", type=int)
    p.add_argument("--t-len", dest="t_len", type=float)
    p.add_argument("--step", type=float)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("identify", help="fit the lifted bilinear model")
    add_shared(p)
    p.add_argument("data", help="dataset CSV from gen-data")
    p.add_argument("--beta", type=float, help="envelope objective weight on c2")
    p.set_defaults(fn=cmd_identify)

    p = sub.add_parser("analyze", help="deviation analysis at one state")
    add_shared(p)
    p.add_argument("model", help="model JSON from identify")
    p.add_argument("x0", help="comma-separated initial state, e.g. 1.0,1.0")
    p.add_argument("--epsilon", type=float, help="Riccati state-cost regularization")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("sweep", help="grid sweep over the analysis region")
    add_shared(p)
    p.add_argument("model", help="model JSON from identify")
    p.add_argument("--resolution", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--no-figures", action="store_true",
                   help="emit CSV/JSON only, skip figure rendering")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="run the acceptance suite end to end")
    add_shared(p)
    p.add_argument("--skip", choices=["slow"],
                   help="skip the long-running checks")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (CareSolverError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
