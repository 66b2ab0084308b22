"""Bilinear model identification from trajectory data: excitation and data
collection, snapshot matrix assembly, least-squares fit of the lifted
dynamics, residual statistics, and the proportional error-envelope fit."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import ControlAffineSystem, DivergenceError, _rk4_step
from .lifting import (
    DictionaryBasis,
    LipschitzEstimate,
    jacobian_many,
    lift_many,
    lipschitz_constant,
    projection_matrix,
)

__all__ = [
    "DataSet",
    "ResidualStats",
    "LiftedBilinearModel",
    "collect_data",
    "assemble_matrices",
    "identify",
    "residuals",
    "fit_error_coefficients",
    "identify_model",
    "InfeasibleFitError",
]


class InfeasibleFitError(RuntimeError):
    """Error-envelope fit has no feasible coefficients (a residual at a
    snapshot where both the lifted state and the input vanish)."""


@dataclass
class DataSet:
    """Snapshots (x_j, xdot_j, u_j) with collection metadata.

    Derivatives are evaluated exactly from the generating dynamics at each
    grid point, not finite-differenced from samples.
    """

    states: np.ndarray   # (T, n)
    derivs: np.ndarray   # (T, n)
    inputs: np.ndarray   # (T, m)
    traj_ids: np.ndarray  # (T,)
    times: np.ndarray    # (T,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.states)
        if not (len(self.derivs) == len(self.inputs) == len(self.traj_ids)
                == len(self.times) == T):
            raise ValueError("snapshot arrays must have equal length")
        if T and not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.derivs))
                      and np.all(np.isfinite(self.inputs))):
            raise ValueError("snapshots must be finite")

    @property
    def n_snapshots(self) -> int:
        return len(self.states)

    def to_csv(self, path, metadata: Optional[dict] = None) -> None:
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        header = (["traj_id", "t"] + [f"x{i+1}" for i in range(n)]
                  + [f"xdot{i+1}" for i in range(n)] + [f"u{i+1}" for i in range(m)])
        with open(path, "w") as fh:
            for key, val in {**self.meta, **(metadata or {})}.items():
                fh.write(f"# {key}={val}\n")
            fh.write(",".join(header) + "\n")
            for j in range(self.n_snapshots):
                row = [float(self.times[j]), *self.states[j], *self.derivs[j],
                       *self.inputs[j]]
                fh.write(str(int(self.traj_ids[j])) + ","
                         + ",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "DataSet":
        meta = {}
        rows = []
        header = None
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition("=")
                    meta[key.strip()] = val
                    continue
                if header is None:
                    header = line.split(",")
                    continue
                rows.append([float(v) for v in line.split(",")])
        if header is None:
            raise ValueError(f"no header found in {path}")
        data = np.array(rows)
        n = sum(1 for h in header if h.startswith("x") and not h.startswith("xdot"))
        m = sum(1 for h in header if h.startswith("u"))
        return cls(
            states=data[:, 2:2 + n],
            derivs=data[:, 2 + n:2 + 2 * n],
            inputs=data[:, 2 + 2 * n:2 + 2 * n + m],
            traj_ids=data[:, 0].astype(int),
            times=data[:, 1],
            meta=meta,
        )


@dataclass(frozen=True)
class ResidualStats:
    max: float
    mean: float
    rms: float


@dataclass
class LiftedBilinearModel:
    """Identified lifted dynamics zdot = A z + B0 u + sum_i u_i B_i z with a
    proportional error envelope ||r|| <= c1 ||z|| + c2 ||u||."""

    basis: DictionaryBasis
    a: np.ndarray                 # (N, N)
    b0: np.ndarray                # (N, m)
    b_list: tuple[np.ndarray, ...]  # m matrices, each (N, N)
    c_sel: np.ndarray             # (n, N) state selector
    c1: float
    c2: float
    lipschitz: LipschitzEstimate
    residual_stats: ResidualStats
    meta: dict = field(default_factory=dict)

    @property
    def lifted_dim(self) -> int:
        return self.a.shape[0]

    @property
    def input_dim(self) -> int:
        return self.b0.shape[1]

    def to_json(self, path) -> None:
        payload = {
            "basis": self.basis.descriptor(),
            "a": self.a.tolist(),
            "b0": self.b0.tolist(),
            "b_list": [b.tolist() for b in self.b_list],
            "c_sel": self.c_sel.tolist(),
            "c1": self.c1,
            "c2": self.c2,
            "lipschitz": {
                "value": self.lipschitz.value,
                "region": [list(iv) for iv in self.lipschitz.region],
                "grid_resolution": self.lipschitz.grid_resolution,
            },
            "residual_stats": {
                "max": self.residual_stats.max,
                "mean": self.residual_stats.mean,
                "rms": self.residual_stats.rms,
            },
            "meta": self.meta,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "LiftedBilinearModel":
        with open(path) as fh:
            payload = json.load(fh)
        lip = payload["lipschitz"]
        rs = payload["residual_stats"]
        return cls(
            basis=DictionaryBasis.from_descriptor(payload["basis"]),
            a=np.array(payload["a"]),
            b0=np.array(payload["b0"]),
            b_list=tuple(np.array(b) for b in payload["b_list"]),
            c_sel=np.array(payload["c_sel"]),
            c1=float(payload["c1"]),
            c2=float(payload["c2"]),
            lipschitz=LipschitzEstimate(
                value=float(lip["value"]),
                region=tuple(tuple(iv) for iv in lip["region"]),
                grid_resolution=int(lip["grid_resolution"]),
            ),
            residual_stats=ResidualStats(max=rs["max"], mean=rs["mean"], rms=rs["rms"]),
            meta=payload.get("meta", {}),
        )


# ---------------------------------------------------------------------------
# Data collection
# ---------------------------------------------------------------------------

def collect_data(
    system: ControlAffineSystem,
    n_traj: int,
    t_len: float,
    step: float,
    seed: int,
    u_max: float = 2.0,
    hold: float = 0.1,
    init_sampler: Optional[Callable[[np.random.Generator], np.ndarray]] = None,
    init_region: tuple[tuple[float, float], ...] = ((-1.0, 1.0), (-1.0, 1.0)),
    guard: float = 1e6,
) -> DataSet:
    """Integrate excited trajectories and record exact (x, xdot, u) snapshots.

    Excitation is piecewise constant, resampled uniformly from
    [-u_max, u_max]^m every `hold` seconds. Each trajectory draws from its own
    RNG stream derived from the master seed, so the result is independent of
    collection order. A diverged trajectory is resampled once from a reserved
    stream; a second divergence is an error.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if step <= 0 or t_len < step:
        raise ValueError("require step > 0 and t_len >= step")
    n, m = system.state_dim, system.input_dim
    if init_sampler is None:
        if len(init_region) != n:
            raise ValueError("init_region must give one interval per state")
        lo = np.array([iv[0] for iv in init_region])
        hi = np.array([iv[1] for iv in init_region])
        init_sampler = lambda rng: rng.uniform(lo, hi)

    streams = np.random.SeedSequence(seed).spawn(2 * n_traj)
    n_steps = int(round(t_len / step))
    n_pieces = int(np.floor(n_steps * step / hold)) + 1

    all_states, all_derivs, all_inputs, all_ids, all_times = [], [], [], [], []
    for i in range(n_traj):
        for attempt in range(2):
            rng = np.random.default_rng(streams[i + attempt * n_traj])
            x0 = np.asarray(init_sampler(rng), dtype=float)
            pieces = rng.uniform(-u_max, u_max, size=(n_pieces, m))
            result = _run_excited(system, x0, pieces, hold, step, n_steps, guard)
            if result is not None:
                break
        else:
            raise DivergenceError(
                f"trajectory {i} diverged twice during data collection",
                trajectory=None)
        xs, dxs, us, ts = result
        all_states.append(xs)
        all_derivs.append(dxs)
        all_inputs.append(us)
        all_times.append(ts)
        all_ids.append(np.full(len(ts), i))

    meta = {
        "n_traj": n_traj, "t_len": t_len, "step": step, "seed": seed,
        "u_max": u_max, "hold": hold,
        "excitation": f"piecewise-constant uniform [-{u_max},{u_max}] held {hold}s",
    }
    return DataSet(
        states=np.concatenate(all_states),
        derivs=np.concatenate(all_derivs),
        inputs=np.concatenate(all_inputs),
        traj_ids=np.concatenate(all_ids),
        times=np.concatenate(all_times),
        meta=meta,
    )


def _run_excited(system, x0, pieces, hold, step, n_steps, guard):
    """One excited rollout; returns None on divergence."""
    x = x0.copy()
    xs, dxs, us, ts = [], [], [], []
    for k in range(n_steps + 1):
        t = k * step
        u = pieces[min(int(t / hold + 1e-9), len(pieces) - 1)]
        xs.append(x.copy())
        dxs.append(system.xdot(x, u))
        us.append(u.copy())
        ts.append(t)
        if k < n_steps:
            x = _rk4_step(lambda s: system.xdot(s, u), x, step)
            if not np.all(np.isfinite(x)) or np.linalg.norm(x) > guard:
                return None
    return np.array(xs), np.array(dxs), np.array(us), np.array(ts)


# ---------------------------------------------------------------------------
# Identification
# ---------------------------------------------------------------------------

def assemble_matrices(data: DataSet, basis: DictionaryBasis) -> tuple[np.ndarray, np.ndarray]:
    """Build the stacked regressor W0 and derivative matrix Z1.

    Columns of W0 stack [z_j; u_j; u_j^1 z_j; ...; u_j^m z_j]; columns of Z1
    are the lifted derivatives dPsi/dx(x_j) @ xdot_j. Shapes:
    W0 is (N + m + m N, T), Z1 is (N, T).
    """
    if data.n_snapshots == 0:
        raise ValueError("empty dataset")
    if data.states.shape[1] != basis.state_dim:
        raise ValueError("dataset state dimension does not match basis")
    z0 = lift_many(basis, data.states).T          # (N, T)
    u0 = data.inputs.T                            # (m, T)
    jac = jacobian_many(basis, data.states)       # (T, N, n)
    z1 = np.einsum("tij,tj->ti", jac, data.derivs).T  # (N, T)
    blocks = [z0, u0]
    for i in range(u0.shape[0]):
        blocks.append(u0[i] * z0)                 # bilinear regressor block
    return np.concatenate(blocks, axis=0), z1


def identify(
    w0: np.ndarray, z1: np.ndarray, rcond: float = 1e-10
) -> tuple[np.ndarray, np.ndarray, tuple[np.ndarray, ...]]:
    """Least-squares fit [A B0 B1 ... Bm] = Z1 pinv(W0), partitioned.

    The pseudoinverse truncates singular values below rcond * sigma_max.
    Rank deficiency of W0 below its row count is a warning, not an error:
    the fit proceeds on the attained rank (minimum-norm solution).
    """
    w0 = np.asarray(w0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    if w0.ndim != 2 or w0.shape[1] < 1:
        raise ValueError("W0 must have at least one column")
    N = z1.shape[0]
    rows = w0.shape[0]
    m, rem = divmod(rows - N, N + 1)
    if rem != 0 or m < 0:
        raise ValueError(f"W0 row count {rows} incompatible with lifted dim {N}")

    sing = np.linalg.svd(w0, compute_uv=False)
    rank = int(np.sum(sing > rcond * sing[0])) if sing.size else 0
    if rank < rows:
        warnings.warn(
            f"regressor rank {rank} < {rows}: excitation does not span all "
            "blocks; identification uses the minimum-norm solution",
            stacklevel=2)
    stacked = z1 @ np.linalg.pinv(w0, rcond=rcond)
    a = stacked[:, :N]
    b0 = stacked[:, N:N + m]
    b_list = tuple(stacked[:, N + m + i * N:N + m + (i + 1) * N] for i in range(m))
    return a, b0, b_list


def _stacked(a, b0, b_list) -> np.ndarray:
    return np.concatenate([a, b0, *b_list], axis=1)


def residuals(model: LiftedBilinearModel, data: DataSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-snapshot fit residuals R = Z1 - [A B0 B..] W0 and their column norms."""
    w0, z1 = assemble_matrices(data, model.basis)
    r = z1 - _stacked(model.a, model.b0, model.b_list) @ w0
    return r, np.linalg.norm(r, axis=0)


def fit_error_coefficients(
    residual_norms: np.ndarray,
    state_norms: np.ndarray,
    input_norms: np.ndarray,
    beta: float = 1.0,
) -> tuple[float, float]:
    """Smallest envelope coefficients with r_j <= c1 z_j + c2 u_j for all j.

    Minimizes c1 + beta * c2 over the feasible polyhedron by enumerating its
    candidate vertices (pairwise constraint intersections plus axis
    intercepts) exactly; ties break toward smaller c2. Infeasible only when
    some residual is positive at a snapshot with z_j = u_j = 0.
    """
    r = np.asarray(residual_norms, dtype=float)
    z = np.asarray(state_norms, dtype=float)
    u = np.asarray(input_norms, dtype=float)
    if not (len(r) == len(z) == len(u)):
        raise ValueError("norm sequences must have equal length")
    if np.any(r < 0) or np.any(z < 0) or np.any(u < 0):
        raise ValueError("norms must be nonnegative")
    if beta <= 0:
        raise ValueError("beta must be positive")

    bad = (r > 0) & (z == 0) & (u == 0)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise InfeasibleFitError(
            f"snapshot {j} has residual {r[j]:.3e} with zero state and input norms")

    active = r > 0
    if not np.any(active):
        return 0.0, 0.0
    r, z, u = r[active], z[active], u[active]

    # Normalized constraint j reads zh_j c1 + uh_j c2 >= 1; a constraint with
    # componentwise-smaller (zh, uh) implies every one it dominates, so only
    # the Pareto-minimal normalized constraints can be active at the optimum.
    zh, uh = z / r, u / r
    order = np.lexsort((uh, zh))
    keep = []
    best_uh = np.inf
    for idx in order:
        if uh[idx] < best_uh:
            keep.append(idx)
            best_uh = uh[idx]
    zh, uh = zh[np.array(keep)], uh[np.array(keep)]

    # candidate vertices: axis intercepts plus pairwise intersections of the
    # surviving constraint boundaries
    candidates: list[tuple[float, float]] = []
    with np.errstate(divide="ignore"):
        if np.all(uh > 0):
            candidates.append((0.0, float((1.0 / uh).max())))
        if np.all(zh > 0):
            candidates.append((float((1.0 / zh).max()), 0.0))
    k = len(zh)
    for i in range(k):
        for j in range(i + 1, k):
            det = zh[i] * uh[j] - zh[j] * uh[i]
            if abs(det) < 1e-14 * max(1.0, abs(zh[i] * uh[j]), abs(zh[j] * uh[i])):
                continue
            c1 = (uh[j] - uh[i]) / det
            c2 = (zh[i] - zh[j]) / det
            if c1 >= 0 and c2 >= 0:
                candidates.append((float(c1), float(c2)))

    best = None
    for c1, c2 in candidates:
        if not (np.isfinite(c1) and np.isfinite(c2)):
            continue
        if np.any(c1 * z + c2 * u < r - 1e-12):
            continue
        key = (c1 + beta * c2, c2)
        if best is None or key < best[0]:
            best = (key, (c1, c2))
    if best is None:
        raise InfeasibleFitError("no feasible vertex found")
    return best[1]


# ---------------------------------------------------------------------------
# End-to-end identification
# ---------------------------------------------------------------------------

def identify_model(
    data: DataSet,
    basis: DictionaryBasis,
    lipschitz_region: tuple[tuple[float, float], ...] = ((-1.0, 1.0), (-1.0, 1.0)),
    lipschitz_resolution: int = 201,
    beta: float = 1.0,
    rcond: float = 1e-10,
    meta: Optional[dict] = None,
) -> LiftedBilinearModel:
    """Full identification: assemble, fit, residuals, envelope, Lipschitz."""
    w0, z1 = assemble_matrices(data, basis)
    a, b0, b_list = identify(w0, z1, rcond=rcond)
    res = z1 - _stacked(a, b0, b_list) @ w0
    res_norms = np.linalg.norm(res, axis=0)
    N = basis.lifted_dim
    c1, c2 = fit_error_coefficients(
        res_norms,
        np.linalg.norm(w0[:N], axis=0),
        np.linalg.norm(data.inputs, axis=1),
        beta=beta,
    )
    stats = ResidualStats(
        max=float(res_norms.max()),
        mean=float(res_norms.mean()),
        rms=float(np.sqrt(np.mean(res_norms ** 2))),
    )
    lip = lipschitz_constant(basis, lipschitz_region, lipschitz_resolution)
    return LiftedBilinearModel(
        basis=basis, a=a, b0=b0, b_list=b_list,
        c_sel=projection_matrix(basis),
        c1=c1, c2=c2, lipschitz=lip, residual_stats=stats,
        meta=dict(meta or {}),
    )
