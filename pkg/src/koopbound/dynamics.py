"""Control-affine plants, fixed-step closed-loop integration, and quadratic
running costs. Includes the built-in two-state polynomial benchmark plant
whose optimal value function and controller are known in closed form."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ControlAffineSystem",
    "Trajectory",
    "OcpWeights",
    "CostBreakdown",
    "DivergenceError",
    "benchmark_system",
    "analytic_value",
    "analytic_value_gradient",
    "analytic_controller",
    "hjb_residual",
    "integrate",
    "quadratic_cost",
    "linearize",
    "make_weights",
]


class DivergenceError(RuntimeError):
    """Raised when integration hits a non-finite state; carries the partial
    trajectory in .trajectory."""

    def __init__(self, message: str, trajectory: "Trajectory"):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class ControlAffineSystem:
    """Plant xdot = f(x) + sum_i g_i(x) u_i with f(0) = 0."""

    state_dim: int
    input_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_fields: tuple[Callable[[np.ndarray], np.ndarray], ...]

    def __post_init__(self):
        if len(self.input_fields) != self.input_dim:
            raise ValueError("one input field per input channel required")
        f0 = np.asarray(self.drift(np.zeros(self.state_dim)), dtype=float)
        if not np.allclose(f0, 0.0, atol=1e-12):
            raise ValueError("origin must be an equilibrium of the drift")

    def g_matrix(self, x: np.ndarray) -> np.ndarray:
        """Stack the input fields as columns, shape (n, m)."""
        return np.stack([np.asarray(g(x), dtype=float) for g in self.input_fields], axis=1)

    def xdot(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        dx = np.asarray(self.drift(x), dtype=float).copy()
        for ui, g in zip(u, self.input_fields):
            dx += ui * np.asarray(g(x), dtype=float)
        return dx


@dataclass
class Trajectory:
    """Sampled closed-loop run: aligned time/state/input/cost arrays."""

    times: np.ndarray        # (T,), starts at 0, strictly increasing
    states: np.ndarray       # (T, n)
    inputs: np.ndarray       # (T, m)
    running_cost: np.ndarray  # (T,), 0.5 (x'Qbar x + u'R u) samples
    diverged: bool = False
    settled: bool = False

    def __post_init__(self):
        T = len(self.times)
        if not (len(self.states) == len(self.inputs) == len(self.running_cost) == T):
            raise ValueError("trajectory arrays must have equal length")
        if T and self.times[0] != 0.0:
            raise ValueError("trajectory must start at t = 0")

    def to_csv(self, path, metadata: Optional[dict] = None) -> None:
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        header = ["t"] + [f"x{i+1}" for i in range(n)] + [f"u{i+1}" for i in range(m)]
        header.append("running_cost")
        with open(path, "w") as fh:
            for key, val in (metadata or {}).items():
                fh.write(f"# {key}={val}\n")
            fh.write(",".join(header) + "\n")
            for k in range(len(self.times)):
                row = [self.times[k], *self.states[k], *self.inputs[k], self.running_cost[k]]
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


@dataclass(frozen=True)
class OcpWeights:
    """Quadratic cost weights and their lifted counterpart Q = C' Qbar C."""

    qbar: np.ndarray
    r: np.ndarray
    lifted_q: np.ndarray
    lambda_min_qbar: float
    lambda_min_r: float


def make_weights(qbar: np.ndarray, r: np.ndarray, projection: np.ndarray) -> OcpWeights:
    """Validate Qbar, R (symmetric positive definite) and lift the state cost."""
    qbar = np.asarray(qbar, dtype=float)
    r = np.asarray(r, dtype=float)
    for name, mat in (("Qbar", qbar), ("R", r)):
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"{name} must be square")
        if np.abs(mat - mat.T).max() > 1e-12:
            raise ValueError(f"{name} must be symmetric within 1e-12")
    lam_q = float(np.linalg.eigvalsh(qbar).min())
    lam_r = float(np.linalg.eigvalsh(r).min())
    if lam_q <= 0 or lam_r <= 0:
        raise ValueError("Qbar and R must be positive definite")
    lifted_q = projection.T @ qbar @ projection
    lifted_q = 0.5 * (lifted_q + lifted_q.T)
    return OcpWeights(qbar=qbar, r=r, lifted_q=lifted_q,
                      lambda_min_qbar=lam_q, lambda_min_r=lam_r)


# ---------------------------------------------------------------------------
# Built-in benchmark plant with known optimal solution
# ---------------------------------------------------------------------------

def _benchmark_drift(x: np.ndarray) -> np.ndarray:
    x1, x2 = x
    return np.array([-x1 + x2, -0.5 * (x1 + x2) + 0.5 * x1 * x1 * x2])


def _benchmark_g1(x: np.ndarray) -> np.ndarray:
    return np.array([0.0, x[0]])


def benchmark_system() -> ControlAffineSystem:
    """Two-state polynomial plant with a closed-form optimal value function
    (see analytic_value / analytic_controller) under Qbar = I, R = 1."""
    return ControlAffineSystem(
        state_dim=2, input_dim=1,
        drift=_benchmark_drift, input_fields=(_benchmark_g1,),
    )


def analytic_value(x: np.ndarray) -> float:
    """Optimal value for the benchmark plant: x1^2/4 + x2^2/2."""
    x = np.asarray(x, dtype=float)
    if x.shape != (2,):
        raise ValueError(f"expected a 2-state vector, got shape {x.shape}")
    return float(0.25 * x[0] ** 2 + 0.5 * x[1] ** 2)


def analytic_value_gradient(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.array([0.5 * x[0], x[1]])


def analytic_controller(x: np.ndarray) -> np.ndarray:
    """Optimal feedback for the benchmark plant: u = -x1 x2."""
    x = np.asarray(x, dtype=float)
    if x.shape != (2,):
        raise ValueError(f"expected a 2-state vector, got shape {x.shape}")
    return np.array([-x[0] * x[1]])


# ---------------------------------------------------------------------------
# Optimality residual, integration, cost
# ---------------------------------------------------------------------------

def hjb_residual(
    system: ControlAffineSystem,
    weights: OcpWeights,
    value_fn: Callable[[np.ndarray], float],
    controller_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    grad_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    fd_step: float = 1e-6,
) -> float:
    """Pointwise optimality residual grad(V).(f + g u) + 0.5 x'Qbar x + 0.5 u'R u.

    Zero everywhere iff (value_fn, controller_fn) solve the optimal control
    problem. The gradient is taken analytically when grad_fn is given,
    otherwise by central differences with step fd_step.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (system.state_dim,):
        raise ValueError(f"state must have shape ({system.state_dim},)")
    if grad_fn is not None:
        grad = np.asarray(grad_fn(x), dtype=float)
    else:
        grad = np.empty(system.state_dim)
        for i in range(system.state_dim):
            e = np.zeros(system.state_dim)
            e[i] = fd_step
            grad[i] = (value_fn(x + e) - value_fn(x - e)) / (2 * fd_step)
    u = np.atleast_1d(np.asarray(controller_fn(x), dtype=float))
    xdot = system.xdot(x, u)
    return float(grad @ xdot + 0.5 * x @ weights.qbar @ x + 0.5 * u @ weights.r @ u)


def _rk4_step(xdot: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    k1 = xdot(x)
    k2 = xdot(x + 0.5 * h * k1)
    k3 = xdot(x + 0.5 * h * k2)
    k4 = xdot(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    system: ControlAffineSystem,
    controller: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    horizon: float,
    step: float,
    weights: Optional[OcpWeights] = None,
    guard: float = 1e6,
    settle_tol: float = 0.0,
) -> Trajectory:
    """Classical RK4 with the input held constant across each step.

    Stops early with settled=True once ||x|| < settle_tol (if positive), or
    with diverged=True once ||x|| exceeds the guard. A non-finite state raises
    DivergenceError carrying the partial trajectory.
    """
    if step <= 0 or horizon < step:
        raise ValueError("require step > 0 and horizon >= step")
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.state_dim,):
        raise ValueError(f"x0 must have shape ({system.state_dim},)")

    n_steps = int(round(horizon / step))
    times = [0.0]
    states = [x.copy()]
    u = np.atleast_1d(np.asarray(controller(x), dtype=float))
    inputs = [u.copy()]
    costs = [_running_cost(x, u, weights)]
    diverged = False
    settled = False

    for k in range(n_steps):
        x = _rk4_step(lambda s: system.xdot(s, u), x, step)
        t = (k + 1) * step
        if not np.all(np.isfinite(x)):
            partial = _build_traj(times, states, inputs, costs, diverged=True)
            raise DivergenceError(f"non-finite state at t={t:.6g}", partial)
        u = np.atleast_1d(np.asarray(controller(x), dtype=float))
        times.append(t)
        states.append(x.copy())
        inputs.append(u.copy())
        costs.append(_running_cost(x, u, weights))
        norm = float(np.linalg.norm(x))
        if norm > guard:
            diverged = True
            break
        if settle_tol > 0 and norm < settle_tol:
            settled = True
            break
    return _build_traj(times, states, inputs, costs, diverged=diverged, settled=settled)


def _running_cost(x, u, weights: Optional[OcpWeights]) -> float:
    if weights is None:
        return 0.0
    return float(0.5 * (x @ weights.qbar @ x + u @ weights.r @ u))


def _build_traj(times, states, inputs, costs, diverged=False, settled=False) -> Trajectory:
    return Trajectory(
        times=np.array(times),
        states=np.array(states),
        inputs=np.array(inputs),
        running_cost=np.array(costs),
        diverged=diverged,
        settled=settled,
    )


@dataclass(frozen=True)
class CostBreakdown:
    """Truncated quadratic cost: trapezoidal quadrature plus a tail estimate."""

    total: float
    quadrature: float
    tail: float
    tail_fraction: float


def quadratic_cost(
    traj: Trajectory,
    weights: OcpWeights,
    tail_matrix: Optional[np.ndarray] = None,
) -> CostBreakdown:
    """Trapezoidal integral of the recorded running cost over the horizon.

    When tail_matrix P is given, the cost beyond the recorded horizon is
    estimated as 0.5 x(T)' P x(T) (cost-to-go of the linearized plant at the
    origin); tail_fraction reports its share of the total. Diverged
    trajectories cost infinity.
    """
    if len(traj.times) == 0:
        raise ValueError("empty trajectory")
    if traj.diverged:
        return CostBreakdown(total=np.inf, quadrature=np.inf, tail=0.0, tail_fraction=0.0)
    quad = float(np.trapezoid(traj.running_cost, traj.times))
    tail = 0.0
    if tail_matrix is not None:
        xT = traj.states[-1]
        tail = float(0.5 * xT @ tail_matrix @ xT)
    total = quad + tail
    frac = tail / total if total > 0 else 0.0
    return CostBreakdown(total=total, quadrature=quad, tail=tail, tail_fraction=frac)


def linearize(system: ControlAffineSystem, fd_step: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Jacobian linearization (A, B) at the origin by central differences."""
    n, m = system.state_dim, system.input_dim
    a = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = fd_step
        a[:, i] = (system.drift(e) - system.drift(-e)) / (2 * fd_step)
    b = system.g_matrix(np.zeros(n))
    return a, b
