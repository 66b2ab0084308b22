"""Monomial dictionary lifting: basis construction, evaluation, Jacobians,
state-recovery projection, and Lipschitz-constant estimation over a box."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DictionaryBasis",
    "LipschitzEstimate",
    "build_monomial_basis",
    "lift",
    "lift_many",
    "jacobian",
    "jacobian_many",
    "projection_matrix",
    "lipschitz_constant",
]


@dataclass(frozen=True)
class DictionaryBasis:
    """Monomial dictionary of all multi-indices with 1 <= |alpha| <= max_degree.

    Terms are ordered graded-lexicographically (ascending total degree, then
    lexicographic in the variable indices), which fixes matrix layouts across
    runs. The constant term is excluded so the lifted origin is the origin,
    and all first-order monomials are present so the state is recoverable by
    a selector matrix.
    """

    state_dim: int
    max_degree: int
    terms: tuple[tuple[int, ...], ...]
    # exponent table cached as an array; derived from terms, excluded from eq
    _exponents: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError(f"state_dim must be >= 1, got {self.state_dim}")
        if self.max_degree < 1:
            raise ValueError(f"max_degree must be >= 1, got {self.max_degree}")
        exps = np.array(self.terms, dtype=np.int64).reshape(len(self.terms), self.state_dim)
        if exps.min() < 0 or any(e.sum() < 1 or e.sum() > self.max_degree for e in exps):
            raise ValueError("terms must have 1 <= |alpha| <= max_degree")
        object.__setattr__(self, "_exponents", exps)

    @property
    def lifted_dim(self) -> int:
        return len(self.terms)

    @property
    def exponents(self) -> np.ndarray:
        """Exponent table, shape (lifted_dim, state_dim)."""
        return self._exponents

    def descriptor(self) -> dict:
        """JSON-ready description; round-trips through from_descriptor."""
        return {
            "state_dim": self.state_dim,
            "max_degree": self.max_degree,
            "terms": [list(t) for t in self.terms],
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "DictionaryBasis":
        terms = tuple(tuple(int(e) for e in t) for t in d["terms"])
        return cls(int(d["state_dim"]), int(d["max_degree"]), terms)


@dataclass(frozen=True)
class LipschitzEstimate:
    """Grid maximum of the lifting Jacobian's spectral norm over a box."""

    value: float
    region: tuple[tuple[float, float], ...]
    grid_resolution: int

    def contains(self, x: np.ndarray) -> bool:
        return all(lo <= xi <= hi for xi, (lo, hi) in zip(x, self.region))


def build_monomial_basis(state_dim: int, max_degree: int) -> DictionaryBasis:
    """All monomials of total degree 1..max_degree in graded-lex order."""
    if state_dim < 1:
        raise ValueError(f"state_dim must be >= 1, got {state_dim}")
    if max_degree < 1:
        raise ValueError(f"max_degree must be >= 1, got {max_degree}")
    terms = []
    for degree in range(1, max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(state_dim), degree):
            alpha = [0] * state_dim
            for i in combo:
                alpha[i] += 1
            terms.append(tuple(alpha))
    return DictionaryBasis(state_dim, max_degree, tuple(terms))


def _check_state(basis: DictionaryBasis, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (basis.state_dim,):
        raise ValueError(f"state must have shape ({basis.state_dim},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state components must be finite")
    return x


def lift(basis: DictionaryBasis, x: np.ndarray) -> np.ndarray:
    """Evaluate the dictionary: z_k = prod_i x_i ** alpha_ki."""
    x = _check_state(basis, x)
    return np.prod(x ** basis.exponents, axis=1)


def lift_many(basis: DictionaryBasis, xs: np.ndarray) -> np.ndarray:
    """Vectorized lift of a batch of states, shape (T, n) -> (T, N)."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[1] != basis.state_dim:
        raise ValueError(f"expected shape (T, {basis.state_dim}), got {xs.shape}")
    return np.prod(xs[:, None, :] ** basis.exponents[None, :, :], axis=2)


def jacobian(basis: DictionaryBasis, x: np.ndarray) -> np.ndarray:
    """Analytic Jacobian d(lift)/dx, shape (lifted_dim, state_dim)."""
    x = _check_state(basis, x)
    return jacobian_many(basis, x[None, :])[0]


def jacobian_many(basis: DictionaryBasis, xs: np.ndarray) -> np.ndarray:
    """Batch Jacobians, shape (T, n) -> (T, N, n)."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[1] != basis.state_dim:
        raise ValueError(f"expected shape (T, {basis.state_dim}), got {xs.shape}")
    exps = basis.exponents
    cols = []
    for i in range(basis.state_dim):
        # d/dx_i of x**alpha = alpha_i * x**(alpha - e_i); the alpha_i factor
        # zeroes terms where the clipped exponent would be wrong
        shifted = exps.copy()
        shifted[:, i] = np.maximum(shifted[:, i] - 1, 0)
        mono = np.prod(xs[:, None, :] ** shifted[None, :, :], axis=2)
        cols.append(exps[:, i] * mono)
    return np.stack(cols, axis=2)


def projection_matrix(basis: DictionaryBasis) -> np.ndarray:
    """0/1 selector C with C @ lift(basis, x) == x exactly."""
    n, N = basis.state_dim, basis.lifted_dim
    c = np.zeros((n, N))
    for k, alpha in enumerate(basis.terms):
        if sum(alpha) == 1:
            c[alpha.index(1), k] = 1.0
    # basis invariant guarantees every unit multi-index is present
    assert np.array_equal(c.sum(axis=1), np.ones(n))
    return c


def lipschitz_constant(
    basis: DictionaryBasis,
    region: tuple[tuple[float, float], ...],
    grid_resolution: int = 201,
) -> LipschitzEstimate:
    """Max spectral norm of the lifting Jacobian over a uniform grid.

    Deterministic for fixed inputs, monotone under grid refinement and region
    enlargement; conservative only up to the grid spacing, so use a fine grid.
    """
    region = tuple((float(lo), float(hi)) for lo, hi in region)
    if len(region) != basis.state_dim:
        raise ValueError(f"region must have {basis.state_dim} intervals")
    if any(hi < lo for lo, hi in region):
        raise ValueError("empty region")
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be >= 2")

    axes = [np.linspace(lo, hi, grid_resolution) for lo, hi in region]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)

    value = 0.0
    # chunked so the (T, N, n) batch stays within a few MB
    chunk = max(1, 2_000_000 // (basis.lifted_dim * basis.state_dim))
    for start in range(0, len(points), chunk):
        jac = jacobian_many(basis, points[start : start + chunk])
        sigma = np.linalg.svd(jac, compute_uv=False)[:, 0]
        value = max(value, float(sigma.max()))
    return LipschitzEstimate(value=value, region=region, grid_resolution=grid_resolution)
