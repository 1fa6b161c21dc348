"""Fisher-Rao geometry of densities on an interval via the square-root transform.

Densities live on a uniform grid; all integrals use the trapezoidal rule. Under the
square-root transform the density space becomes the positive orthant of the unit
Hilbert sphere, so distances, exponential/log maps and tangent PCA reduce to
spherical geometry with the discrete L2 inner product.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError

DEFAULT_GRID_SIZE = 512
MIN_GRID_SIZE = 16


class GeometryError(DataError):
    """Invalid input to a geometry operation."""


def trapezoid_weights(lo: float, hi: float, m: int) -> np.ndarray:
    """Quadrature weights of the trapezoidal rule on ``m`` uniform points."""
    h = (hi - lo) / (m - 1)
    w = np.full(m, h)
    w[0] = w[-1] = h / 2
    return w


@dataclass(frozen=True)
class Grid:
    lo: float
    hi: float
    m: int

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or self.hi <= self.lo:
            raise GeometryError(f"invalid grid interval [{self.lo}, {self.hi}]")
        if self.m < MIN_GRID_SIZE:
            raise GeometryError(f"grid needs at least {MIN_GRID_SIZE} points, got {self.m}")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.m)

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.lo, self.hi, self.m)


def _check_values(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise GeometryError("density values must be one-dimensional")
    if not np.all(np.isfinite(v)):
        raise GeometryError("density values must be finite")
    return v


@dataclass(frozen=True)
class GridDensity:
    """A probability density sampled on ``m`` uniform points of ``[lo, hi]``.

    Construction clips tiny negatives and renormalizes so the trapezoidal
    integral is one.
    """

    lo: float
    hi: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = _check_values(self.values)
        grid = Grid(float(self.lo), float(self.hi), v.size)
        if np.any(v < -1e-12 * max(1.0, np.abs(v).max())):
            raise GeometryError("density values must be non-negative")
        v = np.clip(v, 0.0, None)
        mass = float(grid.weights @ v)
        if not mass > 0:
            raise GeometryError("density has zero mass")
        object.__setattr__(self, "values", v / mass)

    @property
    def grid(self) -> Grid:
        return Grid(self.lo, self.hi, self.values.size)

    def integral(self) -> float:
        return float(self.grid.weights @ self.values)


@dataclass(frozen=True)
class SqrtDensity:
    """Square-root transformed density: a point on the unit sphere of L2.

    Values may carry tiny negatives produced by exponential maps; they are only
    clipped when converting back to a density.
    """

    lo: float
    hi: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = _check_values(self.values)
        Grid(float(self.lo), float(self.hi), v.size)
        object.__setattr__(self, "values", v)

    @property
    def grid(self) -> Grid:
        return Grid(self.lo, self.hi, self.values.size)

    def norm(self) -> float:
        return float(np.sqrt(self.grid.weights @ self.values**2))


@dataclass(frozen=True)
class TangentVector:
    base: SqrtDensity
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = _check_values(self.values)
        if v.size != self.base.values.size:
            raise GeometryError("tangent vector and base point have different grids")
        object.__setattr__(self, "values", v)

    @property
    def grid(self) -> Grid:
        return self.base.grid

    def norm(self) -> float:
        return float(np.sqrt(self.base.grid.weights @ self.values**2))


def _same_grid(a, b) -> Grid:
    ga, gb = a.grid, b.grid
    if ga != gb:
        raise GeometryError(f"grid mismatch: {ga} vs {gb}")
    return ga


def inner(a, b) -> float:
    """Discrete L2 inner product of two functions on a common grid."""
    grid = _same_grid(a, b)
    return float(grid.weights @ (a.values * b.values))


def to_srt(f: GridDensity) -> SqrtDensity:
    if not np.all(np.isfinite(f.values)):
        raise GeometryError("density values must be finite")
    h = np.sqrt(f.values)
    norm = np.sqrt(f.grid.weights @ h**2)
    return SqrtDensity(f.lo, f.hi, h / norm)


def from_srt(h: SqrtDensity) -> GridDensity:
    return GridDensity(h.lo, h.hi, np.clip(h.values, 0.0, None) ** 2)


def geodesic_distance(h1: SqrtDensity, h2: SqrtDensity) -> float:
    c = inner(h1, h2)
    if c > 0.9:
        # arccos loses half the digits near 1; the chord form keeps them.
        chord = np.sqrt(h1.grid.weights @ (h1.values - h2.values) ** 2)
        return float(2.0 * np.arcsin(min(1.0, chord / 2.0)))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def exp_map(base: SqrtDensity, v: TangentVector) -> SqrtDensity:
    if v.base.grid != base.grid:
        raise GeometryError("tangent vector is not based on the given grid")
    w = base.grid.weights
    out = _exp(base.values, v.values[None, :], w)[0]
    return SqrtDensity(base.lo, base.hi, out)


def log_map(base: SqrtDensity, target: SqrtDensity) -> TangentVector:
    _same_grid(base, target)
    w = base.grid.weights
    return TangentVector(base, _log(base.values, target.values[None, :], w)[0])


# Array-level kernels shared by the Karcher mean and PCA; rows are functions.

def _exp(base: np.ndarray, V: np.ndarray, w: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.maximum(V**2 @ w, 0.0))
    out = np.empty_like(V)
    small = norms < 1e-12
    out[small] = base
    nz = ~small
    if np.any(nz):
        nv = norms[nz][:, None]
        out[nz] = np.cos(nv) * base + np.sin(nv) * V[nz] / nv
        out[nz] /= np.sqrt((out[nz] ** 2) @ w)[:, None]
    return out


def _log(base: np.ndarray, H: np.ndarray, w: np.ndarray) -> np.ndarray:
    cos_t = np.clip(H @ (w * base), -1.0, 1.0)
    theta = np.arccos(cos_t)
    out = np.zeros_like(H)
    nz = theta >= 1e-12
    if np.any(nz):
        th = theta[nz][:, None]
        out[nz] = th / np.sin(th) * (H[nz] - base * cos_t[nz][:, None])
        # Remove the quadrature-level normal component so the result is tangent.
        out[nz] -= np.outer(out[nz] @ (w * base), base) / (base @ (w * base))
    return out


class KarcherResult(NamedTuple):
    mean: SqrtDensity
    converged: bool
    n_iter: int
    grad_norm: float


def _stack(sample: Sequence[SqrtDensity]) -> tuple[Grid, np.ndarray]:
    if len(sample) == 0:
        raise GeometryError("sample must be non-empty")
    grid = sample[0].grid
    for h in sample[1:]:
        if h.grid != grid:
            raise GeometryError("all densities must share a grid")
    return grid, np.vstack([h.values for h in sample])


def karcher_mean(
    sample: Sequence[SqrtDensity],
    eps1: float = 1e-6,
    eps2: float = 0.5,
    max_iter: int = 200,
) -> KarcherResult:
    """Intrinsic mean of SRT densities by tangent-space gradient descent.

    Starts from the extrinsic average projected back to the sphere. Returns the
    last iterate with ``converged=False`` if ``max_iter`` is exhausted.
    """
    if eps1 <= 0 or eps2 <= 0:
        raise GeometryError("eps1 and eps2 must be positive")
    grid, H = _stack(sample)
    w = grid.weights
    mean = H.mean(axis=0)
    mean /= np.sqrt(mean**2 @ w)
    grad = np.inf
    for it in range(1, max_iter + 1):
        ubar = _log(mean, H, w).mean(axis=0)
        grad = float(np.sqrt(ubar**2 @ w))
        if grad < eps1:
            return KarcherResult(SqrtDensity(grid.lo, grid.hi, mean), True, it, grad)
        mean = _exp(mean, eps2 * ubar[None, :], w)[0]
    return KarcherResult(SqrtDensity(grid.lo, grid.hi, mean), False, max_iter, grad)


@dataclass(frozen=True)
class PcaModel:
    """Tangent PCA at the Karcher mean.

    ``basis`` holds the retained directions as rows, orthonormal under the
    trapezoid-weighted inner product. ``all_eigenvalues`` keeps the full spectrum
    so explained-variance tables can be reported.
    """

    mean: SqrtDensity
    basis: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray
    all_eigenvalues: np.ndarray = field(repr=False)
    cum_var_target: float
    degenerate: bool = False
    karcher_converged: bool = True

    @property
    def r(self) -> int:
        return self.basis.shape[0]

    def explained_variance_ratio(self) -> np.ndarray:
        total = self.all_eigenvalues.sum()
        if total <= 0:
            return np.zeros_like(self.all_eigenvalues)
        return self.all_eigenvalues / total


def _fallback_direction(mean: np.ndarray, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Deterministic unit tangent direction used when the sample has no spread.
    v = (x - x.mean()) * mean
    v = v - (v @ (w * mean)) * mean
    return v / np.sqrt(v**2 @ w)


def fit_pca(
    sample: Sequence[SqrtDensity],
    cum_var_target: float = 0.99,
    eps1: float = 1e-6,
    eps2: float = 0.5,
    max_iter: int = 200,
) -> PcaModel:
    if len(sample) < 2:
        raise GeometryError("PCA needs at least two densities")
    if not 0 < cum_var_target <= 1:
        raise GeometryError("cum_var_target must lie in (0, 1]")
    grid, H = _stack(sample)
    w = grid.weights
    km = karcher_mean(sample, eps1, eps2, max_iter)
    mu = km.mean.values
    V = _log(mu, H, w)
    n = V.shape[0]
    sw = np.sqrt(w)
    # SVD of the weighted tangent data gives the eigenpairs of the weighted covariance.
    _, s, vt = np.linalg.svd(V * sw / np.sqrt(n - 1), full_matrices=False)
    eig = s**2
    total = eig.sum()
    if total <= 1e-24:
        basis = _fallback_direction(mu, grid.x, w)[None, :]
        return PcaModel(km.mean, basis, np.zeros(1), np.zeros_like(eig), cum_var_target,
                        degenerate=True, karcher_converged=km.converged)
    frac = np.cumsum(eig) / total
    r = int(np.searchsorted(frac, cum_var_target - 1e-12) + 1)
    r = min(r, int(np.sum(eig > 0)) or 1)
    basis = vt[:r] / sw
    # Sign rule: the largest-magnitude coordinate of each direction is positive.
    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(r), idx])
    basis = basis * signs[:, None]
    return PcaModel(km.mean, basis, eig[:r].copy(), eig, cum_var_target,
                    karcher_converged=km.converged)


def pc_scores(model: PcaModel, sample: Sequence[SqrtDensity]) -> np.ndarray:
    grid, H = _stack(sample)
    if grid != model.mean.grid:
        raise GeometryError("sample grid differs from the model grid")
    w = grid.weights
    V = _log(model.mean.values, H, w)
    if model.degenerate:
        return np.zeros((V.shape[0], 1))
    return (V * w) @ model.basis.T


def reconstruct(model: PcaModel, scores: np.ndarray) -> list[SqrtDensity]:
    """Map PC scores back to the sphere through the exponential map at the mean."""
    grid = model.mean.grid
    scores = np.atleast_2d(scores)
    V = scores @ model.basis
    H = _exp(model.mean.values, V, grid.weights)
    return [SqrtDensity(grid.lo, grid.hi, h) for h in H]
