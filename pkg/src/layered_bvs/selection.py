"""Sparsity-path model selection over a grid of spike variances."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, SelectionError
from .model import (
    Hyperparams,
    LayerDataset,
    LayerParameterState,
    fit_sequential,
    matrix_normal_loglik,
    ols_slab_scale,
)

BIC_VARIANTS = ("literal", "conventional")


def default_v0_grid(count: int = 40, start: float = 0.001, step: float = 0.001) -> np.ndarray:
    return start + step * np.arange(count)


def parse_v0_grid(spec: str) -> np.ndarray:
    """Parse ``start:step:count`` into a grid."""
    try:
        start, step, count = spec.split(":")
        grid = default_v0_grid(int(count), float(start), float(step))
    except ValueError:
        raise ConfigError(f"v0 grid must be start:step:count, got {spec!r}") from None
    validate_grid(grid)
    return grid


def validate_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigError("v0 grid must be a non-empty sequence")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ConfigError("v0 grid must be positive and strictly increasing")
    return grid


def threshold_zeta(w: np.ndarray) -> np.ndarray:
    """``zeta_hat = 1`` iff ``w > 0.5`` (0.5 itself maps to 0)."""
    return (np.asarray(w) > 0.5).astype(np.int8)


def selected_coefficients(data: LayerDataset, state: LayerParameterState) -> np.ndarray:
    """``B`` with the rows of non-selected (sequence, gene) pairs zeroed."""
    keep = threshold_zeta(state.w)[data.col_block].T.astype(bool)
    return np.where(keep, state.B, 0.0)


def compute_bic(
    states: Sequence[LayerParameterState],
    datasets: Sequence[LayerDataset],
    variant: str = "literal",
) -> float:
    """BIC summed over layers, scored with post-selection coefficients.

    ``literal``: ``sum_t -2 [K_t log n + loglik_t]``.
    ``conventional``: ``sum_t [K_t log n - 2 loglik_t]``.
    """
    if variant not in BIC_VARIANTS:
        raise ConfigError(f"unknown BIC variant {variant!r}")
    total = 0.0
    for st, data in zip(states, datasets):
        B = selected_coefficients(data, st)
        K = int(np.count_nonzero(B))
        ll = matrix_normal_loglik(data.Y, data.X, B, st.Delta)
        pen = K * np.log(data.n)
        total += -2.0 * (pen + ll) if variant == "literal" else pen - 2.0 * ll
    return float(total)


@dataclass
class GridPoint:
    v0: float
    states: list = field(repr=False)
    v1: tuple = ()
    bic: float = np.nan
    K: tuple = ()
    converged: bool = True
    error: Optional[str] = None

    def n_selected(self) -> int:
        return int(sum(threshold_zeta(s.w).sum() for s in self.states))


@dataclass
class SelectionResult:
    v0_grid: np.ndarray
    path: list = field(repr=False)
    chosen_index: int
    bic_variant: str = "literal"

    @property
    def chosen(self) -> GridPoint:
        return self.path[self.chosen_index]

    @property
    def chosen_v0(self) -> float:
        return float(self.v0_grid[self.chosen_index])

    @property
    def states(self) -> list:
        return self.chosen.states

    @property
    def w(self) -> list:
        return [s.w for s in self.states]

    @property
    def zeta(self) -> list:
        return [threshold_zeta(s.w) for s in self.states]

    def coefficients(self, datasets: Sequence[LayerDataset], original_scale: bool = True) -> list:
        out = []
        for data, st in zip(datasets, self.states):
            B = selected_coefficients(data, st)
            out.append(data.to_original_scale(B) if original_scale else B)
        return out

    @property
    def bic_path(self) -> np.ndarray:
        return np.array([gp.bic for gp in self.path])


def layer_slab_scales(datasets: Sequence[LayerDataset], v1: Optional[float]) -> tuple:
    if v1 is not None:
        return tuple(float(v1) for _ in datasets)
    return tuple(ols_slab_scale([d]) for d in datasets)


def _fit_grid_point(args) -> GridPoint:
    datasets, hp, v0, v1s, variant = args
    try:
        hps = [hp.with_(v0=float(v0), v1=v1) for v1 in v1s]
        states = fit_sequential(datasets, hps)
    except (NumericalError, ConfigError) as exc:
        return GridPoint(float(v0), [], v1s, np.nan, (), False, str(exc))
    conv = all(s.converged for s in states)
    K = tuple(int(np.count_nonzero(selected_coefficients(d, s))) for d, s in zip(datasets, states))
    try:
        bic = compute_bic(states, datasets, variant)
    except NumericalError as exc:
        return GridPoint(float(v0), states, v1s, np.nan, K, False, str(exc))
    return GridPoint(float(v0), states, v1s, bic, K, conv)


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None:
        return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
                   else (os.cpu_count() or 1))
    if threads < 1:
        raise ConfigError("threads must be at least 1")
    return int(threads)


def select_over_grid(
    datasets: Sequence[LayerDataset],
    hp: Hyperparams,
    v0_grid: Sequence[float],
    v1: Optional[float] = None,
    bic_variant: str = "literal",
    threads: int = 1,
) -> SelectionResult:
    """Fit every layer for each ``v0`` and pick the BIC minimizer.

    ``v1=None`` sets the slab scale per layer to the smallest power of ten above
    the largest absolute OLS coefficient. Unconverged grid points are excluded
    from the argmin; ties go to the smaller ``v0``.
    """
    grid = validate_grid(v0_grid)
    if bic_variant not in BIC_VARIANTS:
        raise ConfigError(f"unknown BIC variant {bic_variant!r}")
    v1s = layer_slab_scales(datasets, v1)
    if np.any(grid >= min(v1s)):
        raise ConfigError(f"all v0 must be below v1 = {min(v1s)}")
    jobs = [(list(datasets), hp, v0, v1s, bic_variant) for v0 in grid]
    threads = resolve_threads(threads)
    if threads == 1 or len(jobs) == 1:
        path = [_fit_grid_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as ex:
            path = list(ex.map(_fit_grid_point, jobs))
    usable = np.array([gp.converged and np.isfinite(gp.bic) for gp in path])
    if not usable.any():
        raise SelectionError("no v0 grid point produced a converged fit")
    bics = np.where(usable, [gp.bic for gp in path], np.inf)
    return SelectionResult(grid, path, int(np.argmin(bics)), bic_variant)
