"""Concentric shell decomposition of tumor voxels and shell-wise phenotypes.

Each subject's masked voxels are split into ``tau`` spherical shells of roughly
equal voxel count around the bounding-box center. Intensities in every
(shell, sequence) pair are summarized by a Gaussian KDE on a cohort-wide grid,
and tangent PCA of those densities yields the layer responses.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, DegenerateSampleError
from .geometry import (
    DEFAULT_GRID_SIZE,
    GridDensity,
    PcaModel,
    fit_pca,
    from_srt,
    pc_scores,
    to_srt,
)

CANONICAL_SEQUENCES = ("FLAIR", "T1", "T1Gd", "T2")
VOXEL_HEADER = ("x", "y", "z", "mask") + CANONICAL_SEQUENCES


@dataclass(frozen=True)
class VoxelGrid:
    """A masked multi-sequence voxel lattice.

    Parameters
    ----------
    mask : ndarray of bool, shape (X, Y, Z)
        Tumor membership.
    intensities : ndarray, shape (X, Y, Z, M)
        One channel per sequence; only masked voxels need to be finite.
    sequences : tuple of str
        Channel names, in the order of the last axis.
    """

    mask: np.ndarray = field(repr=False)
    intensities: np.ndarray = field(repr=False)
    sequences: tuple = CANONICAL_SEQUENCES

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        inten = np.asarray(self.intensities, dtype=float)
        if mask.ndim != 3:
            raise DataError("mask must be three-dimensional")
        if inten.shape != mask.shape + (len(self.sequences),):
            raise DataError(
                f"intensity array shape {inten.shape} does not match mask "
                f"{mask.shape} and {len(self.sequences)} sequences"
            )
        if not np.all(np.isfinite(inten[mask])):
            raise DataError("intensities must be finite on masked voxels")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "intensities", inten)
        object.__setattr__(self, "sequences", tuple(self.sequences))

    @property
    def dims(self) -> tuple:
        return self.mask.shape

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    def masked_indices(self) -> np.ndarray:
        """Index coordinates of masked voxels in C order, shape (N, 3)."""
        return np.argwhere(self.mask)

    def masked_intensities(self, sequence: str) -> np.ndarray:
        try:
            j = self.sequences.index(sequence)
        except ValueError:
            raise DataError(f"unknown sequence {sequence!r}") from None
        return self.intensities[..., j][self.mask]


@dataclass(frozen=True)
class ShellDecomposition:
    center: np.ndarray
    radii: np.ndarray
    assignment: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)

    @property
    def tau(self) -> int:
        return self.radii.size

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.tau + 1)[1:]


def bounding_box_center(grid: VoxelGrid) -> np.ndarray:
    idx = grid.masked_indices()
    if idx.shape[0] == 0:
        raise DataError("mask is empty")
    return (idx.min(axis=0) + idx.max(axis=0)) / 2.0


def decompose(grid: VoxelGrid, tau: int) -> ShellDecomposition:
    """Split masked voxels into ``tau`` shells by distance from the center.

    Shell ``t`` has outer radius equal to the distance of the ``ceil(t N / tau)``-th
    nearest voxel; voxels tied with a radius belong to the inner shell.
    """
    if int(tau) != tau or tau < 1:
        raise DataError(f"tau must be a positive integer, got {tau}")
    tau = int(tau)
    n = grid.n_masked
    if n < tau:
        raise DataError(f"{n} masked voxels cannot fill {tau} shells")
    center = bounding_box_center(grid)
    d = np.sqrt(((grid.masked_indices() - center) ** 2).sum(axis=1))
    ds = np.sort(d, kind="stable")
    ranks = (np.arange(1, tau + 1) * n + tau - 1) // tau
    radii = ds[ranks - 1]
    assignment = np.searchsorted(radii, d, side="left") + 1
    counts = np.bincount(assignment, minlength=tau + 1)[1:]
    if np.any(counts == 0):
        empty = [int(i) + 1 for i in np.flatnonzero(counts == 0)]
        raise DegenerateSampleError(
            f"distance ties leave shell(s) {empty} empty (counts {counts.tolist()})"
        )
    return ShellDecomposition(center, radii, assignment, d)


def silverman_bandwidth(values: np.ndarray) -> float:
    """Silverman's rule ``0.9 min(sd, IQR/1.34) n^(-1/5)``.

    Falls back to the standard deviation when the IQR vanishes but the sample
    is not constant.
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    if n < 2 or np.unique(x).size < 2:
        raise DegenerateSampleError("KDE needs at least two distinct values")
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    b = 0.9 * spread * n ** (-0.2)
    if not b > 0:
        raise DegenerateSampleError("KDE bandwidth is zero")
    return b


def gaussian_kde_grid(
    values: np.ndarray,
    lo: float,
    hi: float,
    m: int = DEFAULT_GRID_SIZE,
    bandwidth: Optional[float] = None,
) -> GridDensity:
    """Gaussian KDE of ``values`` evaluated on ``m`` points of ``[lo, hi]``."""
    x = np.sort(np.asarray(values, dtype=float))
    b = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not b > 0:
        raise DegenerateSampleError("KDE bandwidth must be positive")
    grid = np.linspace(lo, hi, m)
    dens = np.zeros(m)
    # Chunk over the sample to bound memory; sorting makes the sum order-invariant.
    for start in range(0, x.size, 4096):
        z = (grid[:, None] - x[None, start:start + 4096]) / b
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    dens /= x.size * b * np.sqrt(2 * np.pi)
    return GridDensity(lo, hi, dens)


def shell_intensities(
    grid: VoxelGrid, dec: ShellDecomposition, shell: int, sequence: str
) -> np.ndarray:
    if not 1 <= shell <= dec.tau:
        raise DataError(f"shell {shell} outside 1..{dec.tau}")
    return grid.masked_intensities(sequence)[dec.assignment == shell]


def kde_domain(samples: Sequence[np.ndarray]) -> tuple[float, float]:
    """Common evaluation interval ``[min - 3b, max + 3b]`` over a set of samples."""
    lo = min(float(np.min(s)) for s in samples)
    hi = max(float(np.max(s)) for s in samples)
    b = max(silverman_bandwidth(s) for s in samples)
    return lo - 3 * b, hi + 3 * b


def shell_kde(
    grid: VoxelGrid,
    dec: ShellDecomposition,
    shell: int,
    sequence: str,
    m: int = DEFAULT_GRID_SIZE,
    domain: Optional[tuple[float, float]] = None,
    bandwidth: Optional[float] = None,
) -> GridDensity:
    x = shell_intensities(grid, dec, shell, sequence)
    if domain is None:
        b = silverman_bandwidth(x) if bandwidth is None else bandwidth
        domain = (float(x.min()) - 3 * b, float(x.max()) + 3 * b)
    return gaussian_kde_grid(x, domain[0], domain[1], m, bandwidth)


@dataclass
class LayerResponses:
    """PC-score responses of one layer, blocked by sequence."""

    layer: int
    Y: np.ndarray
    sequences: tuple
    block_widths: tuple
    models: list = field(repr=False)
    domains: list = field(repr=False)

    @property
    def degenerate(self) -> tuple:
        return tuple(bool(mdl.degenerate) for mdl in self.models)

    def column_labels(self) -> list[str]:
        return [f"{s}:{j + 1}" for s, w in zip(self.sequences, self.block_widths)
                for j in range(w)]


def build_layer_responses(
    cohort: Sequence[VoxelGrid],
    tau: int,
    cum_var_target: float = 0.99,
    m: int = DEFAULT_GRID_SIZE,
    subject_ids: Optional[Sequence[str]] = None,
) -> list[LayerResponses]:
    """Shell KDEs -> tangent PCA -> per-layer PC-score matrices.

    Blocks are concatenated in the cohort's sequence order, which must be shared
    by all subjects.
    """
    if len(cohort) < 2:
        raise DataError("phenotype construction needs at least two subjects")
    ids = list(subject_ids) if subject_ids is not None else [str(i) for i in range(len(cohort))]
    sequences = cohort[0].sequences
    for sid, g in zip(ids, cohort):
        if g.sequences != sequences:
            raise DataError(f"subject {sid}: sequences {g.sequences} differ from {sequences}")
    decs = []
    for sid, g in zip(ids, cohort):
        try:
            decs.append(decompose(g, tau))
        except DataError as exc:
            raise type(exc)(f"subject {sid}: {exc}") from exc

    layers = []
    for t in range(1, tau + 1):
        blocks, models, domains = [], [], []
        for seq in sequences:
            samples = [shell_intensities(g, dec, t, seq) for g, dec in zip(cohort, decs)]
            for sid, s in zip(ids, samples):
                try:
                    silverman_bandwidth(s)
                except DegenerateSampleError as exc:
                    raise DegenerateSampleError(
                        f"subject {sid}, shell {t}, sequence {seq}: {exc}") from exc
            lo, hi = kde_domain(samples)
            srts = [to_srt(gaussian_kde_grid(s, lo, hi, m)) for s in samples]
            model = fit_pca(srts, cum_var_target)
            blocks.append(pc_scores(model, srts))
            models.append(model)
            domains.append((lo, hi))
        Y = np.hstack(blocks)
        layers.append(LayerResponses(
            t, Y, tuple(sequences), tuple(b.shape[1] for b in blocks), models, domains))
    return layers


def phenotype_sidecar(layers: Sequence[LayerResponses]) -> dict:
    """JSON-ready summary: block widths, Karcher means and explained variance."""
    out = []
    for lr in layers:
        blocks = []
        for seq, width, model, dom in zip(lr.sequences, lr.block_widths, lr.models, lr.domains):
            blocks.append({
                "sequence": seq,
                "width": int(width),
                "degenerate": bool(model.degenerate),
                "karcher_converged": bool(model.karcher_converged),
                "domain": [float(dom[0]), float(dom[1])],
                "eigenvalues": [float(v) for v in model.eigenvalues],
                "explained_variance_ratio": [float(v) for v in model.explained_variance_ratio()],
                "karcher_mean_density": [float(v) for v in from_srt(model.mean).values],
            })
        out.append({"layer": lr.layer, "p": int(sum(lr.block_widths)), "blocks": blocks})
    return {"layers": out}


# ---------------------------------------------------------------------------
# File I/O

def read_voxel_csv(path: str) -> VoxelGrid:
    """Read a subject voxel table with header ``x,y,z,mask,FLAIR,T1,T1Gd,T2``.

    Voxels absent from the file are treated as unmasked.
    """
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    header = tuple(c.strip() for c in rows[0])
    if header != VOXEL_HEADER:
        raise DataError(f"{path}: header {header} != {VOXEL_HEADER}")
    try:
        arr = np.array(rows[1:], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DataError(f"{path}: no voxel rows")
    xyz = arr[:, :3]
    if np.any(xyz != np.round(xyz)) or np.any(xyz < 0):
        raise DataError(f"{path}: voxel coordinates must be non-negative integers")
    xyz = xyz.astype(int)
    dims = tuple(int(v) + 1 for v in xyz.max(axis=0))
    mask = np.zeros(dims, dtype=bool)
    inten = np.full(dims + (len(CANONICAL_SEQUENCES),), np.nan)
    mask[tuple(xyz.T)] = arr[:, 3] > 0.5
    inten[tuple(xyz.T)] = arr[:, 4:]
    bad = np.flatnonzero((arr[:, 3] > 0.5) & ~np.all(np.isfinite(arr[:, 4:]), axis=1))
    if bad.size:
        raise DataError(f"{path}: non-finite intensity on masked row {int(bad[0]) + 2}")
    return VoxelGrid(mask, inten, CANONICAL_SEQUENCES)


def write_voxel_csv(grid: VoxelGrid, path: str) -> None:
    if grid.sequences != CANONICAL_SEQUENCES:
        raise DataError("voxel files use the canonical sequence order")
    idx = np.argwhere(np.ones(grid.dims, dtype=bool))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VOXEL_HEADER)
        for (i, j, k) in idx:
            vals = grid.intensities[i, j, k]
            m = int(grid.mask[i, j, k])
            w.writerow([i, j, k, m] + [repr(float(v)) if m else "0" for v in vals])


def read_manifest(path: str) -> list[tuple[str, str]]:
    """Read a cohort manifest: a JSON object (or list of single-key objects)
    mapping subject id to voxel file. Relative paths resolve against the manifest."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if isinstance(raw, Mapping):
        items = list(raw.items())
    elif isinstance(raw, list) and all(isinstance(e, Mapping) and len(e) == 1 for e in raw):
        items = [next(iter(e.items())) for e in raw]
    else:
        raise DataError(f"{path}: manifest must map subject ids to files")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for sid, f in items:
        if not isinstance(f, str):
            raise DataError(f"{path}: subject {sid} has no file path")
        out.append((str(sid), f if os.path.isabs(f) else os.path.join(base, f)))
    if len({s for s, _ in out}) != len(out):
        raise DataError(f"{path}: duplicate subject ids")
    return out
