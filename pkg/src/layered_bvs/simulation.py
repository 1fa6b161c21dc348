"""Simulation designs, metrics and the replication harness.

Two data-generating designs are provided. ``case1`` draws every layer from the
model itself (with prior-mean propagation across layers); ``case2`` uses fixed
nested blocks of double-exponential coefficients. Estimation scenarios toggle
layer propagation of the prior mean and the predictor-correlation prior:

=========  ====================  ==============
scenario   prior mean            Lambda
=========  ====================  ==============
A          propagated            cor(X)
B          zero                  cor(X)
C          propagated            identity
D          zero                  identity
=========  ====================  ==============
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import invwishart

from .errors import ConfigError, LayeredBVSError
from .model import Hyperparams, LayerDataset, make_layer_dataset
from .selection import SelectionResult, resolve_threads, select_over_grid

IW_CONVENTIONS = ("dawid", "standard")
SCENARIOS = {
    "A": {"propagate": True, "lambda_cor": True},
    "B": {"propagate": False, "lambda_cor": True},
    "C": {"propagate": True, "lambda_cor": False},
    "D": {"propagate": False, "lambda_cor": False},
}
SIGMA_X_KINDS = ("identity", "block2x2", "block4x4")
CASE2_BLOCKS = ((15, 9), (10, 6), (5, 3))


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator for a seed or a ``SeedSequence``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def replication_seeds(master_seed: int, reps: int) -> list:
    return np.random.SeedSequence(master_seed).spawn(reps)


def gen_sigma_x(kind: str, g: int = 20) -> np.ndarray:
    """Predictor covariance designs.

    ``block2x2``: the first 10 predictors have variance 10 and covariance 9, the
    rest are independent with unit variance. ``block4x4``: four blocks of
    ``g/4`` predictors with within-block correlation 0.8; the first three
    blocks are cross-correlated at 0.5 and the last block is independent of
    them.
    """
    if kind == "identity":
        return np.eye(g)
    if kind == "block2x2":
        if g < 10:
            raise ConfigError("block2x2 design needs g >= 10")
        S = np.eye(g)
        S[:10, :10] = 9.0
        S[np.arange(10), np.arange(10)] = 10.0
        return S
    if kind == "block4x4":
        if g % 4:
            raise ConfigError("block4x4 design needs g divisible by 4")
        b = g // 4
        S = np.zeros((g, g))
        S[: 3 * b, : 3 * b] = 0.5
        for i in range(4):
            S[i * b:(i + 1) * b, i * b:(i + 1) * b] = 0.8
        np.fill_diagonal(S, 1.0)
        return S
    raise ConfigError(f"unknown Sigma_x kind {kind!r}; choose from {SIGMA_X_KINDS}")


@dataclass(frozen=True)
class SimDesign:
    """A simulation design.

    Generator hyperparameters for ``case1`` default to ``delta = p``,
    ``a1 = a2 = 5``, ``v0 = 0.01``, ``v1 = 1`` and ``alpha = 0.8``.
    """

    case: str = "case1"
    n: int = 100
    g: int = 20
    tau: int = 3
    p_per_block: int = 3
    n_blocks: int = 4
    sigma_x: str = "identity"
    sigma2: float = 1.0
    theta: float = 1.0
    gen_delta: Optional[float] = None
    gen_a1: float = 5.0
    gen_a2: float = 5.0
    gen_v0: float = 0.01
    gen_v1: float = 1.0
    gen_alpha: float = 0.8
    blocks: tuple = CASE2_BLOCKS
    iw_convention: str = "dawid"

    def __post_init__(self):
        if self.case not in ("case1", "case2"):
            raise ConfigError(f"unknown case {self.case!r}")
        if self.sigma_x not in SIGMA_X_KINDS:
            raise ConfigError(f"unknown Sigma_x kind {self.sigma_x!r}")
        if min(self.n, self.g, self.tau, self.p_per_block, self.n_blocks) < 1:
            raise ConfigError("design dimensions must be positive")
        if self.iw_convention not in IW_CONVENTIONS:
            raise ConfigError(f"iw_convention must be one of {IW_CONVENTIONS}")
        if self.sigma2 <= 0 or self.theta <= 0:
            raise ConfigError("sigma2 and theta must be positive")
        if self.case == "case2":
            if len(self.blocks) != self.tau:
                raise ConfigError("case2 needs one (rows, cols) block per layer")
            for r, s in self.blocks:
                if not (0 <= r <= self.g and 0 <= s <= self.p and s % self.p_per_block == 0):
                    raise ConfigError(f"invalid case2 block ({r}, {s})")

    @property
    def p(self) -> int:
        return self.p_per_block * self.n_blocks

    def iw_df(self) -> float:
        """Degrees of freedom passed to the standard inverse-Wishart sampler.

        ``"dawid"`` reads ``IW(delta, Psi)`` with shape ``delta`` so the
        standard degrees of freedom are ``delta + p - 1``; ``"standard"`` uses
        ``delta`` directly (which has no finite mean when ``delta = p``).
        """
        delta = float(self.p) if self.gen_delta is None else float(self.gen_delta)
        return delta + self.p - 1 if self.iw_convention == "dawid" else delta

    @property
    def block_widths(self) -> tuple:
        return (self.p_per_block,) * self.n_blocks

    def Sigma_x(self) -> np.ndarray:
        return gen_sigma_x(self.sigma_x, self.g)


@dataclass
class SimTruth:
    X: np.ndarray = field(repr=False)
    Y: list = field(repr=False)
    B: list = field(repr=False)
    zeta: list = field(repr=False)
    Delta: list = field(repr=False)
    lam: Optional[list] = field(default=None, repr=False)

    def datasets(self, block_widths: Sequence[int]) -> list[LayerDataset]:
        return [make_layer_dataset(Y, self.X, block_widths, layer=t)
                for t, Y in enumerate(self.Y, start=1)]


def sample_inverse_wishart(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    S = np.atleast_2d(invwishart.rvs(df=df, scale=scale, random_state=rng))
    return (S + S.T) / 2


def _matrix_normal_noise(n, Delta, rng):
    L = np.linalg.cholesky(Delta)
    return rng.standard_normal((n, Delta.shape[0])) @ L.T


def simulate_case1(design: SimDesign, rng: np.random.Generator) -> SimTruth:
    """Draw a dataset from the hierarchical model itself."""
    if design.case != "case1":
        raise ConfigError("simulate_case1 needs a case1 design")
    n, g, p, M = design.n, design.g, design.p, design.n_blocks
    Sx = design.Sigma_x()
    X = rng.multivariate_normal(np.zeros(g), Sx, size=n, method="cholesky")
    Lchol = np.linalg.cholesky(Sx)
    delta = design.iw_df()
    col_block = np.repeat(np.arange(M), design.p_per_block)
    Ys, Bs, zetas, Deltas, lams = [], [], [], [], []
    prev_lam = np.zeros((M, g))
    for t in range(design.tau):
        Delta = sample_inverse_wishart(delta, design.sigma2 * np.eye(p), rng)
        nu_inv2 = rng.gamma(design.gen_a1, 1.0 / design.gen_a2, size=(g, p))
        mu = np.zeros((M, g)) if t == 0 else design.gen_alpha * np.maximum(prev_lam, 0.0)
        lam = mu + rng.standard_normal((M, g)) @ Lchol.T
        zeta = (rng.random((M, g)) < ndtr(lam)).astype(np.int8)
        zfull = zeta[col_block].T
        var = np.where(zfull == 1, design.gen_v1, design.gen_v0) / nu_inv2
        B = rng.standard_normal((g, p)) * np.sqrt(var)
        Y = X @ B + _matrix_normal_noise(n, Delta, rng)
        Ys.append(Y)
        Bs.append(B)
        zetas.append(zeta)
        Deltas.append(Delta)
        lams.append(lam)
        prev_lam = lam
    return SimTruth(X, Ys, Bs, zetas, Deltas, lams)


def case2_truth_zeta(design: SimDesign) -> list[np.ndarray]:
    """Gene ``k`` is associated with sequence ``m`` at layer ``t`` iff the
    nonzero block of that layer covers row ``k`` and the columns of ``m``."""
    out = []
    for r, s in design.blocks:
        z = np.zeros((design.n_blocks, design.g), dtype=np.int8)
        z[: s // design.p_per_block, :r] = 1
        out.append(z)
    return out


def simulate_case2(design: SimDesign, rng: np.random.Generator) -> SimTruth:
    """Fixed nested block coefficients with double-exponential entries."""
    if design.case != "case2":
        raise ConfigError("simulate_case2 needs a case2 design")
    n, g, p = design.n, design.g, design.p
    Sx = design.Sigma_x()
    X = rng.multivariate_normal(np.zeros(g), Sx, size=n, method="cholesky")
    delta = design.iw_df()
    Ys, Bs, Deltas = [], [], []
    for r, s in design.blocks:
        Delta = sample_inverse_wishart(delta, 20.0 * np.eye(p), rng)
        B = np.zeros((g, p))
        B[:r, :s] = rng.laplace(0.0, design.theta, size=(r, s))
        Ys.append(X @ B + _matrix_normal_noise(n, Delta, rng))
        Bs.append(B)
        Deltas.append(Delta)
    return SimTruth(X, Ys, Bs, case2_truth_zeta(design), Deltas)


def simulate(design: SimDesign, rng: np.random.Generator) -> SimTruth:
    return simulate_case1(design, rng) if design.case == "case1" else simulate_case2(design, rng)


# ---------------------------------------------------------------------------
# Metrics

METRICS = ("tpr", "fpr", "e_w", "e_beta")


def _rate(hit, base):
    return float(hit.sum() / base.sum()) if base.sum() > 0 else np.nan


def compute_metrics(
    truth: SimTruth,
    w: Sequence[np.ndarray],
    B_hat: Sequence[np.ndarray],
) -> dict:
    """Per-layer and pooled selection metrics.

    Returns a dict with ``tpr``, ``fpr``, ``e_w`` and ``e_beta`` arrays of one
    value per layer, plus the same keys suffixed ``_all`` pooled over layers.
    """
    out = {k: [] for k in METRICS}
    for z, wt, B, Bh in zip(truth.zeta, w, truth.B, B_hat):
        z = np.asarray(z).astype(bool)
        sel = np.asarray(wt) > 0.5
        out["tpr"].append(_rate(sel & z, z))
        out["fpr"].append(_rate(sel & ~z, ~z))
        out["e_w"].append(float(np.mean(np.abs(z - np.asarray(wt)))))
        out["e_beta"].append(float(np.mean((B - Bh) ** 2)))
    res = {k: np.array(v) for k, v in out.items()}
    Z = np.concatenate([np.asarray(z).ravel() for z in truth.zeta]).astype(bool)
    S = np.concatenate([np.asarray(x).ravel() for x in w]) > 0.5
    res["tpr_all"] = _rate(S & Z, Z)
    res["fpr_all"] = _rate(S & ~Z, ~Z)
    res["e_w_all"] = float(res["e_w"].mean())
    res["e_beta_all"] = float(res["e_beta"].mean())
    return res


# ---------------------------------------------------------------------------
# Estimation and replication

def scenario_hyperparams(scenario: str, g: int, base: Optional[Hyperparams] = None) -> Hyperparams:
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    base = Hyperparams(a1=4.0, a2=5.0, alpha=0.5) if base is None else base
    flags = SCENARIOS[scenario]
    return base.with_(
        mu_policy=base.mu_policy if flags["propagate"] else "zero",
        Lambda=None if flags["lambda_cor"] else np.eye(g),
    )


def estimate(
    truth: SimTruth,
    design: SimDesign,
    scenario: str,
    v0_grid: Sequence[float],
    hp_base: Optional[Hyperparams] = None,
    v1: Optional[float] = None,
    bic_variant: str = "literal",
) -> tuple[SelectionResult, list[LayerDataset]]:
    datasets = truth.datasets(design.block_widths)
    hp = scenario_hyperparams(scenario, design.g, hp_base)
    result = select_over_grid(datasets, hp, v0_grid, v1=v1, bic_variant=bic_variant, threads=1)
    return result, datasets


@dataclass
class ReplicationReport:
    design: SimDesign
    scenarios: tuple
    reps: int
    metrics: dict = field(repr=False)
    failures: dict = field(default_factory=dict)
    chosen_v0: dict = field(default_factory=dict, repr=False)

    def values(self, scenario: str, key: str) -> np.ndarray:
        """Stacked per-replication values, shape (n_ok,) or (n_ok, tau)."""
        return np.array([m[key] for m in self.metrics[scenario]])

    def mean(self, scenario: str, key: str):
        return np.nanmean(self.values(scenario, key), axis=0)

    def sd(self, scenario: str, key: str):
        v = self.values(scenario, key)
        return np.nanstd(v, axis=0, ddof=1) if v.shape[0] > 1 else np.zeros_like(v[0])


def _run_replication(args):
    design, scenarios, seed, v0_grid, hp_base, v1, bic_variant = args
    rng = make_rng(seed)
    truth = simulate(design, rng)
    out = {}
    for sc in scenarios:
        try:
            res, data = estimate(truth, design, sc, v0_grid, hp_base, v1, bic_variant)
            metrics = compute_metrics(truth, res.w, res.coefficients(data))
            out[sc] = (metrics, res.chosen_v0, None)
        except LayeredBVSError as exc:
            out[sc] = (None, np.nan, str(exc))
    return out


def replicate(
    design: SimDesign,
    scenarios: Sequence[str] = ("A",),
    reps: int = 30,
    v0_grid: Optional[Sequence[float]] = None,
    master_seed: int = 0,
    hp_base: Optional[Hyperparams] = None,
    v1: Optional[float] = None,
    bic_variant: str = "literal",
    threads: int = 1,
) -> ReplicationReport:
    """Generate ``reps`` datasets and evaluate each scenario on the same data.

    Replication ``i`` always uses the ``i``-th child of ``SeedSequence(master_seed)``,
    so results do not depend on the scenario list or the worker count.
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    scenarios = tuple(scenarios)
    for sc in scenarios:
        if sc not in SCENARIOS:
            raise ConfigError(f"unknown scenario {sc!r}")
    grid = np.asarray(v0_grid if v0_grid is not None else 0.001 * np.arange(1, 11), dtype=float)
    jobs = [(design, scenarios, s, grid, hp_base, v1, bic_variant)
            for s in replication_seeds(master_seed, reps)]
    threads = resolve_threads(threads)
    if threads == 1:
        outs = [_run_replication(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(threads, reps)) as ex:
            outs = list(ex.map(_run_replication, jobs))
    metrics = {sc: [] for sc in scenarios}
    failures = {sc: [] for sc in scenarios}
    chosen = {sc: [] for sc in scenarios}
    for i, out in enumerate(outs):
        for sc in scenarios:
            m, v0, err = out[sc]
            if err is None:
                metrics[sc].append(m)
                chosen[sc].append(v0)
            else:
                failures[sc].append((i, err))
    return ReplicationReport(design, scenarios, reps, metrics, failures, chosen)


def table_rows(report: ReplicationReport) -> list[dict]:
    """Rows shaped like the published tables: one per (scenario, layer)."""
    d = report.design
    level_key, level = ("sigma2", d.sigma2) if d.case == "case1" else ("theta", d.theta)
    rows = []
    for sc in report.scenarios:
        if not report.metrics[sc]:
            continue
        means = {k: report.mean(sc, k) for k in METRICS}
        sds = {k: report.sd(sc, k) for k in METRICS}
        for t in range(d.tau):
            row = {"case": d.case, "sigma_x": d.sigma_x, "scenario": sc,
                   level_key: level, "layer": t + 1}
            for k in METRICS:
                row[f"{k}_mean"] = float(means[k][t])
                row[f"{k}_sd"] = float(sds[k][t])
            row["e_w_all_mean"] = float(report.mean(sc, "e_w_all"))
            row["e_beta_all_mean"] = float(report.mean(sc, "e_beta_all"))
            row["n_ok"] = len(report.metrics[sc])
            row["n_failed"] = len(report.failures[sc])
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Synthetic imaging cohort

def phantom_cohort(
    n_subjects: int,
    rng: np.random.Generator,
    radius_range: tuple = (6.0, 9.0),
    sequences: Sequence[str] = ("FLAIR", "T1", "T1Gd", "T2"),
) -> list:
    """Ellipsoidal tumors with radially varying intensity profiles.

    Each subject and sequence gets a random core/rim contrast, a radial decay
    shape and voxel noise, so shell densities vary smoothly across subjects.
    """
    from .layering import VoxelGrid

    cohort = []
    M = len(sequences)
    for _ in range(n_subjects):
        radii = rng.uniform(*radius_range, size=3)
        dims = tuple(int(np.ceil(2 * r)) + 3 for r in radii)
        c = (np.array(dims) - 1) / 2 + rng.uniform(-0.5, 0.5, size=3)
        ii, jj, kk = np.meshgrid(*[np.arange(s) for s in dims], indexing="ij")
        rel = np.sqrt(((ii - c[0]) / radii[0]) ** 2 + ((jj - c[1]) / radii[1]) ** 2
                      + ((kk - c[2]) / radii[2]) ** 2)
        mask = rel <= 1.0
        inten = np.zeros(dims + (M,))
        for m in range(M):
            core = rng.normal(1.0 + 0.3 * m, 0.25)
            rim = rng.normal(0.0, 0.25)
            shape = rng.uniform(0.5, 2.5)
            spread = rng.uniform(0.15, 0.4)
            mix = rng.uniform(0.0, 0.4)
            base = core + (rim - core) * np.clip(rel, 0, 1) ** shape
            # A bimodal component whose weight varies between subjects.
            bump = (rng.random(dims) < mix) * rng.normal(0.8, 0.2)
            inten[..., m] = base + bump + spread * rng.standard_normal(dims)
        cohort.append(VoxelGrid(mask, inten, tuple(sequences)))
    return cohort


def gene_matrix(
    n: int,
    g: int,
    rng: np.random.Generator,
    Sigma_x: Optional[np.ndarray] = None,
) -> np.ndarray:
    Sx = np.eye(g) if Sigma_x is None else Sigma_x
    return rng.multivariate_normal(np.zeros(g), Sx, size=n, method="cholesky")
