"""Layer-wise spike-and-slab multivariate regression fitted by annealed EM.

For layer ``t`` the model is

    Y ~ MN(X B, I_n, Delta),
    beta_kj | zeta, nu ~ N(0, [(1 - zeta_mk) v0 + zeta_mk v1] nu_kj^2),
    zeta_mk ~ Bernoulli(Phi(lambda_mk)),   lambda_m ~ N(mu_m, Lambda),
    nu_kj^-2 ~ Gamma(a1, a2),             Delta ~ IW(delta, Psi),

where ``m`` indexes the sequence block containing PC column ``j``. The EM
treats ``zeta`` as missing and returns the posterior mode of the remaining
parameters; the E-step is tempered by ``q`` (deterministic annealing).

Array conventions: ``B`` and ``nu_inv2`` are ``(g, p)``; ``lam``, ``w`` and ``d``
are ``(M, g)`` with one row per sequence block.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import expit, gammaln, log_ndtr, multigammaln

from .errors import ConfigError, DataError, NumericalError

LOG_2PI = float(np.log(2 * np.pi))
MU_POLICIES = ("zero", "previous-layer-convex", "convex-hull", "autoregressive",
               "positive-part")
# Above this many coefficients the beta system is solved iteratively.
DENSE_SOLVE_LIMIT = 300
START_STRATEGIES = ("annealed", "ols")


# ---------------------------------------------------------------------------
# Data

@dataclass(frozen=True)
class LayerDataset:
    """Regression inputs for one layer.

    ``X`` is stored standardized (column mean 0, unit sample variance) and ``Y``
    column-centered; the original scales are kept so coefficients can be mapped
    back with :meth:`to_original_scale`.
    """

    Y: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False)
    block_widths: tuple
    layer: int = 1
    sequences: tuple = ()
    x_mean: np.ndarray = field(default=None, repr=False)
    x_scale: np.ndarray = field(default=None, repr=False)
    y_mean: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    @property
    def g(self) -> int:
        return self.X.shape[1]

    @property
    def n_blocks(self) -> int:
        return len(self.block_widths)

    @property
    def col_block(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_blocks), self.block_widths)

    @property
    def block_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.block_widths)[:-1]]).astype(int)

    def to_original_scale(self, B: np.ndarray) -> np.ndarray:
        return B / self.x_scale[:, None]


def make_layer_dataset(
    Y: np.ndarray,
    X: np.ndarray,
    block_widths: Sequence[int],
    layer: int = 1,
    sequences: Optional[Sequence[str]] = None,
) -> LayerDataset:
    """Validate, standardize ``X`` and center ``Y``."""
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    if Y.ndim != 2 or X.ndim != 2:
        raise DataError("Y and X must be matrices")
    if Y.shape[0] != X.shape[0]:
        raise DataError(f"Y has {Y.shape[0]} rows but X has {X.shape[0]}")
    if Y.shape[0] < 2:
        raise DataError("need at least two observations")
    widths = tuple(int(b) for b in block_widths)
    if any(b < 1 for b in widths) or sum(widths) != Y.shape[1]:
        raise DataError(f"block widths {widths} do not sum to p = {Y.shape[1]}")
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(X))):
        raise DataError("Y and X must be finite")
    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0, ddof=1)
    if np.any(x_scale <= 0):
        raise DataError(f"constant predictor column(s) {np.flatnonzero(x_scale <= 0).tolist()}")
    y_mean = Y.mean(axis=0)
    seqs = tuple(sequences) if sequences is not None else tuple(
        f"seq{m + 1}" for m in range(len(widths)))
    if len(seqs) != len(widths):
        raise DataError("one sequence name per block is required")
    return LayerDataset(Y - y_mean, (X - x_mean) / x_scale, widths, layer, seqs,
                        x_mean, x_scale, y_mean)


def default_lambda_cov(X: np.ndarray, ridge: float = 0.01, max_tries: int = 200) -> np.ndarray:
    """Sample correlation of ``X``, with ``ridge * I`` added until positive definite."""
    C = np.corrcoef(np.asarray(X, dtype=float), rowvar=False)
    C = np.atleast_2d(C)
    for _ in range(max_tries):
        try:
            np.linalg.cholesky(C)
            return C
        except np.linalg.LinAlgError:
            C = C + ridge * np.eye(C.shape[0])
    raise NumericalError("could not regularize cor(X) to positive definite")


# ---------------------------------------------------------------------------
# Hyperparameters

@dataclass(frozen=True)
class Hyperparams:
    """Prior and algorithm settings.

    ``delta`` and ``Psi`` default to ``p`` and ``I_p``; ``Lambda`` defaults to
    :func:`default_lambda_cov` of the standardized predictors. ``lambda_solver``
    is ``"newton"`` (default) or ``"gd"`` (fixed-step gradient descent with
    step halving, learning rate ``kappa``).

    ``starts`` lists the EM runs made per layer: ``"annealed"`` starts from
    ``B = 0`` with the tempered schedule, ``"ols"`` starts from least squares
    without tempering. The run with the highest log posterior is kept.
    """

    v0: float = 0.01
    v1: float = 100.0
    a1: float = 4.0
    a2: float = 5.0
    delta: Optional[float] = None
    Psi: Optional[np.ndarray] = field(default=None, repr=False)
    alpha: float = 0.5
    Lambda: Optional[np.ndarray] = field(default=None, repr=False)
    mu_policy: str = "positive-part"
    mu_weights: Optional[tuple] = None
    q0: float = 0.01
    q_growth: float = 1.1
    kappa: float = 0.05
    tol: float = 1e-5
    max_iter: int = 1000
    lambda_solver: str = "newton"
    beta_solver: str = "auto"
    starts: tuple = ("annealed", "ols")

    def __post_init__(self):
        if not (0 < self.v0 < self.v1) or not np.isfinite(self.v1):
            raise ConfigError(f"need 0 < v0 < v1, got v0={self.v0}, v1={self.v1}")
        if not self.a1 > 0.5 or not self.a2 > 0:
            raise ConfigError("need a1 > 1/2 and a2 > 0")
        if not 0 < self.q0 <= 1 or not self.q_growth >= 1:
            raise ConfigError("need q0 in (0, 1] and q_growth >= 1")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.mu_policy not in MU_POLICIES:
            raise ConfigError(f"unknown mu policy {self.mu_policy!r}; choose from {MU_POLICIES}")
        if self.lambda_solver not in ("newton", "gd"):
            raise ConfigError(f"unknown lambda solver {self.lambda_solver!r}")
        if self.beta_solver not in ("auto", "cholesky", "cg"):
            raise ConfigError(f"unknown beta solver {self.beta_solver!r}")
        starts = (self.starts,) if isinstance(self.starts, str) else tuple(self.starts)
        if not starts or any(st not in START_STRATEGIES for st in starts):
            raise ConfigError(f"starts must be drawn from {START_STRATEGIES}, got {self.starts!r}")
        object.__setattr__(self, "starts", starts)
        if self.tol <= 0 or self.max_iter < 1 or self.kappa <= 0:
            raise ConfigError("tol, kappa and max_iter must be positive")
        if self.Lambda is not None:
            L = np.asarray(self.Lambda, dtype=float)
            if L.ndim != 2 or L.shape[0] != L.shape[1] or not np.allclose(L, L.T):
                raise ConfigError("Lambda must be a symmetric matrix")
            try:
                np.linalg.cholesky(L)
            except np.linalg.LinAlgError:
                raise ConfigError("Lambda must be positive definite") from None
            object.__setattr__(self, "Lambda", L)
        if self.Psi is not None:
            P = np.asarray(self.Psi, dtype=float)
            try:
                np.linalg.cholesky(P)
            except np.linalg.LinAlgError:
                raise ConfigError("Psi must be positive definite") from None
            object.__setattr__(self, "Psi", P)

    def with_(self, **kw) -> "Hyperparams":
        return replace(self, **kw)


@dataclass
class _Resolved:
    """Hyperparameters specialized to a dataset, with cached factorizations."""

    hp: Hyperparams
    delta: float
    Psi: np.ndarray
    Lambda: np.ndarray
    Lambda_inv: np.ndarray
    logdet_Lambda: float
    logdet_Psi: float


def _resolve(hp: Hyperparams, data: LayerDataset) -> _Resolved:
    p, g = data.p, data.g
    delta = float(p) if hp.delta is None else float(hp.delta)
    if delta <= p - 1:
        raise ConfigError(f"Wishart degrees of freedom must exceed p - 1 = {p - 1}")
    Psi = np.eye(p) if hp.Psi is None else hp.Psi
    if Psi.shape != (p, p):
        raise ConfigError(f"Psi must be {p} x {p}")
    Lam = default_lambda_cov(data.X) if hp.Lambda is None else hp.Lambda
    if Lam.shape != (g, g):
        raise ConfigError(f"Lambda must be {g} x {g}")
    cL = linalg.cho_factor(Lam, lower=True)
    Lam_inv = linalg.cho_solve(cL, np.eye(g))
    Lam_inv = (Lam_inv + Lam_inv.T) / 2
    return _Resolved(hp, delta, Psi, Lam, Lam_inv,
                     2 * float(np.log(np.diag(cL[0])).sum()),
                     float(np.linalg.slogdet(Psi)[1]))


# ---------------------------------------------------------------------------
# State

@dataclass
class LayerParameterState:
    B: np.ndarray
    lam: np.ndarray
    nu_inv2: np.ndarray
    Delta: np.ndarray
    w: np.ndarray
    d: np.ndarray
    mu: np.ndarray = None
    q_trace: list = field(default_factory=list)
    Q_start: list = field(default_factory=list)
    Q_trace: list = field(default_factory=list)
    logpost_trace: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0

    def copy(self) -> "LayerParameterState":
        return LayerParameterState(
            self.B.copy(), self.lam.copy(), self.nu_inv2.copy(), self.Delta.copy(),
            self.w.copy(), self.d.copy(), None if self.mu is None else self.mu.copy(),
            list(self.q_trace), list(self.Q_start), list(self.Q_trace),
            list(self.logpost_trace), self.converged, self.n_iter)


def initial_state(data: LayerDataset, hp: Hyperparams, mu: np.ndarray) -> LayerParameterState:
    g, p, M = data.g, data.p, data.n_blocks
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (M, g)).copy()
    w = np.full((M, g), 0.5)
    return LayerParameterState(
        B=np.zeros((g, p)),
        lam=mu.copy(),
        nu_inv2=np.full((g, p), hp.a1 / hp.a2),
        Delta=np.eye(p),
        w=w,
        d=(1 - w) / hp.v0 + w / hp.v1,
        mu=mu,
    )


def ols_initial_state(data: LayerDataset, hp: Hyperparams, mu: np.ndarray) -> LayerParameterState:
    """Start at the least-squares fit (minimum norm when ``g > n``)."""
    state = initial_state(data, hp, mu)
    B = np.linalg.lstsq(data.X, data.Y, rcond=None)[0]
    R = data.Y - data.X @ B
    p = data.p
    delta = float(p) if hp.delta is None else float(hp.delta)
    Psi = np.eye(p) if hp.Psi is None else hp.Psi
    state.B = B
    state.Delta = (Psi + R.T @ R) / (data.n + delta + p + 1)
    return state


# ---------------------------------------------------------------------------
# Normal-CDF helpers

def _log_phi(x):
    return -0.5 * x * x - 0.5 * LOG_2PI


def mills_ratio(x):
    """``phi(x) / Phi(x)``, stable in both tails."""
    return np.exp(_log_phi(x) - log_ndtr(x))


# ---------------------------------------------------------------------------
# E-step

def _log_ab(data: LayerDataset, B, nu_inv2, lam, v0, v1):
    """Log of the unnormalized slab (a) and spike (b) weights, shape (M, g)."""
    b2n = B * B * nu_inv2
    starts = data.block_starts
    # Sum over the PCs of each block of log N(beta | 0, v nu^2).
    common = np.add.reduceat(-0.5 * LOG_2PI + 0.5 * np.log(nu_inv2), starts, axis=1).T
    sq = np.add.reduceat(b2n, starts, axis=1).T
    widths = np.asarray(data.block_widths)[:, None]
    log_a = log_ndtr(lam) + common - 0.5 * widths * np.log(v1) - sq / (2 * v1)
    log_b = log_ndtr(-lam) + common - 0.5 * widths * np.log(v0) - sq / (2 * v0)
    return log_a, log_b


def e_step(state: LayerParameterState, data: LayerDataset, hp: Hyperparams, q: float = 1.0):
    """Tempered inclusion expectations ``w`` and precision mixtures ``d``."""
    if not 0 < q <= 1:
        raise ConfigError(f"temperature must lie in (0, 1], got {q}")
    if not np.all(np.isfinite(state.lam)):
        raise NumericalError("non-finite lambda in E-step")
    log_a, log_b = _log_ab(data, state.B, state.nu_inv2, state.lam, hp.v0, hp.v1)
    w = expit(q * (log_a - log_b))
    d = (1 - w) / hp.v0 + w / hp.v1
    return w, d


# ---------------------------------------------------------------------------
# M-steps

def beta_system(data: LayerDataset, Delta_inv: np.ndarray, prec: np.ndarray):
    """Dense form of the beta normal equations in row-major ``vec(B)``.

    Returns ``(A, rhs)`` with ``A = X'X kron Delta^-1 + diag(prec)``.
    """
    XtX = data.X.T @ data.X
    A = np.kron(XtX, Delta_inv)
    A[np.diag_indices_from(A)] += prec.ravel()
    rhs = (data.X.T @ data.Y @ Delta_inv).ravel()
    return A, rhs


def beta_residual(data, B, Delta, nu_inv2, d, col_block=None) -> float:
    """Relative residual of the beta normal equations at ``B``."""
    Dinv = np.linalg.inv(Delta)
    prec = _beta_precision(data, nu_inv2, d, col_block)
    A, rhs = beta_system(data, (Dinv + Dinv.T) / 2, prec)
    r = A @ B.ravel() - rhs
    return float(np.linalg.norm(r) / max(np.linalg.norm(rhs), 1e-300))


def _beta_precision(data, nu_inv2, d, col_block=None):
    cb = data.col_block if col_block is None else col_block
    return d[cb].T * nu_inv2


def m_step_beta(data, state, hp, Delta_inv=None, XtX=None, XtY=None) -> np.ndarray:
    """MAP update of ``B`` given ``d``, ``nu^-2`` and ``Delta``."""
    if Delta_inv is None:
        Delta_inv = np.linalg.inv(state.Delta)
        Delta_inv = (Delta_inv + Delta_inv.T) / 2
    X = data.X
    XtX = X.T @ X if XtX is None else XtX
    XtY = X.T @ data.Y if XtY is None else XtY
    g, p = data.g, data.p
    prec = _beta_precision(data, state.nu_inv2, state.d)
    rhs = XtY @ Delta_inv
    solver = hp.beta_solver
    if solver == "auto":
        solver = "cholesky" if g * p <= DENSE_SOLVE_LIMIT else "cg"
    if solver == "cholesky":
        A = np.kron(XtX, Delta_inv)
        A[np.diag_indices_from(A)] += prec.ravel()
        try:
            sol = linalg.cho_solve(linalg.cho_factor(A, lower=False, check_finite=False),
                                   rhs.ravel(), check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"beta system is not positive definite: {exc}") from exc
        return sol.reshape(g, p)

    diag = np.outer(np.diag(XtX), np.diag(Delta_inv)) + prec

    def matvec(v):
        Bv = v.reshape(g, p)
        return (XtX @ Bv @ Delta_inv + prec * Bv).ravel()

    op = LinearOperator((g * p, g * p), matvec=matvec, dtype=float)
    pre = LinearOperator((g * p, g * p), matvec=lambda v: v / diag.ravel(), dtype=float)
    sol, info = cg(op, rhs.ravel(), x0=state.B.ravel(), rtol=1e-11, atol=0.0,
                   maxiter=20 * g * p, M=pre)
    if info != 0:
        raise NumericalError(f"conjugate gradient did not converge (info={info})")
    return sol.reshape(g, p)


def m_step_nu(state: LayerParameterState, hp: Hyperparams, col_block) -> np.ndarray:
    dfull = state.d[col_block].T
    return (hp.a1 - 0.5) / (hp.a2 + 0.5 * state.B**2 * dfull)


def m_step_delta(data: LayerDataset, B: np.ndarray, delta: float, Psi: np.ndarray) -> np.ndarray:
    """Posterior mode of ``Delta``: ``(Psi + R'R) / (n + delta + p + 1)``."""
    R = data.Y - data.X @ B
    S = Psi + R.T @ R
    D = S / (data.n + delta + data.p + 1)
    D = (D + D.T) / 2
    try:
        np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        raise NumericalError("Delta update is not positive definite") from None
    return D


def lambda_objective(lam, w, mu, Lambda_inv) -> np.ndarray:
    """``F(lambda)`` per sequence row; minimized by the lambda M-step."""
    lam = np.atleast_2d(lam)
    w = np.atleast_2d(w)
    diff = lam - mu
    quad = 0.5 * np.einsum("mi,ij,mj->m", diff, Lambda_inv, diff)
    return -((1 - w) * log_ndtr(-lam) + w * log_ndtr(lam)).sum(axis=1) + quad


def lambda_gradient(lam, w, mu, Lambda_inv) -> np.ndarray:
    lam = np.atleast_2d(lam)
    s = w * mills_ratio(lam) - (1 - w) * mills_ratio(-lam)
    return (lam - mu) @ Lambda_inv - s


def lambda_hessian_diag(lam, w) -> np.ndarray:
    r_pos = mills_ratio(lam)
    r_neg = mills_ratio(-lam)
    return w * r_pos * (lam + r_pos) + (1 - w) * r_neg * (r_neg - lam)


def _lambda_newton(lam, w, mu, Lambda_inv, tol=1e-10, max_steps=100):
    lam = lam.copy()
    F = lambda_objective(lam, w, mu, Lambda_inv)
    eye = np.eye(lam.shape[1])
    for _ in range(max_steps):
        grad = lambda_gradient(lam, w, mu, Lambda_inv)
        gnorm = np.sqrt((grad**2).sum(axis=1))
        active = gnorm > tol
        if not np.any(active):
            break
        H = Lambda_inv[None] + lambda_hessian_diag(lam, w)[:, :, None] * eye[None]
        step = np.linalg.solve(H, grad[:, :, None])[:, :, 0]
        step[~active] = 0.0
        t = np.ones(lam.shape[0])
        slope = (grad * step).sum(axis=1)
        for _ in range(60):
            cand = lam - t[:, None] * step
            Fc = lambda_objective(cand, w, mu, Lambda_inv)
            ok = (Fc <= F - 1e-4 * t * slope + 1e-12 * (1 + np.abs(F))) | ~active
            if np.all(ok):
                break
            t = np.where(ok, t, t / 2)
        else:
            # Newton steps that fail to decrease F are tiny; accept the plateau.
            keep = Fc > F
            cand[keep] = lam[keep]
            Fc = np.where(keep, F, Fc)
        if np.all(np.abs(cand - lam).max(axis=1)[active] < 1e-14):
            lam = cand
            break
        lam, F = cand, Fc
    return lam


def _lambda_gd(lam, w, mu, Lambda_inv, kappa=0.05, tol=1e-8, max_steps=500):
    lam = lam.copy()
    F = lambda_objective(lam, w, mu, Lambda_inv)
    k = np.full(lam.shape[0], float(kappa))
    for _ in range(max_steps):
        grad = lambda_gradient(lam, w, mu, Lambda_inv)
        if np.all(np.sqrt((grad**2).sum(axis=1)) < tol):
            break
        cand = lam - k[:, None] * grad
        Fc = lambda_objective(cand, w, mu, Lambda_inv)
        worse = ~(Fc <= F)
        k = np.where(worse, k / 2, k)
        lam = np.where(worse[:, None], lam, cand)
        F = np.where(worse, F, Fc)
        if np.any(k < 1e-20):
            raise NumericalError("lambda gradient descent stalled")
    return lam


def m_step_lambda(state: LayerParameterState, hp: Hyperparams, mu, Lambda_inv) -> np.ndarray:
    if hp.lambda_solver == "gd":
        lam = _lambda_gd(state.lam, state.w, mu, Lambda_inv, hp.kappa)
    else:
        lam = _lambda_newton(state.lam, state.w, mu, Lambda_inv)
    if not np.all(np.isfinite(lam)):
        raise NumericalError("lambda update diverged")
    return lam


# ---------------------------------------------------------------------------
# Objective values

def matrix_normal_loglik(Y, X, B, Delta) -> float:
    """``log MN(Y | XB, I_n, Delta)``."""
    n, p = Y.shape
    R = Y - X @ B
    try:
        c = linalg.cho_factor(Delta, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("Delta is not positive definite") from None
    logdet = 2 * float(np.log(np.diag(c[0])).sum())
    quad = float(np.sum(R * linalg.cho_solve(c, R.T).T))
    return -0.5 * n * p * LOG_2PI - 0.5 * n * logdet - 0.5 * quad


def _log_prior_rest(data, res: _Resolved, state, lam, mu) -> float:
    """Log prior of nu^-2, Delta and lambda (everything except beta/zeta)."""
    hp = res.hp
    p, g = data.p, data.g
    x = state.nu_inv2
    lp_nu = float(np.sum(hp.a1 * np.log(hp.a2) - gammaln(hp.a1)
                         + (hp.a1 - 1) * np.log(x) - hp.a2 * x))
    c = linalg.cho_factor(state.Delta, lower=True)
    logdet_D = 2 * float(np.log(np.diag(c[0])).sum())
    tr = float(np.trace(linalg.cho_solve(c, res.Psi)))
    nu = res.delta
    lp_D = (0.5 * nu * res.logdet_Psi - 0.5 * nu * p * np.log(2) - multigammaln(nu / 2, p)
            - 0.5 * (nu + p + 1) * logdet_D - 0.5 * tr)
    diff = lam - mu
    lp_lam = float(-0.5 * np.einsum("mi,ij,mj->", diff, res.Lambda_inv, diff)
                   - lam.shape[0] * 0.5 * (g * LOG_2PI + res.logdet_Lambda))
    return lp_nu + lp_D + lp_lam


def expected_log_posterior(data, res: _Resolved, state, w) -> float:
    """``Q``: complete-data log posterior averaged over ``zeta ~ Bernoulli(w)``.

    All normalizing constants are kept, so ``Q + entropy(w)`` equals the
    marginal log posterior when ``w`` is the exact conditional expectation.
    """
    log_a, log_b = _log_ab(data, state.B, state.nu_inv2, state.lam, res.hp.v0, res.hp.v1)
    q_zeta = float(np.sum(w * log_a + (1 - w) * log_b))
    return (matrix_normal_loglik(data.Y, data.X, state.B, state.Delta) + q_zeta
            + _log_prior_rest(data, res, state, state.lam, state.mu))


def log_posterior(data, res: _Resolved, state) -> float:
    """Marginal (over ``zeta``) log posterior of the current parameters."""
    log_a, log_b = _log_ab(data, state.B, state.nu_inv2, state.lam, res.hp.v0, res.hp.v1)
    return (matrix_normal_loglik(data.Y, data.X, state.B, state.Delta)
            + float(np.sum(np.logaddexp(log_a, log_b)))
            + _log_prior_rest(data, res, state, state.lam, state.mu))


def bernoulli_entropy(w) -> float:
    w = np.clip(w, 1e-300, 1 - 1e-16)
    return float(-np.sum(w * np.log(w) + (1 - w) * np.log1p(-w)))


# ---------------------------------------------------------------------------
# Prior-mean propagation

def propagate_mu(
    prev_lambdas: Sequence[np.ndarray],
    t: int,
    policy: str = "positive-part",
    alpha: float = 0.5,
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Prior mean of ``lambda`` at layer ``t`` (1-based) from earlier estimates.

    Policies
    --------
    zero
        ``mu = 0``.
    previous-layer-convex
        ``alpha * lambda^(t-1)``.
    convex-hull
        ``sum_s a_s lambda^(t-s)`` over all earlier layers, default uniform weights.
    autoregressive
        Same form, with weights over lags ``1..t-1``; default uniform.
    positive-part
        ``alpha * max(lambda^(t-1), 0)``.

    Returns zeros when ``t == 1`` regardless of policy.
    """
    if policy not in MU_POLICIES:
        raise ConfigError(f"unknown mu policy {policy!r}")
    if t < 1:
        raise ConfigError("layer index starts at 1")
    if t == 1:
        if prev_lambdas:
            return np.zeros_like(np.asarray(prev_lambdas[0], dtype=float))
        return np.zeros(0)
    if len(prev_lambdas) < t - 1:
        raise NumericalError(
            f"layer {t} needs {t - 1} previous lambda estimates, got {len(prev_lambdas)}")
    prev = [np.asarray(v, dtype=float) for v in prev_lambdas[: t - 1]]
    last = prev[-1]
    if policy == "zero":
        return np.zeros_like(last)
    if policy == "previous-layer-convex":
        return alpha * last
    if policy == "positive-part":
        return alpha * np.maximum(last, 0.0)
    # Weights index lags: weights[s-1] multiplies lambda^(t-s).
    lags = t - 1
    a = np.full(lags, 1.0 / lags) if weights is None else np.asarray(weights, float)[:lags]
    if a.size != lags or np.any(a < 0):
        raise ConfigError(f"{policy} needs {lags} non-negative weights")
    if policy == "convex-hull" and not np.isclose(a.sum(), 1.0):
        raise ConfigError("convex-hull weights must sum to one")
    return sum(a[s] * prev[t - 2 - s] for s in range(lags))


# ---------------------------------------------------------------------------
# EM driver

def _max_change(state: LayerParameterState, old: tuple) -> float:
    new = (state.B, state.lam, state.nu_inv2, state.Delta)
    return max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(new, old))


def fit_layer(
    data: LayerDataset,
    hp: Hyperparams,
    mu: Optional[np.ndarray] = None,
    init: Optional[LayerParameterState] = None,
    record_trace: bool = True,
    fixed_q: Optional[float] = None,
) -> LayerParameterState:
    """Annealed EM for one layer.

    Each iteration runs the E-step at the current temperature, then updates
    ``B``, ``nu^-2``, ``Delta`` and ``lambda`` in turn. The temperature starts at
    ``q0`` and is multiplied by ``q_growth`` per iteration up to 1; convergence
    (max absolute parameter change below ``tol``) is only checked at ``q = 1``.

    With ``record_trace`` the Q-value before and after the M-steps and the
    marginal log posterior are stored per iteration. ``fixed_q`` pins the
    temperature, which is useful for checking EM ascent.
    """
    res = _resolve(hp, data)
    M, g = data.n_blocks, data.g
    mu = np.zeros((M, g)) if mu is None else np.broadcast_to(
        np.asarray(mu, dtype=float), (M, g)).copy()
    if not np.all(np.isfinite(mu)):
        raise NumericalError("non-finite prior mean")
    state = initial_state(data, hp, mu) if init is None else init.copy()
    state.mu = mu
    col_block = data.col_block
    XtX = data.X.T @ data.X
    XtY = data.X.T @ data.Y
    q = hp.q0 if fixed_q is None else float(fixed_q)
    state.converged = False
    for it in range(1, hp.max_iter + 1):
        old = (state.B.copy(), state.lam.copy(), state.nu_inv2.copy(), state.Delta.copy())
        state.w, state.d = e_step(state, data, hp, q)
        if record_trace:
            state.Q_start.append(expected_log_posterior(data, res, state, state.w))
        Dinv = np.linalg.inv(state.Delta)
        state.B = m_step_beta(data, state, hp, (Dinv + Dinv.T) / 2, XtX, XtY)
        state.nu_inv2 = m_step_nu(state, hp, col_block)
        state.Delta = m_step_delta(data, state.B, res.delta, res.Psi)
        state.lam = m_step_lambda(state, hp, mu, res.Lambda_inv)
        state.q_trace.append(q)
        if record_trace:
            state.Q_trace.append(expected_log_posterior(data, res, state, state.w))
            state.logpost_trace.append(log_posterior(data, res, state))
        state.n_iter = it
        if q >= 1.0 and _max_change(state, old) < hp.tol:
            state.converged = True
            break
        if fixed_q is None:
            q = min(1.0, q * hp.q_growth)
    # Report inclusion probabilities at the final parameters.
    state.w, state.d = e_step(state, data, hp, 1.0 if fixed_q is None else q)
    return state


def fit_layer_multistart(
    data: LayerDataset,
    hp: Hyperparams,
    mu: Optional[np.ndarray] = None,
    record_trace: bool = False,
) -> LayerParameterState:
    """Run EM from each start in ``hp.starts`` and keep the highest log posterior.

    Starting from ``B = 0``, large effects can be absorbed by the spike when
    their local slab scale shrinks early; the least-squares start reaches the
    other mode, and the marginal posterior decides between them.
    """
    res = _resolve(hp, data)
    best, best_lp = None, -np.inf
    errors = []
    for start in hp.starts:
        try:
            if start == "annealed":
                st = fit_layer(data, hp, mu, record_trace=record_trace)
            else:
                st = fit_layer(data, hp.with_(q0=1.0), mu,
                               init=ols_initial_state(data, hp, np.zeros(1) if mu is None else mu),
                               record_trace=record_trace)
        except NumericalError as exc:
            errors.append(f"{start}: {exc}")
            continue
        lp = log_posterior(data, res, st)
        # Prefer converged runs; the posterior breaks ties among them.
        key = (st.converged, lp)
        if best is None or key > (best.converged, best_lp):
            best, best_lp = st, lp
    if best is None:
        raise NumericalError("; ".join(errors))
    return best


def fit_sequential(
    datasets: Sequence[LayerDataset],
    hp,
    record_trace: bool = False,
) -> list[LayerParameterState]:
    """Fit layers in order, propagating the prior mean of ``lambda``.

    ``hp`` is one :class:`Hyperparams` for all layers or a sequence with one
    entry per layer.
    """
    hps = [hp] * len(datasets) if isinstance(hp, Hyperparams) else list(hp)
    if len(hps) != len(datasets):
        raise ConfigError("one hyperparameter set per layer is required")
    states: list[LayerParameterState] = []
    for t, (data, h) in enumerate(zip(datasets, hps), start=1):
        if t == 1:
            mu = np.zeros((data.n_blocks, data.g))
        else:
            mu = propagate_mu([s.lam for s in states], t, h.mu_policy, h.alpha, h.mu_weights)
            if mu.shape != (data.n_blocks, data.g):
                raise DataError(f"layer {t}: block structure differs from layer {t - 1}")
        try:
            states.append(fit_layer_multistart(data, h, mu, record_trace=record_trace))
        except NumericalError as exc:
            raise NumericalError(f"layer {t}: {exc}") from exc
    return states


def ols_slab_scale(datasets: Sequence[LayerDataset]) -> float:
    """Smallest power of ten strictly above the largest |OLS coefficient|."""
    mx = 0.0
    for data in datasets:
        coef = np.linalg.lstsq(data.X, data.Y, rcond=None)[0]
        mx = max(mx, float(np.max(np.abs(coef))))
    if mx <= 0:
        return 1.0
    return float(10.0 ** (np.floor(np.log10(mx)) + 1))
