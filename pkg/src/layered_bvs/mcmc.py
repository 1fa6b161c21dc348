"""Gibbs sampler with a Metropolis-Hastings step for one layer.

Serves as the sampling baseline the EM estimator is timed against. Conjugate
blocks (``B``, ``nu^-2``, ``Delta``, ``zeta``) are drawn exactly; each
sequence's ``lambda`` vector is updated by random-walk Metropolis-Hastings
whose step size is adapted during burn-in.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import expit, log_ndtr
from scipy.stats import invwishart

from .errors import ConfigError, NumericalError
from .model import Hyperparams, LayerDataset, LayerParameterState, _log_ab, _resolve

TARGET_ACCEPT = (0.25, 0.45)
MAX_JITTER_TRIES = 10


@dataclass
class McmcResult:
    """Posterior draws kept after burn-in.

    ``zeta`` has shape ``(S, M, g)``; ``w_rb`` holds the Rao-Blackwellized
    conditional inclusion probabilities of each kept sweep.
    """

    zeta: np.ndarray = field(repr=False)
    w_rb: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)
    lam: np.ndarray = field(repr=False)
    n_sweeps: int
    n_burn: int
    elapsed: float
    step: np.ndarray
    accept_rate: np.ndarray
    jitter_count: int = 0

    @property
    def n_samples(self) -> int:
        return self.zeta.shape[0]

    def inclusion_probabilities(self, rao_blackwell: bool = True) -> np.ndarray:
        src = self.w_rb if rao_blackwell else self.zeta
        if src.shape[0] == 0:
            return np.full(src.shape[1:], np.nan)
        return src.mean(axis=0)


def _lambda_logpost(lam, zeta, mu, Lambda_inv):
    diff = lam - mu
    return (np.sum(np.where(zeta == 1, log_ndtr(lam), log_ndtr(-lam)), axis=-1)
            - 0.5 * np.einsum("...i,ij,...j->...", diff, Lambda_inv, diff))


class _Sampler:
    def __init__(self, data: LayerDataset, hp: Hyperparams, mu, rng, init, step):
        self.data, self.hp, self.rng = data, hp, rng
        self.res = _resolve(hp, data)
        M, g, p = data.n_blocks, data.g, data.p
        self.mu = np.broadcast_to(np.asarray(mu, dtype=float), (M, g)).copy()
        self.XtX = data.X.T @ data.X
        self.XtY = data.X.T @ data.Y
        self.col_block = data.col_block
        if init is None:
            self.B = np.zeros((g, p))
            self.nu_inv2 = np.full((g, p), hp.a1 / hp.a2)
            self.Delta = np.eye(p)
            self.lam = self.mu.copy()
            self.zeta = np.zeros((M, g), dtype=np.int8)
        else:
            self.B = init.B.copy()
            self.nu_inv2 = init.nu_inv2.copy()
            self.Delta = init.Delta.copy()
            self.lam = init.lam.copy()
            self.zeta = (init.w > 0.5).astype(np.int8)
        self.step = np.full(M, float(step))
        self.jitter = 0

    def _var_scale(self):
        v = np.where(self.zeta == 1, self.hp.v1, self.hp.v0)
        return v[self.col_block].T  # (g, p)

    def draw_beta(self):
        g, p = self.data.g, self.data.p
        Dinv = np.linalg.inv(self.Delta)
        Dinv = (Dinv + Dinv.T) / 2
        A = np.kron(self.XtX, Dinv)
        A[np.diag_indices_from(A)] += (self.nu_inv2 / self._var_scale()).ravel()
        rhs = (self.XtY @ Dinv).ravel()
        try:
            U = linalg.cholesky(A, lower=False, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"beta conditional is not positive definite: {exc}") from exc
        mean = linalg.cho_solve((U, False), rhs, check_finite=False)
        z = self.rng.standard_normal(g * p)
        self.B = (mean + linalg.solve_triangular(U, z, lower=False, check_finite=False)).reshape(g, p)

    def draw_nu(self):
        rate = self.hp.a2 + 0.5 * self.B**2 / self._var_scale()
        self.nu_inv2 = self.rng.gamma(self.hp.a1 + 0.5, 1.0 / rate)

    def draw_delta(self):
        R = self.data.Y - self.data.X @ self.B
        S = self.res.Psi + R.T @ R
        df = self.data.n + self.res.delta
        for k in range(MAX_JITTER_TRIES):
            D = np.atleast_2d(invwishart.rvs(df=df, scale=S, random_state=self.rng))
            D = (D + D.T) / 2
            try:
                np.linalg.cholesky(D)
                self.Delta = D
                return
            except np.linalg.LinAlgError:
                self.jitter += 1
                S = S + 1e-8 * (k + 1) * np.trace(S) / S.shape[0] * np.eye(S.shape[0])
        # Keep the previous draw if every retry failed.

    def draw_zeta(self):
        log_a, log_b = _log_ab(self.data, self.B, self.nu_inv2, self.lam, self.hp.v0, self.hp.v1)
        w = expit(log_a - log_b)
        self.zeta = (self.rng.random(w.shape) < w).astype(np.int8)
        return w

    def draw_lambda(self):
        Li = self.res.Lambda_inv
        cur = _lambda_logpost(self.lam, self.zeta, self.mu, Li)
        prop = self.lam + self.step[:, None] * self.rng.standard_normal(self.lam.shape)
        new = _lambda_logpost(prop, self.zeta, self.mu, Li)
        acc = np.log(self.rng.random(len(cur))) < new - cur
        self.lam[acc] = prop[acc]
        return acc

    def sweep(self):
        self.draw_beta()
        self.draw_nu()
        self.draw_delta()
        w = self.draw_zeta()
        acc = self.draw_lambda()
        return w, acc


def mcmc_baseline(
    data: LayerDataset,
    hp: Hyperparams,
    n_samples: int,
    burn_in: int = 0,
    mu: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    time_budget: Optional[float] = None,
    init: Optional[LayerParameterState] = None,
    step: float = 0.2,
    adapt_every: int = 50,
) -> McmcResult:
    """Run the sampler for ``burn_in + n_samples`` sweeps.

    With ``time_budget`` (seconds) sampling stops once the budget is spent and
    ``n_sweeps`` reports how many full sweeps were completed, burn-in included.
    The random-walk step of each ``lambda`` block is rescaled every
    ``adapt_every`` burn-in sweeps until its acceptance lies in 25-45%.
    """
    if n_samples < 0 or burn_in < 0:
        raise ConfigError("n_samples and burn_in must be non-negative")
    if step <= 0 or adapt_every < 1:
        raise ConfigError("step and adapt_every must be positive")
    if time_budget is not None and time_budget < 0:
        raise ConfigError("time_budget must be non-negative")
    rng = np.random.default_rng() if rng is None else rng
    M, g, p = data.n_blocks, data.g, data.p
    mu = np.zeros((M, g)) if mu is None else mu
    total = burn_in + n_samples
    keep_z, keep_w, keep_B, keep_l = [], [], [], []
    if total == 0:
        return McmcResult(np.zeros((0, M, g), np.int8), np.zeros((0, M, g)),
                          np.zeros((0, g, p)), np.zeros((0, M, g)), 0, 0, 0.0,
                          np.full(M, float(step)), np.full(M, np.nan))
    s = _Sampler(data, hp, mu, rng, init, step)
    window = np.zeros(M)
    accepted = np.zeros(M)
    n_post = 0
    t0 = time.perf_counter()
    done = 0
    for it in range(total):
        if time_budget is not None and time.perf_counter() - t0 >= time_budget:
            break
        w, acc = s.sweep()
        done += 1
        if it < burn_in:
            window += acc
            if (it + 1) % adapt_every == 0:
                rate = window / adapt_every
                s.step = np.where(rate < TARGET_ACCEPT[0], s.step * 0.7,
                                  np.where(rate > TARGET_ACCEPT[1], s.step * 1.3, s.step))
                window[:] = 0
        else:
            accepted += acc
            n_post += 1
            keep_z.append(s.zeta.copy())
            keep_w.append(w)
            keep_B.append(s.B.copy())
            keep_l.append(s.lam.copy())
    elapsed = time.perf_counter() - t0

    def _stack(xs, shape, dtype=float):
        return np.array(xs, dtype=dtype) if xs else np.zeros((0,) + shape, dtype)

    return McmcResult(
        zeta=_stack(keep_z, (M, g), np.int8),
        w_rb=_stack(keep_w, (M, g)),
        B=_stack(keep_B, (g, p)),
        lam=_stack(keep_l, (M, g)),
        n_sweeps=done,
        n_burn=min(done, burn_in),
        elapsed=elapsed,
        step=s.step,
        accept_rate=accepted / n_post if n_post else np.full(M, np.nan),
        jitter_count=s.jitter,
    )
