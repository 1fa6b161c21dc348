import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize
from scipy.stats import matrix_normal, norm

from layered_bvs.errors import ConfigError, DataError, NumericalError
from layered_bvs.model import (
    Hyperparams,
    _resolve,
    beta_residual,
    bernoulli_entropy,
    default_lambda_cov,
    e_step,
    expected_log_posterior,
    fit_layer,
    fit_layer_multistart,
    fit_sequential,
    initial_state,
    lambda_gradient,
    lambda_objective,
    log_posterior,
    m_step_beta,
    m_step_delta,
    m_step_lambda,
    m_step_nu,
    make_layer_dataset,
    matrix_normal_loglik,
    mills_ratio,
    ols_slab_scale,
    propagate_mu,
)
from oracles import numeric_gradient


def make_instance(seed, n=30, g=4, widths=(2, 1, 2), signal=1.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, g))
    p = sum(widths)
    B = np.zeros((g, p))
    B[0] = signal
    if g > 1:
        B[1, : widths[0]] = -signal
    Y = X @ B + rng.normal(size=(n, p))
    return make_layer_dataset(Y, X, widths, 1, tuple(f"S{m}" for m in range(len(widths))))


def random_state(data, hp, rng):
    st_ = initial_state(data, hp, np.zeros((data.n_blocks, data.g)))
    st_.B = rng.normal(size=st_.B.shape)
    st_.nu_inv2 = rng.gamma(2.0, 1.0, size=st_.nu_inv2.shape)
    A = rng.normal(size=(data.p, data.p))
    st_.Delta = A @ A.T / data.p + np.eye(data.p)
    st_.lam = rng.normal(size=st_.lam.shape)
    return st_


# ---------------------------------------------------------------------------
# Data and hyperparameters

def test_dataset_standardizes_and_maps_back():
    rng = np.random.default_rng(0)
    X = rng.normal(3.0, 2.0, size=(40, 3))
    Y = rng.normal(size=(40, 2)) + 5
    data = make_layer_dataset(Y, X, (2,))
    np.testing.assert_allclose(data.X.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(data.X.std(axis=0, ddof=1), 1)
    np.testing.assert_allclose(data.Y.mean(axis=0), 0, atol=1e-12)
    B_std = np.linalg.lstsq(data.X, data.Y, rcond=None)[0]
    Xc = np.column_stack([np.ones(40), X])
    B_raw = np.linalg.lstsq(Xc, Y, rcond=None)[0][1:]
    np.testing.assert_allclose(data.to_original_scale(B_std), B_raw, atol=1e-10)
    assert data.col_block.tolist() == [0, 0]


@pytest.mark.parametrize("Y,X,widths", [
    (np.zeros((5, 2)), np.zeros((4, 2)), (2,)),
    (np.zeros((5, 2)), np.random.default_rng(0).normal(size=(5, 2)), (1,)),
    (np.zeros((1, 2)), np.zeros((1, 2)), (2,)),
    (np.full((5, 2), np.nan), np.random.default_rng(0).normal(size=(5, 2)), (2,)),
    (np.zeros((5, 2)), np.ones((5, 2)), (2,)),
])
def test_dataset_rejects_bad_input(Y, X, widths):
    with pytest.raises(DataError):
        make_layer_dataset(Y, X, widths)


@pytest.mark.parametrize("kw", [
    {"v0": 1.0, "v1": 0.5}, {"a1": 0.4}, {"q0": 0.0}, {"alpha": 2.0},
    {"mu_policy": "x"}, {"lambda_solver": "x"}, {"beta_solver": "x"},
    {"starts": ("bogus",)}, {"starts": ()}, {"tol": 0.0},
    {"Lambda": np.array([[1.0, 2.0], [2.0, 1.0]])}, {"Psi": -np.eye(2)},
])
def test_hyperparams_validation(kw):
    with pytest.raises(ConfigError):
        Hyperparams(**kw)


def test_hyperparams_accepts_single_start_string():
    assert Hyperparams(starts="ols").starts == ("ols",)


def test_default_lambda_cov_regularizes_collinear_columns():
    x = np.random.default_rng(0).normal(size=20)
    C = default_lambda_cov(np.column_stack([x, x, -x]))
    np.linalg.cholesky(C)


# ---------------------------------------------------------------------------
# E-step

def test_e_step_matches_direct_bayes_rule():
    data = make_instance(1)
    hp = Hyperparams(v0=0.02, v1=5.0)
    s = random_state(data, hp, np.random.default_rng(2))
    w, d = e_step(s, data, hp)
    for m in range(data.n_blocks):
        cols = np.flatnonzero(data.col_block == m)
        for k in range(data.g):
            sd = np.sqrt(1 / s.nu_inv2[k, cols])
            la = norm.logcdf(s.lam[m, k]) + norm.logpdf(s.B[k, cols], 0, sd * np.sqrt(hp.v1)).sum()
            lb = norm.logcdf(-s.lam[m, k]) + norm.logpdf(s.B[k, cols], 0, sd * np.sqrt(hp.v0)).sum()
            assert w[m, k] == pytest.approx(1 / (1 + np.exp(lb - la)), rel=1e-10, abs=1e-300)
    np.testing.assert_allclose(d, (1 - w) / hp.v0 + w / hp.v1)


def test_e_step_tempering_flattens_toward_half():
    data = make_instance(3)
    hp = Hyperparams()
    s = random_state(data, hp, np.random.default_rng(4))
    w1, _ = e_step(s, data, hp, 1.0)
    wq, _ = e_step(s, data, hp, 0.05)
    assert np.all(np.abs(wq - 0.5) <= np.abs(w1 - 0.5) + 1e-15)
    with pytest.raises(ConfigError):
        e_step(s, data, hp, 0.0)


def test_mills_ratio_is_stable_in_tails():
    x = np.array([-40.0, -5.0, 0.0, 5.0, 40.0])
    r = mills_ratio(x)
    assert np.all(np.isfinite(r))
    assert r[2] == pytest.approx(norm.pdf(0) / 0.5)
    assert r[0] == pytest.approx(40.0, rel=1e-3)  # ~ -x in the left tail


# ---------------------------------------------------------------------------
# M-steps

@pytest.mark.parametrize("solver", ["cholesky", "cg"])
def test_beta_update_solves_normal_equations(solver):
    data = make_instance(5, g=6, widths=(3, 2))
    hp = Hyperparams(beta_solver=solver)
    s = random_state(data, hp, np.random.default_rng(6))
    s.w, s.d = e_step(s, data, hp)
    B = m_step_beta(data, s, hp)
    assert beta_residual(data, B, s.Delta, s.nu_inv2, s.d) < 1e-8


def test_beta_cg_agrees_with_cholesky_at_scale():
    data = make_instance(7, n=80, g=40, widths=(4, 4))  # g p = 320 > dense limit
    hp = Hyperparams()
    s = random_state(data, hp, np.random.default_rng(8))
    s.w, s.d = e_step(s, data, hp)
    B_auto = m_step_beta(data, s, hp)
    B_chol = m_step_beta(data, s, hp.with_(beta_solver="cholesky"))
    np.testing.assert_allclose(B_auto, B_chol, atol=1e-8)


def test_beta_update_maximizes_q():
    data = make_instance(9, g=3, widths=(1, 1))
    hp = Hyperparams()
    res = _resolve(hp, data)
    s = random_state(data, hp, np.random.default_rng(10))
    s.w, s.d = e_step(s, data, hp)
    s.B = m_step_beta(data, s, hp)
    q0 = expected_log_posterior(data, res, s, s.w)
    rng = np.random.default_rng(11)
    for _ in range(20):
        t = s.copy()
        t.B = s.B + 1e-3 * rng.normal(size=s.B.shape)
        assert expected_log_posterior(data, res, t, s.w) < q0


def test_nu_and_delta_updates_are_coordinate_maxima():
    data = make_instance(12, g=2, widths=(1, 1))
    hp = Hyperparams()
    res = _resolve(hp, data)
    s = random_state(data, hp, np.random.default_rng(13))
    s.w, s.d = e_step(s, data, hp)
    nu = m_step_nu(s, hp, data.col_block)
    for (k, j), x_star in np.ndenumerate(nu):
        def negq(x):
            t = s.copy()
            t.nu_inv2 = nu.copy()
            t.nu_inv2[k, j] = x
            return -expected_log_posterior(data, res, t, s.w)
        opt = optimize.minimize_scalar(negq, bounds=(1e-6, 50), method="bounded",
                                       options={"xatol": 1e-10})
        assert opt.x == pytest.approx(x_star, rel=1e-4)
    s.nu_inv2 = nu
    D = m_step_delta(data, s.B, res.delta, res.Psi)
    s.Delta = D
    q_star = expected_log_posterior(data, res, s, s.w)
    rng = np.random.default_rng(14)
    for _ in range(20):
        E = rng.normal(size=D.shape) * 1e-3
        t = s.copy()
        t.Delta = D + (E + E.T) / 2
        assert expected_log_posterior(data, res, t, s.w) < q_star


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_lambda_gradient_matches_finite_differences(seed, g):
    rng = np.random.default_rng(seed)
    lam = rng.normal(0, 2, size=(2, g))
    w = rng.random((2, g))
    mu = rng.normal(size=(2, g))
    A = rng.normal(size=(g, g))
    Li = A @ A.T + np.eye(g)
    f = lambda x: lambda_objective(x.reshape(2, g), w, mu, Li).sum()
    num = numeric_gradient(f, lam.ravel(), 1e-6).reshape(2, g)
    ana = lambda_gradient(lam, w, mu, Li)
    assert np.linalg.norm(ana - num) <= 1e-6 * max(1.0, np.linalg.norm(ana))


@pytest.mark.parametrize("solver", ["newton", "gd"])
def test_lambda_update_minimizes_objective(solver):
    rng = np.random.default_rng(15)
    g = 3
    w = rng.random((2, g))
    mu = rng.normal(size=(2, g))
    A = rng.normal(size=(g, g))
    Lam = A @ A.T + np.eye(g)
    Li = np.linalg.inv(Lam)
    hp = Hyperparams(lambda_solver=solver)
    s = initial_state(make_instance(0, g=g, widths=(1, 1)), hp, mu)
    s.w = w
    lam = m_step_lambda(s, hp, mu, Li)
    for m in range(2):
        ref = optimize.minimize(lambda x: lambda_objective(x[None], w[m:m + 1], mu[m], Li)[0],
                                mu[m], jac=lambda x: lambda_gradient(x[None], w[m:m + 1], mu[m], Li)[0],
                                method="BFGS", options={"gtol": 1e-10})
        np.testing.assert_allclose(lam[m], ref.x, atol=1e-5 if solver == "gd" else 1e-7)


def test_matrix_normal_loglik_matches_scipy():
    data = make_instance(16)
    rng = np.random.default_rng(17)
    B = rng.normal(size=(data.g, data.p))
    A = rng.normal(size=(data.p, data.p))
    D = A @ A.T + np.eye(data.p)
    ref = matrix_normal.logpdf(data.Y, mean=data.X @ B, rowcov=np.eye(data.n), colcov=D)
    assert matrix_normal_loglik(data.Y, data.X, B, D) == pytest.approx(ref, rel=1e-12)


def test_log_posterior_is_q_plus_entropy_at_exact_e_step():
    data = make_instance(18)
    hp = Hyperparams()
    res = _resolve(hp, data)
    s = random_state(data, hp, np.random.default_rng(19))
    w, _ = e_step(s, data, hp)
    lhs = log_posterior(data, res, s)
    assert lhs == pytest.approx(expected_log_posterior(data, res, s, w) + bernoulli_entropy(w),
                                rel=1e-10)
    # Any other w gives a lower bound.
    assert expected_log_posterior(data, res, s, np.full_like(w, 0.3)) + \
        bernoulli_entropy(np.full_like(w, 0.3)) <= lhs + 1e-9


# ---------------------------------------------------------------------------
# EM driver

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 2.0))
def test_em_ascent_at_unit_temperature(seed, signal):
    rng = np.random.default_rng(seed)
    g = int(rng.integers(1, 6))
    widths = tuple(int(v) for v in rng.integers(1, 3, size=int(rng.integers(1, 4))))
    data = make_instance(seed, n=int(rng.integers(10, 40)), g=g, widths=widths, signal=signal)
    hp = Hyperparams(v0=float(rng.uniform(0.001, 0.05)), v1=10.0, max_iter=60)
    s = fit_layer(data, hp, fixed_q=1.0)
    Qs, Qe, lp = map(np.array, (s.Q_start, s.Q_trace, s.logpost_trace))
    slack = 1e-8 * np.maximum(1, np.abs(Qs))
    assert np.all(Qe >= Qs - slack)
    assert np.all(np.diff(lp) >= -1e-8 * np.maximum(1, np.abs(lp[1:])))


def test_annealing_schedule():
    data = make_instance(20)
    s = fit_layer(data, Hyperparams(q0=0.01, q_growth=1.1))
    q = np.array(s.q_trace)
    k = int(np.ceil(np.log(100) / np.log(1.1)))
    np.testing.assert_allclose(q[:k], np.minimum(1, 0.01 * 1.1 ** np.arange(k)))
    assert s.converged and q[-1] == 1.0


def test_fit_recovers_strong_signal():
    data = make_instance(21, n=60, g=5, widths=(2, 2), signal=1.5)
    s = fit_layer_multistart(data, Hyperparams(v0=0.005, v1=10.0))
    assert s.converged
    zeta = s.w > 0.5
    assert zeta[:, 0].all() and zeta[0, 1]
    assert not zeta[:, 2:].any()


def test_multistart_keeps_best_posterior():
    data = make_instance(22, n=25, g=4, widths=(1, 1, 1), signal=1.0)
    hp = Hyperparams(v0=0.002, v1=10.0)
    res = _resolve(hp, data)
    a = fit_layer(data, hp, record_trace=False)
    best = fit_layer_multistart(data, hp)
    one = fit_layer_multistart(data, hp.with_(starts=("annealed",)))
    np.testing.assert_allclose(one.B, a.B)
    assert log_posterior(data, res, best) >= log_posterior(data, res, a) - 1e-9


def test_max_iter_reports_nonconvergence():
    s = fit_layer(make_instance(23), Hyperparams(max_iter=3))
    assert not s.converged and s.n_iter == 3


# ---------------------------------------------------------------------------
# Prior-mean propagation and sequential fit

def test_propagate_mu_policies():
    l1 = np.array([[1.0, -2.0]])
    l2 = np.array([[3.0, 1.0]])
    assert propagate_mu([], 1).size == 0
    np.testing.assert_array_equal(propagate_mu([l1], 1), np.zeros((1, 2)))
    np.testing.assert_allclose(propagate_mu([l1], 2, "positive-part", 0.5), [[0.5, 0.0]])
    np.testing.assert_allclose(propagate_mu([l1], 2, "previous-layer-convex", 0.5), [[0.5, -1.0]])
    np.testing.assert_allclose(propagate_mu([l1], 2, "zero"), [[0.0, 0.0]])
    np.testing.assert_allclose(propagate_mu([l1, l2], 3, "convex-hull"), [[2.0, -0.5]])
    np.testing.assert_allclose(propagate_mu([l1, l2], 3, "autoregressive", weights=(1.0, 2.0)),
                               [[5.0, -3.0]])
    with pytest.raises(ConfigError):
        propagate_mu([l1, l2], 3, "convex-hull", weights=(0.3, 0.3))
    with pytest.raises(NumericalError):
        propagate_mu([l1], 3)


def test_sequential_fit_propagates_mu():
    rng = np.random.default_rng(24)
    X = rng.normal(size=(40, 3))
    datasets = []
    for t in range(1, 4):
        B = np.zeros((3, 2))
        B[0] = 1.0
        datasets.append(make_layer_dataset(X @ B + rng.normal(size=(40, 2)), X, (1, 1), t))
    hp = Hyperparams(v0=0.005, v1=10.0, alpha=0.5)
    states = fit_sequential(datasets, hp)
    np.testing.assert_array_equal(states[0].mu, 0)
    np.testing.assert_allclose(states[1].mu, 0.5 * np.maximum(states[0].lam, 0))
    np.testing.assert_allclose(states[2].mu, 0.5 * np.maximum(states[1].lam, 0))
    with pytest.raises(ConfigError):
        fit_sequential(datasets, [hp])


def test_ols_slab_scale():
    rng = np.random.default_rng(25)
    X = rng.normal(size=(50, 2))
    data = make_layer_dataset(X @ np.array([[3.2], [0.1]]) + 0.01 * rng.normal(size=(50, 1)),
                              X, (1,))
    coef = np.abs(np.linalg.lstsq(data.X, data.Y, rcond=None)[0]).max()
    v1 = ols_slab_scale([data])
    assert v1 > coef and v1 / 10 <= coef
