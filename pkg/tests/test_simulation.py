import numpy as np
import pytest

from layered_bvs.errors import ConfigError
from layered_bvs.model import Hyperparams
from layered_bvs.simulation import (
    SimDesign,
    SimTruth,
    case2_truth_zeta,
    compute_metrics,
    gen_sigma_x,
    make_rng,
    phantom_cohort,
    replicate,
    replication_seeds,
    sample_inverse_wishart,
    scenario_hyperparams,
    simulate,
    table_rows,
)


def test_inverse_wishart_mean():
    rng = make_rng(0)
    p, df = 3, 9.0
    S = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 1.5]])
    draws = np.array([sample_inverse_wishart(df, S, rng) for _ in range(20000)])
    np.testing.assert_allclose(draws.mean(axis=0), S / (df - p - 1), atol=0.02)
    for D in draws[:50]:
        np.linalg.cholesky(D)


def test_iw_conventions():
    d = SimDesign(p_per_block=3, n_blocks=4)
    assert d.iw_df() == 12 + 12 - 1
    assert SimDesign(iw_convention="standard").iw_df() == 12
    assert SimDesign(gen_delta=15.0, iw_convention="standard").iw_df() == 15
    with pytest.raises(ConfigError):
        SimDesign(iw_convention="other")


@pytest.mark.parametrize("kind", ["identity", "block2x2", "block4x4"])
def test_sigma_x_designs_are_positive_definite(kind):
    S = gen_sigma_x(kind, 20)
    np.linalg.cholesky(S)
    np.testing.assert_allclose(S, S.T)


def test_sigma_x_block_structure():
    S = gen_sigma_x("block4x4", 20)
    assert S[0, 1] == 0.8 and S[0, 5] == 0.5 and S[0, 15] == 0.0 and S[15, 16] == 0.8
    S2 = gen_sigma_x("block2x2", 20)
    assert S2[0, 0] == 10 and S2[0, 1] == 9 and S2[10, 10] == 1 and S2[0, 10] == 0
    with pytest.raises(ConfigError):
        gen_sigma_x("block4x4", 10)
    with pytest.raises(ConfigError):
        gen_sigma_x("nope")


def test_design_validation():
    with pytest.raises(ConfigError):
        SimDesign(case="case3")
    with pytest.raises(ConfigError):
        SimDesign(sigma2=0.0)
    with pytest.raises(ConfigError):
        SimDesign(case="case2", blocks=((15, 9),))
    with pytest.raises(ConfigError):
        SimDesign(case="case2", blocks=((15, 8), (10, 6), (5, 3)))


def test_case2_truth_is_nested_blocks():
    z = case2_truth_zeta(SimDesign(case="case2"))
    assert [int(x.sum()) for x in z] == [15 * 3, 10 * 2, 5 * 1]
    assert z[0][:3, :15].all() and not z[0][3].any()
    for a, b in zip(z, z[1:]):
        assert np.all(b <= a)


@pytest.mark.parametrize("case", ["case1", "case2"])
def test_simulate_shapes_and_determinism(case):
    design = SimDesign(case=case, n=30, sigma_x="block4x4" if case == "case2" else "identity")
    a = simulate(design, make_rng(7))
    b = simulate(design, make_rng(7))
    assert a.X.shape == (30, 20)
    assert len(a.Y) == 3 and a.Y[0].shape == (30, 12)
    assert a.zeta[0].shape == (4, 20)
    for x, y in zip(a.Y, b.Y):
        np.testing.assert_array_equal(x, y)
    if case == "case2":
        for B, z in zip(a.B, a.zeta):
            # Nonzero coefficients sit exactly inside the true block.
            nz = np.abs(B) > 0
            zfull = z[np.repeat(np.arange(4), 3)].T.astype(bool)
            np.testing.assert_array_equal(nz, zfull)


def test_case1_coefficients_follow_indicators():
    design = SimDesign(n=20, gen_v0=1e-6, gen_v1=1.0)
    truth = simulate(design, make_rng(3))
    for B, z in zip(truth.B, truth.zeta):
        zfull = z[np.repeat(np.arange(4), 3)].T.astype(bool)
        assert np.abs(B[~zfull]).max() < 0.05
    assert truth.lam is not None and len(truth.lam) == 3


def test_compute_metrics_hand_example():
    z = np.array([[1, 0, 1, 0]])
    B = np.array([[1.0], [0.0], [2.0], [0.0]])
    truth = SimTruth(np.zeros((2, 4)), [np.zeros((2, 1))], [B], [z], [np.eye(1)])
    w = np.array([[0.9, 0.6, 0.2, 0.1]])
    Bh = np.array([[1.5], [0.5], [0.0], [0.0]])
    m = compute_metrics(truth, [w], [Bh])
    assert m["tpr"][0] == 0.5 and m["fpr"][0] == 0.5
    assert m["e_w"][0] == pytest.approx(np.mean([0.1, 0.6, 0.8, 0.1]))
    assert m["e_beta"][0] == pytest.approx((0.25 + 0.25 + 4.0) / 4)
    assert m["tpr_all"] == 0.5 and m["e_w_all"] == pytest.approx(m["e_w"][0])


def test_metrics_without_positives_are_nan():
    truth = SimTruth(np.zeros((2, 2)), [np.zeros((2, 1))], [np.zeros((2, 1))],
                     [np.zeros((1, 2))], [np.eye(1)])
    m = compute_metrics(truth, [np.zeros((1, 2))], [np.zeros((2, 1))])
    assert np.isnan(m["tpr"][0]) and m["fpr"][0] == 0.0


def test_scenario_hyperparams():
    a = scenario_hyperparams("A", 5)
    d = scenario_hyperparams("D", 5)
    assert a.mu_policy == "positive-part" and a.Lambda is None
    assert d.mu_policy == "zero"
    np.testing.assert_array_equal(d.Lambda, np.eye(5))
    assert scenario_hyperparams("B", 5).mu_policy == "zero"
    assert scenario_hyperparams("C", 5).Lambda is not None
    with pytest.raises(ConfigError):
        scenario_hyperparams("E", 5)


def test_replication_seeds_are_stable():
    a = [s.generate_state(2).tolist() for s in replication_seeds(9, 3)]
    b = [s.generate_state(2).tolist() for s in replication_seeds(9, 5)[:3]]
    assert a == b


SMALL = SimDesign(n=40, g=6, tau=2, p_per_block=1, n_blocks=2)


def test_replicate_is_order_and_worker_independent():
    grid = [0.002, 0.01]
    r1 = replicate(SMALL, ("A", "B"), 2, grid, master_seed=4, threads=1)
    r2 = replicate(SMALL, ("B", "A"), 2, grid, master_seed=4, threads=2)
    for sc in ("A", "B"):
        np.testing.assert_array_equal(r1.values(sc, "tpr"), r2.values(sc, "tpr"))
        np.testing.assert_array_equal(r1.values(sc, "e_beta"), r2.values(sc, "e_beta"))


def test_table_rows_cartesian_structure():
    rows = []
    for s2 in (1.0, 10.0):
        rep = replicate(SimDesign(n=40, g=6, tau=3, p_per_block=1, n_blocks=2, sigma2=s2),
                        ("A", "B"), 2, [0.005], master_seed=1,
                        hp_base=Hyperparams(a1=4.0, a2=5.0, alpha=0.5))
        rows += table_rows(rep)
    assert len(rows) == 2 * 2 * 3
    assert {(r["scenario"], r["sigma2"], r["layer"]) for r in rows} == {
        (s, v, t) for s in "AB" for v in (1.0, 10.0) for t in (1, 2, 3)}
    for r in rows:
        assert r["n_ok"] + r["n_failed"] == 2
        assert 0 <= r["tpr_mean"] <= 1 or np.isnan(r["tpr_mean"])


def test_replicate_rejects_bad_input():
    with pytest.raises(ConfigError):
        replicate(SMALL, ("Z",), 1)
    with pytest.raises(ConfigError):
        replicate(SMALL, ("A",), 0)


def test_phantom_cohort():
    cohort = phantom_cohort(3, make_rng(2))
    assert len(cohort) == 3
    for g in cohort:
        assert g.n_masked > 100
        assert g.sequences == ("FLAIR", "T1", "T1Gd", "T2")
