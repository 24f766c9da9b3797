import numpy as np
import pytest

from oracles import naive_covariance
from multipoet.dgp import generate_model, simulate_panel
from multipoet.errors import (
    InsufficientData,
    InvalidFactorCount,
    InvalidInput,
    InvalidResidualDiagonal,
    NotPositiveDefinite,
    UnknownGroup,
)
from multipoet.estimators import (
    CovEstimate,
    GroupStructure,
    ReturnsPanel,
    ThresholdSpec,
    _make_estimate,
    adaptive_threshold,
    default_tau,
    double_poet,
    double_poet_cov,
    embed_block,
    extract_local_block,
    fit_factors,
    fit_global_factors,
    fit_local_factors,
    pd_guard_tau,
    poet,
    poet2,
    precision_matrix,
    principal_truncation,
    sample_covariance,
    samcov_estimate,
)
from multipoet.linalg import min_eigenvalue, sym_eigen


@pytest.fixture(scope="module")
def sim():
    dgp = generate_model(60, 120, 3, 2, 2, seed=4)
    return dgp, simulate_panel(dgp, seed=5)


# -- containers ---------------------------------------------------------------


def test_panel_validation():
    with pytest.raises(InvalidInput):
        ReturnsPanel(np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(InsufficientData):
        ReturnsPanel(np.zeros((1, 3)))
    with pytest.raises(InvalidInput):
        ReturnsPanel(np.zeros((3, 2)), asset_ids=("a",))
    panel = ReturnsPanel(np.zeros((3, 2)), time_labels=("t1", "t2", "t3"))
    assert panel.asset_ids == ("a0", "a1")
    assert (panel.T, panel.p) == (3, 2)
    with pytest.raises(ValueError):
        panel.values[0, 0] = 1.0


def test_group_structure():
    g = GroupStructure.from_labels(["us", "jp", "us", "de"])
    assert g.names == ("de", "jp", "us")
    np.testing.assert_array_equal(g.membership, [3, 2, 3, 1])
    np.testing.assert_array_equal(g.group_sizes, [1, 1, 2])
    np.testing.assert_array_equal(g.indices(3), [0, 2])
    np.testing.assert_array_equal(g.membership[g.order], [1, 2, 3, 3])
    np.testing.assert_array_equal(g.order[g.inverse_order], np.arange(4))
    with pytest.raises(UnknownGroup):
        g.indices(4)
    with pytest.raises(InvalidInput):
        GroupStructure(np.array([1, 3]))
    with pytest.raises(InvalidInput):
        GroupStructure.equal(10, 3)
    assert GroupStructure.equal(10, 2).J == 2


def test_threshold_spec():
    assert ThresholdSpec(0.1, "sector", ("a", "b")).rule == "sector_block"
    with pytest.raises(InvalidInput):
        ThresholdSpec(-0.1)
    with pytest.raises(InvalidInput):
        ThresholdSpec(0.1, "sector_block")
    with pytest.raises(InvalidInput):
        ThresholdSpec(0.1, "lasso")


# -- sample covariance and truncation ----------------------------------------


def test_sample_covariance_two_points():
    np.testing.assert_allclose(sample_covariance(np.array([[0.0, 0.0], [2.0, 2.0]])), [[1, 1], [1, 1]])


def test_sample_covariance_constant():
    np.testing.assert_array_equal(sample_covariance(np.full((5, 3), 2.5)), np.zeros((3, 3)))


def test_sample_covariance_naive_loop():
    rng = np.random.default_rng(8)
    L = rng.standard_normal((10, 10)) * 0.3
    Sigma = L @ L.T + np.eye(10)
    Y = rng.multivariate_normal(np.zeros(10), Sigma, size=500)
    S = sample_covariance(Y)
    np.testing.assert_allclose(S, naive_covariance(Y), atol=1e-12, rtol=0)
    assert np.max(np.abs(S - Sigma)) < 0.35
    assert min_eigenvalue(S) >= -1e-10


def test_sample_covariance_short():
    with pytest.raises(InsufficientData):
        sample_covariance(np.ones((1, 4)))


def test_principal_truncation():
    S = np.diag([9.0, 1.0])
    low, rest = principal_truncation(S, 1)
    np.testing.assert_allclose(low, np.diag([9.0, 0.0]))
    np.testing.assert_allclose(rest, np.diag([0.0, 1.0]))
    low, rest = principal_truncation(S, 0)
    np.testing.assert_array_equal(low, 0.0)
    np.testing.assert_array_equal(rest, S)
    rng = np.random.default_rng(1)
    X = rng.standard_normal((8, 5))
    M = X.T @ X
    low, rest = principal_truncation(M, 5)
    np.testing.assert_allclose(rest, 0.0, atol=1e-10)
    low, rest = principal_truncation(M, 2)
    # rest is formed as S - low, so the sum returns S up to one rounding
    np.testing.assert_allclose(low + rest, M, rtol=1e-14, atol=1e-14 * np.abs(M).max())
    with pytest.raises(InvalidFactorCount):
        principal_truncation(M, 6)


# -- thresholding --------------------------------------------------------------


def test_threshold_examples():
    R = np.array([[1.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(adaptive_threshold(R, ThresholdSpec(0.0)), R)
    np.testing.assert_allclose(adaptive_threshold(R, ThresholdSpec(0.2)), [[1, 0.3], [0.3, 1]])
    R = np.array([[1.0, 0.1], [0.1, 1.0]])
    np.testing.assert_allclose(adaptive_threshold(R, ThresholdSpec(0.2, "hard")), np.eye(2))


def test_threshold_entry_adaptive():
    R = np.array([[4.0, 0.5, 0.5], [0.5, 1.0, 0.05], [0.5, 0.05, 0.25]])
    out = adaptive_threshold(R, ThresholdSpec(0.2, "hard"))
    # thresholds: 0.2*2=0.4 for (0,1), 0.2*1=0.2 for (0,2), 0.2*0.5=0.1 for (1,2)
    np.testing.assert_allclose(out, [[4, 0.5, 0.5], [0.5, 1, 0], [0.5, 0, 0.25]])


def test_threshold_sector_block():
    R = np.full((3, 3), 0.3) + 0.7 * np.eye(3)
    out = adaptive_threshold(R, ThresholdSpec(5.0, "sector_block", ("x", "y", "x")))
    np.testing.assert_allclose(out, [[1, 0, 0.3], [0, 1, 0], [0.3, 0, 1]])
    with pytest.raises(InvalidInput):
        adaptive_threshold(R, ThresholdSpec(0.0, "sector_block", ("x", "y")))


def test_threshold_bad_diagonal():
    with pytest.raises(InvalidResidualDiagonal):
        adaptive_threshold(np.array([[0.0, 0.1], [0.1, 1.0]]), ThresholdSpec(0.1))


def test_threshold_zero_rows_pass_through():
    R = np.diag([0.0, 1.0, 2.0])
    R[1, 2] = R[2, 1] = 0.5
    out = adaptive_threshold(R, ThresholdSpec(0.1))
    assert out[0, 0] == 0.0
    assert out[1, 2] == pytest.approx(0.5 - 0.1 * np.sqrt(2))


def test_default_tau():
    assert default_tau(100, 400) == pytest.approx(0.5 * (np.sqrt(np.log(100) / 400) + 0.1))
    assert default_tau(300, 300, 30, C=1.0) == pytest.approx(np.sqrt(np.log(300) / 300) + 1 / np.sqrt(30))


def test_pd_guard_tau():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((20, 40))
    R = X.T @ X / 20
    spec = ThresholdSpec(0.01)
    assert min_eigenvalue(adaptive_threshold(R, spec)) < 0
    tau = pd_guard_tau(R, spec, 0.1)
    out = adaptive_threshold(R, ThresholdSpec(tau))
    assert min_eigenvalue(out) >= 0.1 * np.diag(R).min() - 1e-12
    # slightly below the returned value the guard condition fails
    below = adaptive_threshold(R, ThresholdSpec(tau * 0.99))
    assert min_eigenvalue(below) < 0.1 * np.diag(R).min()
    assert pd_guard_tau(np.eye(3), ThresholdSpec(0.2), 0.1) == 0.2
    with pytest.raises(InvalidInput):
        pd_guard_tau(R, spec, 0.0)


# -- least-squares factors -----------------------------------------------------


def test_global_factors_rank_one():
    rng = np.random.default_rng(0)
    g, b = rng.standard_normal(50), rng.standard_normal(7)
    Y = np.outer(g, b)
    Y -= Y.mean(axis=0)
    G, B, E = fit_global_factors(Y, 1)
    np.testing.assert_allclose(E, 0.0, atol=1e-8)
    np.testing.assert_allclose(G.T @ G / 50, [[1.0]], atol=1e-8)


def test_global_factors_full_rank():
    rng = np.random.default_rng(1)
    Y = rng.standard_normal((30, 3)) @ rng.standard_normal((3, 9))
    _, _, E = fit_global_factors(Y, 3)
    np.testing.assert_allclose(E, 0.0, atol=1e-8)
    with pytest.raises(InvalidFactorCount):
        fit_global_factors(Y, 31)


def test_global_factors_match_pca_path(sim):
    dgp, panel = sim
    G, B, E = fit_global_factors(panel, 2)
    T = panel.T
    np.testing.assert_allclose(G.T @ G / T, np.eye(2), atol=1e-8)
    BtB = B.T @ B
    np.testing.assert_allclose(BtB - np.diag(np.diag(BtB)), 0.0, atol=1e-8)
    low, _ = principal_truncation(sample_covariance(panel), 2)
    assert np.max(np.abs(B @ B.T - low)) <= 1e-8


def test_local_factors_zero_counts(sim):
    _, panel = sim
    _, _, E = fit_global_factors(panel, 2)
    F, Lam, U = fit_local_factors(E, GroupStructure.equal(60, 3), 0)
    np.testing.assert_array_equal(U, E)
    assert F.shape == (panel.T, 0)


def test_local_factors_single_group(sim):
    _, panel = sim
    _, _, E = fit_global_factors(panel, 2)
    F, Lam, U = fit_local_factors(E, GroupStructure.equal(60, 1), 3)
    G2, B2, E2 = fit_global_factors(E, 3)
    np.testing.assert_allclose(U, E2, atol=1e-10)
    np.testing.assert_allclose(Lam @ Lam.T, B2 @ B2.T, atol=1e-10)


def test_local_factors_structure_and_pca_path(sim):
    dgp, panel = sim
    groups = dgp.groups
    fe = fit_factors(panel, 2, groups, 2)
    T = panel.T
    est = double_poet(panel, 2, groups, 2, ThresholdSpec(0.0))
    col = 0
    for j in range(1, 4):
        idx = groups.indices(j)
        other = np.setdiff1d(np.arange(60), idx)
        cols = slice(col, col + 2)
        Fj, Lj = fe.F_hat[:, cols], fe.Lambda_hat[:, cols]
        np.testing.assert_array_equal(Lj[other], 0.0)
        np.testing.assert_allclose(Fj.T @ Fj / T, np.eye(2), atol=1e-8)
        LtL = Lj[idx].T @ Lj[idx]
        np.testing.assert_allclose(LtL - np.diag(np.diag(LtL)), 0.0, atol=1e-8)
        ix = np.ix_(idx, idx)
        assert np.max(np.abs((Lj @ Lj.T)[ix] - est.local_part[ix])) <= 1e-8
        col += 2


def test_local_factors_too_many(sim):
    _, panel = sim
    _, _, E = fit_global_factors(panel, 2)
    with pytest.raises(InvalidFactorCount):
        fit_local_factors(E, GroupStructure.equal(60, 3), 21)


# -- estimators ----------------------------------------------------------------


def test_double_poet_degenerate_is_samcov(sim):
    _, panel = sim
    est = double_poet(panel, 0, GroupStructure.equal(60, 3), 0, ThresholdSpec(0.0))
    np.testing.assert_allclose(est.assembled, sample_covariance(panel), atol=1e-14)


def test_double_poet_single_group_is_poet(sim):
    _, panel = sim
    spec = ThresholdSpec(0.3)
    a = double_poet(panel, 2, GroupStructure.equal(60, 1), 0, spec)
    b = poet(panel, 2, spec)
    np.testing.assert_array_equal(a.assembled, b.assembled)


def test_double_poet_invariants(sim):
    dgp, panel = sim
    groups = dgp.groups
    est = double_poet(panel, 2, groups, [2, 1, 3], ThresholdSpec(0.4))
    assert isinstance(est, CovEstimate)
    np.testing.assert_array_equal(est.assembled, est.global_part + est.local_part + est.residual_part)
    same = groups.membership[:, None] == groups.membership[None, :]
    assert np.all(est.local_part[~same] == 0.0)
    S = sample_covariance(panel)
    _, S_E = principal_truncation(S, 2)
    pre = S_E - est.local_part
    np.testing.assert_allclose(np.diag(est.residual_part), np.diag(pre), atol=1e-12)
    assert est.r_used == (2, 1, 3)
    assert est.method == "double_poet"
    with pytest.raises(ValueError):
        est.assembled[0, 0] = 0.0


def test_double_poet_group_too_small():
    panel = np.random.default_rng(0).standard_normal((20, 6))
    with pytest.raises(InvalidFactorCount):
        double_poet(panel, 0, GroupStructure(np.array([1, 1, 2, 2, 2, 2])), 2, ThresholdSpec(0.1))


def test_double_poet_non_contiguous_groups(sim):
    dgp, panel = sim
    perm = np.random.default_rng(9).permutation(60)
    spec = ThresholdSpec(0.3)
    base = double_poet(panel, 2, dgp.groups, 2, spec)
    moved = double_poet(panel.values[:, perm], 2, dgp.groups.permuted(perm), 2, spec)
    np.testing.assert_allclose(moved.assembled, base.assembled[np.ix_(perm, perm)], atol=1e-10)


def test_poet_degenerate(sim):
    _, panel = sim
    S = sample_covariance(panel)
    np.testing.assert_allclose(poet(panel, 0, ThresholdSpec(0.0)).assembled, S, atol=1e-14)
    short = panel.values[:, :10]
    est = poet(short, 10, ThresholdSpec(0.5))
    np.testing.assert_allclose(est.residual_part, 0.0, atol=1e-10)
    np.testing.assert_allclose(est.assembled, sample_covariance(short), atol=1e-10)


def test_poet2(sim):
    _, panel = sim
    spec = ThresholdSpec(0.3)
    a, b = poet2(panel, 2, 0, spec), poet(panel, 2, spec)
    np.testing.assert_array_equal(a.assembled, b.assembled)
    assert a.method == "poet2"
    short = panel.values[:, :8]
    np.testing.assert_allclose(poet2(short, 3, 5, ThresholdSpec(0.0)).assembled, sample_covariance(short), atol=1e-10)
    with pytest.raises(InvalidFactorCount):
        poet2(short, 3, 6, spec)


def test_samcov_estimate(sim):
    _, panel = sim
    est = samcov_estimate(panel)
    np.testing.assert_array_equal(est.assembled, sample_covariance(panel))
    assert est.k_used == 0


# -- precision and blocks ------------------------------------------------------


def _plain(M):
    p = M.shape[0]
    return _make_estimate("test", np.zeros((p, 0)), np.zeros(0), np.zeros((p, 0)), np.zeros(0), M, 0, (), 0.0)


def test_precision_simple():
    np.testing.assert_allclose(precision_matrix(_plain(np.eye(4))), np.eye(4))
    np.testing.assert_allclose(precision_matrix(_plain(np.diag([2.0, 4.0]))), np.diag([0.5, 0.25]))


def test_precision_matches_dense(sim):
    dgp, panel = sim
    est = double_poet_cov(sample_covariance(panel), 2, dgp.groups, 2, ThresholdSpec(0.2), pd_floor=0.1)
    P = precision_matrix(est)
    D = np.linalg.inv(est.assembled)
    assert np.max(np.abs(P - D)) <= 1e-6 * np.max(np.abs(D))


def test_precision_not_pd():
    with pytest.raises(NotPositiveDefinite):
        precision_matrix(_plain(np.diag([1.0, 0.0])))


def test_extract_block_single_group(sim):
    _, panel = sim
    est = double_poet(panel, 2, GroupStructure.equal(60, 1), 2, ThresholdSpec(0.5))
    blk = extract_local_block(est, GroupStructure.equal(60, 1), 1)
    np.testing.assert_array_equal(blk.assembled, est.assembled)
    np.testing.assert_array_equal(blk.local_vectors, est.local_vectors)


def test_extract_and_embed_round_trip(sim):
    dgp, panel = sim
    groups = dgp.groups
    est = double_poet(panel, 2, groups, 2, ThresholdSpec(5.0))
    out = np.zeros((60, 60))
    for j in range(1, 4):
        blk = extract_local_block(est, groups, j)
        idx = groups.indices(j)
        np.testing.assert_array_equal(blk.assembled, est.assembled[np.ix_(idx, idx)])
        assert blk.local_vectors.shape[1] == 2
        np.testing.assert_allclose(precision_matrix(blk), np.linalg.inv(blk.assembled), rtol=1e-6, atol=1e-8)
        embed_block(blk.assembled, groups, j, out)
    same = groups.membership[:, None] == groups.membership[None, :]
    np.testing.assert_array_equal(out[same], est.assembled[same])
    with pytest.raises(UnknownGroup):
        extract_local_block(est, groups, 4)


def test_eigen_of_structured_estimate_is_symmetric(sim):
    dgp, panel = sim
    est = double_poet(panel, 2, dgp.groups, 2, ThresholdSpec(0.5))
    sym_eigen(est.assembled)
