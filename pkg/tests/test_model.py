import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from missmult.model import (
    CovariateBundle, Dataset, Hyperparameters, InvariantError, LatentState, RecordTable,
    canonical_variant, check_state, compose_confusion, derive, dmdm_nu_diagonal, log_joint,
    logistic, logit, normalize_rows,
)


# -- transforms -------------------------------------------------------------

def test_logistic_values():
    assert logistic(0.0) == 0.5
    assert abs(logistic(40.0) - 1.0) < 1e-15
    assert logistic(-1.0986122886681098) == pytest.approx(0.25, abs=1e-12)
    assert logistic(logit(0.25)) == pytest.approx(0.25, abs=1e-15)


def test_logistic_is_stable_at_extremes():
    out = logistic(np.array([-700.0, 700.0]))
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-300) and out[1] == 1.0


def test_normalize_rows_examples():
    np.testing.assert_allclose(normalize_rows([[2, 2]]), [[0.5, 0.5]])
    np.testing.assert_allclose(normalize_rows(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(normalize_rows([[1, 3]]), [[0.25, 0.75]])


def test_normalize_rows_rejects_zero_row():
    with pytest.raises(InvariantError):
        normalize_rows([[1.0, 1.0], [0.0, 0.0]])


def test_compose_confusion_examples():
    theta = np.array([[0.2, 0.8], [0.6, 0.4]])
    np.testing.assert_allclose(compose_confusion([0.0, 0.0], theta), np.eye(2))
    np.testing.assert_allclose(compose_confusion([1.0, 1.0], theta), theta)
    np.testing.assert_allclose(compose_confusion([0.5, 0.5], theta), [[0.6, 0.4], [0.3, 0.7]])


def test_compose_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        compose_confusion([0.5, 0.5, 0.5], np.eye(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_confusion_rows_sum_to_one(T, seed):
    rng = np.random.default_rng(seed)
    theta = rng.dirichlet(np.ones(T), size=T)
    out = compose_confusion(rng.random(T), theta)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_no_lucky_guess_confusion_diagonal():
    rng = np.random.default_rng(1)
    a = rng.gamma(1.0, size=(4, 4))
    np.fill_diagonal(a, 0.0)
    psi = rng.random(4)
    conf = compose_confusion(psi, normalize_rows(a))
    assert np.array_equal(np.diag(normalize_rows(a)), np.zeros(4))
    np.testing.assert_array_equal(np.diag(conf), 1.0 - psi)


def test_dmdm_nu_diagonal_examples():
    assert dmdm_nu_diagonal(0.0, 10) == pytest.approx(11.0)
    assert dmdm_nu_diagonal(40.0, 10) == pytest.approx(1.0)
    assert dmdm_nu_diagonal(logit(0.25), 4) == pytest.approx(13.0)
    with pytest.raises(ValueError):
        dmdm_nu_diagonal(-800.0, 3)


def test_canonical_variant():
    assert canonical_variant("misszidm") == "missZIDM"
    with pytest.raises(ValueError):
        canonical_variant("zip")


# -- hyperparameters ---------------------------------------------------------

def test_hyperparameter_defaults_and_nu_matrix():
    h = Hyperparameters()
    assert h.mu_gamma == 0.0 and h.sigma2_psi == h.sigma2_eta == h.sigma2_gamma == 1.0
    np.testing.assert_array_equal(h.nu_matrix(3, 3), np.ones((3, 3)))
    nlg = Hyperparameters(no_lucky_guess=True).nu_matrix(3, 3)
    np.testing.assert_array_equal(np.diag(nlg), 0.0)
    dm = Hyperparameters(variant="DMDM").nu_matrix(10, 10)
    np.testing.assert_allclose(np.diag(dm), 11.0)


@pytest.mark.parametrize("field", ["sigma2_psi", "sigma2_eta", "sigma2_gamma"])
def test_hyperparameters_reject_nonpositive_variance(field):
    with pytest.raises(ValueError):
        Hyperparameters(**{field: 0.0})


def test_nu_matrix_rejects_zero_off_diagonal():
    nu = np.ones((2, 2))
    nu[0, 1] = 0.0
    with pytest.raises(InvariantError):
        Hyperparameters(nu=nu).nu_matrix(2, 2)


def test_prior_mean_per_class():
    h = Hyperparameters()
    np.testing.assert_array_equal(h.prior_mean(0.5, 3), [0.5, 0.0, 0.0])
    np.testing.assert_array_equal(h.prior_mean([1.0, 2.0], 2), [[1.0, 0.0], [2.0, 0.0]])


# -- data containers ----------------------------------------------------------

def test_dataset_build_sorts_and_counts():
    data = Dataset.build(site=[1, 0, 0, 1], visit=[0, 1, 0, 0], observed=[2, 1, 0, 2], C=3,
                         individual=[1, 0, 0, 0])
    assert data.dims.N == 2 and data.dims.V == 3 and data.dims.M == 4
    np.testing.assert_array_equal(data.dims.L, [1, 1, 2])
    np.testing.assert_array_equal(data.visit_site, [0, 0, 1])
    np.testing.assert_array_equal(data.y, [0, 1, 2, 2])
    np.testing.assert_array_equal(data.counts(data.y), [[1, 0, 0], [0, 1, 0], [0, 0, 2]])


def test_dataset_drops_empty_visits_with_warning():
    with pytest.warns(UserWarning, match="dropped 1 visit"):
        data = Dataset.build(site=[0, 0], visit=[0, 2], observed=[0, 1], C=2,
                             visits_per_site=[3], x_visit=np.ones((3, 1)))
    assert data.dims.V == 2 and data.n_dropped_visits == 1


def test_dataset_rejects_bad_classes():
    with pytest.raises(InvariantError):
        Dataset.build(site=[0], visit=[0], observed=[3], C=3)
    with pytest.raises(InvariantError):
        Dataset.build(site=[0], visit=[0], observed=[0], validated=[5], C=3)


def test_covariate_bundle_requires_intercept():
    data = Dataset.build(site=[0, 1], visit=[0, 0], observed=[0, 1], C=2)
    bad = CovariateBundle(np.zeros((2, 1)), np.ones((2, 1)), np.ones((2, 1)))
    with pytest.raises(InvariantError):
        bad.validate(data.dims)


def test_record_table_roundtrip():
    table = RecordTable(site=np.array([0, 0]), visit=np.array([0, 0]),
                        individual=np.array([0, 1]), observed=np.array([1, 0]),
                        validated=np.array([-1, 0]), visits_per_site=np.array([1]), C=2)
    recs = list(table)
    assert recs[0].validated_class is None and recs[1].validated_class == 0
    data = table.to_dataset()
    assert [r.observed_class for r in data.records()] == [1, 0]


# -- log joint -------------------------------------------------------------------

def _tiny(validated=None):
    # N=1, n=1, L=2, T=2
    data = Dataset.build(site=[0, 0], visit=[0, 0], observed=[0, 1], validated=validated, C=2)
    state = LatentState(
        z=np.array([0, 0]), tau=np.array([0, 1]),
        zeta=np.array([[1, 1]]), alpha=np.array([[0.7, 1.9]]),
        a=np.array([[0.4, 1.3], [0.8, 0.5]]), u=np.array([0.6, 1.1]), mu=np.array([2.2]),
        omega_tau=np.array([0.3, 0.2]), omega_zeta=np.array([[0.25, 0.4]]),
        beta_psi=np.array([[-0.4], [0.3]]), beta_eta=np.array([[0.9], [-0.2]]),
        beta_gamma=np.array([[0.1], [-0.3]]),
    )
    return data, state


def _oracle_log_joint(state, hyper):
    """Direct sum of scipy densities for the tiny fixture (no auxiliaries)."""
    y = [0, 1]
    total = 0.0
    for l in range(2):
        t = state.z[l]
        psi = 1 / (1 + np.exp(-state.beta_psi[t, 0]))
        if state.tau[l] == 1:
            theta = state.a[t] / state.a[t].sum()
            total += np.log(psi) + np.log(theta[y[l]])
        else:
            total += np.log(1 - psi)
        total += np.log(state.alpha[0, t] / state.alpha[0].sum())
    for t in range(2):
        eta = 1 / (1 + np.exp(-state.beta_eta[t, 0]))
        total += stats.bernoulli.logpmf(state.zeta[0, t], eta)
        total += stats.gamma.logpdf(state.alpha[0, t], np.exp(state.beta_gamma[t, 0]))
        for c in range(2):
            total += stats.gamma.logpdf(state.a[t, c], 1.0)
        total += stats.norm.logpdf(state.beta_psi[t, 0], hyper.mu_psi, 1.0)
        total += stats.norm.logpdf(state.beta_eta[t, 0], hyper.mu_eta, 1.0)
        total += stats.norm.logpdf(state.beta_gamma[t, 0], hyper.mu_gamma, 1.0)
    return total


def test_log_joint_matches_independent_oracle():
    data, state = _tiny()
    hyper = Hyperparameters(mu_psi=-0.5, mu_eta=0.3)
    assert log_joint(state, data, hyper, augmented=False) == pytest.approx(
        _oracle_log_joint(state, hyper), abs=1e-10)


def test_log_joint_tau_ratio():
    data, state = _tiny()
    hyper = Hyperparameters()
    # individual 0 has y = z = 0; flip its tau
    hit = log_joint(state, data, hyper, augmented=False)
    miss_state = state.copy()
    miss_state.tau[0] = 1
    miss = log_joint(miss_state, data, hyper, augmented=False)
    psi = logistic(state.beta_psi[0, 0])
    theta_00 = state.a[0, 0] / state.a[0].sum()
    assert np.exp(miss - hit) == pytest.approx(psi * theta_00 / (1 - psi), rel=1e-10)


def test_log_joint_single_term_contributions():
    data, state = _tiny()
    hyper = Hyperparameters()
    base = log_joint(state, data, hyper, augmented=False)
    # dropping individual 1's classification term by moving it onto a hit is
    # impossible (y != z), so compare against the closed form directly
    psi1 = logistic(state.beta_psi[0, 0])
    th = normalize_rows(state.a)
    expected_cls = np.log(1 - psi1) + np.log(psi1) + np.log(th[0, 1])
    other = _oracle_log_joint(state, hyper) - expected_cls
    assert base - other == pytest.approx(expected_cls, abs=1e-10)


def test_log_joint_augmented_adds_auxiliary_terms():
    data, state = _tiny()
    hyper = Hyperparameters()
    aug = log_joint(state, data, hyper, augmented=True)
    assert np.isfinite(aug) and aug != log_joint(state, data, hyper, augmented=False)


def test_log_joint_order_invariant():
    rng = np.random.default_rng(3)
    site = np.repeat([0, 1, 2], 4)
    visit = np.zeros(12, dtype=int)
    obs = rng.integers(0, 3, 12)
    perm = rng.permutation(12)
    d1 = Dataset.build(site, visit, obs, C=3, individual=np.tile(np.arange(4), 3))
    d2 = Dataset.build(site[perm], visit[perm], obs[perm], C=3,
                       individual=np.tile(np.arange(4), 3)[perm])
    np.testing.assert_array_equal(d1.y, d2.y)
    from missmult.gibbs import initialize_state
    from missmult.rand import make_rng
    hyper = Hyperparameters()
    s = initialize_state(d1, hyper, make_rng(0))
    assert log_joint(s, d1, hyper) == log_joint(s, d2, hyper)


def test_log_joint_zero_probability_is_minus_inf():
    data, state = _tiny()
    hyper = Hyperparameters()
    state.a[0, 1] = 0.0      # individual 1 is a miss reported as class 1 from true class 0
    assert log_joint(state, data, hyper) == -np.inf


def test_check_state_violations():
    data, state = _tiny()
    hyper = Hyperparameters()
    bad = state.copy()
    bad.tau[1] = 0           # y != z but marked as a hit
    with pytest.raises(InvariantError):
        check_state(bad, data, hyper)
    bad = state.copy()
    bad.zeta[0, 0] = 0       # occupied class switched off
    bad.alpha[0, 0] = 0.0
    with pytest.raises(InvariantError):
        check_state(bad, data, hyper)
    with pytest.raises(InvariantError):
        log_joint(bad, data, hyper)


def test_derive_rows_are_stochastic():
    data, state = _tiny()
    d = derive(state, data, Hyperparameters())
    np.testing.assert_allclose(d.Theta.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(d.theta.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(d.confusion.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(d.gamma_rate > 0)
    dm = derive(state, data, Hyperparameters(variant="DMDM"))
    np.testing.assert_allclose(dm.confusion, dm.theta)
