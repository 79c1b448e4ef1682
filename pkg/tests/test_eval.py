import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import mstats

from missmult.eval import (
    MetricReport, abs_metric, coverage_metric, frob_metric, gelman_rubin, generating_prior,
    posterior_summary, replicate_seeds, replicate_study, score_draws, summary_rows,
)
from missmult.gibbs import RunConfig
from missmult.model import logit
from missmult.simgen import Scenario1Config, Scenario2Config


def test_abs_metric_examples():
    assert abs_metric([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert abs_metric([0.6], [0.5]) == pytest.approx(0.1)
    assert abs_metric([0.2, 0.8], [0.4, 0.6]) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        abs_metric([0.1, 0.2], [0.1])


def test_frob_metric_examples():
    assert frob_metric(np.eye(2), np.eye(2)) == 0.0
    assert frob_metric([0.3], [0.0]) == pytest.approx(0.3)
    assert frob_metric([0.3, 0.4], [0.0, 0.0]) == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.integers(0, 2**31 - 1))
def test_metrics_permutation_invariant_and_consistent(vals, seed):
    est = np.asarray(vals)
    tru = np.random.default_rng(seed).random(est.size)
    perm = np.random.default_rng(seed + 1).permutation(est.size)
    assert abs_metric(est[perm], tru[perm]) == pytest.approx(abs_metric(est, tru))
    assert frob_metric(est[perm], tru[perm]) == pytest.approx(frob_metric(est, tru))
    assert frob_metric(est, tru) ** 2 == pytest.approx(np.sum((est - tru) ** 2))
    # mean |d| <= sqrt(mean d^2) = frob / sqrt(n)
    assert abs_metric(est, tru) <= frob_metric(est, tru) / np.sqrt(est.size) + 1e-12


def test_coverage_examples():
    assert coverage_metric(np.full((200, 3), 0.4), np.full(3, 0.4)) == 1.0
    assert coverage_metric(np.random.default_rng(0).random((200, 3)), np.full(3, 2.0)) == 0.0
    z = np.random.default_rng(1).standard_normal((400, 10_000))
    assert coverage_metric(z, np.zeros(10_000)) == 1.0
    assert coverage_metric(z, np.full(10_000, 3.0)) < 0.01


def test_coverage_errors_and_warning():
    with pytest.raises(ValueError):
        coverage_metric(np.empty((0, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        coverage_metric(np.zeros((200, 2)), np.zeros(3))
    with pytest.warns(RuntimeWarning):
        coverage_metric(np.zeros((10, 2)), np.zeros(2))


def test_posterior_summary_examples():
    s = posterior_summary({"x": np.full((50, 2), 0.3)})
    np.testing.assert_allclose(s["x"]["mean"], 0.3, rtol=1e-14)
    np.testing.assert_array_equal(s["x"]["upper"] - s["x"]["lower"], 0.0)
    two = posterior_summary({"x": np.tile([0.0, 1.0], 50)})
    assert two["x"]["mean"] == 0.5


def test_posterior_summary_matches_quantile_oracle():
    d = np.random.default_rng(2).gamma(2.0, size=(1001, 4))
    s = posterior_summary([{"x": d[:500]}, {"x": d[500:]}])
    q = mstats.mquantiles(d, [0.025, 0.975], alphap=1, betap=1, axis=0)
    np.testing.assert_allclose(s["x"]["lower"], q[0], rtol=1e-12)
    np.testing.assert_allclose(s["x"]["upper"], q[1], rtol=1e-12)
    np.testing.assert_allclose(s["x"]["mean"], d.mean(axis=0))


def test_summary_rows_labels():
    rows = summary_rows(posterior_summary({"theta_star": np.ones((3, 2, 2)), "psi": np.ones((3, 2))}))
    assert [r[0] for r in rows] == ["psi[1]", "psi[2]", "theta_star[1,1]", "theta_star[1,2]",
                                    "theta_star[2,1]", "theta_star[2,2]"]


def test_gelman_rubin_hand_example():
    r = gelman_rubin([{"x": np.array([1.0, 2.0, 3.0])}, {"x": np.array([3.0, 4.0, 5.0])}])
    # B = 3 * var(2, 4) = 6, W = 1, V = 2/3 + 2
    assert r["x"] == pytest.approx(np.sqrt(2 / 3 + 2))


def test_gelman_rubin_identical_and_divergent():
    x = np.random.default_rng(3).standard_normal(1000)
    same = gelman_rubin([{"x": x}, {"x": x.copy()}])["x"]
    assert abs(same - 1.0) < 1 / 1000
    apart = gelman_rubin([{"x": x}, {"x": x + 10.0}])["x"]
    assert apart > 1.1
    const = gelman_rubin([{"x": np.ones(10)}, {"x": np.ones(10)}])["x"]
    assert const == 1.0


def test_gelman_rubin_errors_and_unmonitored():
    with pytest.raises(ValueError):
        gelman_rubin([{"x": np.ones(5)}])
    with pytest.raises(ValueError):
        gelman_rubin([{"x": np.ones(5)}, {"x": np.ones(6)}])
    out = gelman_rubin([{"x": np.arange(4.0), "zeta": np.ones(4)}] * 2)
    assert "zeta" not in out


def test_metric_report_range_check():
    with pytest.raises(ValueError):
        MetricReport("missZIDM", {"psi": {"abs": 0.1, "frob": 0.2, "cov": 1.2}}, 1)


def test_generating_prior_rules():
    p = generating_prior(Scenario1Config(at_risk_prob=0.75, misclass_prob=0.25))
    assert p["mu_eta"] == pytest.approx(logit(0.75)) and p["mu_psi"] == pytest.approx(logit(0.25))
    assert generating_prior(Scenario1Config(misclass_prob=0.0))["mu_psi"] == pytest.approx(logit(0.01))
    p2 = generating_prior(Scenario2Config())
    assert p2["mu_psi"] == 0.0
    assert p2["mu_eta"] == pytest.approx(logit(np.mean(Scenario2Config().occupancy_prob)))
    assert generating_prior(Scenario2Config(with_covariates=True)) == {"mu_psi": 0.0, "mu_eta": 0.0}


def test_replicate_seeds_distinct():
    seeds = {replicate_seeds(0, r) for r in range(20)}
    assert len(seeds) == 20
    assert replicate_seeds(4, 2) == replicate_seeds(4, 2)


SHORT = RunConfig(iterations=300, burn_in=100, thin=2)


def test_replicate_study_no_error_corner():
    cfg = Scenario1Config(N=10, L=50, misclass_prob=0.0, validation_fraction=1.0)
    res = replicate_study(cfg, variants=("missZIDM",), R=1, seed=1, run_config=SHORT)
    rep = res.report("missZIDM")
    assert rep.replicates == 1 and rep.failures == 0
    assert rep.value("psi", "abs") < 0.02


def test_replicate_study_deterministic_with_dashes():
    cfg = Scenario1Config(N=5, L=30)
    a = replicate_study(cfg, variants=("missZIDM", "ZIDM"), R=2, seed=3, run_config=SHORT)
    b = replicate_study(cfg, variants=("missZIDM", "ZIDM"), R=2, seed=3, run_config=SHORT)
    strip = lambda t: [row[:-1] for row in t.table_rows()[1]]     # drop runtime
    assert strip(a) == strip(b)
    header, rows = a.table_rows()
    zidm = dict(zip(header, rows[1]))
    assert zidm["psi_abs"] == "-" and zidm["theta_star_cov"] == "-"
    assert zidm["eta_abs"] != "-"
    assert "-" in a.to_text().splitlines()[-1]
    assert a.to_csv().startswith("variant,eta_abs")
    np.testing.assert_array_equal(a.replicate_values("missZIDM", "psi", "abs"),
                                  b.replicate_values("missZIDM", "psi", "abs"))


def test_score_draws_skips_missing_blocks():
    from missmult.simgen import gen_scenario1
    _, _, truth = gen_scenario1(Scenario1Config(N=2, L=5, T=3), 0)
    draws = {"psi": np.tile(truth.psi, (200, 1))}
    scores = score_draws(draws, truth)
    assert list(scores) == ["psi"]
    assert scores["psi"] == {"abs": 0.0, "frob": 0.0, "cov": 1.0}


def test_replicate_study_rejects_zero_replicates():
    with pytest.raises(ValueError):
        replicate_study(Scenario1Config(), R=0)
