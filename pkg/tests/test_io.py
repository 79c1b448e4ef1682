import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from missmult import io as mio
from missmult.eval import posterior_summary, summary_rows
from missmult.gibbs import RunConfig, run_chains
from missmult.model import Dataset, Hyperparameters


def write(path, text):
    path.write_text(text)
    return str(path)


RECORDS = """site_id,visit_id,individual_id,observed_class,validated_class
10,1,a,2,
10,2,a,1,1
3,1,b,3,2
"""


# -- records ------------------------------------------------------------------

def test_parse_records_three_rows(tmp_path):
    table, index = mio.parse_records(write(tmp_path / "r.csv", RECORDS))
    assert index.sites == ["3", "10"]
    assert index.visits == [["1"], ["1", "2"]]
    data = table.to_dataset()
    assert data.dims.N == 2 and data.dims.V == 3
    np.testing.assert_array_equal(data.dims.n, [1, 2])
    np.testing.assert_array_equal(data.dims.L, [1, 1, 1])
    assert data.dims.C == 3 and int(data.is_validated.sum()) == 2


def test_parse_records_no_validation(tmp_path):
    text = "site_id,visit_id,individual_id,observed_class,validated_class\n1,1,1,1,\n1,1,2,2,\n"
    table, _ = mio.parse_records(write(tmp_path / "r.csv", text))
    assert np.all(table.validated == -1)


def test_parse_records_label_dictionary(tmp_path):
    text = ("site_id,visit_id,individual_id,observed_class,validated_class\n"
            "1,1,1,Myyu,\n1,1,2,Epfu,Myyu\n")
    table, index = mio.parse_records(write(tmp_path / "r.csv", text), ["Epfu", "Myyu"])
    np.testing.assert_array_equal(table.observed, [1, 0])
    np.testing.assert_array_equal(table.validated, [-1, 1])
    assert index.labels == ["Epfu", "Myyu"]


@pytest.mark.parametrize("text,match", [
    ("site_id,visit_id,individual_id,observed_class,validated_class\n1,1,1,Laci,\n",
     r"line 2: unknown class label 'Laci'"),
    ("site_id,visit_id,individual_id,observed_class,validated_class\n1,1,1,1,\n1,1,1,2,\n",
     "duplicate record"),
    ("", "empty"),
    ("site_id,visit_id,observed_class\n1,1,1\n", "missing column"),
])
def test_parse_records_errors(tmp_path, text, match):
    with pytest.raises(mio.DataError, match=match):
        mio.parse_records(write(tmp_path / "r.csv", text), ["1", "2"])


def test_format_records_roundtrip(tmp_path):
    table, index = mio.parse_records(write(tmp_path / "r.csv", RECORDS))
    again, _ = mio.parse_records(write(tmp_path / "s.csv", mio.format_records(table, index)))
    for f in ("site", "visit", "individual", "observed", "validated"):
        np.testing.assert_array_equal(getattr(again, f), getattr(table, f))


# -- covariates -----------------------------------------------------------------

def test_no_covariates_gives_intercepts(tmp_path):
    table, index = mio.parse_records(write(tmp_path / "r.csv", RECORDS))
    cov, constants = mio.parse_covariates(index, table)
    assert cov.x_site.shape == (2, 1) and cov.x_visit.shape == (3, 1)
    assert cov.x_indiv.shape == (3, 1) and constants["site"] is None


def test_standardization_example(tmp_path):
    recs = ("site_id,visit_id,individual_id,observed_class,validated_class\n"
            "1,1,1,1,\n2,1,1,1,\n3,1,1,2,\n")
    table, index = mio.parse_records(write(tmp_path / "r.csv", recs))
    site = write(tmp_path / "s.csv", "site_id,elev\n3,3\n1,1\n2,2\n")
    cov, constants = mio.parse_covariates(index, table, site_path=site)
    np.testing.assert_allclose(cov.x_site, [[1, -1], [1, 0], [1, 1]])
    assert constants["site"].mean == [2.0] and constants["site"].sd == [1.0]
    raw, _ = mio.parse_covariates(index, table, site_path=site, standardize=False)
    np.testing.assert_allclose(raw.x_site[:, 1], [1, 2, 3])


def test_covariate_errors(tmp_path):
    table, index = mio.parse_records(write(tmp_path / "r.csv", RECORDS))
    const = write(tmp_path / "c.csv", "site_id,x\n3,1\n10,1\n")
    with pytest.raises(mio.DataError, match="zero variance"):
        mio.parse_covariates(index, table, site_path=const)
    missing = write(tmp_path / "m.csv", "site_id,x\n3,1\n")
    with pytest.raises(mio.DataError, match="no covariate row"):
        mio.parse_covariates(index, table, site_path=missing)
    text = write(tmp_path / "t.csv", "site_id,x\n3,1\n10,high\n")
    with pytest.raises(mio.DataError, match="non-numeric"):
        mio.parse_covariates(index, table, site_path=text)


def test_visit_and_individual_covariates(tmp_path):
    table, index = mio.parse_records(write(tmp_path / "r.csv", RECORDS))
    visit = write(tmp_path / "v.csv", "site_id,visit_id,t\n10,2,5\n10,1,4\n3,1,9\n99,1,0\n")
    indiv = write(tmp_path / "i.csv",
                  "site_id,visit_id,individual_id,w\n3,1,b,1\n10,1,a,2\n10,2,a,3\n")
    cov, _ = mio.parse_covariates(index, table, visit_path=visit, indiv_path=indiv,
                                  standardize=False)
    np.testing.assert_array_equal(cov.x_visit[:, 1], [9, 4, 5])
    w = dict(zip(zip(table.site.tolist(), table.visit.tolist()), cov.x_indiv[:, 1]))
    assert w == {(0, 0): 1.0, (1, 0): 2.0, (1, 1): 3.0}


# -- configuration ----------------------------------------------------------------

def test_config_defaults_and_sections():
    cfg = mio.parse_config("")
    hyper = mio.build_hyper(cfg["model"])
    assert hyper.sigma2_psi == hyper.sigma2_eta == hyper.sigma2_gamma == 1.0
    np.testing.assert_array_equal(hyper.nu_matrix(3, 3), 1.0)
    assert mio.build_run(cfg["run"]).n_retained == 1250
    text = """
[model]
mu_psi = -1.5
no_lucky_guess = true
[run]
iterations = 100
burn_in = 50
[scenario]
kind = 2
sigma = 100.0
"""
    cfg = mio.parse_config(text)
    assert mio.build_hyper(cfg["model"]).no_lucky_guess
    assert mio.build_run(cfg["run"]).iterations == 100
    assert mio.build_scenario(cfg["scenario"]).sigma == 100.0


@pytest.mark.parametrize("text", [
    "[model]\nmu_psy = 1.0\n",
    "[sampler]\niterations = 3\n",
    "[run]\niterations = \n",
])
def test_config_rejects_unknown_or_malformed(text):
    with pytest.raises(mio.ConfigError):
        mio.parse_config(text)


def test_config_semantic_errors():
    with pytest.raises(mio.ConfigError):
        mio.build_run({"iterations": 10, "burn_in": 20})
    with pytest.raises(mio.ConfigError):
        mio.build_hyper({"sigma2_psi": -1.0})
    with pytest.raises(mio.ConfigError, match="do not apply"):
        mio.build_scenario({"kind": 1, "sigma": 2.0})
    with pytest.raises(mio.ConfigError, match="conflicts"):
        mio.build_scenario({"kind": 1}, kind=2)


# -- draw persistence ----------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_draws_roundtrip_bit_exact(S, seed):
    rng = np.random.default_rng(seed)
    draws = {"psi": rng.random((S, 3)), "theta_star": rng.random((S, 3, 3)) ** 7,
             "zeta": rng.integers(0, 2, (S, 4, 3)).astype(np.int8),
             "beta_gamma": rng.standard_normal((S, 3, 2)) * 1e-300}
    text, layout = mio.draws_to_csv(draws)
    for back in (mio.draws_from_csv(text, layout),
                 mio.draws_from_binary(mio.draws_to_binary(draws))):
        for k in draws:
            assert back[k].dtype == draws[k].dtype
            np.testing.assert_array_equal(back[k], draws[k])


def test_binary_format_header():
    blob = mio.draws_to_binary({"x": np.ones((2, 1))})
    assert blob[:8] == b"MISSMULT"
    assert int.from_bytes(blob[8:12], "little") == mio.FORMAT_VERSION
    with pytest.raises(mio.DataError):
        mio.draws_from_binary(b"NOTDRAWS" + blob[8:])


def _tiny_fit():
    site = np.repeat(np.arange(3), 5)
    data = Dataset.build(site, np.zeros(15, int), np.arange(15) % 3, C=3)
    return run_chains(data, Hyperparameters(), RunConfig(iterations=60, burn_in=20, chains=2))


def test_save_load_fit_and_summary(tmp_path):
    chains = _tiny_fit()
    rows = summary_rows(posterior_summary(chains))
    mio.save_fit(str(tmp_path), chains, meta={"model": {"variant": "missZIDM"}},
                 summary_rows=rows, diagnostics={}, binary=True)
    meta, loaded = mio.load_fit(str(tmp_path))
    _, loaded_bin = mio.load_fit(str(tmp_path), binary=True)
    assert meta["n_chains"] == 2
    for c, d, b in zip(chains, loaded, loaded_bin):
        for k in c.draws:
            np.testing.assert_array_equal(d[k], c.draws[k])
            np.testing.assert_array_equal(b[k], c.draws[k])
    stored = mio.read_summary_csv(str(tmp_path / "summary.csv"))
    for name, mean, lo, hi in summary_rows(posterior_summary(loaded)):
        np.testing.assert_allclose(stored[name], (mean, lo, hi), rtol=0, atol=1e-12)


def test_atomic_write_mode_and_content(tmp_path):
    p = tmp_path / "f.txt"
    mio.atomic_write(str(p), "hello")
    assert p.read_text() == "hello"
    mio.atomic_write(str(p), b"bytes")
    assert p.read_bytes() == b"bytes"
    umask = os.umask(0)
    os.umask(umask)
    assert (p.stat().st_mode & 0o777) == (0o666 & ~umask)
    assert os.listdir(tmp_path) == ["f.txt"]


def test_load_fit_rejects_unknown_version(tmp_path):
    mio.write_json(str(tmp_path / "fit.json"), {"format_version": 99, "layouts": []})
    with pytest.raises(mio.DataError):
        mio.load_fit(str(tmp_path))
