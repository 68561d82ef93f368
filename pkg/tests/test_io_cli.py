"""CSV/TOML ingestion and the command-line pipelines."""

import json
import textwrap

import numpy as np
import pytest

from matchvalue import (
    DatasetSchema,
    MatchSample,
    ProductBasis,
    load_config,
    load_sample,
    save_sample,
    schema_from_config,
    spec_from_config,
    theta_from_config,
)
from matchvalue.cli import run_cli
from matchvalue.io import basis_from_token, market_from_config

SCHEMA = DatasetSchema(worker_columns=("x",), firm_columns=("y",), transfer_column="wage")


# -- schema --------------------------------------------------------------------


def test_schema_normalizes_and_validates():
    s = DatasetSchema(worker_columns=["skill"], firm_columns=["risk"], transfer_column="w")
    assert s.worker_columns == ("skill",) and isinstance(s.worker_columns, tuple)
    with pytest.raises(ValueError, match="at least one"):
        DatasetSchema(worker_columns=(), firm_columns=("y",), transfer_column="w")
    with pytest.raises(ValueError, match="disjoint"):
        DatasetSchema(worker_columns=("x",), firm_columns=("x",), transfer_column="w")
    with pytest.raises(ValueError, match="nonempty"):
        DatasetSchema(worker_columns=("x",), firm_columns=("",), transfer_column="w")


# -- CSV loading ----------------------------------------------------------------


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text), encoding="utf-8")
    return p


def test_load_sample_small_file(tmp_path):
    p = write(
        tmp_path,
        """\
        x,y,wage
        0.0,1.0,2.5
        1.0,0.5,
        2.0,0.25,-1.75
        """,
    )
    s = load_sample(p, SCHEMA)
    assert s.n == 3
    np.testing.assert_array_equal(s.workers.ravel(), [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(s.firms.ravel(), [1.0, 0.5, 0.25])
    assert s.transfers[0] == 2.5 and s.transfers[2] == -1.75
    assert np.isnan(s.transfers[1])


def test_load_sample_ignores_extra_columns_and_order(tmp_path):
    p = write(
        tmp_path,
        """\
        note,wage,y,x
        a,1.0,3.0,4.0
        b,2.0,5.0,6.0
        """,
    )
    s = load_sample(p, SCHEMA)
    np.testing.assert_array_equal(s.workers.ravel(), [4.0, 6.0])
    np.testing.assert_array_equal(s.firms.ravel(), [3.0, 5.0])


def test_load_sample_error_reporting(tmp_path):
    bad_float = write(tmp_path, "x,y,wage\n0.0,oops,1.0\n", "a.csv")
    with pytest.raises(ValueError, match=r"a\.csv: line 2: cannot parse 'oops'"):
        load_sample(bad_float, SCHEMA)
    short_row = write(tmp_path, "x,y,wage\n0.0,1.0\n", "b.csv")
    with pytest.raises(ValueError, match="line 2"):
        load_sample(short_row, SCHEMA)
    missing_col = write(tmp_path, "x,wage\n0.0,1.0\n", "c.csv")
    with pytest.raises(ValueError, match="missing column 'y'"):
        load_sample(missing_col, SCHEMA)
    dup_col = write(tmp_path, "x,y,y,wage\n0,1,1,2\n", "d.csv")
    with pytest.raises(ValueError, match="appears twice"):
        load_sample(dup_col, SCHEMA)
    empty = write(tmp_path, "", "e.csv")
    with pytest.raises(ValueError, match="empty file"):
        load_sample(empty, SCHEMA)
    header_only = write(tmp_path, "x,y,wage\n", "f.csv")
    with pytest.raises(ValueError, match="no data rows"):
        load_sample(header_only, SCHEMA)


def test_log_transform_on_load(tmp_path):
    schema = DatasetSchema(
        worker_columns=("x",), firm_columns=("y",), transfer_column="wage",
        transfer_transform="log", missing_marker="NA",
    )
    p = write(
        tmp_path,
        """\
        x,y,wage
        0.0,1.0,7.389056098930650
        1.0,2.0,NA
        """,
    )
    s = load_sample(p, schema)
    assert s.transfers[0] == pytest.approx(2.0, rel=1e-14)
    assert np.isnan(s.transfers[1])
    bad = write(tmp_path, "x,y,wage\n0.0,1.0,-3.0\n", "neg.csv")
    with pytest.raises(ValueError, match="line 2.*positive"):
        load_sample(bad, schema)


@pytest.mark.parametrize("transform", ["identity", "log"])
def test_save_load_round_trip(tmp_path, transform):
    schema = DatasetSchema(
        worker_columns=("x1", "x2"), firm_columns=("y1",), transfer_column="w",
        transfer_transform=transform, missing_marker="NA",
    )
    rng = np.random.default_rng(8)
    sample = MatchSample(
        rng.normal(size=(12, 2)),
        rng.normal(size=(12, 1)),
        transfers=np.where(rng.random(12) < 0.3, np.nan, rng.normal(size=12)),
    )
    p = tmp_path / "roundtrip.csv"
    save_sample(p, sample, schema)
    back = load_sample(p, schema)
    np.testing.assert_array_equal(back.workers, sample.workers)
    np.testing.assert_array_equal(back.firms, sample.firms)
    if transform == "identity":
        np.testing.assert_array_equal(back.transfers, sample.transfers)
    else:
        np.testing.assert_allclose(back.transfers, sample.transfers, atol=1e-12)
        assert np.array_equal(np.isnan(back.transfers), np.isnan(sample.transfers))


def test_save_sample_checks_schema_width(tmp_path):
    sample = MatchSample(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ValueError, match="worker columns"):
        save_sample(tmp_path / "x.csv", sample, SCHEMA)


# -- basis tokens and config builders --------------------------------------------


def test_basis_tokens():
    assert basis_from_token("x1*y2") == ProductBasis(1, 2)
    assert basis_from_token("x3") == ProductBasis(3, 0)
    assert basis_from_token("y1") == ProductBasis(0, 1)
    assert basis_from_token("x2 * y2") == ProductBasis(2, 2)
    for bad in ("", "z1", "x0", "x0*y1", "xy", "x1*y1*x2"):
        with pytest.raises(ValueError):
            basis_from_token(bad)


CONFIG_TEXT = """\
[market]
worker_grid = [[0.0], [0.25], [0.5], [0.75], [1.0]]
worker_masses = [0.2, 0.2, 0.2, 0.2, 0.2]
firm_grid = [[0.0], [0.25], [0.5], [0.75], [1.0]]
firm_masses = [0.2, 0.2, 0.2, 0.2, 0.2]

[bases]
functions = ["x1*y1", "y1"]
alpha = ["x1*y1", "y1"]
gamma = ["x1*y1"]

[theta]
A = [0.3, -0.4]
Gamma = [0.5, 0.0]
sigma1 = 0.3
sigma2 = 0.2
t = 1.0
s2 = 0.04

[schema]
workers = ["x"]
firms = ["y"]
transfer = "wage"

[simulate]
n = 400
missing_prob = 0.1
seed = 9

[solver]
tol = 1e-12

[estimate]
tol = 1e-6

[vsl]
mean_earnings = 50000.0
risk_unit_scale = 1e5

[counterfactual]
kind = "cap"
coordinate = 0
value = 0.5
"""


@pytest.fixture
def config_path(tmp_path):
    p = tmp_path / "market.toml"
    p.write_text(CONFIG_TEXT, encoding="utf-8")
    return p


def test_config_builders(config_path):
    cfg = load_config(config_path)
    spec = spec_from_config(cfg)
    assert spec.functions == (ProductBasis(1, 1), ProductBasis(0, 1))
    assert np.array_equal(spec.alpha_mask, [True, True])
    assert np.array_equal(spec.gamma_mask, [True, False])
    theta = theta_from_config(cfg)
    np.testing.assert_array_equal(theta.A, [0.3, -0.4])
    assert theta.sigma2 == 0.2
    schema = schema_from_config(cfg)
    assert schema.transfer_column == "wage"
    assert schema.transfer_transform == "identity"
    gx, fx, gy, fy = market_from_config(cfg)
    assert gx.shape == (5, 1) and fy.sum() == pytest.approx(1.0)


def test_config_missing_pieces(tmp_path):
    p = tmp_path / "broken.toml"
    p.write_text("[bases]\nfunctions = ['x1*y1']\nalpha = ['y9']\ngamma = []\n")
    cfg = load_config(p)
    with pytest.raises(ValueError, match="not listed"):
        spec_from_config(cfg)
    with pytest.raises(ValueError, match=r"missing the \[theta\] section"):
        theta_from_config(cfg)
    p2 = tmp_path / "broken2.toml"
    p2.write_text("[theta]\nA = [0.1]\n")
    with pytest.raises(ValueError, match="missing key 'Gamma'"):
        theta_from_config(load_config(p2))


# -- CLI pipelines ----------------------------------------------------------------


def test_cli_simulate_estimate_analyze_pipeline(tmp_path, config_path, capsys):
    data = tmp_path / "data.csv"
    sim_report = tmp_path / "sim.json"
    assert run_cli([
        "simulate", "--config", str(config_path),
        "--out", str(data), "--report", str(sim_report),
    ]) == 0
    sim = json.loads(sim_report.read_text())
    assert sim["command"] == "simulate"
    assert sim["n"] == 400 and sim["seed"] == 9
    assert 0 < sim["n_observed"] < 400
    assert data.exists()

    fit_json = tmp_path / "fit.json"
    table_path = tmp_path / "fit.txt"
    assert run_cli([
        "estimate", "--config", str(config_path), "--data", str(data),
        "--concentrated", "--out", str(fit_json), "--table", str(table_path),
    ]) == 0
    fit = json.loads(fit_json.read_text())
    assert fit["status"] == "converged"
    assert fit["method"] == "concentrated"
    assert fit["theta_hat"] is not None
    assert len(fit["phi_hat"]) == 2
    table = table_path.read_text()
    assert "parameter" in table and "A[0]" in table and "sigma1" in table

    vsl_json = tmp_path / "vsl.json"
    assert run_cli([
        "vsl", "--config", str(config_path), "--report", str(fit_json),
        "--out", str(vsl_json),
    ]) == 0
    got = json.loads(vsl_json.read_text())
    expected = -fit["theta_hat"]["A"][1] * 50_000.0 * 1e5
    assert got["vsl"] == pytest.approx(expected, rel=1e-12)
    assert got["risk_coordinate"] == 0

    cf_json = tmp_path / "cf.json"
    assert run_cli([
        "counterfactual", "--config", str(config_path), "--data", str(data),
        "--report", str(fit_json), "--out", str(cf_json),
    ]) == 0
    cf = json.loads(cf_json.read_text())
    assert cf["share_changed"] > 0.0
    assert cf["feasibility_residual"] < 1e-9
    assert np.isfinite(cf["gini_after"])

    hed_json = tmp_path / "hed.json"
    assert run_cli([
        "hedonic", "--config", str(config_path), "--data", str(data),
        "--out", str(hed_json),
    ]) == 0
    hed = json.loads(hed_json.read_text())
    assert hed["names"] == ["const", "x[1]", "y[1]"]
    assert hed["risk_column"] == 2
    assert np.isfinite(hed["vsl_h"])
    capsys.readouterr()  # swallow the tables echoed to stdout


def test_cli_gradcheck_passes(tmp_path, config_path):
    data = tmp_path / "data.csv"
    assert run_cli([
        "simulate", "--config", str(config_path), "--out", str(data),
        "--n", "60", "--report", str(tmp_path / "sim.json"),
    ]) == 0
    out = tmp_path / "grad.json"
    assert run_cli([
        "gradcheck", "--config", str(config_path), "--data", str(data),
        "--out", str(out),
    ]) == 0
    payload = json.loads(out.read_text())
    assert payload["passed"] is True
    assert payload["max_relative_error"] < 1e-5
    assert set(payload["per_coordinate"]) == {
        "A[0]", "A[1]", "Gamma[0]", "sigma1", "sigma2", "t", "s2"
    }


def test_cli_reruns_are_byte_identical(tmp_path, config_path):
    data = tmp_path / "data.csv"
    report = tmp_path / "sim.json"
    fit = tmp_path / "fit.json"

    def run_once():
        assert run_cli([
            "simulate", "--config", str(config_path),
            "--out", str(data), "--report", str(report),
        ]) == 0
        assert run_cli([
            "estimate", "--config", str(config_path), "--data", str(data),
            "--concentrated", "--out", str(fit),
        ]) == 0
        return data.read_bytes(), report.read_bytes(), fit.read_bytes()

    first = run_once()
    second = run_once()
    assert first == second


def test_cli_error_exit_codes(tmp_path, config_path, capsys):
    # missing config file -> 2
    assert run_cli([
        "simulate", "--config", str(tmp_path / "nope.toml"),
        "--out", str(tmp_path / "x.csv"),
    ]) == 2
    # config without required sections -> 2
    broken = tmp_path / "broken.toml"
    broken.write_text("[schema]\nworkers = ['x']\nfirms = ['y']\ntransfer = 'w'\n")
    assert run_cli([
        "simulate", "--config", str(broken), "--out", str(tmp_path / "x.csv"),
    ]) == 2
    # unusable flags -> argparse exits with SystemExit(2)
    with pytest.raises(SystemExit):
        run_cli(["no-such-command"])
    with pytest.raises(SystemExit):
        run_cli(["estimate", "--config", str(config_path)])  # --data required
    capsys.readouterr()


def test_cli_estimate_reports_nonconvergence(tmp_path, config_path):
    data = tmp_path / "data.csv"
    assert run_cli([
        "simulate", "--config", str(config_path), "--out", str(data),
        "--report", str(tmp_path / "sim.json"),
    ]) == 0
    strict = tmp_path / "strict.toml"
    strict.write_text(
        CONFIG_TEXT.replace("[estimate]\ntol = 1e-6", "[estimate]\ntol = 1e-6\nmax_iter = 1")
    )
    out = tmp_path / "fit.json"
    assert run_cli([
        "estimate", "--config", str(strict), "--data", str(data), "--out", str(out),
    ]) == 1
    assert json.loads(out.read_text())["status"] == "not_converged"


def test_cli_vsl_needs_identified_fit(tmp_path, config_path):
    data = tmp_path / "data.csv"
    assert run_cli([
        "simulate", "--config", str(config_path), "--out", str(data),
        "--missing-prob", "1.0", "--report", str(tmp_path / "sim.json"),
    ]) == 0
    fit = tmp_path / "fit.json"
    assert run_cli([
        "estimate", "--config", str(config_path), "--data", str(data),
        "--out", str(fit),
    ]) == 0
    assert json.loads(fit.read_text())["theta_hat"] is None
    assert run_cli([
        "vsl", "--config", str(config_path), "--report", str(fit),
        "--out", str(tmp_path / "v.json"),
    ]) == 2
