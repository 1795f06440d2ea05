#!/usr/bin/env python3
import json
import xml.etree.ElementTree as ET

import numpy as np
import pandas as pd
import pytest

import bvmlab
from bvm_errors import ConfigError, DiagnosticsError
from experiment_config import EXPERIMENTS, ExperimentConfig
from experiments import (MODEL_KEYS, normal_means_posterior, polynomial_prior,
                         prior_to_posterior_panels, run_experiment, validate_model_params)
from posterior_engine import map_estimate
from report_statistics import ConvergenceReport, emit_report, read_report_csv, report_columns


def tiny(experiment, **kwargs):
    params = dict(n_values=[50], replications=2, seed=11, h_grid_points=201)
    params.update(kwargs)
    return ExperimentConfig(experiment=experiment, **params)


def medians_by_n(report, column="tv_to_limit"):
    return report.frame().groupby("n")[column].median()


def test_polynomial_prior_and_normal_means_posterior():
    assert polynomial_prior(-2.0, -1.0, 2.0) == 0.0
    assert polynomial_prior(0.5, -1.0, 2.0) == pytest.approx(0.2 + 1.5 * 1.5)
    density, mle = normal_means_posterior(np.array([3.0, 4.0]), -1.0, 2.0, 301)
    assert mle == 2.0
    assert density.lower == -1.0 and density.upper == 2.0
    prior, none = normal_means_posterior(np.array([]), -1.0, 2.0, 301)
    assert none is None
    # the n = 0 posterior is the normalized prior, peaked at the midpoint
    assert map_estimate(prior) == pytest.approx(0.5, abs=0.01)


def test_parametric_demo_smoke():
    config = tiny("parametric_demo", n_values=[4, 64], replications=3, h_grid_points=1001)
    report = run_experiment(config)
    assert report.completed_rows == 6
    frame = report.frame()
    assert list(frame.columns) == report_columns("parametric_demo")
    assert frame["tv_to_limit"].between(0.0, 1.0).all()
    medians = medians_by_n(report)
    assert medians[64] < medians[4]
    assert len(report.figures["posterior_vs_limit"]) == 2
    panels = report.figures["prior_to_posterior"]
    assert [p.title for p in panels] == [f"n = {n}" for n in (0, 1, 4, 16, 64, 256)]
    assert panels[0].markers == {}


def test_prior_to_posterior_map_marker_is_the_grid_argmax():
    config = tiny("parametric_demo", h_grid_points=1001)
    for panel in prior_to_posterior_panels(config)[1:]:
        assert panel.markers["MAP"] == pytest.approx(panel.x[np.argmax(panel.curves["posterior"])])


def test_runs_are_reproducible_and_replications_independent():
    config = tiny("parametric_demo", n_values=[4, 16], replications=3)
    first = run_experiment(config).frame()
    again = run_experiment(config).frame()
    pd.testing.assert_frame_equal(first, again)

    fewer = run_experiment(tiny("parametric_demo", n_values=[4, 16], replications=2)).frame()
    kept = first[first["replication"] < 2].reset_index(drop=True)
    pd.testing.assert_frame_equal(kept, fewer)


def test_parallel_replications_match_serial():
    serial = run_experiment(tiny("parametric_demo", n_values=[4, 16])).frame()
    parallel = run_experiment(tiny("parametric_demo", n_values=[4, 16], jobs=2)).frame()
    pd.testing.assert_frame_equal(serial, parallel)


def test_plr_bvm_smoke():
    config = tiny("plr_bvm", model_params={"knots": 8, "mode": "exact"})
    report = run_experiment(config)
    frame = report.frame()
    assert len(frame) == 2
    assert (frame["credible_lo"] < frame["credible_hi"]).all()
    assert (frame["wald_lo"] < frame["wald_hi"]).all()
    assert frame["info_or_gamma"].iloc[0] == pytest.approx(0.75)
    assert frame["localized_mass"].between(0.0, 1.0).all()


def test_coverage_smoke():
    config = tiny("coverage", n_values=[100], replications=4, model_params={"knots": 8})
    report = run_experiment(config)
    frame = report.frame()
    assert set(frame["credible_covers"]) <= {0, 1}
    assert (frame["median_covered"] == 1).all()
    coverage = report.summary()["coverage"]
    assert coverage[0]["n"] == 100 and 0.0 <= coverage[0]["wald"] <= 1.0


def test_ilan_probe_smoke():
    config = tiny("ilan_probe", replications=1,
                  model_params={"knots": 8, "draws": 300, "h_values": [-1.0, 1.0]})
    frame = run_experiment(config).frame()
    assert frame["h"].tolist() == [-1.0, 1.0]
    assert (frame["log_ratio_gap"] < 0.2).all()


def test_perturbation_probe_smoke():
    config = tiny("perturbation_probe", replications=1,
                  model_params={"knots": 8, "draws": 200, "rho": 0.5, "h": 1.0})
    frame = run_experiment(config).frame()
    assert frame["ball_mass"].between(0.0, 1.0).all()
    assert frame["rho"].iloc[0] == 0.5


def test_mixture_smoke_with_a_fixed_cluster():
    config = tiny("mixture_bvm", n_values=[50, 200], replications=1,
                  model_params={"atoms": [0.5], "fixed_location": 0.5, "mcmc_steps": 500})
    report = run_experiment(config)
    frame = report.frame()
    assert frame["center"].between(0.25, 1.0).all()
    assert (frame["mean_clusters"] == 1.0).all()
    assert report.summary()["sd_slope"] < 0.0


def test_boundary_smoke_with_exact_sub_experiment():
    config = tiny("boundary_bvm", n_values=[100], replications=1,
                  model_params={"nuisance_prior": "degenerate", "lscript0_constant": 0.5,
                                "mcmc_steps": 2000, "exact_n": [10, 100]})
    report = run_experiment(config)
    frame = report.frame()
    assert frame["submodel"].tolist() == ["full", "exact", "exact"]
    tv = frame.loc[frame["submodel"] == "exact", "tv_to_limit"].tolist()
    assert tv[1] < tv[0] < 0.1
    assert set(report.figures) == {"posterior_vs_limit", "exact_posterior_vs_limit"}
    groups = report.summary()["groups"]
    assert {(g["submodel"], g["n"]) for g in groups} == {("exact", 10), ("exact", 100),
                                                         ("full", 100)}


def test_emit_report_round_trip(tmp_path):
    report = run_experiment(tiny("parametric_demo", n_values=[4, 16], replications=3))
    written = emit_report(report, tmp_path / "out")
    assert set(written) == {"csv", "json", "figure:posterior_vs_limit",
                            "figure:prior_to_posterior"}

    parsed = read_report_csv(written["csv"])
    assert parsed.experiment == "parametric_demo"
    pd.testing.assert_frame_equal(parsed.frame(), report.frame(), check_dtype=False)

    with open(written["json"]) as f:
        summary = json.load(f)
    medians = pd.read_csv(written["csv"]).groupby("n")["tv_to_limit"].median()
    for group in summary["groups"]:
        assert group["median_tv_to_limit"] == pytest.approx(medians[group["n"]])

    for kind, path in written.items():
        if kind.startswith("figure:"):
            assert ET.parse(path).getroot().tag.endswith("svg")


def test_report_rejects_bad_rows():
    report = ConvergenceReport("plr_bvm")
    with pytest.raises(ValueError):
        report.add_row({"n": 10})
    row = {column: 0.0 for column in report_columns("plr_bvm")}
    row["tv_to_limit"] = 1.5
    with pytest.raises(ValueError):
        report.add_row(row)


def test_emit_report_names_the_failing_path(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    report = ConvergenceReport("plr_bvm")
    with pytest.raises(OSError, match="blocker"):
        emit_report(report, blocker)


# ---------------------------------------------------------------------------
# Model parameters
# ---------------------------------------------------------------------------

def reader_of(key):
    return next(name for name in EXPERIMENTS if key in MODEL_KEYS[name])


def test_presets_pass_model_param_validation():
    for name in EXPERIMENTS:
        validate_model_params(getattr(ExperimentConfig, name)())


@pytest.mark.parametrize("experiment, params", [
    ("plr_bvm", {"knot": 3}),
    ("plr_bvm", {"xi_sd": 0.0}),
    ("plr_bvm", {"mode": "fast"}),
    ("plr_bvm", {"holder_alpha": 1.0, "holder_bound": 5.0, "mode": "exact"}),
    ("coverage", {"mode": "exact"}),
    (reader_of("h_values"), {"h_values": ["left"]}),
    (reader_of("rho"), {"rho": 0.0}),
    ("parametric_demo", {"lower": 2.0, "upper": 1.0}),
    ("parametric_demo", {"theta0": 5.0}),
    ("mixture_bvm", {"sigma0": 10.0}),
    ("mixture_bvm", {"sigma_range": "wide"}),
    ("boundary_bvm", {"S": 3.0}),
    ("boundary_bvm", {"exact_n": [0, 10]}),
    ("boundary_bvm", {"theta_prior": [0.0, 1.0]}),
])
def test_bad_model_params_are_config_errors(experiment, params):
    config = tiny(experiment, model_params=params)
    with pytest.raises(ConfigError):
        validate_model_params(config)
    with pytest.raises(ConfigError):
        run_experiment(config)


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def write_config(tmp_path, payload):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return str(path)


def test_cli_validate(tmp_path, capsys):
    good = write_config(tmp_path, {"experiment": "plr_bvm", "n_values": [50]})
    assert bvmlab.main(["validate", "--config", good]) == bvmlab.EXIT_OK
    assert "is valid" in capsys.readouterr().out
    bad = write_config(tmp_path, {"experiment": "plr_bvm", "n_values": [200, 50]})
    assert bvmlab.main(["validate", "--config", bad]) == bvmlab.EXIT_CONFIG


def test_cli_validate_rejects_bad_model_params(tmp_path):
    path = write_config(tmp_path, {"experiment": "plr_bvm",
                                   "model_params": {"xi_sd": 0.0, "knot": 3}})
    assert bvmlab.main(["validate", "--config", path]) == bvmlab.EXIT_CONFIG
    misspelt = write_config(tmp_path, {"experiment": "plr_bvm", "model_params": {"knot": 3}})
    assert bvmlab.main(["validate", "--config", misspelt]) == bvmlab.EXIT_CONFIG
    assert bvmlab.main(["plr_bvm", "--config", misspelt]) == bvmlab.EXIT_CONFIG


def test_cli_rejects_a_config_for_another_experiment(tmp_path):
    path = write_config(tmp_path, {"experiment": "plr_bvm"})
    assert bvmlab.main(["coverage", "--config", path]) == bvmlab.EXIT_CONFIG


def test_cli_runs_and_writes(tmp_path):
    path = write_config(tmp_path, {"experiment": "parametric_demo", "n_values": [4],
                                   "replications": 2, "h_grid_points": 201})
    out = tmp_path / "results"
    assert bvmlab.main(["parametric_demo", "--config", path, "--seed", "3",
                        "--out", str(out)]) == bvmlab.EXIT_OK
    frame = pd.read_csv(out / "report.csv")
    assert len(frame) == 2
    assert json.loads((out / "report.json").read_text())["seed"] == 3


def test_cli_exit_codes_for_failures(tmp_path, monkeypatch):
    path = write_config(tmp_path, {"experiment": "parametric_demo", "n_values": [4],
                                   "replications": 1, "h_grid_points": 201})

    def failing_run(config):
        raise DiagnosticsError("ESS 3.0 below 20")
    monkeypatch.setattr(bvmlab, "run_experiment", failing_run)
    assert bvmlab.main(["parametric_demo", "--config", path]) == bvmlab.EXIT_DIAGNOSTICS

    monkeypatch.undo()

    def failing_emit(report, output_dir):
        raise OSError(f"cannot write {output_dir}/report.csv")
    monkeypatch.setattr(bvmlab, "emit_report", failing_emit)
    assert bvmlab.main(["parametric_demo", "--config", path,
                        "--out", str(tmp_path / "x")]) == bvmlab.EXIT_IO


# ---------------------------------------------------------------------------
# Acceptance-scale runs
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_acceptance_parametric_demo():
    report = run_experiment(ExperimentConfig.parametric_demo())
    medians = medians_by_n(report)
    assert list(medians) == sorted(medians, reverse=True)
    assert medians[256] < 0.05


@pytest.mark.slow
def test_acceptance_exact_boundary_curve():
    config = ExperimentConfig.boundary_bvm()
    config.n_values = [10]
    config.replications = 100
    config.model_params.update({"nuisance_prior": "degenerate", "mcmc_steps": 200,
                                "theta_prior_halfwidth": 0.2})
    report = run_experiment(config)
    exact = report.frame()
    exact = exact[exact["submodel"] == "exact"].groupby("n")["tv_to_limit"].median()
    assert exact[1000] < exact[100] < exact[10]
    # the prior log-slope makes the distance shrink like 1/n
    assert exact[10] / exact[1000] > 30.0
    assert exact[1000] < 0.02


@pytest.mark.slow
def test_acceptance_plr_bvm():
    report = run_experiment(ExperimentConfig.plr_bvm())
    medians = medians_by_n(report)
    assert list(medians) == sorted(medians, reverse=True)
    assert medians[800] < 0.1
    localized = medians_by_n(report, "localized_mass")
    assert localized[800] >= localized[50]


@pytest.mark.slow
def test_acceptance_ilan_probe():
    report = run_experiment(ExperimentConfig.ilan_probe())
    frame = report.frame()
    medians = frame.assign(abs_remainder=frame["ilan_remainder"].abs()) \
        .groupby("n")["abs_remainder"].median()
    assert list(medians) == sorted(medians, reverse=True)
    assert medians[800] < 0.1
    assert frame["log_ratio_gap"].median() < 0.1


@pytest.mark.slow
def test_acceptance_boundary_bvm():
    report = run_experiment(ExperimentConfig.boundary_bvm())
    frame = report.frame()
    full = frame[frame["submodel"] == "full"].groupby("n")["tv_to_limit"].median()
    assert full[1000] < 0.1
    assert full[1000] < full[250]


@pytest.mark.slow
def test_acceptance_mixture_slope():
    report = run_experiment(ExperimentConfig.mixture_bvm())
    summary = report.summary()
    assert -0.65 <= summary["sd_slope"] <= -0.35
    assert medians_by_n(report, "kolmogorov")[1600] < 0.1


@pytest.mark.slow
def test_acceptance_coverage():
    report = run_experiment(ExperimentConfig.coverage())
    coverage = report.summary()["coverage"][0]
    assert 0.92 <= coverage["credible"] <= 0.975
