#!/usr/bin/env python3
import json
import logging

import numpy as np
import pytest

from bvm_errors import (DimensionMismatchError, ModelImplementationError,
                        SingularInformationError, SupportMismatchError)
from lan_toolkit import (EfficientInfluence, ExpansionReport, LocalFrame, Rate,
                         central_sequence, delta_tilde, ilan_remainder, integrated_likelihood,
                         lae_remainder, lan_remainder, mle_linearity_gap,
                         project_efficient_score, wald_interval)
from stat_core import SampleSet, replication_rng


def gaussian_location_sample(n, seed=1):
    rng = replication_rng(seed, 0, 0)
    return SampleSet(rng.standard_normal(n).reshape(-1, 1))


def gaussian_ratio(h, sample):
    x = sample.values
    theta = h / np.sqrt(len(x))
    return float(np.sum(-0.5 * (x - theta) ** 2 + 0.5 * x ** 2))


def unit_score(obs):
    return np.asarray(obs)[:, 0]


def test_local_frame_rates():
    frame = LocalFrame(1.0, Rate.SQRT_N)
    assert frame.theta(2.0, 100) == pytest.approx(1.2)
    assert frame.localize(1.2, 100) == pytest.approx(2.0)
    linear = LocalFrame(0.0, Rate.LINEAR_N)
    assert linear.localize(0.05, 100) == pytest.approx(5.0)


def test_lan_remainder_vanishes_in_gaussian_location_model():
    sample = gaussian_location_sample(100)
    infl = EfficientInfluence(unit_score, 1.0)
    for h in (-3.0, -0.5, 0.0, 1.7, 4.0):
        assert abs(lan_remainder(gaussian_ratio, sample, h, infl)) < 1e-12


def test_lan_failure_is_reported_as_infinite(caplog):
    sample = gaussian_location_sample(10)
    infl = EfficientInfluence(unit_score, 1.0)
    with caplog.at_level(logging.WARNING):
        value = lan_remainder(lambda h, s: -np.inf, sample, 1.0, infl)
    assert value == np.inf
    assert "LAN failure" in caplog.text


def test_lan_remainder_dimension_check():
    infl = EfficientInfluence(unit_score, 1.0)
    with pytest.raises(DimensionMismatchError):
        lan_remainder(gaussian_ratio, gaussian_location_sample(10), [1.0, 2.0], infl)


def exponential_shift_ratio(h, sample):
    x = sample.values
    n = len(x)
    if h / n > np.min(x):
        return -np.inf
    return float(h)


def test_lae_remainder_vanishes_in_exponential_shift_family():
    rng = replication_rng(2, 0, 0)
    sample = SampleSet(rng.exponential(1.0, 50).reshape(-1, 1))
    delta_n = 50 * float(np.min(sample.values))
    for h in (-5.0, -1.0, 0.0, 0.5 * delta_n):
        remainder, inside = lae_remainder(exponential_shift_ratio, sample, h, 1.0, 0.0)
        assert inside
        assert abs(remainder) < 1e-12
    remainder, inside = lae_remainder(exponential_shift_ratio, sample, delta_n + 1.0, 1.0, 0.0)
    assert not inside and np.isnan(remainder)


def test_lae_remainder_detects_finite_ratio_outside_support():
    sample = SampleSet(np.array([0.1, 0.2, 0.3]))
    with pytest.raises(ModelImplementationError):
        lae_remainder(lambda h, s: 0.0, sample, 10.0, 1.0, 0.0)


def test_lae_remainder_rejects_infinite_ratio_inside_support():
    sample = SampleSet(np.array([1.1, 1.2, 1.3]))
    with pytest.raises(ModelImplementationError):
        lae_remainder(lambda h, s: -np.inf, sample, 1.0, 1.0, 0.0)
    with pytest.raises(ModelImplementationError):
        lae_remainder(lambda h, s: float("nan"), sample, -2.0, 1.0, 0.0)


def test_delta_tilde_and_singular_information():
    sample = gaussian_location_sample(400)
    infl = EfficientInfluence(unit_score, 2.0)
    expected = np.sum(sample.values) / np.sqrt(400) / 2.0
    assert float(delta_tilde(sample, infl)[0]) == pytest.approx(expected)
    with pytest.raises(SingularInformationError):
        EfficientInfluence(unit_score, 0.0)
    flagged = EfficientInfluence(unit_score, 0.0, identifiable=False)
    with pytest.raises(SingularInformationError):
        delta_tilde(sample, flagged)


def test_central_sequence_requires_matching_rows():
    sample = gaussian_location_sample(5)
    with pytest.raises(DimensionMismatchError):
        central_sequence(lambda obs: np.zeros(3), sample)


def test_integrated_likelihood_with_point_mass_prior_is_the_likelihood_ratio():
    sample = gaussian_location_sample(64)
    frame = LocalFrame(0.0, Rate.SQRT_N)

    def loglik(theta, eta, s):
        return float(np.sum(-0.5 * (s.values - theta - eta) ** 2))

    for h in (-1.0, 0.5, 2.0):
        value = integrated_likelihood(sample, h, [0.0], loglik, frame, 0.0)
        assert value == pytest.approx(gaussian_ratio(h, sample), abs=1e-10)
    infl = EfficientInfluence(unit_score, 1.0)
    assert abs(ilan_remainder(sample, 1.5, [0.0, 0.0], loglik, frame, 0.0, infl)) < 1e-10


def test_integrated_likelihood_weights_and_errors():
    sample = gaussian_location_sample(16)
    frame = LocalFrame(0.0, Rate.SQRT_N)

    def loglik(theta, eta, s):
        return float(np.sum(-0.5 * (s.values - theta - eta) ** 2))

    # a weight of log 2 on each of two identical draws adds log 2
    plain = integrated_likelihood(sample, 1.0, [0.0, 0.0], loglik, frame, 0.0)
    weighted = integrated_likelihood(sample, 1.0, [0.0, 0.0], loglik, frame, 0.0,
                                     log_weights=np.log([2.0, 2.0]))
    assert weighted - plain == pytest.approx(np.log(2.0))
    with pytest.raises(DimensionMismatchError):
        integrated_likelihood(sample, 1.0, [0.0, 0.0], loglik, frame, 0.0, log_weights=[0.0])
    with pytest.raises(SupportMismatchError):
        integrated_likelihood(sample, 1.0, [0.0], lambda t, e, s: -np.inf, frame, 0.0)
    with pytest.raises(ValueError):
        integrated_likelihood(sample, 1.0, [], loglik, frame, 0.0)


def test_mle_linearity_gap_is_zero_for_the_sample_mean():
    sample = gaussian_location_sample(200)
    theta_hat = float(np.mean(sample.values))
    assert mle_linearity_gap(sample, theta_hat, unit_score, 1.0, 0.0) < 1e-12


def regression_p0_sample(size, seed=3):
    """(y, u, v) with y = e, u = 2v + xi, all noise standard normal."""
    rng = replication_rng(seed, 0, 0)
    v = rng.random(size)
    u = 2.0 * v + rng.standard_normal(size)
    y = rng.standard_normal(size)
    return SampleSet(np.column_stack([y, u, v]), columns=("y", "u", "v"))


def regression_basis():
    functions = [lambda v, j=j: v ** j for j in range(4)] + [
        lambda v: np.sin(2 * np.pi * v), lambda v: np.cos(2 * np.pi * v),
        lambda v: np.sin(4 * np.pi * v), lambda v: np.cos(4 * np.pi * v)]
    return [lambda obs, f=f: np.asarray(obs)[:, 0] * f(np.asarray(obs)[:, 2])
            for f in functions]


def ordinary_regression_score(obs):
    obs = np.asarray(obs)
    return obs[:, 0] * obs[:, 1]


def test_projection_recovers_the_efficient_score():
    sample = regression_p0_sample(200_000)
    basis = regression_basis()
    infl = project_efficient_score(ordinary_regression_score, basis, sample)
    obs = sample.observations
    target = obs[:, 0] * (obs[:, 1] - 2.0 * obs[:, 2])
    efficient = infl.score(obs)
    assert np.sqrt(np.mean((efficient - target) ** 2)) < 0.05
    assert infl.identifiable and infl.ridge == 0.0
    assert abs(infl.scalar_info - 1.0) < 3.0 * infl.info_se + 0.01
    # orthogonality to every basis element
    for g in basis:
        products = efficient * g(obs)
        se = np.std(products) / np.sqrt(len(sample))
        assert abs(np.mean(products)) < 3.0 * se
    # P l^2 = P l~^2 + P (l - l~)^2
    ordinary = ordinary_regression_score(obs)
    gap = np.mean(ordinary ** 2) - np.mean(efficient ** 2) - np.mean((ordinary - efficient) ** 2)
    assert abs(gap) < 3.0 * infl.info_se + 1e-8


def test_projection_with_empty_basis_is_the_plain_information():
    sample = regression_p0_sample(5000)
    infl = project_efficient_score(ordinary_regression_score, [], sample)
    ordinary = ordinary_regression_score(sample.observations)
    assert infl.scalar_info == pytest.approx(np.mean(ordinary ** 2))
    assert infl.coefficients.size == 0


def test_projection_flags_ridge_and_non_identifiability(caplog):
    sample = regression_p0_sample(5000)
    basis = regression_basis()
    with caplog.at_level(logging.WARNING):
        ridged = project_efficient_score(ordinary_regression_score, basis + [basis[0]], sample)
    assert ridged.ridge > 0.0
    assert "ridge" in caplog.text
    caplog.clear()
    with caplog.at_level(logging.WARNING):
        degenerate = project_efficient_score(ordinary_regression_score,
                                             [ordinary_regression_score], sample)
    assert not degenerate.identifiable
    assert "not identifiable" in caplog.text


def test_wald_interval():
    lo, hi = wald_interval(0.0, 1.0, 100, 0.95)
    assert (lo, hi) == pytest.approx((-0.195996, 0.195996), abs=1e-5)
    with pytest.raises(SingularInformationError):
        wald_interval(0.0, 0.0, 100)
    with pytest.raises(ValueError):
        wald_interval(0.0, 1.0, 100, 1.5)


def test_expansion_report_summary_and_json():
    report = ExpansionReport.collect(50, [-1.0, 1.0, 2.0], lambda h: {-1.0: 0.1, 1.0: -0.3,
                                                                     2.0: np.inf}[h])
    assert report.summary == pytest.approx(0.2)
    payload = json.loads(report.to_json())
    assert payload["h"] == [-1.0, 1.0, 2.0]
    assert payload["median_abs"] == pytest.approx(0.2)
    with pytest.raises(ValueError):
        ExpansionReport(10, [1.0], [])
