#!/usr/bin/env python3
import numpy as np
import pytest
from scipy import integrate

from bvm_errors import ConfigError, EnvelopeViolationError
from model_mixture import (MixingDistribution, MixtureConfig, approx_least_favourable_score,
                           density_entropy, dp_gibbs, kl_minimizer_F, kl_objective,
                           mixture_density, mixture_efficient_info, mixture_envelope,
                           mixture_generate, mixture_score_sigma, sigma_posterior_density,
                           smooth_mixing, truth_density, validate_mixture_envelope)
from stat_core import density_mean, replication_rng


@pytest.fixture
def config():
    return MixtureConfig()


def test_mixing_distribution_validation(tmp_path):
    with pytest.raises(ValueError):
        MixingDistribution([0.2, 1.2], [0.5, 0.5])
    with pytest.raises(ValueError):
        MixingDistribution([0.2, 0.4], [0.5, 0.6])
    with pytest.raises(ValueError):
        MixingDistribution([0.2, 0.4], [1.5, -0.5])
    F = MixingDistribution.normalized([0.0, 0.5, 1.0], [1.0, 2.0, 1.0])
    assert F.mean == pytest.approx(0.5)
    path = tmp_path / "mixing.csv"
    F.to_csv(path)
    loaded = MixingDistribution.from_csv(path)
    assert np.allclose(loaded.atoms, F.atoms) and np.allclose(loaded.weights, F.weights)


def test_config_validation():
    with pytest.raises(ConfigError):
        MixtureConfig(sigma_range=(1.0, 0.5))
    with pytest.raises(ConfigError):
        MixtureConfig(sigma0=2.0)
    with pytest.raises(ConfigError):
        MixtureConfig(dp_mass=0.0)
    with pytest.raises(ConfigError):
        MixtureConfig.from_params({"atoms": [0.2, 1.5]})
    custom = MixtureConfig.from_params({"atoms": [0.2, 0.8], "sigma0": 0.4})
    assert custom.F0.weights == pytest.approx([0.5, 0.5])


def test_mixture_density_integrates_to_one(config):
    grid = np.linspace(-8.0, 9.0, 8001)
    values = mixture_density(config.sigma0, config.F0, grid)
    assert integrate.trapezoid(values, grid) == pytest.approx(1.0, abs=1e-8)
    assert isinstance(mixture_density(0.5, config.F0, 0.3), float)
    with pytest.raises(ValueError):
        mixture_density(0.0, config.F0, grid)


def test_sigma_score_matches_a_finite_difference(config):
    x = np.array([-1.0, 0.2, 0.5, 1.7])
    step = 1e-6
    numeric = (np.log(mixture_density(0.5 + step, config.F0, x))
               - np.log(mixture_density(0.5 - step, config.F0, x))) / (2.0 * step)
    assert np.allclose(mixture_score_sigma(0.5, config.F0, x), numeric, atol=1e-5)


def test_envelope_brackets_every_mixture():
    rng = replication_rng(41, 0, 0)
    x = np.linspace(-6.0, 7.0, 1301)
    mixings = [MixingDistribution.point_mass(0.0), MixingDistribution.point_mass(1.0)]
    mixings += [MixingDistribution.normalized(rng.random(5), rng.random(5)) for _ in range(5)]
    checked = validate_mixture_envelope(np.linspace(0.25, 1.0, 7), mixings, x, 0.25, 1.0, 2.0)
    assert checked == 7 * len(mixings) * x.size
    lower, upper = mixture_envelope(0.5, 0.25, 1.0, 2.0)
    assert 0.0 < lower < upper


def test_envelope_violation_is_reported():
    x = np.linspace(-1.0, 2.0, 31)
    with pytest.raises(EnvelopeViolationError):
        validate_mixture_envelope([0.1], [MixingDistribution.point_mass(0.0)], x, 0.25, 1.0, 2.0)
    with pytest.raises(ValueError):
        mixture_envelope(x, 1.0, 0.5, 2.0)
    with pytest.raises(ValueError):
        mixture_envelope(x, 0.25, 1.0, 0.5)


def test_generate_draws_from_the_mixture(config):
    sample = mixture_generate(config, 20_000, replication_rng(42, 0, 0))
    assert len(sample) == 20_000
    assert sample.values.mean() == pytest.approx(config.F0.mean, abs=0.02)


def test_dp_gibbs_keeps_sigma_in_range(config):
    sample = mixture_generate(config, 60, replication_rng(43, 0, 0))
    chain = dp_gibbs(sample, config, 400, replication_rng(43, 0, 1))
    sigmas = chain.coordinate(0)
    assert len(chain) == 400 - chain.burn_in
    assert sigmas.min() >= 0.25 and sigmas.max() <= 1.0
    assert chain.extras["clusters"].min() >= 1
    with pytest.raises(ValueError):
        dp_gibbs(sample, config, 0, replication_rng(43, 0, 1))


def test_fixed_location_sigma_posterior_concentrates():
    config = MixtureConfig(F0=MixingDistribution.point_mass(0.5), fixed_location=0.5)
    sample = mixture_generate(config, 400, replication_rng(44, 0, 0))
    chain = dp_gibbs(sample, config, 1000, replication_rng(44, 0, 1))
    density = sigma_posterior_density(chain, config)
    expected = np.sqrt(np.mean((sample.values - 0.5) ** 2))
    assert density_mean(density) == pytest.approx(expected, abs=0.02)


def test_kl_minimizer_recovers_the_truth(config):
    p0 = truth_density(config)
    z_grid = np.linspace(0.0, 1.0, 11)
    F_star = kl_minimizer_F(config.sigma0, p0, z_grid)
    kl = kl_objective(config.sigma0, F_star, p0) - density_entropy(p0)
    assert 0.0 <= kl + 1e-9 and kl < 1e-4
    # a wider kernel cannot fit as well
    wide = kl_minimizer_F(config.sigma0 + 0.2, p0, z_grid)
    assert kl_objective(config.sigma0 + 0.2, wide, p0) > kl_objective(config.sigma0, F_star, p0)
    with pytest.raises(ValueError):
        kl_minimizer_F(config.sigma0, p0, [-0.5, 0.5])


def test_single_atom_information_is_two_over_sigma_squared():
    F0 = MixingDistribution.point_mass(0.5)
    infl = mixture_efficient_info(0.5, F0, 0, 100_000, replication_rng(45, 0, 0))
    assert infl.scalar_info == pytest.approx(2.0 / 0.25, rel=0.05)


def test_projection_lowers_the_information(config):
    plain = mixture_efficient_info(config.sigma0, config.F0, 0, 20_000, replication_rng(46, 0, 0))
    efficient = mixture_efficient_info(config.sigma0, config.F0, 4, 20_000,
                                       replication_rng(46, 0, 0))
    assert efficient.scalar_info <= plain.scalar_info + 1e-6
    assert efficient.scalar_info > 0.0
    with pytest.raises(ValueError):
        mixture_efficient_info(config.sigma0, config.F0, -1, 10, replication_rng(46, 0, 0))


def test_smoothing_and_approximate_least_favourable_score(config):
    assert smooth_mixing(config.F0, 0.0) is config.F0
    smoothed = smooth_mixing(config.F0, 0.2)
    assert np.allclose(smoothed.atoms, config.F0.atoms)
    assert smoothed.weights.sum() == pytest.approx(1.0)
    sample = mixture_generate(config, 50, replication_rng(47, 0, 0))
    scores = approx_least_favourable_score(config.sigma0, truth_density(config, points=801),
                                           np.linspace(0.0, 1.0, 11), 0.01, 0.05, sample)
    assert scores.shape[0] == 50 and np.all(np.isfinite(scores))
    with pytest.raises(ValueError):
        approx_least_favourable_score(config.sigma0, truth_density(config), [0.5], 0.0, 0.05,
                                      sample)
