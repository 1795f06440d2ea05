#!/usr/bin/env python3
import numpy as np
import pytest
from scipy import integrate
from scipy import stats as scipy_stats

from bvm_errors import (NegativeDensityError, NonMonotoneGridError, UnsupportedLawError,
                        ZeroMassError)
from stat_core import (GaussianLaw, NegExpLaw, SampleSet, density_cdf, density_mean,
                       density_quantile, density_sd, grid_density_from_csv,
                       grid_density_to_csv, hellinger_distance, histogram_density,
                       interval_mass, kolmogorov_distance, law_cdf, law_from_json,
                       law_quantile, law_to_json, make_grid_density, replication_rng,
                       sample_grid_density, sample_law, spawn_rngs, tabulate_law,
                       tv_distance, tv_to_law)


def normal_density(mean, sd, grid):
    return make_grid_density(grid, scipy_stats.norm.pdf(grid, mean, sd))


def test_tv_between_unit_normals_matches_closed_form():
    grid = np.linspace(-8.0, 9.0, 4001)
    p = normal_density(0.0, 1.0, grid)
    q = normal_density(1.0, 1.0, grid)
    exact = 2.0 * scipy_stats.norm.cdf(0.5) - 1.0
    assert abs(tv_distance(p, q) - exact) < 1e-4
    assert abs(tv_distance(p, q) - 0.382925) < 1e-4


def test_tv_is_a_metric_on_simple_cases():
    grid = np.linspace(-6.0, 6.0, 1201)
    p = normal_density(0.0, 1.0, grid)
    q = normal_density(0.5, 1.5, grid)
    assert tv_distance(p, p) == pytest.approx(0.0, abs=1e-12)
    assert tv_distance(p, q) == pytest.approx(tv_distance(q, p), abs=1e-12)
    # disjoint supports
    left = make_grid_density(np.linspace(0.0, 1.0, 11), np.ones(11))
    right = make_grid_density(np.linspace(2.0, 3.0, 11), np.ones(11))
    assert tv_distance(left, right) == pytest.approx(1.0, abs=1e-12)


def test_tv_handles_sign_crossing_segments_exactly():
    # two linear densities on [0, 1] crossing at 1/2: 2x and 2 - 2x
    grid = np.array([0.0, 1.0])
    p = make_grid_density(grid, [0.0, 2.0])
    q = make_grid_density(grid, [2.0, 0.0])
    # 1/2 * integral |4x - 2| = 1/2
    assert tv_distance(p, q) == pytest.approx(0.5, abs=1e-12)


def test_hellinger_between_unit_normals():
    grid = np.linspace(-8.0, 9.0, 4001)
    p = normal_density(0.0, 1.0, grid)
    q = normal_density(1.0, 1.0, grid)
    exact = np.sqrt(2.0 * (1.0 - np.exp(-1.0 / 8.0)))
    assert hellinger_distance(p, q) == pytest.approx(exact, abs=1e-4)


def test_tv_to_law_accounts_for_untabulated_mass():
    # truncated normal on [-1, 1] against the full normal: TV = P(|Z| > 1)
    grid = np.linspace(-1.0, 1.0, 2001)
    truncated = normal_density(0.0, 1.0, grid)
    outside = 2.0 * scipy_stats.norm.cdf(-1.0)
    assert tv_to_law(truncated, GaussianLaw.scalar(0.0, 1.0)) == pytest.approx(outside, abs=1e-3)


def test_tv_to_negative_exponential_law():
    law = NegExpLaw(0.0, 2.0)
    grid = np.linspace(-12.0, 0.0, 6001)
    density = make_grid_density(grid, 2.0 * np.exp(2.0 * grid))
    assert tv_to_law(density, law) < 1e-3
    shifted = make_grid_density(grid - 0.5, 2.0 * np.exp(2.0 * grid))
    # Exp-(0, 2) vs Exp-(-0.5, 2): TV = 1 - exp(-rate * shift)
    assert tv_to_law(shifted, law) == pytest.approx(1.0 - np.exp(-1.0), abs=2e-3)


def test_tabulate_negexp_ends_at_location():
    law = NegExpLaw(1.5, 3.0)
    table, tail = tabulate_law(law, np.linspace(0.0, 2.0, 101))
    assert table.upper == pytest.approx(1.5)
    assert tail < 1e-9


@pytest.mark.parametrize("loc", [0.0, 1.0, 37.25, -713.8])
def test_grid_ending_within_rounding_of_the_location(loc):
    law = NegExpLaw(loc, 1.0)
    for end in (np.nextafter(loc, -np.inf), loc):
        grid = np.linspace(loc - 5.0, end, 401)
        density = make_grid_density(grid, np.exp(grid - loc))
        table, _ = tabulate_law(law, grid)
        assert np.all(np.diff(table.grid) > 0)
        # renormalized truncation to [loc - 5, loc]: TV = exp(-5)
        assert tv_to_law(density, law) == pytest.approx(np.exp(-5.0), abs=1e-3)


def test_multivariate_law_is_rejected_by_tv_to_law():
    grid = np.linspace(-3.0, 3.0, 101)
    law = GaussianLaw(np.zeros(2), np.eye(2))
    with pytest.raises(UnsupportedLawError):
        tv_to_law(normal_density(0.0, 1.0, grid), law)


def test_make_grid_density_validation():
    with pytest.raises(NonMonotoneGridError):
        make_grid_density([0.0, 0.0, 1.0], [1.0, 1.0, 1.0])
    with pytest.raises(NegativeDensityError):
        make_grid_density([0.0, 0.5, 1.0], [1.0, -0.1, 1.0])
    with pytest.raises(ZeroMassError):
        make_grid_density([0.0, 0.5, 1.0], [0.0, 0.0, 0.0])
    density = make_grid_density([0.0, 1.0, 2.0], [1.0, 2.0, 1.0])
    assert integrate.trapezoid(density.values, density.grid) == pytest.approx(1.0)
    assert density(-1.0) == 0.0 and density(3.0) == 0.0


def test_density_cdf_quantile_and_interval_mass():
    grid = np.linspace(-8.0, 8.0, 3201)
    density = normal_density(0.0, 1.0, grid)
    assert density_cdf(density)[-1] == pytest.approx(1.0, abs=1e-8)
    assert density_quantile(density, 0.975) == pytest.approx(1.959964, abs=1e-3)
    assert interval_mass(density, -1.959964, 1.959964) == pytest.approx(0.95, abs=1e-3)
    assert interval_mass(density, 1.0, -1.0) == 0.0
    assert density_mean(density) == pytest.approx(0.0, abs=1e-8)
    assert density_sd(density) == pytest.approx(1.0, abs=1e-3)
    assert kolmogorov_distance(density, GaussianLaw.scalar(0.0, 1.0)) < 1e-4


def test_sample_grid_density_stays_on_support():
    rng = replication_rng(7, 0, 0)
    density = make_grid_density([0.0, 1.0], [0.0, 2.0])
    draws = sample_grid_density(density, 20000, rng)
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    # mean of the density 2x on [0, 1] is 2/3
    assert draws.mean() == pytest.approx(2.0 / 3.0, abs=0.01)


def test_law_cdf_and_quantile_are_inverse():
    for law in (GaussianLaw.scalar(1.0, 4.0), NegExpLaw(2.0, 0.5)):
        u = np.array([0.01, 0.3, 0.5, 0.9])
        assert np.allclose(law_cdf(law, law_quantile(law, u)), u, atol=1e-10)


def test_sample_law_negexp_respects_location():
    rng = replication_rng(3, 1, 2)
    sample = sample_law(NegExpLaw(0.5, 4.0), 1000, rng)
    assert np.all(sample.values <= 0.5)
    assert sample.values.mean() == pytest.approx(0.5 - 0.25, abs=0.03)


def test_replication_streams_are_independent_of_each_other():
    a = replication_rng(11, 0, 3).random(5)
    b = replication_rng(11, 0, 3).random(5)
    c = replication_rng(11, 0, 4).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    children = spawn_rngs(replication_rng(11, 0, 0), 3)
    assert len(children) == 3
    assert not np.array_equal(children[0].random(3), children[1].random(3))


def test_sample_set_is_read_only():
    sample = SampleSet(np.arange(4.0))
    assert sample.dim == 1 and len(sample) == 4
    with pytest.raises(ValueError):
        sample.values[0] = 10.0
    frame = sample.to_frame()
    assert list(frame.columns) == ["x"]


def test_grid_density_csv_and_law_json(tmp_path):
    density = normal_density(0.0, 1.0, np.linspace(-5.0, 5.0, 101))
    path = tmp_path / "density.csv"
    grid_density_to_csv(density, path)
    loaded = grid_density_from_csv(path)
    assert np.allclose(loaded.grid, density.grid)
    assert np.allclose(loaded.values, density.values)
    law = law_from_json(law_to_json(NegExpLaw(1.0, 3.0)))
    assert isinstance(law, NegExpLaw) and law.rate == 3.0
    gaussian = law_from_json(law_to_json(GaussianLaw.scalar(0.5, 2.0)))
    assert gaussian.sd == pytest.approx(np.sqrt(2.0))


def test_histogram_density_is_normalized():
    rng = replication_rng(5, 0, 0)
    density = histogram_density(rng.standard_normal(5000))
    assert integrate.trapezoid(density.values, density.grid) == pytest.approx(1.0)


def random_density(rng, lo, hi, points):
    """Piecewise-linear density on an irregular grid with random ordinates."""
    grid = np.sort(np.concatenate(([lo, hi], rng.uniform(lo, hi, points - 2))))
    return make_grid_density(grid, rng.random(points) + 0.05 * rng.integers(0, 2, points))


def smooth_random_density(rng, grid):
    means = rng.uniform(-2.0, 2.0, 3)
    sds = rng.uniform(0.3, 1.5, 3)
    weights = rng.dirichlet(np.ones(3))
    values = sum(w * scipy_stats.norm.pdf(grid, m, s) for w, m, s in zip(weights, means, sds))
    return make_grid_density(grid, values)


def test_le_cam_inequalities_on_random_pairs():
    rng = replication_rng(6, 0, 0)
    for _ in range(25):
        p = smooth_random_density(rng, np.linspace(-7.0, 7.0, 2801))
        q = smooth_random_density(rng, np.linspace(-8.0, 6.0, 3001))
        tv, h = tv_distance(p, q), hellinger_distance(p, q)
        assert 0.5 * h * h <= tv + 1e-9
        assert tv <= h + 1e-9


def test_tv_triangle_inequality_on_random_triples():
    rng = replication_rng(7, 0, 0)
    for _ in range(50):
        p, q, r = (random_density(rng, rng.uniform(-1.0, 0.5), rng.uniform(1.0, 2.5), 17)
                   for _ in range(3))
        assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-10
        assert tv_distance(p, q) == tv_distance(q, p)


def test_hellinger_closed_forms():
    grid = np.linspace(0.0, 40.0, 40_001)
    exp1 = make_grid_density(grid, np.exp(-grid))
    exp2 = make_grid_density(grid, 2.0 * np.exp(-2.0 * grid))
    # Bhattacharyya coefficient 2 sqrt(2) / 3
    assert hellinger_distance(exp1, exp2) == pytest.approx(np.sqrt(2.0 - 4.0 * np.sqrt(2.0) / 3.0),
                                                           abs=1e-3)
    assert hellinger_distance(exp1, exp1) == pytest.approx(0.0, abs=1e-12)
    left = make_grid_density(np.linspace(0.0, 1.0, 11), np.ones(11))
    right = make_grid_density(np.linspace(2.0, 3.0, 11), np.ones(11))
    assert hellinger_distance(left, right) == pytest.approx(np.sqrt(2.0), abs=1e-6)


def test_histogram_reestimate_converges_to_the_law():
    law = GaussianLaw.scalar(0.0, 1.0)
    medians = []
    for n in (1_000, 10_000, 100_000):
        distances = [tv_to_law(histogram_density(sample_law(law, n, replication_rng(8, n, r)).values),
                               law)
                     for r in range(20)]
        medians.append(np.median(distances))
    assert medians[0] > medians[1] > medians[2]
