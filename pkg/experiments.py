"""
Batch experiments.

Each experiment is a pure function of its ExperimentConfig: replication r of
the i-th sample size draws from replication_rng(seed, i, r) only, and rows
are assembled in task order whether or not replications run in parallel.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from bvm_errors import BvmLabError, ConfigError, DiagnosticsError
from experiment_config import ExperimentConfig
from lan_toolkit import (LocalFrame, Rate, delta_tilde, central_sequence,
                         ilan_remainder, wald_interval)
from model_boundary import (BoundaryConfig, boundary_generate, boundary_posterior,
                            exp_location_exact_posterior)
from model_mixture import (MixtureConfig, dp_gibbs, mixture_generate,
                           sigma_posterior_density)
from model_plr import (PlrConfig, plr_efficient_influence, plr_exact_log_sn_ratio,
                       plr_generate, plr_importance_draws, plr_loglik,
                       plr_marginal_posterior, plr_perturbation_probe)
from posterior_engine import (credible_interval, effective_sample_size, grid_posterior,
                              map_estimate, posterior_median)
from report_statistics import ConvergenceReport, DensityPanel
from stat_core import (GaussianLaw, GridDensity, NegExpLaw, SampleSet, density_mean,
                       density_sd, interval_mass, kolmogorov_distance, law_density,
                       make_grid_density, replication_rng, tv_to_law)

logger = logging.getLogger(__name__)

PANEL_KEY = 10_000          # rng key of the prior-to-posterior panel sample
EXACT_KEY_OFFSET = 1_000    # n-index offset of the exact boundary sub-experiment
PLR_H_SPAN = 8.0            # h-grid half width in limit standard deviations
EXACT_PRIOR_SHIFT = 1.0     # exact boundary prior: N(theta0 - shift, sd^2)
EXACT_PRIOR_SD = 1.0
EXACT_PRIOR_POINTS = 4001

Task = Tuple[ExperimentConfig, int, int, int]
Outcome = Tuple[List[Dict], List[Tuple[str, DensityPanel]]]


def _tasks(config: ExperimentConfig, n_values=None, offset: int = 0) -> List[Task]:
    n_values = config.n_values if n_values is None else n_values
    return [(config, offset + i, n, r)
            for i, n in enumerate(n_values) for r in range(config.replications)]


def run_replications(config: ExperimentConfig, worker: Callable[[Task], Outcome],
                     tasks: List[Task]) -> List[Outcome]:
    """Map a worker over tasks, in worker processes when config.jobs > 1; order is kept."""
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            return list(pool.map(worker, tasks))
    return [worker(task) for task in tasks]


def _collect(report: ConvergenceReport, outcomes: List[Outcome]) -> ConvergenceReport:
    for rows, panels in outcomes:
        for row in rows:
            report.add_row(row)
        for figure, panel in panels:
            report.add_panel(figure, panel)
    return report


def _localized_mass(density: GridDensity, n: int, center: float = 0.0,
                    scale: float = 1.0) -> float:
    """Posterior mass of |h| <= log n, with h = scale * (x - center)."""
    radius = math.log(n) / scale if n > 1 else 0.0
    return interval_mass(density, center - radius, center + radius)


def _limit_panel(title: str, density: GridDensity, law, markers=None) -> DensityPanel:
    return DensityPanel(title, density.grid.copy(),
                        {"posterior": density.values.copy(),
                         "limit": np.asarray(law_density(law, density.grid), dtype=float)},
                        dict(markers or {}))


def _with_metadata(task: Task, fn):
    config, i, n, r = task
    try:
        return fn()
    except DiagnosticsError as e:
        raise DiagnosticsError(
            f"{config.experiment}: n={n} replication={r} seed={config.seed}: {e}") from e


def _metadata(config: ExperimentConfig) -> Dict:
    return {"seed": config.seed, "level": config.level, "n_values": config.n_values,
            "replications": config.replications}


# ---------------------------------------------------------------------------
# Normal means with a polynomial prior
# ---------------------------------------------------------------------------

def polynomial_prior(theta, lower: float, upper: float):
    """0.2 + (theta - lower)(upper - theta) on [lower, upper], unnormalized."""
    theta = np.asarray(theta, dtype=float)
    inside = (theta >= lower) & (theta <= upper)
    return np.where(inside, 0.2 + (theta - lower) * (upper - theta), 0.0)


def normal_means_posterior(x: np.ndarray, lower: float, upper: float,
                           points: int) -> Tuple[GridDensity, Optional[float]]:
    """
    Posterior over [lower, upper] for N(theta, 1) data, and the MLE.

    The MLE is the sample mean clipped to the parameter interval (None for
    an empty sample).
    """
    grid = np.linspace(lower, upper, points)
    n = x.size
    xbar = float(np.mean(x)) if n else 0.0

    def log_prior(theta):
        value = float(polynomial_prior(theta, lower, upper))
        return math.log(value) if value > 0 else -math.inf

    density = grid_posterior(lambda theta: -0.5 * n * (xbar - theta) ** 2, log_prior, grid)
    mle = float(np.clip(xbar, lower, upper)) if n else None
    return density, mle


def _parametric_replication(task: Task) -> Outcome:
    config, i, n, r = task
    lower = float(config.param("lower", -1.0))
    upper = float(config.param("upper", 2.0))
    theta0 = float(config.param("theta0", 0.5))
    rng = replication_rng(config.seed, i, r)
    x = theta0 + rng.standard_normal(n)
    density, mle = normal_means_posterior(x, lower, upper, config.h_grid_points)
    if mle is None:
        raise ValueError("parametric_demo rows need n >= 1")
    limit = GaussianLaw.scalar(mle, 1.0 / n)
    row = {"n": n, "replication": r, "tv_to_limit": tv_to_law(density, limit),
           "center": mle, "info_or_gamma": 1.0, "ess": float("nan"),
           "localized_mass": _localized_mass(density, n, theta0, math.sqrt(n)),
           "mle": mle, "map": map_estimate(density), "posterior_sd": density_sd(density)}
    panels = []
    if r == 0:
        panels.append(("posterior_vs_limit", _limit_panel(
            f"n = {n}", density, limit, {"MLE": mle, "MAP": map_estimate(density)})))
    return [row], panels


def prior_to_posterior_panels(config: ExperimentConfig) -> List[DensityPanel]:
    """
    Posterior densities for growing prefixes of one sample; the n = 0 panel
    is the prior itself.
    """
    lower = float(config.param("lower", -1.0))
    upper = float(config.param("upper", 2.0))
    theta0 = float(config.param("theta0", 0.5))
    panel_n = [int(n) for n in config.param("panel_n", [0, 1, 4, 16, 64, 256])]
    rng = replication_rng(config.seed, PANEL_KEY, 0)
    x = theta0 + rng.standard_normal(max(panel_n) if panel_n else 0)
    panels = []
    for n in panel_n:
        density, mle = normal_means_posterior(x[:n], lower, upper, config.h_grid_points)
        markers = {} if mle is None else {"MLE": mle, "MAP": map_estimate(density)}
        panels.append(DensityPanel(f"n = {n}", density.grid.copy(),
                                   {"posterior": density.values.copy()}, markers))
    return panels


def run_parametric_demo(config: ExperimentConfig) -> ConvergenceReport:
    """TV between the grid posterior and N(MLE, 1/n) in the normal-means model."""
    report = ConvergenceReport("parametric_demo", metadata=_metadata(config))
    _collect(report, run_replications(config, _parametric_replication, _tasks(config)))
    for panel in prior_to_posterior_panels(config):
        report.add_panel("prior_to_posterior", panel)
    return report


# ---------------------------------------------------------------------------
# Partial linear regression
# ---------------------------------------------------------------------------

def _plr_setting(config: ExperimentConfig, i: int, n: int, r: int):
    plr_config = PlrConfig.from_params(config.model_params)
    rng = replication_rng(config.seed, i, r)
    sample = plr_generate(plr_config, n, rng)
    return plr_config, sample, rng


def plr_h_posterior(sample: SampleSet, plr_config: PlrConfig, config: ExperimentConfig,
                    rng: np.random.Generator):
    """
    Marginal h-posterior on a grid centred at the efficient central sequence.

    Returns (density, delta_tilde, efficient information, influence).
    """
    infl = plr_efficient_influence(plr_config)
    info = infl.scalar_info
    center = float(delta_tilde(sample, infl)[0])
    span = PLR_H_SPAN / math.sqrt(info)
    h_grid = np.linspace(center - span, center + span, config.h_grid_points)
    density = plr_marginal_posterior(sample, plr_config, h_grid,
                                     mode=config.param("mode"), rng=rng)
    return density, center, info, infl


def _plr_base_row(n: int, r: int, density: GridDensity, center: float,
                  info: float) -> Dict:
    return {"n": n, "replication": r,
            "tv_to_limit": tv_to_law(density, GaussianLaw.scalar(center, 1.0 / info)),
            "center": center, "info_or_gamma": info, "ess": float("nan"),
            "localized_mass": _localized_mass(density, n)}


def _plr_intervals(density: GridDensity, center: float, info: float, n: int,
                   theta0: float, level: float):
    """Credible and Wald intervals on the theta scale."""
    root = math.sqrt(n)
    lo, hi = credible_interval(density, level)
    wald = wald_interval(theta0 + center / root, info, n, level)
    return (theta0 + lo / root, theta0 + hi / root), wald


def _plr_replication(task: Task) -> Outcome:
    config, i, n, r = task

    def body():
        plr_config, sample, rng = _plr_setting(config, i, n, r)
        density, center, info, _ = plr_h_posterior(sample, plr_config, config, rng)
        row = _plr_base_row(n, r, density, center, info)
        credible, wald = _plr_intervals(density, center, info, n, plr_config.theta0,
                                        config.level)
        row.update({"posterior_median": plr_config.theta0
                    + posterior_median(density) / math.sqrt(n),
                    "credible_lo": credible[0], "credible_hi": credible[1],
                    "wald_lo": wald[0], "wald_hi": wald[1]})
        panels = []
        if r == 0:
            panels.append(("posterior_vs_limit", _limit_panel(
                f"n = {n}", density, GaussianLaw.scalar(center, 1.0 / info))))
        return [row], panels
    return _with_metadata(task, body)


def run_plr_bvm(config: ExperimentConfig) -> ConvergenceReport:
    """TV between the marginal h-posterior and N(delta_tilde, 1/info)."""
    report = ConvergenceReport("plr_bvm", metadata=_metadata(config))
    return _collect(report, run_replications(config, _plr_replication, _tasks(config)))


def _coverage_replication(task: Task) -> Outcome:
    config, i, n, r = task

    def body():
        plr_config, sample, rng = _plr_setting(config, i, n, r)
        density, center, info, _ = plr_h_posterior(sample, plr_config, config, rng)
        row = _plr_base_row(n, r, density, center, info)
        theta0 = plr_config.theta0
        credible, wald = _plr_intervals(density, center, info, n, theta0, config.level)
        median = theta0 + posterior_median(density) / math.sqrt(n)
        row.update({"credible_lo": credible[0], "credible_hi": credible[1],
                    "wald_lo": wald[0], "wald_hi": wald[1],
                    "credible_covers": int(credible[0] <= theta0 <= credible[1]),
                    "wald_covers": int(wald[0] <= theta0 <= wald[1]),
                    "median_covered": int(credible[0] <= median <= credible[1])})
        return [row], []
    return _with_metadata(task, body)


def run_coverage(config: ExperimentConfig) -> ConvergenceReport:
    """Empirical coverage of central credible intervals and of Wald intervals."""
    report = ConvergenceReport("coverage", metadata=_metadata(config))
    return _collect(report, run_replications(config, _coverage_replication, _tasks(config)))


def _ilan_replication(task: Task) -> Outcome:
    config, i, n, r = task

    def body():
        plr_config, sample, rng = _plr_setting(config, i, n, r)
        density, center, info, infl = plr_h_posterior(sample, plr_config, config, rng)
        base = _plr_base_row(n, r, density, center, info)
        draws, log_weights = plr_importance_draws(
            sample, plr_config, int(config.param("draws", 2000)), rng)
        frame = LocalFrame(plr_config.theta0, Rate.SQRT_N)
        gamma_n = float(central_sequence(infl.score, sample)[0])
        rows = []
        for h in config.param("h_values", [-2.0, -1.0, 1.0, 2.0]):
            h = float(h)
            remainder = ilan_remainder(sample, h, draws, plr_loglik, frame, plr_config.eta0,
                                       infl, log_weights)
            exact = plr_exact_log_sn_ratio(sample, plr_config, h) \
                - (h * gamma_n - 0.5 * h * h * info)
            rows.append(dict(base, h=h, ilan_remainder=remainder, exact_remainder=exact,
                             log_ratio_gap=abs(remainder - exact)))
        return rows, []
    return _with_metadata(task, body)


def run_ilan_probe(config: ExperimentConfig) -> ConvergenceReport:
    """
    Remainder of the integrated likelihood expansion from importance-weighted
    nuisance draws, against its closed form under the Gaussian prior.
    """
    report = ConvergenceReport("ilan_probe", metadata=_metadata(config))
    return _collect(report, run_replications(config, _ilan_replication, _tasks(config)))


def _perturbation_replication(task: Task) -> Outcome:
    config, i, n, r = task

    def body():
        plr_config, sample, rng = _plr_setting(config, i, n, r)
        density, center, info, _ = plr_h_posterior(sample, plr_config, config, rng)
        row = _plr_base_row(n, r, density, center, info)
        h = float(config.param("h", 0.0))
        rho = float(config.param("rho", 0.1))
        mass = plr_perturbation_probe(sample, plr_config, h, rho,
                                      int(config.param("draws", 2000)), rng)
        row.update({"h": h, "rho": rho, "ball_mass": mass})
        return [row], []
    return _with_metadata(task, body)


def run_perturbation_probe(config: ExperimentConfig) -> ConvergenceReport:
    """Nuisance posterior mass of a Hellinger ball around the least-favourable path."""
    report = ConvergenceReport("perturbation_probe", metadata=_metadata(config))
    return _collect(report, run_replications(config, _perturbation_replication,
                                             _tasks(config)))


# ---------------------------------------------------------------------------
# Mixture kernel scale
# ---------------------------------------------------------------------------

def _mixture_replication(task: Task) -> Outcome:
    config, i, n, r = task

    def body():
        mixture_config = MixtureConfig.from_params(config.model_params)
        rng = replication_rng(config.seed, i, r)
        sample = mixture_generate(mixture_config, n, rng)
        chain = dp_gibbs(sample, mixture_config, mixture_config.mcmc_steps, rng)
        density = sigma_posterior_density(chain, mixture_config)
        mean, sd = density_mean(density), density_sd(density)
        matched = GaussianLaw.scalar(mean, sd * sd)
        row = {"n": n, "replication": r, "tv_to_limit": tv_to_law(density, matched),
               "center": mean, "info_or_gamma": 1.0 / (n * sd * sd),
               "ess": effective_sample_size(chain, 0),
               "localized_mass": _localized_mass(density, n, mixture_config.sigma0,
                                                 math.sqrt(n)),
               "posterior_sd": sd, "kolmogorov": kolmogorov_distance(density, matched),
               "mean_clusters": float(np.mean(chain.extras["clusters"]))}
        panels = []
        if r == 0:
            panels.append(("posterior_vs_limit", _limit_panel(
                f"n = {n}", density, matched, {"sigma0": mixture_config.sigma0})))
        return [row], panels
    return _with_metadata(task, body)


def run_mixture_bvm(config: ExperimentConfig) -> ConvergenceReport:
    """
    Shape and scaling of the marginal posterior of the kernel scale.

    The limit law is the normal with the posterior's own mean and sd; the
    summary carries the log-log slope of the median posterior sd in n.
    """
    report = ConvergenceReport("mixture_bvm", metadata=_metadata(config))
    return _collect(report, run_replications(config, _mixture_replication, _tasks(config)))


# ---------------------------------------------------------------------------
# Support boundary
# ---------------------------------------------------------------------------

def _boundary_replication(task: Task) -> Outcome:
    config, i, n, r = task

    def body():
        boundary_config = BoundaryConfig.from_params(config.model_params)
        rng = replication_rng(config.seed, i, r)
        sample = boundary_generate(boundary_config, n, rng)
        posterior = boundary_posterior(sample, boundary_config, boundary_config.mcmc_steps, rng)
        limit = NegExpLaw(posterior.delta_n, posterior.gamma)
        row = {"n": n, "replication": r,
               "tv_to_limit": tv_to_law(posterior.h_density, limit),
               "center": posterior.delta_n, "info_or_gamma": posterior.gamma,
               "ess": effective_sample_size(posterior.chain, 0),
               "localized_mass": _localized_mass(posterior.h_density, n),
               "submodel": "full", "path_accept_rate": posterior.path_accept_rate}
        panels = []
        if r == 0:
            panels.append(("posterior_vs_limit", _limit_panel(
                f"n = {n}", posterior.h_density, limit)))
        return [row], panels
    return _with_metadata(task, body)


def exact_boundary_prior(theta0: float) -> GridDensity:
    """N(theta0 - shift, sd^2) tabulated over +-8 sd; its log-slope at theta0 is -shift/sd^2."""
    mean = theta0 - EXACT_PRIOR_SHIFT
    span = 8.0 * EXACT_PRIOR_SD
    grid = np.linspace(mean - span, mean + span, EXACT_PRIOR_POINTS)
    return make_grid_density(grid, law_density(GaussianLaw.scalar(mean, EXACT_PRIOR_SD ** 2), grid))


def _exact_boundary_replication(task: Task) -> Outcome:
    """Exponential location family with a smooth prior: exact posterior against Exp-(X_(1), n)."""
    config, i, n, r = task
    theta0 = BoundaryConfig.from_params(config.model_params).theta0
    rng = replication_rng(config.seed, i, r)
    sample = SampleSet((theta0 + rng.exponential(1.0, n)).reshape(-1, 1))
    density = exp_location_exact_posterior(sample, exact_boundary_prior(theta0), rate=1.0)
    x_min = float(np.min(sample.values))
    limit = NegExpLaw(x_min, float(n))
    row = {"n": n, "replication": r, "tv_to_limit": tv_to_law(density, limit),
           "center": x_min, "info_or_gamma": 1.0, "ess": float("nan"),
           "localized_mass": _localized_mass(density, n, theta0, float(n)),
           "submodel": "exact", "path_accept_rate": float("nan")}
    panels = []
    if r == 0:
        panels.append(("exact_posterior_vs_limit", _limit_panel(f"n = {n}", density, limit)))
    return [row], panels


def run_boundary_bvm(config: ExperimentConfig) -> ConvergenceReport:
    """
    TV between the h-posterior and Exp-(delta_n, eta0(0)), followed by the
    exact exponential-location curve over the exact_n sample sizes.
    """
    report = ConvergenceReport("boundary_bvm", metadata=_metadata(config))
    _collect(report, run_replications(config, _boundary_replication, _tasks(config)))
    exact_n = [int(n) for n in config.param("exact_n", [])]
    if exact_n:
        tasks = _tasks(config, exact_n, offset=EXACT_KEY_OFFSET)
        _collect(report, run_replications(config, _exact_boundary_replication, tasks))
    return report


# ---------------------------------------------------------------------------
# Model parameters
# ---------------------------------------------------------------------------

PLR_KEYS = frozenset({"theta0", "knots", "prior_k", "holder_alpha", "holder_bound", "xi_sd",
                      "eta0", "eta0_amplitude", "condexp", "condexp_slope",
                      "theta_prior_mean", "theta_prior_sd", "nuisance_prior", "mcmc_steps",
                      "verbose_logging"})
MIXTURE_KEYS = frozenset({"sigma0", "atoms", "weights", "sigma_range", "dp_mass",
                          "aux_components", "location_step", "fixed_location", "mcmc_steps",
                          "verbose_logging"})
BOUNDARY_KEYS = frozenset({"theta0", "alpha", "S", "prior_S", "prior_knots", "lscript0_constant",
                           "grid_T", "theta_prior_halfwidth", "nuisance_prior", "pcn_blend",
                           "mcmc_steps", "verbose_logging"})

# model_params keys each experiment reads
MODEL_KEYS: Dict[str, frozenset] = {
    "parametric_demo": frozenset({"panel_n", "lower", "upper", "theta0"}),
    "plr_bvm": PLR_KEYS | {"mode"},
    "mixture_bvm": MIXTURE_KEYS,
    "boundary_bvm": BOUNDARY_KEYS | {"exact_n"},
    "coverage": PLR_KEYS,
    "ilan_probe": PLR_KEYS | {"draws", "h_values"},
    "perturbation_probe": PLR_KEYS | {"draws", "h", "rho"},
}


def _sample_sizes(values, name: str, minimum: int) -> None:
    if not isinstance(values, (list, tuple)) or not all(
            isinstance(n, int) and not isinstance(n, bool) for n in values):
        raise ConfigError(f"{name} must be a list of integers")
    if any(n < minimum for n in values):
        raise ConfigError(f"{name} entries must be at least {minimum}")


def _check_model_params(config: ExperimentConfig) -> None:
    experiment = config.experiment
    if experiment == "parametric_demo":
        lower = float(config.param("lower", -1.0))
        upper = float(config.param("upper", 2.0))
        theta0 = float(config.param("theta0", 0.5))
        if not lower < upper:
            raise ConfigError("need lower < upper")
        if not lower <= theta0 <= upper:
            raise ConfigError("theta0 must lie in [lower, upper]")
        _sample_sizes(config.param("panel_n", []), "panel_n", 0)
    elif experiment == "mixture_bvm":
        MixtureConfig.from_params(config.model_params)
    elif experiment == "boundary_bvm":
        BoundaryConfig.from_params(config.model_params)
        _sample_sizes(config.param("exact_n", []), "exact_n", 1)
    else:
        plr_config = PlrConfig.from_params(config.model_params)
        mode = config.param("mode")
        if mode not in (None, "exact", "mcmc"):
            raise ConfigError(f"unknown mode {mode!r}")
        if mode == "exact" and plr_config.conditioned:
            raise ConfigError("the conditioned prior has no closed-form marginal; use mode='mcmc'")
        if int(config.param("draws", 1)) < 1:
            raise ConfigError("draws must be at least 1")
        np.asarray(config.param("h_values", []), dtype=float)
        float(config.param("h", 0.0))
        if not float(config.param("rho", 1.0)) > 0:
            raise ConfigError("rho must be positive")


def validate_model_params(config: ExperimentConfig) -> None:
    """
    Check model_params against what the experiment reads.

    Raises:
        ConfigError: a key no runner reads, or a value its model configuration rejects
    """
    unknown = set(config.model_params) - MODEL_KEYS[config.experiment]
    if unknown:
        raise ConfigError(f"unknown model_params for {config.experiment}: "
                          f"{', '.join(sorted(unknown))}")
    try:
        _check_model_params(config)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid model_params for {config.experiment}: {e}") from e


RUNNERS: Dict[str, Callable[[ExperimentConfig], ConvergenceReport]] = {
    "parametric_demo": run_parametric_demo,
    "plr_bvm": run_plr_bvm,
    "mixture_bvm": run_mixture_bvm,
    "boundary_bvm": run_boundary_bvm,
    "coverage": run_coverage,
    "ilan_probe": run_ilan_probe,
    "perturbation_probe": run_perturbation_probe,
}


def run_experiment(config: ExperimentConfig) -> ConvergenceReport:
    """Run the configured experiment and return its report."""
    logger.info("running %s: n=%s, %d replications, seed %d, %d job(s)",
                config.experiment, config.n_values, config.replications, config.seed,
                config.jobs)
    validate_model_params(config)
    try:
        return RUNNERS[config.experiment](config)
    except BvmLabError:
        logger.error("%s failed", config.experiment)
        raise
