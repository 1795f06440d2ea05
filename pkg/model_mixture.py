"""
Normal location mixtures p_{sigma,F}(x) = int phi_sigma(x - z) dF(z) with F on
[0,1], a Dirichlet process prior on F and a grid prior on sigma.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats as scipy_stats

from bvm_errors import ConfigError, DiagnosticsError, EnvelopeViolationError
from lan_toolkit import EfficientInfluence, project_efficient_score
from posterior_engine import (HARD_MIN_ESS, Chain, chain_to_density, default_burn_in,
                              effective_sample_size, normalize_log_density)
from stat_core import (GridDensity, SampleSet, describe_rng, make_grid_density,
                       sample_grid_density)

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-12
SIGMA_GRID_POINTS = 201
EM_TOLERANCE = 1e-10
EM_MAX_ITER = 10_000
ENVELOPE_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class MixingDistribution:
    """A finitely supported mixing distribution on [0,1]."""
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_1d(np.array(self.atoms, dtype=float))
        weights = np.atleast_1d(np.array(self.weights, dtype=float))
        if atoms.shape != weights.shape or atoms.ndim != 1 or atoms.size == 0:
            raise ValueError("one weight per atom required")
        if np.any(atoms < 0.0) or np.any(atoms > 1.0):
            raise ValueError("atoms must lie in [0, 1]")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError(f"weights sum to {weights.sum()!r}, not 1")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def point_mass(cls, z: float) -> "MixingDistribution":
        return cls(np.array([z]), np.array([1.0]))

    @classmethod
    def normalized(cls, atoms, weights) -> "MixingDistribution":
        weights = np.asarray(weights, dtype=float)
        return cls(atoms, weights / weights.sum())

    @property
    def mean(self) -> float:
        return float(self.atoms @ self.weights)

    def to_csv(self, path) -> None:
        frame = pd.DataFrame({"atom": self.atoms, "weight": self.weights})
        try:
            frame.to_csv(path, index=False)
        except OSError as e:
            raise OSError(f"could not write mixing distribution to {path}: {e}") from e

    @classmethod
    def from_csv(cls, path) -> "MixingDistribution":
        frame = pd.read_csv(path)
        return cls.normalized(frame["atom"].to_numpy(), frame["weight"].to_numpy())


def _uniform_on(lo: float, hi: float, points: int = 2) -> GridDensity:
    return make_grid_density(np.linspace(lo, hi, points), np.ones(points))


@dataclass
class MixtureConfig:
    """
    Mixture model and prior configuration.

    Attributes:
        sigma0, F0: the true kernel scale and mixing distribution
        sigma_range: (sigma_minus, sigma_plus)
        dp_mass, dp_base: Dirichlet process concentration and base density on [0,1]
        sigma_prior: density on sigma_range
        aux_components: auxiliary components per reassignment
        location_step: random-walk sd of cluster location updates
        fixed_location: when set, a single cluster is held at this location
    """
    sigma0: float = 0.5
    F0: MixingDistribution = field(default_factory=lambda: MixingDistribution(
        np.array([0.1, 0.5, 0.9]), np.array([0.3, 0.4, 0.3])))
    sigma_range: Tuple[float, float] = (0.25, 1.0)
    dp_mass: float = 1.0
    dp_base: GridDensity = field(default_factory=lambda: _uniform_on(0.0, 1.0))
    sigma_prior: Optional[GridDensity] = None
    aux_components: int = 3
    location_step: float = 0.1
    fixed_location: Optional[float] = None
    mcmc_steps: int = 5000
    verbose_logging: bool = False

    def __post_init__(self):
        lo, hi = (float(s) for s in self.sigma_range)
        if not 0.0 < lo < hi:
            raise ConfigError("sigma_range must satisfy 0 < sigma_minus < sigma_plus")
        self.sigma_range = (lo, hi)
        if not lo < self.sigma0 < hi:
            raise ConfigError("sigma0 must lie strictly inside sigma_range")
        if not self.dp_mass > 0:
            raise ConfigError("dp_mass must be positive")
        if self.dp_base.lower > 0.0 or self.dp_base.upper < 1.0 or \
                np.any(self.dp_base(np.linspace(0.0, 1.0, 1001)) <= 0):
            raise ConfigError("dp_base must be strictly positive on [0, 1]")
        if self.sigma_prior is None:
            self.sigma_prior = _uniform_on(lo, hi)
        if self.sigma_prior.lower < lo - 1e-12 or self.sigma_prior.upper > hi + 1e-12:
            raise ConfigError("sigma_prior must be supported inside sigma_range")
        if self.aux_components < 1:
            raise ConfigError("aux_components must be at least 1")
        if self.fixed_location is not None and not 0.0 <= self.fixed_location <= 1.0:
            raise ConfigError("fixed_location must lie in [0, 1]")
        if self.verbose_logging:
            logger.debug("MixtureConfig: sigma0=%s range=%s dp_mass=%s atoms=%s weights=%s",
                         self.sigma0, self.sigma_range, self.dp_mass,
                         self.F0.atoms.tolist(), self.F0.weights.tolist())

    def sigma_grid(self) -> np.ndarray:
        return np.linspace(self.sigma_prior.lower, self.sigma_prior.upper, SIGMA_GRID_POINTS)

    @classmethod
    def from_params(cls, params: Optional[Dict] = None) -> "MixtureConfig":
        params = dict(params or {})
        kwargs = {"verbose_logging": bool(params.get("verbose_logging", False))}
        for key in ("sigma0", "dp_mass", "location_step", "fixed_location"):
            if params.get(key) is not None:
                kwargs[key] = float(params[key])
        for key in ("aux_components", "mcmc_steps"):
            if key in params:
                kwargs[key] = int(params[key])
        if "sigma_range" in params:
            kwargs["sigma_range"] = tuple(params["sigma_range"])
        try:
            if "atoms" in params:
                weights = params.get("weights", np.ones(len(params["atoms"])))
                kwargs["F0"] = MixingDistribution.normalized(params["atoms"], weights)
            return cls(**kwargs)
        except ValueError as e:
            raise ConfigError(f"invalid mixture parameters: {e}") from e


@dataclass
class ClusterState:
    """Sampler state: cluster labels, cluster locations and the kernel scale."""
    assignments: np.ndarray
    cluster_locations: List[float]
    sigma: float

    def validate(self, sigma_range: Tuple[float, float]) -> None:
        if self.assignments.size and (self.assignments.min() < 0 or
                                      self.assignments.max() >= len(self.cluster_locations)):
            raise ValueError("cluster label without a cluster")
        locs = np.asarray(self.cluster_locations)
        if np.any(locs < 0.0) or np.any(locs > 1.0):
            raise ValueError("cluster locations must lie in [0, 1]")
        if not sigma_range[0] <= self.sigma <= sigma_range[1]:
            raise ValueError("sigma outside its range")

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_locations)

    def fitted_locations(self) -> np.ndarray:
        return np.asarray(self.cluster_locations)[self.assignments]


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def mixture_density(sigma: float, F: MixingDistribution, x):
    """sum_j w_j phi_sigma(x - z_j)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    kernel = scipy_stats.norm.pdf(x[..., None], loc=F.atoms, scale=sigma)
    out = kernel @ F.weights
    return float(out) if out.ndim == 0 else out


def mixture_score_sigma(sigma: float, F: MixingDistribution, x):
    """Ordinary score d/dsigma log p_{sigma,F}(x)."""
    x = np.asarray(x, dtype=float)
    resid = x[..., None] - F.atoms
    kernel = scipy_stats.norm.pdf(resid, scale=sigma) * F.weights
    factor = resid ** 2 / sigma ** 3 - 1.0 / sigma
    out = np.sum(kernel * factor, axis=-1) / np.sum(kernel, axis=-1)
    return float(out) if out.ndim == 0 else out


def mixture_envelope(x, sigma_minus: float, sigma_plus: float, m_env: float):
    """
    Lower and upper envelopes (L, U) of {p_{sigma,F}: sigma in range, F on [0,1]}.

    U uses the nearest support point of [0,1] (x for x < 0, x - 1 for x > 1)
    plus phi_{sigma_plus}(0) on [-m_env, m_env]; L uses the farthest one
    (x - 1 for x < 1/2, x otherwise).
    """
    if not 0 < sigma_minus < sigma_plus:
        raise ValueError("need 0 < sigma_minus < sigma_plus")
    if not m_env > 1:
        raise ValueError("m_env must exceed 1")
    x = np.asarray(x, dtype=float)
    phi_plus = scipy_stats.norm(scale=sigma_plus).pdf
    phi_minus = scipy_stats.norm(scale=sigma_minus).pdf
    upper = (sigma_plus / sigma_minus) * (
        np.where(x < 0, phi_plus(x), 0.0)
        + np.where(x > 1, phi_plus(x - 1.0), 0.0)
        + np.where(np.abs(x) <= m_env, phi_plus(0.0), 0.0))
    lower = (sigma_minus / sigma_plus) * np.where(x < 0.5, phi_minus(x - 1.0), phi_minus(x))
    if x.ndim == 0:
        return float(lower), float(upper)
    return lower, upper


def validate_mixture_envelope(sigmas: Sequence[float], mixings: Sequence[MixingDistribution],
                              x, sigma_minus: float, sigma_plus: float,
                              m_env: float) -> int:
    """
    Check L <= p_{sigma,F} <= U at every (sigma, F, x) combination.

    Returns:
        the number of validated points

    Raises:
        EnvelopeViolationError: at the first violating point
    """
    x = np.asarray(x, dtype=float)
    lower, upper = mixture_envelope(x, sigma_minus, sigma_plus, m_env)
    checked = 0
    for sigma in sigmas:
        for F in mixings:
            p = mixture_density(sigma, F, x)
            bad = (p < lower * (1 - ENVELOPE_SLACK)) | (p > upper * (1 + ENVELOPE_SLACK))
            if np.any(bad):
                j = int(np.flatnonzero(bad)[0])
                raise EnvelopeViolationError(
                    f"envelope violated at x={x[j]:.4f}, sigma={sigma}: "
                    f"L={lower[j]:.4g} p={p[j]:.4g} U={upper[j]:.4g} (m_env={m_env})")
            checked += x.size
    return checked


def mixture_generate(config: MixtureConfig, n: int, rng: np.random.Generator) -> SampleSet:
    """X = Z + e with Z ~ F0 and e ~ N(0, sigma0^2)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    z = rng.choice(config.F0.atoms, size=n, p=config.F0.weights)
    x = z + config.sigma0 * rng.standard_normal(n)
    seed, key = describe_rng(rng)
    return SampleSet(x.reshape(-1, 1), seed=seed, spawn_key=key)


# ---------------------------------------------------------------------------
# Dirichlet process Gibbs sampler
# ---------------------------------------------------------------------------

def _log_kernel(x, z, sigma):
    return -0.5 * ((x - z) / sigma) ** 2


def _reassign(x: np.ndarray, state: ClusterState, config: MixtureConfig,
              rng: np.random.Generator) -> None:
    """One sweep of auxiliary-component cluster reassignment."""
    m = config.aux_components
    labels = state.assignments
    locs = list(state.cluster_locations)
    counts = np.bincount(labels, minlength=len(locs)).astype(float)
    sigma = state.sigma
    for i in range(x.size):
        c = labels[i]
        counts[c] -= 1
        aux = sample_grid_density(config.dp_base, m, rng)
        if counts[c] == 0:
            aux[0] = locs[c]
        weights_log = np.concatenate((
            np.where(counts > 0, np.log(np.maximum(counts, 1e-300)), -np.inf)
            + _log_kernel(x[i], np.asarray(locs), sigma),
            np.log(config.dp_mass / m) + _log_kernel(x[i], aux, sigma)))
        probs = np.exp(weights_log - np.max(weights_log))
        choice = int(rng.choice(probs.size, p=probs / probs.sum()))
        if choice < len(locs):
            labels[i] = choice
            counts[choice] += 1
            continue
        location = float(aux[choice - len(locs)])
        if counts[c] == 0:
            locs[c] = location
            labels[i] = c
            counts[c] = 1
        else:
            locs.append(location)
            counts = np.append(counts, 1.0)
            labels[i] = len(locs) - 1
    # drop empty clusters and relabel
    keep = np.flatnonzero(counts > 0)
    relabel = np.full(len(locs), -1)
    relabel[keep] = np.arange(keep.size)
    state.assignments = relabel[labels]
    state.cluster_locations = [locs[j] for j in keep]


def _move_locations(x: np.ndarray, state: ClusterState, config: MixtureConfig,
                    rng: np.random.Generator) -> None:
    """Metropolis update of every cluster location on [0,1]."""
    k = state.num_clusters
    counts = np.bincount(state.assignments, minlength=k).astype(float)
    sums = np.bincount(state.assignments, weights=x, minlength=k)
    current = np.asarray(state.cluster_locations, dtype=float)
    proposal = current + config.location_step * rng.standard_normal(k)
    inside = (proposal >= 0.0) & (proposal <= 1.0)
    safe = np.clip(proposal, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        log_base = np.log(config.dp_base(safe)) - np.log(config.dp_base(current))
    log_ratio = -(counts * (safe ** 2 - current ** 2) - 2.0 * sums * (safe - current)) \
        / (2.0 * state.sigma ** 2) + log_base
    accept = inside & (np.log(rng.random(k)) < log_ratio)
    state.cluster_locations = list(np.where(accept, safe, current))


def _sigma_conditional(x: np.ndarray, state: ClusterState, config: MixtureConfig,
                       grid: np.ndarray, log_prior: np.ndarray) -> GridDensity:
    rss = float(np.sum((x - state.fitted_locations()) ** 2))
    return normalize_log_density(grid, log_prior - x.size * np.log(grid) - rss / (2.0 * grid ** 2))


def _data_loglik(x: np.ndarray, state: ClusterState) -> float:
    return float(np.sum(scipy_stats.norm.logpdf(x, state.fitted_locations(), state.sigma)))


def dp_gibbs(sample: SampleSet, config: MixtureConfig, iters: int,
             rng: np.random.Generator) -> Chain:
    """
    Gibbs sampler for (sigma, F) under the Dirichlet process mixture prior.

    Each sweep reassigns clusters with auxiliary components drawn from dp_base,
    moves cluster locations by Metropolis on [0,1] and draws sigma exactly from
    its full conditional on a 201-point grid. The chain holds sigma; extras
    carry the cluster count per stored sweep.

    Raises:
        ValueError: iters does not exceed the burn-in
        DiagnosticsError: ESS of sigma below 20
    """
    sample.require_nonempty()
    x = sample.values.copy()
    burn_in = default_burn_in(iters)
    if iters <= burn_in or iters < 1:
        raise ValueError(f"iters ({iters}) must exceed the burn-in length ({burn_in})")
    grid = config.sigma_grid()
    with np.errstate(divide="ignore"):
        log_prior = np.log(config.sigma_prior(grid))

    start = config.fixed_location if config.fixed_location is not None else \
        float(np.clip(np.mean(x), 0.0, 1.0))
    sigma_start = float(np.clip(np.std(x) if x.size > 1 else config.sigma0, *config.sigma_range))
    state = ClusterState(np.zeros(x.size, dtype=int), [start], sigma_start)

    kept = iters - burn_in
    sigmas = np.empty(kept)
    log_values = np.empty(kept)
    clusters = np.empty(kept, dtype=int)
    for t in range(iters):
        if config.fixed_location is None:
            _reassign(x, state, config, rng)
            _move_locations(x, state, config, rng)
        conditional = _sigma_conditional(x, state, config, grid, log_prior)
        state.sigma = float(sample_grid_density(conditional, 1, rng)[0])
        if t >= burn_in:
            sigmas[t - burn_in] = state.sigma
            log_values[t - burn_in] = _data_loglik(x, state)
            clusters[t - burn_in] = state.num_clusters
    state.validate(config.sigma_range)
    chain = Chain(sigmas, log_values, accept_rate=1.0, burn_in=burn_in,
                  extras={"clusters": clusters})
    if kept >= 10:
        ess = effective_sample_size(chain, 0)
        if ess < HARD_MIN_ESS:
            raise DiagnosticsError(f"dp_gibbs: ESS(sigma) {ess:.1f} below {HARD_MIN_ESS}")
    logger.debug("dp_gibbs: %d sweeps, mean clusters %.2f", iters, clusters.mean())
    return chain


# ---------------------------------------------------------------------------
# KL projection and efficient information
# ---------------------------------------------------------------------------

def _quadrature_weights(p0: GridDensity) -> np.ndarray:
    dx = np.diff(p0.grid)
    w = np.zeros(p0.grid.size)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    return w * p0.values


def kl_objective(sigma: float, F: MixingDistribution, p0: GridDensity) -> float:
    """-int p0 log p_{sigma,F} on the grid of p0."""
    omega = _quadrature_weights(p0)
    with np.errstate(divide="ignore"):
        logp = np.log(mixture_density(sigma, F, p0.grid))
    mask = omega > 0
    return float(-np.sum(omega[mask] * logp[mask]))


def density_entropy(p0: GridDensity) -> float:
    omega = _quadrature_weights(p0)
    mask = omega > 0
    return float(-np.sum(omega[mask] * np.log(p0.values[mask])))


def kl_minimizer_F(sigma: float, p0: GridDensity, z_grid,
                   max_iter: int = EM_MAX_ITER, tol: float = EM_TOLERANCE) -> MixingDistribution:
    """
    Mixing distribution on z_grid minimizing -int p0 log p_{sigma,F}, by EM
    (multiplicative-gradient) iterations from uniform weights.
    """
    z_grid = np.atleast_1d(np.asarray(z_grid, dtype=float))
    if np.any(z_grid < 0.0) or np.any(z_grid > 1.0):
        raise ValueError("z_grid must lie in [0, 1]")
    omega = _quadrature_weights(p0)
    omega = omega / omega.sum()
    kernel = scipy_stats.norm.pdf(p0.grid[:, None], loc=z_grid, scale=sigma)
    weights = np.full(z_grid.size, 1.0 / z_grid.size)
    mixed = kernel @ weights
    objective = -float(omega @ np.log(mixed))
    for iteration in range(max_iter):
        weights = weights * (kernel.T @ (omega / mixed))
        weights /= weights.sum()
        mixed = kernel @ weights
        updated = -float(omega @ np.log(mixed))
        if objective - updated < tol:
            objective = updated
            break
        objective = updated
    logger.debug("kl_minimizer_F: sigma=%.4f, %d iterations, objective %.10f",
                 sigma, iteration + 1, objective)
    return MixingDistribution.normalized(z_grid, weights)


def _hat_coefficients(basis_size: int):
    """Hat functions on linspace(0,1,J+1) without the last one; nested in J."""
    knots = np.linspace(0.0, 1.0, basis_size + 1)
    eye = np.eye(basis_size + 1)
    return [lambda z, col=eye[j]: np.interp(z, knots, col) for j in range(basis_size)]


def mixture_nuisance_basis(sigma: float, F: MixingDistribution, basis_size: int):
    """
    Nuisance scores g_j(x) = sum_i a_j(z_i) w_i phi_sigma(x - z_i) / p(x) with
    a_j the F-centred hat functions.
    """
    basis = []
    for hat in _hat_coefficients(basis_size):
        a = hat(F.atoms)
        a = a - a @ F.weights

        def g(obs, a=a):
            x = np.asarray(obs, dtype=float).reshape(-1)
            kernel = scipy_stats.norm.pdf(x[:, None], loc=F.atoms, scale=sigma) * F.weights
            return (kernel @ a) / kernel.sum(axis=1)
        basis.append(g)
    return basis


def mixture_efficient_info(sigma0: float, F0: MixingDistribution, basis_size: int,
                           mc_size: int, rng: np.random.Generator) -> EfficientInfluence:
    """
    Efficient information for sigma by projecting the sigma-score onto
    basis_size centred hat directions of the mixing distribution.

    basis_size = 0 gives the plain P0 l^2.
    """
    if basis_size < 0:
        raise ValueError("basis_size must be nonnegative")
    z = rng.choice(F0.atoms, size=mc_size, p=F0.weights)
    p0_sample = SampleSet((z + sigma0 * rng.standard_normal(mc_size)).reshape(-1, 1))

    def score(obs):
        return mixture_score_sigma(sigma0, F0, np.asarray(obs).reshape(-1))

    basis = mixture_nuisance_basis(sigma0, F0, basis_size) if basis_size else []
    infl = project_efficient_score(score, basis, p0_sample)
    if not infl.identifiable:
        logger.warning("efficient information for sigma is near-singular (%.3g)", infl.scalar_info)
    return infl


def smooth_mixing(F: MixingDistribution, bandwidth: float) -> MixingDistribution:
    """Gaussian-kernel smoothing of weights across the atoms."""
    if bandwidth <= 0:
        return F
    kernel = scipy_stats.norm.pdf(F.atoms[:, None] - F.atoms[None, :], scale=bandwidth)
    return MixingDistribution.normalized(F.atoms, kernel @ F.weights)


def approx_least_favourable_score(sigma0: float, p0: GridDensity, z_grid, delta: float,
                                  bandwidth: float, sample: SampleSet) -> np.ndarray:
    """
    Central finite-difference score along sigma -> (sigma, smoothed F*(sigma)),
    evaluated on the sample.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    up = smooth_mixing(kl_minimizer_F(sigma0 + delta, p0, z_grid), bandwidth)
    down = smooth_mixing(kl_minimizer_F(sigma0 - delta, p0, z_grid), bandwidth)
    x = sample.values
    return (np.log(mixture_density(sigma0 + delta, up, x))
            - np.log(mixture_density(sigma0 - delta, down, x))) / (2.0 * delta)


def truth_density(config: MixtureConfig, lo: float = -5.0, hi: float = 6.0,
                  points: int = 4001) -> GridDensity:
    """p_{sigma0,F0} tabulated on a grid."""
    grid = np.linspace(lo, hi, points)
    return make_grid_density(grid, mixture_density(config.sigma0, config.F0, grid))


def sigma_posterior_density(chain: Chain, config: MixtureConfig) -> GridDensity:
    """Histogram of the sigma chain on the sampler's sigma grid."""
    return chain_to_density(chain, 0, config.sigma_grid())
