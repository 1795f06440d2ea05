"""
Partial linear regression Y = theta*U + eta(V) + e with an integrated Brownian
motion prior on eta.

The covariates are built so that E[U|V] and the efficient information are
known exactly: V ~ Uniform[0,1], U = (rho(V) - mean + xi) / scale with
xi ~ N(0, xi_sd^2), so that PU = 0 and PU^2 = 1.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import integrate, linalg
from scipy import stats as scipy_stats

from bvm_errors import (ConfigError, DiagnosticsError, PriorRejectionError,
                        SingularInformationError)
from lan_toolkit import EfficientInfluence, LocalFrame, Rate
from posterior_engine import (HARD_MIN_ESS, AdaptiveScale, Chain, SCALAR_ACCEPTANCE,
                              chain_from_draws, chain_to_density, default_burn_in,
                              effective_sample_size, grid_posterior)
from stat_core import GaussianLaw, GridDensity, SampleSet, describe_rng

logger = logging.getLogger(__name__)

PRIOR_JITTER = 1e-10
QUAD_TOLERANCE = 1e-10
MAX_PRIOR_ATTEMPTS = 100_000
PRIOR_BATCH = 1000
HELLINGER_GRID_POINTS = 513


@dataclass(frozen=True, eq=False)
class NuisancePath:
    """A function on [0,1] given by its values at knots, linear in between."""
    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float)
        values = np.array(self.values, dtype=float)
        if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing with at least 2 points")
        if knots[0] < 0.0 or knots[-1] > 1.0:
            raise ValueError("knots must lie in [0, 1]")
        if values.shape != knots.shape or not np.all(np.isfinite(values)):
            raise ValueError("one finite value per knot required")
        knots.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    def __call__(self, v):
        return np.interp(v, self.knots, self.values)

    @classmethod
    def from_function(cls, fn, m: int = 201) -> "NuisancePath":
        knots = np.linspace(0.0, 1.0, m)
        return cls(knots, fn(knots))

    @classmethod
    def constant(cls, c: float, m: int = 2) -> "NuisancePath":
        return cls(np.linspace(0.0, 1.0, m), np.full(m, float(c)))


def _piecewise_linear_moments(path: NuisancePath) -> Tuple[float, float]:
    """Exact E f(V) and E f(V)^2 for V ~ Uniform[0,1], f piecewise linear on [0,1]."""
    knots = np.concatenate(([0.0], path.knots, [1.0]))
    values = np.concatenate(([path.values[0]], path.values, [path.values[-1]]))
    dx = np.diff(knots)
    a, b = values[:-1], values[1:]
    first = float(np.sum(dx * (a + b) / 2.0))
    second = float(np.sum(dx * (a * a + a * b + b * b) / 3.0))
    return first, second


def default_eta0() -> NuisancePath:
    return NuisancePath.from_function(lambda v: 0.5 * np.sin(2.0 * np.pi * v))


def default_condexp() -> NuisancePath:
    return NuisancePath.from_function(lambda v: 2.0 * v)


@dataclass
class PlrConfig:
    """
    Partial linear model configuration.

    Attributes:
        theta0: true regression coefficient
        eta0: true nuisance function
        condexp: rho, the unstandardized conditional mean of U given V
        xi_sd: sd of the covariate noise xi (before standardization)
        prior_k: integration order of the Brownian motion prior
        holder_alpha, holder_bound: when both set, the prior is conditioned on
            the discrete sup-norm plus Hoelder-alpha seminorm being below the bound
        theta_prior: GaussianLaw or GridDensity over theta
        knots: number of equispaced prior knots m
        nuisance_prior: "ibm" or "degenerate" (point mass at eta0)
        mcmc_steps: Gibbs sweeps in MCMC mode
    """
    theta0: float = 0.0
    eta0: NuisancePath = field(default_factory=default_eta0)
    condexp: NuisancePath = field(default_factory=default_condexp)
    xi_sd: float = 1.0
    prior_k: int = 1
    holder_alpha: Optional[float] = None
    holder_bound: Optional[float] = None
    theta_prior: Union[GaussianLaw, GridDensity] = field(
        default_factory=lambda: GaussianLaw.scalar(0.0, 100.0))
    knots: int = 32
    nuisance_prior: str = "ibm"
    mcmc_steps: int = 20_000
    verbose_logging: bool = False

    def __post_init__(self):
        if not self.xi_sd > 0:
            raise ConfigError("xi_sd must be positive (P(U - E[U|V])^2 > 0)")
        if not isinstance(self.prior_k, int) or self.prior_k < 0:
            raise ConfigError("prior_k must be a nonnegative integer")
        if self.knots < 2:
            raise ConfigError("knots must be at least 2")
        if self.nuisance_prior not in ("ibm", "degenerate"):
            raise ConfigError(f"unknown nuisance_prior {self.nuisance_prior!r}")
        if (self.holder_alpha is None) != (self.holder_bound is None):
            raise ConfigError("holder_alpha and holder_bound must be given together")
        if self.holder_alpha is not None:
            if not self.holder_alpha > 0.5:
                raise ConfigError("holder_alpha must exceed 1/2")
            if not self.holder_bound > 0:
                raise ConfigError("holder_bound must be positive")
        if isinstance(self.theta_prior, GaussianLaw) and self.theta_prior.dim != 1:
            raise ConfigError("theta_prior must be one-dimensional")
        mean, second = _piecewise_linear_moments(self.condexp)
        self._centre = mean
        self._scale = math.sqrt(max(second - mean * mean, 0.0) + self.xi_sd ** 2)
        if self.verbose_logging:
            logger.debug("PlrConfig: theta0=%s k=%d m=%d prior=%s conditioned=%s "
                         "scale=%.6f info=%.6f", self.theta0, self.prior_k, self.knots,
                         self.nuisance_prior, self.conditioned, self._scale,
                         self.efficient_info)

    @property
    def conditioned(self) -> bool:
        return self.holder_alpha is not None

    @property
    def covariate_scale(self) -> float:
        return self._scale

    @property
    def covariate_centre(self) -> float:
        return self._centre

    @property
    def efficient_info(self) -> float:
        """P(U - E[U|V])^2 = xi_sd^2 / scale^2."""
        return self.xi_sd ** 2 / self._scale ** 2

    def conditional_mean(self, v):
        """E[U | V = v] after standardization."""
        return (self.condexp(v) - self._centre) / self._scale

    def prior_knots(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.knots)

    @classmethod
    def from_params(cls, params: Optional[Dict] = None) -> "PlrConfig":
        """
        Build from a JSON-style mapping.

        eta0 and condexp accept either {"knots": [...], "values": [...]} or the
        shorthands eta0_amplitude (a*sin(2 pi v)) and condexp_slope (c*v).
        """
        params = dict(params or {})
        kwargs = {}
        for key in ("theta0", "xi_sd", "holder_alpha", "holder_bound"):
            if key in params and params[key] is not None:
                kwargs[key] = float(params[key])
        for key in ("prior_k", "knots", "mcmc_steps"):
            if key in params:
                kwargs[key] = int(params[key])
        if "nuisance_prior" in params:
            kwargs["nuisance_prior"] = str(params["nuisance_prior"])
        kwargs["verbose_logging"] = bool(params.get("verbose_logging", False))
        if isinstance(params.get("eta0"), dict):
            kwargs["eta0"] = NuisancePath(params["eta0"]["knots"], params["eta0"]["values"])
        elif "eta0_amplitude" in params:
            amp = float(params["eta0_amplitude"])
            kwargs["eta0"] = NuisancePath.from_function(lambda v: amp * np.sin(2 * np.pi * v))
        if isinstance(params.get("condexp"), dict):
            kwargs["condexp"] = NuisancePath(params["condexp"]["knots"],
                                             params["condexp"]["values"])
        elif "condexp_slope" in params:
            slope = float(params["condexp_slope"])
            kwargs["condexp"] = NuisancePath.from_function(lambda v: slope * v)
        if "theta_prior_sd" in params:
            kwargs["theta_prior"] = GaussianLaw.scalar(
                float(params.get("theta_prior_mean", 0.0)), float(params["theta_prior_sd"]) ** 2)
        try:
            return cls(**kwargs)
        except ValueError as e:
            raise ConfigError(f"invalid PLR parameters: {e}") from e


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def plr_generate(config: PlrConfig, n: int, rng: np.random.Generator) -> SampleSet:
    """Draw n triples (y, u, v) from the configured model."""
    if n < 1:
        raise ValueError("n must be at least 1")
    v = rng.random(n)
    xi = rng.normal(0.0, config.xi_sd, n)
    u = (config.condexp(v) - config.covariate_centre + xi) / config.covariate_scale
    e = rng.standard_normal(n)
    y = config.theta0 * u + config.eta0(v) + e
    seed, key = describe_rng(rng)
    return SampleSet(np.column_stack([y, u, v]), seed=seed, spawn_key=key,
                     columns=("y", "u", "v"))


def _split(sample: SampleSet):
    return sample.column("y"), sample.column("u"), sample.column("v")


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------

def _ibm_kernel(k: int, s: float, t: float) -> float:
    poly = sum((s * t) ** i / math.factorial(i) ** 2 for i in range(k + 1))
    upper = min(s, t)
    if upper <= 0.0:
        return poly
    if k == 0:
        return poly + upper
    norm = math.factorial(k) ** 2
    tail, _ = integrate.quad(lambda r: (s - r) ** k * (t - r) ** k / norm, 0.0, upper,
                             epsabs=QUAD_TOLERANCE, epsrel=QUAD_TOLERANCE)
    return poly + tail


def ibm_prior_cov(k: int, knots) -> np.ndarray:
    """
    Covariance of the k-fold integrated Brownian motion prior released at zero:
    sum_{i<=k} s^i t^i / (i!)^2 + int_0^1 (s-r)_+^k (t-r)_+^k / (k!)^2 dr.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    knots = np.asarray(knots, dtype=float)
    m = knots.size
    cov = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            cov[i, j] = cov[j, i] = _ibm_kernel(k, knots[i], knots[j])
    return cov


def _jittered_cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(cov + PRIOR_JITTER * np.eye(cov.shape[0]), lower=True)
    except linalg.LinAlgError as e:
        raise SingularInformationError(f"prior covariance factorization failed: {e}")


def holder_norm(values, knots, alpha: float) -> np.ndarray:
    """
    Discrete sup-norm plus Hoelder-alpha seminorm on a knot grid.

    values may hold one path (m,) or a batch (J, m).
    """
    values = np.atleast_2d(values)
    knots = np.asarray(knots, dtype=float)
    gaps = np.abs(knots[:, None] - knots[None, :]) ** alpha
    np.fill_diagonal(gaps, np.inf)
    diffs = np.abs(values[:, :, None] - values[:, None, :])
    seminorm = np.max(diffs / gaps, axis=(1, 2))
    out = np.max(np.abs(values), axis=1) + seminorm
    return out


def _conditioned_draws(draw_batch, knots, conditioned, size: int) -> np.ndarray:
    """Rejection loop shared by prior and conditional-posterior draws."""
    alpha, bound = conditioned
    accepted, attempts = [], 0
    while sum(len(a) for a in accepted) < size:
        if attempts >= MAX_PRIOR_ATTEMPTS:
            raise PriorRejectionError(
                f"fewer than {size} paths inside the ball of radius {bound} after "
                f"{attempts} attempts; the bound is too small for alpha={alpha}")
        batch = draw_batch(min(PRIOR_BATCH, MAX_PRIOR_ATTEMPTS - attempts))
        attempts += batch.shape[0]
        accepted.append(batch[holder_norm(batch, knots, alpha) < bound])
    return np.concatenate(accepted)[:size]


def plr_sample_prior(k: int, knots, rng: np.random.Generator,
                     conditioned: Optional[Tuple[float, float]] = None,
                     cov: Optional[np.ndarray] = None) -> NuisancePath:
    """
    One draw of the integrated Brownian motion prior on the knots.

    With conditioned=(alpha, M) the draw is rejection-sampled until its
    discrete sup-norm plus Hoelder-alpha seminorm is below M.

    Raises:
        PriorRejectionError: no acceptance within 1e5 attempts
    """
    knots = np.asarray(knots, dtype=float)
    chol = _jittered_cholesky(ibm_prior_cov(k, knots) if cov is None else cov)
    if conditioned is None:
        return NuisancePath(knots, chol @ rng.standard_normal(knots.size))
    if not conditioned[1] > 0:
        raise ValueError("holder bound must be positive")
    draws = _conditioned_draws(lambda size: rng.standard_normal((size, knots.size)) @ chol.T,
                               knots, conditioned, 1)
    return NuisancePath(knots, draws[0])


# ---------------------------------------------------------------------------
# Exact Gaussian algebra
# ---------------------------------------------------------------------------

def hat_design(v, knots) -> np.ndarray:
    """Matrix B with (B @ values)[i] = linear interpolation of values at v[i]."""
    v = np.asarray(v, dtype=float)
    return np.column_stack([np.interp(v, knots, col) for col in np.eye(len(knots))])


class PlrNuisanceAlgebra:
    """
    Per-dataset factorization of the Gaussian nuisance integral.

    With whitened knot values z (eta = L_K z, z ~ N(0, I)) and A = B L_K,
    y - theta*u = A z + e has covariance C = I + A A'. Everything goes
    through L_M = chol(I + A'A), an m x m factor; the object is immutable.
    """

    def __init__(self, sample: SampleSet, config: PlrConfig):
        self.n = len(sample)
        self.y, self.u, self.v = _split(sample)
        self.knots = config.prior_knots()
        self.prior_chol = _jittered_cholesky(ibm_prior_cov(config.prior_k, self.knots))
        self.design = hat_design(self.v, self.knots) @ self.prior_chol
        m = self.knots.size
        try:
            self.post_chol = linalg.cholesky(np.eye(m) + self.design.T @ self.design, lower=True)
        except linalg.LinAlgError as e:
            raise SingularInformationError(
                f"nuisance design is ill-conditioned (m={m}, n={self.n}): {e}")
        self.aty = self.design.T @ self.y
        self.atu = self.design.T @ self.u
        wy = linalg.solve_triangular(self.post_chol, self.aty, lower=True)
        wu = linalg.solve_triangular(self.post_chol, self.atu, lower=True)
        # q(theta) = a theta^2 - 2 b theta + c
        self.quad_a = float(self.u @ self.u - wu @ wu)
        self.quad_b = float(self.u @ self.y - wu @ wy)
        self.quad_c = float(self.y @ self.y - wy @ wy)

    def quadratic_form(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.quad_a * theta ** 2 - 2.0 * self.quad_b * theta + self.quad_c

    def log_marginal(self, theta):
        """log p(y | theta) with eta integrated out, up to a theta-free constant."""
        return -0.5 * self.quadratic_form(theta)

    def conditional_mean(self, theta: float) -> np.ndarray:
        """Mean of z given theta and the data."""
        rhs = self.aty - theta * self.atu
        return linalg.cho_solve((self.post_chol, True), rhs)

    def conditional_draws(self, theta: float, size: int, rng: np.random.Generator):
        """Draws of z | theta, data; returns (z, standard normals used)."""
        eps = rng.standard_normal((size, self.knots.size))
        offsets = linalg.solve_triangular(self.post_chol, eps.T, lower=True, trans="T").T
        return self.conditional_mean(theta) + offsets, eps

    def to_knot_values(self, z) -> np.ndarray:
        return np.atleast_2d(z) @ self.prior_chol.T


def _theta_log_prior(config: PlrConfig):
    prior = config.theta_prior
    if isinstance(prior, GaussianLaw):
        mean, sd = float(prior.center[0]), prior.sd
        return lambda theta: scipy_stats.norm.logpdf(theta, mean, sd)

    def log_grid_prior(theta):
        value = prior(theta)
        with np.errstate(divide="ignore"):
            return np.log(value)
    return log_grid_prior


def plr_marginal_posterior(sample: SampleSet, config: PlrConfig, h_grid,
                           mode: Optional[str] = None,
                           rng: Optional[np.random.Generator] = None,
                           steps: Optional[int] = None) -> GridDensity:
    """
    Marginal posterior of h = sqrt(n)(theta - theta0) on h_grid.

    Args:
        sample: (y, u, v) observations
        config: model and prior configuration
        h_grid: strictly increasing local parameter values
        mode: "exact" (Gaussian nuisance integrated out in closed form) or
            "mcmc" (Metropolis-within-Gibbs); defaults to exact unless the
            prior is conditioned
        rng: required in MCMC mode
        steps: Gibbs sweeps in MCMC mode, defaults to config.mcmc_steps

    Raises:
        ConfigError: exact mode requested for the conditioned prior
        SingularInformationError: the nuisance design cannot be factorized
        DiagnosticsError: MCMC effective sample size below 20
    """
    sample.require_nonempty()
    if mode is None:
        mode = "mcmc" if config.conditioned and config.nuisance_prior == "ibm" else "exact"
    if mode not in ("exact", "mcmc"):
        raise ConfigError(f"unknown mode {mode!r}")
    n = len(sample)
    frame = LocalFrame(config.theta0, Rate.SQRT_N)
    log_prior = _theta_log_prior(config)

    if config.nuisance_prior == "degenerate":
        y, u, v = _split(sample)
        resid = y - config.eta0(v)
        uu, uy, yy = float(u @ u), float(u @ resid), float(resid @ resid)

        def loglik(h):
            theta = float(frame.theta(h, n))
            return -0.5 * (uu * theta ** 2 - 2.0 * uy * theta + yy)
        return grid_posterior(loglik, lambda h: log_prior(float(frame.theta(h, n))), h_grid)

    if mode == "exact":
        if config.conditioned:
            raise ConfigError("the conditioned prior has no closed-form marginal; use mode='mcmc'")
        algebra = PlrNuisanceAlgebra(sample, config)
        return grid_posterior(lambda h: algebra.log_marginal(float(frame.theta(h, n))),
                              lambda h: log_prior(float(frame.theta(h, n))), h_grid)

    if rng is None:
        raise ValueError("MCMC mode needs an rng")
    chain = plr_gibbs(sample, config, steps or config.mcmc_steps, rng)
    return chain_to_density(chain, 0, h_grid, transform=lambda theta: frame.localize(theta, n))


def plr_gibbs(sample: SampleSet, config: PlrConfig, steps: int,
              rng: np.random.Generator) -> Chain:
    """
    Metropolis-within-Gibbs over (theta, eta).

    eta | theta is drawn exactly from its Gaussian conditional (rejected until
    inside the Hoelder ball when the prior is conditioned); theta | eta takes
    an adaptive random-walk Metropolis step. The chain stores theta.
    """
    algebra = PlrNuisanceAlgebra(sample, config)
    log_prior = _theta_log_prior(config)
    y, u = algebra.y, algebra.u
    uu = float(u @ u)
    burn_in = default_burn_in(steps)
    if burn_in >= steps:
        raise ValueError(f"steps ({steps}) must exceed the burn-in length ({burn_in})")
    scale = AdaptiveScale(1.0 / math.sqrt(max(uu, 1.0)), SCALAR_ACCEPTANCE)

    def draw_eta(theta):
        if not config.conditioned:
            return algebra.conditional_draws(theta, 1, rng)[0][0]
        z = _conditioned_draws(
            lambda size: algebra.to_knot_values(algebra.conditional_draws(theta, size, rng)[0]),
            algebra.knots, (config.holder_alpha, config.holder_bound), 1)[0]
        return linalg.solve_triangular(algebra.prior_chol, z, lower=True)

    theta = float(algebra.quad_b / algebra.quad_a) if algebra.quad_a > 0 else config.theta0
    if not np.isfinite(log_prior(theta)):
        theta = config.theta0
    kept = steps - burn_in
    states = np.empty(kept)
    log_values = np.empty(kept)
    accepted = 0
    for t in range(steps):
        z = draw_eta(theta)
        w = y - algebra.design @ z
        uw = float(u @ w)

        def log_cond(th):
            return -0.5 * (uu * th * th - 2.0 * uw * th) + float(log_prior(th))

        current = log_cond(theta)
        proposal = theta + float(scale.current[0]) * rng.standard_normal()
        candidate = log_cond(proposal)
        log_ratio = candidate - current if np.isfinite(candidate) else -np.inf
        accept = log_ratio > -np.inf and np.log(rng.random()) < log_ratio
        if accept:
            theta, current = proposal, candidate
        if t < burn_in:
            scale.update(float(np.exp(min(log_ratio, 0.0))))
            if t == burn_in - 1:
                scale.freeze()
            continue
        accepted += int(accept)
        states[t - burn_in] = theta
        log_values[t - burn_in] = current
    chain = Chain(states, log_values, accepted / kept, scale.history, burn_in)
    logger.debug("plr_gibbs: %d sweeps, accept rate %.3f", steps, chain.accept_rate)
    return chain


# ---------------------------------------------------------------------------
# Efficiency calculus
# ---------------------------------------------------------------------------

def plr_efficient_influence(config: PlrConfig) -> EfficientInfluence:
    """Efficient score (y - theta0 u - eta0(v)) (u - E[U|V=v]) with exact information."""
    def score(obs):
        obs = np.atleast_2d(obs)
        y, u, v = obs[:, 0], obs[:, 1], obs[:, 2]
        return (y - config.theta0 * u - config.eta0(v)) * (u - config.conditional_mean(v))
    return EfficientInfluence(score, config.efficient_info)


def plr_eta_star(theta: float, config: PlrConfig) -> NuisancePath:
    """Least-favourable nuisance eta0 - (theta - theta0) E[U|V]."""
    knots = np.union1d(config.eta0.knots, config.condexp.knots)
    values = config.eta0(knots) - (theta - config.theta0) * config.conditional_mean(knots)
    return NuisancePath(knots, values)


def plr_loglik(theta: float, eta: NuisancePath, sample: SampleSet) -> float:
    """Gaussian log-likelihood up to the constant -n log(2 pi) / 2."""
    y, u, v = _split(sample)
    resid = y - theta * u - eta(v)
    return float(-0.5 * resid @ resid)


def plr_loglik_ratio(h: float, sample: SampleSet, config: PlrConfig,
                     path: str = "least_favourable") -> float:
    """
    Log-likelihood ratio of theta0 + h/sqrt(n) against theta0.

    path="least_favourable" moves eta along eta*(theta); path="fixed" keeps eta0.
    """
    n = len(sample)
    theta = config.theta0 + h / math.sqrt(n)
    eta = plr_eta_star(theta, config) if path == "least_favourable" else config.eta0
    return plr_loglik(theta, eta, sample) - plr_loglik(config.theta0, config.eta0, sample)


def plr_kl_divergence(theta: float, eta: NuisancePath, config: PlrConfig,
                      sample: SampleSet) -> float:
    """
    -P0 log(p_{theta,eta}/p0), integrating the error exactly and the covariates
    by Monte Carlo over the sample.
    """
    _, u, v = _split(sample)
    shift = (theta - config.theta0) * u + eta(v) - config.eta0(v)
    return float(0.5 * np.mean(shift ** 2))


def plr_implied_hellinger(eta, eta_star: NuisancePath, config: PlrConfig,
                          v_grid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Hellinger distance between the laws of (y, u, v) under (theta0, eta) and
    (theta0, eta_star).

    Only the conditional law of y differs; for unit-variance normals
    H^2 = 2 (1 - exp(-delta^2 / 8)), averaged over V ~ Uniform[0,1].
    eta may be a NuisancePath or a (J, m) batch of knot values on
    config.prior_knots().
    """
    if v_grid is None:
        v_grid = np.linspace(0.0, 1.0, HELLINGER_GRID_POINTS)
    target = eta_star(v_grid)
    if isinstance(eta, NuisancePath):
        paths = eta(v_grid)[None, :]
    else:
        paths = np.atleast_2d(eta) @ hat_design(v_grid, config.prior_knots()).T
    delta = paths - target
    h2 = integrate.trapezoid(2.0 * (1.0 - np.exp(-delta ** 2 / 8.0)), v_grid, axis=1)
    return np.sqrt(np.clip(h2, 0.0, 2.0))


def plr_exact_log_sn_ratio(sample: SampleSet, config: PlrConfig, h: float) -> float:
    """Closed-form log s_n(h)/s_n(0) under the unconditioned Gaussian prior."""
    algebra = PlrNuisanceAlgebra(sample, config)
    theta = config.theta0 + h / math.sqrt(algebra.n)
    return float(algebra.log_marginal(theta) - algebra.log_marginal(config.theta0))


def plr_importance_draws(sample: SampleSet, config: PlrConfig, size: int,
                         rng: np.random.Generator) -> Tuple[List[NuisancePath], np.ndarray]:
    """
    Nuisance draws from the conditional posterior at theta0 with log(prior/proposal)
    weights, for the integrated likelihood.
    """
    algebra = PlrNuisanceAlgebra(sample, config)
    z, eps = algebra.conditional_draws(config.theta0, size, rng)
    log_weights = (-0.5 * np.sum(z * z, axis=1) + 0.5 * np.sum(eps * eps, axis=1)
                   - np.sum(np.log(np.diag(algebra.post_chol))))
    values = algebra.to_knot_values(z)
    return [NuisancePath(algebra.knots, row) for row in values], log_weights


def plr_perturbation_probe(sample: SampleSet, config: PlrConfig, h: float, rho: float,
                           steps: int, rng: np.random.Generator) -> float:
    """
    Posterior mass of the Hellinger ball of radius rho around eta*(theta) under
    the nuisance posterior conditional on theta = theta0 + h/sqrt(n).

    Raises:
        DiagnosticsError: effective sample size of the distance trace below 20
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    n = len(sample)
    theta = config.theta0 + h / math.sqrt(n)
    algebra = PlrNuisanceAlgebra(sample, config)
    if config.conditioned:
        values = _conditioned_draws(
            lambda size: algebra.to_knot_values(algebra.conditional_draws(theta, size, rng)[0]),
            algebra.knots, (config.holder_alpha, config.holder_bound), steps)
    else:
        values = algebra.to_knot_values(algebra.conditional_draws(theta, steps, rng)[0])
    distances = plr_implied_hellinger(values, plr_eta_star(theta, config), config)
    if distances.size >= 10:
        ess = effective_sample_size(chain_from_draws(distances), 0)
        if ess < HARD_MIN_ESS and np.ptp(distances) > 0:
            raise DiagnosticsError(f"perturbation probe ESS {ess:.1f} below {HARD_MIN_ESS}")
    return float(np.mean(distances < rho))
