"""
Support-boundary model: observations X = theta + Y where Y has the Esscher
density eta(y) = exp(-alpha y + int_0^y l(t) dt) / Z on [0, inf), l bounded by
S < alpha. The prior on l is S * Psi(Z + W) with Psi = 2 arctan / pi, run
through the map u = t / (t + 1) from [0, inf) onto [0, 1).
"""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from bvm_errors import ConfigError, SupportMismatchError
from posterior_engine import (Chain, chain_to_density, default_burn_in,
                              metropolis_accept, normalize_log_density)
from stat_core import (GridDensity, SampleSet, describe_rng, make_grid_density,
                       sample_grid_density)

logger = logging.getLogger(__name__)

TRUNCATION_EXPONENT = 23.0      # e^{-23} < 1e-10
GAUSS_LEGENDRE_NODES = 16
QUADRATURE_PIECE = 0.25
NEWTON_STEPS = 4
PCN_BLEND = 0.9
THETA_GRID_POINTS = 160
THETA_GRID_SPAN = 30.0          # s-range in units of 1 / (alpha - S)
EXACT_GRID_POINTS = 4001
EXACT_GRID_SPAN = 40.0
BOUND_TOLERANCE = 1e-12

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(GAUSS_LEGENDRE_NODES)


def default_grid_T(alpha: float, S: float) -> float:
    """T with exp(-(alpha - S) T) < 1e-10."""
    return TRUNCATION_EXPONENT / (alpha - S)


@dataclass(frozen=True, eq=False)
class LscriptPath:
    """
    A slope function l on [0, inf): piecewise linear on knots in [0, T],
    constant (tail) beyond T.
    """
    knots: np.ndarray
    values: np.ndarray
    tail: Optional[float] = None
    bound: Optional[float] = None

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float)
        values = np.array(self.values, dtype=float)
        if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing with at least 2 points")
        if knots[0] != 0.0:
            raise ValueError("the first knot must be 0")
        if values.shape != knots.shape or not np.all(np.isfinite(values)):
            raise ValueError("one finite value per knot required")
        tail = float(values[-1] if self.tail is None else self.tail)
        if self.bound is not None:
            limit = self.bound + BOUND_TOLERANCE
            if np.any(np.abs(values) > limit) or abs(tail) > limit:
                raise ValueError(f"slope values exceed the bound {self.bound}")
        knots.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "tail", tail)

    @property
    def grid_T(self) -> float:
        return float(self.knots[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t > self.grid_T, self.tail, np.interp(t, self.knots, self.values))

    @classmethod
    def constant(cls, c: float, grid_T: float) -> "LscriptPath":
        return cls(np.array([0.0, grid_T]), np.array([c, c]), c)

    @classmethod
    def from_function(cls, fn, grid_T: float, points: int = 201) -> "LscriptPath":
        u = np.linspace(0.0, grid_T / (grid_T + 1.0), points)
        t = u / (1.0 - u)
        t[-1] = grid_T
        return cls(t, fn(t), float(fn(grid_T)))


class EsscherTable:
    """
    Exponent, normalizer, CDF and quantile of the Esscher density of a slope path.

    int_0^x l is exact (piecewise quadratic); Z is Gauss-Legendre quadrature
    on [0, T] plus the analytic tail exp(E(T)) / (alpha - l(inf)).
    """

    def __init__(self, lscript: LscriptPath, alpha: float):
        if not alpha > max(np.max(lscript.values), lscript.tail):
            raise ValueError("alpha must exceed the supremum of the slope path")
        self.lscript = lscript
        self.alpha = float(alpha)
        t, v = lscript.knots, lscript.values
        dt = np.diff(t)
        self._slopes = np.diff(v) / dt
        self._cum = np.concatenate(([0.0], np.cumsum(dt * (v[:-1] + v[1:]) / 2.0)))

        pieces = [np.linspace(a, b, max(1, int(math.ceil((b - a) / QUADRATURE_PIECE))) + 1)[:-1]
                  for a, b in zip(t[:-1], t[1:])]
        self._fine = np.append(np.concatenate(pieces), t[-1])
        masses = self._integrate_between(self._fine[:-1], self._fine[1:])
        self._fine_cdf = np.concatenate(([0.0], np.cumsum(masses)))
        self._log_tail = float(self.exponent(lscript.grid_T)) - math.log(self.alpha - lscript.tail)
        body = float(self._fine_cdf[-1])
        self.log_Z = math.log(body + math.exp(self._log_tail))
        self.body_mass = body / math.exp(self.log_Z)

    # exponent
    def _segment(self, x):
        return np.clip(np.searchsorted(self.lscript.knots, x, side="right") - 1,
                       0, self.lscript.knots.size - 2)

    def integral(self, x):
        """int_0^x l(t) dt."""
        x = np.asarray(x, dtype=float)
        T = self.lscript.grid_T
        inside = np.minimum(x, T)
        j = self._segment(inside)
        d = inside - self.lscript.knots[j]
        body = self._cum[j] + self.lscript.values[j] * d + 0.5 * self._slopes[j] * d * d
        return body + self.lscript.tail * np.maximum(x - T, 0.0)

    def exponent(self, x):
        x = np.asarray(x, dtype=float)
        return -self.alpha * x + self.integral(x)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore"):
            out = np.where(x >= 0.0, self.exponent(np.maximum(x, 0.0)) - self.log_Z, -np.inf)
        return out

    def density(self, x):
        return np.exp(self.log_density(x))

    @property
    def gamma(self) -> float:
        """Density at the boundary, eta(0)."""
        return math.exp(-self.log_Z)

    # distribution function
    def _integrate_between(self, a, b):
        a = np.atleast_1d(a)
        b = np.atleast_1d(b)
        half = 0.5 * (b - a)
        nodes = (0.5 * (a + b))[:, None] + half[:, None] * _GL_NODES
        return half * (np.exp(self.exponent(nodes)) @ _GL_WEIGHTS)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        flat = np.atleast_1d(x).astype(float)
        T = self.lscript.grid_T
        inside = np.clip(flat, 0.0, T)
        j = np.clip(np.searchsorted(self._fine, inside, side="right") - 1, 0, self._fine.size - 2)
        body = self._fine_cdf[j] + self._integrate_between(self._fine[j], inside)
        out = body / math.exp(self.log_Z)
        beyond = flat > T
        if np.any(beyond):
            rate = self.alpha - self.lscript.tail
            tail_mass = 1.0 - self.body_mass
            out = np.where(beyond, 1.0 - tail_mass * np.exp(-rate * (flat - T)), out)
        out = np.where(flat < 0.0, 0.0, out)
        return float(out[0]) if x.ndim == 0 else out

    def quantile(self, u):
        """Inverse CDF: table interpolation refined by Newton steps, exact tail."""
        u = np.asarray(u, dtype=float)
        flat = np.clip(np.atleast_1d(u), 0.0, 1.0)
        T = self.lscript.grid_T
        out = np.empty_like(flat)
        in_body = flat <= self.body_mass
        if np.any(in_body):
            target = flat[in_body] * math.exp(self.log_Z)
            x = np.interp(target, self._fine_cdf, self._fine)
            for _ in range(NEWTON_STEPS):
                j = np.clip(np.searchsorted(self._fine, x, side="right") - 1, 0,
                            self._fine.size - 2)
                current = self._fine_cdf[j] + self._integrate_between(self._fine[j], x)
                x = np.clip(x - (current - target) / np.exp(self.exponent(x)), 0.0, T)
            out[in_body] = x
        if np.any(~in_body):
            rate = self.alpha - self.lscript.tail
            tail_mass = 1.0 - self.body_mass
            with np.errstate(divide="ignore"):
                out[~in_body] = T - np.log((1.0 - flat[~in_body]) / tail_mass) / rate
        return float(out[0]) if u.ndim == 0 else out


def esscher_density(lscript: LscriptPath, alpha: float, x):
    """
    eta(x) = exp(-alpha x + int_0^x l) / Z.

    Raises:
        ValueError: x < 0
    """
    if np.any(np.asarray(x) < 0):
        raise ValueError("the Esscher density is defined for x >= 0")
    out = EsscherTable(lscript, alpha).density(x)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Prior on the slope path
# ---------------------------------------------------------------------------

class BoundaryPrior:
    """
    l(t) = S * Psi(Z + W_{t/(t+1)}) with Z ~ N(0,1) and W Brownian motion.

    Gaussian coordinates are (Z, standard normal increments of W on the
    u-grid); the latent process runs on the whole u-grid, the path uses the
    part below T/(T+1), where the last knot is exactly T.
    """

    def __init__(self, S: float, grid_T: float, u_knots=None):
        if not S > 0:
            raise ValueError("S must be positive")
        u_knots = np.linspace(0.0, 1.0, 65) if u_knots is None else np.asarray(u_knots, float)
        if np.any(u_knots < 0.0) or np.any(u_knots > 1.0):
            raise ValueError("u-knots must lie in [0, 1]")
        u_T = grid_T / (grid_T + 1.0)
        self.S = float(S)
        self.grid_T = float(grid_T)
        self.u = np.union1d(np.union1d(u_knots, [0.0]), [u_T])
        self._sqrt_du = np.sqrt(np.diff(np.concatenate(([0.0], self.u))))
        self._mask = self.u <= u_T
        u_path = self.u[self._mask]
        t = u_path / (1.0 - u_path)
        t[-1] = self.grid_T
        self.t_knots = t

    @property
    def size(self) -> int:
        return 1 + self.u.size

    def draw_coordinates(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.size)

    def latent(self, coords) -> np.ndarray:
        """Z + W on the u-grid."""
        coords = np.asarray(coords, dtype=float)
        return coords[0] + np.cumsum(self._sqrt_du * coords[1:])

    def path(self, coords) -> LscriptPath:
        values = self.S * (2.0 / np.pi) * np.arctan(self.latent(coords)[self._mask])
        return LscriptPath(self.t_knots, values, float(values[-1]), bound=self.S)

    def pcn_proposal(self, coords, rng: np.random.Generator, blend: float = PCN_BLEND):
        """Prior-preserving autoregressive move on the Gaussian coordinates."""
        return blend * coords + math.sqrt(1.0 - blend * blend) * rng.standard_normal(self.size)


def boundary_sample_prior(S: float, knots, rng: np.random.Generator,
                          grid_T: float = TRUNCATION_EXPONENT) -> LscriptPath:
    """One prior path; knots are u-points in [0,1] mapped to t = u / (1 - u)."""
    prior = BoundaryPrior(S, grid_T, knots)
    return prior.path(prior.draw_coordinates(rng))


# ---------------------------------------------------------------------------
# Configuration and data
# ---------------------------------------------------------------------------

def default_lscript0(alpha: float = 2.0, S: float = 1.0) -> LscriptPath:
    return LscriptPath.from_function(lambda t: 0.5 * (1.0 - 2.0 / (1.0 + t)),
                                     default_grid_T(alpha, S))


@dataclass
class BoundaryConfig:
    """
    Boundary model configuration.

    Attributes:
        theta0: true boundary
        lscript0: true slope path
        alpha, S: tilt and slope bound, 0 < S < alpha
        theta_prior: density over theta, positive near theta0
        grid_T: truncation point of the slope knots
        prior_S: bound of the prior paths (defaults to S)
        nuisance_prior: "arctan_bm" or "degenerate" (point mass at lscript0)
        prior_knots: number of u-knots of the prior
        pcn_blend: autoregressive coefficient of path proposals
    """
    theta0: float = 0.0
    lscript0: Optional[LscriptPath] = None
    alpha: float = 2.0
    S: float = 1.0
    theta_prior: Optional[GridDensity] = None
    grid_T: Optional[float] = None
    prior_S: Optional[float] = None
    nuisance_prior: str = "arctan_bm"
    prior_knots: int = 65
    pcn_blend: float = PCN_BLEND
    mcmc_steps: int = 20_000
    verbose_logging: bool = False
    _table: Optional[EsscherTable] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.S < self.alpha:
            raise ConfigError("need 0 < S < alpha")
        if self.grid_T is None:
            self.grid_T = default_grid_T(self.alpha, self.S)
        if self.lscript0 is None:
            self.lscript0 = default_lscript0(self.alpha, self.S)
        if np.any(np.abs(self.lscript0.values) > self.S + BOUND_TOLERANCE) or \
                abs(self.lscript0.tail) > self.S + BOUND_TOLERANCE:
            raise ConfigError("lscript0 must be bounded by S")
        if self.prior_S is None:
            self.prior_S = self.S
        if not 0.0 < self.prior_S < self.alpha:
            raise ConfigError("prior_S must lie in (0, alpha)")
        if self.theta_prior is None:
            self.theta_prior = make_grid_density(
                np.linspace(self.theta0 - 1.0, self.theta0 + 1.0, 201), np.ones(201))
        if not self.theta_prior(self.theta0) > 0:
            raise ConfigError("theta_prior must be positive at theta0")
        if self.nuisance_prior not in ("arctan_bm", "degenerate"):
            raise ConfigError(f"unknown nuisance_prior {self.nuisance_prior!r}")
        if not 0.0 <= self.pcn_blend < 1.0:
            raise ConfigError("pcn_blend must lie in [0, 1)")
        self._table = EsscherTable(self.lscript0, self.alpha)
        if self.verbose_logging:
            logger.debug("BoundaryConfig: theta0=%s alpha=%s S=%s T=%.3f gamma=%.6f",
                         self.theta0, self.alpha, self.S, self.grid_T, self.gamma)

    @property
    def table(self) -> EsscherTable:
        return self._table

    @property
    def gamma(self) -> float:
        """eta0(0), the rate of the exponential limit."""
        return self._table.gamma

    def prior(self) -> BoundaryPrior:
        return BoundaryPrior(self.prior_S, self.grid_T,
                             np.linspace(0.0, 1.0, self.prior_knots))

    @classmethod
    def from_params(cls, params: Optional[Dict] = None) -> "BoundaryConfig":
        params = dict(params or {})
        kwargs = {"verbose_logging": bool(params.get("verbose_logging", False))}
        for key in ("theta0", "alpha", "S", "grid_T", "prior_S", "pcn_blend"):
            if params.get(key) is not None:
                kwargs[key] = float(params[key])
        for key in ("prior_knots", "mcmc_steps"):
            if key in params:
                kwargs[key] = int(params[key])
        if "nuisance_prior" in params:
            kwargs["nuisance_prior"] = str(params["nuisance_prior"])
        alpha, S = kwargs.get("alpha", 2.0), kwargs.get("S", 1.0)
        if params.get("lscript0_constant") is not None:
            kwargs["lscript0"] = LscriptPath.constant(
                float(params["lscript0_constant"]), kwargs.get("grid_T", default_grid_T(alpha, S)))
        if params.get("theta_prior_halfwidth") is not None:
            half = float(params["theta_prior_halfwidth"])
            theta0 = kwargs.get("theta0", 0.0)
            kwargs["theta_prior"] = make_grid_density(
                np.linspace(theta0 - half, theta0 + half, 201), np.ones(201))
        try:
            return cls(**kwargs)
        except ValueError as e:
            raise ConfigError(f"invalid boundary parameters: {e}") from e


def boundary_generate(config: BoundaryConfig, n: int, rng: np.random.Generator) -> SampleSet:
    """theta0 plus inverse-CDF draws from the Esscher density of lscript0."""
    if n < 1:
        raise ValueError("n must be at least 1")
    draws = config.theta0 + config.table.quantile(rng.random(n))
    seed, key = describe_rng(rng)
    return SampleSet(np.atleast_1d(draws).reshape(-1, 1), seed=seed, spawn_key=key)


def boundary_loglik(theta: float, table: EsscherTable, sample: SampleSet) -> float:
    """sum_i log eta(X_i - theta); -inf once theta exceeds the sample minimum."""
    x = sample.values
    if theta > np.min(x):
        return -np.inf
    return float(np.sum(table.log_density(x - theta)))


def boundary_loglik_ratio(h: float, sample: SampleSet, config: BoundaryConfig) -> float:
    """Log-likelihood ratio of theta0 + h/n against theta0 with l fixed at lscript0."""
    theta = config.theta0 + h / len(sample)
    return boundary_loglik(theta, config.table, sample) - \
        boundary_loglik(config.theta0, config.table, sample)


# ---------------------------------------------------------------------------
# Posteriors
# ---------------------------------------------------------------------------

def exp_location_exact_posterior(sample: SampleSet, prior: GridDensity,
                                 rate: float = 1.0) -> GridDensity:
    """
    Posterior of theta in the location family with density rate*exp(-rate(x - theta))
    on x >= theta: proportional to prior(theta) exp(n rate theta) on theta <= X_(1).

    Raises:
        SupportMismatchError: prior is zero on (-inf, X_(1)]
    """
    sample.require_nonempty()
    if not rate > 0:
        raise ValueError("rate must be positive")
    n = len(sample)
    x_min = float(np.min(sample.values))
    hi = min(x_min, prior.upper)
    lo = max(prior.lower, hi - EXACT_GRID_SPAN / (n * rate))
    if not lo < hi:
        raise SupportMismatchError("prior puts no mass below the sample minimum")
    grid = np.linspace(lo, hi, EXACT_GRID_POINTS)
    with np.errstate(divide="ignore"):
        log_values = np.log(prior(grid)) + n * rate * (grid - hi)
    return normalize_log_density(grid, log_values)


@dataclass
class BoundaryPosterior:
    """Marginal posterior of h = n (theta - theta0) with its limit parameters."""
    h_density: GridDensity
    delta_n: float
    gamma: float
    path_accept_rate: float = 1.0
    chain: Optional[Chain] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.h_density.upper > self.delta_n + 1e-9:
            raise ValueError("h-density extends above delta_n")

    def to_dict(self):
        return {"delta_n": self.delta_n, "gamma": self.gamma,
                "h_grid": self.h_density.grid.tolist(),
                "h_density": self.h_density.values.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _s_grid(config: BoundaryConfig) -> np.ndarray:
    span = THETA_GRID_SPAN / (config.alpha - config.S)
    return span * np.linspace(0.0, 1.0, THETA_GRID_POINTS) ** 2


def boundary_h_grid(delta_n: float, config: BoundaryConfig, points: int = 401) -> np.ndarray:
    span = THETA_GRID_SPAN / (config.alpha - config.S)
    return np.linspace(delta_n - span, delta_n, points)


def boundary_posterior(sample: SampleSet, config: BoundaryConfig, iters: int,
                       rng: np.random.Generator, h_grid=None) -> BoundaryPosterior:
    """
    Metropolis-within-Gibbs over (theta, l).

    theta is drawn from its exact conditional given the path, tabulated on a
    grid of s = n (X_(1) - theta) >= 0 and recomputed only when the path
    moves. The path takes pCN steps on its Gaussian coordinates, accepted on
    the likelihood ratio.

    Raises:
        DiagnosticsError: ESS of theta below 20
    """
    sample.require_nonempty()
    x = sample.values
    n = x.size
    x_min = float(np.min(x))
    delta_n = n * (x_min - config.theta0)
    offsets = x - x_min
    burn_in = default_burn_in(iters)
    if iters <= burn_in:
        raise ValueError(f"iters ({iters}) must exceed the burn-in length ({burn_in})")

    s_grid = _s_grid(config)
    with np.errstate(divide="ignore"):
        log_prior = np.log(config.theta_prior(x_min - s_grid / n))
    if not np.any(np.isfinite(log_prior)):
        raise SupportMismatchError("theta prior is zero below the sample minimum")

    degenerate = config.nuisance_prior == "degenerate"
    prior = config.prior()
    coords = prior.draw_coordinates(rng)
    table = config.table if degenerate else EsscherTable(prior.path(coords), config.alpha)

    def theta_conditional(tab: EsscherTable) -> GridDensity:
        # log Z does not depend on theta
        loglik = np.sum(tab.exponent(offsets[None, :] + (s_grid / n)[:, None]), axis=1)
        return normalize_log_density(s_grid, loglik + log_prior)

    conditional = theta_conditional(table)
    kept = iters - burn_in
    thetas = np.empty(kept)
    log_values = np.empty(kept)
    accepted = 0
    for t in range(iters):
        s = float(sample_grid_density(conditional, 1, rng)[0])
        theta = x_min - s / n
        current = boundary_loglik(theta, table, sample)
        accept = False
        if not degenerate:
            proposal = prior.pcn_proposal(coords, rng, config.pcn_blend)
            proposed_table = EsscherTable(prior.path(proposal), config.alpha)
            candidate = boundary_loglik(theta, proposed_table, sample)
            if metropolis_accept(candidate - current, rng):
                coords, table, current, accept = proposal, proposed_table, candidate, True
                conditional = theta_conditional(table)
        if t >= burn_in:
            thetas[t - burn_in] = theta
            log_values[t - burn_in] = current
            accepted += int(accept)
    accept_rate = 1.0 if degenerate else accepted / kept
    chain = Chain(thetas, log_values, accept_rate, burn_in=burn_in)
    logger.debug("boundary_posterior: n=%d, %d sweeps, path accept rate %.3f",
                 n, iters, accept_rate)
    if h_grid is None:
        h_grid = boundary_h_grid(delta_n, config)
    h_density = chain_to_density(chain, 0, h_grid,
                                 transform=lambda th: n * (th - config.theta0))
    return BoundaryPosterior(h_density, float(delta_n), config.gamma, accept_rate, chain)
