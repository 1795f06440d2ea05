"""
Posterior machinery: exact grid quadrature for scalar parameters, adaptive
random-walk Metropolis, and the pieces Gibbs samplers in the model modules
are assembled from.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from scipy import special

from bvm_errors import (DiagnosticsError, SupportMismatchError,
                        TargetEvaluationError)
from stat_core import (GridDensity, density_quantile,
                       make_grid_density)

logger = logging.getLogger(__name__)

MAX_BURN_IN = 10_000
SCALAR_ACCEPTANCE = 0.44
VECTOR_ACCEPTANCE = 0.234
SCALE_RECORD_EVERY = 100
SHAPE_UPDATE_EVERY = 1000
SOFT_MIN_ESS = 100.0
HARD_MIN_ESS = 20.0


@dataclass(frozen=True)
class LogTarget:
    """
    An unnormalized log-density over states of a fixed dimension.

    eval may return -inf (zero density, e.g. outside a support constraint)
    but never NaN or +inf; those are hard errors.
    """
    eval: Callable[[np.ndarray], float]
    dimension: int = 1
    name: str = "target"

    def __call__(self, state) -> float:
        value = float(self.eval(np.atleast_1d(np.asarray(state, dtype=float))))
        if np.isnan(value) or value == np.inf:
            raise TargetEvaluationError(f"{self.name} returned {value} at state {state!r}")
        return value

    @classmethod
    def scalar(cls, fn: Callable[[float], float], name: str = "target") -> "LogTarget":
        """Wrap a function of one real number."""
        return cls(lambda state: fn(float(state[0])), 1, name)


TargetLike = Union[LogTarget, Callable[[float], float]]


def _as_target(target: TargetLike) -> LogTarget:
    return target if isinstance(target, LogTarget) else LogTarget.scalar(target)


@dataclass(eq=False)
class Chain:
    """
    An MCMC trace.

    Attributes:
        states: post-burn-in states, shape (length, dimension)
        log_values: log-target at each stored state
        accept_rate: fraction of accepted post-burn-in proposals
        proposal_scale_history: proposal scales recorded while adapting
        burn_in: number of discarded initial iterations
        extras: auxiliary per-state traces (e.g. cluster counts)
    """
    states: np.ndarray
    log_values: np.ndarray
    accept_rate: float
    proposal_scale_history: List[np.ndarray] = field(default_factory=list)
    burn_in: int = 0
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states.reshape(-1, 1)
        self.log_values = np.asarray(self.log_values, dtype=float)
        if self.log_values.shape != (self.states.shape[0],):
            raise ValueError("one log-target value per stored state required")
        if not np.all(np.isfinite(self.log_values)):
            raise ValueError("stored states must have finite log-target values")
        if not 0.0 <= self.accept_rate <= 1.0:
            raise ValueError("accept_rate must lie in [0, 1]")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dimension(self) -> int:
        return self.states.shape[1]

    def coordinate(self, index: int) -> np.ndarray:
        return self.states[:, index]


def chain_from_draws(draws) -> Chain:
    """Wrap exact (independent) draws as a Chain for the density tools."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws.reshape(-1, 1)
    return Chain(draws, np.zeros(draws.shape[0]), accept_rate=1.0)


class AdaptiveScale:
    """
    Robbins-Monro adaptation of a random-walk proposal scale toward a target
    acceptance probability. Adaptation happens only until freeze() is called.
    """

    def __init__(self, initial: Union[float, np.ndarray], target_rate: float):
        self.scale = np.atleast_1d(np.asarray(initial, dtype=float)).copy()
        self.log_factor = 0.0
        self.target_rate = target_rate
        self.frozen = False
        self.history: List[np.ndarray] = []
        self._t = 0

    @property
    def current(self) -> np.ndarray:
        return np.exp(self.log_factor) * self.scale

    def update(self, accept_prob: float) -> None:
        if self.frozen:
            return
        self._t += 1
        self.log_factor += (accept_prob - self.target_rate) / self._t ** 0.6
        if self._t % SCALE_RECORD_EVERY == 0:
            self.history.append(self.current.copy())

    def reshape(self, spread: np.ndarray) -> None:
        """Set component-wise shape from the spread of recent states."""
        if self.frozen or not np.all(spread > 0):
            return
        dim = spread.size
        self.scale = spread * 2.38 / np.sqrt(dim)
        self.log_factor = 0.0

    def freeze(self) -> None:
        self.frozen = True
        self.history.append(self.current.copy())


def default_burn_in(steps: int) -> int:
    return min(steps // 5, MAX_BURN_IN)


def metropolis_accept(log_ratio: float, rng: np.random.Generator) -> bool:
    """Metropolis accept/reject on a log acceptance ratio; -inf never accepts."""
    if log_ratio == -np.inf:
        return False
    return bool(np.log(rng.random()) < log_ratio)


def normalize_log_density(grid, log_values) -> GridDensity:
    """
    Normalize exp(log_values) on a grid, stabilized by subtracting the maximum.

    Raises:
        SupportMismatchError: every log value is -inf
    """
    log_values = np.asarray(log_values, dtype=float)
    if np.any(np.isnan(log_values)) or np.any(log_values == np.inf):
        raise TargetEvaluationError("log-density values must not be NaN or +inf")
    finite = np.isfinite(log_values)
    if not np.any(finite):
        raise SupportMismatchError("posterior mass is zero everywhere on the grid")
    shifted = np.where(finite, log_values - np.max(log_values[finite]), -np.inf)
    return make_grid_density(grid, np.exp(shifted))


def grid_posterior(loglik: TargetLike, logprior: TargetLike, grid) -> GridDensity:
    """
    Posterior of a scalar parameter by quadrature on a grid.

    Args:
        loglik: log-likelihood over the scalar parameter
        logprior: log-prior density over the scalar parameter
        grid: strictly increasing parameter values

    Returns:
        GridDensity proportional to exp(loglik + logprior)

    Raises:
        SupportMismatchError: prior or posterior mass is zero on the whole grid
    """
    loglik, logprior = _as_target(loglik), _as_target(logprior)
    grid = np.asarray(grid, dtype=float)
    prior_values = np.array([logprior(x) for x in grid])
    if not np.any(np.isfinite(prior_values)):
        raise SupportMismatchError("log-prior is -inf on the whole grid")
    log_values = np.full(grid.size, -np.inf)
    for j in np.flatnonzero(np.isfinite(prior_values)):
        log_values[j] = loglik(grid[j]) + prior_values[j]
    return normalize_log_density(grid, log_values)


def rw_metropolis(target: LogTarget, init, steps: int, rng: np.random.Generator,
                  adapt: bool = True, burn_in: Optional[int] = None,
                  initial_scale: Union[float, np.ndarray] = 1.0) -> Chain:
    """
    Gaussian random-walk Metropolis with burn-in adaptation.

    The component-wise proposal scale is adapted during burn-in toward 0.44
    acceptance (scalar targets) or 0.234 (dimension > 1), then frozen. Only
    post-burn-in states are stored.

    Raises:
        SupportMismatchError: init has zero target density
        ValueError: steps < 1 or steps not above the burn-in length
    """
    target = _as_target(target)
    if steps < 1:
        raise ValueError("steps must be at least 1")
    burn_in = default_burn_in(steps) if burn_in is None else int(burn_in)
    if burn_in >= steps:
        raise ValueError(f"steps ({steps}) must exceed the burn-in length ({burn_in})")

    state = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    dim = state.size
    current_lp = target(state)
    if current_lp == -np.inf:
        raise SupportMismatchError("initial state lies outside the target's support")

    rate = SCALAR_ACCEPTANCE if dim == 1 else VECTOR_ACCEPTANCE
    scale = AdaptiveScale(np.broadcast_to(initial_scale, (dim,)), rate)
    if not adapt:
        scale.freeze()
    increments = rng.standard_normal((steps, dim))
    uniforms = rng.random(steps)
    burn_states = np.empty((burn_in, dim)) if adapt and dim > 1 else None

    kept = steps - burn_in
    states = np.empty((kept, dim))
    log_values = np.empty(kept)
    accepted = 0
    for t in range(steps):
        proposal = state + scale.current * increments[t]
        proposal_lp = target(proposal)
        log_ratio = proposal_lp - current_lp if proposal_lp > -np.inf else -np.inf
        accept = log_ratio > -np.inf and np.log(uniforms[t]) < log_ratio
        if accept:
            state, current_lp = proposal, proposal_lp
        if t < burn_in:
            if adapt:
                scale.update(float(np.exp(min(log_ratio, 0.0))))
                if burn_states is not None:
                    burn_states[t] = state
                    if (t + 1) % SHAPE_UPDATE_EVERY == 0:
                        scale.reshape(np.std(burn_states[(t + 1) // 2:t + 1], axis=0))
            if t == burn_in - 1:
                scale.freeze()
            continue
        if accept:
            accepted += 1
        states[t - burn_in] = state
        log_values[t - burn_in] = current_lp

    if not scale.frozen:
        scale.freeze()
    accept_rate = accepted / kept
    logger.debug("rw_metropolis: %d steps, burn-in %d, accept rate %.3f, final scale %s",
                 steps, burn_in, accept_rate, scale.current)
    return Chain(states, log_values, accept_rate, scale.history, burn_in)


def effective_sample_size(chain: Chain, coordinate: int = 0) -> float:
    """
    Effective sample size by Geyer's initial positive sequence estimator.

    A constant coordinate returns the floor value 1.
    """
    x = chain.coordinate(coordinate)
    n = x.size
    if n < 10:
        raise ValueError("effective_sample_size needs a chain of length >= 10")
    centered = x - x.mean()
    if np.allclose(centered, 0.0):
        return 1.0
    size = 1 << int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, size)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), size)[:n] / n
    rho = acov / acov[0]

    tau = -1.0
    previous = np.inf
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        pair = min(pair, previous)  # initial monotone sequence
        tau += 2.0 * pair
        previous = pair
    return float(np.clip(n / max(tau, 1e-12), 1.0, n))


def chain_diagnostics(chain: Chain, coordinate: int = 0) -> Dict[str, float]:
    return {"ess": effective_sample_size(chain, coordinate),
            "accept_rate": float(chain.accept_rate)}


def _triangular_smooth(values: np.ndarray) -> np.ndarray:
    padded = np.concatenate(([0.0], values, [0.0]))
    weights = np.concatenate(([0.0], np.ones_like(values), [0.0]))
    num = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
    den = 0.25 * weights[:-2] + 0.5 * weights[1:-1] + 0.25 * weights[2:]
    return num / den


def chain_to_density(chain: Chain, coordinate: int, grid,
                     transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                     min_ess: float = HARD_MIN_ESS) -> GridDensity:
    """
    Histogram a chain coordinate on the bins of a grid and smooth once.

    Bin edges sit halfway between grid points (half bins at both ends); one
    pass of (1/4, 1/2, 1/4) smoothing follows, renormalized at the ends.

    Args:
        chain: the MCMC trace
        coordinate: state coordinate to tabulate
        grid: strictly increasing abscissae (in transformed units if transform given)
        transform: optional map applied to the coordinate first (e.g. localization)
        min_ess: hard floor on the effective sample size

    Raises:
        DiagnosticsError: ESS below min_ess
        SupportMismatchError: no draw falls inside the grid
    """
    grid = np.asarray(grid, dtype=float)
    if len(chain) >= 10 and min_ess > 0:
        ess = effective_sample_size(chain, coordinate)
        if ess < min_ess:
            raise DiagnosticsError(f"effective sample size {ess:.1f} below {min_ess}")
        if ess < SOFT_MIN_ESS:
            logger.warning("effective sample size %.1f is below %d", ess, SOFT_MIN_ESS)
    values = chain.coordinate(coordinate)
    if transform is not None:
        values = transform(values)
    edges = np.concatenate(([grid[0]], 0.5 * (grid[:-1] + grid[1:]), [grid[-1]]))
    counts, _ = np.histogram(values, bins=edges)
    if counts.sum() == 0:
        raise SupportMismatchError("all chain mass lies outside the grid")
    heights = counts / (counts.sum() * np.diff(edges))
    return make_grid_density(grid, _triangular_smooth(heights))


def credible_interval(density: GridDensity, level: float = 0.95):
    """Central credible interval (equal tail mass on both sides)."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    tail = 0.5 * (1.0 - level)
    lo, hi = density_quantile(density, np.array([tail, 1.0 - tail]))
    return float(lo), float(hi)


def map_estimate(density: GridDensity) -> float:
    return float(density.grid[np.argmax(density.values)])


def posterior_median(density: GridDensity) -> float:
    return float(density_quantile(density, 0.5))


def chain_to_csv(chain: Chain, path) -> None:
    frame = pd.DataFrame(chain.states,
                         columns=[f"coord{j}" for j in range(chain.dimension)])
    frame.insert(0, "step", np.arange(len(chain)))
    frame["logp"] = chain.log_values
    try:
        frame.to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"could not write chain to {path}: {e}") from e


def log_mean_exp(log_terms) -> float:
    """log((1/J) * sum exp(terms)) with log-sum-exp stabilization."""
    log_terms = np.asarray(log_terms, dtype=float)
    return float(special.logsumexp(log_terms) - np.log(log_terms.size))
