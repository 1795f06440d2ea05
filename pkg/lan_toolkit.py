"""
Expansion calculus for local likelihood ratios.

Efficient scores and their information, the efficient central sequence,
LAN and LAE remainders, the integrated likelihood and its ILAN remainder,
the asymptotic-linearity gap of an estimator, and the numerical projection
of an ordinary score onto a nuisance tangent space.

Score contracts are vectorized: a score maps an observation array of shape
(n, d) to an array of shape (n,) or (n, k).
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy import stats as scipy_stats

from bvm_errors import (DimensionMismatchError, ModelImplementationError,
                        SingularInformationError, SupportMismatchError)
from posterior_engine import log_mean_exp
from stat_core import SampleSet

logger = logging.getLogger(__name__)

RIDGE_FACTOR = 1e-10
RIDGE_FLOOR = 1e-10
IDENTIFIABILITY_TOLERANCE = 1e-8

ScoreFn = Callable[[np.ndarray], np.ndarray]


class Rate(Enum):
    SQRT_N = "sqrt_n"      # h = sqrt(n) (theta - theta0), LAN families
    LINEAR_N = "linear_n"  # h = n (theta - theta0), LAE families


@dataclass(frozen=True)
class LocalFrame:
    """Local reparametrization around theta0 at a model-declared rate."""
    theta0: float
    rate: Rate = Rate.SQRT_N

    def scale(self, n: int) -> float:
        return float(np.sqrt(n)) if self.rate is Rate.SQRT_N else float(n)

    def theta(self, h, n: int):
        return self.theta0 + np.asarray(h, dtype=float) / self.scale(n)

    def localize(self, theta, n: int):
        return self.scale(n) * (np.asarray(theta, dtype=float) - self.theta0)


def _as_matrix(info) -> np.ndarray:
    return np.atleast_2d(np.asarray(info, dtype=float))


def _cholesky(info: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(info, lower=True)
    except linalg.LinAlgError as e:
        raise SingularInformationError(f"information matrix is not positive-definite: {e}")


def score_matrix(score: ScoreFn, sample: SampleSet) -> np.ndarray:
    """Evaluate a vectorized score on a sample as an (n, k) array."""
    values = np.asarray(score(sample.observations), dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    if values.shape[0] != len(sample):
        raise DimensionMismatchError(
            f"score returned {values.shape[0]} rows for {len(sample)} observations")
    return values


def central_sequence(score: ScoreFn, sample: SampleSet) -> np.ndarray:
    """Gamma_n = n^(-1/2) * sum_i score(X_i)."""
    sample.require_nonempty()
    return score_matrix(score, sample).sum(axis=0) / np.sqrt(len(sample))


@dataclass(eq=False)
class EfficientInfluence:
    """
    An efficient score function together with its efficient information.

    Attributes:
        score: vectorized efficient score
        info: efficient Fisher information, k x k
        info_se: Monte Carlo standard error of a scalar info (projections only)
        ridge: ridge added to a rank-deficient Gram matrix, 0 if none
        coefficients: projection coefficients on the nuisance basis
        identifiable: False when the projected information is numerically zero
    """
    score: ScoreFn
    info: np.ndarray
    info_se: float = 0.0
    ridge: float = 0.0
    coefficients: Optional[np.ndarray] = None
    identifiable: bool = True
    _chol: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.info = _as_matrix(self.info)
        if self.info.shape[0] != self.info.shape[1]:
            raise DimensionMismatchError("info must be square")
        if self.identifiable:
            self._chol = _cholesky(self.info)

    @property
    def dim(self) -> int:
        return self.info.shape[0]

    @property
    def scalar_info(self) -> float:
        if self.dim != 1:
            raise DimensionMismatchError("scalar_info requires a one-dimensional parameter")
        return float(self.info[0, 0])

    def solve(self, vector) -> np.ndarray:
        """info^{-1} vector through the Cholesky factor."""
        if self._chol is None:
            raise SingularInformationError("efficient information is singular (non-identifiable)")
        return linalg.cho_solve((self._chol, True), np.atleast_1d(vector))


@dataclass
class ExpansionReport:
    """Remainders of a local expansion at one sample size."""
    n: int
    h_values: List[float]
    remainders: List[float]

    def __post_init__(self):
        if len(self.h_values) != len(self.remainders):
            raise ValueError("one remainder per h value required")

    @property
    def summary(self) -> float:
        """Median absolute remainder over finite entries."""
        values = np.abs(np.asarray(self.remainders, dtype=float))
        values = values[np.isfinite(values)]
        return float(np.median(values)) if values.size else float("inf")

    def to_dict(self):
        return {"n": int(self.n), "h": [float(h) for h in self.h_values],
                "remainder": [float(r) for r in self.remainders],
                "median_abs": self.summary}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def collect(cls, n: int, h_values: Sequence[float],
                remainder: Callable[[float], float]) -> "ExpansionReport":
        h_values = [float(h) for h in h_values]
        return cls(n, h_values, [float(remainder(h)) for h in h_values])


def delta_tilde(sample: SampleSet, infl: EfficientInfluence) -> np.ndarray:
    """
    Efficient central sequence Info^{-1} n^{-1/2} sum_i score(X_i).

    Raises:
        SingularInformationError: info is not positive-definite
    """
    return infl.solve(central_sequence(infl.score, sample))


def lan_remainder(loglik_ratio: Callable[[np.ndarray, SampleSet], float],
                  sample: SampleSet, h, infl: EfficientInfluence) -> float:
    """
    log prod p_{theta0 + h/sqrt(n)}/p_{theta0}(X_i) - [h'Gamma_n - h'Info h / 2].

    A -inf likelihood ratio is a LAN failure: it is logged and reported as +inf.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.size != infl.dim:
        raise DimensionMismatchError(f"h has dimension {h.size}, info {infl.dim}")
    ratio = float(loglik_ratio(h if h.size > 1 else h[0], sample))
    if ratio == -np.inf:
        logger.warning("LAN failure: log-likelihood ratio is -inf at h=%s", h)
        return float("inf")
    gamma_n = central_sequence(infl.score, sample)
    return float(ratio - (h @ gamma_n - 0.5 * h @ infl.info @ h))


def lae_remainder(loglik_ratio: Callable[[float, SampleSet], float],
                  sample: SampleSet, h: float, gamma: float, theta0: float):
    """
    Remainder of the one-sided linear expansion at rate n.

    Returns (remainder, in_support) with in_support = h <= n (X_(1) - theta0).
    Outside the support the log-ratio must be -inf and the remainder is NaN.

    Raises:
        ModelImplementationError: finite log-ratio outside the support, or a
            non-finite one inside it
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    sample.require_nonempty()
    x = sample.values
    delta_n = len(x) * (np.min(x) - theta0)
    ratio = float(loglik_ratio(h, sample))
    if h <= delta_n:
        if not np.isfinite(ratio):
            raise ModelImplementationError(
                f"log-likelihood ratio {ratio} at h={h} inside the support (delta_n={delta_n})")
        return float(ratio - h * gamma), True
    if ratio != -np.inf:
        raise ModelImplementationError(
            f"finite log-likelihood ratio {ratio} at h={h} beyond delta_n={delta_n}")
    return float("nan"), False


def integrated_likelihood(sample: SampleSet, h: float, nuisance_prior_draws: Sequence,
                          loglik: Callable, frame: LocalFrame, eta0,
                          log_weights=None) -> float:
    """
    log (1/J) sum_j w_j exp[loglik(theta_n(h), eta_j) - loglik(theta0, eta0)].

    The draws are shared across h. With draws from a proposal rather than the
    prior, log_weights carries log(prior/proposal) per draw.

    Raises:
        SupportMismatchError: every term is -inf
    """
    if len(nuisance_prior_draws) < 1:
        raise ValueError("at least one nuisance draw is required")
    n = len(sample)
    theta = float(frame.theta(h, n))
    base = loglik(frame.theta0, eta0, sample)
    terms = np.array([loglik(theta, eta, sample) - base for eta in nuisance_prior_draws])
    if log_weights is not None:
        log_weights = np.asarray(log_weights, dtype=float)
        if log_weights.shape != terms.shape:
            raise DimensionMismatchError("one log-weight per nuisance draw required")
        terms = terms + log_weights
    if not np.any(np.isfinite(terms)):
        raise SupportMismatchError(f"integrated likelihood is zero at h={h}")
    return log_mean_exp(terms)


def ilan_remainder(sample: SampleSet, h: float, nuisance_prior_draws: Sequence,
                   loglik: Callable, frame: LocalFrame, eta0,
                   infl: EfficientInfluence, log_weights=None) -> float:
    """log(s_n(h)/s_n(0)) - [h Gamma_n - h^2 Info / 2] with common draws."""
    at_h = integrated_likelihood(sample, h, nuisance_prior_draws, loglik, frame, eta0,
                                 log_weights)
    at_zero = integrated_likelihood(sample, 0.0, nuisance_prior_draws, loglik, frame, eta0,
                                    log_weights)
    gamma_n = float(central_sequence(infl.score, sample)[0])
    return float(at_h - at_zero - (h * gamma_n - 0.5 * h * h * infl.scalar_info))


def mle_linearity_gap(sample: SampleSet, theta_hat, score: ScoreFn, info,
                      theta0) -> float:
    """|| sqrt(n)(theta_hat - theta0) - Info^{-1} Gamma_n ||."""
    info = _as_matrix(info)
    chol = _cholesky(info)
    n = len(sample)
    local = np.sqrt(n) * (np.atleast_1d(theta_hat) - np.atleast_1d(theta0))
    linear = linalg.cho_solve((chol, True), central_sequence(score, sample))
    return float(np.linalg.norm(local - linear))


def project_efficient_score(ordinary_score: ScoreFn, nuisance_basis: Sequence[ScoreFn],
                            p0_sample: SampleSet) -> EfficientInfluence:
    """
    Least-squares projection of a scalar score onto the orthocomplement of a
    nuisance basis in empirical L2(P0).

    Args:
        ordinary_score: vectorized ordinary score for the parameter of interest
        nuisance_basis: vectorized nuisance scores g_j
        p0_sample: Monte Carlo sample from P0

    Returns:
        EfficientInfluence with score l - sum c_j g_j, info the empirical second
        moment of that residual and info_se its Monte Carlo standard error.
        A rank-deficient Gram matrix is regularized by 1e-10 * trace / dim and
        the ridge is reported; a numerically zero residual is flagged as
        non-identifiable.
    """
    p0_sample.require_nonempty()
    obs = p0_sample.observations
    n = len(p0_sample)
    ordinary = score_matrix(ordinary_score, p0_sample)[:, 0]
    raw_second_moment = float(np.mean(ordinary ** 2))

    ridge = 0.0
    if nuisance_basis:
        design = np.column_stack([np.asarray(g(obs), dtype=float).ravel()
                                  for g in nuisance_basis])
        gram = design.T @ design / n
        rhs = design.T @ ordinary / n
        dim = gram.shape[0]
        if np.linalg.matrix_rank(gram) < dim:
            trace = float(np.trace(gram))
            ridge = RIDGE_FACTOR * trace / dim if trace > 0 else RIDGE_FLOOR
            logger.warning("rank-deficient Gram matrix; ridge %.3g applied", ridge)
        coefficients = linalg.solve(gram + ridge * np.eye(dim), rhs, assume_a="pos")
        residual = ordinary - design @ coefficients
    else:
        coefficients = np.zeros(0)
        residual = ordinary

    squared = residual ** 2
    info = float(np.mean(squared))
    info_se = float(np.std(squared, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    identifiable = info > IDENTIFIABILITY_TOLERANCE * max(raw_second_moment, 1.0)
    if not identifiable:
        logger.warning("projected information %.3g is numerically zero; "
                       "parameter is not identifiable from this basis", info)

    basis = list(nuisance_basis)
    coef = coefficients.copy()

    def efficient_score(x):
        out = np.asarray(ordinary_score(x), dtype=float).ravel()
        for c, g in zip(coef, basis):
            out = out - c * np.asarray(g(x), dtype=float).ravel()
        return out

    return EfficientInfluence(efficient_score, info, info_se=info_se, ridge=ridge,
                              coefficients=coef, identifiable=identifiable)


def wald_interval(center: float, info: float, n: int, level: float = 0.95):
    """Central Wald interval center -/+ z / sqrt(n * info)."""
    if not info > 0:
        raise SingularInformationError("Wald interval needs positive information")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    half = scipy_stats.norm.ppf(0.5 * (1.0 + level)) / np.sqrt(n * info)
    return float(center - half), float(center + half)
