"""
Probability laws, grid densities and statistical distances.

Every posterior and every limit law in the laboratory is eventually compared
as a GridDensity: a normalized density tabulated on a strictly increasing
grid, read as its piecewise-linear interpolant and zero outside the grid.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import integrate, linalg
from scipy import stats as scipy_stats

from bvm_errors import (DimensionMismatchError, NegativeDensityError,
                        NonMonotoneGridError, SingularInformationError,
                        UnsupportedLawError, ZeroMassError)

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-8
SYMMETRY_TOLERANCE = 1e-12
TAIL_MASS = 1e-10        # untabulated law mass allowed by tv_to_law
MIN_EXTENSION_POINTS = 64
MAX_EXTENSION_POINTS = 20000
EXTENSION_TOLERANCE = 1e-9  # gaps narrower than this (relative) are not extended


# ---------------------------------------------------------------------------
# Random number generation
# ---------------------------------------------------------------------------

def make_rng(seed: Optional[int] = None,
             spawn_key: Sequence[int] = ()) -> np.random.Generator:
    """Counter-based (Philox) generator driven by an explicit seed sequence."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in spawn_key))
    return np.random.Generator(np.random.Philox(seq))


def replication_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Generator for one replication of a batch experiment.

    The keys (typically n-index and replication index) are folded into the
    seed sequence, so a stream never depends on which other replications run.
    """
    return make_rng(seed, keys)


def spawn_rngs(rng: np.random.Generator, k: int) -> List[np.random.Generator]:
    """Split a generator into k independent children."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return list(rng.spawn(k))


def describe_rng(rng: np.random.Generator) -> Tuple[Optional[int], Tuple[int, ...]]:
    """Return (entropy, spawn_key) of the generator's seed sequence."""
    seq = getattr(rng.bit_generator, "seed_seq", None)
    if seq is None:
        return None, ()
    entropy = seq.entropy if isinstance(seq.entropy, int) else None
    return entropy, tuple(seq.spawn_key)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def _as_grid(grid) -> np.ndarray:
    grid = np.array(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise NonMonotoneGridError("grid must be one-dimensional with at least 2 points")
    if not np.all(np.isfinite(grid)):
        raise NonMonotoneGridError("grid contains non-finite abscissae")
    if np.any(np.diff(grid) <= 0):
        raise NonMonotoneGridError("grid must be strictly increasing")
    return grid


@dataclass(frozen=True, eq=False)
class GridDensity:
    """
    A normalized probability density tabulated on a strictly increasing grid.

    Attributes:
        grid: abscissae in model units
        values: nonnegative ordinates (per unit of abscissa)
    """
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = _as_grid(self.grid)
        values = np.array(self.values, dtype=float)
        if values.shape != grid.shape:
            raise DimensionMismatchError(
                f"values has shape {values.shape}, grid has shape {grid.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise NegativeDensityError("density values must be finite and nonnegative")
        mass = integrate.trapezoid(values, grid)
        if abs(mass - 1.0) > NORMALIZATION_TOLERANCE:
            raise ValueError(f"density integrates to {mass!r}, not 1; use make_grid_density")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def __call__(self, x):
        """Piecewise-linear density ordinate, zero outside the grid."""
        x = np.asarray(x, dtype=float)
        return np.interp(x, self.grid, self.values, left=0.0, right=0.0)

    @property
    def lower(self) -> float:
        return float(self.grid[0])

    @property
    def upper(self) -> float:
        return float(self.grid[-1])


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    """N(center, covariance) in k dimensions."""
    center: np.ndarray
    covariance: np.ndarray
    cholesky: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if center.ndim != 1 or cov.shape != (center.size, center.size):
            raise DimensionMismatchError(
                f"covariance shape {cov.shape} does not match center of length {center.size}")
        if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOLERANCE:
            raise ValueError("covariance must be symmetric")
        try:
            chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as e:
            raise SingularInformationError(f"covariance is not positive-definite: {e}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "cholesky", chol)

    @classmethod
    def scalar(cls, mean: float, variance: float) -> "GaussianLaw":
        return cls(np.array([mean]), np.array([[variance]]))

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def sd(self) -> float:
        """Standard deviation of a one-dimensional law."""
        return float(np.sqrt(self.covariance[0, 0]))


@dataclass(frozen=True)
class NegExpLaw:
    """
    Negative exponential Exp-(location, rate): density rate*exp(rate*(x - location))
    for x <= location and zero above.
    """
    location: float
    rate: float

    def __post_init__(self):
        if not np.isfinite(self.location):
            raise ValueError("location must be finite")
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        object.__setattr__(self, "location", float(self.location))
        object.__setattr__(self, "rate", float(self.rate))

    @property
    def dim(self) -> int:
        return 1


Law = Union[GaussianLaw, NegExpLaw]


@dataclass(frozen=True, eq=False)
class SampleSet:
    """
    An ordered sample of real vectors together with the seed that made it.

    observations always has shape (n, d); one-dimensional samples have d = 1.
    """
    observations: np.ndarray
    seed: Optional[int] = None
    spawn_key: Tuple[int, ...] = ()
    columns: Tuple[str, ...] = ()

    def __post_init__(self):
        obs = np.array(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs.reshape(-1, 1)
        if obs.ndim != 2:
            raise DimensionMismatchError("observations must be a list of vectors")
        columns = tuple(self.columns) or (
            ("x",) if obs.shape[1] == 1 else tuple(f"x{j}" for j in range(obs.shape[1])))
        if len(columns) != obs.shape[1]:
            raise DimensionMismatchError("one column name per coordinate required")
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "spawn_key", tuple(self.spawn_key))

    def __len__(self) -> int:
        return self.observations.shape[0]

    @property
    def dim(self) -> int:
        return self.observations.shape[1]

    @property
    def values(self) -> np.ndarray:
        """Flat view of a one-dimensional sample."""
        if self.dim != 1:
            raise DimensionMismatchError("values is defined for one-dimensional samples")
        return self.observations[:, 0]

    def column(self, name: str) -> np.ndarray:
        return self.observations[:, self.columns.index(name)]

    def require_nonempty(self) -> None:
        if len(self) == 0:
            raise ValueError("sample is empty")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.observations, columns=list(self.columns))


# ---------------------------------------------------------------------------
# Construction and analytic laws
# ---------------------------------------------------------------------------

def make_grid_density(grid, raw_values) -> GridDensity:
    """
    Normalize nonnegative ordinates on a grid to a GridDensity.

    Args:
        grid: strictly increasing abscissae
        raw_values: nonnegative ordinates, not all zero

    Raises:
        NonMonotoneGridError: grid not strictly increasing
        NegativeDensityError: some ordinate negative (or non-finite)
        ZeroMassError: every ordinate zero
    """
    grid = _as_grid(grid)
    raw = np.asarray(raw_values, dtype=float)
    if raw.shape != grid.shape:
        raise DimensionMismatchError(
            f"raw_values has shape {raw.shape}, grid has shape {grid.shape}")
    if not np.all(np.isfinite(raw)) or np.any(raw < 0):
        raise NegativeDensityError("raw density values must be finite and nonnegative")
    mass = integrate.trapezoid(raw, grid)
    if not np.any(raw > 0) or mass <= 0:
        raise ZeroMassError("raw density values are all zero")
    return GridDensity(grid, raw / mass)


def law_density(law: Law, x):
    """Analytic density ordinate(s) of a law.

    For one-dimensional laws x may be a scalar or any array of points; for a
    k-dimensional Gaussian the last axis of x must have length k.
    """
    if isinstance(law, NegExpLaw):
        x = np.asarray(x, dtype=float)
        shifted = np.minimum(x - law.location, 0.0)
        out = np.where(x <= law.location, law.rate * np.exp(law.rate * shifted), 0.0)
        return float(out) if out.ndim == 0 else out
    if law.dim == 1:
        x = np.asarray(x, dtype=float)
        out = scipy_stats.norm.pdf(x, loc=law.center[0], scale=law.sd)
        return float(out) if np.ndim(out) == 0 else out
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (law.dim,):
        raise DimensionMismatchError(f"expected points of dimension {law.dim}, got shape {x.shape}")
    return scipy_stats.multivariate_normal(law.center, law.covariance).pdf(x)


def _require_scalar_law(law: Law) -> None:
    if law.dim != 1:
        raise UnsupportedLawError("operation is defined for one-dimensional laws only")


def law_cdf(law: Law, x):
    _require_scalar_law(law)
    x = np.asarray(x, dtype=float)
    if isinstance(law, NegExpLaw):
        out = np.where(x < law.location,
                       np.exp(law.rate * np.minimum(x - law.location, 0.0)), 1.0)
    else:
        out = scipy_stats.norm.cdf(x, loc=law.center[0], scale=law.sd)
    return float(out) if np.ndim(out) == 0 else out


def law_quantile(law: Law, u):
    _require_scalar_law(law)
    u = np.asarray(u, dtype=float)
    if isinstance(law, NegExpLaw):
        with np.errstate(divide="ignore"):
            out = law.location + np.log(u) / law.rate
    else:
        out = scipy_stats.norm.ppf(u, loc=law.center[0], scale=law.sd)
    return float(out) if np.ndim(out) == 0 else out


def sample_law(law: Law, n: int, rng: np.random.Generator) -> SampleSet:
    """Draw n i.i.d. observations from a law."""
    if n < 1:
        raise ValueError("n must be at least 1")
    seed, key = describe_rng(rng)
    if isinstance(law, NegExpLaw):
        draws = law.location - rng.exponential(1.0 / law.rate, size=n)
        return SampleSet(draws.reshape(-1, 1), seed=seed, spawn_key=key)
    z = rng.standard_normal((n, law.dim))
    draws = law.center + z @ law.cholesky.T
    return SampleSet(draws, seed=seed, spawn_key=key)


def law_to_json(law: Law) -> Dict:
    if isinstance(law, NegExpLaw):
        return {"kind": "negexp", "location": law.location, "rate": law.rate}
    return {"kind": "gaussian", "center": law.center.tolist(),
            "cov": law.covariance.tolist()}


def law_from_json(payload: Union[str, Dict]) -> Law:
    if isinstance(payload, str):
        payload = json.loads(payload)
    kind = payload.get("kind")
    if kind == "negexp":
        return NegExpLaw(payload["location"], payload["rate"])
    if kind == "gaussian":
        return GaussianLaw(np.array(payload["center"]), np.array(payload["cov"]))
    raise ValueError(f"unknown law kind: {kind!r}")


# ---------------------------------------------------------------------------
# Working with grid densities
# ---------------------------------------------------------------------------

def density_cdf(density: GridDensity) -> np.ndarray:
    """Cumulative distribution at the grid points."""
    return integrate.cumulative_trapezoid(density.values, density.grid, initial=0.0)


def _cdf_at(density: GridDensity, cdf: np.ndarray, x) -> np.ndarray:
    grid, values = density.grid, density.values
    x = np.clip(np.asarray(x, dtype=float), grid[0], grid[-1])
    j = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, grid.size - 2)
    dx = grid[j + 1] - grid[j]
    t = x - grid[j]
    slope = (values[j + 1] - values[j]) / dx
    return cdf[j] + values[j] * t + 0.5 * slope * t * t


def density_cdf_at(density: GridDensity, x):
    out = _cdf_at(density, density_cdf(density), x)
    return float(out) if np.ndim(out) == 0 else out


def _quantile(density: GridDensity, cdf: np.ndarray, u) -> np.ndarray:
    # exact inverse of the piecewise-quadratic CDF
    grid, values = density.grid, density.values
    target = np.clip(np.asarray(u, dtype=float), 0.0, 1.0) * cdf[-1]
    j = np.clip(np.searchsorted(cdf, target, side="right") - 1, 0, grid.size - 2)
    dx = grid[j + 1] - grid[j]
    a = values[j]
    slope = (values[j + 1] - a) / dx
    r = np.maximum(target - cdf[j], 0.0)
    disc = np.sqrt(np.maximum(a * a + 2.0 * slope * r, 0.0))
    denom = a + disc
    t = np.divide(2.0 * r, denom, out=np.zeros_like(denom), where=denom > 0)
    return grid[j] + np.clip(t, 0.0, dx)


def density_quantile(density: GridDensity, u):
    out = _quantile(density, density_cdf(density), u)
    return float(out) if np.ndim(out) == 0 else out


def sample_grid_density(density: GridDensity, n: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Exact inverse-CDF draws from the piecewise-linear density."""
    return _quantile(density, density_cdf(density), rng.random(n))


def interval_mass(density: GridDensity, lo: float, hi: float) -> float:
    """Mass the density assigns to [lo, hi]."""
    if hi <= lo:
        return 0.0
    cdf = density_cdf(density)
    both = _cdf_at(density, cdf, np.array([lo, hi]))
    return float(np.clip(both[1] - both[0], 0.0, 1.0))


def density_mean(density: GridDensity) -> float:
    return float(integrate.trapezoid(density.grid * density.values, density.grid))


def density_sd(density: GridDensity) -> float:
    mean = density_mean(density)
    var = integrate.trapezoid((density.grid - mean) ** 2 * density.values, density.grid)
    return float(np.sqrt(max(var, 0.0)))


def histogram_density(values, bins="fd") -> GridDensity:
    """Histogram re-estimate (Freedman-Diaconis bins by default) as a GridDensity."""
    values = np.asarray(values, dtype=float).ravel()
    heights, edges = np.histogram(values, bins=bins, density=True)
    if heights.size < 2:
        heights, edges = np.histogram(values, bins=2, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return make_grid_density(centers, heights)


def grid_density_to_csv(density: GridDensity, path) -> None:
    frame = pd.DataFrame({"x": density.grid, "density": density.values})
    try:
        frame.to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"could not write grid density to {path}: {e}") from e


def grid_density_from_csv(path) -> GridDensity:
    frame = pd.read_csv(path)
    if list(frame.columns) != ["x", "density"]:
        raise ValueError(f"{path}: expected header x,density, got {list(frame.columns)}")
    return make_grid_density(frame["x"].to_numpy(), frame["density"].to_numpy())


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def _segment_ordinates(density: GridDensity, edges: np.ndarray):
    """Left and right ordinates of the density on each segment of edges."""
    left = np.interp(edges[:-1], density.grid, density.values)
    right = np.interp(edges[1:], density.grid, density.values)
    mid = 0.5 * (edges[:-1] + edges[1:])
    inside = (mid >= density.grid[0]) & (mid <= density.grid[-1])
    return np.where(inside, left, 0.0), np.where(inside, right, 0.0)


def tv_distance(p: GridDensity, q: GridDensity) -> float:
    """
    Total variation distance 1/2 * integral |p - q| on the union grid.

    Both densities are read as piecewise-linear interpolants with zero
    extension; the integral of |p - q| is exact for those interpolants,
    including segments where the difference changes sign.
    """
    edges = np.union1d(p.grid, q.grid)
    pl, pr = _segment_ordinates(p, edges)
    ql, qr = _segment_ordinates(q, edges)
    a, b = pl - ql, pr - qr
    dx = np.diff(edges)
    span = np.abs(a) + np.abs(b)
    crossing = a * b < 0
    area = np.where(
        crossing,
        np.divide(a * a + b * b, 2.0 * span, out=np.zeros_like(span), where=span > 0) * dx,
        0.5 * span * dx)
    return float(min(0.5 * np.sum(area), 1.0))


def hellinger_distance(p: GridDensity, q: GridDensity) -> float:
    """H(p, q) = (integral (sqrt p - sqrt q)^2)^(1/2), trapezoid rule on the union grid."""
    edges = np.union1d(p.grid, q.grid)
    pl, pr = _segment_ordinates(p, edges)
    ql, qr = _segment_ordinates(q, edges)
    dl = np.sqrt(pl) - np.sqrt(ql)
    dr = np.sqrt(pr) - np.sqrt(qr)
    h2 = np.sum(0.5 * (dl * dl + dr * dr) * np.diff(edges))
    return float(np.sqrt(min(h2, 2.0)))


def _extension(lo: float, hi: float, spacing: float, keep_lo: bool) -> np.ndarray:
    """Points spanning (lo, hi) at roughly the given spacing; one endpoint dropped."""
    width = hi - lo
    if not width > EXTENSION_TOLERANCE * max(spacing, abs(lo), abs(hi), 1.0):
        return np.empty(0)
    count = int(np.ceil(width / spacing)) if spacing > 0 else MIN_EXTENSION_POINTS
    count = int(np.clip(count, MIN_EXTENSION_POINTS, MAX_EXTENSION_POINTS))
    points = np.linspace(lo, hi, count + 1)
    return points[:-1] if keep_lo else points[1:]


def tabulate_law(law: Law, grid) -> Tuple[GridDensity, float]:
    """
    Tabulate a 1-D law on a grid extended to cover all but TAIL_MASS.

    Returns the tabulated GridDensity and the law mass left outside the table.
    A negative exponential table ends exactly at the law's location (unless the
    grid already ends within rounding of it) so the jump is not interpolated.
    """
    _require_scalar_law(law)
    grid = _as_grid(grid)
    spacing = float(np.median(np.diff(grid)))
    if isinstance(law, NegExpLaw):
        lo_law, hi_law = law_quantile(law, TAIL_MASS), law.location
        core = grid[grid < law.location]
        if core.size == 0:
            core = np.array([min(lo_law, law.location - spacing)])
    else:
        lo_law = law_quantile(law, 0.5 * TAIL_MASS)
        hi_law = law_quantile(law, 1.0 - 0.5 * TAIL_MASS)
        core = grid
    pieces = []
    if lo_law < core[0]:
        pieces.append(_extension(lo_law, core[0], spacing, keep_lo=True))
    pieces.append(core)
    if hi_law > core[-1]:
        pieces.append(_extension(core[-1], hi_law, spacing, keep_lo=False))
    table_grid = np.unique(np.concatenate(pieces))
    covered = law_cdf(law, table_grid[-1]) - law_cdf(law, table_grid[0])
    tail = max(1.0 - covered, 0.0)
    return make_grid_density(table_grid, law_density(law, table_grid)), tail


def tv_to_law(p: GridDensity, law: Law) -> float:
    """
    Total variation between a grid density and a one-dimensional law.

    The law's mass outside its table enters as an additive correction
    (p is zero there), so the result is exact up to quadrature error.

    Raises:
        UnsupportedLawError: multivariate law
    """
    table, tail = tabulate_law(law, p.grid)
    return float(min(tv_distance(p, table) + 0.5 * tail, 1.0))


def kolmogorov_distance(density: GridDensity, law: Law) -> float:
    """sup |F_p - F_law| evaluated at the grid points."""
    table_cdf = density_cdf(density)
    return float(np.max(np.abs(table_cdf - law_cdf(law, density.grid))))
