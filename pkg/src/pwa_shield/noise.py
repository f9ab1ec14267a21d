"""Noise models and the quantile machinery used to tighten facet constraints.

Quantiles follow the left-continuous convention
``q_delta(Z) = inf{t : P(Z <= t) >= delta}``.  The order-statistic bound uses
the ``gamma``-quantile of ``Binomial(n, delta)`` as the rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

# Monte Carlo inversion for non-Gaussian models along non-axis directions.
MC_QUANTILE_DRAWS = 2_000_000
MC_QUANTILE_SEED = 20240917


class NoiseError(ValueError):
    """Raised for invalid noise parameters or quantile requests."""


def _check_level(p: float, name: str = "level") -> float:
    p = float(p)
    if not 0.0 < p < 1.0:
        raise NoiseError(f"{name} must lie strictly inside (0, 1), got {p!r}")
    return p


def normal_inv_cdf(p: float) -> float:
    """Standard normal quantile."""
    return float(special.ndtri(_check_level(p, "p")))


def normal_cdf(z: float) -> float:
    return float(special.ndtr(z))


# -- binomial -------------------------------------------------------------


# lgamma(n + 1) - (n + 1/2) log(n) + n - log(2 pi)/2 for n = 1..15.
_STIRLING_ERR = (
    0.0, 0.08106146679532726, 0.0413406959554093, 0.02767792568499834,
    0.020790672103765093, 0.016644691189821193, 0.013876128823070748,
    0.01189670994589177, 0.010411265261972096, 0.009255462182712733,
    0.00833056343336287, 0.007573675487951841, 0.00694284010720953,
    0.006408994188004207, 0.0059513701127588475, 0.005554733551962801,
)
_LOG_2PI = math.log(2.0 * math.pi)


def _stirling_err(n: int) -> float:
    if n <= 15:
        return _STIRLING_ERR[n]
    nn = float(n) * n
    return (1 / 12 - (1 / 360 - (1 / 1260 - (1 / 1680 - 1 / (1188 * nn)) / nn) / nn) / nn) / n


def _bd0(x: float, m: float) -> float:
    """Deviance ``x log(x/m) + m - x`` without cancellation when ``x ~ m``."""
    if abs(x - m) < 0.1 * (x + m):
        v = (x - m) / (x + m)
        total = (x - m) * v
        ej = 2.0 * x * v
        v2 = v * v
        j = 1
        while True:
            ej *= v2
            nxt = total + ej / (2 * j + 1)
            if nxt == total:
                return nxt
            total = nxt
            j += 1
    return x * math.log(x / m) + m - x


def _log_binom_pmf(k: int, n: int, p: float) -> float:
    # Saddle-point form (Loader 2000); lgamma differences lose ~log10(n) digits.
    if k == 0:
        return n * math.log1p(-p)
    if k == n:
        return n * math.log(p)
    q = 1.0 - p
    lc = (_stirling_err(n) - _stirling_err(k) - _stirling_err(n - k)
          - _bd0(k, n * p) - _bd0(n - k, n * q))
    return lc - 0.5 * (_LOG_2PI + math.log(k) + math.log1p(-k / n))


def _check_binom(n: int, p: float) -> tuple[int, float]:
    if int(n) != n or n < 0:
        raise NoiseError(f"n must be a nonnegative integer, got {n!r}")
    return int(n), _check_level(p, "p")


def binom_cdf(k: int, n: int, p: float) -> float:
    """``P(X <= k)`` for ``X ~ Binomial(n, p)``.

    Terms are formed in log space and accumulated with exactly rounded
    summation (``math.fsum``); the complement is summed instead when it is
    the shorter tail.
    """
    n, p = _check_binom(n, p)
    if int(k) != k or not 0 <= k <= n:
        raise NoiseError(f"k must be an integer in [0, {n}], got {k!r}")
    k = int(k)
    if k == n:
        return 1.0
    mode = int((n + 1) * p)
    if k <= mode:
        terms = (math.exp(_log_binom_pmf(t, n, p)) for t in range(k + 1))
        return min(1.0, math.fsum(terms))
    terms = (math.exp(_log_binom_pmf(t, n, p)) for t in range(k + 1, n + 1))
    return max(0.0, 1.0 - math.fsum(terms))


def binom_inv_cdf(gamma: float, n: int, p: float) -> int:
    """Smallest ``k`` with ``binom_cdf(k, n, p) >= gamma``."""
    gamma = _check_level(gamma, "gamma")
    n, p = _check_binom(n, p)
    # Neumaier-compensated running sum of the pmf from k = 0 upwards.
    total = 0.0
    comp = 0.0
    for k in range(n + 1):
        term = math.exp(_log_binom_pmf(k, n, p))
        t = total + term
        if abs(total) >= abs(term):
            comp += (total - t) + term
        else:
            comp += (term - t) + total
        total = t
        if total + comp >= gamma:
            # Confirm with the exactly rounded cdf near the decision boundary.
            if abs(total + comp - gamma) < 1e-12 and binom_cdf(k, n, p) < gamma:
                continue
            return k
    return n


def min_samples(gamma: float, delta: float) -> float:
    """``log(gamma) / log(1 - delta)``; the sample size must exceed this."""
    gamma = _check_level(gamma, "gamma")
    delta = _check_level(delta, "delta")
    return math.log(gamma) / math.log1p(-delta)


def required_samples(gamma: float, delta: float) -> int:
    """Smallest integer strictly greater than ``min_samples(gamma, delta)``."""
    return math.floor(min_samples(gamma, delta)) + 1


def delta_from_epsilon(epsilon: float, horizon: int) -> float:
    """Largest per-step violation level giving an N-step exit bound of ``epsilon``."""
    epsilon = _check_level(epsilon, "epsilon")
    if int(horizon) != horizon or horizon < 1:
        raise NoiseError(f"horizon must be a positive integer, got {horizon!r}")
    # 1 - (1 - eps)^(1/N), written to avoid cancellation for small eps.
    return -math.expm1(math.log1p(-epsilon) / horizon)


# -- order statistics -----------------------------------------------------


def empirical_quantile_lb(sample, tau: int) -> float:
    """The ``tau``-th smallest entry of ``sample`` (1-based rank)."""
    sample = np.asarray(sample, dtype=float).reshape(-1)
    n = sample.shape[0]
    if int(tau) != tau or not 1 <= tau <= n:
        raise NoiseError(f"rank tau must be an integer in [1, {n}], got {tau!r}")
    return float(np.partition(sample, int(tau) - 1)[int(tau) - 1])


def order_statistics(samples: np.ndarray, taus) -> np.ndarray:
    """Column-wise order statistics: entry ``k`` is the ``taus[k]``-th smallest of column ``k``."""
    samples = np.asarray(samples, dtype=float)
    taus = np.asarray(taus, dtype=np.intp)
    out = np.empty(samples.shape[1])
    for rank in np.unique(taus):
        cols = np.flatnonzero(taus == rank)
        part = np.partition(samples[:, cols], rank - 1, axis=0)
        out[cols] = part[rank - 1]
    return out


# -- noise models ---------------------------------------------------------


def uniforms(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the open interval (0, 1), safe for inverse-CDF transforms."""
    return rng.random(shape) + 2.0**-54


def _as_direction(c, dim: int) -> np.ndarray:
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.shape[0] != dim:
        raise NoiseError(f"direction has length {c.shape[0]}, noise dimension is {dim}")
    return c


class NoiseModel:
    """Base class.  ``dim`` is the noise dimension."""

    dim: int

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.from_uniforms(uniforms(rng, (size, self.dim)))

    def from_uniforms(self, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def linear_quantile(self, c, delta: float, sharp_discrete: bool = False) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Gaussian(NoiseModel):
    mean: np.ndarray
    cov: np.ndarray
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float, ndmin=2)
        if cov.shape != (mean.size, mean.size):
            raise NoiseError(f"covariance shape {cov.shape} does not match mean {mean.shape}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise NoiseError("covariance must be symmetric")
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        if np.min(w) < -1e-10:
            raise NoiseError(f"covariance is not PSD (min eigenvalue {np.min(w):.3g})")
        w = np.clip(w, 0.0, None)
        if np.allclose(cov, np.diag(np.diag(cov)), rtol=0.0, atol=0.0):
            factor = np.diag(np.sqrt(np.clip(np.diag(cov), 0.0, None)))
        else:
            factor = V * np.sqrt(w)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_factor", factor)

    @property
    def dim(self) -> int:
        return self.mean.size

    def from_uniforms(self, U):
        Z = special.ndtri(U)
        return self.mean + Z @ self._factor.T

    def linear_quantile(self, c, delta, sharp_discrete=False):
        # Continuous law: the sharp variant coincides with the plain quantile.
        delta = _check_level(delta, "delta")
        c = _as_direction(c, self.dim)
        scale = math.sqrt(max(float(c @ self.cov @ c), 0.0))
        return float(c @ self.mean) + scale * normal_inv_cdf(delta)

    def linear_quantiles(self, Cd: np.ndarray, delta) -> np.ndarray:
        """Vectorised ``linear_quantile`` over the rows of ``Cd``."""
        Cd = np.asarray(Cd, dtype=float)
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (Cd.shape[0],))
        if np.any((delta <= 0) | (delta >= 1)):
            raise NoiseError("delta must lie strictly inside (0, 1)")
        scale = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", Cd, self.cov, Cd), 0.0, None))
        return Cd @ self.mean + scale * special.ndtri(delta)

    def __eq__(self, other):
        return (
            isinstance(other, Gaussian)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.cov, other.cov)
        )

    def to_dict(self):
        return {"type": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


class _DiagonalScaleModel(NoiseModel):
    """Independent coordinates ``loc_k + scale_k * X_k`` with a symmetric 1-D law."""

    kind = ""

    def _init(self, loc, scale):
        loc = np.array(loc, dtype=float).reshape(-1)
        scale = np.array(scale, dtype=float).reshape(-1)
        if loc.shape != scale.shape:
            raise NoiseError("loc and scale must have equal length")
        if np.any(scale < 0):
            raise NoiseError("scales must be nonnegative")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "_mc_cache", {})

    @property
    def dim(self) -> int:
        return self.loc.size

    def _std_ppf(self, u):
        raise NotImplementedError

    def from_uniforms(self, U):
        U = np.asarray(U, dtype=float)
        out = np.broadcast_to(self.loc, U.shape).copy()
        live = np.flatnonzero(self.scale > 0)  # degenerate coordinates need no inversion
        out[..., live] += self.scale[live] * self._std_ppf(U[..., live])
        return out

    def _mc_sample(self) -> np.ndarray:
        cache = self._mc_cache
        if "sample" not in cache:
            rng = np.random.default_rng(MC_QUANTILE_SEED)
            cache["sample"] = self.from_uniforms(uniforms(rng, (MC_QUANTILE_DRAWS, self.dim)))
        return cache["sample"]

    def linear_quantile(self, c, delta, sharp_discrete=False):
        delta = _check_level(delta, "delta")
        c = _as_direction(c, self.dim)
        active = np.flatnonzero((c != 0) & (self.scale > 0))
        shift = float(c @ self.loc)
        if active.size == 0:
            return shift
        if active.size == 1:
            k = active[0]
            # Symmetric law: the quantile of -s X equals that of s X.
            return shift + abs(c[k]) * self.scale[k] * float(self._std_ppf(delta))
        # No closed form; invert the empirical CDF of a fixed large sample.
        z = self._mc_sample() @ c
        n = z.size
        if sharp_discrete:
            rank = math.ceil((1.0 - delta) * n)
            return -float(np.partition(-z, rank - 1)[rank - 1])
        rank = max(1, math.ceil(delta * n))
        return float(np.partition(z, rank - 1)[rank - 1])

    def __eq__(self, other):
        return (
            type(other) is type(self)
            and np.array_equal(self.loc, other.loc)
            and np.array_equal(self.scale, other.scale)
            and getattr(self, "dof", None) == getattr(other, "dof", None)
        )

    def to_dict(self):
        return {"type": self.kind, "loc": self.loc.tolist(), "scale": self.scale.tolist()}


@dataclass(frozen=True, eq=False)
class Laplace(_DiagonalScaleModel):
    loc: np.ndarray
    scale: np.ndarray
    kind = "laplace"

    def __post_init__(self):
        self._init(self.loc, self.scale)

    def _std_ppf(self, u):
        return stats.laplace.ppf(u)

    __eq__ = _DiagonalScaleModel.__eq__


@dataclass(frozen=True, eq=False)
class StudentT(_DiagonalScaleModel):
    loc: np.ndarray
    scale: np.ndarray
    dof: float
    kind = "student_t"

    def __post_init__(self):
        if not self.dof > 0:
            raise NoiseError(f"degrees of freedom must be positive, got {self.dof!r}")
        object.__setattr__(self, "dof", float(self.dof))
        self._init(self.loc, self.scale)

    def _std_ppf(self, u):
        return stats.t.ppf(u, self.dof)

    __eq__ = _DiagonalScaleModel.__eq__

    def to_dict(self):
        return {**super().to_dict(), "dof": self.dof}


@dataclass(frozen=True, eq=False)
class Empirical(NoiseModel):
    """A fixed dataset of i.i.d. noise draws, one per row."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=float, ndmin=2)
        if data.ndim != 2 or data.shape[0] < 1:
            raise NoiseError("an empirical model needs at least one sample row")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def linear_quantile(self, c, delta, sharp_discrete=False):
        raise NoiseError(
            "empirical models have no exact quantile; use empirical_quantile_lb "
            "on build_sample(...) with a binomial rank"
        )

    def from_uniforms(self, U):
        # Resampling from the dataset; only used for bootstrap-style simulation.
        idx = np.minimum((U[:, 0] * self.n).astype(np.intp), self.n - 1)
        return self.data[idx]

    def __eq__(self, other):
        return isinstance(other, Empirical) and np.array_equal(self.data, other.data)

    def to_dict(self):
        return {"type": "empirical", "data": self.data.tolist()}


def linear_quantile(model: NoiseModel, c, x=None, delta: float = 0.5, noise_map=None,
                    sharp_discrete: bool = False) -> float:
    """``delta``-quantile of ``c . g(x, xi)`` for a linear noise map ``g(x, xi) = G(x) xi``.

    ``noise_map`` is a callable returning ``G(x)``; ``None`` means additive noise.
    """
    direction = np.asarray(c, dtype=float)
    if noise_map is not None:
        direction = np.asarray(noise_map(x), dtype=float).T @ direction
    return model.linear_quantile(direction, delta, sharp_discrete=sharp_discrete)


def build_sample(model: Empirical, c, x=None, noise_map=None) -> np.ndarray:
    """``(c . g(x, xi_t))_t`` in dataset order."""
    if not isinstance(model, Empirical):
        raise NoiseError("build_sample needs an Empirical model")
    c = np.asarray(c, dtype=float).reshape(-1)
    if noise_map is None:
        if c.shape[0] != model.dim:
            raise NoiseError(f"direction has length {c.shape[0]}, data has {model.dim} columns")
        return model.data @ c
    G = np.asarray(noise_map(x), dtype=float)
    if G.shape != (c.shape[0], model.dim):
        raise NoiseError(f"noise map has shape {G.shape}, expected ({c.shape[0]}, {model.dim})")
    return model.data @ (G.T @ c)


def noise_from_dict(d: dict, base_dir: Path | None = None) -> NoiseModel:
    kind = d.get("type")
    if kind == "gaussian":
        return Gaussian(d["mean"], d["cov"])
    if kind == "laplace":
        return Laplace(d["loc"], d["scale"])
    if kind == "student_t":
        return StudentT(d["loc"], d["scale"], d["dof"])
    if kind == "empirical":
        if "data" in d:
            return Empirical(d["data"])
        path = Path(d["csv"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return load_dataset(path, header=d.get("header", False))
    raise NoiseError(f"unknown noise model type {kind!r}")


def load_dataset(path, header: bool = False) -> Empirical:
    """Read a headerless CSV of noise samples (one row per draw)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2)
    return Empirical(data)
