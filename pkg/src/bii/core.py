"""Shared value types, priors and the random-stream contract.

Everything stochastic in this package draws from an explicit :class:`RngState`;
replaying a seed reproduces every downstream result bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "Theta",
    "Phi",
    "Dataset",
    "ReplicateSet",
    "RngState",
    "Prior",
    "prior_logpdf",
    "prior_sample",
    "normal_quantile",
    "scaled_score_norm",
]


def _as_vector(values) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1:
        raise ValueError("parameter values must be one-dimensional")
    return arr


@dataclass(frozen=True)
class _ParamVector:
    """Immutable named vector of real parameters."""

    values: np.ndarray
    names: tuple = ()

    _prefix = "x"

    def __post_init__(self):
        arr = _as_vector(self.values)
        if arr.size < 1:
            raise ValueError("parameter vector must have length >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter vector must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        names = tuple(self.names) if self.names else tuple(
            f"{self._prefix}_{i + 1}" for i in range(arr.size)
        )
        if len(names) != arr.size:
            raise ValueError("names must match the number of values")
        object.__setattr__(self, "names", names)

    @property
    def dim(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, i):
        return self.values[i]


class Theta(_ParamVector):
    """Parameter of a generative model."""

    _prefix = "theta"


class Phi(_ParamVector):
    """Parameter of an auxiliary model."""

    _prefix = "phi"


@dataclass(frozen=True)
class Dataset:
    """Observed or simulated data.

    ``values`` is either a 1-d array of scalar observations or an ``(N, 3)``
    array of ``(m, l, t)`` records (event count, initial count, duration).
    """

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim not in (1, 2):
            raise ValueError("dataset must be a 1-d or 2-d array")
        if arr.shape[0] < 1:
            raise ValueError("dataset must contain at least one observation")
        if not np.all(np.isfinite(arr)):
            raise ValueError("dataset entries must be finite")
        if arr.ndim == 2:
            if arr.shape[1] != 3:
                raise ValueError("record datasets must have columns (m, l, t)")
            m, l, t = arr[:, 0], arr[:, 1], arr[:, 2]
            if np.any(m < 0) or np.any(m > l):
                raise ValueError("records must satisfy 0 <= m <= l")
            if np.any(t <= 0):
                raise ValueError("records must satisfy t > 0")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def is_records(self) -> bool:
        return self.values.ndim == 2


@dataclass(frozen=True)
class ReplicateSet:
    """n independent simulated datasets of identical size and schema."""

    replicates: tuple

    def __post_init__(self):
        reps = tuple(self.replicates)
        if len(reps) < 1:
            raise ValueError("need at least one replicate")
        shape = reps[0].values.shape
        for r in reps:
            if not isinstance(r, Dataset):
                raise TypeError("replicates must be Dataset instances")
            if r.values.shape != shape:
                raise ValueError("replicates must share size and schema")
        object.__setattr__(self, "replicates", reps)

    @property
    def n(self) -> int:
        return len(self.replicates)

    @property
    def size(self) -> int:
        return self.replicates[0].size

    def pooled(self) -> Dataset:
        """Concatenation of all replicates into one dataset of size n*N."""
        return Dataset(np.concatenate([r.values for r in self.replicates]))


class RngState:
    """Seeded random stream with spawnable independent substreams.

    Wraps a PCG64 generator keyed by a ``SeedSequence``.  ``spawn`` yields
    statistically independent child streams whose output depends only on the
    root seed and the spawn tree, so replicate-level parallelism cannot
    change results.  Instances are mutable (draws advance the stream) and
    must not be shared across concurrent workers.
    """

    __slots__ = ("seed", "_seedseq", "generator")

    def __init__(self, seed=None, _seedseq=None):
        if _seedseq is None:
            _seedseq = np.random.SeedSequence(seed)
        self.seed = seed
        self._seedseq = _seedseq
        self.generator = np.random.Generator(np.random.PCG64(_seedseq))

    def spawn(self, n: int) -> list:
        """Split off ``n`` independent child streams."""
        return [RngState(seed=self.seed, _seedseq=ss) for ss in self._seedseq.spawn(n)]

    def __repr__(self):
        return f"RngState(seed={self.seed!r})"


@dataclass(frozen=True)
class Prior:
    """Independent per-coordinate prior, either uniform or gamma.

    For ``kind == "uniform"`` the per-coordinate parameters are (lo, hi);
    for ``kind == "gamma"`` they are (shape, rate).
    """

    kind: str
    a: np.ndarray
    b: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "gamma"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        a = _as_vector(self.a)
        b = _as_vector(self.b)
        if a.size != b.size:
            raise ValueError("prior parameter vectors must have equal length")
        if self.kind == "uniform" and np.any(a >= b):
            raise ValueError("uniform prior requires lo < hi")
        if self.kind == "gamma" and (np.any(a <= 0) or np.any(b <= 0)):
            raise ValueError("gamma prior requires shape > 0 and rate > 0")
        for arr in (a, b):
            arr.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        names = tuple(self.names) if self.names else tuple(
            f"theta_{i + 1}" for i in range(a.size)
        )
        if len(names) != a.size:
            raise ValueError("names must match prior dimension")
        object.__setattr__(self, "names", names)

    @classmethod
    def uniform(cls, lo, hi, names=()) -> "Prior":
        return cls("uniform", lo, hi, names)

    @classmethod
    def gamma(cls, shape, rate, names=()) -> "Prior":
        return cls("gamma", shape, rate, names)

    @property
    def dim(self) -> int:
        return self.a.size

    def mean(self) -> np.ndarray:
        if self.kind == "uniform":
            return 0.5 * (self.a + self.b)
        return self.a / self.b

    def sd(self) -> np.ndarray:
        if self.kind == "uniform":
            return (self.b - self.a) / np.sqrt(12.0)
        return np.sqrt(self.a) / self.b


def prior_logpdf(prior: Prior, theta: Theta) -> float:
    """Exact log prior density; -inf outside the support."""
    x = theta.values if isinstance(theta, _ParamVector) else _as_vector(theta)
    if x.size != prior.dim:
        raise ValueError(
            f"theta has dimension {x.size}, prior expects {prior.dim}"
        )
    if prior.kind == "uniform":
        if np.any(x < prior.a) or np.any(x > prior.b):
            return -np.inf
        return float(-np.sum(np.log(prior.b - prior.a)))
    if np.any(x <= 0):
        return -np.inf
    return float(
        np.sum(
            prior.a * np.log(prior.b)
            + (prior.a - 1.0) * np.log(x)
            - prior.b * x
            - gammaln(prior.a)
        )
    )


def prior_sample(prior: Prior, rng: RngState) -> Theta:
    """One draw from the prior, guaranteed inside the support."""
    gen = rng.generator
    for _ in range(100):
        if prior.kind == "uniform":
            x = prior.a + (prior.b - prior.a) * gen.random(prior.dim)
        else:
            x = gen.gamma(shape=prior.a, scale=1.0 / prior.b)
        if np.isfinite(prior_logpdf(prior, Theta(x, prior.names))):
            return Theta(x, prior.names)
    raise RuntimeError("prior_sample failed to produce a draw inside the support")


def scaled_score_norm(score: np.ndarray, n_obs: int) -> float:
    """Per-observation infinity norm, the scale used for MLE score checks."""
    return float(np.max(np.abs(score)) / max(1, n_obs))


# Rational approximation to the standard normal inverse CDF (long-standing
# published minimax coefficients; absolute error well below 1e-9 across the
# open unit interval).

_NQ_A = (
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
)
_NQ_B = (
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
)
_NQ_C = (
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
)
_NQ_D = (
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_NQ_E = (
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
)
_NQ_F = (
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _poly(coeffs, r):
    acc = np.full_like(r, coeffs[-1])
    for c in coeffs[-2::-1]:
        acc = acc * r + c
    return acc


def normal_quantile(p):
    """Standard normal quantile by rational approximation.

    Accepts a scalar or array of probabilities in the open interval (0, 1).
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    q = p_arr - 0.5
    out = np.empty_like(p_arr)

    central = np.abs(q) <= 0.425
    if np.any(central):
        r = 0.180625 - q[central] * q[central]
        out[central] = q[central] * _poly(_NQ_A, r) / _poly(_NQ_B, r)

    tail = ~central
    if np.any(tail):
        pt = np.minimum(p_arr[tail], 1.0 - p_arr[tail])
        r = np.sqrt(-np.log(pt))
        near = r <= 5.0
        z = np.empty_like(r)
        if np.any(near):
            rn = r[near] - 1.6
            z[near] = _poly(_NQ_C, rn) / _poly(_NQ_D, rn)
        if np.any(~near):
            rf = r[~near] - 5.0
            z[~near] = _poly(_NQ_E, rf) / _poly(_NQ_F, rf)
        out[tail] = np.where(q[tail] < 0, -z, z)

    if p_arr.ndim == 0:
        return float(out)
    return out
