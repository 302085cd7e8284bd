"""Generative models: Poisson draws, g-and-k quantile distribution and a
trivariate Markov jump process for macroparasite maturation, together with
the exact/numerical oracles used to validate them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import expm_multiply

from .core import Dataset, Prior, ReplicateSet, RngState, Theta, normal_quantile

__all__ = [
    "PoissonModel",
    "GandKModel",
    "MacroparasiteModel",
    "gk_quantile",
    "gk_logpdf",
    "simulate_replicates",
    "poisson_exact_posterior",
    "poisson_pdbil_limit",
    "GridDensity",
    "mjp_oracle_dist",
    "MjpEndpointDistribution",
]

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Poisson toy model


@dataclass(frozen=True)
class PoissonModel:
    """i.i.d. Poisson counts with mean theta = (lambda,)."""

    theta_names = ("lambda",)
    dim_theta = 1

    def validate_theta(self, theta: Theta) -> bool:
        return theta.values[0] > 0

    def simulate(self, theta: Theta, N: int, rng: RngState) -> Dataset:
        if N <= 0:
            raise ValueError("N must be positive")
        lam = float(theta.values[0])
        if lam <= 0:
            raise ValueError("Poisson mean must be positive")
        return Dataset(rng.generator.poisson(lam, N).astype(float))


# ---------------------------------------------------------------------------
# g-and-k quantile distribution


def _gk_q_of_z(z, a, b, c, g, k):
    """Quantile transform of a standard normal value z."""
    return a + b * (1.0 + c * np.tanh(0.5 * g * z)) * (1.0 + z * z) ** k * z


def _gk_dq_dz(z, b, c, g, k):
    """Derivative of the quantile transform with respect to z."""
    t = np.tanh(0.5 * g * z)
    s = 1.0 + z * z
    term1 = c * 0.5 * g * (1.0 - t * t) * s**k * z
    term2 = (1.0 + c * t) * s ** (k - 1.0) * (1.0 + (2.0 * k + 1.0) * z * z)
    return b * (term1 + term2)


def _unpack_gk_theta(theta) -> tuple:
    vals = theta.values if isinstance(theta, Theta) else np.asarray(theta, dtype=float)
    if vals.size != 5:
        raise ValueError("g-and-k quantile evaluation expects theta = (a, b, c, g, k)")
    return tuple(float(v) for v in vals)


def gk_quantile(p, theta) -> float:
    """g-and-k quantile function at probability p for theta = (a, b, c, g, k)."""
    a, b, c, g, k = _unpack_gk_theta(theta)
    if b <= 0:
        raise ValueError("g-and-k scale b must be positive")
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError("p must lie strictly inside (0, 1)")
    q = _gk_q_of_z(normal_quantile(p_arr), a, b, c, g, k)
    return float(q) if p_arr.ndim == 0 else q


def gk_logpdf(x: float, theta, z_lo: float = -10.0, z_hi: float = 10.0) -> float:
    """Numerical g-and-k log density (oracle, not used in inference).

    Inverts the quantile transform by bisection on z followed by Newton
    polishing, then applies the change-of-variables density
    phi(z*) / Q'(z*).
    """
    a, b, c, g, k = _unpack_gk_theta(theta)
    if b <= 0 or k <= -0.5:
        raise ValueError("g-and-k density requires b > 0 and k > -0.5")
    lo, hi = z_lo, z_hi
    f_lo = _gk_q_of_z(lo, a, b, c, g, k) - x
    f_hi = _gk_q_of_z(hi, a, b, c, g, k) - x
    if f_lo > 0 or f_hi < 0:
        raise ValueError(f"x={x} outside numeric support: root not bracketed")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _gk_q_of_z(mid, a, b, c, g, k) - x <= 0:
            lo = mid
        else:
            hi = mid
    z = 0.5 * (lo + hi)
    for _ in range(4):
        step = (_gk_q_of_z(z, a, b, c, g, k) - x) / _gk_dq_dz(z, b, c, g, k)
        z_new = z - step
        if z_lo <= z_new <= z_hi:
            z = z_new
        if abs(step) < 1e-14:
            break
    return float(-0.5 * z * z - _HALF_LOG_2PI - np.log(_gk_dq_dz(z, b, c, g, k)))


@dataclass(frozen=True)
class GandKModel:
    """g-and-k distribution with the asymmetry constant c held fixed.

    Free parameters are theta = (a, b, g, k); simulation is by inversion of
    uniform draws through the quantile transform.
    """

    c: float = 0.8

    theta_names = ("a", "b", "g", "k")
    dim_theta = 4

    def validate_theta(self, theta: Theta) -> bool:
        a, b, g, k = theta.values
        return b > 0 and k > -0.5

    def full_theta(self, theta: Theta) -> np.ndarray:
        a, b, g, k = theta.values
        return np.array([a, b, self.c, g, k])

    def simulate(self, theta: Theta, N: int, rng: RngState) -> Dataset:
        if N <= 0:
            raise ValueError("N must be positive")
        if not self.validate_theta(theta):
            raise ValueError("g-and-k requires b > 0 and k > -0.5")
        a, b, g, k = (float(v) for v in theta.values)
        u = rng.generator.random(N)
        np.clip(u, 1e-300, None, out=u)
        z = normal_quantile(u)
        return Dataset(_gk_q_of_z(z, a, b, self.c, g, k))


# ---------------------------------------------------------------------------
# Macroparasite maturation Markov jump process
#
# State (M, L, I): mature count, larvae count, immunity level.  Five events:
#   maturation        L -> M      rate gamma * L
#   larval death      L -> out    rate (mu_l + beta * I) * L
#   mature death      M -> out    rate mu_m * M
#   immunity gain     I -> I + 1  rate nu * L
#   immunity loss     I -> I - 1  rate mu_i * I
#
# Simulation is exact event-driven sampling: exponential waiting time with
# the total rate, categorical event choice proportional to the rates.  The
# same code runs compiled under numba when available and as plain Python
# otherwise; both consume the identical uniform stream.


def _make_sim_design():
    def sim_design(gen, ls, ts, nu, mu_i, mu_l, beta, gamma, mu_m):
        out = np.empty(ls.shape[0], dtype=np.int64)
        for h in range(ls.shape[0]):
            m = 0
            j = int(ls[h])
            k = 0
            t = 0.0
            t_end = ts[h]
            while True:
                r_mat = gamma * j
                r_ldeath = (mu_l + beta * k) * j
                r_mdeath = mu_m * m
                r_igain = nu * j
                r_iloss = mu_i * k
                tot = r_mat + r_ldeath + r_mdeath + r_igain + r_iloss
                if tot <= 0.0:
                    break
                dt = -np.log1p(-gen.random()) / tot
                if t + dt > t_end:
                    break
                t += dt
                u = gen.random() * tot
                if u < r_mat:
                    m += 1
                    j -= 1
                elif u < r_mat + r_ldeath:
                    j -= 1
                elif u < r_mat + r_ldeath + r_mdeath:
                    m -= 1
                elif u < r_mat + r_ldeath + r_mdeath + r_igain:
                    k += 1
                else:
                    k -= 1
            out[h] = m
        return out

    return sim_design


_sim_design_py = _make_sim_design()

try:  # pragma: no cover - exercised indirectly
    import numba

    _sim_design_fast = numba.njit(cache=False)(_make_sim_design())
    NUMBA_AVAILABLE = True
except Exception:  # pragma: no cover
    _sim_design_fast = _sim_design_py
    NUMBA_AVAILABLE = False


@dataclass(frozen=True)
class MacroparasiteModel:
    """Markov jump process for parasite maturation across a host design.

    ``design`` holds one (initial larvae l, sacrifice time t) row per host;
    each simulated observation is the mature count M(t) of one host started
    from (M, L, I) = (0, l, 0).  theta = (nu, mu_i, mu_l, beta).
    """

    design: np.ndarray
    gamma: float = 0.04
    mu_m: float = 0.0015

    theta_names = ("nu", "mu_i", "mu_l", "beta")
    dim_theta = 4

    def __post_init__(self):
        design = np.asarray(self.design, dtype=float)
        if design.ndim != 2 or design.shape[1] != 2:
            raise ValueError("design must be an (H, 2) array of (l, t) rows")
        l, t = design[:, 0], design[:, 1]
        if np.any(l < 0) or np.any(l != np.round(l)):
            raise ValueError("initial larvae counts must be nonnegative integers")
        if np.any(t <= 0):
            raise ValueError("sacrifice times must be positive")
        if self.gamma < 0 or self.mu_m < 0:
            raise ValueError("rates must be nonnegative")
        design.flags.writeable = False
        object.__setattr__(self, "design", design)

    @property
    def n_hosts(self) -> int:
        return self.design.shape[0]

    def validate_theta(self, theta: Theta) -> bool:
        return bool(np.all(theta.values >= 0))

    def simulate(self, theta: Theta, N: int, rng: RngState) -> Dataset:
        if N != self.n_hosts:
            raise ValueError(
                f"N must equal the design size ({self.n_hosts}), got {N}"
            )
        if not self.validate_theta(theta):
            raise ValueError("macroparasite rates must be nonnegative")
        nu, mu_i, mu_l, beta = (float(v) for v in theta.values)
        m = _sim_design_fast(
            rng.generator,
            self.design[:, 0],
            self.design[:, 1],
            nu,
            mu_i,
            mu_l,
            beta,
            self.gamma,
            self.mu_m,
        )
        out = np.column_stack([m.astype(float), self.design[:, 0], self.design[:, 1]])
        return Dataset(out)

    def simulate_trajectory(self, theta: Theta, l: int, t_end: float, rng: RngState):
        """Full event history of one host; used by validation tests only.

        Returns (times, states) where states is an (n_events + 1, 3) array of
        (M, L, I) values, starting from (0, l, 0).
        """
        nu, mu_i, mu_l, beta = (float(v) for v in theta.values)
        gen = rng.generator
        m, j, k = 0, int(l), 0
        t = 0.0
        times = [0.0]
        states = [(m, j, k)]
        while True:
            rates = np.array(
                [
                    self.gamma * j,
                    (mu_l + beta * k) * j,
                    self.mu_m * m,
                    nu * j,
                    mu_i * k,
                ]
            )
            tot = rates.sum()
            if tot <= 0:
                break
            dt = -np.log1p(-gen.random()) / tot
            if t + dt > t_end:
                break
            t += dt
            u = gen.random() * tot
            event = int(np.searchsorted(np.cumsum(rates), u, side="right"))
            if event == 0:
                m, j = m + 1, j - 1
            elif event == 1:
                j -= 1
            elif event == 2:
                m -= 1
            elif event == 3:
                k += 1
            else:
                k -= 1
            times.append(t)
            states.append((m, j, k))
        return np.array(times), np.array(states, dtype=int)


def simulate_replicates(model, theta: Theta, N: int, n: int, rng: RngState) -> ReplicateSet:
    """Simulate n independent datasets of size N, one spawned stream each."""
    if n < 1:
        raise ValueError("n must be at least 1")
    children = rng.spawn(n)
    return ReplicateSet(tuple(model.simulate(theta, N, c) for c in children))


# ---------------------------------------------------------------------------
# Oracles


def poisson_exact_posterior(prior: Prior, y: Dataset) -> Prior:
    """Conjugate gamma posterior for i.i.d. Poisson data."""
    if prior.kind != "gamma" or prior.dim != 1:
        raise ValueError("exact Poisson posterior requires a scalar gamma prior")
    if y.is_records:
        raise ValueError("Poisson data must be scalar observations")
    return Prior.gamma(
        prior.a + float(np.sum(y.values)), prior.b + y.size, prior.names
    )


@dataclass(frozen=True)
class GridDensity:
    """Normalized univariate density tabulated on a grid."""

    x: np.ndarray
    pdf: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        pdf = np.asarray(self.pdf, dtype=float)
        z = np.trapezoid(pdf, x)
        if not np.isfinite(z) or z <= 0:
            raise ValueError("density does not normalize on the given grid")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "pdf", pdf / z)

    def mean(self) -> float:
        return float(np.trapezoid(self.x * self.pdf, self.x))

    def sd(self) -> float:
        mu = self.mean()
        var = float(np.trapezoid((self.x - mu) ** 2 * self.pdf, self.x))
        return float(np.sqrt(var))


def poisson_pdbil_limit(
    alpha: float, beta: float, y: Dataset, tau0: float | None = None, gridsize: int = 40001
) -> GridDensity:
    """Large-replicate limiting posterior of the Poisson toy under a normal
    auxiliary likelihood, by quadrature on a dense grid.

    With a free-variance normal auxiliary the limiting log density is
      (alpha - N/2 - 1) log(lam) - (beta + N/2) lam - sum(y^2) / (2 lam);
    with the variance fixed at tau0 it is
      (alpha - 1) log(lam) - (beta - sum(y)/tau0) lam - N lam^2 / (2 tau0).
    """
    if y.is_records:
        raise ValueError("Poisson data must be scalar observations")
    n_obs = y.size
    s1 = float(np.sum(y.values))
    s2 = float(np.sum(y.values**2))

    if tau0 is None:

        def logpdf(lam):
            return (
                (alpha - n_obs / 2.0 - 1.0) * np.log(lam)
                - (beta + n_obs / 2.0) * lam
                - s2 / (2.0 * lam)
            )

    else:
        if tau0 <= 0:
            raise ValueError("tau0 must be positive")

        def logpdf(lam):
            return (
                (alpha - 1.0) * np.log(lam)
                - (beta - s1 / tau0) * lam
                - 0.5 * n_obs * lam * lam / tau0
            )

    # Locate the mode on a coarse scan, then tabulate on a window wide enough
    # to hold all practically relevant mass.
    coarse = np.linspace(1e-6, max(4.0 * s1 / max(n_obs, 1), 10.0), 20001)
    lp = logpdf(coarse)
    mode = coarse[np.argmax(lp)]
    # Laplace width from a small central difference at the mode.
    h = max(1e-5, 1e-6 * mode)
    d2 = (logpdf(mode + h) - 2.0 * logpdf(mode) + logpdf(mode - h)) / (h * h)
    width = 1.0 / np.sqrt(max(-d2, 1e-12))
    lo = max(1e-9, mode - 15.0 * width)
    hi = mode + 15.0 * width
    x = np.linspace(lo, hi, gridsize)
    lx = logpdf(x)
    return GridDensity(x, np.exp(lx - np.max(lx)))


@dataclass(frozen=True)
class MjpEndpointDistribution:
    """Marginal law of the mature count M(t) plus truncation diagnostics."""

    m: np.ndarray
    prob: np.ndarray
    leaked: float

    def total_variation(self, other_prob: np.ndarray) -> float:
        p = np.zeros(max(self.prob.size, len(other_prob)))
        q = np.zeros_like(p)
        p[: self.prob.size] = self.prob
        q[: len(other_prob)] = other_prob
        return 0.5 * float(np.sum(np.abs(p - q)))


def mjp_oracle_dist(
    model: MacroparasiteModel,
    theta: Theta,
    l: int,
    t: float,
    cap: int,
    leak_tol: float = 1e-6,
    start: tuple | None = None,
) -> MjpEndpointDistribution:
    """Exact marginal of M(t) by matrix exponential of the truncated generator.

    The state space is {(M, L, I): M + L <= l, 0 <= I <= cap}; immunity
    transitions beyond the cap are routed to an absorbing sink whose final
    mass is reported as ``leaked``.  Raises if the leak exceeds ``leak_tol``.
    ``start`` defaults to (0, l, 0).
    """
    if l < 0 or cap < 0:
        raise ValueError("l and cap must be nonnegative")
    nu, mu_i, mu_l, beta = (float(v) for v in theta.values)
    gamma, mu_m = model.gamma, model.mu_m

    states = [
        (m, j, k)
        for m in range(l + 1)
        for j in range(l + 1 - m)
        for k in range(cap + 1)
    ]
    index = {s: i for i, s in enumerate(states)}
    n_states = len(states)
    if n_states > 200_000:
        raise ValueError("truncated state space too large; reduce l or cap")
    sink = n_states

    rows, cols, vals = [], [], []

    def add(i, jdx, rate):
        rows.append(i)
        cols.append(jdx)
        vals.append(rate)

    for i, (m, j, k) in enumerate(states):
        moves = [
            (gamma * j, (m + 1, j - 1, k)),
            ((mu_l + beta * k) * j, (m, j - 1, k)),
            (mu_m * m, (m - 1, j, k)),
            (nu * j, (m, j, k + 1)),
            (mu_i * k, (m, j, k - 1)),
        ]
        out_rate = 0.0
        for rate, target in moves:
            if rate <= 0:
                continue
            out_rate += rate
            add(i, index.get(target, sink), rate)
        if out_rate > 0:
            add(i, i, -out_rate)

    q_mat = sparse.csr_matrix(
        (vals, (rows, cols)), shape=(n_states + 1, n_states + 1)
    )
    start = (0, l, 0) if start is None else tuple(int(v) for v in start)
    if start not in index:
        raise ValueError(f"start state {start} outside the truncated space")
    p0 = np.zeros(n_states + 1)
    p0[index[start]] = 1.0
    pt = expm_multiply(q_mat.T * t, p0)
    pt = np.clip(pt, 0.0, None)

    leaked = float(pt[sink])
    if leaked > leak_tol:
        raise ValueError(
            f"immunity cap {cap} too small: {leaked:.3e} probability mass "
            f"lost to truncation (tolerance {leak_tol:.1e})"
        )
    prob = np.zeros(l + 1)
    for i, (m, _, _) in enumerate(states):
        prob[m] += pt[i]
    return MjpEndpointDistribution(np.arange(l + 1), prob, leaked)
