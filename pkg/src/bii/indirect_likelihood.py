"""Indirect likelihood estimators: the auxiliary likelihood evaluated at a
simulation-fitted estimate (full-data version) and the synthetic likelihood
(summary-statistic version with an analytic multivariate normal MLE).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .auxiliary import MleFailure
from .core import Dataset, Phi, RngState, Theta
from .generative import simulate_replicates

__all__ = [
    "PdBilEstimate",
    "SynthLikEstimate",
    "SingularCovariance",
    "pdbil_loglik",
    "psbil_loglik",
    "npdbil_identity_check",
]

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PdBilEstimate:
    """One draw of the estimated auxiliary log likelihood at theta."""

    loglik: float
    phi_hat: Phi | None
    n: int
    ok: bool


def pdbil_loglik(gen, aux, theta: Theta, y: Dataset, n: int, rng: RngState) -> PdBilEstimate:
    """Simulate n replicates at theta, fit one pooled auxiliary MLE and
    evaluate the auxiliary log likelihood of the observed data there.

    A failed fit is flagged (loglik = -inf) rather than raised, so MCMC can
    reject the proposal.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    reps = simulate_replicates(gen, theta, y.size, n, rng)
    try:
        phi_hat = aux.fit_mle(reps, rng)
    except MleFailure:
        return PdBilEstimate(loglik=-np.inf, phi_hat=None, n=n, ok=False)
    ll = aux.loglik(y, phi_hat)
    if not np.isfinite(ll):
        return PdBilEstimate(loglik=-np.inf, phi_hat=phi_hat, n=n, ok=False)
    return PdBilEstimate(loglik=float(ll), phi_hat=phi_hat, n=n, ok=True)


class SingularCovariance(RuntimeError):
    """Synthetic-likelihood covariance is numerically singular."""


@dataclass(frozen=True)
class SynthLikEstimate:
    """Gaussian synthetic likelihood of an observed summary statistic."""

    loglik: float
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def psbil_loglik(gen, summary, theta: Theta, s_y: np.ndarray, n: int, rng: RngState, N: int) -> SynthLikEstimate:
    """Synthetic likelihood: fit a multivariate normal to n simulated
    summaries (analytic MLE, 1/n covariance) and evaluate it at s_y.

    ``summary`` maps a Dataset to a summary vector; ``N`` is the size of
    each simulated dataset.
    """
    s_y = np.atleast_1d(np.asarray(s_y, dtype=float))
    d = s_y.size
    if n <= d + 1:
        raise ValueError(f"need n > dim(s) + 1 = {d + 1} replicates, got {n}")
    reps = simulate_replicates(gen, theta, N, n, rng)
    stats = np.array([np.atleast_1d(summary(r)) for r in reps.replicates], dtype=float)
    mu = stats.mean(axis=0)
    centered = stats - mu
    sigma = centered.T @ centered / n
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        eigvals, eigvecs = np.linalg.eigh(sigma)
        worst = eigvecs[:, 0]
        raise SingularCovariance(
            f"summary covariance singular along direction "
            f"{np.array2string(worst, precision=3)} (eigenvalue {eigvals[0]:.3e})"
        ) from exc
    z = np.linalg.solve(chol, s_y - mu)
    ll = -d * _HALF_LOG_2PI - np.sum(np.log(np.diag(chol))) - 0.5 * np.sum(z * z)
    return SynthLikEstimate(loglik=float(ll), mu=mu, sigma=sigma, n=n)


def npdbil_identity_check(
    outcomes: np.ndarray,
    pmf: np.ndarray,
    kernel,
    rho,
    y: float,
    n: int,
    n_mc: int,
    rng: RngState,
) -> tuple:
    """Check that the replicate-averaged kernel likelihood equals the
    single-draw ABC likelihood on a finite discrete model.

    Monte Carlo estimate of E[(1/n) sum_i K(rho(y, x_i))] over ``n_mc``
    replicate blocks versus the exact value sum_x p(x) K(rho(y, x)),
    which does not depend on n.  Returns (mc_estimate, exact, mc_se).
    """
    from .abc_ii import kernel_weight

    outcomes = np.asarray(outcomes, dtype=float)
    pmf = np.asarray(pmf, dtype=float)
    if not np.isclose(pmf.sum(), 1.0):
        raise ValueError("pmf must sum to 1")
    weights = np.array([kernel_weight(kernel, rho(y, x)) for x in outcomes])
    exact = float(np.sum(pmf * weights))

    gen = rng.generator
    draws = gen.choice(outcomes.size, size=(n_mc, n), p=pmf)
    block_means = weights[draws].mean(axis=1)
    mc = float(block_means.mean())
    se = float(block_means.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else np.inf
    return mc, exact, se
