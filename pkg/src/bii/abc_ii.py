"""Auxiliary-model ABC: parameter, likelihood and score discrepancies with
an indicator kernel.

The observed dataset is processed once into an :class:`ObservedSummary`
(auxiliary MLE, observed information and its factorizations); every MCMC
iteration then evaluates one cheap discrepancy against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .core import Dataset, Phi, RngState, Theta, prior_sample, scaled_score_norm

__all__ = [
    "KernelSpec",
    "ObservedSummary",
    "AssumptionViolation",
    "precompute_observed",
    "check_method_assumptions",
    "disc_ip",
    "disc_il",
    "disc_is",
    "kernel_weight",
    "calibrate_epsilon",
    "EpsilonCalibration",
    "ABC_METHODS",
]

ABC_METHODS = ("IP", "IL", "IS")


class AssumptionViolation(RuntimeError):
    """A structural requirement of the selected ABC method does not hold."""


@dataclass(frozen=True)
class KernelSpec:
    """Indicator kernel with tolerance epsilon (rho <= epsilon accepts)."""

    epsilon: float
    kind: str = "uniform"

    def __post_init__(self):
        if self.kind != "uniform":
            raise ValueError("only the uniform (indicator) kernel is supported")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def kernel_weight(kernel: KernelSpec, rho: float) -> float:
    """Indicator weight: 1.0 when rho <= epsilon (boundary inclusive)."""
    if rho < 0:
        raise ValueError("discrepancies must be nonnegative")
    return 1.0 if rho <= kernel.epsilon else 0.0


@dataclass(frozen=True)
class ObservedSummary:
    """One-time summary of the observed data under an auxiliary model."""

    phi_y: Phi
    j_y: np.ndarray
    j_y_inv: np.ndarray
    loglik_y: float
    chol_j: np.ndarray
    chol_j_inv: np.ndarray
    score_norm: float
    n_obs: int


def precompute_observed(aux, y: Dataset, rng: RngState | None = None) -> ObservedSummary:
    """Fit the auxiliary model to the observed data and factorize its
    observed information.

    Raises :class:`AssumptionViolation` when the information matrix is not
    positive definite at the MLE.
    """
    phi_y = aux.fit_mle(y, rng)
    loglik_y = aux.loglik(y, phi_y)
    if not np.isfinite(loglik_y):
        raise AssumptionViolation("auxiliary log likelihood not finite at the MLE")
    j_y = aux.obs_info(y, phi_y)
    j_y = 0.5 * (j_y + j_y.T)
    try:
        chol_j = cholesky(j_y, lower=True)
    except np.linalg.LinAlgError as exc:
        eigs = np.linalg.eigvalsh(j_y)
        raise AssumptionViolation(
            "observed information is not positive definite at the MLE "
            f"(eigenvalues {np.array2string(eigs, precision=3)})"
        ) from exc
    j_y_inv = cho_solve((chol_j, True), np.eye(j_y.shape[0]))
    j_y_inv = 0.5 * (j_y_inv + j_y_inv.T)
    chol_j_inv = cholesky(j_y_inv, lower=True)
    score_norm = scaled_score_norm(aux.score(y, phi_y), y.size)
    if score_norm > 1e-6:
        raise AssumptionViolation(
            f"observed-data MLE is not a stationary point (scaled score {score_norm:.2e})"
        )
    return ObservedSummary(
        phi_y=phi_y,
        j_y=j_y,
        j_y_inv=j_y_inv,
        loglik_y=float(loglik_y),
        chol_j=chol_j,
        chol_j_inv=chol_j_inv,
        score_norm=score_norm,
        n_obs=y.size,
    )


def check_method_assumptions(method: str, aux) -> None:
    """Reject method/auxiliary pairings whose uniqueness requirements fail."""
    method = method.upper()
    if method not in ABC_METHODS:
        raise ValueError(f"unknown ABC method {method!r}")
    if method == "IP" and not aux.mle_is_unique:
        raise AssumptionViolation(
            "parameter-distance ABC needs a unique auxiliary estimate: "
            "enable component canonicalization on the auxiliary model"
        )


def disc_ip(obs: ObservedSummary, phi_x: Phi) -> float:
    """Mahalanobis distance between auxiliary estimates, weighted by the
    observed information."""
    d = phi_x.values - obs.phi_y.values
    if d.size != obs.phi_y.values.size:
        raise ValueError("auxiliary parameter dimension mismatch")
    return float(np.sqrt(np.sum((obs.chol_j.T @ d) ** 2)))


def disc_il(obs: ObservedSummary, aux, y: Dataset, phi_x: Phi) -> float:
    """Drop in observed-data auxiliary log likelihood at the simulated
    estimate; infinite when that likelihood vanishes."""
    ll = aux.loglik(y, phi_x)
    if not np.isfinite(ll):
        return np.inf
    return obs.loglik_y - float(ll)


def disc_is(obs: ObservedSummary, aux, x: Dataset) -> float:
    """Norm of the simulated-data score at the observed MLE, weighted by the
    inverse observed information."""
    s = aux.score(x, obs.phi_y)
    return float(np.sqrt(np.sum((obs.chol_j_inv.T @ s) ** 2)))


def abc_summary_and_rho(method, obs, aux, y, x, rng=None):
    """Per-iteration summary vector and discrepancy for one simulated dataset.

    For IP and IL the summary is the fitted auxiliary estimate; for IS it is
    the score vector at the observed MLE.  Returns ``(summary, rho)``; a
    failed in-chain MLE yields an infinite discrepancy.
    """
    method = method.upper()
    if method == "IS":
        s = aux.score(x, obs.phi_y)
        rho = float(np.sqrt(np.sum((obs.chol_j_inv.T @ s) ** 2)))
        return s, rho
    from .auxiliary import MleFailure

    try:
        phi_x = aux.fit_mle(x, rng)
    except MleFailure:
        return np.full(obs.phi_y.values.size, np.nan), np.inf
    if method == "IP":
        return phi_x.values.copy(), disc_ip(obs, phi_x)
    if method == "IL":
        return phi_x.values.copy(), disc_il(obs, aux, y, phi_x)
    raise ValueError(f"unknown ABC method {method!r}")


@dataclass(frozen=True)
class EpsilonCalibration:
    """Result of a pilot tolerance run."""

    epsilon: float
    rhos: np.ndarray
    thetas: np.ndarray
    best_theta: Theta


def calibrate_epsilon(
    gen,
    aux,
    method: str,
    obs: ObservedSummary,
    y: Dataset,
    prior,
    rng: RngState,
    n_pilot: int = 1000,
    quantile: float = 0.01,
    n: int = 1,
) -> EpsilonCalibration:
    """Pilot-run tolerance calibration.

    Simulates ``n_pilot`` prior-predictive datasets and sets epsilon to the
    ``quantile`` level of their discrepancies, mirroring
    tolerance-tuned-to-acceptance-rate practice.  The pilot draw with the
    smallest discrepancy is reported as a chain starting point.
    """
    check_method_assumptions(method, aux)
    rhos = np.empty(n_pilot)
    thetas = np.empty((n_pilot, prior.dim))
    for i in range(n_pilot):
        theta = prior_sample(prior, rng)
        thetas[i] = theta.values
        if n == 1:
            x = gen.simulate(theta, y.size, rng)
        else:
            from .generative import simulate_replicates

            x = simulate_replicates(gen, theta, y.size, n, rng).pooled()
        _, rhos[i] = abc_summary_and_rho(method, obs, aux, y, x, rng)
    finite = np.isfinite(rhos)
    if not np.any(finite):
        raise RuntimeError("all pilot simulations produced infinite discrepancies")
    eps = float(np.quantile(rhos[finite], quantile))
    if eps <= 0:
        positive = rhos[finite & (rhos > 0)]
        eps = float(np.min(positive)) if positive.size else 1e-12
    best = int(np.nanargmin(np.where(finite, rhos, np.nan)))
    return EpsilonCalibration(
        epsilon=eps,
        rhos=rhos,
        thetas=thetas,
        best_theta=Theta(thetas[best], prior.names),
    )
