"""Random-walk Metropolis-Hastings engines for the ABC and indirect
likelihood targets, with chain diagnostics and CSV persistence.

Proposals are Gaussian random walks on optionally transformed coordinates
(log / logit), with the transform Jacobian folded into the prior ratio.
Recorded chains always run with a frozen proposal; adaptation is only
available through the pilot-tuning helpers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky

from .abc_ii import (
    KernelSpec,
    ObservedSummary,
    abc_summary_and_rho,
    check_method_assumptions,
    precompute_observed,
)
from .core import Dataset, Prior, RngState, Theta, prior_logpdf, prior_sample
from .generative import simulate_replicates

__all__ = [
    "ProposalSpec",
    "Chain",
    "run_mcmc_abc",
    "run_mcmc_pdbil",
    "run_mcmc_indirect",
    "ess",
    "acceptance_rate",
    "tune_proposal_abc",
    "tune_proposal_indirect",
    "write_chain_csv",
    "read_chain_csv",
]


# ---------------------------------------------------------------------------
# Coordinate transforms

_TINY = 1e-300


def _parse_transform(spec: str):
    if spec == "identity":
        return ("identity", None, None)
    if spec == "log":
        return ("log", None, None)
    if spec.startswith("logit"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError("logit transform must be written 'logit:lo:hi'")
        lo, hi = float(parts[1]), float(parts[2])
        if not lo < hi:
            raise ValueError("logit transform requires lo < hi")
        return ("logit", lo, hi)
    raise ValueError(f"unknown transform {spec!r}")


class _Transforms:
    """Per-coordinate maps between the parameter and proposal scales."""

    def __init__(self, specs):
        self.specs = tuple(specs)
        self.parsed = [_parse_transform(s) for s in self.specs]

    def forward(self, theta_values: np.ndarray) -> np.ndarray:
        u = np.empty_like(theta_values)
        for i, (kind, lo, hi) in enumerate(self.parsed):
            x = theta_values[i]
            if kind == "identity":
                u[i] = x
            elif kind == "log":
                if x <= 0:
                    raise ValueError("log transform requires positive values")
                u[i] = np.log(x)
            else:
                if not (lo < x < hi):
                    raise ValueError("logit transform requires lo < value < hi")
                z = (x - lo) / (hi - lo)
                u[i] = np.log(z) - np.log1p(-z)
        return u

    def inverse(self, u: np.ndarray) -> np.ndarray:
        x = np.empty_like(u)
        for i, (kind, lo, hi) in enumerate(self.parsed):
            if kind == "identity":
                x[i] = u[i]
            elif kind == "log":
                x[i] = np.exp(u[i])
            else:
                x[i] = lo + (hi - lo) / (1.0 + np.exp(-u[i]))
        return x

    def log_jacobian(self, theta_values: np.ndarray) -> float:
        total = 0.0
        for i, (kind, lo, hi) in enumerate(self.parsed):
            x = theta_values[i]
            if kind == "identity":
                continue
            if kind == "log":
                if x <= 0:
                    return -np.inf
                total += np.log(x)
            else:
                if not (lo < x < hi):
                    return -np.inf
                total += np.log(x - lo) + np.log(hi - x) - np.log(hi - lo)
        return total


@dataclass(frozen=True)
class ProposalSpec:
    """Gaussian random-walk proposal on the transformed scale."""

    cov: np.ndarray
    transforms: tuple = ()

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise ValueError("proposal covariance must be square")
        if np.max(np.abs(cov - cov.T)) > 1e-12 * max(1.0, np.max(np.abs(cov))):
            raise ValueError("proposal covariance must be symmetric")
        try:
            chol = cholesky(0.5 * (cov + cov.T), lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("proposal covariance must be positive definite") from exc
        transforms = tuple(self.transforms) if self.transforms else tuple(
            "identity" for _ in range(cov.shape[0])
        )
        if len(transforms) != cov.shape[0]:
            raise ValueError("one transform per coordinate required")
        _Transforms(transforms)  # validate
        cov.flags.writeable = False
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "transforms", transforms)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    @classmethod
    def diagonal(cls, scales, transforms=()) -> "ProposalSpec":
        scales = np.atleast_1d(np.asarray(scales, dtype=float))
        return cls(np.diag(scales**2), transforms)


@dataclass
class Chain:
    """Stored MCMC trace.

    Row 0 holds the configured initial state; rows 1..T are the iterations.
    ``aux`` carries the per-iteration cached auxiliary vector (fitted
    estimate, score vector, or fitted indirect-likelihood parameter) and
    ``stat`` the cached discrepancy or estimated log likelihood.
    """

    thetas: np.ndarray
    accepted: np.ndarray
    aux: np.ndarray
    stat: np.ndarray
    method: str
    seed: object = None
    theta_names: tuple = ()
    aux_names: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return self.thetas.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.thetas.shape[1]


def acceptance_rate(chain: Chain) -> float:
    """Fraction of iterations (excluding the initial state) that accepted."""
    if chain.iterations < 1:
        raise ValueError("chain has no iterations")
    return float(np.mean(chain.accepted[1:]))


def ess(chain, param_index: int | None = None) -> float:
    """Effective sample size from the initial monotone positive sequence of
    autocorrelation pair sums.

    Accepts a Chain plus parameter index, or a bare 1-d trace.
    """
    if isinstance(chain, Chain):
        if param_index is None:
            raise ValueError("param_index required when passing a Chain")
        x = chain.thetas[:, param_index]
    else:
        x = np.asarray(chain, dtype=float)
    t_len = x.size
    if t_len < 100:
        raise ValueError("need at least 100 samples for an ESS estimate")
    xc = x - x.mean()
    var = np.mean(xc * xc)
    if var == 0:
        warnings.warn("constant chain: ESS reported as 0", RuntimeWarning)
        return 0.0
    nfft = 1
    while nfft < 2 * t_len:
        nfft *= 2
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f))[:t_len].real / t_len
    rho = acov / acov[0]
    n_pairs = t_len // 2
    pair = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    positive = np.nonzero(pair <= 0)[0]
    cutoff = positive[0] if positive.size else n_pairs
    if cutoff == 0:
        return float(t_len)
    kept = np.minimum.accumulate(pair[:cutoff])
    tau = 2.0 * np.sum(kept) - 1.0
    tau = max(tau, 1.0 / (10.0 * t_len))
    return float(t_len / tau)


# ---------------------------------------------------------------------------
# Engine internals


class _Adapter:
    """Scale-and-shape proposal adaptation for pilot runs."""

    def __init__(self, chol, dim, target_accept):
        self.base_chol = chol.copy()
        self.dim = dim
        self.target = target_accept
        self.log_scale = 0.0
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, u, alpha, iteration):
        self.count += 1
        d = u - self.mean
        self.mean += d / self.count
        self.m2 += np.outer(d, u - self.mean)
        self.log_scale += 2.0 / max(20, iteration) ** 0.66 * (alpha - self.target)
        # keep the scale search bounded: chasing an unreachable acceptance
        # rate must not collapse or explode the proposal
        self.log_scale = float(np.clip(self.log_scale, -5.0, 5.0))
        if self.count >= 100 and self.count % 25 == 0:
            cov = self.m2 / (self.count - 1)
            cov = cov + 1e-12 * np.eye(self.dim)
            try:
                base = cholesky((2.38**2 / self.dim) * cov, lower=True)
                self.base_chol = base
            except np.linalg.LinAlgError:
                pass
        return np.exp(self.log_scale) * self.base_chol

    def final_cov(self):
        cov = self.m2 / max(1, self.count - 1) + 1e-12 * np.eye(self.dim)
        return (2.38**2 / self.dim) * cov


def _init_from_prior(prior, theta0, max_tries, try_state, rng):
    """Find an initial state whose pilot evaluation is usable.

    ``try_state(theta) -> state or None``; draws from the prior when theta0
    is not supplied.
    """
    for attempt in range(max_tries):
        theta = theta0 if theta0 is not None else prior_sample(prior, rng)
        state = try_state(theta)
        if state is not None:
            return state
        if theta0 is not None and attempt >= max_tries - 1:
            break
    raise RuntimeError(
        "could not find a supported initial state; widen the tolerance, "
        "check theta0, or increase init_max_tries"
    )


def _finish_chain(thetas, accepted, aux, stat, method, seed, theta_names, aux_names, meta):
    return Chain(
        thetas=thetas,
        accepted=accepted,
        aux=aux,
        stat=stat,
        method=method,
        seed=seed,
        theta_names=tuple(theta_names),
        aux_names=tuple(aux_names),
        meta=meta,
    )


def run_mcmc_abc(
    gen,
    aux,
    method: str,
    kernel: KernelSpec,
    prior: Prior,
    proposal: ProposalSpec,
    theta0: Theta | None,
    T: int,
    rng: RngState,
    *,
    y: Dataset,
    obs: ObservedSummary | None = None,
    n: int = 1,
    init_max_tries: int = 5000,
    stall_window: int | None = 20000,
    _adapt_target: float | None = None,
) -> Chain:
    """Metropolis-Hastings ABC with an indicator kernel.

    Standard use simulates one dataset per iteration (n=1).  Larger n pools
    n replicates into one simulated dataset; that deliberately reproduces
    the over-precision pathology of replicated ABC and is not a way to
    improve the approximation.
    """
    method = method.upper()
    check_method_assumptions(method, aux)
    if obs is None:
        obs = precompute_observed(aux, y, rng)
    tr = _Transforms(proposal.transforms or ("identity",) * prior.dim)
    gen_draw = rng.generator
    chol = proposal._chol
    adapter = (
        _Adapter(chol, proposal.dim, _adapt_target) if _adapt_target is not None else None
    )

    def simulate_one(theta):
        if n == 1:
            return gen.simulate(theta, y.size, rng)
        return simulate_replicates(gen, theta, y.size, n, rng).pooled()

    def try_state(theta):
        lp = prior_logpdf(prior, theta) + tr.log_jacobian(theta.values)
        if not np.isfinite(lp):
            return None
        x = simulate_one(theta)
        s, rho = abc_summary_and_rho(method, obs, aux, y, x, rng)
        if not np.isfinite(rho) or rho > kernel.epsilon:
            return None
        return theta, lp, s, rho

    cur_theta, cur_lp, cur_s, cur_rho = _init_from_prior(
        prior, theta0, init_max_tries, try_state, rng
    )
    cur_u = tr.forward(cur_theta.values)

    dim = prior.dim
    k = cur_s.size
    thetas = np.empty((T + 1, dim))
    accepted = np.zeros(T + 1, dtype=bool)
    aux_trace = np.empty((T + 1, k))
    stat = np.empty(T + 1)
    thetas[0] = cur_theta.values
    accepted[0] = True
    aux_trace[0] = cur_s
    stat[0] = cur_rho

    last_accept = 0
    for i in range(1, T + 1):
        alpha = 0.0
        u_star = cur_u + chol @ gen_draw.standard_normal(dim)
        theta_star_vals = tr.inverse(u_star)
        ok = np.all(np.isfinite(theta_star_vals))
        if ok:
            theta_star = Theta(theta_star_vals, prior.names)
            lp_star = prior_logpdf(prior, theta_star) + tr.log_jacobian(theta_star_vals)
            if np.isfinite(lp_star):
                x_star = simulate_one(theta_star)
                s_star, rho_star = abc_summary_and_rho(method, obs, aux, y, x_star, rng)
                if np.isfinite(rho_star) and rho_star <= kernel.epsilon:
                    alpha = min(1.0, np.exp(lp_star - cur_lp))
                    if gen_draw.random() < alpha:
                        cur_theta, cur_lp, cur_s, cur_rho = (
                            theta_star,
                            lp_star,
                            s_star,
                            rho_star,
                        )
                        cur_u = u_star
                        accepted[i] = True
                        last_accept = i
        thetas[i] = cur_theta.values
        aux_trace[i] = cur_s
        stat[i] = cur_rho
        if adapter is not None:
            chol = adapter.update(cur_u, alpha, i)
        if stall_window is not None and i - last_accept >= stall_window:
            raise RuntimeError(
                f"no acceptances in {stall_window} iterations: widen epsilon "
                "or shrink the proposal covariance"
            )

    meta = {"epsilon": kernel.epsilon, "n": n, "method": f"abc-{method.lower()}"}
    if adapter is not None:
        meta["adapted_cov"] = adapter.final_cov()
    aux_names = (
        tuple(f"score_{nm}" for nm in obs.phi_y.names)
        if method == "IS"
        else tuple(obs.phi_y.names)
    )
    return _finish_chain(
        thetas,
        accepted,
        aux_trace,
        stat,
        f"abc-{method.lower()}",
        rng.seed,
        prior.names,
        aux_names,
        meta,
    )


def run_mcmc_indirect(
    estimator,
    prior: Prior,
    proposal: ProposalSpec,
    theta0: Theta | None,
    T: int,
    rng: RngState,
    *,
    method: str = "indirect",
    aux_names: tuple = (),
    init_max_tries: int = 5000,
    stall_window: int | None = 20000,
    _adapt_target: float | None = None,
) -> Chain:
    """Metropolis-Hastings on a (possibly estimated) log likelihood.

    ``estimator(theta, rng) -> (loglik, aux_vector, ok)``.  The accepted
    estimate is cached and reused verbatim on rejection, never refreshed.
    """
    tr = _Transforms(proposal.transforms or ("identity",) * prior.dim)
    gen_draw = rng.generator
    chol = proposal._chol
    adapter = (
        _Adapter(chol, proposal.dim, _adapt_target) if _adapt_target is not None else None
    )
    failures = 0

    def try_state(theta):
        lp = prior_logpdf(prior, theta) + tr.log_jacobian(theta.values)
        if not np.isfinite(lp):
            return None
        ll, vec, ok = estimator(theta, rng)
        if not ok or not np.isfinite(ll):
            return None
        return theta, lp, ll, np.atleast_1d(np.asarray(vec, dtype=float))

    cur_theta, cur_lp, cur_ll, cur_vec = _init_from_prior(
        prior, theta0, init_max_tries, try_state, rng
    )
    cur_u = tr.forward(cur_theta.values)

    dim = prior.dim
    k = cur_vec.size
    thetas = np.empty((T + 1, dim))
    accepted = np.zeros(T + 1, dtype=bool)
    aux_trace = np.empty((T + 1, k))
    stat = np.empty(T + 1)
    thetas[0] = cur_theta.values
    accepted[0] = True
    aux_trace[0] = cur_vec
    stat[0] = cur_ll

    last_accept = 0
    for i in range(1, T + 1):
        alpha = 0.0
        u_star = cur_u + chol @ gen_draw.standard_normal(dim)
        theta_star_vals = tr.inverse(u_star)
        if np.all(np.isfinite(theta_star_vals)):
            theta_star = Theta(theta_star_vals, prior.names)
            lp_star = prior_logpdf(prior, theta_star) + tr.log_jacobian(theta_star_vals)
            if np.isfinite(lp_star):
                ll_star, vec_star, ok = estimator(theta_star, rng)
                if not ok:
                    failures += 1
                elif np.isfinite(ll_star):
                    alpha = min(1.0, np.exp(ll_star + lp_star - cur_ll - cur_lp))
                    if gen_draw.random() < alpha:
                        cur_theta, cur_lp, cur_ll = theta_star, lp_star, ll_star
                        cur_vec = np.atleast_1d(np.asarray(vec_star, dtype=float))
                        cur_u = u_star
                        accepted[i] = True
                        last_accept = i
        thetas[i] = cur_theta.values
        aux_trace[i] = cur_vec
        stat[i] = cur_ll
        if adapter is not None:
            chol = adapter.update(cur_u, alpha, i)
        if stall_window is not None and i - last_accept >= stall_window:
            raise RuntimeError(
                f"no acceptances in {stall_window} iterations: retune the proposal"
            )

    meta = {"mle_failures": failures, "method": method}
    if adapter is not None:
        meta["adapted_cov"] = adapter.final_cov()
    return _finish_chain(
        thetas,
        accepted,
        aux_trace,
        stat,
        method,
        rng.seed,
        prior.names,
        aux_names,
        meta,
    )


def run_mcmc_pdbil(
    gen,
    aux,
    prior: Prior,
    proposal: ProposalSpec,
    theta0: Theta | None,
    n: int,
    T: int,
    rng: RngState,
    *,
    y: Dataset,
    **kwargs,
) -> Chain:
    """MCMC on the replicate-estimated auxiliary likelihood of the full data."""
    from .indirect_likelihood import pdbil_loglik

    if n < 1:
        raise ValueError("n must be at least 1")

    def estimator(theta, rng_):
        est = pdbil_loglik(gen, aux, theta, y, n, rng_)
        vec = est.phi_hat.values if est.phi_hat is not None else np.full(aux.dim_phi, np.nan)
        return est.loglik, vec, est.ok

    chain = run_mcmc_indirect(
        estimator,
        prior,
        proposal,
        theta0,
        T,
        rng,
        method="pdbil",
        aux_names=tuple(aux.phi_names),
        **kwargs,
    )
    chain.meta["n"] = n
    return chain


# ---------------------------------------------------------------------------
# Pilot tuning


def tune_proposal_abc(
    gen, aux, method, kernel, prior, proposal0, theta0, T_pilot, rng, *, y,
    obs=None, n=1, target_accept=0.1,
) -> ProposalSpec:
    """Short adaptive run; returns a frozen proposal for the recorded chain."""
    chain = run_mcmc_abc(
        gen, aux, method, kernel, prior, proposal0, theta0, T_pilot, rng,
        y=y, obs=obs, n=n, stall_window=None, _adapt_target=target_accept,
    )
    return ProposalSpec(chain.meta["adapted_cov"], proposal0.transforms)


def tune_proposal_indirect(
    estimator, prior, proposal0, theta0, T_pilot, rng, *, target_accept=0.234,
) -> ProposalSpec:
    chain = run_mcmc_indirect(
        estimator, prior, proposal0, theta0, T_pilot, rng,
        stall_window=None, _adapt_target=target_accept,
    )
    return ProposalSpec(chain.meta["adapted_cov"], proposal0.transforms)


# ---------------------------------------------------------------------------
# Persistence


def write_chain_csv(chain: Chain, path) -> None:
    """Write the trace as iter,accepted,theta_*,aux_*,rho_or_loglik."""
    d = chain.dim
    k = chain.aux.shape[1]
    header = (
        ["iter", "accepted"]
        + [f"theta_{j + 1}" for j in range(d)]
        + [f"aux_{j + 1}" for j in range(k)]
        + ["rho_or_loglik"]
    )
    n_rows = chain.thetas.shape[0]
    body = np.column_stack(
        [
            np.arange(n_rows, dtype=float),
            chain.accepted.astype(float),
            chain.thetas,
            chain.aux,
            chain.stat,
        ]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, body, delimiter=",", fmt="%.17g")


def read_chain_csv(path) -> Chain:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    d = sum(1 for h in header if h.startswith("theta_"))
    k = sum(1 for h in header if h.startswith("aux_"))
    return Chain(
        thetas=body[:, 2 : 2 + d],
        accepted=body[:, 1].astype(bool),
        aux=body[:, 2 + d : 2 + d + k],
        stat=body[:, -1],
        method="unknown",
        theta_names=tuple(header[2 : 2 + d]),
        aux_names=tuple(header[2 + d : 2 + d + k]),
    )
