"""Local-linear regression adjustment of accepted ABC samples and posterior
summarization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import gaussian_kde

__all__ = [
    "AdjustmentSpec",
    "regression_adjust",
    "chain_adjustment_inputs",
    "posterior_summary",
]

_FORWARD = {
    "identity": lambda x: x,
    "log": np.log,
    "neg-log": lambda x: -np.log(x),
    "sqrt": np.sqrt,
}
_BACKWARD = {
    "identity": lambda z: z,
    "log": np.exp,
    "neg-log": lambda z: np.exp(-z),
    "sqrt": lambda z: z * z,
}


@dataclass(frozen=True)
class AdjustmentSpec:
    """Settings for the weighted local-linear adjustment.

    Per-parameter transforms are applied before regressing and inverted
    afterwards.  Weights are Epanechnikov in rho / delta; ``delta = None``
    uses the largest recorded discrepancy.  ``thin`` keeps every k-th row.
    """

    transforms: tuple = ()
    delta: float | None = None
    thin: int = 1

    def __post_init__(self):
        for t in self.transforms:
            if t not in _FORWARD:
                raise ValueError(f"unknown parameter transform {t!r}")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


def chain_adjustment_inputs(chain, thin: int = 1):
    """Extract (thetas, summaries, rhos) rows from a recorded ABC chain."""
    sel = slice(None, None, thin)
    return chain.thetas[sel], chain.aux[sel], chain.stat[sel]


def regression_adjust(
    thetas: np.ndarray,
    summaries: np.ndarray,
    rhos: np.ndarray,
    s_obs: np.ndarray,
    spec: AdjustmentSpec | None = None,
) -> np.ndarray:
    """Weighted local-linear correction of samples toward the observed
    summary.

    Fits theta_i = m + (s_i - s_obs)' b + e_i per (transformed) parameter
    with Epanechnikov weights on the discrepancies and returns
    theta_i - (s_i - s_obs)' b_hat, back-transformed.
    """
    spec = spec or AdjustmentSpec()
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    summaries = np.atleast_2d(np.asarray(summaries, dtype=float))
    rhos = np.asarray(rhos, dtype=float)
    s_obs = np.atleast_1d(np.asarray(s_obs, dtype=float))
    if spec.thin > 1:
        thetas = thetas[:: spec.thin]
        summaries = summaries[:: spec.thin]
        rhos = rhos[:: spec.thin]
    n_samp, dim = thetas.shape
    n_summ = summaries.shape[1]
    if summaries.shape[0] != n_samp or rhos.size != n_samp:
        raise ValueError("thetas, summaries and rhos must align")
    if s_obs.size != n_summ:
        raise ValueError("s_obs must match the summary dimension")
    if not np.all(np.isfinite(summaries)):
        raise ValueError("summaries must be finite")
    if n_samp < n_summ + 1:
        raise ValueError(
            f"need at least dim(s) + 1 = {n_summ + 1} samples, got {n_samp}"
        )
    transforms = spec.transforms or ("identity",) * dim
    if len(transforms) != dim:
        raise ValueError("one transform per parameter required")

    delta = spec.delta if spec.delta is not None else float(np.max(rhos))
    if delta <= 0:
        delta = 1.0
    w = 1.0 - (rhos / delta) ** 2
    w = np.where(rhos <= delta, np.maximum(w, 0.0), 0.0)
    if not np.any(w > 0):
        # all discrepancies equal: adjustment weights are uninformative
        w = np.ones(n_samp)

    centered = summaries - s_obs
    design = np.column_stack([np.ones(n_samp), centered])
    sw = np.sqrt(w)
    dw = design * sw[:, None]

    # all-zero regressors (summaries equal to the observed one) contribute
    # nothing and are not worth a collinearity warning
    informative = 1 + int(np.sum(np.any(centered != 0.0, axis=0)))
    rank = np.linalg.matrix_rank(dw)
    if rank < informative:
        warnings.warn(
            "collinear summary directions in the adjustment design; "
            "dropping deficient directions via a least-squares pseudoinverse",
            RuntimeWarning,
        )

    out = np.empty_like(thetas)
    for j in range(dim):
        z = _FORWARD[transforms[j]](thetas[:, j])
        if not np.all(np.isfinite(z)):
            raise ValueError(
                f"transform {transforms[j]!r} undefined for parameter {j + 1} samples"
            )
        coef, *_ = np.linalg.lstsq(dw, z * sw, rcond=None)
        adjusted = z - centered @ coef[1:]
        out[:, j] = _BACKWARD[transforms[j]](adjusted)
    return out


def posterior_summary(samples, names=(), grid_points: int = 256) -> dict:
    """Per-parameter mean, SD, central quantiles and a kernel density grid.

    The density uses a Gaussian kernel with Silverman's bandwidth; constant
    samples get a degenerate summary with an empty density grid.
    """
    arr = np.atleast_2d(np.asarray(samples, dtype=float))
    if arr.shape[0] == 1 and arr.shape[1] > 1 and not names:
        pass  # a single row is one sample per column
    n_samp, dim = arr.shape
    if n_samp < 10:
        raise ValueError("need at least 10 samples to summarize")
    names = tuple(names) if names else tuple(f"theta_{j + 1}" for j in range(dim))
    if len(names) != dim:
        raise ValueError("names must match sample dimension")
    out = {}
    for j, name in enumerate(names):
        x = arr[:, j]
        q025, q50, q975 = np.quantile(x, [0.025, 0.5, 0.975])
        entry = {
            "mean": float(np.mean(x)),
            "sd": float(np.std(x)),
            "q2.5": float(q025),
            "q50": float(q50),
            "q97.5": float(q975),
        }
        if np.std(x) > 0:
            kde = gaussian_kde(x, bw_method="silverman")
            lo = x.min() - 3.0 * kde.factor * x.std()
            hi = x.max() + 3.0 * kde.factor * x.std()
            grid = np.linspace(lo, hi, grid_points)
            entry["density"] = (grid, kde(grid))
        else:
            entry["density"] = (np.array([x[0]]), np.array([np.inf]))
        out[name] = entry
    return out
