"""Auxiliary models: tractable likelihoods used to summarize or replace the
generative likelihood.

Each model implements the same contract: ``loglik``, ``fit_mle``, ``score``
and ``obs_info`` (negative Hessian of the log likelihood).  Scores and
information matrices are analytic for all four models so that score-based
discrepancies need no numerical differentiation.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma, gammaln, polygamma

from .core import Dataset, Phi, ReplicateSet, RngState, scaled_score_norm

__all__ = [
    "AuxiliaryModel",
    "NormalAux",
    "FixedVarNormalAux",
    "GaussianMixtureAux",
    "BetaBinomialRegressionAux",
    "MleFailure",
]

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class MleFailure(RuntimeError):
    """Raised when an auxiliary maximum-likelihood fit cannot be completed."""


def _pool(data) -> Dataset:
    if isinstance(data, ReplicateSet):
        return data.pooled()
    return data


def _scalar_values(data: Dataset) -> np.ndarray:
    if data.is_records:
        raise ValueError("this auxiliary model expects scalar observations")
    return data.values


class AuxiliaryModel:
    """Contract shared by all auxiliary models."""

    phi_names: tuple = ()
    #: whether fit_mle returns a unique value for any dataset (required by
    #: parameter-distance discrepancies)
    mle_is_unique: bool = True

    @property
    def dim_phi(self) -> int:
        return len(self.phi_names)

    def phi_valid(self, phi: Phi) -> bool:
        raise NotImplementedError

    def loglik(self, data: Dataset, phi: Phi) -> float:
        raise NotImplementedError

    def fit_mle(self, data, rng: RngState | None = None) -> Phi:
        raise NotImplementedError

    def score(self, data: Dataset, phi: Phi) -> np.ndarray:
        raise NotImplementedError

    def obs_info(self, data: Dataset, phi: Phi) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Normal auxiliary


class NormalAux(AuxiliaryModel):
    """Normal model with free mean and variance, phi = (mu, tau)."""

    phi_names = ("mu", "tau")

    def phi_valid(self, phi: Phi) -> bool:
        return phi.values[1] > 0

    def loglik(self, data: Dataset, phi: Phi) -> float:
        y = _scalar_values(_pool(data))
        mu, tau = phi.values
        if tau <= 0:
            return -np.inf
        return float(
            -y.size * (_HALF_LOG_2PI + 0.5 * np.log(tau))
            - 0.5 * np.sum((y - mu) ** 2) / tau
        )

    def fit_mle(self, data, rng: RngState | None = None) -> Phi:
        y = _scalar_values(_pool(data))
        mu = float(np.mean(y))
        tau = float(np.mean((y - mu) ** 2))
        if tau <= 0:
            raise MleFailure("degenerate sample: zero variance")
        return Phi([mu, tau], self.phi_names)

    def score(self, data: Dataset, phi: Phi) -> np.ndarray:
        y = _scalar_values(_pool(data))
        mu, tau = phi.values
        if tau <= 0:
            raise ValueError("tau must be positive")
        d = y - mu
        return np.array(
            [np.sum(d) / tau, -0.5 * y.size / tau + 0.5 * np.sum(d * d) / tau**2]
        )

    def obs_info(self, data: Dataset, phi: Phi) -> np.ndarray:
        y = _scalar_values(_pool(data))
        mu, tau = phi.values
        if tau <= 0:
            raise ValueError("tau must be positive")
        d = y - mu
        n = y.size
        j_mm = n / tau
        j_mt = np.sum(d) / tau**2
        j_tt = -0.5 * n / tau**2 + np.sum(d * d) / tau**3
        return np.array([[j_mm, j_mt], [j_mt, j_tt]])


class FixedVarNormalAux(AuxiliaryModel):
    """Normal model with fixed variance tau0, phi = (mu,)."""

    phi_names = ("mu",)

    def __init__(self, tau0: float):
        if tau0 <= 0:
            raise ValueError("tau0 must be positive")
        self.tau0 = float(tau0)

    def phi_valid(self, phi: Phi) -> bool:
        return True

    def loglik(self, data: Dataset, phi: Phi) -> float:
        y = _scalar_values(_pool(data))
        mu = phi.values[0]
        return float(
            -y.size * (_HALF_LOG_2PI + 0.5 * np.log(self.tau0))
            - 0.5 * np.sum((y - mu) ** 2) / self.tau0
        )

    def fit_mle(self, data, rng: RngState | None = None) -> Phi:
        y = _scalar_values(_pool(data))
        return Phi([float(np.mean(y))], self.phi_names)

    def score(self, data: Dataset, phi: Phi) -> np.ndarray:
        y = _scalar_values(_pool(data))
        return np.array([np.sum(y - phi.values[0]) / self.tau0])

    def obs_info(self, data: Dataset, phi: Phi) -> np.ndarray:
        y = _scalar_values(_pool(data))
        return np.array([[y.size / self.tau0]])


# ---------------------------------------------------------------------------
# Gaussian mixture auxiliary


class GaussianMixtureAux(AuxiliaryModel):
    """K-component univariate normal mixture fitted by EM.

    phi = (w_1..w_{K-1}, mean_1..mean_K, var_1..var_K) with the last weight
    implied.  Fitted parameters are canonicalized by ordering components on
    ascending means, which makes the reported MLE unique up to genuine ties.
    """

    def __init__(
        self,
        n_components: int = 3,
        restarts: int = 10,
        max_iter: int = 500,
        tol: float = 1e-8,
        var_floor_frac: float = 1e-8,
        canonicalize: bool = True,
    ):
        if n_components < 1:
            raise ValueError("need at least one component")
        self.n_components = n_components
        self.restarts = restarts
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor_frac = var_floor_frac
        self.canonicalize = canonicalize
        k = n_components
        self.phi_names = tuple(
            [f"w_{i + 1}" for i in range(k - 1)]
            + [f"mean_{i + 1}" for i in range(k)]
            + [f"var_{i + 1}" for i in range(k)]
        )

    @property
    def mle_is_unique(self) -> bool:
        # Without mean-ordering the likelihood is invariant to relabelling,
        # so the fitted parameter vector is not unique.
        return self.canonicalize or self.n_components == 1

    def _unpack(self, phi: Phi):
        k = self.n_components
        v = phi.values
        if v.size != 3 * k - 1:
            raise ValueError(f"phi must have length {3 * k - 1}")
        w = np.empty(k)
        w[: k - 1] = v[: k - 1]
        w[k - 1] = 1.0 - np.sum(v[: k - 1])
        means = v[k - 1 : 2 * k - 1]
        variances = v[2 * k - 1 :]
        return w, means, variances

    def _pack(self, w, means, variances) -> Phi:
        return Phi(
            np.concatenate([w[:-1], means, variances]), self.phi_names
        )

    def phi_valid(self, phi: Phi) -> bool:
        # all K weights positive (they sum to 1, so each is also < 1 for K > 1)
        w, _, variances = self._unpack(phi)
        return bool(np.all(w > 0) and np.all(variances > 0))

    def canonical(self, phi: Phi) -> Phi:
        """Reorder components by ascending mean."""
        w, means, variances = self._unpack(phi)
        order = np.argsort(means, kind="stable")
        return self._pack(w[order], means[order], variances[order])

    def _log_components(self, y, means, variances):
        # (N, K) matrix of per-component log densities
        d = y[:, None] - means[None, :]
        return -_HALF_LOG_2PI - 0.5 * np.log(variances)[None, :] - 0.5 * d * d / variances[None, :]

    def loglik(self, data: Dataset, phi: Phi) -> float:
        y = _scalar_values(_pool(data))
        w, means, variances = self._unpack(phi)
        if not self.phi_valid(phi):
            return -np.inf
        lc = self._log_components(y, means, variances) + np.log(w)[None, :]
        m = np.max(lc, axis=1)
        return float(np.sum(m + np.log(np.sum(np.exp(lc - m[:, None]), axis=1))))

    # -- EM fitting

    def _kmeanspp_init(self, y, gen):
        k = self.n_components
        centers = [y[gen.integers(y.size)]]
        for _ in range(k - 1):
            d2 = np.min((y[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
            tot = d2.sum()
            if tot <= 0:
                centers.append(y[gen.integers(y.size)])
                continue
            centers.append(y[np.searchsorted(np.cumsum(d2 / tot), gen.random())])
        means = np.array(sorted(centers))
        var0 = np.var(y) / k
        return np.full(k, 1.0 / k), means, np.full(k, max(var0, 1e-12))

    def _em_once(self, y, w, means, variances, var_floor):
        prev = -np.inf
        for _ in range(self.max_iter):
            lc = self._log_components(y, means, variances) + np.log(w)[None, :]
            m = np.max(lc, axis=1)
            log_f = m + np.log(np.sum(np.exp(lc - m[:, None]), axis=1))
            ll = float(np.sum(log_f))
            if ll < prev - 1e-8:
                raise MleFailure("EM log likelihood decreased")
            if ll - prev < self.tol:
                return w, means, variances, ll
            prev = ll
            r = np.exp(lc - log_f[:, None])
            nk = r.sum(axis=0)
            if np.any(nk <= 0):
                return None
            w = nk / y.size
            means = (r * y[:, None]).sum(axis=0) / nk
            variances = (r * (y[:, None] - means[None, :]) ** 2).sum(axis=0) / nk
            if np.any(variances < var_floor):
                return None
        return w, means, variances, prev

    def _newton_polish(self, data, phi, max_steps=20):
        """Damped Newton steps on the analytic score to tighten the optimum."""
        best = phi
        best_ll = self.loglik(data, phi)
        cur = phi
        for _ in range(max_steps):
            s = self.score(data, cur)
            if np.max(np.abs(s)) < 1e-12 * max(1, _pool(data).size):
                break
            try:
                step = np.linalg.solve(self.obs_info(data, cur), s)
            except np.linalg.LinAlgError:
                break
            scale = 1.0
            improved = False
            for _ in range(8):
                cand_vals = cur.values + scale * step
                cand = Phi(cand_vals, self.phi_names) if np.all(
                    np.isfinite(cand_vals)
                ) else None
                if cand is not None and self.phi_valid(cand):
                    ll = self.loglik(data, cand)
                    if ll >= best_ll - 1e-12:
                        cur = cand
                        if ll > best_ll:
                            best, best_ll = cand, ll
                        improved = True
                        break
                scale *= 0.5
            if not improved:
                break
        return best

    def fit_mle(self, data, rng: RngState | None = None) -> Phi:
        y = _scalar_values(_pool(data))
        if rng is None:
            rng = RngState(0)
        gen = rng.generator
        k = self.n_components
        if y.size < k:
            raise MleFailure("fewer observations than mixture components")
        if k == 1:
            mu = float(np.mean(y))
            tau = float(np.mean((y - mu) ** 2))
            return Phi([mu, tau], self.phi_names)
        var_floor = self.var_floor_frac * max(np.var(y), 1e-30)
        best = None
        best_ll = -np.inf
        attempts = 0
        for _ in range(max(1, self.restarts)):
            w, means, variances = self._kmeanspp_init(y, gen)
            out = self._em_once(y, w, means, variances, var_floor)
            attempts += 1
            if out is None:
                continue
            w, means, variances, ll = out
            if ll > best_ll:
                best_ll = ll
                best = (w, means, variances)
        if best is None:
            raise MleFailure(
                f"EM failed in all {attempts} restarts (degenerate components)"
            )
        phi = self._pack(*best)
        phi = self._newton_polish(data, phi)
        if self.canonicalize:
            phi = self.canonical(phi)
        return phi

    # -- analytic derivatives
    #
    # Everything is expressed through the responsibilities
    # r_ik = w_k f_ik / f_i, computed in log space, so the derivatives stay
    # finite even when every component density underflows at some points.

    def _prep(self, data, phi):
        y = _scalar_values(_pool(data))
        if not self.phi_valid(phi):
            raise ValueError("phi outside the valid region")
        w, means, variances = self._unpack(phi)
        lc = self._log_components(y, means, variances) + np.log(w)[None, :]
        m = np.max(lc, axis=1)
        log_f = m + np.log(np.sum(np.exp(lc - m[:, None]), axis=1))
        resp = np.exp(lc - log_f[:, None])  # (N, K), rows sum to 1
        return y, w, means, variances, resp

    def score(self, data: Dataset, phi: Phi) -> np.ndarray:
        y, w, means, variances, resp = self._prep(data, phi)
        k = self.n_components
        a_mat = (y[:, None] - means[None, :]) / variances[None, :]
        b_mat = ((y[:, None] - means[None, :]) ** 2 - variances[None, :]) / (
            2.0 * variances[None, :] ** 2
        )
        g_w = resp[:, : k - 1] / w[: k - 1] - resp[:, [k - 1]] / w[k - 1]
        g_m = resp * a_mat
        g_v = resp * b_mat
        return np.concatenate([g_w.sum(axis=0), g_m.sum(axis=0), g_v.sum(axis=0)])

    def obs_info(self, data: Dataset, phi: Phi) -> np.ndarray:
        y, w, means, variances, resp = self._prep(data, phi)
        k = self.n_components
        n = y.size
        dim = 3 * k - 1
        d = y[:, None] - means[None, :]
        a_mat = d / variances[None, :]
        b_mat = (d * d - variances[None, :]) / (2.0 * variances[None, :] ** 2)

        # per-observation gradient of log f wrt phi, (N, dim)
        grad_f = np.empty((n, dim))
        grad_f[:, : k - 1] = resp[:, : k - 1] / w[: k - 1] - resp[:, [k - 1]] / w[k - 1]
        grad_f[:, k - 1 : 2 * k - 1] = resp * a_mat
        grad_f[:, 2 * k - 1 :] = resp * b_mat

        hess = -grad_f.T @ grad_f

        # second-derivative contributions of f / f itself
        d2_mm = resp * (a_mat * a_mat - 1.0 / variances[None, :])
        d2_mv = resp * (a_mat * b_mat - a_mat / variances[None, :])
        d2_vv = resp * (
            b_mat * b_mat - d * d / variances[None, :] ** 3 + 0.5 / variances[None, :] ** 2
        )
        # d2f/dw_j dm_k terms: nonzero for k == j and for k == K
        d2_wm = resp / w[None, :] * a_mat  # (N, K) = f_ik A_ik / f_i
        d2_wv = resp / w[None, :] * b_mat

        i_m = k - 1
        i_v = 2 * k - 1
        for kk in range(k):
            hess[i_m + kk, i_m + kk] += d2_mm[:, kk].sum()
            hess[i_m + kk, i_v + kk] += d2_mv[:, kk].sum()
            hess[i_v + kk, i_m + kk] += d2_mv[:, kk].sum()
            hess[i_v + kk, i_v + kk] += d2_vv[:, kk].sum()
        for jj in range(k - 1):
            hess[jj, i_m + jj] += d2_wm[:, jj].sum()
            hess[i_m + jj, jj] += d2_wm[:, jj].sum()
            hess[jj, i_v + jj] += d2_wv[:, jj].sum()
            hess[i_v + jj, jj] += d2_wv[:, jj].sum()
            hess[jj, i_m + k - 1] -= d2_wm[:, k - 1].sum()
            hess[i_m + k - 1, jj] -= d2_wm[:, k - 1].sum()
            hess[jj, i_v + k - 1] -= d2_wv[:, k - 1].sum()
            hess[i_v + k - 1, jj] -= d2_wv[:, k - 1].sum()
        return -hess


# ---------------------------------------------------------------------------
# Beta-binomial regression auxiliary


class BetaBinomialRegressionAux(AuxiliaryModel):
    """Beta-binomial regression for (m, l, t) records.

    The success proportion follows a quadratic in the centered log time
    through a logit link; the overdispersion is a two-level step in the
    initial count l (threshold 100) through a log link.
    phi = (b0, b1, b2, eta_low, eta_high).
    """

    phi_names = ("b0", "b1", "b2", "eta_low", "eta_high")
    l_threshold = 100.0

    def phi_valid(self, phi: Phi) -> bool:
        return phi.values.size == 5

    @staticmethod
    def _records(data: Dataset):
        if not data.is_records:
            raise ValueError("beta-binomial regression expects (m, l, t) records")
        v = data.values
        return v[:, 0], v[:, 1], v[:, 2]

    def _design(self, l, t):
        x = np.log(t) - np.mean(np.log(t))
        xu = np.column_stack([np.ones_like(x), x, x * x])
        low = (l <= self.l_threshold).astype(float)
        xv = np.column_stack([low, 1.0 - low])
        return xu, xv

    def _link(self, phi, xu, xv):
        u = xu @ phi.values[:3]
        v = xv @ phi.values[3:]
        p = 1.0 / (1.0 + np.exp(-u))
        e = np.exp(-v)  # 1 / xi
        return p, e

    def loglik(self, data: Dataset, phi: Phi) -> float:
        m, l, t = self._records(_pool(data))
        xu, xv = self._design(l, t)
        p, e = self._link(phi, xu, xv)
        al = p * e
        de = (1.0 - p) * e
        ll = (
            gammaln(l + 1)
            - gammaln(m + 1)
            - gammaln(l - m + 1)
            + gammaln(m + al)
            + gammaln(l - m + de)
            - gammaln(l + al + de)
            - gammaln(al)
            - gammaln(de)
            + gammaln(al + de)
        )
        return float(np.sum(ll))

    def _grad_parts(self, data, phi):
        m, l, t = self._records(_pool(data))
        xu, xv = self._design(l, t)
        p, e = self._link(phi, xu, xv)
        q = 1.0 - p
        al = p * e
        de = q * e
        g_al = digamma(m + al) - digamma(l + al + de) - digamma(al) + digamma(al + de)
        g_de = (
            digamma(l - m + de) - digamma(l + al + de) - digamma(de) + digamma(al + de)
        )
        return m, l, xu, xv, p, q, e, al, de, g_al, g_de

    def _derivs(self, data, phi):
        m, l, xu, xv, p, q, e, al, de, g_al, g_de = self._grad_parts(data, phi)
        # trigamma terms, needed for the Hessian only
        h_aa = (
            polygamma(1, m + al)
            - polygamma(1, l + al + de)
            - polygamma(1, al)
            + polygamma(1, al + de)
        )
        h_ad = -polygamma(1, l + al + de) + polygamma(1, al + de)
        h_dd = (
            polygamma(1, l - m + de)
            - polygamma(1, l + al + de)
            - polygamma(1, de)
            + polygamma(1, al + de)
        )
        pqe = p * q * e
        luu = pqe * pqe * (h_aa - 2.0 * h_ad + h_dd) + pqe * (1.0 - 2.0 * p) * (
            g_al - g_de
        )
        luv = (
            -p * pqe * e * h_aa
            + pqe * e * (p - q) * h_ad
            + q * pqe * e * h_dd
            - pqe * (g_al - g_de)
        )
        lvv = (
            p * p * e * e * h_aa
            + 2.0 * p * q * e * e * h_ad
            + q * q * e * e * h_dd
            + e * (p * g_al + q * g_de)
        )
        return xu, xv, luu, luv, lvv

    def score(self, data: Dataset, phi: Phi) -> np.ndarray:
        _, _, xu, xv, p, q, e, _, _, g_al, g_de = self._grad_parts(data, phi)
        lu = p * q * e * (g_al - g_de)
        lv = -e * (p * g_al + q * g_de)
        return np.concatenate([xu.T @ lu, xv.T @ lv])

    def obs_info(self, data: Dataset, phi: Phi) -> np.ndarray:
        xu, xv, luu, luv, lvv = self._derivs(data, phi)
        h = np.empty((5, 5))
        h[:3, :3] = xu.T @ (luu[:, None] * xu)
        h[:3, 3:] = xu.T @ (luv[:, None] * xv)
        h[3:, :3] = h[:3, 3:].T
        h[3:, 3:] = xv.T @ (lvv[:, None] * xv)
        return -h

    def _start(self, data) -> np.ndarray:
        m, l, t = self._records(_pool(data))
        frac = np.clip((m.sum() + 0.5) / (l.sum() + 1.0), 1e-4, 1 - 1e-4)
        b0 = float(np.log(frac / (1.0 - frac)))
        return np.array([b0, 0.0, 0.0, -1.0, -1.0])

    def fit_mle(self, data, rng: RngState | None = None) -> Phi:
        pooled = _pool(data)
        x0 = self._start(pooled)

        def neg_ll(v):
            return -self.loglik(pooled, Phi(v, self.phi_names))

        def neg_grad(v):
            return -self.score(pooled, Phi(v, self.phi_names))

        best = None
        starts = [x0]
        if rng is not None:
            starts += [x0 + 0.5 * rng.generator.standard_normal(5) for _ in range(2)]
        for start in starts:
            res = minimize(
                neg_ll,
                start,
                jac=neg_grad,
                method="BFGS",
                options={"gtol": 1e-9, "maxiter": 500},
            )
            if best is None or res.fun < best.fun:
                best = res
            s = self.score(pooled, Phi(best.x, self.phi_names))
            if scaled_score_norm(s, pooled.size) <= 1e-6:
                break
        phi = Phi(best.x, self.phi_names)
        # Newton polish for a sharper stationary point than BFGS's gtol
        for _ in range(10):
            s = self.score(pooled, phi)
            if scaled_score_norm(s, pooled.size) <= 1e-10:
                break
            try:
                step = np.linalg.solve(self.obs_info(pooled, phi), s)
            except np.linalg.LinAlgError:
                break
            cand = Phi(phi.values + step, self.phi_names)
            if self.loglik(pooled, cand) < self.loglik(pooled, phi) - 1e-9:
                break
            phi = cand
        s = self.score(pooled, phi)
        if scaled_score_norm(s, pooled.size) > 1e-6:
            raise MleFailure(
                f"beta-binomial fit did not reach a stationary point "
                f"(scaled score {scaled_score_norm(s, pooled.size):.2e})"
            )
        return phi

    def simulate(self, phi: Phi, design: np.ndarray, rng: RngState) -> Dataset:
        """Parametric draw from the fitted model on a given (l, t) design."""
        design = np.asarray(design, dtype=float)
        l, t = design[:, 0], design[:, 1]
        xu, xv = self._design(l, t)
        p, e = self._link(phi, xu, xv)
        gen = rng.generator
        probs = gen.beta(p * e, (1.0 - p) * e)
        m = gen.binomial(l.astype(int), probs)
        return Dataset(np.column_stack([m.astype(float), l, t]))
