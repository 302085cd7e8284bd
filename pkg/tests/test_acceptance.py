"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``.  Several criteria run
full MCMC experiments; the whole module takes roughly 20-30 minutes.
"""

import time

import numpy as np
import pytest

from bii.abc_ii import (
    KernelSpec,
    calibrate_epsilon,
    disc_il,
    disc_ip,
    disc_is,
    kernel_weight,
    precompute_observed,
)
from bii.auxiliary import (
    BetaBinomialRegressionAux,
    FixedVarNormalAux,
    GaussianMixtureAux,
    NormalAux,
)
from bii.core import Dataset, Phi, Prior, RngState, Theta
from bii.generative import (
    GandKModel,
    MacroparasiteModel,
    PoissonModel,
    mjp_oracle_dist,
    poisson_exact_posterior,
    poisson_pdbil_limit,
)
from bii.indirect_likelihood import npdbil_identity_check
from bii.mcmc import (
    ProposalSpec,
    acceptance_rate,
    ess,
    run_mcmc_abc,
    run_mcmc_indirect,
    run_mcmc_pdbil,
    tune_proposal_abc,
)
from bii.postprocess import AdjustmentSpec, chain_adjustment_inputs, regression_adjust
from bii.runner import example_design_path, load_design

TOY_SEED = 2024
TOY_N = 100
TOY_LAMBDA = 30.0
TOY_PRIOR = Prior.gamma([30.0], [1.0], ("lambda",))
MP_THETA = Theta([0.00084, 0.31, 0.0011, 1.1], ("nu", "mu_i", "mu_l", "beta"))


def _report(num, name, ok, detail):
    print(f"\n[criterion {num:02d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"criterion {num}: {name}: {detail}"


@pytest.fixture(scope="module")
def toy():
    model = PoissonModel()
    y = model.simulate(Theta([TOY_LAMBDA]), TOY_N, RngState(TOY_SEED))
    exact = poisson_exact_posterior(TOY_PRIOR, y)
    e_mean = float(exact.a[0] / exact.b[0])
    e_sd = float(np.sqrt(exact.a[0]) / exact.b[0])
    return model, y, e_mean, e_sd


@pytest.fixture(scope="module")
def toy_obs(toy):
    model, y, _, _ = toy
    return precompute_observed(NormalAux(), y)


def test_criterion_01_conjugate_exactness_of_mh_engine(toy):
    model, y, e_mean, e_sd = toy
    t0 = time.perf_counter()

    def exact_loglik(theta, rng):
        lam = theta.values[0]
        return float(np.sum(y.values) * np.log(lam) - y.size * lam), np.array([lam]), True

    chain = run_mcmc_indirect(
        exact_loglik, TOY_PRIOR, ProposalSpec.diagonal([0.04], transforms=("log",)),
        None, 100_000, RngState(101),
    )
    wall = time.perf_counter() - t0
    x = chain.thetas[:, 0]
    n_eff = ess(x)
    mean_err = abs(x.mean() - e_mean)
    mean_tol = 3.0 * e_sd / np.sqrt(n_eff)
    var_ratio = x.var() / e_sd**2
    ok = mean_err <= mean_tol and abs(var_ratio - 1.0) <= 0.10 and wall < 60
    _report(
        1, "conjugate exactness of the MH engine", ok,
        f"|mean err| {mean_err:.4f} <= {mean_tol:.4f}, var ratio {var_ratio:.3f} "
        f"in [0.9, 1.1], wall {wall:.0f}s < 60s",
    )


def test_criterion_02_pdbil_replicate_trend(toy):
    model, y, _, _ = toy
    t0 = time.perf_counter()
    aux = NormalAux()
    prop = ProposalSpec.diagonal([0.014], transforms=("log",))
    limit = poisson_pdbil_limit(30.0, 1.0, y)
    paper_rates = {1: 0.46, 10: 0.67, 100: 0.72}
    sds, rate_ok = {}, {}
    mean100 = sd100 = None
    for n, seed in ((1, 201), (10, 210), (100, 300)):
        chain = run_mcmc_pdbil(model, aux, TOY_PRIOR, prop, None, n, 50_000,
                               RngState(seed), y=y)
        x = chain.thetas[:, 0]
        sds[n] = x.std()
        rate = acceptance_rate(chain)
        rate_ok[n] = abs(rate - paper_rates[n]) <= 0.08
        if n == 100:
            mean100, sd100 = x.mean(), x.std()
    wall = time.perf_counter() - t0
    monotone = sds[1] >= sds[10] >= sds[100]
    mean_rel = abs(mean100 - limit.mean()) / limit.mean()
    sd_rel = abs(sd100 - limit.sd()) / limit.sd()
    ok = (
        monotone and all(rate_ok.values())
        and mean_rel <= 0.05 and sd_rel <= 0.05 and wall < 600
    )
    _report(
        2, "replicate trend of the estimated-likelihood sampler", ok,
        f"SD {sds[1]:.3f} >= {sds[10]:.3f} >= {sds[100]:.3f}; rates within 8 pts "
        f"{rate_ok}; n=100 vs quadrature limit: mean rel {mean_rel:.3%}, "
        f"sd rel {sd_rel:.3%}; wall {wall:.0f}s < 600s",
    )


def test_criterion_03_misspecified_fixed_variance_pathology(toy):
    model, y, _, e_sd = toy
    prop = ProposalSpec.diagonal([0.014], transforms=("log",))
    results = {}
    for tau0, seed in ((16.0, 31), (49.0, 32)):
        aux = FixedVarNormalAux(tau0)
        limit = poisson_pdbil_limit(30.0, 1.0, y, tau0=tau0)
        chain = run_mcmc_pdbil(model, aux, TOY_PRIOR, prop, None, 100, 40_000,
                               RngState(seed), y=y)
        x = chain.thetas[:, 0]
        results[tau0] = {
            "sd": x.std(),
            "mean_rel": abs(x.mean() - limit.mean()) / limit.mean(),
            "sd_rel": abs(x.std() - limit.sd()) / limit.sd(),
        }
    under, over = results[16.0], results[49.0]
    ok = (
        under["sd"] <= 0.9 * e_sd
        and over["sd"] >= 1.1 * e_sd
        and all(r["mean_rel"] <= 0.05 and r["sd_rel"] <= 0.05 for r in results.values())
    )
    _report(
        3, "misspecified fixed-variance auxiliary pathology", ok,
        f"tau0=16 sd {under['sd']:.3f} <= 0.9x exact {e_sd:.3f}; "
        f"tau0=49 sd {over['sd']:.3f} >= 1.1x exact; limit match rels "
        f"{[f'{r[k]:.3%}' for r in results.values() for k in ('mean_rel', 'sd_rel')]} all <= 5%",
    )


def test_criterion_04_score_abc_near_exact_on_sufficient_summary(toy, toy_obs):
    model, y, e_mean, e_sd = toy
    aux = NormalAux()
    calib = calibrate_epsilon(
        model, aux, "IS", toy_obs, y, TOY_PRIOR, RngState(141),
        n_pilot=20_000, quantile=0.001,
    )
    prop = ProposalSpec.diagonal([0.02], transforms=("log",))
    chain = run_mcmc_abc(
        model, aux, "IS", KernelSpec(calib.epsilon), TOY_PRIOR, prop,
        calib.best_theta, 250_000, RngState(142), y=y, obs=toy_obs,
    )
    thetas, summaries, rhos = chain_adjustment_inputs(chain, thin=25)
    adjusted = regression_adjust(
        thetas, summaries, rhos, np.zeros(2), AdjustmentSpec(transforms=("log",))
    )
    x = adjusted[:, 0]
    n_eff = ess(x)
    mean_err = abs(x.mean() - e_mean)
    mean_tol = 3.0 * x.std() / np.sqrt(n_eff)
    sd_rel = abs(x.std() - e_sd) / e_sd
    ok = mean_err <= mean_tol and sd_rel <= 0.15
    _report(
        4, "score ABC with sufficient summary is near exact", ok,
        f"epsilon {calib.epsilon:.3f} (0.1% pilot quantile); adjusted mean err "
        f"{mean_err:.4f} <= {mean_tol:.4f} (3 SE at ESS {n_eff:.0f}); "
        f"sd rel dev {sd_rel:.3%} <= 15%",
    )


def test_criterion_05_replicated_abc_over_precision(toy, toy_obs):
    model, y, _, e_sd = toy
    aux = NormalAux()
    calib = calibrate_epsilon(
        model, aux, "IS", toy_obs, y, TOY_PRIOR, RngState(151),
        n_pilot=20_000, quantile=0.001, n=10,
    )
    prop = ProposalSpec.diagonal([0.02], transforms=("log",))
    chain = run_mcmc_abc(
        model, aux, "IS", KernelSpec(calib.epsilon), TOY_PRIOR, prop,
        calib.best_theta, 50_000, RngState(152), y=y, obs=toy_obs, n=10,
    )
    ratio = chain.thetas[:, 0].std() / e_sd
    ok = ratio < 0.5
    _report(
        5, "pooled-replicate ABC is grossly over-precise", ok,
        f"posterior SD ratio {ratio:.3f} < 0.5 (the documented pathology)",
    )


def test_criterion_06_gandk_score_abc_desk_scale():
    t0 = time.perf_counter()
    gen = GandKModel()
    true = Theta([3.0, 1.0, 2.0, 0.5], gen.theta_names)
    y = gen.simulate(true, 1000, RngState(20240))
    aux = GaussianMixtureAux(3, restarts=10)
    rng_fit, rng_eps, rng_tune, rng_chain = RngState(61).spawn(4)
    obs = precompute_observed(aux, y, rng_fit)
    prior = Prior.uniform([0, 0, 0, 0], [10, 10, 10, 10], gen.theta_names)
    calib = calibrate_epsilon(
        gen, aux, "IS", obs, y, prior, rng_eps, n_pilot=20_000, quantile=2.5e-4
    )
    kernel = KernelSpec(calib.epsilon)
    transforms = tuple("logit:0:10" for _ in range(4))
    prop0 = ProposalSpec.diagonal([0.1] * 4, transforms=transforms)
    prop = tune_proposal_abc(
        gen, aux, "IS", kernel, prior, prop0, calib.best_theta, 30_000,
        rng_tune, y=y, obs=obs,
    )
    chain = run_mcmc_abc(
        gen, aux, "IS", kernel, prior, prop, calib.best_theta, 500_000,
        rng_chain, y=y, obs=obs,
    )
    thetas, summaries, rhos = chain_adjustment_inputs(chain, thin=50)
    adjusted = regression_adjust(thetas, summaries, rhos, np.zeros(8), AdjustmentSpec())
    wall = time.perf_counter() - t0
    covers = []
    for j in range(4):
        lo, hi = np.quantile(adjusted[:, j], [0.025, 0.975])
        covers.append(lo <= true.values[j] <= hi)
    sd_a = adjusted[:, 0].std()
    ok = all(covers) and sd_a < 0.1 and wall < 1800
    _report(
        6, "g-and-k score ABC at desk scale", ok,
        f"95% CIs cover truth {covers}; sd(a) {sd_a:.4f} < 0.1; "
        f"acceptance {acceptance_rate(chain):.3%}; wall {wall:.0f}s < 1800s",
    )


def test_criterion_07_gillespie_matches_matrix_exponential():
    t0 = time.perf_counter()
    draws = 1_000_000
    model = MacroparasiteModel(design=np.tile([[3.0, 50.0]], (draws, 1)))
    dist = mjp_oracle_dist(
        MacroparasiteModel(design=[[3.0, 50.0]]), MP_THETA, l=3, t=50.0, cap=12
    )
    m = model.simulate(MP_THETA, draws, RngState(77)).values[:, 0].astype(int)
    emp = np.bincount(m, minlength=4) / draws
    tv = dist.total_variation(emp)
    wall = time.perf_counter() - t0
    ok = tv <= 0.01 and wall < 300
    _report(
        7, "event-driven simulator matches the truncated-generator oracle", ok,
        f"TV distance {tv:.5f} <= 0.01 over {draws} runs; wall {wall:.0f}s < 300s",
    )


def test_criterion_08_macroparasite_simulated_recovery():
    t0 = time.perf_counter()
    quarter = load_design(example_design_path())[::4]
    gen = MacroparasiteModel(design=quarter)
    y = gen.simulate(MP_THETA, gen.n_hosts, RngState(31415))
    aux = BetaBinomialRegressionAux()
    rng_fit, rng_eps, rng_tune, rng_ref, rng_tune2, rng_chain = RngState(99).spawn(6)
    obs = precompute_observed(aux, y, rng_fit)
    prior = Prior.uniform([0, 0, 0, 0], [1, 2, 1, 2], gen.theta_names)
    transforms = ("logit:0:1", "logit:0:2", "logit:0:1", "logit:0:2")

    calib = calibrate_epsilon(
        gen, aux, "IS", obs, y, prior, rng_eps, n_pilot=10_000, quantile=0.001
    )
    prop0 = ProposalSpec.diagonal([0.5] * 4, transforms=transforms)
    prop = tune_proposal_abc(
        gen, aux, "IS", KernelSpec(calib.epsilon), prior, prop0,
        calib.best_theta, 20_000, rng_tune, y=y, obs=obs,
    )
    # tighten the tolerance to the low quantile of discrepancies the chain
    # actually visits, then freeze everything for the recorded run
    refine = run_mcmc_abc(
        gen, aux, "IS", KernelSpec(calib.epsilon), prior, prop,
        calib.best_theta, 50_000, rng_ref, y=y, obs=obs, stall_window=None,
    )
    eps1 = float(np.quantile(refine.stat, 0.02))
    best1 = Theta(refine.thetas[int(np.argmin(refine.stat))], gen.theta_names)
    prop2 = tune_proposal_abc(
        gen, aux, "IS", KernelSpec(eps1), prior, prop, best1, 20_000,
        rng_tune2, y=y, obs=obs,
    )
    chain = run_mcmc_abc(
        gen, aux, "IS", KernelSpec(eps1), prior, prop2, best1, 1_000_000,
        rng_chain, y=y, obs=obs,
    )
    wall = time.perf_counter() - t0
    prior_sd = prior.sd()
    stats = {}
    for j, name in enumerate(gen.theta_names):
        x = chain.thetas[:, j]
        lo, hi = np.quantile(x, [0.025, 0.975])
        stats[name] = {
            "covers": bool(lo <= MP_THETA.values[j] <= hi),
            "sd_ratio": float(x.std() / prior_sd[j]),
            "ci": (lo, hi),
        }
    recovered = stats["nu"]["covers"] and stats["mu_l"]["covers"]
    dominated = stats["mu_i"]["sd_ratio"] >= 0.5 and stats["beta"]["sd_ratio"] >= 0.5
    ok = recovered and dominated
    _report(
        8, "host-parasite simulated-data recovery", ok,
        f"nu CI {np.round(stats['nu']['ci'], 5)} covers; "
        f"mu_l CI {np.round(stats['mu_l']['ci'], 5)} covers; "
        f"mu_i sd ratio {stats['mu_i']['sd_ratio']:.2f} >= 0.5, "
        f"beta sd ratio {stats['beta']['sd_ratio']:.2f} >= 0.5; "
        f"acceptance {acceptance_rate(chain):.3%}; wall {wall:.0f}s",
    )


def _random_case(kind, idx):
    rng = RngState(9000 + idx)
    gen = rng.generator
    if kind == "normal":
        data = Dataset(gen.normal(gen.uniform(-3, 3), gen.uniform(0.5, 3), 150))
        phi = np.array([gen.uniform(-3, 3), gen.uniform(0.3, 5)])
        return NormalAux(), data, phi
    if kind == "fixedvar":
        data = Dataset(gen.normal(gen.uniform(-3, 3), 2.0, 150))
        return FixedVarNormalAux(gen.uniform(0.5, 8)), data, np.array([gen.uniform(-3, 3)])
    if kind == "mixture":
        data = Dataset(
            np.concatenate(
                [gen.normal(-3, 1, 60), gen.normal(1, 0.8, 60), gen.normal(5, 1.3, 60)]
            )
        )
        w = gen.dirichlet([5, 5, 5])
        phi = np.concatenate(
            [w[:2], np.sort(gen.uniform(-5, 6, 3)), gen.uniform(0.5, 3, 3)]
        )
        return GaussianMixtureAux(3), data, phi
    design = np.column_stack(
        [np.where(gen.random(40) < 0.5, 60.0, 180.0), gen.uniform(5, 400, 40)]
    )
    mp = MacroparasiteModel(design=design)
    data = mp.simulate(Theta([0.002, 0.4, 0.01, 0.9]), 40, rng)
    phi = np.array(
        [gen.uniform(-1, 1), gen.uniform(-0.5, 0.5), gen.uniform(-0.3, 0.3),
         gen.uniform(-2.5, 0), gen.uniform(-2.5, 0)]
    )
    return BetaBinomialRegressionAux(), data, phi


def test_criterion_09_gradient_and_information_suite():
    t0 = time.perf_counter()
    worst_grad, worst_info = 0.0, 0.0
    for kind in ("normal", "fixedvar", "mixture", "betabin"):
        for idx in range(50):
            aux, data, pv = _random_case(kind, idx)
            phi = Phi(pv, aux.phi_names)
            s = aux.score(data, phi)
            s_fd = np.zeros_like(pv)
            for i in range(pv.size):
                e = np.zeros_like(pv)
                e[i] = 1e-6 * max(1.0, abs(pv[i]))
                s_fd[i] = (
                    aux.loglik(data, Phi(pv + e, aux.phi_names))
                    - aux.loglik(data, Phi(pv - e, aux.phi_names))
                ) / (2 * e[i])
            rel_g = np.max(np.abs(s - s_fd)) / max(1.0, np.max(np.abs(s_fd)))
            worst_grad = max(worst_grad, rel_g)
            j = aux.obs_info(data, phi)
            j_fd = np.zeros_like(j)
            for i in range(pv.size):
                e = np.zeros_like(pv)
                e[i] = 1e-5 * max(1.0, abs(pv[i]))
                j_fd[:, i] = -(
                    aux.score(data, Phi(pv + e, aux.phi_names))
                    - aux.score(data, Phi(pv - e, aux.phi_names))
                ) / (2 * e[i])
            rel_j = np.max(np.abs(j - j_fd)) / max(1.0, np.max(np.abs(j_fd)))
            worst_info = max(worst_info, rel_j)
    wall = time.perf_counter() - t0
    ok = worst_grad <= 1e-5 and worst_info <= 1e-4 and wall < 60
    _report(
        9, "analytic derivatives against finite differences", ok,
        f"worst score rel err {worst_grad:.2e} <= 1e-5; worst information rel "
        f"err {worst_info:.2e} <= 1e-4 over 50 pairs x 4 models; wall {wall:.0f}s < 60s",
    )


def test_criterion_10_replicate_count_free_kernel_likelihood():
    outcomes = np.array([0.0, 1.0])
    pmf = np.array([0.7, 0.3])
    kernel = KernelSpec(0.5)
    rho = lambda y, x: abs(y - x)
    details = []
    ok = True
    for n in (1, 5, 10):
        mc, exact, se = npdbil_identity_check(
            outcomes, pmf, kernel, rho, y=1.0, n=n, n_mc=100_000, rng=RngState(1000 + n)
        )
        ok = ok and exact == pytest.approx(0.3) and abs(mc - exact) <= 3 * se
        details.append(f"n={n}: {mc:.4f} vs exact {exact:.1f} (3se {3 * se:.4f})")
    _report(
        10, "kernel likelihood is unchanged by the replicate count", ok,
        "; ".join(details),
    )


def test_criterion_11_discrepancy_property_suite(toy, toy_obs):
    model, y, _, _ = toy
    aux = NormalAux()

    # quadratic-form oracles on random positive-definite inputs
    from scipy.linalg import cholesky
    from bii.abc_ii import ObservedSummary

    gen = RngState(111).generator
    worst_ip, worst_is = 0.0, 0.0
    for _ in range(200):
        d = int(gen.integers(2, 9))
        a = gen.standard_normal((d, d))
        j = a @ a.T + d * np.eye(d)
        j_inv = np.linalg.inv(j)
        phi_y = gen.standard_normal(d)
        stub = ObservedSummary(
            phi_y=Phi(phi_y), j_y=j, j_y_inv=j_inv, loglik_y=0.0,
            chol_j=cholesky(j, lower=True),
            chol_j_inv=cholesky(0.5 * (j_inv + j_inv.T), lower=True),
            score_norm=0.0, n_obs=1,
        )
        v = gen.standard_normal(d)
        diff = v - phi_y
        naive_ip = np.sqrt(diff @ j @ diff)
        worst_ip = max(worst_ip, abs(disc_ip(stub, Phi(v)) - naive_ip) / naive_ip)
        s = gen.standard_normal(d)
        naive_is = np.sqrt(s @ j_inv @ s)

        class VectorScoreAux:
            def score(self, data, phi):
                return data.values

        got = disc_is(stub, VectorScoreAux(), Dataset(s))
        worst_is = max(worst_is, abs(got - naive_is) / naive_is)

    # nonnegativity of the likelihood-drop discrepancy over 1000 datasets
    rng = RngState(112)
    min_il = np.inf
    for _ in range(1000):
        x = model.simulate(Theta([TOY_LAMBDA]), y.size, rng)
        min_il = min(min_il, disc_il(toy_obs, aux, y, aux.fit_mle(x)))

    # acceptance monotone in epsilon on a recorded pilot stream
    calib = calibrate_epsilon(
        model, aux, "IS", toy_obs, y, TOY_PRIOR, RngState(113), n_pilot=2000,
        quantile=0.1,
    )
    eps_grid = np.linspace(np.max(calib.rhos), np.min(calib.rhos), 60)
    accepted = [
        np.sum([kernel_weight(KernelSpec(e), r) for r in calib.rhos])
        for e in eps_grid
    ]
    monotone = bool(np.all(np.diff(accepted) <= 0))

    ok = worst_ip <= 1e-12 and worst_is <= 1e-12 and min_il >= -1e-8 and monotone
    _report(
        11, "discrepancy property suite", ok,
        f"worst parameter-distance oracle rel err {worst_ip:.2e} <= 1e-12; "
        f"worst score-distance oracle rel err {worst_is:.2e} <= 1e-12; "
        f"min likelihood-drop over 1000 datasets {min_il:.2e} >= -1e-8; "
        f"accept count monotone in epsilon: {monotone}",
    )
