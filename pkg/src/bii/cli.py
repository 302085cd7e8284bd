"""Command-line interface.

Subcommands: simulate, fit-aux, run, adjust, diagnose, oracle.  Exit codes:
0 success, 1 validation failure, 2 runtime failure.  Logs go to standard
error as line-delimited JSON records.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .abc_ii import AssumptionViolation
from .core import Prior, RngState, Theta
from .generative import (
    MacroparasiteModel,
    gk_logpdf,
    mjp_oracle_dist,
    poisson_exact_posterior,
    poisson_pdbil_limit,
)
from .mcmc import acceptance_rate as chain_acceptance_rate
from .mcmc import ess as chain_ess
from .mcmc import read_chain_csv
from .postprocess import AdjustmentSpec, posterior_summary, regression_adjust
from .runner import (
    ConfigError,
    build_aux,
    ExperimentConfig,
    load_config,
    load_dataset,
    log_event,
    run,
    simulate_cmd,
    _ALL_KEYS,
    _atomic_write,
    _atomic_write_csv,
    _convert,
)

from scipy.stats import gamma as _gamma_dist


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def _cmd_simulate(args) -> int:
    simulate_cmd(
        args.model,
        _floats(args.theta),
        args.n_obs,
        args.seed,
        args.out,
        gk_c=args.gk_c,
        design_path=args.design,
        mp_gamma=args.mp_gamma,
        mp_mu_m=args.mp_mu_m,
    )
    return 0


def _cmd_fit_aux(args) -> int:
    cfg = ExperimentConfig(
        {
            "aux": args.aux,
            **({"fixed_var": args.fixed_var} if args.fixed_var is not None else {}),
            "mixture_k": args.mixture_k,
        }
    )
    aux = build_aux(cfg)
    data = load_dataset(args.data)
    rng = RngState(args.seed)
    phi = aux.fit_mle(data, rng)
    score = aux.score(data, phi)
    info = aux.obs_info(data, phi)
    out = {
        "phi": {name: float(v) for name, v in zip(phi.names, phi.values)},
        "loglik": aux.loglik(data, phi),
        "score_inf_norm": float(np.max(np.abs(score))),
        "info_eigenvalues": [float(v) for v in np.linalg.eigvalsh(info)],
    }
    text = json.dumps(out, indent=2)
    if args.out:
        _atomic_write(args.out, text)
    else:
        print(text)
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        overrides[key] = _convert(key, raw)
    clash = sorted(set(overrides) & set(cfg.values))
    if clash:
        raise ConfigError(
            f"keys given both in the config file and on the command line: {clash}"
        )
    cfg.values.update(overrides)
    run(cfg)
    return 0


def _cmd_adjust(args) -> int:
    import os

    if args.run_dir:
        chain_path = os.path.join(args.run_dir, "chain.csv")
        with open(os.path.join(args.run_dir, "summary.json"), encoding="utf-8") as fh:
            summary = json.load(fh)
        s_obs = summary.get("s_obs")
        if s_obs is None:
            raise ConfigError("run summary carries no observed summary to adjust to")
        s_obs = np.asarray(s_obs, dtype=float)
        theta_names = summary["theta_names"]
        out_dir = args.out_dir or args.run_dir
    else:
        if not (args.chain and args.s_obs):
            raise ConfigError("either --run-dir or both --chain and --s-obs required")
        chain_path = args.chain
        s_obs = np.asarray(_floats(args.s_obs))
        theta_names = None
        out_dir = args.out_dir or os.path.dirname(chain_path) or "."
    chain = read_chain_csv(chain_path)
    theta_names = theta_names or list(chain.theta_names)
    spec = AdjustmentSpec(
        transforms=tuple(args.transforms.split(",")) if args.transforms else (),
        delta=args.delta,
        thin=args.thin,
    )
    adjusted = regression_adjust(chain.thetas, chain.aux, chain.stat, s_obs, spec)
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write_csv(
        os.path.join(out_dir, "adjusted.csv"),
        list(theta_names),
        adjusted,
    )
    summaries = posterior_summary(adjusted, names=theta_names)
    out = {
        name: {k: entry[k] for k in ("mean", "sd", "q2.5", "q50", "q97.5")}
        for name, entry in summaries.items()
    }
    _atomic_write(
        os.path.join(out_dir, "adjusted_summary.json"), json.dumps(out, indent=2)
    )
    log_event("adjusted", rows=int(adjusted.shape[0]), out_dir=out_dir)
    return 0


def _cmd_diagnose(args) -> int:
    chain = read_chain_csv(args.chain)
    out = {
        "iterations": chain.iterations,
        "acceptance_rate": chain_acceptance_rate(chain),
        "ess": {
            name: chain_ess(chain, j) for j, name in enumerate(chain.theta_names)
        },
        "mean": {
            name: float(chain.thetas[:, j].mean())
            for j, name in enumerate(chain.theta_names)
        },
        "sd": {
            name: float(chain.thetas[:, j].std())
            for j, name in enumerate(chain.theta_names)
        },
    }
    print(json.dumps(out, indent=2))
    return 0


def _write_grid_csv(out, x, pdf) -> None:
    body = np.column_stack([x, pdf])
    if out:
        _atomic_write_csv(out, ["x", "pdf"], body)
    else:
        print("x,pdf")
        for row in body:
            print(f"{row[0]:.17g},{row[1]:.17g}")


def _cmd_oracle(args) -> int:
    which = args.which
    if which == "poisson-posterior":
        y = load_dataset(args.data)
        post = poisson_exact_posterior(
            Prior.gamma([args.prior_shape], [args.prior_rate]), y
        )
        a, b = float(post.a[0]), float(post.b[0])
        log_event("poisson_posterior", shape=a, rate=b)
        mean, sd = a / b, np.sqrt(a) / b
        x = np.linspace(max(mean - 8 * sd, 1e-9), mean + 8 * sd, args.points)
        _write_grid_csv(args.out, x, _gamma_dist.pdf(x, a, scale=1.0 / b))
        return 0
    if which == "pdbil-limit":
        y = load_dataset(args.data)
        dens = poisson_pdbil_limit(
            args.prior_shape, args.prior_rate, y, tau0=args.fixed_var
        )
        _write_grid_csv(args.out, dens.x, dens.pdf)
        return 0
    if which == "gk-density":
        theta = _floats(args.theta)
        if len(theta) != 5:
            raise ConfigError("gk-density expects theta = a,b,c,g,k")
        x = np.linspace(args.lo, args.hi, args.points)
        pdf = np.array([np.exp(gk_logpdf(xi, theta)) for xi in x])
        _write_grid_csv(args.out, x, pdf)
        return 0
    if which == "mjp-endpoint":
        theta = _floats(args.theta)
        if len(theta) != 4:
            raise ConfigError("mjp-endpoint expects theta = nu,mu_i,mu_l,beta")
        model = MacroparasiteModel(
            design=np.array([[args.larvae, args.time]]),
            gamma=args.mp_gamma,
            mu_m=args.mp_mu_m,
        )
        dist = mjp_oracle_dist(
            model, Theta(theta), args.larvae, args.time, args.cap
        )
        log_event("mjp_endpoint", leaked=dist.leaked)
        body = np.column_stack([dist.m.astype(float), dist.prob])
        if args.out:
            _atomic_write_csv(args.out, ["m", "prob"], body)
        else:
            print("m,prob")
            for row in body:
                print(f"{int(row[0])},{row[1]:.17g}")
        return 0
    raise ConfigError(f"unknown oracle {which!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bii", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a dataset to CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--theta", required=True, help="comma-separated values")
    s.add_argument("--n-obs", type=int, default=None)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gk-c", type=float, default=0.8)
    s.add_argument("--design", default=None)
    s.add_argument("--mp-gamma", type=float, default=0.04)
    s.add_argument("--mp-mu-m", type=float, default=0.0015)
    s.set_defaults(func=_cmd_simulate)

    f = sub.add_parser("fit-aux", help="fit an auxiliary model to a CSV dataset")
    f.add_argument("--aux", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--fixed-var", type=float, default=None)
    f.add_argument("--mixture-k", type=int, default=3)
    f.add_argument("--out", default=None)
    f.set_defaults(func=_cmd_fit_aux)

    r = sub.add_parser("run", help="run a configured experiment")
    r.add_argument("--config", required=True)
    r.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="config override; clashing with a file key is an error",
    )
    r.set_defaults(func=_cmd_run)

    a = sub.add_parser("adjust", help="regression-adjust a recorded chain")
    a.add_argument("--run-dir", default=None)
    a.add_argument("--chain", default=None)
    a.add_argument("--s-obs", default=None, help="comma-separated observed summary")
    a.add_argument("--transforms", default=None)
    a.add_argument("--delta", type=float, default=None)
    a.add_argument("--thin", type=int, default=1)
    a.add_argument("--out-dir", default=None)
    a.set_defaults(func=_cmd_adjust)

    d = sub.add_parser("diagnose", help="acceptance rate and ESS of a chain CSV")
    d.add_argument("--chain", required=True)
    d.set_defaults(func=_cmd_diagnose)

    o = sub.add_parser("oracle", help="emit exact reference distributions as CSV")
    o.add_argument(
        "--which",
        required=True,
        choices=["poisson-posterior", "pdbil-limit", "gk-density", "mjp-endpoint"],
    )
    o.add_argument("--data", default=None)
    o.add_argument("--prior-shape", type=float, default=None)
    o.add_argument("--prior-rate", type=float, default=None)
    o.add_argument("--fixed-var", type=float, default=None)
    o.add_argument("--theta", default=None)
    o.add_argument("--lo", type=float, default=None)
    o.add_argument("--hi", type=float, default=None)
    o.add_argument("--points", type=int, default=512)
    o.add_argument("--larvae", type=int, default=None)
    o.add_argument("--time", type=float, default=None)
    o.add_argument("--cap", type=int, default=50)
    o.add_argument("--mp-gamma", type=float, default=0.04)
    o.add_argument("--mp-mu-m", type=float, default=0.0015)
    o.add_argument("--out", default=None)
    o.set_defaults(func=_cmd_oracle)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, AssumptionViolation, ValueError) as exc:
        log_event("validation_error", error=str(exc))
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        log_event("runtime_error", error=str(exc), type=type(exc).__name__)
        return 2


if __name__ == "__main__":
    sys.exit(main())
