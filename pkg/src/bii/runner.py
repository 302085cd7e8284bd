"""Configuration-driven experiment runs: parsing, validation, execution and
artifact persistence.

Configs are flat ``key = value`` text files ('#' starts a comment).  Unknown
keys are rejected, and validation reports every problem before any compute
starts.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import __version__
from .abc_ii import (
    KernelSpec,
    calibrate_epsilon,
    check_method_assumptions,
    precompute_observed,
)
from .auxiliary import (
    BetaBinomialRegressionAux,
    FixedVarNormalAux,
    GaussianMixtureAux,
    NormalAux,
)
from .core import Dataset, Prior, RngState, Theta
from .generative import GandKModel, MacroparasiteModel, PoissonModel
from .indirect_likelihood import pdbil_loglik, psbil_loglik
from .mcmc import (
    ProposalSpec,
    acceptance_rate,
    ess,
    run_mcmc_abc,
    run_mcmc_indirect,
    tune_proposal_abc,
    tune_proposal_indirect,
    write_chain_csv,
)
from .postprocess import posterior_summary

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config_text",
    "load_config",
    "run",
    "simulate_cmd",
    "load_dataset",
    "load_design",
    "example_design_path",
    "log_event",
]

METHODS = ("abc-ip", "abc-il", "abc-is", "pdbil", "psbil")
MODELS = ("poisson", "gandk", "macroparasite")
AUXES = ("normal", "fixed-var-normal", "mixture", "beta-binomial")
SUMMARIES = ("mean", "aux-mle")

_SCALAR_MODELS = ("poisson", "gandk")


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists every failure."""


def log_event(event: str, **fields) -> None:
    """Line-delimited structured record on standard error."""
    rec = {"event": event}
    rec.update(fields)
    print(json.dumps(rec, default=str), file=sys.stderr)


# ---------------------------------------------------------------------------
# Config schema

_STR_KEYS = {"method", "model", "aux", "prior", "summary", "data", "design", "out_dir"}
_INT_KEYS = {"n", "iterations", "seed", "pilot_size", "pilot_iterations", "mixture_k",
             "mixture_restarts"}
_FLOAT_KEYS = {"epsilon", "target_accept", "gk_c", "fixed_var", "mp_gamma", "mp_mu_m"}
_BOOL_KEYS = {"pilot_tune", "mixture_canonicalize"}
_LIST_KEYS = {"prior_lo", "prior_hi", "prior_shape", "prior_rate", "proposal_scale",
              "theta0"}
_STRLIST_KEYS = {"transforms"}
_ALL_KEYS = (
    _STR_KEYS | _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _LIST_KEYS | _STRLIST_KEYS
)


@dataclass
class ExperimentConfig:
    """Parsed, unvalidated key/value configuration."""

    values: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def __contains__(self, key):
        return key in self.values


def _convert(key: str, raw: str):
    raw = raw.strip()
    if key in _STR_KEYS:
        return raw
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean for {key}, got {raw!r}")
    if key in _LIST_KEYS:
        return [float(v) for v in raw.split(",") if v.strip() != ""]
    if key in _STRLIST_KEYS:
        return [v.strip() for v in raw.split(",") if v.strip() != ""]
    raise KeyError(key)


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse flat ``key = value`` lines; unknown or repeated keys are errors."""
    values = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _ALL_KEYS:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in values:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _convert(key, raw)
        except (ValueError, KeyError) as exc:
            errors.append(f"line {lineno}: bad value for {key!r}: {exc}")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# ---------------------------------------------------------------------------
# Data files


def load_dataset(path) -> Dataset:
    """Read an observation CSV: either a single 'y' column or 'm,l,t'."""
    with open(path, "r", encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().strip().split(",")]
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if header == ["y"]:
        return Dataset(body[:, 0])
    if header == ["m", "l", "t"]:
        return Dataset(body)
    raise ConfigError(f"unrecognized data header {header!r}; expected 'y' or 'm,l,t'")


def load_design(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().strip().split(",")]
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if header != ["l", "t"]:
        raise ConfigError(f"design file must have header 'l,t', got {header!r}")
    return body


def example_design_path() -> str:
    """Path of the bundled synthetic 212-host (l, t) design."""
    return str(resources.files("bii").joinpath("data/macroparasite_design_212.csv"))


# ---------------------------------------------------------------------------
# Assembly


def build_model(cfg: ExperimentConfig):
    name = cfg.get("model")
    if name == "poisson":
        return PoissonModel()
    if name == "gandk":
        return GandKModel(c=cfg.get("gk_c", 0.8))
    if name == "macroparasite":
        design = load_design(cfg.get("design"))
        return MacroparasiteModel(
            design=design,
            gamma=cfg.get("mp_gamma", 0.04),
            mu_m=cfg.get("mp_mu_m", 0.0015),
        )
    raise ConfigError(f"unknown model {name!r}")


def build_aux(cfg: ExperimentConfig):
    name = cfg.get("aux")
    if name == "normal":
        return NormalAux()
    if name == "fixed-var-normal":
        return FixedVarNormalAux(cfg.get("fixed_var", 1.0))
    if name == "mixture":
        return GaussianMixtureAux(
            n_components=cfg.get("mixture_k", 3),
            restarts=cfg.get("mixture_restarts", 10),
            canonicalize=cfg.get("mixture_canonicalize", True),
        )
    if name == "beta-binomial":
        return BetaBinomialRegressionAux()
    raise ConfigError(f"unknown aux {name!r}")


def build_prior(cfg: ExperimentConfig, names) -> Prior:
    kind = cfg.get("prior")
    if kind == "uniform":
        return Prior.uniform(cfg.get("prior_lo"), cfg.get("prior_hi"), names)
    if kind == "gamma":
        return Prior.gamma(cfg.get("prior_shape"), cfg.get("prior_rate"), names)
    raise ConfigError(f"unknown prior {kind!r}")


def default_transforms(prior: Prior) -> tuple:
    if prior.kind == "gamma":
        return tuple("log" for _ in range(prior.dim))
    return tuple(f"logit:{lo:.17g}:{hi:.17g}" for lo, hi in zip(prior.a, prior.b))


def validate(cfg: ExperimentConfig) -> list:
    """Collect every configuration problem; empty list means runnable."""
    errors = []
    v = cfg.values

    method = v.get("method")
    if method not in METHODS:
        errors.append(f"method must be one of {METHODS}, got {method!r}")
    model = v.get("model")
    if model not in MODELS:
        errors.append(f"model must be one of {MODELS}, got {model!r}")
    aux = v.get("aux")
    if aux not in AUXES:
        errors.append(f"aux must be one of {AUXES}, got {aux!r}")

    if "iterations" not in v:
        errors.append("iterations is required")
    elif v["iterations"] < 1:
        errors.append("iterations must be >= 1")
    if "seed" not in v:
        errors.append("seed is required for reproducible runs")
    if "data" not in v:
        errors.append("data (observed CSV path) is required")
    elif not os.path.exists(v["data"]):
        errors.append(f"data file not found: {v['data']}")
    if "out_dir" not in v:
        errors.append("out_dir is required")

    if model == "macroparasite":
        if "design" not in v:
            errors.append("macroparasite model requires a design CSV")
        elif not os.path.exists(v["design"]):
            errors.append(f"design file not found: {v['design']}")
    elif "design" in v:
        errors.append("design is only valid for the macroparasite model")

    # method-specific requirements
    is_abc = method in ("abc-ip", "abc-il", "abc-is")
    if is_abc:
        if v.get("n", 1) != 1:
            errors.append("ABC methods require n = 1 (replicated ABC is unsound)")
        has_eps = "epsilon" in v
        has_target = "target_accept" in v
        if has_eps == has_target:
            errors.append("ABC methods need exactly one of epsilon / target_accept")
        if has_eps and v["epsilon"] <= 0:
            errors.append("epsilon must be positive")
        if has_target and not (0 < v["target_accept"] < 1):
            errors.append("target_accept must lie in (0, 1)")
        if has_target and v.get("pilot_size", 1000) * v["target_accept"] < 5:
            errors.append("pilot_size too small for the requested target_accept")
    else:
        for key in ("epsilon", "target_accept"):
            if key in v:
                errors.append(f"{key} is only valid for ABC methods")
        if "n" not in v:
            errors.append(f"{method} requires the replicate count n")
        elif v["n"] < 1:
            errors.append("n must be >= 1")
    if method == "psbil" and v.get("summary") not in SUMMARIES:
        errors.append(f"psbil requires summary in {SUMMARIES}")
    if method != "psbil" and "summary" in v:
        errors.append("summary is only valid for psbil")

    # model / aux compatibility
    if model in _SCALAR_MODELS and aux == "beta-binomial":
        errors.append("beta-binomial aux needs (m, l, t) records, not scalar data")
    if model == "macroparasite" and aux != "beta-binomial":
        errors.append("macroparasite data requires the beta-binomial aux")
    if method == "abc-ip" and aux == "mixture" and not v.get(
        "mixture_canonicalize", True
    ):
        errors.append(
            "abc-ip with a mixture aux requires canonicalization: the fitted "
            "estimate must be unique (enable mixture_canonicalize)"
        )

    # prior
    try:
        model_dim = {"poisson": 1, "gandk": 4, "macroparasite": 4}[model]
    except KeyError:
        model_dim = None
    kind = v.get("prior")
    if kind not in ("uniform", "gamma"):
        errors.append("prior must be 'uniform' or 'gamma'")
    else:
        pair = ("prior_lo", "prior_hi") if kind == "uniform" else (
            "prior_shape", "prior_rate"
        )
        if not all(k in v for k in pair):
            errors.append(f"{kind} prior requires keys {pair}")
        elif model_dim is not None:
            lengths = {len(v[pair[0]]), len(v[pair[1]])}
            if lengths != {model_dim}:
                errors.append(
                    f"prior parameter length must equal dim(theta) = {model_dim}"
                )

    # aux dimension must dominate the generative dimension
    if model_dim is not None and aux in AUXES:
        aux_dim = {
            "normal": 2,
            "fixed-var-normal": 1,
            "mixture": 3 * v.get("mixture_k", 3) - 1,
            "beta-binomial": 5,
        }[aux]
        if aux_dim < model_dim:
            errors.append(
                f"dim(phi) = {aux_dim} must be >= dim(theta) = {model_dim}"
            )

    # proposal
    has_scale = "proposal_scale" in v
    if has_scale == bool(v.get("pilot_tune", False)):
        errors.append("need exactly one of proposal_scale / pilot_tune = true")
    if has_scale and model_dim is not None and len(v["proposal_scale"]) != model_dim:
        errors.append("proposal_scale length must equal dim(theta)")
    if "transforms" in v and model_dim is not None and len(v["transforms"]) != model_dim:
        errors.append("transforms length must equal dim(theta)")
    if "theta0" in v and model_dim is not None and len(v["theta0"]) != model_dim:
        errors.append("theta0 length must equal dim(theta)")

    if "fixed_var" in v and v["fixed_var"] <= 0:
        errors.append("fixed_var must be positive")
    if aux != "fixed-var-normal" and "fixed_var" in v:
        errors.append("fixed_var is only valid for the fixed-var-normal aux")
    if "mixture_k" in v and v["mixture_k"] < 1:
        errors.append("mixture_k must be >= 1")

    return errors


# ---------------------------------------------------------------------------
# Execution


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_write_csv(path, header: list, body: np.ndarray) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, np.atleast_2d(body), delimiter=",", fmt="%.17g")
    os.replace(tmp, path)


def _content_hash(cfg: ExperimentConfig, data_path) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(cfg.values, sort_keys=True, default=str).encode())
    with open(data_path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _make_summary_fn(kind, aux, rng):
    if kind == "mean":
        return lambda ds: np.array([np.mean(ds.values)])
    if kind == "aux-mle":
        return lambda ds: aux.fit_mle(ds, rng).values
    raise ConfigError(f"unknown summary {kind!r}")


def run(cfg: ExperimentConfig) -> dict:
    """Execute one experiment and write its artifacts.

    Returns a manifest dict (also persisted as manifest.json).
    """
    errors = validate(cfg)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))

    t_start = time.perf_counter()
    v = cfg.values
    model = build_model(cfg)
    aux = build_aux(cfg)
    prior = build_prior(cfg, model.theta_names)
    y = load_dataset(v["data"])
    if cfg.get("model") == "macroparasite" and y.size != model.n_hosts:
        raise ConfigError("observed data and design have different host counts")

    method = v["method"]
    T = v["iterations"]
    seed = v["seed"]
    root = RngState(seed)
    rng_fit, rng_eps, rng_tune, rng_chain = root.spawn(4)

    transforms = tuple(v.get("transforms") or default_transforms(prior))
    theta0 = Theta(v["theta0"], model.theta_names) if "theta0" in v else None

    epsilon = None
    obs = None
    n = v.get("n", 1)
    log_event("run_start", method=method, model=v["model"], aux=v["aux"], seed=seed)

    if method.startswith("abc-"):
        abc_kind = method.split("-")[1].upper()
        check_method_assumptions(abc_kind, aux)
        obs = precompute_observed(aux, y, rng_fit)
        if "epsilon" in v:
            epsilon = v["epsilon"]
        else:
            calib = calibrate_epsilon(
                model, aux, abc_kind, obs, y, prior, rng_eps,
                n_pilot=v.get("pilot_size", 2000),
                quantile=v["target_accept"],
            )
            epsilon = calib.epsilon
            if theta0 is None:
                theta0 = calib.best_theta
            log_event("epsilon_calibrated", epsilon=epsilon)
        kernel = KernelSpec(epsilon)

        if v.get("pilot_tune", False):
            proposal0 = ProposalSpec.diagonal(
                np.full(prior.dim, 0.1), transforms=transforms
            )
            proposal = tune_proposal_abc(
                model, aux, abc_kind, kernel, prior, proposal0, theta0,
                v.get("pilot_iterations", 10000), rng_tune, y=y, obs=obs,
            )
            log_event("proposal_tuned")
        else:
            proposal = ProposalSpec.diagonal(v["proposal_scale"], transforms=transforms)
        chain = run_mcmc_abc(
            model, aux, abc_kind, kernel, prior, proposal, theta0, T, rng_chain,
            y=y, obs=obs,
        )
        s_obs = (
            np.zeros(obs.phi_y.values.size)
            if abc_kind == "IS"
            else obs.phi_y.values.copy()
        )
    else:
        if method == "pdbil":
            def estimator(theta, rng_):
                est = pdbil_loglik(model, aux, theta, y, n, rng_)
                vec = (
                    est.phi_hat.values
                    if est.phi_hat is not None
                    else np.full(aux.dim_phi, np.nan)
                )
                return est.loglik, vec, est.ok

            aux_names = tuple(aux.phi_names)
        else:
            summary_fn = _make_summary_fn(v["summary"], aux, rng_fit)
            s_y = summary_fn(y)
            dim_s = s_y.size

            def estimator(theta, rng_):
                try:
                    est = psbil_loglik(model, summary_fn, theta, s_y, n, rng_, y.size)
                except Exception:
                    return -np.inf, np.full(dim_s, np.nan), False
                return est.loglik, est.mu, True

            aux_names = tuple(f"s_{j + 1}" for j in range(dim_s))

        if v.get("pilot_tune", False):
            proposal0 = ProposalSpec.diagonal(
                np.full(prior.dim, 0.1), transforms=transforms
            )
            proposal = tune_proposal_indirect(
                estimator, prior, proposal0, theta0,
                v.get("pilot_iterations", 10000), rng_tune,
            )
            log_event("proposal_tuned")
        else:
            proposal = ProposalSpec.diagonal(v["proposal_scale"], transforms=transforms)
        chain = run_mcmc_indirect(
            estimator, prior, proposal, theta0, T, rng_chain,
            method=method, aux_names=aux_names,
        )
        chain.meta["n"] = n
        s_obs = None

    wall = time.perf_counter() - t_start
    out_dir = v["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    chain_path = os.path.join(out_dir, "chain.csv")
    tmp_chain = chain_path + ".tmp"
    write_chain_csv(chain, tmp_chain)
    os.replace(tmp_chain, chain_path)

    summaries = posterior_summary(chain.thetas, names=model.theta_names)
    for name, entry in summaries.items():
        grid, pdf = entry["density"]
        _atomic_write_csv(
            os.path.join(out_dir, f"density_{name}.csv"),
            ["x", "pdf"],
            np.column_stack([grid, pdf]),
        )

    summary = {
        "method": method,
        "acceptance_rate": acceptance_rate(chain),
        "ess": {
            name: ess(chain, j) for j, name in enumerate(model.theta_names)
        },
        "posterior": {
            name: {k: entry[k] for k in ("mean", "sd", "q2.5", "q50", "q97.5")}
            for name, entry in summaries.items()
        },
        "epsilon": epsilon,
        "n": n,
        "mle_failures": chain.meta.get("mle_failures", 0),
        "theta_names": list(model.theta_names),
        "aux_names": list(chain.aux_names),
        "s_obs": None if s_obs is None else list(s_obs),
        "wall_time_s": wall,
    }
    _atomic_write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2))

    manifest = {
        "config": dict(v),
        "content_hash": _content_hash(cfg, v["data"]),
        "seed": seed,
        "package_version": __version__,
        "wall_time_s": wall,
        "artifacts": sorted(
            name for name in os.listdir(out_dir) if not name.endswith(".tmp")
        ),
    }
    _atomic_write(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2))
    log_event("run_done", out_dir=out_dir, wall_time_s=round(wall, 3))
    return manifest


def simulate_cmd(
    model_name: str,
    theta_values,
    N: int | None,
    seed: int,
    out_path,
    gk_c: float = 0.8,
    design_path=None,
    mp_gamma: float = 0.04,
    mp_mu_m: float = 0.0015,
) -> None:
    """Simulate one dataset and write it as CSV."""
    rng = RngState(seed)
    if model_name == "poisson":
        model = PoissonModel()
    elif model_name == "gandk":
        model = GandKModel(c=gk_c)
    elif model_name == "macroparasite":
        if design_path is None:
            raise ConfigError("macroparasite simulation requires a design CSV")
        model = MacroparasiteModel(
            design=load_design(design_path), gamma=mp_gamma, mu_m=mp_mu_m
        )
        if N is None:
            N = model.n_hosts
    else:
        raise ConfigError(f"unknown model {model_name!r}")
    if N is None or N <= 0:
        raise ConfigError("N must be a positive integer")
    theta = Theta(theta_values, model.theta_names)
    data = model.simulate(theta, N, rng)
    if data.is_records:
        _atomic_write_csv(out_path, ["m", "l", "t"], data.values)
    else:
        _atomic_write_csv(out_path, ["y"], data.values.reshape(-1, 1))
    log_event("simulated", model=model_name, N=N, out=str(out_path))
