"""Command implementations and run artifacts.

Every command returns a :class:`CommandResult` (CSV header and rows, a
summary mapping and a pass flag); :func:`run` writes ``manifest.yaml``,
``metrics.csv`` and ``summary.json`` into the output directory.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from . import bias, simplex, trust_region
from .advantage import ShapingConfig
from .config import ExperimentConfig
from .errors import ConfigError, InputError
from .flow import FlowPolicy, SigmaSchedule
from .rewards import SyntheticReward
from .trainer import TrainConfig, hacking_experiment, train


@dataclass
class CommandResult:
    header: list[str]
    rows: list[list] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    passed: bool = True


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(result: CommandResult) -> str:
    lines = [",".join(result.header)] + [",".join(_fmt(v) for v in row) for row in result.rows]
    return "\n".join(lines) + "\n"


def build_info() -> dict:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        commit = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        commit = "unknown"
    return {"version": version, "git": commit}


def cmd_verify_bias(p: dict, seed: int) -> CommandResult:
    res = CommandResult(["G", "exact", "estimate", "ci_halfwidth", "rel_bias_exact", "rel_bias_mc", "brackets"])
    by_g = {}
    for G in p["G"]:
        rep = bias.monte_carlo_std_bias(int(G), p["sigma"], p["trials"], seed)
        rel = bias.relative_std_bias(int(G))
        res.rows.append([G, rep.exact, rep.estimate, rep.ci_halfwidth, rel, rep.rel_bias, rep.brackets_exact])
        by_g[str(G)] = {"rel_bias": rel, "rel_bias_mc": rep.rel_bias, "brackets": rep.brackets_exact}
        res.passed &= rep.brackets_exact
    res.summary = {"by_G": by_g, "trials": p["trials"]}
    if len(p["G"]) == 1:
        res.summary["rel_bias"] = by_g[str(p["G"][0])]["rel_bias"]
    return res


def _oracle_instance(seed: int, i: int, max_n: int):
    rng = np.random.default_rng([seed, i])
    n = int(rng.integers(2, max_n + 1))
    return rng, simplex.SimplexPolicy.from_logits(rng.normal(size=n)), rng.normal(size=n)


def cmd_verify_oracle(p: dict, seed: int) -> CommandResult:
    res = CommandResult(["check", "instance", "n", "gamma", "sup_error"])
    worst = {"linear": 0.0, "weighted": 0.0}
    for i in range(p["instances"]):
        rng, pol, r = _oracle_instance(seed, i, p["max_n"])
        closed = simplex.optimal_ascent_linear(pol, r, p["eta"])
        brute = simplex.brute_force_ascent(pol, r, np.ones(pol.n), p["eta"])
        err = float(np.max(np.abs(closed.delta - brute.delta)))
        worst["linear"] = max(worst["linear"], err)
        res.rows.append(["linear", i, pol.n, 0.0, err])
    for i in range(p["instances"]):
        rng, pol, r = _oracle_instance(seed + 1, i, p["max_n"])
        gamma = float(p["gammas"][int(rng.integers(len(p["gammas"])))])
        adv = r - pol.expect(r)
        closed = simplex.optimal_ascent_weighted(pol, r, adv, gamma, p["eta"])
        brute = simplex.brute_force_ascent(pol, r, closed.weights, p["eta"])
        err = float(np.max(np.abs(closed.delta - brute.delta)))
        worst["weighted"] = max(worst["weighted"], err)
        res.rows.append(["weighted", i, pol.n, gamma, err])
    hand = simplex.optimal_ascent_weighted(simplex.SimplexPolicy([0.5, 0.5]), [1.0, 0.0], [0.5, -0.5], 1.0, 1.0)
    hand_ok = bool(np.allclose(hand.delta, [0.125, -0.125], rtol=0, atol=1e-15))
    res.passed = worst["linear"] <= p["tol"] and worst["weighted"] <= p["tol"] and hand_ok
    res.summary = {
        "max_error_linear": worst["linear"],
        "max_error_weighted": worst["weighted"],
        "hand_case_delta": hand.delta.tolist(),
        "tol": p["tol"],
    }
    return res


def cmd_verify_trust_region(p: dict, seed: int) -> CommandResult:
    res = CommandResult(["instance", "n", "gamma", "measured_kl", "bound", "exact_bound", "holds"])
    fails = 0
    exact_fails = 0
    for i in range(p["instances"]):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(2, p["max_outcomes"] + 1))
        gamma = float(p["gammas"][int(rng.integers(len(p["gammas"])))])
        fam = trust_region.SoftmaxFamily(rng.normal(size=n))
        r = rng.normal(size=n)
        chk = trust_region.empirical_kl_bound_check(fam, r, gamma, p["tau"], p["trials"], seed=seed + i)
        fails += not chk.holds
        exact_fails += chk.measured_kl > chk.exact_bound
        res.rows.append([i, n, gamma, chk.measured_kl, chk.bound, chk.exact_bound, chk.holds])
    res.passed = fails == 0
    res.summary = {"instances": p["instances"], "failures": fails, "exact_bound_violations": exact_fails}
    return res


def cmd_gamma_bound(p: dict, seed: int) -> CommandResult:
    budget = trust_region.TrustRegionBudget(
        zeta=p["zeta"], tau=p["tau"], g_max=p["g_max"], lambda_max=p["lambda_max"],
        r_max=p["r_max"], k_r=p["k_r"], c_const=p["c_const"],
    )
    reports = []
    if p["r_max"] is not None:
        reports.append(trust_region.gamma_bound_bounded(budget))
    if p["k_r"] is not None:
        reports.append(trust_region.gamma_bound_subgaussian(budget))
    if not reports:
        raise ConfigError("gamma-bound needs r_max or k_r")
    res = CommandResult(["regime", "budget_rhs", "gamma_max"])
    for rep in reports:
        res.rows.append([rep.regime.value, rep.budget_rhs, rep.to_dict()["gamma_max"]])
    res.summary = {"budget_rhs": reports[0].budget_rhs, "gamma_max": reports[0].to_dict()["gamma_max"]}
    res.summary["reports"] = [r.to_dict() for r in reports]
    return res


def _as_config_error(fn):
    def wrapped(*args):
        try:
            return fn(*args)
        except (InputError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
    return wrapped


@_as_config_error
def _policy(p: dict, dim: int) -> FlowPolicy:
    pp = p["policy"]
    return FlowPolicy.gaussian_init(dim, pp["steps"], sigma=SigmaSchedule(pp["sigma_kind"], pp["sigma"]))


@_as_config_error
def _reward(p: dict) -> SyntheticReward:
    rp = p["reward"]
    clip = rp["clip_range"]
    return SyntheticReward(np.array(rp["true_center"], dtype=float), rp["hack_coeff"], rp["noise_std"],
                           None if clip is None else tuple(clip), tuple(rp["sensitivities"]))


@_as_config_error
def _train_config(p: dict, shaping: dict, seed: int) -> TrainConfig:
    keys = ("clip_eps", "kl_beta", "lr", "group_size", "prompts_per_batch", "iterations", "inner_epochs", "trust_zeta")
    return TrainConfig(shaping=ShapingConfig(**shaping), seed=seed, **{k: p[k] for k in keys})


def cmd_train(p: dict, seed: int) -> CommandResult:
    reward = _reward(p)
    log = train(_policy(p, reward.dim), reward, _train_config(p, p["shaping"], seed))
    res = CommandResult(["iteration", "proxy_mean", "true_mean", "kl", "grad_norm", "adv_min", "adv_max", "adv_std"])
    res.rows = [[r.iteration, r.proxy_mean, r.true_mean, r.kl, r.grad_norm, r.adv_min, r.adv_max, r.adv_std] for r in log.records]
    if log.records:
        last = log.records[-1]
        res.summary = {
            "iterations": len(log),
            "final_true_mean": last.true_mean,
            "final_proxy_mean": last.proxy_mean,
            "final_kl": last.kl,
            "hack_drift": last.hack_drift,
            "gamma_bound_status": last.gamma_bound_status,
        }
    else:
        res.summary = {"iterations": 0}
    res.summary["final_theta"] = log.final_policy.theta.tolist()
    return res


def cmd_hack_compare(p: dict, seed: int) -> CommandResult:
    reward = _reward(p)
    cfg_a = _train_config(p, p["shaping_a"], seed)
    cfg_b = _train_config(p, p["shaping_b"], seed)
    seeds = [int(s) + seed for s in p["seeds"]]
    cmp = hacking_experiment(cfg_a, cfg_b, reward, seeds, _policy(p, reward.dim))
    res = CommandResult(["seed", "true_a", "true_b", "proxy_a", "proxy_b", "drift_a", "drift_b"])
    for a, b in zip(cmp.runs_a, cmp.runs_b):
        res.rows.append([a.seed, a.final_true, b.final_true, a.final_proxy, b.final_proxy, a.hack_drift, b.hack_drift])
    s = cmp.summary()
    s["b_true_not_worse"] = s["median_final_true_b"] >= s["median_final_true_a"]
    s["a_drift_larger"] = s["median_hack_drift_a"] > s["median_hack_drift_b"]
    res.summary = s
    return res


COMMAND_TABLE = {
    "verify-bias": cmd_verify_bias,
    "verify-oracle": cmd_verify_oracle,
    "verify-trust-region": cmd_verify_trust_region,
    "gamma-bound": cmd_gamma_bound,
    "train": cmd_train,
    "hack-compare": cmd_hack_compare,
}


def run(cfg: ExperimentConfig) -> CommandResult:
    """Execute ``cfg.command`` and write its artifacts to ``cfg.output_dir``."""
    result = COMMAND_TABLE[cfg.command](cfg.parameters, cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = cfg.resolved()
    manifest["build"] = build_info()
    (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    with open(out / "metrics.csv", "w", newline="\n") as fh:
        fh.write(csv_text(result))
    summary = {"command": cfg.command, "seed": cfg.seed, "passed": bool(result.passed), **result.summary}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return result


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
