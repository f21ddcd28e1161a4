"""Command-line experiment driver.

Every option can also come from a JSON document passed with ``--config``;
command-line flags override it, per-environment presets fill what neither
sets, and built-in defaults fill the rest. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plotting
from .dagger import (
    TrainConfig,
    behavioral_cloning,
    context_switches_until_solved,
    ensembledagger_train,
    evaluate_policy,
    first_solved_episode,
    lazydagger_train,
    read_metrics_csv,
    tubedagger_train,
    validate_metrics,
    write_metrics_csv,
)
from .envs import make_system
from .errors import ConfigError, CoverageNotReached, ParseError, TubeDaggerError, ValidationError
from .gating import DoubtGateConfig, TubeGateConfig
from .policies import (
    OptimConfig,
    default_doubt,
    default_expert,
    default_novice,
    load_policy,
    save_policy,
)
from .reachtube import TubeConfig, build_tube, load_tube, save_tube
from .rng import make_rng
from .safety import save_report, tube_contained

log = logging.getLogger("tubedagger")

ALGORITHMS = ("tubedagger", "lazydagger", "ensembledagger", "bc")

# Options that differ per environment; flags and config files still win.
ENV_PRESETS = {
    "inverted_pendulum": {"lr": 1e-2},
    "vanderpol": {"lr": 1e-2},
}

DEFAULT_GATES = {
    "tubedagger": (0.2, 0.7),
    "lazydagger": (0.1, 0.5),
    "ensembledagger": (0.001, 0.01),
    "bc": (0.0, 0.0),
}

BUILTIN = {
    "gamma": 0.2, "mu": 1.1, "radius": 0.1, "batch_size": 512, "max_batches": 8,
    "coverage_samples": 10_000, "ball": False, "include_action": False,
    "episodes": 60, "sigma2": 0.01, "lr": 1e-3, "momentum": 0.9, "epochs": 50,
    "minibatch": 64, "eval_episodes": 5, "stop_on_solve": False, "n_demos": 5,
    "ensemble_size": 5, "workers": 1, "every": 10, "dims": [0, 1], "overlay": False,
    "column": "eval_reward_median", "algorithm": "tubedagger",
}


class UsageError(Exception):
    pass


# --- argument parsing ------------------------------------------------------------------

def _pair(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH but got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError(
            f"invalid threshold pair {text!r}: the lower threshold must be strictly below the upper one "
            "(beta_minus < beta_plus)"
        )
    return lo, hi


def _common(p):
    p.add_argument("--config", help="JSON file with option values (flags override it)")
    p.add_argument("--env", help="environment id")
    p.add_argument("--seed", type=int, help="master seed (falls back to $TUBEDAGGER_SEED, then 0)")
    p.add_argument("--horizon", type=int)
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _train_opts(p):
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--tube", help="tube JSON (tubedagger only)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--sigma2", type=float, help="variance of the expert action noise")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--minibatch", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--stop-on-solve", action="store_true", default=None)
    p.add_argument("--n-demos", type=int, help="expert episodes for the bc baseline")
    p.add_argument("--ensemble-size", type=int)
    p.add_argument("--tau-m", type=float, help="doubt-label action distance (lazydagger)")


def build_parser():
    parser = argparse.ArgumentParser(prog="tubedagger", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-tube", help="build a stochastic reach-tube around a controller")
    _common(p)
    p.add_argument("--gamma", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--radius", type=float, help="radius of the initial ball")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-batches", type=int)
    p.add_argument("--coverage-samples", type=int)
    p.add_argument("--ball", action="store_true", default=None, help="fit balls instead of ellipsoids")
    p.add_argument("--include-action", action="store_true", default=None)
    p.add_argument("--policy", help="policy checkpoint to build the tube around (default: the expert)")
    p.add_argument("--out", help="output tube JSON")

    p = sub.add_parser("train", help="run one training loop per seed")
    _common(p)
    _train_opts(p)
    p.add_argument("--low", "--beta-minus", "--tau-low", dest="low", type=float)
    p.add_argument("--high", "--beta-plus", "--tau-high", dest="high", type=float)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out-dir")

    p = sub.add_parser("sweep", help="train over a grid of threshold pairs and seeds")
    _common(p)
    _train_opts(p)
    p.add_argument("--pairs", type=_pair, nargs="+", help="threshold pairs as LOW,HIGH")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir")

    p = sub.add_parser("eval", help="evaluate a policy checkpoint (or the expert)")
    _common(p)
    p.add_argument("--policy", help="policy checkpoint; omit to evaluate the expert")
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--out", help="optional JSON result file")

    p = sub.add_parser("check-safety", help="slice-wise containment of one tube in another")
    p.add_argument("--config")
    p.add_argument("--expert-tube")
    p.add_argument("--imitator-tube")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true", default=None)

    p = sub.add_parser("plot-tube", help="SVG of slice ellipses projected on two dimensions")
    p.add_argument("--config")
    p.add_argument("--tube")
    p.add_argument("--dims", type=int, nargs=2)
    p.add_argument("--every", type=int, help="show every k-th slice")
    p.add_argument("--overlay", action="store_true", default=None, help="draw the low/high boundaries")
    p.add_argument("--low", type=float)
    p.add_argument("--high", type=float)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true", default=None)

    p = sub.add_parser("plot-metrics", help="SVG line plot of a metrics column")
    p.add_argument("--config")
    p.add_argument("--metrics", nargs="+", help="metrics CSV files")
    p.add_argument("--column")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true", default=None)
    return parser


def resolve(args):
    """Fill unset options from the config file, then env presets, then defaults."""
    opts = {k: v for k, v in vars(args).items() if k not in ("config", "command")}
    config = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError("config must be a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    for k, v in config.items():
        if opts.get(k) is None:
            opts[k] = v
    preset = ENV_PRESETS.get(opts.get("env"), {})
    for k in opts:
        if opts[k] is None:
            opts[k] = preset.get(k, BUILTIN.get(k))
    if "seed" in opts and opts["seed"] is None:
        opts["seed"] = _env_seed()
    if "pairs" in opts and opts["pairs"] is not None:
        opts["pairs"] = [_validated_pair(p) for p in opts["pairs"]]
    return argparse.Namespace(command=args.command, **opts)


def _validated_pair(p):
    if isinstance(p, str):
        return _pair(p)
    lo, hi = (float(v) for v in p)
    if not lo < hi:
        raise UsageError(f"invalid threshold pair ({lo}, {hi}): require beta_minus < beta_plus")
    return lo, hi


def _env_seed():
    raw = os.environ.get("TUBEDAGGER_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"TUBEDAGGER_SEED must be an integer, got {raw!r}") from None


def _require(opts, *names):
    missing = [n for n in names if getattr(opts, n, None) in (None, [], "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


# --- shared builders -------------------------------------------------------------------

def _system(opts):
    try:
        system = make_system(opts.env)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return system.with_horizon(opts.horizon) if opts.horizon else system


def _train_config(opts, seed, low, high):
    gate = None
    if opts.algorithm == "tubedagger":
        gate = TubeGateConfig(low, high)
    elif opts.algorithm in ("lazydagger", "ensembledagger"):
        gate = DoubtGateConfig(low, high, opts.tau_m if opts.algorithm == "lazydagger" else None)
    optim = OptimConfig(lr=opts.lr, momentum=opts.momentum, epochs=opts.epochs, batch_size=opts.minibatch)
    return TrainConfig(
        episodes=opts.episodes, horizon=opts.horizon, sigma2=opts.sigma2, gate=gate, optim=optim,
        eval_episodes=opts.eval_episodes, seed=seed, stop_on_solve=bool(opts.stop_on_solve),
    )


def run_training(opts, seed, low, high, tube=None):
    """One training run; returns (final policy, metrics)."""
    system = _system(opts)
    expert = default_expert(system)
    cfg = _train_config(opts, seed, low, high)
    novice = default_novice(system, make_rng(seed, "init"))
    if opts.algorithm == "tubedagger":
        if tube is None:
            raise ConfigError("tubedagger needs --tube")
        return tubedagger_train(system, expert, novice, tube, cfg)
    if opts.algorithm == "lazydagger":
        doubt = default_doubt(system, make_rng(seed, "doubt-init"))
        novice, _, metrics = lazydagger_train(system, expert, novice, doubt, cfg)
        return novice, metrics
    if opts.algorithm == "ensembledagger":
        members = [default_novice(system, make_rng(seed, "init", i)) for i in range(opts.ensemble_size)]
        members, metrics = ensembledagger_train(system, expert, members, cfg)
        return members[0], metrics
    return behavioral_cloning(system, expert, novice, opts.n_demos, cfg)


def _load_tube_opt(opts):
    if opts.algorithm != "tubedagger":
        return None
    if not opts.tube:
        raise UsageError("--tube is required for the tubedagger algorithm")
    return load_tube(opts.tube)


def _gate_pair(opts):
    lo, hi = DEFAULT_GATES[opts.algorithm]
    lo = lo if opts.low is None else opts.low
    hi = hi if opts.high is None else opts.high
    return lo, hi


def _summary(metrics):
    switches, solved = context_switches_until_solved(metrics)
    return {
        "solved": solved,
        "solved_episode": first_solved_episode(metrics),
        "context_switches_until_solved": switches,
        "final_eval_reward": metrics[-1].eval_reward_median,
        "novice_action_pct_mean": float(np.mean([m.novice_action_pct for m in metrics])),
        "episodes_run": len(metrics),
    }


# --- subcommands -----------------------------------------------------------------------

def cmd_build_tube(opts):
    _require(opts, "env", "out")
    system = _system(opts)
    controller = load_policy(opts.policy) if opts.policy else default_expert(system)
    config = TubeConfig(
        gamma=opts.gamma, mu=opts.mu, initial_radius=opts.radius, batch_size=opts.batch_size,
        max_batches=opts.max_batches, coverage_samples=opts.coverage_samples,
        ellipsoids=not opts.ball, include_action=bool(opts.include_action),
    )
    try:
        tube = build_tube(system, controller, config, rng_seed=opts.seed)
    except CoverageNotReached as exc:
        partial = str(opts.out) + ".partial"
        save_tube(partial, exc.tube)
        log.error("coverage %.4f below target %.4f after %d traces; partial tube written to %s",
                  exc.coverage, 1 - config.gamma, exc.n_traces, partial)
        return 1
    save_tube(opts.out, tube)
    n = tube.source["n_traces"]
    print(f"tube written to {opts.out}: batches={n // config.batch_size} traces={n} "
          f"coverage={tube.source['min_coverage']:.4f} slices={len(tube)}")
    return 0


def cmd_train(opts):
    _require(opts, "env", "out_dir")
    seeds = opts.seeds or [opts.seed]
    low, high = _gate_pair(opts)
    tube = _load_tube_opt(opts)
    out = Path(opts.out_dir)
    for seed in seeds:
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        policy, metrics = run_training(opts, seed, low, high, tube)
        write_metrics_csv(run_dir / "metrics.csv", metrics)
        save_policy(run_dir / "policy.json", policy)
        s = _summary(metrics)
        print(f"seed={seed} solved={s['solved']} solved_episode={s['solved_episode']} "
              f"context_switches_until_solved={s['context_switches_until_solved']} "
              f"final_eval={s['final_eval_reward']:.2f}")
    return 0


SWEEP_COLUMNS = ("low", "high", "seed", "status", "final_eval_reward", "novice_action_pct_mean",
                 "context_switches_until_solved", "solved", "solved_episode", "episodes_run", "error")


def _sweep_job(job):
    opts, low, high, seed, run_dir = job
    row = {"low": low, "high": high, "seed": seed}
    try:
        tube = load_tube(opts.tube) if opts.algorithm == "tubedagger" else None
        policy, metrics = run_training(opts, seed, low, high, tube)
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        write_metrics_csv(Path(run_dir) / "metrics.csv", metrics)
        save_policy(Path(run_dir) / "policy.json", policy)
        row.update(status="ok", error="", **_summary(metrics))
    except (TubeDaggerError, ValueError, OSError, FloatingPointError) as exc:
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def _cell(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def cmd_sweep(opts):
    _require(opts, "env", "pairs", "out_dir")
    if opts.algorithm == "bc":
        raise UsageError("the bc baseline has no thresholds to sweep")
    if opts.algorithm == "tubedagger":
        _require(opts, "tube")
    seeds = opts.seeds or [opts.seed]
    if opts.workers < 1:
        raise UsageError("--workers must be >= 1")
    out = Path(opts.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(opts, lo, hi, seed, str(out / f"pair_{lo:g}_{hi:g}" / f"seed_{seed}"))
            for lo, hi in opts.pairs for seed in seeds]
    if opts.workers == 1:
        rows = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=opts.workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))  # results come back in job order
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in SWEEP_COLUMNS])
    write_sweep_summary(out / "summary.csv", rows)
    groups_reward, groups_pct = {}, {}
    for row in rows:
        key = f"({row['low']:g},{row['high']:g})"
        groups_reward.setdefault(key, [])
        groups_pct.setdefault(key, [])
        if row["status"] == "ok":
            groups_reward[key].append(row["final_eval_reward"])
            groups_pct[key].append(row["novice_action_pct_mean"])
    (out / "eval_reward_boxplot.svg").write_text(
        plotting.boxplot(groups_reward, title=f"{opts.algorithm} on {opts.env}: final eval reward",
                         ylabel="eval reward"))
    (out / "novice_pct_boxplot.svg").write_text(
        plotting.boxplot(groups_pct, title=f"{opts.algorithm} on {opts.env}: novice actions",
                         ylabel="novice action %"))
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"sweep: {len(rows)} runs, {failed} failed; aggregate at {out / 'aggregate.csv'}")
    return 0


SUMMARY_COLUMNS = ("low", "high", "runs", "failed", "solved", "median_final_eval", "std_final_eval",
                   "median_switches_until_solved", "median_novice_action_pct")


def summarize_sweep(rows):
    """Per-pair statistics in first-seen pair order."""
    pairs = {}
    for row in rows:
        pairs.setdefault((row["low"], row["high"]), []).append(row)
    out = []
    for (lo, hi), group in pairs.items():
        ok = [r for r in group if r["status"] == "ok"]
        rewards = [r["final_eval_reward"] for r in ok]
        out.append({
            "low": lo, "high": hi, "runs": len(group), "failed": len(group) - len(ok),
            "solved": sum(bool(r["solved"]) for r in ok),
            "median_final_eval": float(np.median(rewards)) if ok else None,
            "std_final_eval": float(np.std(rewards)) if ok else None,
            "median_switches_until_solved":
                float(np.median([r["context_switches_until_solved"] for r in ok])) if ok else None,
            "median_novice_action_pct":
                float(np.median([r["novice_action_pct_mean"] for r in ok])) if ok else None,
        })
    return out


def write_sweep_summary(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in summarize_sweep(rows):
            w.writerow([_cell(s[c]) for c in SUMMARY_COLUMNS])


def cmd_eval(opts):
    _require(opts, "env")
    system = _system(opts)
    policy = load_policy(opts.policy) if opts.policy else default_expert(system)
    if opts.policy and policy.input_dim != system.state_dim:
        raise ConfigError(f"policy expects {policy.input_dim} inputs, {opts.env} has {system.state_dim}")
    median, std = evaluate_policy(system, policy, opts.eval_episodes, opts.seed)
    result = {"env": opts.env, "policy": opts.policy or "expert", "episodes": opts.eval_episodes,
              "seed": opts.seed, "eval_reward_median": median, "eval_reward_std": std,
              "solved": median >= system.solved_threshold}
    text = json.dumps(result, sort_keys=True)
    if opts.out:
        Path(opts.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_check_safety(opts):
    _require(opts, "expert_tube", "imitator_tube", "out")
    report = tube_contained(load_tube(opts.imitator_tube), load_tube(opts.expert_tube))
    save_report(opts.out, report)
    verdict = "contained" if report.all_contained else f"violated first at slice {report.first_violation}"
    print(f"imitator tube {verdict}; probability p={report.probability_p:.3f} "
          f"(gamma imitator {report.gamma_imitator}, expert {report.gamma_expert})")
    return 0


def cmd_plot_tube(opts):
    _require(opts, "tube", "out")
    tube = load_tube(opts.tube)
    overlay = None
    if opts.overlay:
        overlay = (0.2 if opts.low is None else opts.low, 0.7 if opts.high is None else opts.high)
    try:
        svg = plotting.tube_plot(tube, tuple(opts.dims), every=opts.every, overlay=overlay)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    Path(opts.out).write_text(svg)
    print(f"plot written to {opts.out}")
    return 0


def cmd_plot_metrics(opts):
    _require(opts, "metrics", "out")
    series = {}
    for path in opts.metrics:
        records = read_metrics_csv(path)
        validate_metrics(records)
        if not records:
            continue
        if not hasattr(records[0], opts.column):
            raise UsageError(f"unknown metrics column {opts.column!r}")
        series[str(path)] = ([r.episode for r in records], [float(getattr(r, opts.column)) for r in records])
    if not series:
        raise UsageError("no metrics rows to plot")
    Path(opts.out).write_text(plotting.line_plot(series, title=opts.column, ylabel=opts.column))
    print(f"plot written to {opts.out}")
    return 0


COMMANDS = {
    "build-tube": cmd_build_tube,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "check-safety": cmd_check_safety,
    "plot-tube": cmd_plot_tube,
    "plot-metrics": cmd_plot_metrics,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except argparse.ArgumentTypeError as exc:
        print(f"tubedagger: error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError) as exc:
        print(f"tubedagger: error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ValidationError, TubeDaggerError, OSError, ValueError) as exc:
        print(f"tubedagger: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
