"""Command-line front end: train, eval, inspect-graph, probe, convert.

Exit codes: 0 success, 1 I/O or input-format error, 2 usage error,
3 property violation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .credit import CreditParams, combined_advantages, write_advantage_dump
from .envs import ENV_NAMES, make_env
from .graph import aggregate, compute_distances, export_dot
from .harness import (
    ALGORITHMS,
    ExperimentConfig,
    evaluate,
    iterations_to_threshold,
    train,
    write_metrics_csv,
)
from .policy import OptimConfig, load_checkpoint, save_checkpoint
from .probes import (
    brute_force_distances,
    format_variance_report,
    monotonicity_probe,
    random_graph,
    variance_probe,
)
from .rollout import RolloutParseError, RolloutValidationError, read_rollouts, write_rollouts

log = logging.getLogger("graphgpo")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2, 3

# flag name -> (type, default); ``None`` default for --omega means per-env.
TRAIN_FLAGS = {
    "env": (str, "chaintrap"),
    "algo": (str, "graphgpo"),
    "group-size": (int, 8),
    "tasks": (int, 4),
    "iters": (int, 60),
    "max-steps": (int, None),
    "omega": (float, None),
    "rsucc": (float, 10.0),
    "beta-g": (float, 1.0),
    "beta-e": (float, 1.0),
    "gigpo-lambda": (float, 0.95),
    "clip-eps": (float, 0.2),
    "kl-coef": (float, 0.01),
    "lr": (float, 2.0),
    "seed": (int, 0),
    "dynamic-sampling": ("bool", False),
    "max-attempts": (int, 10),
    "out-dir": (str, "runs"),
}
SWEEPABLE = ("omega", "rsucc", "beta-g", "beta-e", "gigpo-lambda", "clip-eps", "kl-coef", "lr")


class UsageError(Exception):
    pass


class ViolationError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(name: str, raw: str):
    kind, _ = TRAIN_FLAGS[name]
    try:
        return _parse_bool(raw) if kind == "bool" else kind(raw)
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None


def read_config(path: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use flag names."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (x.strip() for x in line.split("=", 1))
            key = key.lstrip("-").replace("_", "-")
            if key not in TRAIN_FLAGS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _convert(key, value)
    return out


def _add_train_flags(p: argparse.ArgumentParser, names=None) -> None:
    for name in names or TRAIN_FLAGS:
        kind, default = TRAIN_FLAGS[name]
        dest = name.replace("-", "_")
        if kind == "bool":
            p.add_argument(f"--{name}", dest=dest, action="store_const", const=True, default=None)
        else:
            help_default = "per-env" if name == "omega" else default
            p.add_argument(f"--{name}", dest=dest, type=kind, default=None, help=f"default: {help_default}")
    p.add_argument("--config", help="key = value file; command-line flags take precedence")


def resolve(ns: argparse.Namespace, names=None) -> dict:
    """Merge built-in defaults, the config file and explicit flags, in that order."""
    names = list(names or TRAIN_FLAGS)
    values = {n: TRAIN_FLAGS[n][1] for n in names}
    if getattr(ns, "config", None):
        cfg = read_config(ns.config)
        values.update({k: v for k, v in cfg.items() if k in values})
    for n in names:
        given = getattr(ns, n.replace("-", "_"), None)
        if given is not None:
            values[n] = given
    return values


def _threads() -> int:
    cap = os.environ.get("GRAPHGPO_THREADS", "").strip()
    if not cap:
        return 1
    if not cap.isdigit() or int(cap) < 1:
        raise UsageError(f"GRAPHGPO_THREADS must be a positive integer, got {cap!r}")
    return int(cap)


def build_config(v: dict) -> ExperimentConfig:
    if v["env"] not in ENV_NAMES:
        raise UsageError(f"--env must be one of {', '.join(ENV_NAMES)}")
    if v["algo"] not in ALGORITHMS:
        raise UsageError(f"--algo must be one of {', '.join(ALGORITHMS)}")
    env_kwargs = {"max_steps": v["max-steps"]} if v["max-steps"] else {}
    omega = v["omega"] if v["omega"] is not None else make_env(v["env"], **env_kwargs).default_omega
    try:
        credit = CreditParams(
            omega=omega,
            r_succ=v["rsucc"],
            beta_g=v["beta-g"],
            beta_e=v["beta-e"],
            gigpo_lambda=v["gigpo-lambda"],
        )
        optim = OptimConfig(clip_eps=v["clip-eps"], kl_coef=v["kl-coef"], learning_rate=v["lr"])
        tasks = v["tasks"]
        return ExperimentConfig(
            env=v["env"],
            algorithm=v["algo"],
            group_size=v["group-size"],
            tasks_per_iteration=tasks,
            iterations=v["iters"],
            credit=credit,
            optim=optim,
            seed=v["seed"],
            max_steps=v["max-steps"],
            dynamic_sampling=v["dynamic-sampling"],
            max_attempts=v["max-attempts"],
            threads=min(tasks, _threads()),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _parse_sweep(text: str) -> tuple[str, list[float]]:
    if "=" not in text:
        raise UsageError("--sweep expects name=v1,v2,...")
    name, raw = text.split("=", 1)
    name = name.strip().replace("_", "-")
    if name not in SWEEPABLE:
        raise UsageError(f"--sweep supports {', '.join(SWEEPABLE)}")
    try:
        vals = [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad sweep values {raw!r}") from None
    if not vals:
        raise UsageError("--sweep needs at least one value")
    return name, vals


def _run_one(values: dict, out_dir: Path, check: bool) -> dict:
    cfg = build_config(values)
    cfg.check_monotonicity = check
    t0 = time.perf_counter()
    mlog = train(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        write_metrics_csv(mlog, fh)
    with open(out_dir / "policy.ckpt", "w", encoding="utf-8") as fh:
        save_checkpoint(mlog.policy, fh)
    last = mlog.records[-1] if mlog.records else {}
    summary = {
        "iterations": len(mlog),
        "final_eval_sr": last.get("eval_sr"),
        "iters_to_0.9": iterations_to_threshold(mlog, 0.9),
        "violations": sum(r["violations"] for r in mlog.records),
        "seconds": time.perf_counter() - t0,
    }
    print(
        f"{out_dir}: iterations={summary['iterations']} final_eval_sr={summary['final_eval_sr']} "
        f"iters_to_0.9={summary['iters_to_0.9']} ({summary['seconds']:.1f}s)"
    )
    if summary["violations"]:
        raise ViolationError(f"{summary['violations']} monotonicity violations during training")
    return summary


def cmd_train(ns) -> int:
    values = resolve(ns)
    out = Path(values["out-dir"])
    if ns.sweep is None:
        _run_one(values, out, ns.check_monotonicity)
        return EXIT_OK
    name, sweep = _parse_sweep(ns.sweep)
    rows = []
    for x in sweep:
        run_vals = dict(values, **{name: x})
        summary = _run_one(run_vals, out / f"{name}={x:g}", ns.check_monotonicity)
        rows.append((x, summary))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([name, "final_eval_sr", "iters_to_0.9"])
        for x, s in rows:
            w.writerow([f"{x:g}", s["final_eval_sr"], "" if s["iters_to_0.9"] is None else s["iters_to_0.9"]])
    return EXIT_OK


def cmd_eval(ns) -> int:
    values = resolve(ns, ["env", "max-steps", "seed"])
    if values["env"] not in ENV_NAMES:
        raise UsageError(f"--env must be one of {', '.join(ENV_NAMES)}")
    env = make_env(values["env"], **({"max_steps": values["max-steps"]} if values["max-steps"] else {}))
    if ns.checkpoint:
        with open(ns.checkpoint, encoding="utf-8") as fh:
            pol = load_checkpoint(fh, env.n_actions, env.admissible_for_key)
    else:
        pol = env.policy()
    rng = np.random.default_rng(values["seed"])
    sr = evaluate(pol, env, ns.episodes, rng, ns.temperature)
    print(f"success_rate {sr:.6g}")
    return EXIT_OK


def distance_table(g, dm) -> str:
    rows = [("state", "role", "d")]
    for s in sorted(g.nodes, key=lambda s: s.bytes):
        role = "goal" if s in g.goal_nodes else "fail" if s in g.fail_terminals else "inner"
        d = dm.dist[s]
        rows.append((s.short(40), role, "inf" if math.isinf(d) else f"{d:g}"))
    w0 = max(len(r[0]) for r in rows)
    lines = [f"{a:<{w0}}  {b:<5}  {c}" for a, b, c in rows]
    lines.append(f"d_max = {dm.d_max:g}")
    return "\n".join(lines) + "\n"


def cmd_inspect(ns) -> int:
    with open(ns.rollouts, encoding="utf-8") as fh:
        tset = read_rollouts(fh)
    g = aggregate(tset)
    dm = compute_distances(g)
    dot = export_dot(g, dm)
    table = distance_table(g, dm)
    if ns.out_dir:
        out = Path(ns.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "graph.dot").write_text(dot, encoding="utf-8")
        (out / "distances.txt").write_text(table, encoding="utf-8")
    else:
        sys.stdout.write(dot)
        sys.stdout.write("\n")
        sys.stdout.write(table)
    if ns.advantages:
        p = CreditParams(omega=ns.omega, r_succ=tset.r_succ)
        adv = combined_advantages(tset, g, dm, p)
        with open(ns.advantages, "w", encoding="utf-8") as fh:
            write_advantage_dump(tset, g, adv, fh)
    return EXIT_OK


def _probe_distances(n: int, rng) -> int:
    bad = 0
    for _ in range(n):
        g = random_graph(rng)
        fast, slow = compute_distances(g), brute_force_distances(g)
        if fast.dist != slow.dist or fast.d_max != slow.d_max:
            bad += 1
    print(f"distances: {n} random graphs, {bad} mismatches")
    return bad


def _probe_monotonicity(n: int, omegas, rng) -> int:
    bad = 0
    for _ in range(n):
        g = random_graph(rng)
        dm = compute_distances(g)
        for w in omegas:
            bad += len(monotonicity_probe(g, dm, CreditParams(omega=w)))
    print(f"monotonicity: {n} random graphs x omega {list(omegas)}, {bad} violations")
    return bad


def _probe_variance(n: int, seed: int) -> int:
    bad = 0
    for name in ("chaintrap", "keydoor"):
        env = make_env(name)
        reports = variance_probe(env, env.policy(), n, CreditParams(omega=env.default_omega), seed=seed)
        v = sum(r.violations for r in reports)
        print(f"variance: {name}, {n} batches, {len(reports)} qualifying edges, {v} violations")
        print(format_variance_report(reports))
        bad += v
    return bad


def cmd_probe(ns) -> int:
    rng = np.random.default_rng(ns.seed)
    omegas = [ns.omega] if ns.omega is not None else [0.1, 0.5, 0.9]
    suites = ("distances", "monotonicity", "variance") if ns.suite == "all" else (ns.suite,)
    bad = 0
    for suite in suites:
        if suite == "distances":
            bad += _probe_distances(ns.graphs, rng)
        elif suite == "monotonicity":
            bad += _probe_monotonicity(ns.graphs, omegas, rng)
        else:
            bad += _probe_variance(ns.batches, ns.seed)
    if bad:
        raise ViolationError(f"{bad} property violations")
    return EXIT_OK


def cmd_convert(ns) -> int:
    with open(ns.input, encoding="utf-8") as fh:
        tset = read_rollouts(fh)
    if ns.output == "-":
        n = write_rollouts(tset, sys.stdout)
    else:
        with open(ns.output, "w", encoding="utf-8") as fh:
            n = write_rollouts(tset, fh)
    print(f"validated {len(tset)} trajectories, wrote {n} records", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphgpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a tabular policy and write metrics.csv plus a checkpoint")
    _add_train_flags(p)
    p.add_argument("--sweep", help="name=v1,v2,... runs one training per value")
    p.add_argument("--check-monotonicity", action="store_true", help="probe every training graph; exit 3 on violation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print the success rate of a checkpoint (or the uniform policy)")
    _add_train_flags(p, ["env", "max-steps", "seed"])
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-graph", help="build the transition graph of a rollout file")
    p.add_argument("rollouts")
    p.add_argument("--out-dir", help="write graph.dot and distances.txt here instead of stdout")
    p.add_argument("--advantages", help="also write per-step advantage records to this file")
    p.add_argument("--omega", type=float, default=0.1)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("probe", help="run property and oracle probes")
    p.add_argument("--suite", choices=("monotonicity", "variance", "distances", "all"), default="all")
    p.add_argument("--graphs", type=int, default=500)
    p.add_argument("--batches", type=int, default=1000, help="rollout groups for the variance suite")
    p.add_argument("--omega", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("convert", help="validate a rollout file and rewrite it canonically")
    p.add_argument("input")
    p.add_argument("output", help="output path, or - for stdout")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return ns.func(ns)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"graphgpo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ViolationError as exc:
        print(f"graphgpo: violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (OSError, RolloutParseError, RolloutValidationError) as exc:
        print(f"graphgpo: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
