"""Rollouts, training loop, evaluation and metrics export."""

from __future__ import annotations

import bisect
import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import IO

import numpy as np

from .credit import CreditParams, compact_advantages
from .envs import Env, Status, make_env
from .graph import aggregate, compact_graph, compute_distances
from .policy import OptimConfig, TabularPolicy, apply_update, surrogate_loss
from .probes import monotonicity_probe
from .rollout import Outcome, Step, Trajectory, TrajectorySet

__all__ = [
    "ALGORITHMS",
    "ExperimentConfig",
    "MetricsLog",
    "TrainingError",
    "rollout_group",
    "dynamic_sample",
    "evaluate",
    "train",
    "iterations_to_threshold",
    "write_metrics_csv",
    "write_plot_data",
    "ema",
]

log = logging.getLogger(__name__)

ALGORITHMS = ("graphgpo", "grpo", "gigpo")
CSV_HEADER = (
    "iteration",
    "train_sr",
    "eval_sr",
    "mean_abs_adv",
    "mean_len",
    "nodes",
    "edges",
    "ms_rollout",
    "ms_graph",
    "ms_adv",
    "ms_update",
)

# stream tags mixed into the seed sequence alongside (seed, iteration)
_UPDATE_STREAM = 1_000_003
_EVAL_STREAM = 2_000_003


class TrainingError(RuntimeError):
    pass


class _PolicyCache:
    """Read-only view of a frozen policy with memoized log-probabilities."""

    def __init__(self, pol: TabularPolicy, temperature: float = 1.0):
        self.pol = pol
        self.temperature = temperature
        self._logp: dict = {}
        self._cdf: dict = {}

    def logp(self, s) -> np.ndarray:
        v = self._logp.get(s)
        if v is None:
            z = self.pol.masked_logits(s) / self.temperature
            z = z - z.max()
            v = self._logp[s] = z - math.log(np.exp(z).sum())
        return v

    def cdf(self, s) -> list[float]:
        c = self._cdf.get(s)
        if c is None:
            c = self._cdf[s] = np.cumsum(np.exp(self.logp(s))).tolist()
        return c

    def sample(self, s, u: float) -> int:
        c = self.cdf(s)
        return min(bisect.bisect_right(c, u * c[-1]), len(c) - 1)

    def greedy(self, s) -> int:
        return int(np.argmax(self.pol.masked_logits(s)))


def _as_cache(pol, temperature=1.0) -> _PolicyCache:
    if isinstance(pol, _PolicyCache):
        return pol
    return _PolicyCache(pol, temperature)


def _run_episode(env: Env, cache: _PolicyCache, start, T: int, rng, greedy: bool) -> Trajectory:
    state = start
    steps = []
    outcome = Outcome.TRUNCATED
    for _ in range(T):
        key = env.key(state)
        action = cache.greedy(key) if greedy else cache.sample(key, rng.random())
        nxt, status, cost, penalty = env.step(state, action)
        steps.append(Step(key, action, env.key(nxt), cost, penalty))
        state = nxt
        if status is Status.SUCCESS:
            outcome = Outcome.SUCCESS
            break
        if status is Status.TRAP:
            outcome = Outcome.FAIL_TERMINAL
            break
    return Trajectory(tuple(steps), outcome)


def rollout_group(
    env: Env,
    pol,
    M: int,
    T: int | None,
    rng: np.random.Generator,
    task_seed: int = 0,
    greedy: bool = False,
    task_id: str | None = None,
    r_succ: float = 10.0,
) -> TrajectorySet:
    """Sample ``M`` trajectories from identical resets of one task."""
    if M < 1:
        raise ValueError("group size must be >= 1")
    T = env.max_steps if T is None else T
    cache = _as_cache(pol)
    start = env.reset(task_seed)
    if env.status(start) is not Status.RUNNING:
        raise TrainingError(f"{env.name}: reset state for task {task_seed} is already terminal")
    trajs = tuple(_run_episode(env, cache, start, T, rng, greedy) for _ in range(M))
    return TrajectorySet(
        task_id=task_id or f"{env.name}/{task_seed}",
        trajectories=trajs,
        r_succ=r_succ,
        invalid_penalty=env.invalid_penalty,
    )


def _mixed(tset: TrajectorySet) -> bool:
    n = tset.successes()
    return 0 < n < len(tset)


def dynamic_sample(
    env: Env,
    pol,
    M: int,
    T: int | None,
    max_attempts: int,
    rng: np.random.Generator,
    task_seed: int = 0,
    task_id: str | None = None,
    r_succ: float = 10.0,
) -> tuple[TrajectorySet, int]:
    """Resample the whole group while every outcome agrees.

    Gives up after ``max_attempts`` groups and returns the last one. The RNG
    stream continues across attempts. Returns ``(group, attempts)``.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    cache = _as_cache(pol)
    for attempt in range(1, max_attempts + 1):
        tset = rollout_group(env, cache, M, T, rng, task_seed=task_seed, task_id=task_id, r_succ=r_succ)
        if _mixed(tset):
            break
    return tset, attempt


def evaluate(pol, env: Env, episodes: int, rng: np.random.Generator, temperature: float = 0.4, T: int | None = None) -> float:
    """Success fraction over ``episodes`` runs, cycling through the env's tasks.

    Sampling uses logits scaled by ``1/temperature``; ``temperature=0`` means
    greedy argmax.
    """
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    T = env.max_steps if T is None else T
    greedy = temperature == 0
    cache = _PolicyCache(pol, 1.0 if greedy else temperature)
    wins = 0
    for j in range(episodes):
        traj = _run_episode(env, cache, env.reset(j), T, rng, greedy)
        wins += traj.outcome is Outcome.SUCCESS
    return wins / episodes


@dataclass
class ExperimentConfig:
    env: str = "chaintrap"
    algorithm: str = "graphgpo"
    group_size: int = 8
    tasks_per_iteration: int = 4
    iterations: int = 60
    credit: CreditParams | None = None
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(learning_rate=2.0))
    seed: int = 0
    max_steps: int | None = None
    dynamic_sampling: bool = False
    max_attempts: int = 10
    eval_every: int = 1
    eval_episodes: int = 64
    eval_temperature: float = 0.4
    threads: int = 1
    check_monotonicity: bool = False
    record_timing: bool = True
    stop_at: float | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.group_size < 2:
            raise ValueError("group methods need group_size >= 2")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.iterations < 0 or self.tasks_per_iteration < 1:
            raise ValueError("iterations must be >= 0 and tasks_per_iteration >= 1")
        if self.credit is None:
            self.credit = CreditParams(omega=make_env(self.env).default_omega)

    def effective_credit(self) -> CreditParams:
        if self.algorithm == "grpo":
            return replace(self.credit, beta_g=0.0)
        return self.credit


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)
    policy: TabularPolicy | None = None

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]


@dataclass
class _TaskResult:
    tset: TrajectorySet
    batch: list  # (state, action, advantage, old_logp)
    nodes: int
    edges: int
    abs_adv_sum: float
    violations: int
    attempts: int
    ms_rollout: float
    ms_graph: float
    ms_adv: float
    ms_batch: float


def _process_task(cfg: ExperimentConfig, env: Env, cache: _PolicyCache, iteration: int, k: int) -> _TaskResult:
    rng = np.random.default_rng([cfg.seed, iteration, k])
    task_seed = int(rng.integers(env.num_tasks))
    credit = cfg.effective_credit()
    T = cfg.max_steps or env.max_steps
    task_id = f"{env.name}/{task_seed}"

    t0 = time.perf_counter()
    if cfg.dynamic_sampling:
        tset, attempts = dynamic_sample(env, cache, cfg.group_size, T, cfg.max_attempts, rng, task_seed, task_id, credit.r_succ)
    else:
        tset = rollout_group(env, cache, cfg.group_size, T, rng, task_seed, task_id=task_id, r_succ=credit.r_succ)
        attempts = 1
    t1 = time.perf_counter()
    cg = compact_graph(tset)
    t2 = time.perf_counter()
    cc = compact_advantages(tset, cg, credit, "gigpo" if cfg.algorithm == "gigpo" else "graph")
    t3 = time.perf_counter()

    # sampling log-probabilities for the ratio belong to the update phase
    logp = cache.logp
    batch = [
        (s, a, x, float(logp(s)[a]))
        for s, a, x in zip(
            (step.state for traj in tset.trajectories for step in traj.steps),
            cg.step_act.tolist(),
            cc.step_adv.tolist(),
        )
    ]
    t4 = time.perf_counter()

    violations = 0
    if cfg.check_monotonicity:
        g = aggregate(tset)
        violations = len(monotonicity_probe(g, compute_distances(g), credit))
    abs_adv = float(np.abs(cc.edge_adv)[cg.edge_of_step].sum())
    return _TaskResult(
        tset, batch, len(cg.nodes), cg.n_edges, abs_adv, violations, attempts,
        (t1 - t0) * 1e3, (t2 - t1) * 1e3, (t3 - t2) * 1e3, (t4 - t3) * 1e3,
    )


def _thread_count(cfg: ExperimentConfig) -> int:
    """``cfg.threads`` capped by ``GRAPHGPO_THREADS`` when that is set."""
    n = cfg.threads
    cap = os.environ.get("GRAPHGPO_THREADS", "").strip()
    if cap.isdigit():
        n = min(n, int(cap))
    return max(1, n)


def train(cfg: ExperimentConfig, policy: TabularPolicy | None = None) -> MetricsLog:
    """Run the full rollout / graph / advantage / update loop.

    Deterministic for a fixed config and seed; task-level work may run on a
    thread pool but the update phase consumes results in task order.
    """
    env = make_env(cfg.env, **({"max_steps": cfg.max_steps} if cfg.max_steps else {}))
    pol = policy if policy is not None else env.policy()
    ref_pol = pol.copy()
    out = MetricsLog(policy=pol)
    threads = _thread_count(cfg)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for it in range(cfg.iterations):
            old_pol = pol.copy()
            cache = _PolicyCache(old_pol)
            ks = range(cfg.tasks_per_iteration)
            if pool is None:
                results = [_process_task(cfg, env, cache, it, k) for k in ks]
            else:
                results = list(pool.map(lambda k: _process_task(cfg, env, cache, it, k), ks))

            t0 = time.perf_counter()
            batch = [row for r in results for row in r.batch]
            order = np.random.default_rng([cfg.seed, it, _UPDATE_STREAM]).permutation(len(batch))
            mb = cfg.optim.minibatch_size
            for _ in range(cfg.optim.epochs):
                for lo in range(0, len(batch), mb):
                    chunk = [batch[j] for j in order[lo : lo + mb]]
                    loss, grad = surrogate_loss(
                        pol, old_pol, ref_pol, [(s, a, x) for s, a, x, _ in chunk], cfg.optim,
                        old_logp=[lp for _, _, _, lp in chunk],
                    )
                    if not math.isfinite(loss):
                        raise TrainingError(f"non-finite loss at iteration {it}")
                    apply_update(pol, grad, cfg.optim)
            ms_update = (time.perf_counter() - t0) * 1e3

            eval_sr = None
            if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                erng = np.random.default_rng([cfg.seed, it, _EVAL_STREAM])
                eval_sr = evaluate(pol, env, cfg.eval_episodes, erng, cfg.eval_temperature)

            n_traj = sum(len(r.tset) for r in results)
            n_steps = sum(r.tset.total_steps() for r in results)
            timing = cfg.record_timing
            rec = {
                "iteration": it,
                "train_sr": sum(r.tset.successes() for r in results) / n_traj,
                "eval_sr": eval_sr,
                "mean_abs_adv": sum(r.abs_adv_sum for r in results) / n_steps,
                "mean_len": n_steps / n_traj,
                "nodes": sum(r.nodes for r in results),
                "edges": sum(r.edges for r in results),
                "ms_rollout": sum(r.ms_rollout for r in results) if timing else 0.0,
                "ms_graph": sum(r.ms_graph for r in results) if timing else 0.0,
                "ms_adv": sum(r.ms_adv for r in results) if timing else 0.0,
                "ms_update": ms_update + sum(r.ms_batch for r in results) if timing else 0.0,
                "violations": sum(r.violations for r in results),
                "attempts": sum(r.attempts for r in results),
            }
            out.records.append(rec)
            log.debug("iter %d train_sr=%.3f eval_sr=%s", it, rec["train_sr"], eval_sr)
            if cfg.stop_at is not None and eval_sr is not None and eval_sr >= cfg.stop_at:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return out


def iterations_to_threshold(mlog: MetricsLog, threshold: float = 0.9) -> int | None:
    """Number of iterations completed when eval success first reaches ``threshold``."""
    for rec in mlog.records:
        if rec["eval_sr"] is not None and rec["eval_sr"] >= threshold:
            return rec["iteration"] + 1
    return None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def write_metrics_csv(mlog: MetricsLog, sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in mlog.records:
        writer.writerow([_fmt(rec[c]) for c in CSV_HEADER])


def ema(values, alpha: float = 0.95) -> list[float]:
    """Exponential moving average; ``None`` entries carry the previous value."""
    out = []
    acc = None
    for v in values:
        if v is not None:
            acc = v if acc is None else alpha * acc + (1 - alpha) * v
        out.append(acc)
    return out


def write_plot_data(mlog: MetricsLog, sink: IO[str], alpha: float = 0.95) -> None:
    """Success-rate curves with EMA-smoothed companions, for plotting only."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["iteration", "train_sr", "train_sr_ema", "eval_sr", "eval_sr_ema"])
    tr = mlog.column("train_sr")
    ev = mlog.column("eval_sr")
    for rec, a, b in zip(mlog.records, ema(tr, alpha), ema(ev, alpha)):
        writer.writerow([rec["iteration"], _fmt(rec["train_sr"]), _fmt(a), _fmt(rec["eval_sr"]), _fmt(b)])
