"""Tabular softmax policy and the clipped surrogate objective."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .rollout import StateKey

__all__ = [
    "TabularPolicy",
    "OptimConfig",
    "PolicyContractError",
    "NonFiniteUpdateError",
    "action_probabilities",
    "surrogate_loss",
    "kl_exact",
    "apply_update",
    "save_checkpoint",
    "load_checkpoint",
]


class PolicyContractError(ValueError):
    pass


class NonFiniteUpdateError(FloatingPointError):
    pass


MASKED_LOGIT = -1e30


class TabularPolicy:
    """Softmax over per-state logit vectors; unseen states have zero logits.

    Logit vectors span the environment's full action set. ``admissible``, if
    given, maps a StateKey to the action ids allowed there; the rest are
    masked out of every distribution (probability exactly zero).
    """

    def __init__(
        self,
        n_actions: int,
        admissible: Callable[[StateKey], Sequence[int]] | None = None,
        logits: dict[StateKey, np.ndarray] | None = None,
    ):
        if n_actions < 1:
            raise PolicyContractError("policy needs at least one action")
        self.n_actions = n_actions
        self.admissible = admissible
        self.logits: dict[StateKey, np.ndarray] = {} if logits is None else logits

    def admissible_actions(self, s: StateKey) -> Sequence[int]:
        acts = range(self.n_actions) if self.admissible is None else self.admissible(s)
        if len(acts) == 0:
            raise PolicyContractError(f"state {s!r} has no admissible actions")
        return acts

    def arity(self, s: StateKey) -> int:
        return len(self.admissible_actions(s))

    def logits_for(self, s: StateKey) -> np.ndarray:
        row = self.logits.get(s)
        if row is None:
            return np.zeros(self.n_actions)
        return row

    def masked_logits(self, s: StateKey) -> np.ndarray:
        row = self.logits_for(s)
        if self.admissible is None:
            return row
        acts = self.admissible_actions(s)
        if len(acts) == self.n_actions:
            return row
        out = np.full(self.n_actions, MASKED_LOGIT)
        idx = list(acts)
        out[idx] = row[idx]
        return out

    def copy(self) -> TabularPolicy:
        return TabularPolicy(self.n_actions, self.admissible, {s: row.copy() for s, row in self.logits.items()})

    def __eq__(self, other):
        if not isinstance(other, TabularPolicy):
            return NotImplemented
        keys = set(self.logits) | set(other.logits)
        return all(np.array_equal(self.logits_for(s), other.logits_for(s)) for s in keys)


def _softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = z / temperature if temperature != 1.0 else z
    e = np.exp(z - z.max())
    return e / e.sum()


def action_probabilities(pol: TabularPolicy, s: StateKey, temperature: float = 1.0) -> np.ndarray:
    return _softmax(pol.masked_logits(s), temperature)


def log_probability(pol: TabularPolicy, s: StateKey, a: int) -> float:
    z = pol.masked_logits(s)
    m = z.max()
    return float(z[a] - m - math.log(np.exp(z - m).sum()))


@dataclass(frozen=True)
class OptimConfig:
    clip_eps: float = 0.2
    kl_coef: float = 0.01
    learning_rate: float = 1.0
    minibatch_size: int = 64
    epochs: int = 1

    def __post_init__(self):
        if not 0.0 < self.clip_eps <= 1.0:
            raise ValueError("clip_eps must lie in (0, 1]")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.minibatch_size < 1 or self.epochs < 1:
            raise ValueError("minibatch_size and epochs must be positive")


def _batch_tables(pol, ref_pol, states: Sequence[StateKey]):
    row_of: dict[StateKey, int] = {}
    uniq: list[StateKey] = []
    rows = np.empty(len(states), dtype=np.int64)
    for i, s in enumerate(states):
        r = row_of.get(s)
        if r is None:
            r = row_of[s] = len(uniq)
            uniq.append(s)
        rows[i] = r
    logits = np.stack([pol.masked_logits(s) for s in uniq]) if uniq else np.zeros((0, pol.n_actions))
    ref = np.stack([ref_pol.masked_logits(s) for s in uniq]) if uniq else np.zeros((0, pol.n_actions))
    return uniq, rows, logits, ref


def surrogate_loss(
    pol: TabularPolicy,
    old_pol: TabularPolicy,
    ref_pol: TabularPolicy,
    batch: Sequence[tuple[StateKey, int, float]],
    cfg: OptimConfig,
    old_logp: Sequence[float] | None = None,
) -> tuple[float, dict[StateKey, np.ndarray]]:
    """Clipped surrogate loss (to minimize) plus exact KL penalty.

    Returns the scalar loss and its gradient with respect to the logits of
    every state touched by the batch. ``old_logp`` may be supplied to skip
    recomputing sampling log-probabilities from ``old_pol``.
    """
    states = [s for s, _, _ in batch]
    actions = np.fromiter((a for _, a, _ in batch), dtype=np.int64, count=len(batch))
    adv = np.fromiter((x for _, _, x in batch), dtype=np.float64, count=len(batch))
    if not np.isfinite(adv).all():
        raise PolicyContractError("advantages must be finite")
    if old_logp is None:
        old_logp = [log_probability(old_pol, s, a) for s, a, _ in batch]
    old = np.asarray(old_logp, dtype=np.float64)
    uniq, rows, logits, ref = _batch_tables(pol, ref_pol, states)
    loss, grad, _ = kernels.surrogate_loss_grad(logits, ref, rows, actions, adv, old, cfg.clip_eps, cfg.kl_coef)
    return float(loss), {s: grad[i] for i, s in enumerate(uniq)}


def kl_exact(pol: TabularPolicy, ref_pol: TabularPolicy, states: Iterable[StateKey]) -> float:
    """Mean over ``states`` of KL(pol(.|s) || ref_pol(.|s))."""
    total = 0.0
    n = 0
    for s in states:
        p = action_probabilities(pol, s)
        q = action_probabilities(ref_pol, s)
        nz = p > 0
        total += float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))
        n += 1
    return max(total / n, 0.0) if n else 0.0


def apply_update(pol: TabularPolicy, gradient: dict[StateKey, np.ndarray], cfg: OptimConfig) -> TabularPolicy:
    """One gradient-descent step on the touched logits, in place.

    The whole update is rejected if any gradient entry is non-finite.
    """
    for s, g in gradient.items():
        if not np.isfinite(g).all():
            raise NonFiniteUpdateError(f"non-finite gradient at state {s!r}")
    for s, g in gradient.items():
        if not g.any():
            continue
        pol.logits[s] = pol.logits_for(s) - cfg.learning_rate * g
    return pol


def save_checkpoint(pol: TabularPolicy, sink: IO[str]) -> int:
    count = 0
    for s in sorted(pol.logits, key=lambda k: k.bytes):
        for a, logit in enumerate(pol.logits[s].tolist()):
            rec = {"state_key_bytes": s.b64(), "action": a, "logit": logit}
            sink.write(json.dumps(rec, separators=(",", ":")) + "\n")
            count += 1
    return count


def load_checkpoint(
    source: Iterable[str],
    n_actions: int,
    admissible: Callable[[StateKey], Sequence[int]] | None = None,
) -> TabularPolicy:
    rows: dict[StateKey, dict[int, float]] = {}
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            s = StateKey.from_b64(rec["state_key_bytes"])
            rows.setdefault(s, {})[int(rec["action"])] = float(rec["logit"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"checkpoint line {lineno}: {exc}") from None
    pol = TabularPolicy(n_actions, admissible)
    for s, entries in rows.items():
        vec = np.zeros(n_actions)
        for a, v in entries.items():
            vec[a] = v
        pol.logits[s] = vec
    return pol
