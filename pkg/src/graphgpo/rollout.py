"""Trajectories, canonical state identity and the line-delimited rollout format."""

from __future__ import annotations

import base64
import enum
import hashlib
import json
from collections import namedtuple
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

__all__ = [
    "StateKey",
    "Step",
    "Outcome",
    "Trajectory",
    "TrajectorySet",
    "FormationError",
    "RolloutParseError",
    "RolloutValidationError",
    "canonical_state_key",
    "trajectory_return",
    "write_rollouts",
    "read_rollouts",
]

DIGEST_SIZE = 8
builtins_bytes = bytes


class FormationError(ValueError):
    pass


class RolloutParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class RolloutValidationError(ValueError):
    pass


class StateKey(bytes):
    """Canonical identity of an environment state.

    A ``bytes`` subclass: equality is full byte comparison and hashing uses
    the interpreter's cached bytes hash, so dictionary lookups stay in C.
    ``digest`` is a fixed-width blake2b digest for external bucketing.
    """

    __slots__ = ()

    @property
    def bytes(self) -> bytes:
        return builtins_bytes(self)

    @property
    def digest(self) -> bytes:
        return hashlib.blake2b(self, digest_size=DIGEST_SIZE).digest()

    def __repr__(self):
        return f"StateKey({self.short()})"

    def short(self, width: int = 24) -> str:
        text = self.decode("utf-8", errors="replace")
        return text if len(text) <= width else text[: width - 3] + "..."

    def b64(self) -> str:
        return base64.b64encode(self).decode("ascii")

    @classmethod
    def from_b64(cls, text: str) -> StateKey:
        return cls(base64.b64decode(text.encode("ascii"), validate=True))


def canonical_state_key(components: Sequence[tuple[str, str | int]]) -> StateKey:
    """Build a StateKey from labeled observation components.

    Components are sorted by label, so the caller's ordering does not matter.
    Values keep their type (``"1"`` and ``1`` give different keys).
    """
    if not components:
        raise FormationError("state key needs at least one component")
    labels = [label for label, _ in components]
    if len(set(labels)) != len(labels):
        raise FormationError(f"duplicate labels in state components: {labels}")
    for label, value in components:
        if not isinstance(label, str):
            raise FormationError(f"label must be str, got {type(label).__name__}")
        if isinstance(value, bool) or not isinstance(value, (str, int)):
            raise FormationError(f"component {label!r} must be str or int")
    ordered = sorted(components, key=lambda kv: kv[0])
    raw = json.dumps(ordered, separators=(",", ":"), ensure_ascii=False)
    return StateKey(raw.encode("utf-8"))


class Step(namedtuple("_StepFields", "state action next_state cost env_penalty")):
    """One transition ``(state, action, next_state, cost, env_penalty)``.

    An immutable tuple so that compiled kernels can read fields by index.
    """

    __slots__ = ()

    def __new__(cls, state: StateKey, action: int, next_state: StateKey, cost: float = 1.0, env_penalty: float = 0.0):
        if not cost > 0:
            raise FormationError(f"step cost must be positive, got {cost}")
        return tuple.__new__(cls, (state, action, next_state, cost, env_penalty))


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    FAIL_TERMINAL = "fail_terminal"
    TRUNCATED = "truncated"


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    outcome: Outcome

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        if not self.steps:
            raise FormationError("trajectory must have at least one step")
        for i in range(len(self.steps) - 1):
            if self.steps[i].next_state != self.steps[i + 1].state:
                raise RolloutValidationError(f"state chain broken between step {i} and step {i + 1}")

    @property
    def initial_state(self) -> StateKey:
        return self.steps[0].state

    @property
    def terminal_state(self) -> StateKey:
        return self.steps[-1].next_state

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class TrajectorySet:
    """One rollout group: M trajectories from identical resets of one task."""

    task_id: str
    trajectories: tuple[Trajectory, ...]
    r_succ: float = 10.0
    invalid_penalty: float = -0.1

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise FormationError("trajectory set must hold at least one trajectory")
        if not self.r_succ > 0:
            raise FormationError("r_succ must be positive")
        first = self.trajectories[0].initial_state
        for m, traj in enumerate(self.trajectories):
            if traj.initial_state != first:
                raise RolloutValidationError(f"trajectory {m} starts from a different initial state")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def total_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def successes(self) -> int:
        return sum(t.outcome is Outcome.SUCCESS for t in self.trajectories)


def trajectory_return(traj: Trajectory, r_succ: float) -> float:
    base = r_succ if traj.outcome is Outcome.SUCCESS else 0.0
    return base + sum(step.env_penalty for step in traj.steps)


def write_rollouts(tset: TrajectorySet, sink: IO[str]) -> int:
    """Append ``tset`` to a text stream; returns the number of records written."""
    count = 0
    for m, traj in enumerate(tset.trajectories):
        header = {
            "kind": "trajectory",
            "task_id": tset.task_id,
            "m": m,
            "outcome": traj.outcome.value,
            "r_succ": float(tset.r_succ),
            "invalid_penalty": float(tset.invalid_penalty),
        }
        sink.write(json.dumps(header, separators=(",", ":")) + "\n")
        count += 1
        for t, step in enumerate(traj.steps):
            rec = {
                "kind": "step",
                "t": t,
                "state_key_bytes": step.state.b64(),
                "action": step.action,
                "next_state_key_bytes": step.next_state.b64(),
                "cost": float(step.cost),
                "penalty": float(step.env_penalty),
            }
            sink.write(json.dumps(rec, separators=(",", ":")) + "\n")
            count += 1
    return count


def _require(rec: dict, key: str, types, lineno: int):
    if key not in rec:
        raise RolloutParseError(lineno, f"missing field {key!r}")
    value = rec[key]
    if isinstance(value, bool) or not isinstance(value, types):
        raise RolloutParseError(lineno, f"field {key!r} has wrong type")
    return value


def read_rollouts(source: IO[str] | Iterable[str]) -> TrajectorySet:
    """Parse a rollout stream written by :func:`write_rollouts`.

    Raises RolloutParseError (with the 1-based line number) on malformed
    records and RolloutValidationError on a broken state chain.
    """
    headers: list[dict] = []
    step_lists: list[list[Step]] = []
    step_lines: list[list[int]] = []
    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RolloutParseError(lineno, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise RolloutParseError(lineno, "record is not an object")
        kind = rec.get("kind")
        if kind == "trajectory":
            _require(rec, "task_id", str, lineno)
            outcome = _require(rec, "outcome", str, lineno)
            try:
                Outcome(outcome)
            except ValueError:
                raise RolloutParseError(lineno, f"unknown outcome {outcome!r}") from None
            _require(rec, "r_succ", (int, float), lineno)
            headers.append(rec)
            step_lists.append([])
            step_lines.append([])
        elif kind == "step":
            if not headers:
                raise RolloutParseError(lineno, "step record before any trajectory header")
            t = _require(rec, "t", int, lineno)
            if t != len(step_lists[-1]):
                raise RolloutParseError(lineno, f"expected step index {len(step_lists[-1])}, got {t}")
            try:
                state = StateKey.from_b64(_require(rec, "state_key_bytes", str, lineno))
                nxt = StateKey.from_b64(_require(rec, "next_state_key_bytes", str, lineno))
            except (ValueError, UnicodeError) as exc:
                if isinstance(exc, RolloutParseError):
                    raise
                raise RolloutParseError(lineno, "bad base64 state key") from None
            action = _require(rec, "action", int, lineno)
            cost = float(_require(rec, "cost", (int, float), lineno))
            penalty = float(_require(rec, "penalty", (int, float), lineno))
            if not cost > 0:
                raise RolloutParseError(lineno, f"non-positive cost {cost}")
            step = Step(state, action, nxt, cost, penalty)
            prev = step_lists[-1]
            if prev and prev[-1].next_state != state:
                raise RolloutValidationError(
                    f"line {lineno}: state chain broken at step {t} of trajectory {len(headers) - 1}"
                )
            prev.append(step)
            step_lines[-1].append(lineno)
        else:
            raise RolloutParseError(lineno, f"unknown record kind {kind!r}")

    if not headers:
        raise RolloutValidationError("rollout stream holds no trajectories")
    task_ids = {h["task_id"] for h in headers}
    if len(task_ids) != 1:
        raise RolloutValidationError(f"mixed task ids in one rollout group: {sorted(task_ids)}")
    trajs = []
    for m, (header, steps) in enumerate(zip(headers, step_lists)):
        if not steps:
            raise RolloutValidationError(f"trajectory {m} has no steps")
        trajs.append(Trajectory(tuple(steps), Outcome(header["outcome"])))
    head = headers[0]
    return TrajectorySet(
        task_id=head["task_id"],
        trajectories=tuple(trajs),
        r_succ=float(head["r_succ"]),
        invalid_penalty=float(head.get("invalid_penalty", -0.1)),
    )
