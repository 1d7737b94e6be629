"""Small deterministic sparse-reward environments.

Each environment is value-semantic: states are plain tuples and ``step`` is a
pure function of (state, action). Actions outside ``admissible_actions`` are
applied as a no-op that costs the invalid-action penalty.
"""

from __future__ import annotations

import enum
from collections import deque
from typing import Hashable

from .rollout import StateKey, canonical_state_key

__all__ = ["Status", "Env", "ChainTrap", "KeyDoorGrid", "MiniSokoban", "make_env", "ENV_NAMES"]


class Status(enum.Enum):
    RUNNING = "running"
    SUCCESS = "success"
    TRAP = "trap"


class Env:
    name = "env"
    n_actions = 1
    max_steps = 1
    default_omega = 0.1
    action_names: tuple[str, ...] = ()

    def __init__(self, max_steps: int | None = None, invalid_penalty: float = -0.1):
        if max_steps is not None:
            if max_steps < 1:
                raise ValueError("max_steps must be >= 1")
            self.max_steps = max_steps
        self.invalid_penalty = invalid_penalty
        self._keys: dict[Hashable, StateKey] = {}
        self._states: dict[StateKey, Hashable] = {}

    @property
    def num_tasks(self) -> int:
        return len(self.starts())

    def starts(self) -> list:
        raise NotImplementedError

    def reset(self, task_seed: int = 0):
        starts = self.starts()
        return starts[task_seed % len(starts)]

    def status(self, state) -> Status:
        raise NotImplementedError

    def admissible_actions(self, state) -> list[int]:
        raise NotImplementedError

    def _move(self, state, action):
        """Next state for an admissible action."""
        raise NotImplementedError

    def cost(self, state, action) -> float:
        return 1.0

    def step(self, state, action: int):
        """Returns ``(next_state, status, cost, penalty)``."""
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} outside 0..{self.n_actions - 1}")
        cost = self.cost(state, action)
        if self.status(state) is not Status.RUNNING:
            # terminal states are absorbing
            return state, self.status(state), cost, 0.0
        if action not in self.admissible_actions(state):
            return state, Status.RUNNING, cost, self.invalid_penalty
        nxt = self._move(state, action)
        return nxt, self.status(nxt), cost, 0.0

    def components(self, state) -> list[tuple[str, str | int]]:
        raise NotImplementedError

    def key(self, state) -> StateKey:
        k = self._keys.get(state)
        if k is None:
            k = self._keys[state] = canonical_state_key(self.components(state))
            self._states[k] = state
        return k

    def state_of(self, key: StateKey):
        """Inverse of :meth:`key` for every key this instance has produced."""
        return self._states[key]

    def admissible_for_key(self, key: StateKey) -> list[int]:
        state = self._states.get(key)
        if state is None:
            return list(range(self.n_actions))
        return self.admissible_actions(state)

    def policy(self):
        """Fresh uniform policy over this environment's admissible actions."""
        from .policy import TabularPolicy

        return TabularPolicy(self.n_actions, self.admissible_for_key)

    def reachable_states(self) -> set:
        """Every state reachable from any reset, by BFS over all actions."""
        seen = set(self.starts())
        queue = deque(seen)
        while queue:
            s = queue.popleft()
            for a in range(self.n_actions):
                nxt = self.step(s, a)[0]
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return seen

    def shortest_success(self, start) -> int | None:
        """Fewest steps from ``start`` to a success state (None if impossible)."""
        if self.status(start) is Status.SUCCESS:
            return 0
        seen = {start}
        frontier = deque([(start, 0)])
        while frontier:
            s, d = frontier.popleft()
            if self.status(s) is not Status.RUNNING:
                continue
            for a in range(self.n_actions):
                nxt = self.step(s, a)[0]
                if nxt in seen:
                    continue
                if self.status(nxt) is Status.SUCCESS:
                    return d + 1
                seen.add(nxt)
                frontier.append((nxt, d + 1))
        return None


class ChainTrap(Env):
    """Positions 0..n-1 on a line; reach the right end, never drop."""

    name = "chaintrap"
    n_actions = 3
    max_steps = 15
    default_omega = 0.1
    action_names = ("left", "right", "drop")
    LEFT, RIGHT, DROP = range(3)

    def __init__(self, n: int = 6, max_steps: int | None = None, invalid_penalty: float = -0.1):
        super().__init__(max_steps, invalid_penalty)
        if n < 2:
            raise ValueError("chain needs at least two positions")
        self.n = n

    def starts(self):
        return [(0, False)]

    def status(self, state):
        pos, trapped = state
        if trapped:
            return Status.TRAP
        return Status.SUCCESS if pos == self.n - 1 else Status.RUNNING

    def admissible_actions(self, state):
        pos, _ = state
        return [self.RIGHT, self.DROP] if pos == 0 else [self.LEFT, self.RIGHT, self.DROP]

    def _move(self, state, action):
        pos, _ = state
        if action == self.DROP:
            return (pos, True)
        return (pos + 1, False) if action == self.RIGHT else (pos - 1, False)

    def components(self, state):
        pos, trapped = state
        return [("pos", pos), ("trapped", int(trapped))]


class KeyDoorGrid(Env):
    """5x5 room split by a wall with one locked door.

    Pick up the key (automatic on entering its cell), walk through the door
    (opens when entered while holding the key), reach the goal. One lava cell
    is an absorbing trap.
    """

    name = "keydoor"
    n_actions = 4
    max_steps = 50
    default_omega = 0.1
    action_names = ("up", "down", "left", "right")
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
    SIZE = 5
    WALL_COL = 2
    DOOR = (2, 2)
    KEY = (0, 1)
    GOAL = (2, 4)
    LAVA = (4, 3)
    START_CELLS = ((2, 0), (4, 0), (0, 0), (3, 1))

    def starts(self):
        return [(r, c, False, False) for r, c in self.START_CELLS]

    def status(self, state):
        r, c, _, _ = state
        if (r, c) == self.GOAL:
            return Status.SUCCESS
        if (r, c) == self.LAVA:
            return Status.TRAP
        return Status.RUNNING

    def _target(self, state, action):
        r, c, key, door = state
        dr, dc = self.MOVES[action]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.SIZE and 0 <= nc < self.SIZE):
            return None
        if nc == self.WALL_COL and (nr, nc) != self.DOOR:
            return None
        if (nr, nc) == self.DOOR and not (door or key):
            return None
        return nr, nc

    def admissible_actions(self, state):
        return [a for a in range(4) if self._target(state, a) is not None]

    def _move(self, state, action):
        _, _, key, door = state
        nr, nc = self._target(state, action)
        if (nr, nc) == self.KEY:
            key = True
        if (nr, nc) == self.DOOR:
            door = True
        return (nr, nc, key, door)

    def components(self, state):
        r, c, key, door = state
        return [("pos", f"{r},{c}"), ("key", int(key)), ("door", int(door))]


class MiniSokoban(Env):
    """4x4 room, one box, one target; a box pushed into a corner is a trap."""

    name = "minisokoban"
    n_actions = 4
    max_steps = 15
    default_omega = 0.8
    action_names = ("up", "down", "left", "right")
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
    SIZE = 4
    # (player, box, target)
    LEVELS = (
        ((3, 0), (2, 1), (1, 2)),
        ((0, 0), (1, 2), (2, 1)),
        ((3, 3), (2, 2), (1, 1)),
    )

    def __init__(self, level: int | None = None, max_steps: int | None = None, invalid_penalty: float = -0.1):
        super().__init__(max_steps, invalid_penalty)
        self.levels = self.LEVELS if level is None else (self.LEVELS[level],)

    def starts(self):
        return [(p, b, t) for p, b, t in self.levels]

    def _corner(self, cell):
        edge = (0, self.SIZE - 1)
        return cell[0] in edge and cell[1] in edge

    def status(self, state):
        _, box, target = state
        if box == target:
            return Status.SUCCESS
        if self._corner(box):
            return Status.TRAP
        return Status.RUNNING

    def _inside(self, cell):
        return 0 <= cell[0] < self.SIZE and 0 <= cell[1] < self.SIZE

    def _result(self, state, action):
        player, box, target = state
        dr, dc = self.MOVES[action]
        nxt = (player[0] + dr, player[1] + dc)
        if not self._inside(nxt):
            return None
        if nxt == box:
            pushed = (box[0] + dr, box[1] + dc)
            if not self._inside(pushed):
                return None
            return (nxt, pushed, target)
        return (nxt, box, target)

    def admissible_actions(self, state):
        return [a for a in range(4) if self._result(state, a) is not None]

    def _move(self, state, action):
        return self._result(state, action)

    def components(self, state):
        player, box, target = state
        return [
            ("player", f"{player[0]},{player[1]}"),
            ("box", f"{box[0]},{box[1]}"),
            ("target", f"{target[0]},{target[1]}"),
        ]


ENV_NAMES = ("chaintrap", "keydoor", "minisokoban")
_ALIASES = {"keydoorgrid": "keydoor", "sokoban": "minisokoban"}


def make_env(name: str, **kwargs) -> Env:
    name = _ALIASES.get(name.lower(), name.lower())
    if name == "chaintrap":
        return ChainTrap(**kwargs)
    if name == "keydoor":
        return KeyDoorGrid(**kwargs)
    if name == "minisokoban":
        return MiniSokoban(**kwargs)
    raise ValueError(f"unknown environment {name!r}; choose from {', '.join(ENV_NAMES)}")
