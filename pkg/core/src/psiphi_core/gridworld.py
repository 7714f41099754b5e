"""CoinGrid: a Minigrid-style gridworld with colored coins.

Positions are (row, col) cells with row 0 at the top. Orientation is one of
N, E, S, W encoded as 0..3. All dynamics are deterministic and pure; the
only stateful object is the CoinGridEnv episode wrapper.
"""
import logging
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from .interfaces import (
    EnvironmentInterface,
    InvalidArgument,
    MalformedRecord,
    PolicyInterface,
    StateSpaceTooLarge,
)

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]
Coin = Tuple[Cell, str]

LEFT, RIGHT, FORWARD = 0, 1, 2
ACTION_NAMES = ("LEFT", "RIGHT", "FORWARD")
N_ACTIONS = 3

NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
ORIENTATION_NAMES = ("N", "E", "S", "W")
DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))

COLORS = ("red", "green", "yellow")
COLOR_INDEX = {c: i for i, c in enumerate(COLORS)}
STEP_FEATURE = 3
FEATURE_NAMES = COLORS + ("step",)
N_FEATURES = len(FEATURE_NAMES)
WALL_CHANNEL = 3
AGENT_CHANNEL = 4
N_CHANNELS = 5

DEFAULT_STATE_CAP = 2_000_000

_MAP_COINS = {"R": "red", "G": "green", "Y": "yellow"}
_MAP_STARTS = {"^": NORTH, ">": EAST, "v": SOUTH, "<": WEST}

CANONICAL_MAP = """\
>..#..R
.G.....
..Y.#..
.#...G.
R......
...#.Y.
.......
"""

FOUR_ROOMS_MAP = """\
>..#...
...#...
.......
...#...
##.####
...#...
......R
"""

ONE_COIN_MAP = """\
>...
....
...R
"""


@dataclass(frozen=True)
class GridSpec:
    """Static description of a grid.

    Attributes:
        width: Number of columns
        height: Number of rows
        walls: Cells that cannot be entered
        coins: (cell, color) pairs sorted by cell; at most one coin per cell
        start_cell: Agent start cell
        start_orientation: Agent start orientation (0..3)
        episode_horizon: Steps after which an episode is truncated
        respawn: If True coins stay in place after being collected
    """
    width: int
    height: int
    walls: FrozenSet[Cell] = frozenset()
    coins: Tuple[Coin, ...] = ()
    start_cell: Cell = (0, 0)
    start_orientation: int = EAST
    episode_horizon: int = 50
    respawn: bool = False

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("grid must have at least one cell")
        object.__setattr__(self, "walls", frozenset(tuple(c) for c in self.walls))
        object.__setattr__(self, "coins", tuple(sorted((tuple(c), col) for c, col in self.coins)))
        object.__setattr__(self, "start_cell", tuple(self.start_cell))
        if not self.in_bounds(self.start_cell) or self.start_cell in self.walls:
            raise InvalidArgument(f"start cell {self.start_cell} is a wall or out of bounds")
        if self.start_orientation not in (NORTH, EAST, SOUTH, WEST):
            raise InvalidArgument(f"invalid orientation: {self.start_orientation}")
        seen = set()
        for cell, color in self.coins:
            if color not in COLOR_INDEX:
                raise InvalidArgument(f"unknown coin color: {color}")
            if not self.in_bounds(cell) or cell in self.walls:
                raise InvalidArgument(f"coin cell {cell} is a wall or out of bounds")
            if cell in seen:
                raise InvalidArgument(f"two coins on cell {cell}")
            seen.add(cell)
        if self.start_cell in seen:
            raise InvalidArgument(f"start cell {self.start_cell} holds a coin")
        if self.episode_horizon < 1:
            raise InvalidArgument("episode_horizon must be at least 1")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    @property
    def free_cells(self) -> List[Cell]:
        return [c for c in product(range(self.height), range(self.width)) if c not in self.walls]

    @property
    def coin_colors(self) -> FrozenSet[str]:
        return frozenset(color for _, color in self.coins)

    @property
    def observation_size(self) -> int:
        return self.height * self.width * N_CHANNELS + 4

    def start_state(self) -> "EnvState":
        return EnvState(self.start_cell, self.start_orientation, frozenset(self.coins), 0)


@dataclass(frozen=True)
class EnvState:
    """Value-semantics episode state."""
    agent_cell: Cell
    orientation: int
    remaining_coins: FrozenSet[Coin]
    step: int = 0

    @property
    def key(self) -> Tuple[Cell, int, FrozenSet[Coin]]:
        """Identity of the state with the step counter dropped."""
        return (self.agent_cell, self.orientation, self.remaining_coins)


@dataclass(frozen=True)
class Observation:
    """Binary observation.

    channels is the height × width × 5 tensor (red, green, yellow, wall,
    agent). The agent channel marks the agent cell and the faced cell, which
    alone cannot tell the two apart, so heading carries the orientation as a
    one-hot vector. Non-grid observations (one-hot tabular states) use a 1-D
    channels array and an empty heading.
    """
    channels: np.ndarray
    heading: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    def bits(self) -> np.ndarray:
        return np.concatenate([self.channels.ravel(), self.heading.ravel()]).astype(np.uint8)

    def vector(self) -> np.ndarray:
        return self.bits().astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (self.channels.shape == other.channels.shape
                and np.array_equal(self.channels, other.channels)
                and np.array_equal(self.heading, other.heading))

    def __hash__(self) -> int:
        return hash((self.channels.shape, self.bits().tobytes()))


@dataclass(frozen=True)
class TaskVector:
    """Ground-truth preferences over (red, green, yellow, step) features."""
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).copy()
        if w.ndim != 1:
            raise InvalidArgument("task weights must be a vector")
        if not np.all(np.isfinite(w)):
            raise InvalidArgument("task weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def named(cls, name: str) -> "TaskVector":
        if name not in TASK_PRESETS:
            raise InvalidArgument(f"unknown task: {name}")
        return cls(np.array(TASK_PRESETS[name], dtype=np.float64))

    def positive_colors(self) -> FrozenSet[str]:
        return frozenset(c for c in COLORS if self.weights[COLOR_INDEX[c]] > 0)


TASK_PRESETS: Dict[str, Tuple[float, ...]] = {
    "collect-red": (1.0, 0.0, 0.0, 0.0),
    "collect-green": (0.0, 1.0, 0.0, 0.0),
    "collect-yellow": (0.0, 0.0, 1.0, 0.0),
    "collect-all": (1.0, 1.0, 1.0, 0.0),
    "R+G": (1.0, 1.0, 0.0, 0.0),
    "R-G": (1.0, -1.0, 0.0, 0.0),
    "-R+G": (-1.0, 1.0, 0.0, 0.0),
    "-R-G": (-1.0, -1.0, 0.0, 0.0),
}


@dataclass(frozen=True)
class GroundFeatures:
    """Ground-truth cumulants of a grid: coin-color indicator plus step cost."""
    spec: GridSpec

    def __call__(self, state: EnvState, action: int) -> np.ndarray:
        return transition(state, action, self.spec)[1]


def coins_exhausted(remaining: FrozenSet[Coin], spec: GridSpec, task: TaskVector) -> bool:
    """Whether the coin situation ends the episode under a task.

    Ends when no coin is left, or when the task rewards some color that the
    grid holds and none of those coins remain. Tasks with nothing to collect
    only end at the horizon.
    """
    if spec.respawn:
        return False
    if not remaining:
        return True
    targets = task.positive_colors() & spec.coin_colors
    if not targets:
        return False
    return not any(color in targets for _, color in remaining)


def transition(state: EnvState, action: int, spec: GridSpec) -> Tuple[EnvState, np.ndarray]:
    """Task-free dynamics: next state and ground-truth features."""
    if action not in (LEFT, RIGHT, FORWARD):
        raise InvalidArgument(f"invalid action: {action}")
    features = np.zeros(N_FEATURES)
    features[STEP_FEATURE] = 1.0
    cell, orientation, remaining = state.agent_cell, state.orientation, state.remaining_coins

    if action == LEFT:
        orientation = (orientation - 1) % 4
    elif action == RIGHT:
        orientation = (orientation + 1) % 4
    else:
        dr, dc = DELTAS[orientation]
        target = (cell[0] + dr, cell[1] + dc)
        if spec.is_free(target):
            cell = target
            for coin in remaining:
                if coin[0] == cell:
                    features[COLOR_INDEX[coin[1]]] = 1.0
                    if not spec.respawn:
                        remaining = remaining - {coin}
                    break

    return EnvState(cell, orientation, remaining, state.step + 1), features


def step(
    state: EnvState,
    action: int,
    spec: GridSpec,
    task: TaskVector
) -> Tuple[EnvState, float, np.ndarray, bool]:
    """Advance one step.

    Args:
        state: Current state
        action: LEFT, RIGHT or FORWARD
        spec: Grid description
        task: Preferences defining the reward

    Returns:
        Tuple of (next state, reward, features, done)

    Raises:
        InvalidArgument: If action is not one of the three actions
    """
    nxt, features = transition(state, action, spec)
    reward = float(features @ task.weights)
    done = nxt.step >= spec.episode_horizon or coins_exhausted(nxt.remaining_coins, spec, task)
    return nxt, reward, features, done


def enumerate_states(spec: GridSpec, cap: int = DEFAULT_STATE_CAP) -> List[EnvState]:
    """List every state the agent can occupy, in a fixed order.

    States are cell-major (row-major cells), then orientation, then coin
    subsets from "all present" downwards. A state with the agent on a coin
    that is still present cannot occur and is skipped. Step counters are 0.

    Raises:
        StateSpaceTooLarge: If free cells × 4 × 2^coins exceeds cap
    """
    free = spec.free_cells
    n_coins = len(spec.coins)
    subsets = [2 ** n_coins - 1] if spec.respawn else list(range(2 ** n_coins - 1, -1, -1))
    bound = len(free) * 4 * len(subsets)
    if bound > cap:
        raise StateSpaceTooLarge(f"{bound} states exceed the cap of {cap}")

    coin_sets = [
        frozenset(coin for i, coin in enumerate(spec.coins) if mask >> i & 1)
        for mask in subsets
    ]
    states = []
    for cell in free:
        for orientation in range(4):
            for coins in coin_sets:
                if not spec.respawn and any(c == cell for c, _ in coins):
                    continue
                states.append(EnvState(cell, orientation, coins, 0))
    logger.debug(f"Enumerated {len(states)} states on a {spec.height}x{spec.width} grid")
    return states


def state_index(states: Sequence[EnvState]) -> Dict[Tuple, int]:
    """Map from EnvState.key to position in states."""
    return {s.key: i for i, s in enumerate(states)}


def encode(state: EnvState, spec: GridSpec) -> Observation:
    """Render a state into its binary observation."""
    channels = np.zeros((spec.height, spec.width, N_CHANNELS), dtype=np.uint8)
    for (r, c), color in state.remaining_coins:
        channels[r, c, COLOR_INDEX[color]] = 1
    for r, c in spec.walls:
        channels[r, c, WALL_CHANNEL] = 1
    r, c = state.agent_cell
    channels[r, c, AGENT_CHANNEL] = 1
    dr, dc = DELTAS[state.orientation]
    front = (r + dr, c + dc)
    if spec.in_bounds(front):
        channels[front[0], front[1], AGENT_CHANNEL] = 1
    heading = np.zeros(4, dtype=np.uint8)
    heading[state.orientation] = 1
    return Observation(channels, heading)


def parse_map(text: str, episode_horizon: int = 50, respawn: bool = False) -> GridSpec:
    """Parse a textual map.

    One character per cell, one row per line: '#' wall, '.' floor,
    'R'/'G'/'Y' coins, '>^v<' the agent start and orientation.

    Raises:
        MalformedRecord: On ragged rows, unknown characters, or a start
            count other than one
    """
    rows = text.splitlines()
    while rows and not rows[-1].strip():
        rows.pop()
    if not rows:
        raise MalformedRecord("map is empty", line=1)
    width = len(rows[0])
    walls, coins, starts = set(), [], []
    for r, row in enumerate(rows):
        if len(row) != width:
            raise MalformedRecord(f"row has {len(row)} cells, expected {width}", line=r + 1)
        for c, ch in enumerate(row):
            if ch == "#":
                walls.add((r, c))
            elif ch in _MAP_COINS:
                coins.append(((r, c), _MAP_COINS[ch]))
            elif ch in _MAP_STARTS:
                starts.append(((r, c), _MAP_STARTS[ch]))
            elif ch != ".":
                raise MalformedRecord(f"unknown map character {ch!r}", line=r + 1)
    if len(starts) != 1:
        raise MalformedRecord(f"expected exactly one start marker, found {len(starts)}")
    (start_cell, start_orientation), = starts
    return GridSpec(
        width=width,
        height=len(rows),
        walls=frozenset(walls),
        coins=tuple(coins),
        start_cell=start_cell,
        start_orientation=start_orientation,
        episode_horizon=episode_horizon,
        respawn=respawn,
    )


def load_map(path: Union[str, Path], episode_horizon: int = 50, respawn: bool = False) -> GridSpec:
    """Read a map file. See parse_map for the format."""
    text = Path(path).read_text()
    return parse_map(text, episode_horizon=episode_horizon, respawn=respawn)


def canonical_coingrid() -> GridSpec:
    """7×7 CoinGrid with 2 coins of each color and 4 walls."""
    return parse_map(CANONICAL_MAP)


def four_rooms() -> GridSpec:
    return parse_map(FOUR_ROOMS_MAP)


def one_coin_grid() -> GridSpec:
    return parse_map(ONE_COIN_MAP, episode_horizon=30)


class CoinGridEnv(EnvironmentInterface):
    """Episode wrapper around the pure CoinGrid dynamics.

    Args:
        spec: Grid description
        task: Preferences defining the ego reward; can be swapped between
            episodes (phase changes, transfer tasks)
    """

    def __init__(self, spec: GridSpec, task: TaskVector):
        self.spec = spec
        self._task = self._check_task(task)
        self._state: Optional[EnvState] = None
        self._done = True
        self.episode_return = 0.0

    @staticmethod
    def _check_task(task: TaskVector) -> TaskVector:
        if task.weights.shape != (N_FEATURES,):
            raise InvalidArgument(f"task must have {N_FEATURES} weights")
        return task

    @property
    def task(self) -> TaskVector:
        return self._task

    @task.setter
    def task(self, task: TaskVector) -> None:
        self._task = self._check_task(task)
        logger.debug(f"Task set to {task.weights.tolist()}")

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def observation_size(self) -> int:
        return self.spec.observation_size

    @property
    def state(self) -> EnvState:
        if self._state is None:
            raise RuntimeError("Environment has not been reset")
        return self._state

    @property
    def done(self) -> bool:
        return self._done

    def observe(self) -> np.ndarray:
        return encode(self.state, self.spec).vector()

    def reset(self) -> np.ndarray:
        self._state = self.spec.start_state()
        self._done = False
        self.episode_return = 0.0
        return self.observe()

    def step(self, action: int) -> Tuple[np.ndarray, float, bool, Dict[str, Any]]:
        if self._done:
            raise RuntimeError("Episode is over; call reset()")
        state, reward, features, done = step(self.state, int(action), self.spec, self._task)
        self._state = state
        self._done = done
        self.episode_return += reward
        return self.observe(), reward, done, {"features": features, "state": state}


class UniformPolicy(PolicyInterface):
    """Uniform random actions."""

    def __init__(self, n_actions: int = N_ACTIONS):
        self.n_actions = n_actions

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> int:
        return int(rng.integers(self.n_actions))


def run_episodes(
    env: EnvironmentInterface,
    policy: PolicyInterface,
    episodes: int,
    rng: np.random.Generator
) -> np.ndarray:
    """Roll out a policy and return the undiscounted return of each episode."""
    returns = np.zeros(episodes)
    for i in range(episodes):
        obs = env.reset()
        done = False
        while not done:
            obs, reward, done, _ = env.step(policy.act(obs, rng))
            returns[i] += reward
    return returns


def normalized_return(value: float, random_return: float, oracle_return: float) -> float:
    """(R - R_random) / (R_oracle - R_random), clipped to [-1, 1].

    A degenerate task where the oracle cannot beat random scores 1.0 when
    the agent matches the oracle and 0.0 otherwise.
    """
    span = oracle_return - random_return
    if abs(span) < 1e-12:
        return 1.0 if value >= oracle_return - 1e-12 else 0.0
    return float(np.clip((value - random_return) / span, -1.0, 1.0))
