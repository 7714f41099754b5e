"""Reward-free demonstrations, the ego replay buffer, and their samplers."""
import base64
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .gridworld import Observation
from .interfaces import EmptyBuffer, EmptyDataset, InvalidArgument, MalformedRecord, ShapeMismatch
from .seeding import SeedStream

logger = logging.getLogger(__name__)

DEMO_FORMAT = "psiphi-demos"
DEMO_VERSION = 1


@dataclass
class Trajectory:
    """(s_0, a_0, ..., s_T, a_T; k). There is no reward field by construction."""
    agent_id: int
    steps: List[Tuple[Observation, int]]

    def __post_init__(self):
        if not self.steps:
            raise InvalidArgument("trajectory must be non-empty")
        if self.agent_id < 1:
            raise InvalidArgument(f"agent ids start at 1, got {self.agent_id}")
        shape = self.steps[0][0].channels.shape
        heading = self.steps[0][0].heading.shape
        for obs, _ in self.steps:
            if obs.channels.shape != shape or obs.heading.shape != heading:
                raise ShapeMismatch("all observations in a trajectory must share one shape")

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class DemoArrays:
    """Flattened view of a DemoSet used by the samplers.

    next_index[i] is the row of the following step in the same trajectory,
    or -1 for a trajectory's last step.
    """
    obs: np.ndarray
    actions: np.ndarray
    agent_ids: np.ndarray
    next_index: np.ndarray

    @property
    def pair_rows(self) -> np.ndarray:
        return np.flatnonzero(self.next_index >= 0)


@dataclass
class DemoBatch:
    """Minibatch of (s, a, s', a', k) with a successor mask.

    has_next is 0 where s is the last step of its trajectory; there next_obs
    and next_actions repeat s and a and must not be bootstrapped from.
    """
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    next_actions: np.ndarray
    agent_ids: np.ndarray
    has_next: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, int, np.ndarray, int, int]]:
        for i in range(len(self)):
            yield (self.obs[i], int(self.actions[i]), self.next_obs[i],
                   int(self.next_actions[i]), int(self.agent_ids[i]))


@dataclass
class DemoSet:
    """The demonstration set D.

    Attributes:
        trajectories: Agent-tagged trajectories
        n_agents: K; every agent_id lies in 1..K
    """
    trajectories: List[Trajectory] = field(default_factory=list)
    n_agents: int = 0
    _arrays: Optional[DemoArrays] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        for traj in self.trajectories:
            self._check_id(traj)

    def _check_id(self, traj: Trajectory) -> None:
        if not 1 <= traj.agent_id <= self.n_agents:
            raise InvalidArgument(f"agent id {traj.agent_id} outside 1..{self.n_agents}")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def append(self, traj: Trajectory) -> None:
        """Add a trajectory, e.g. from an online demonstrator."""
        self._check_id(traj)
        self.trajectories.append(traj)
        self._arrays = None

    def filter(self, agent_ids: Sequence[int]) -> "DemoSet":
        keep = set(agent_ids)
        return DemoSet([t for t in self.trajectories if t.agent_id in keep], self.n_agents)

    def pooled(self) -> "DemoSet":
        """All trajectories under a single agent id (ids erased)."""
        return DemoSet([Trajectory(1, t.steps) for t in self.trajectories], 1 if self.trajectories else 0)

    def split(self, train_fraction: float, seed: int) -> Tuple["DemoSet", "DemoSet"]:
        """Per-agent random split by trajectory."""
        if not 0 < train_fraction < 1:
            raise InvalidArgument("train_fraction must lie in (0, 1)")
        rng = SeedStream(seed).next()
        train, test = [], []
        for k in range(1, self.n_agents + 1):
            own = [t for t in self.trajectories if t.agent_id == k]
            order = rng.permutation(len(own))
            cut = int(round(train_fraction * len(own)))
            train += [own[i] for i in order[:cut]]
            test += [own[i] for i in order[cut:]]
        return DemoSet(train, self.n_agents), DemoSet(test, self.n_agents)

    def arrays(self) -> DemoArrays:
        if self._arrays is None:
            obs, actions, ids, nxt = [], [], [], []
            row = 0
            for traj in self.trajectories:
                for t, (o, a) in enumerate(traj.steps):
                    obs.append(o.vector())
                    actions.append(a)
                    ids.append(traj.agent_id)
                    nxt.append(row + 1 if t + 1 < len(traj) else -1)
                    row += 1
            width = len(obs[0]) if obs else 0
            self._arrays = DemoArrays(
                obs=np.array(obs, dtype=np.float64).reshape(len(obs), width),
                actions=np.array(actions, dtype=np.int64),
                agent_ids=np.array(ids, dtype=np.int64),
                next_index=np.array(nxt, dtype=np.int64),
            )
        return self._arrays


def _gather(arr: DemoArrays, rows: np.ndarray) -> DemoBatch:
    nxt = arr.next_index[rows]
    has_next = nxt >= 0
    nxt = np.where(has_next, nxt, rows)
    return DemoBatch(
        obs=arr.obs[rows],
        actions=arr.actions[rows],
        next_obs=arr.obs[nxt],
        next_actions=arr.actions[nxt],
        agent_ids=arr.agent_ids[rows],
        has_next=has_next.astype(np.float64),
    )


def sample_demo_batch(
    demos: DemoSet,
    batch: int,
    stream: SeedStream,
    include_terminal: bool = False
) -> DemoBatch:
    """Uniform draw over consecutive (s_t, a_t, s_{t+1}, a_{t+1}, k) pairs.

    Args:
        demos: Demonstration set
        batch: Number of pairs (with replacement)
        stream: Seed stream; advanced by one generator per call
        include_terminal: Also draw each trajectory's last step, with
            has_next = 0

    Raises:
        EmptyDataset: If there is nothing to draw from
    """
    arr = demos.arrays()
    candidates = np.arange(len(arr.actions)) if include_terminal else arr.pair_rows
    if len(candidates) == 0:
        raise EmptyDataset("no consecutive pairs in the demonstration set")
    rng = stream.next()
    rows = candidates[rng.integers(len(candidates), size=batch)]
    return _gather(arr, rows)


def sample_demo_steps(demos: DemoSet, batch: int, stream: SeedStream) -> DemoBatch:
    """Uniform draw over single (s, a, k) steps, for behavior cloning."""
    return sample_demo_batch(demos, batch, stream, include_terminal=True)


def save_demos(demos: DemoSet, path: Union[str, Path]) -> int:
    """Write demos as JSON lines; returns the number of trajectories written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps({"format": DEMO_FORMAT, "version": DEMO_VERSION, "n_agents": demos.n_agents}) + "\n")
        for traj in demos.trajectories:
            first = traj.steps[0][0]
            record = {
                "agent_id": traj.agent_id,
                "obs_shape": list(first.channels.shape),
                "heading_size": int(first.heading.size),
                "steps": [
                    [base64.b64encode(np.packbits(obs.bits()).tobytes()).decode("ascii"), int(a)]
                    for obs, a in traj.steps
                ],
            }
            f.write(json.dumps(record) + "\n")
    logger.info(f"Saved {len(demos)} trajectories to {path}")
    return len(demos)


def _decode_step(entry, obs_shape: Tuple[int, ...], heading_size: int) -> Tuple[Observation, int]:
    packed, action = entry
    n_channels = int(np.prod(obs_shape))
    raw = np.frombuffer(base64.b64decode(packed, validate=True), dtype=np.uint8)
    if raw.size != (n_channels + heading_size + 7) // 8:
        raise ValueError("observation bits are truncated")
    bits = np.unpackbits(raw, count=n_channels + heading_size)
    channels = bits[:n_channels].reshape(obs_shape)
    return Observation(channels, bits[n_channels:].copy()), int(action)


def load_demos(path: Union[str, Path]) -> DemoSet:
    """Read a demo file written by save_demos.

    Raises:
        OSError: If the file cannot be read
        MalformedRecord: On any unparsable line (line number reported)
    """
    with open(path) as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedRecord("missing header", line=1)
    try:
        header = json.loads(lines[0])
        if header.get("format") != DEMO_FORMAT or header.get("version") != DEMO_VERSION:
            raise ValueError(f"unsupported format {header.get('format')} v{header.get('version')}")
        n_agents = int(header["n_agents"])
    except (ValueError, KeyError, TypeError, AttributeError) as e:
        raise MalformedRecord(f"bad header: {str(e)}", line=1)

    demos = DemoSet(n_agents=n_agents)
    for number, line in enumerate(lines[1:], start=2):
        try:
            record = json.loads(line)
            obs_shape = tuple(int(n) for n in record["obs_shape"])
            heading_size = int(record["heading_size"])
            steps = [_decode_step(entry, obs_shape, heading_size) for entry in record["steps"]]
            demos.append(Trajectory(agent_id=int(record["agent_id"]), steps=steps))
        except (ValueError, KeyError, TypeError, InvalidArgument, ShapeMismatch) as e:
            raise MalformedRecord(f"bad trajectory: {str(e)}", line=number)
    logger.info(f"Loaded {len(demos)} trajectories from {path}")
    return demos


@dataclass
class EgoTransition:
    """One ego step (s, a, s', r^ego, done)."""
    s: np.ndarray
    a: int
    s_next: np.ndarray
    r_ego: float
    done: bool

    def __post_init__(self):
        if not np.isfinite(self.r_ego):
            raise InvalidArgument("ego reward must be finite")


@dataclass
class EgoBatch:
    """Array minibatch from the replay buffer.

    rewards/next_obs/discounts describe the n-step window (discount is
    γ^k, or 0 if the window hit a done); the *_1 fields are the one-step
    versions used by the SF-TD loss.
    """
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    discounts: np.ndarray
    rewards_1: np.ndarray
    next_obs_1: np.ndarray
    discounts_1: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """FIFO ring of ego transitions.

    One writer and any number of readers may share a buffer; push and the
    samplers serialize on an internal lock.

    Args:
        capacity: Maximum number of transitions kept
        observation_size: Length of observation vectors
        rng_seed: Base seed recorded with the buffer (samplers take their
            own seed streams)
    """

    def __init__(self, capacity: int, observation_size: int, rng_seed: int = 0):
        if capacity < 1:
            raise InvalidArgument("capacity must be at least 1")
        self.capacity = capacity
        self.observation_size = observation_size
        self.rng_seed = rng_seed
        self._obs = np.zeros((capacity, observation_size), dtype=np.float64)
        self._next_obs = np.zeros((capacity, observation_size), dtype=np.float64)
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity, dtype=np.float64)
        self._dones = np.zeros(capacity, dtype=bool)
        self._head = 0
        self._size = 0
        self._pushed = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._size

    @property
    def total_pushed(self) -> int:
        return self._pushed

    def push(self, transition: EgoTransition) -> None:
        s = np.asarray(transition.s).ravel()
        s_next = np.asarray(transition.s_next).ravel()
        if s.size != self.observation_size or s_next.size != self.observation_size:
            raise ShapeMismatch(f"observation size must be {self.observation_size}")
        with self._lock:
            i = self._head
            self._obs[i] = s
            self._next_obs[i] = s_next
            self._actions[i] = transition.a
            self._rewards[i] = transition.r_ego
            self._dones[i] = transition.done
            self._head = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
            self._pushed += 1

    def _physical(self, logical: np.ndarray) -> np.ndarray:
        """Ring slot of logical positions counted from the oldest entry."""
        oldest = (self._head - self._size) % self.capacity
        return (oldest + logical) % self.capacity

    def _transition(self, i: int) -> EgoTransition:
        return EgoTransition(
            s=self._obs[i].copy(),
            a=int(self._actions[i]),
            s_next=self._next_obs[i].copy(),
            r_ego=float(self._rewards[i]),
            done=bool(self._dones[i]),
        )

    def sample(self, batch: int, stream: SeedStream) -> List[EgoTransition]:
        """Uniform draw with replacement.

        Raises:
            EmptyBuffer: If nothing has been pushed
        """
        with self._lock:
            if self._size == 0:
                raise EmptyBuffer("cannot sample from an empty buffer")
            rows = self._physical(stream.next().integers(self._size, size=batch))
            return [self._transition(int(i)) for i in rows]

    def sample_batch(self, batch: int, stream: SeedStream, gamma: float, n_step: int = 1) -> EgoBatch:
        """Uniform draw of n-step windows as arrays.

        Windows stop early at a done or at the newest transition.

        Raises:
            EmptyBuffer: If nothing has been pushed
        """
        with self._lock:
            if self._size == 0:
                raise EmptyBuffer("cannot sample from an empty buffer")
            start = stream.next().integers(self._size, size=batch)
            return self._windows(start, gamma, n_step)

    def recent(self, count: int, gamma: float = 0.0) -> EgoBatch:
        """The newest min(count, size) transitions as one-step arrays."""
        with self._lock:
            count = min(count, self._size)
            return self._windows(np.arange(self._size - count, self._size), gamma, 1)

    def _windows(self, start: np.ndarray, gamma: float, n_step: int) -> EgoBatch:
        first = self._physical(start)
        rewards = np.zeros(len(start))
        discounts = np.ones(len(start))
        last = first.copy()
        active = np.ones(len(start), dtype=bool)
        for j in range(n_step):
            in_range = active & (start + j < self._size)
            rows = self._physical(start + j)
            rewards += np.where(in_range, discounts * self._rewards[rows], 0.0)
            last = np.where(in_range, rows, last)
            done = self._dones[rows]
            discounts = np.where(in_range, discounts * gamma * ~done, discounts)
            active = in_range & ~done
        done_1 = self._dones[first]
        return EgoBatch(
            obs=self._obs[first].astype(np.float64),
            actions=self._actions[first].copy(),
            rewards=rewards,
            next_obs=self._next_obs[last].astype(np.float64),
            discounts=discounts,
            rewards_1=self._rewards[first].copy(),
            next_obs_1=self._next_obs[first].astype(np.float64),
            discounts_1=np.where(done_1, 0.0, gamma),
        )

    def statistics(self) -> Dict[str, float]:
        with self._lock:
            rows = self._physical(np.arange(self._size))
            rewards = self._rewards[rows]
            stats = {
                "size": float(self._size),
                "capacity": float(self.capacity),
                "total_pushed": float(self._pushed),
                "mean_reward": float(rewards.mean()) if self._size else 0.0,
                "nonzero_reward_fraction": float(np.mean(rewards != 0)) if self._size else 0.0,
                "done_fraction": float(self._dones[rows].mean()) if self._size else 0.0,
            }
            for a in np.unique(self._actions[rows]):
                stats[f"action_{a}_fraction"] = float(np.mean(self._actions[rows] == a))
            return stats

    def export_statistics(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([self.statistics()]).to_csv(path, index=False)
