"""Noisy full-duplex channels with oblivious corruption schedules.

Every simulated round carries one bit on each directed lane. Physical
position 2*round is the leader-to-member lane and 2*round + 1 the reverse
lane. A schedule fixes the set of flipped positions before the run starts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from robustsim.params import exact

LEADER_TO_MEMBER = 0
MEMBER_TO_LEADER = 1
MODELS = ("iid", "budgeted", "burst", "explicit")
PRESETS = ("random", "front", "periodic")


class CapacityExceeded(RuntimeError):
    pass


@dataclass
class CorruptionSchedule:
    model: str
    epsilon: float
    capacity: int
    seed: int
    preset: str = "random"
    burst_len: int = 8
    _positions: np.ndarray = field(default=None, repr=False)
    _rng: np.random.Generator = field(default=None, repr=False)
    _done: bool = field(default=False, repr=False)

    # iid positions are drawn on demand; other models are fixed at construction
    def _extend(self, upto: int) -> None:
        while not self._done and (self._positions.size == 0 or self._positions[-1] < upto):
            gaps = self._rng.geometric(self.epsilon, size=4096)
            start = self._positions[-1] if self._positions.size else -1
            new = start + np.cumsum(gaps)
            inside = new[new < self.capacity]
            self._positions = np.concatenate([self._positions, inside])
            if inside.size < new.size:
                self._done = True

    def positions(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        """Sorted flipped positions in [lo, hi)."""
        hi = self.capacity if hi is None else min(hi, self.capacity)
        if self.model == "iid":
            self._extend(hi)
        p = self._positions
        return p[np.searchsorted(p, lo):np.searchsorted(p, hi)]

    def count(self, lo: int = 0, hi: int | None = None) -> int:
        return int(self.positions(lo, hi).size)

    def budget(self) -> int | None:
        if self.model in ("budgeted", "burst"):
            return math.ceil(exact(self.epsilon) * self.capacity)
        return None

    def to_json(self) -> str:
        d = {"model": self.model, "epsilon": self.epsilon, "capacity": self.capacity,
             "seed": self.seed, "preset": self.preset, "burst_len": self.burst_len}
        if self.model != "iid":
            d["positions"] = [int(x) for x in self._positions]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorruptionSchedule":
        d = json.loads(text)
        if d["model"] == "iid":
            return make_schedule("iid", d["epsilon"], d["capacity"], d["seed"])
        return cls(model=d["model"], epsilon=d["epsilon"], capacity=d["capacity"], seed=d["seed"],
                   preset=d.get("preset", "random"), burst_len=d.get("burst_len", 8),
                   _positions=np.asarray(d["positions"], dtype=np.int64), _done=True)


def make_schedule(model: str, epsilon: float, capacity: int, seed: int, *,
                  preset: str = "random", burst_len: int = 8,
                  positions=None) -> CorruptionSchedule:
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
    if not (0.0 <= epsilon < 1.0):
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if capacity < 0:
        raise ValueError("capacity must be non-negative")
    rng = np.random.default_rng(seed)
    empty = np.zeros(0, dtype=np.int64)
    sched = CorruptionSchedule(model=model, epsilon=float(epsilon), capacity=capacity, seed=seed,
                               preset=preset, burst_len=burst_len, _positions=empty, _done=True)
    if model == "iid":
        sched._rng = rng
        sched._done = epsilon == 0 or capacity == 0
        return sched
    if model == "explicit":
        pos = np.unique(np.asarray(positions if positions is not None else [], dtype=np.int64))
        if pos.size and (pos[0] < 0 or pos[-1] >= capacity):
            raise ValueError("explicit positions must lie in [0, capacity)")
        sched._positions = pos
        return sched
    count = min(capacity, math.ceil(exact(epsilon) * capacity))
    if count == 0:
        return sched
    if model == "budgeted":
        if preset == "random":
            pos = rng.choice(capacity, size=count, replace=False)
        elif preset == "front":
            window = max(count, capacity // 10)
            pos = rng.choice(window, size=count, replace=False)
        elif preset == "periodic":
            step = capacity / count
            offset = int(rng.integers(0, max(1, int(step))))
            pos = (np.floor(np.arange(count) * step).astype(np.int64) + offset) % capacity
        else:
            raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    else:
        if burst_len < 1:
            raise ValueError("burst_len must be positive")
        slots = max(1, capacity // burst_len)
        nbursts = min(slots, -(-count // burst_len))
        starts = np.sort(rng.choice(slots, size=nbursts, replace=False)) * burst_len
        pos = (starts[:, None] + np.arange(burst_len)[None, :]).ravel()
        pos = pos[pos < capacity][:count]
    sched._positions = np.unique(pos.astype(np.int64))
    return sched


class Channel:
    """One leader-member link. Rounds advance in lockstep on both lanes."""

    def __init__(self, schedule: CorruptionSchedule):
        self.schedule = schedule
        self.round = 0
        self.sent = [0, 0]          # bits an endpoint actually put on each lane
        self.read_flips = 0         # flips on bits some endpoint actually read

    @property
    def physical_bits(self) -> int:
        return 2 * self.round

    @property
    def corrupted(self) -> int:
        """Flipped physical positions passed so far, idle lanes included."""
        return self.schedule.count(0, 2 * self.round)

    def _advance(self, rounds: int) -> int:
        start = self.round
        if 2 * (start + rounds) > self.schedule.capacity:
            raise CapacityExceeded(f"channel capacity {self.schedule.capacity} exhausted")
        self.round += rounds
        return start

    def flips(self, lane: int, start_round: int, rounds: int) -> np.ndarray:
        """Flip flags of one lane over a window of rounds."""
        out = np.zeros(rounds, dtype=np.uint8)
        pos = self.schedule.positions(2 * start_round, 2 * (start_round + rounds))
        pos = pos[(pos & 1) == lane]
        out[(pos >> 1) - start_round] = 1
        return out

    def transfer(self, lane: int, bits) -> np.ndarray:
        """Send a block on one lane while the other lane idles; returns the received block."""
        bits = np.asarray(bits, dtype=np.uint8).ravel()
        start = self._advance(bits.size)
        f = self.flips(lane, start, bits.size)
        self.sent[lane] += bits.size
        self.read_flips += int(f.sum())
        return bits ^ f

    def transmit(self, lane: int, bit: int) -> int:
        return int(self.transfer(lane, [bit])[0])

    def duplex(self, down, down_used, up, up_used) -> tuple[np.ndarray, np.ndarray]:
        """One block of full-duplex rounds.

        down/up are the bits placed on the leader-to-member and member-to-leader
        lanes (0 where the endpoint idles); *_used mark the rounds in which the
        endpoint actually sent. Returns what arrives at member and leader.
        """
        down = np.asarray(down, dtype=np.uint8)
        up = np.asarray(up, dtype=np.uint8)
        start = self._advance(down.size)
        fd = self.flips(LEADER_TO_MEMBER, start, down.size)
        fu = self.flips(MEMBER_TO_LEADER, start, up.size)
        self.sent[0] += int(np.count_nonzero(down_used))
        self.sent[1] += int(np.count_nonzero(up_used))
        return down ^ fd, up ^ fu

    def skip(self, rounds: int, used_down: int = 0, used_up: int = 0) -> None:
        """Let rounds pass in bulk, crediting bits that were sent but need no simulation."""
        self._advance(rounds)
        self.sent[0] += used_down
        self.sent[1] += used_up

    @property
    def logical_bits(self) -> int:
        return self.sent[0] + self.sent[1]
