"""The original protocol being simulated, plus the shipped demo protocols.

A protocol is one leader program talking to m member programs over m
channels, one bit per channel per round. Programs are pure: all randomness is
drawn from a seed when the program is built, and the per-round behaviour is a
function of (state, round). States are small immutable values (tuples of
ints) so snapshots are cheap.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

EXPECT = None  # action meaning "listen on this channel this round"


class ProtocolError(RuntimeError):
    """Malformed protocol: both ends of a channel send, or both listen."""


class SnapshotError(ValueError):
    pass


class PartyProgram:
    """Base class. ``channels`` is m for the leader and 1 for a member."""

    tag = "program"
    channels = 1

    def initial_state(self) -> Any:
        raise NotImplementedError

    def action(self, state, rnd: int, ch: int) -> int | None:
        """Bit to send on channel ch in round rnd (1-based), or EXPECT."""
        raise NotImplementedError

    def step(self, state, rnd: int, received: Sequence[int | None]) -> Any:
        """State after round rnd; received[ch] is None on channels where we sent."""
        raise NotImplementedError


@dataclass(frozen=True)
class StateSnapshot:
    tag: str
    data: bytes

    @property
    def size(self) -> int:
        return len(self.data)


class ProgramInstance:
    """A program together with its current state."""

    __slots__ = ("program", "state")

    def __init__(self, program: PartyProgram, state=None):
        self.program = program
        self.state = program.initial_state() if state is None else state

    def snapshot(self) -> StateSnapshot:
        return StateSnapshot(self.program.tag, pickle.dumps(self.state, protocol=5))

    def restore(self, snap: StateSnapshot) -> None:
        if not isinstance(snap, StateSnapshot):
            raise SnapshotError("not a snapshot")
        if snap.tag != self.program.tag:
            raise SnapshotError(f"snapshot of {snap.tag!r} cannot restore {self.program.tag!r}")
        try:
            self.state = pickle.loads(snap.data)
        except Exception as exc:  # corrupt bytes
            raise SnapshotError(f"malformed snapshot: {exc}") from exc


@dataclass
class Protocol:
    name: str
    n: int
    leader: PartyProgram
    members: list

    @property
    def m(self) -> int:
        return len(self.members)

    def parties(self) -> list:
        return [self.leader, *self.members]


@dataclass
class ReferenceRun:
    tapes: list          # tapes[party][j-1] = state after round j; party 0 is the leader
    transcripts: np.ndarray  # (m, rounds) bits carried on each channel


def reference_run(protocol: Protocol, rounds: int | None = None) -> ReferenceRun:
    """Run the protocol over perfect channels."""
    n = protocol.n if rounds is None else rounds
    m = protocol.m
    lead = protocol.leader
    members = protocol.members
    ls = lead.initial_state()
    ms = [p.initial_state() for p in members]
    tapes = [[None] * n for _ in range(m + 1)]
    trans = np.zeros((m, n), dtype=np.uint8)
    for j in range(1, n + 1):
        got_lead = [None] * m
        got_mem = []
        for i in range(m):
            a = lead.action(ls, j, i)
            b = members[i].action(ms[i], j, 0)
            if (a is EXPECT) == (b is EXPECT):
                raise ProtocolError(f"round {j}, channel {i}: both ends {'listen' if a is None else 'send'}")
            if a is EXPECT:
                got_lead[i] = b
                got_mem.append((None,))
                trans[i, j - 1] = b
            else:
                got_mem.append((a,))
                trans[i, j - 1] = a
        ls = lead.step(ls, j, got_lead)
        tapes[0][j - 1] = ls
        for i in range(m):
            ms[i] = members[i].step(ms[i], j, got_mem[i])
            tapes[i + 1][j - 1] = ms[i]
    return ReferenceRun(tapes=tapes, transcripts=trans)


def _bits(rng: np.random.Generator, size: int) -> tuple[int, ...]:
    return tuple(int(x) for x in rng.integers(0, 2, size=size))


# --- echo / parity -----------------------------------------------------------

class EchoLeader(PartyProgram):
    def __init__(self, n: int, seed: int):
        self.n = n
        self.x = _bits(np.random.default_rng([seed, 1]), n)
        self.tag = f"echo-leader:{n}:{seed}"

    def initial_state(self):
        return (0, 0)  # (rounds sent, parity so far)

    def action(self, state, rnd, ch):
        return self.x[rnd - 1] if rnd <= self.n else 0

    def step(self, state, rnd, received):
        if rnd > self.n:
            return state
        return (state[0] + 1, state[1] ^ self.x[rnd - 1])


class EchoMember(PartyProgram):
    def __init__(self, n: int, seed: int):
        self.n = n
        self.tag = f"echo-member:{n}:{seed}"

    def initial_state(self):
        return (0, 0)

    def action(self, state, rnd, ch):
        return EXPECT

    def step(self, state, rnd, received):
        if rnd > self.n:
            return state
        return (state[0] + 1, state[1] ^ received[0])


def make_echo(n: int, m: int = 1, seed: int = 0) -> Protocol:
    if m != 1:
        raise ValueError("echo is a single-member protocol")
    return Protocol("echo", n, EchoLeader(n, seed), [EchoMember(n, seed)])


# --- per-channel modular sum -----------------------------------------------

MODSUM_MOD = 65521


def _weight(rnd: int) -> int:
    return rnd % 251 + 1


class ModsumLeader(PartyProgram):
    """Odd rounds: send input bit XOR low bit of the channel sum. Even rounds: listen."""

    def __init__(self, n: int, m: int, seed: int):
        self.n, self.channels = n, m
        rng = np.random.default_rng([seed, 2])
        self.x = [_bits(rng, n) for _ in range(m)]
        self.tag = f"modsum-leader:{n}:{m}:{seed}"

    def initial_state(self):
        return (0,) * self.channels

    def action(self, state, rnd, ch):
        if rnd > self.n:
            return 0
        if rnd % 2 == 1:
            return self.x[ch][rnd - 1] ^ (state[ch] & 1)
        return EXPECT

    def step(self, state, rnd, received):
        if rnd > self.n:
            return state
        out = []
        for ch, s in enumerate(state):
            bit = received[ch] if rnd % 2 == 0 else self.x[ch][rnd - 1] ^ (s & 1)
            out.append((s + bit * _weight(rnd)) % MODSUM_MOD)
        return tuple(out)


class ModsumMember(PartyProgram):
    def __init__(self, n: int, idx: int, seed: int):
        self.n = n
        self.y = _bits(np.random.default_rng([seed, 3, idx]), n)
        self.tag = f"modsum-member{idx}:{n}:{seed}"

    def initial_state(self):
        return (0,)

    def action(self, state, rnd, ch):
        if rnd > self.n or rnd % 2 == 1:
            return EXPECT
        return self.y[rnd - 1] ^ (state[0] & 1)

    def step(self, state, rnd, received):
        if rnd > self.n:
            return state
        s = state[0]
        bit = received[0] if rnd % 2 == 1 else self.y[rnd - 1] ^ (s & 1)
        return ((s + bit * _weight(rnd)) % MODSUM_MOD,)


def make_modsum(n: int, m: int = 1, seed: int = 0) -> Protocol:
    return Protocol("modsum", n, ModsumLeader(n, m, seed),
                    [ModsumMember(n, i, seed) for i in range(m)])


# --- pointer chasing -----------------------------------------------------------

POINTER_NODES = 16
HOP_BITS = 4


class PointerParty(PartyProgram):
    """Hops of 4 bits; the leader owns even hops, the member odd hops."""

    def __init__(self, n: int, seed: int, is_leader: bool):
        self.n = n
        self.depth = n // HOP_BITS
        rng = np.random.default_rng([seed, 4])
        self.fa = tuple(int(v) for v in rng.integers(0, POINTER_NODES, POINTER_NODES))
        self.fb = tuple(int(v) for v in rng.integers(0, POINTER_NODES, POINTER_NODES))
        self.is_leader = is_leader
        self.mine = self.fa if is_leader else self.fb
        self.tag = f"pointer-{'leader' if is_leader else 'member'}:{n}:{seed}"

    def initial_state(self):
        return (0, 0)  # (pointer, partially received hop)

    def _owner_is_me(self, hop: int) -> bool:
        return (hop % 2 == 0) == self.is_leader

    def action(self, state, rnd, ch):
        hop, pos = divmod(rnd - 1, HOP_BITS)
        if hop >= self.depth:
            return 0 if self.is_leader else EXPECT
        if self._owner_is_me(hop):
            return (self.mine[state[0]] >> (HOP_BITS - 1 - pos)) & 1
        return EXPECT

    def step(self, state, rnd, received):
        hop, pos = divmod(rnd - 1, HOP_BITS)
        if hop >= self.depth:
            return state
        ptr, acc = state
        if self._owner_is_me(hop):
            return (self.mine[ptr], 0) if pos == HOP_BITS - 1 else state
        acc = (acc << 1) | received[0]
        return (acc, 0) if pos == HOP_BITS - 1 else (ptr, acc)


def make_pointer(n: int, m: int = 1, seed: int = 0) -> Protocol:
    if m != 1:
        raise ValueError("pointer chasing is a single-member protocol")
    return Protocol("pointer", n, PointerParty(n, seed, True), [PointerParty(n, seed, False)])


def pointer_oracle(fa, fb, depth: int) -> int:
    x = 0
    for hop in range(depth):
        x = fa[x] if hop % 2 == 0 else fb[x]
    return x


def make_protocol(name: str, n: int, m: int, seed: int, **kw) -> Protocol:
    if name == "echo":
        return make_echo(n, m, seed)
    if name == "modsum":
        return make_modsum(n, m, seed)
    if name == "pointer":
        return make_pointer(n, m, seed)
    if name == "pir2":
        from robustsim.pir import make_pir_protocol
        return make_pir_protocol(n=n, m=m, seed=seed, **kw)
    raise ValueError(f"unknown protocol {name!r}; expected one of {PROTOCOLS}")


PROTOCOLS = ("echo", "modsum", "pointer", "pir2")
SUPPORTED_M = {"echo": (1,), "pointer": (1,), "pir2": (2,), "modsum": None}
