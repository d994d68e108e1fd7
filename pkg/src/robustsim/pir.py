"""Two-server XOR private information retrieval, run as a protocol through the engine.

The client picks a uniform subset q1 of [1..N] and sends q1 to server 1 and
q1 XOR e_i to server 2. Each server answers with the XOR of the selected
entries and the client XORs the two answers to get Arr[i].
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from robustsim.protocols import EXPECT, PartyProgram, Protocol


@dataclass(frozen=True)
class Database:
    bits: tuple

    @property
    def N(self) -> int:
        return len(self.bits)

    @classmethod
    def random(cls, N: int, seed: int) -> "Database":
        rng = np.random.default_rng([seed, 6])
        return cls(tuple(int(b) for b in rng.integers(0, 2, N)))

    @classmethod
    def from_hex(cls, text: str, N: int | None = None) -> "Database":
        digits = text.strip().lower().removeprefix("0x")
        bits = []
        for ch in digits:
            v = int(ch, 16)
            bits.extend((v >> s) & 1 for s in (3, 2, 1, 0))
        if N is not None:
            if N > len(bits):
                raise ValueError(f"hex string holds {len(bits)} bits, need {N}")
            bits = bits[:N]
        return cls(tuple(bits))


def _as_bits(q, N: int) -> np.ndarray:
    arr = np.asarray(q, dtype=np.uint8).ravel()
    if arr.size != N:
        raise ValueError(f"expected {N} bits, got {arr.size}")
    return arr


def query_gen(i: int, N: int, seed=None, rand=None) -> tuple[np.ndarray, np.ndarray]:
    """(q1, q2) for index i in [1..N]. rand, if given, is q1 itself (N bits)."""
    if not (1 <= i <= N):
        raise IndexError(f"index {i} outside [1, {N}]")
    if rand is None:
        rand = np.random.default_rng(seed).integers(0, 2, N)
    q1 = _as_bits(rand, N).copy()
    q2 = q1.copy()
    q2[i - 1] ^= 1
    return q1, q2


def answer(q, arr) -> int:
    a = np.asarray(arr.bits if isinstance(arr, Database) else arr, dtype=np.uint8)
    qq = _as_bits(q, a.size)
    return int(np.bitwise_xor.reduce(qq & a)) if a.size else 0


def decode(a1: int, a2: int) -> int:
    return a1 ^ a2


@dataclass
class PrivacyReport:
    N: int
    tv_distance: list = field(default_factory=list)   # per server, max over index pairs
    collusion_recovers_index: bool = False

    @property
    def private(self) -> bool:
        return all(d == 0 for d in self.tv_distance)


def privacy_check(N: int) -> PrivacyReport:
    """Exact per-server view distributions over all 2^N query randomness values."""
    if not (1 <= N <= 12):
        raise ValueError("exhaustive privacy check supports 1 <= N <= 12")
    views = [[Counter() for _ in range(N)] for _ in range(2)]
    recovers = True
    for rand in itertools.product((0, 1), repeat=N):
        for i in range(1, N + 1):
            q1, q2 = query_gen(i, N, rand=rand)
            views[0][i - 1][q1.tobytes()] += 1
            views[1][i - 1][q2.tobytes()] += 1
            diff = np.flatnonzero(q1 ^ q2)
            recovers &= diff.size == 1 and diff[0] == i - 1
    total = 2 ** N
    report = PrivacyReport(N=N, collusion_recovers_index=recovers)
    for s in range(2):
        worst = 0.0
        for i in range(N):
            for j in range(i + 1, N):
                keys = set(views[s][i]) | set(views[s][j])
                tv = sum(abs(views[s][i][k] - views[s][j][k]) for k in keys) / (2 * total)
                worst = max(worst, tv)
        report.tv_distance.append(worst)
    return report


# --- the protocol ------------------------------------------------------------

class PirClient(PartyProgram):
    """Leader. Request t occupies rounds t*(N+1)+1 .. (t+1)*(N+1)."""

    channels = 2

    def __init__(self, T: int, N: int, seed: int):
        self.T, self.N = T, N
        self.n = T * (N + 1)
        self.seed = seed
        self.tag = f"pir-client:{T}:{N}:{seed}"
        self._memo = (-1, None)

    def request(self, t: int) -> tuple[int, np.ndarray, np.ndarray]:
        """(index, q1, q2) of request t, a function of the client seed alone."""
        if self._memo[0] != t:
            rng = np.random.default_rng([self.seed, 5, t])
            i = int(rng.integers(1, self.N + 1))
            q1, q2 = query_gen(i, self.N, rand=rng.integers(0, 2, self.N))
            self._memo = (t, (i, q1, q2))
        return self._memo[1]

    def initial_state(self):
        return ()  # decoded bits so far

    def action(self, state, rnd, ch):
        if rnd > self.n:
            return 0
        t, u = divmod(rnd - 1, self.N + 1)
        if u == self.N:
            return EXPECT
        return int(self.request(t)[1 + ch][u])

    def step(self, state, rnd, received):
        if rnd > self.n:
            return state
        t, u = divmod(rnd - 1, self.N + 1)
        if u == self.N:
            return state + (decode(received[0], received[1]),)
        return state


class PirServer(PartyProgram):
    """Member. Holds Arr; its state is the running answer of the current request only."""

    def __init__(self, T: int, db: Database, idx: int, seed: int):
        self.T, self.db, self.N = T, db, db.N
        self.n = T * (db.N + 1)
        self.tag = f"pir-server{idx}:{T}:{db.N}:{seed}"

    def initial_state(self):
        return (0,)

    def action(self, state, rnd, ch):
        if rnd > self.n:
            return EXPECT
        u = (rnd - 1) % (self.N + 1)
        return state[0] if u == self.N else EXPECT

    def step(self, state, rnd, received):
        if rnd > self.n:
            return state
        u = (rnd - 1) % (self.N + 1)
        if u == self.N:
            return (0,)  # forget the request once answered
        return (state[0] ^ (received[0] & self.db.bits[u]),)


def make_pir_protocol(n: int | None = None, m: int = 2, seed: int = 0, *, N: int = 64,
                      T: int | None = None, db: Database | None = None) -> Protocol:
    if m != 2:
        raise ValueError("pir2 uses exactly two servers")
    if db is not None:
        N = db.N
    if T is None:
        if n is None or n % (N + 1):
            raise ValueError(f"n={n} is not a multiple of N+1={N + 1}")
        T = n // (N + 1)
    if n is not None and n != T * (N + 1):
        raise ValueError(f"n={n} does not match T*(N+1)={T * (N + 1)}")
    if db is None:
        db = Database.random(N, seed)
    client = PirClient(T, N, seed)
    return Protocol("pir2", T * (N + 1), client, [PirServer(T, db, s, seed) for s in range(2)])


def expected_answers(proto: Protocol) -> tuple:
    client = proto.leader
    db = proto.members[0].db
    return tuple(db.bits[client.request(t)[0] - 1] for t in range(client.T))


def reference_cost_4server(N: int) -> float:
    """Bits per server per request of the cited 4-server scheme, for comparison only."""
    return 7 * N ** 0.25 + 1


def baseline_cost(N: int) -> int:
    """Bits per server per request of this XOR scheme: N query bits plus one answer bit."""
    return N + 1


@dataclass
class PirNoiseReport:
    T: int
    N: int
    epsilon: float
    seed: int
    success: bool
    answers_correct: bool
    queries_channel_independent: bool
    overhead: float
    logical_bits: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def pir_over_noise(T: int, N: int, epsilon: float, seed: int, *, delta: float | None = None,
                   model: str = "iid", k_r: int = 64) -> PirNoiseReport:
    """One noisy end-to-end run of T requests."""
    from robustsim.engine import RunConfig, run

    proto = make_pir_protocol(T=T, N=N, seed=seed)
    cfg = RunConfig(protocol="pir2", n=proto.n, m=2, epsilon=epsilon, delta=delta, model=model,
                    seed=seed, k_r=k_r, protocol_kwargs={"N": N, "T": T})
    result = run(cfg, protocol=proto)
    want = expected_answers(proto)
    final = result.final_states[0]
    correct = result.success and tuple(final) == want
    # the queries are a function of the client seed: rebuild them with a fresh
    # client that never saw a channel and compare
    fresh = PirClient(T, N, seed)
    same = all(np.array_equal(fresh.request(t)[1], proto.leader.request(t)[1])
               and np.array_equal(fresh.request(t)[2], proto.leader.request(t)[2])
               for t in range(T))
    return PirNoiseReport(T=T, N=N, epsilon=epsilon, seed=seed, success=result.success,
                          answers_correct=correct, queries_channel_independent=same,
                          overhead=result.overhead, logical_bits=max(result.logical_bits))
