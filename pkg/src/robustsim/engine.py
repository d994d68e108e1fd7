"""Lockstep driver for the robust simulation (leader and member algorithms).

One run is a single deterministic scheduler that moves m+1 party state
machines and m channels through the same timeline:

    core* exchange | phase 0 seed | I epochs | phase 1 seed | I epochs | ...

An epoch is 8(c+1) verification rounds (members send four short hashes, then
the leader replies with four per channel) followed by r computation rounds.
Wire usage of every segment is independent of party state, so channels stay
aligned even when the parties disagree.

Long hashes are kept as ``HashCell`` objects and only evaluated when some
verification actually needs their value; in long clean stretches nobody
looks, and the extraction from S* is the dominant cost otherwise.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from robustsim.channel import (LEADER_TO_MEMBER, MEMBER_TO_LEADER, Channel, make_schedule)
from robustsim.coding import plan, transmitted_bits
from robustsim.hashing import PairLayout, ShortHasher, epoch_increment
from robustsim.params import SimulationParams, ceil_log2, derive_params, next_pow2
from robustsim.protocols import EXPECT, ProgramInstance, Protocol, make_protocol, reference_run
from robustsim.smallbias import extract_range, rand_init

MEMORY_K = 64
IMAG = -1  # action of a party in a round past n: nothing sent, nothing read


def derive_seed(master: int, label: str, *idx: int) -> int:
    """Independent 64-bit seed for one randomness role (crc32 label, SeedSequence mix)."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode()),
                                 *[int(i) for i in idx]])
    return int(ss.generate_state(1, np.uint64)[0])


# --- meeting points -------------------------------------------------------------

def compute_meeting_points(P: int, k_tilde: int) -> tuple[int, int]:
    if k_tilde < 1 or k_tilde & (k_tilde - 1):
        raise ValueError(f"k_tilde must be a power of two, got {k_tilde}")
    mp1 = k_tilde * (P // k_tilde)
    return mp1, mp1 - k_tilde


def allowed_meeting_points(P: int) -> set[int]:
    out = {P}
    j = 0
    while (1 << j) <= P:
        s = 1 << j
        v = s * (P // s) - s
        if v >= 0:
            out.add(v)
        j += 1
    return out


def prune(hd: dict, P: int) -> dict:
    keep = allowed_meeting_points(P)
    return {p: v for p, v in hd.items() if p in keep}


def bulk_hd(hd: dict, P0: int, P1: int) -> dict:
    """HD after clean epochs moved P from P0 to P1 without changing any hash or state.

    Equals pruning after every step: (keys(HD) | (P0, P1]) & allowed(P1), with
    the new entries copying HD[P0].
    """
    out = {}
    for a in allowed_meeting_points(P1):
        if a in hd:
            out[a] = hd[a]
        elif P0 < a <= P1:
            out[a] = hd[P0]
    return out


# --- configuration and results ------------------------------------------------------

@dataclass
class RunConfig:
    protocol: str = "echo"
    n: int = 1024
    m: int = 1
    epsilon: float = 0.0
    delta: float | None = None
    model: str = "iid"
    seed: int = 0
    k_r: int = 64
    protocol_kwargs: dict = field(default_factory=dict)
    preset: str = "random"
    burst_len: int = 8
    positions: list | None = None  # explicit model: one position list per channel
    trace: bool = False
    fast: bool = True

    def resolved_delta(self) -> float:
        return 1.0 / self.n if self.delta is None else float(self.delta)

    def params(self) -> SimulationParams:
        return derive_params(self.n, self.m, self.epsilon, self.resolved_delta(), self.k_r)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delta"] = self.resolved_delta()
        return d


@dataclass
class SimulationResult:
    config: dict
    params: dict
    success: bool
    logical_bits: list
    physical_bits: list
    corrupted_bits: list
    overhead: float
    epochs: int
    final_P: list
    final_states: list
    short_collisions: int | None
    long_collisions: int | None
    memory_bits: int
    memory_bound: int
    invariant_violations: list
    wall_time: float
    trace: list | None = None

    def report(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("trace", "final_states")}
        d["final_states"] = [repr(s) for s in self.final_states]
        return d

    def report_json(self, with_time: bool = False) -> str:
        d = self.report()
        if not with_time:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


# --- timeline -------------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    R: int
    I: int
    r: int
    c: int
    core_rounds: int
    seed_rounds: int

    @classmethod
    def for_params(cls, prm: SimulationParams) -> "Layout":
        return cls(R=prm.R, I=prm.I, r=prm.r, c=prm.c,
                   core_rounds=transmitted_bits(prm.core_star_bits, prm.core_star_budget),
                   seed_rounds=transmitted_bits(prm.phase_core_bits, prm.phase_core_budget))

    @property
    def half(self) -> int:
        """Rounds of one direction of the verification exchange: four short hashes."""
        return 4 * (self.c + 1)

    @property
    def epoch_rounds(self) -> int:
        return 2 * self.half + self.r

    @property
    def phase_rounds(self) -> int:
        return self.seed_rounds + self.I * self.epoch_rounds

    @property
    def phases(self) -> int:
        return -(-self.R // self.I)

    @property
    def total_rounds(self) -> int:
        return self.core_rounds + self.phases * self.seed_rounds + self.R * self.epoch_rounds

    def phase_start(self, phase: int) -> int:
        return self.core_rounds + phase * self.phase_rounds

    def epoch_start(self, e: int) -> int:
        """First round (0-based) of epoch e (0-based)."""
        ph, idx = divmod(e, self.I)
        return self.phase_start(ph) + self.seed_rounds + idx * self.epoch_rounds

    def classify(self, positions: np.ndarray, seed_budget: int) -> np.ndarray:
        """Timeline item keys at which flips can disturb an idle, synchronized run.

        Item key 2e+1 is epoch e, key 2*phase*I is the seed exchange of that
        phase. Verification flips on the read lane always count; seed-window
        flips count only when a phase exceeds its decoding budget.
        """
        rnd = positions >> 1
        lane = positions & 1
        y = rnd - self.core_rounds
        ok = y >= 0
        y, lane = y[ok], lane[ok]
        ph, off = np.divmod(y, self.phase_rounds)
        in_seed = off < self.seed_rounds
        keys = []
        sp = ph[in_seed & (lane == LEADER_TO_MEMBER)]
        if sp.size:
            phases, counts = np.unique(sp, return_counts=True)
            keys.append(2 * phases[counts > seed_budget] * self.I)
        off2 = off[~in_seed] - self.seed_rounds
        ln = lane[~in_seed]
        e = ph[~in_seed] * self.I + off2 // self.epoch_rounds
        o3 = off2 % self.epoch_rounds
        read = ((o3 < self.half) & (ln == MEMBER_TO_LEADER)) | \
               ((o3 >= self.half) & (o3 < 2 * self.half) & (ln == LEADER_TO_MEMBER))
        keys.append(2 * e[read] + 1)
        return np.unique(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)


# --- party state ---------------------------------------------------------------------

class HashCell:
    """A long hash, possibly not yet evaluated: value = parent ^ <sigma, S*-block p>."""

    __slots__ = ("value", "parent", "p", "sigma", "star")

    def __init__(self, value=None, parent=None, p=0, sigma=None, star=None):
        self.value, self.parent, self.p, self.sigma, self.star = value, parent, p, sigma, star


class Party:
    def __init__(self, idx: int, program, nch: int, n: int, root_cells: tuple):
        self.idx = idx
        self.inst = ProgramInstance(program)
        self.nch = nch
        self.P = 0
        self.k = self.E = self.v1 = self.v2 = 0
        self.kt = 1
        self.mp1 = self.mp2 = 0
        self.hd = {0: (root_cells, self.inst.snapshot())}
        self.tape = [None] * n
        self.seed_key: Any = None   # ("phase", j) when equal to the leader's core
        self.star_key: Any = None   # ("star",) when equal to the leader's core*
        self.max_hd = 1
        self.max_snap = self.hd[0][1].size

    def counters(self) -> tuple:
        return self.P, self.k, self.E, self.v1, self.v2

    def reset(self) -> None:
        self.k = self.E = self.v1 = self.v2 = 0


def _in(g, a, b) -> bool:
    return g is not None and (g == a or g == b)


def _bits_mask(flips: np.ndarray) -> int:
    """Flip flags as an int, bit j = flips[j]."""
    if not flips.any():
        return 0
    return int.from_bytes(np.packbits(flips, bitorder="little").tobytes(), "little")


class Simulation:
    def __init__(self, cfg: RunConfig, protocol: Protocol | None = None):
        self.cfg = cfg
        self.prm = cfg.params()
        prm = self.prm
        if protocol is None:
            protocol = make_protocol(cfg.protocol, cfg.n, cfg.m, derive_seed(cfg.seed, "protocol"),
                                     **cfg.protocol_kwargs)
        if protocol.n != cfg.n or protocol.m != cfg.m:
            raise ValueError(f"protocol has (n, m) = ({protocol.n}, {protocol.m}), "
                             f"config says ({cfg.n}, {cfg.m})")
        self.protocol = protocol
        self.layout = Layout.for_params(prm)
        self.pair = PairLayout(prm.index_bits, prm.o)
        self.instrument = cfg.trace
        self.fast = cfg.fast and not cfg.trace
        capacity = 2 * self.layout.total_rounds
        self.channels = []
        for i in range(cfg.m):
            pos = cfg.positions[i] if cfg.positions is not None else None
            sched = make_schedule(cfg.model, cfg.epsilon, capacity, derive_seed(cfg.seed, "channel", i),
                                  preset=cfg.preset, burst_len=cfg.burst_len, positions=pos)
            self.channels.append(Channel(sched))
        root = HashCell(value=0)
        self.alice = Party(0, protocol.leader, cfg.m, cfg.n, (root,) * cfg.m)
        self.bobs = [Party(i + 1, b, 1, cfg.n, (root,)) for i, b in enumerate(protocol.members)]
        self.parties = [self.alice, *self.bobs]
        self._hashers: dict = {}
        self._sources: dict = {}
        self._cells: dict = {}
        self._incs: dict = {}
        self._phase_cores: dict = {}
        self._star_core = None
        self.trace: list | None = [] if cfg.trace else None
        self.violations: list = []
        self.short_collisions = 0
        self.long_collisions = 0
        if self.instrument:
            from robustsim.potential import TranscriptBook
            self.book = TranscriptBook(cfg.m)
        self._events = None
        self._zeros = np.zeros(self.layout.epoch_rounds, dtype=np.uint8)
        self._epoch_flips = [0] * (cfg.m + 1)

    # --- randomness --------------------------------------------------------------

    def phase_core(self, phase: int) -> np.ndarray:
        core = self._phase_cores.get(phase)
        if core is None:
            rng = np.random.default_rng(derive_seed(self.cfg.seed, "phase_core", phase))
            core = rng.integers(0, 2, self.prm.phase_core_bits, dtype=np.uint8)
            self._phase_cores = {phase: core}
        return core

    def star_core(self) -> np.ndarray:
        if self._star_core is None:
            rng = np.random.default_rng(derive_seed(self.cfg.seed, "core_star"))
            self._star_core = rng.integers(0, 2, self.prm.core_star_bits, dtype=np.uint8)
        return self._star_core

    def hasher(self, key) -> ShortHasher:
        h = self._hashers.get(key)
        if h is None:
            prm = self.prm
            core = self.phase_core(key[1]) if isinstance(key, tuple) else np.unpackbits(
                np.frombuffer(key, dtype=np.uint8))[:prm.phase_core_bits]
            n_rand = prm.c * prm.L
            src = rand_init(core, n_rand, 2.0 ** -prm.c)
            h = ShortHasher(extract_range(src, 1, n_rand), prm.c, prm.L)
            if len(self._hashers) > 64:
                self._hashers.clear()
            self._hashers[key] = h
        return h

    def source(self, key):
        src = self._sources.get(key)
        if src is None:
            prm = self.prm
            core = self.star_core() if isinstance(key, tuple) else np.unpackbits(
                np.frombuffer(key, dtype=np.uint8))[:prm.core_star_bits]
            src = rand_init(core, prm.R * prm.r * prm.o, 2.0 ** -prm.o)
            self._sources[key] = src
        return src

    def resolve(self, cell: HashCell) -> int:
        if cell.value is not None:
            return cell.value
        chain = []
        while cell.value is None:
            chain.append(cell)
            cell = cell.parent
        acc = cell.value
        o = self.prm.o
        for c in reversed(chain):
            key = (c.star, c.p, c.sigma)
            inc = self._incs.get(key)
            if inc is None:
                sig = np.unpackbits(np.frombuffer(c.sigma, dtype=np.uint8))[:self.prm.r]
                inc = epoch_increment(self.source(c.star), c.p, sig, o)
                self._incs[key] = inc
            acc ^= inc
            c.value = acc
            c.parent = c.sigma = None
        return acc

    def child_cell(self, parent: HashCell, p: int, sigma: bytes, star) -> HashCell:
        key = (id(parent), p, sigma, star)
        hit = self._cells.get(key)
        if hit is not None and hit[0] is parent:
            return hit[1]
        if not any(sigma):
            cell = HashCell(parent=parent, p=p, sigma=sigma, star=star)
            # an all-zero epoch leaves the hash unchanged
            if parent.value is not None:
                cell.value, cell.parent, cell.sigma = parent.value, None, None
        else:
            cell = HashCell(parent=parent, p=p, sigma=sigma, star=star)
        self._cells[key] = (parent, cell)
        return cell

    # --- robust transmissions ------------------------------------------------------

    def _receive(self, core: np.ndarray, t: int, flips: np.ndarray) -> np.ndarray:
        code, reps = plan(core.size, t)
        if self.fast and int(flips.sum()) <= t:
            return core  # within the decoding guarantee of the code
        word = code.encode(core)
        L = code.length
        if reps == 1:
            return code.decode(word ^ flips)
        from robustsim.coding import MajorityVote
        vote = MajorityVote()
        for j in range(reps):
            vote.feed(code.decode(word ^ flips[j * L:(j + 1) * L]).tobytes())
        return np.frombuffer(vote.candidate, dtype=np.uint8).copy()

    def _exchange(self, core_fn, t: int, rounds: int, good_key, set_key) -> None:
        for i, ch in enumerate(self.channels):
            f = ch.flips(LEADER_TO_MEMBER, ch.round, rounds)
            nf = int(f.sum())
            self._epoch_flips[i + 1] += nf
            ch.skip(rounds, used_down=rounds)
            if nf == 0 and self.fast:
                got_key = good_key
            else:
                core = core_fn()
                got = self._receive(core, t, f)
                got_key = good_key if np.array_equal(got, core) else np.packbits(got).tobytes()
            set_key(self.bobs[i], got_key)

    def exchange_core_star(self) -> None:
        prm = self.prm
        self.alice.star_key = ("star",)
        self._exchange(self.star_core, prm.core_star_budget, self.layout.core_rounds, ("star",),
                       lambda b, k: setattr(b, "star_key", k))

    def exchange_phase_seed(self, phase: int) -> None:
        prm = self.prm
        key = ("phase", phase)
        self.alice.seed_key = key
        self._exchange(lambda: self.phase_core(phase), prm.phase_core_budget, self.layout.seed_rounds,
                       key, lambda b, k: setattr(b, "seed_key", k))

    # --- verification ------------------------------------------------------------------

    def _pair_obj(self, party: Party, p: int, ch: int):
        if p < 0:
            return None
        ent = party.hd.get(p)
        if ent is None:
            return None
        return self.pair.encode(p, self.resolve(ent[0][ch]))[1]

    def _quad(self, party: Party, ch: int):
        """Objects and short hashes (G_k, G_1, G_2, G_P) of one party on one channel."""
        h = self.hasher(party.seed_key)
        L = self.prm.L
        objs = [party.k, self._pair_obj(party, party.mp1, ch), self._pair_obj(party, party.mp2, ch),
                self._pair_obj(party, party.P, ch)]
        return objs, [None if o is None else h.hash_int(o, L) for o in objs]

    def _pack(self, gs) -> int:
        W = self.prm.c + 1
        q = 0
        for j, g in enumerate(gs):
            if g is not None:
                q |= (1 | (g << 1)) << (j * W)
        return q

    def _unpack(self, q: int) -> list:
        W = self.prm.c + 1
        mask = (1 << W) - 1
        out = []
        for j in range(4):
            w = (q >> (j * W)) & mask
            out.append(w >> 1 if w & 1 else None)
        return out

    @staticmethod
    def _alice_decide(a_gs, recv, k_obj_hash):
        """Leader aggregation. a_gs[i] / recv[i] are (G_k, G_1, G_2, G_P) per channel."""
        m = len(recv)
        if any(r[0] != k_obj_hash or k_obj_hash is None for r in recv):
            return "E", [[None] * 4 for _ in range(m)], False
        gp_match = all(a_gs[i][3] is not None and a_gs[i][3] == recv[i][3] for i in range(m))
        if all(_in(a_gs[i][1], recv[i][1], recv[i][2]) for i in range(m)):
            vote, keep1, keep2 = "v1", True, True
        elif all(a_gs[i][2] is not None and _in(a_gs[i][2], recv[i][1], recv[i][2]) for i in range(m)):
            vote, keep1, keep2 = "v2", False, True
        else:
            vote, keep1, keep2 = "none", False, False
        replies = [[k_obj_hash, a_gs[i][1] if keep1 else None, a_gs[i][2] if keep2 else None,
                    a_gs[i][3] if gp_match else None] for i in range(m)]
        return vote, replies, gp_match

    @staticmethod
    def _bob_decide(b_gs, recv):
        if b_gs[0] != recv[0] or recv[0] is None:
            vote = "E"
        elif _in(b_gs[1], recv[1], recv[2]):
            vote = "v1"
        elif b_gs[2] is not None and _in(b_gs[2], recv[1], recv[2]):
            vote = "v2"
        else:
            vote = "none"
        return vote, b_gs[3] is not None and b_gs[3] == recv[3]

    @staticmethod
    def _faults(own_objs, own_gs, their_objs, their_gs, pairs) -> int:
        n = 0
        for a, b in pairs:
            ga, gb = own_gs[a], their_gs[b]
            if ga is None or gb is None or own_objs[a] is None or their_objs[b] is None:
                continue
            if (own_objs[a] == their_objs[b]) != (ga == gb):
                n += 1
        return n

    def _synced(self) -> bool:
        A = self.alice
        key = (A.P, A.k)
        for i, B in enumerate(self.bobs):
            if (B.P, B.k) != key or B.seed_key != A.seed_key:
                return False
            for p in (A.mp1, A.P):
                ea, eb = A.hd.get(p), B.hd.get(p)
                if ea is None or eb is None or ea[0][i] is not eb[0][0]:
                    return False
        return True

    def verification(self, fl):
        """Runs the exchange; returns per-party (vote, compute) and instrumentation."""
        half = self.layout.half
        m = self.cfg.m
        A = self.alice
        z = self._zeros
        clean = all(fu is z or (not fu[:half].any() and not fd[half:2 * half].any()) for fd, fu in fl)
        if self.fast and clean and self._synced():
            return [("v1", p.k == 1 and p.E == 0) for p in self.parties], None
        masks_up = [_bits_mask(fu[:half]) for fd, fu in fl]
        masks_down = [_bits_mask(fd[half:2 * half]) for fd, fu in fl]
        b_q = [self._quad(B, 0) for B in self.bobs]
        recvA = [self._unpack(self._pack(b_q[i][1]) ^ masks_up[i]) for i in range(m)]
        a_q = [self._quad(A, i) for i in range(m)]
        a_gs = [q[1] for q in a_q]
        vote_a, replies, gp_match = self._alice_decide(a_gs, recvA, a_gs[0][0])
        out = [(vote_a, None)]
        recvB = [self._unpack(self._pack(replies[i]) ^ masks_down[i]) for i in range(m)]
        for i, B in enumerate(self.bobs):
            out.append(self._bob_decide(b_q[i][1], recvB[i]))
        for idx, p in enumerate(self.parties):
            vote, gp = out[idx]
            if vote == "E":
                p.E += 1
            elif vote == "v1":
                p.v1 += 1
            elif vote == "v2":
                p.v2 += 1
        res = [(out[0][0], A.k == 1 and A.E == 0 and gp_match)]
        res += [(v, B.k == 1 and B.E == 0 and gp) for (v, gp), B in zip(out[1:], self.bobs)]
        info = None
        if self.instrument:
            pairs = [(0, 0), (1, 1), (1, 2), (2, 1), (2, 2), (3, 3)]
            faults = 0
            for i in range(m):
                rep_objs = [a_q[i][0][j] if replies[i][j] is not None else None for j in range(4)]
                faults += self._faults(a_q[i][0], a_gs[i], b_q[i][0], b_q[i][1], pairs)
                faults += self._faults(b_q[i][0], b_q[i][1], rep_objs, replies[i], pairs)
            lost = self._lost_vote(a_gs, recvA, recvB, b_q, res)
            info = {"hash_fault": faults > 0, "lost_vote": lost}
            self.short_collisions += faults
        return res, info

    def _lost_vote(self, a_gs, recvA, recvB, b_q, res) -> bool:
        """Did corruption, a collision or a bad seed cost some party a meeting-point vote?"""
        m = self.cfg.m
        A = self.alice
        # meeting-point hashes arrive uncorrupted, G_k and G_P as received
        cfA = [[recvA[i][0], b_q[i][1][1], b_q[i][1][2], recvA[i][3]] for i in range(m)]
        cf_vote_a, cf_rep, _ = self._alice_decide(a_gs, cfA, a_gs[0][0])
        votes = [[cf_vote_a]]
        for i in range(m):
            cfB = [recvB[i][0], cf_rep[i][1], cf_rep[i][2], recvB[i][3]]
            votes[0].append(self._bob_decide(b_q[i][1], cfB)[0])
        # the whole exchange run noiselessly with the leader's seed
        if any(B.seed_key != A.seed_key for B in self.bobs):
            h = self.hasher(A.seed_key)
            L = self.prm.L
            b_gs = [[None if o is None else h.hash_int(o, L) for o in q[0]] for q in b_q]
            a_true = [[None if o is None else h.hash_int(o, L) for o in self._quad(A, i)[0]]
                      for i in range(m)]
            v_a, rep, _ = self._alice_decide(a_true, b_gs, a_true[0][0])
            votes.append([v_a] + [self._bob_decide(b_gs[i], rep[i])[0] for i in range(m)])
        # a party on the E branch casts no vote, so it cannot lose one
        return any(cv in ("v1", "v2") and r[0] != "E" and cv != r[0]
                   for cf in votes for cv, r in zip(cf, res))

    # --- computation -------------------------------------------------------------------

    def computation(self, decide, fl):
        r = self.layout.r
        n = self.cfg.n
        half = self.layout.half
        m = self.cfg.m
        A = self.alice
        bobs = self.bobs
        parties = self.parties
        comp = [d[1] for d in decide]
        first_half = (r + 1) // 2
        # flip flags of the computation rounds, as lists (None when the window is clean)
        z = self._zeros
        fds = [None if fd is z or not fd[2 * half:].any() else fd[2 * half:].tolist() for fd, fu in fl]
        fus = [None if fu is z or not fu[2 * half:].any() else fu[2 * half:].tolist() for fd, fu in fl]
        sig = [[bytearray(r) for _ in range(p.nch)] if comp[j] else None for j, p in enumerate(parties)]
        used_down = [0] * m
        used_up = [0] * m
        flips_read = self._epoch_flips
        lead_prog = A.inst.program
        a_base = A.P * r
        b_base = [B.P * r for B in bobs]
        for j in range(r):
            if comp[0]:
                g_a = a_base + j + 1
                acts_a = [lead_prog.action(A.inst.state, g_a, i) for i in range(m)] if g_a <= n else None
            else:
                g_a = 0
                acts_a = [0] * m if j < first_half else [EXPECT] * m
            got_a = [None] * m
            for i in range(m):
                B = bobs[i]
                if comp[i + 1]:
                    g_b = b_base[i] + j + 1
                    b = B.inst.program.action(B.inst.state, g_b, 0) if g_b <= n else IMAG
                else:
                    g_b = 0
                    b = EXPECT if j < first_half else 0
                a = acts_a[i] if acts_a is not None else IMAG
                a_sends = a is not EXPECT and a != IMAG
                b_sends = b is not EXPECT and b != IMAG
                down = a if a_sends else 0
                up = b if b_sends else 0
                used_down[i] += a_sends
                used_up[i] += b_sends
                if g_a and acts_a is not None:
                    if a_sends:
                        sig[0][i][j] = a
                    else:
                        f = fus[i][j] if fus[i] is not None else 0
                        flips_read[0] += f
                        got_a[i] = up ^ f
                        sig[0][i][j] = got_a[i]
                if g_b and b != IMAG:
                    if b_sends:
                        sig[i + 1][0][j] = b
                        B.inst.state = B.inst.program.step(B.inst.state, g_b, (None,))
                    else:
                        f = fds[i][j] if fds[i] is not None else 0
                        flips_read[i + 1] += f
                        got = down ^ f
                        sig[i + 1][0][j] = got
                        B.inst.state = B.inst.program.step(B.inst.state, g_b, (got,))
                    B.tape[g_b - 1] = B.inst.state
            if g_a and acts_a is not None:
                A.inst.state = lead_prog.step(A.inst.state, g_a, got_a)
                A.tape[g_a - 1] = A.inst.state
        for i, ch in enumerate(self.channels):
            ch.sent[0] += used_down[i]
            ch.sent[1] += used_up[i]
        sigmas = [None] * len(parties)
        for idx, p in enumerate(parties):
            if not comp[idx]:
                continue
            cells = []
            sigs = []
            for ch in range(p.nch):
                s = np.packbits(np.frombuffer(bytes(sig[idx][ch]), dtype=np.uint8)).tobytes()
                sigs.append(s)
                cells.append(self.child_cell(p.hd[p.P][0][ch], p.P + 1, s, p.star_key))
            p.P += 1
            snap = p.inst.snapshot()
            p.max_snap = max(p.max_snap, snap.size)
            p.hd[p.P] = (tuple(cells), snap)
            p.reset()
            sigmas[idx] = sigs
        return comp, sigmas

    # --- transition --------------------------------------------------------------------

    def transition(self, p: Party) -> str:
        if 2 * p.E >= p.k:
            p.reset()
            branch = "error"
        elif p.k == p.kt and 5 * p.v1 >= 2 * p.kt:
            self._rollback(p, p.mp1)
            branch = "mp1"
        elif p.k == p.kt and 5 * p.v2 >= 2 * p.kt:
            self._rollback(p, p.mp2)
            branch = "mp2"
        elif p.k == p.kt:
            p.v1 = p.v2 = 0
            branch = "vote_reset"
        else:
            branch = "none"
        p.hd = prune(p.hd, p.P)
        return branch

    def _rollback(self, p: Party, target: int) -> None:
        ent = p.hd.get(target)
        if ent is None or target < 0:
            raise AssertionError(f"party {p.idx}: rollback target {target} missing from HD")
        p.P = target
        p.inst.restore(ent[1])
        p.reset()

    # --- epochs ------------------------------------------------------------------------

    def epoch(self, e: int) -> None:
        lay = self.layout
        for p in self.parties:
            p.k += 1
            p.kt = 1 << ceil_log2(p.k)
            p.mp1, p.mp2 = compute_meeting_points(p.P, p.kt)
        start = [(p.P, p.k, p.E, p.v1, p.v2, p.mp1, p.mp2) for p in self.parties] if self.instrument else None
        fl = []
        for ch in self.channels:
            if ch.schedule.count(2 * ch.round, 2 * (ch.round + lay.epoch_rounds)):
                fl.append((ch.flips(LEADER_TO_MEMBER, ch.round, lay.epoch_rounds),
                           ch.flips(MEMBER_TO_LEADER, ch.round, lay.epoch_rounds)))
            else:
                fl.append((self._zeros, self._zeros))
            ch.skip(2 * lay.half, used_down=lay.half, used_up=lay.half)
        half = lay.half
        if self.instrument:
            self._epoch_flips[0] += sum(int(fu[:half].sum()) for fd, fu in fl)
            for i, (fd, fu) in enumerate(fl):
                self._epoch_flips[i + 1] += int(fd[half:2 * half].sum())
        decide, info = self.verification(fl)
        for ch in self.channels:
            ch.skip(lay.r)
        comp, sigmas = self.computation(decide, fl)
        if self.instrument:
            self._check_transition_stage()
        branches = [self.transition(p) for p in self.parties]
        if self.instrument:
            self._record(e, start, decide, comp, sigmas, branches, info)
        self._track_memory()

    def _check_transition_stage(self) -> None:
        for p in self.parties:
            if 2 * p.E > p.k + 1:
                self.violations.append(f"E > 0.5(k+1) at transition: party {p.idx} k={p.k} E={p.E}")
            j = 0
            while (1 << j) <= p.P:
                mp = (1 << j) * (p.P // (1 << j))
                if mp > 0 and mp not in p.hd:
                    self.violations.append(f"MP1 {mp} (scale {1 << j}) missing: party {p.idx} P={p.P}")
                j += 1

    def _record(self, e, start, decide, comp, sigmas, branches, info) -> None:
        lay = self.layout
        lim = math.floor(math.log2(self.prm.R)) + 2
        for idx, p in enumerate(self.parties):
            keys = sorted(p.hd)
            if not set(keys) <= allowed_meeting_points(p.P) or len(keys) > lim:
                self.violations.append(f"HD shape: epoch {e + 1} party {idx} P={p.P} keys={keys}")
            if not (2 * p.E < p.k or p.E == p.k == 0):
                self.violations.append(f"counter law: epoch {e + 1} party {idx} k={p.k} E={p.E}")
            P0, k0, E0, v10, v20, mp1, mp2 = start[idx]
            vote = decide[idx][0]
            rec = {
                "epoch": e + 1, "party": idx, "k": p.k, "E": p.E, "v1": p.v1, "v2": p.v2, "P": p.P,
                "branch": f"{vote}/{'compute' if comp[idx] else 'dummy'}/{branches[idx]}",
                "corrupted_bits_this_epoch": self._epoch_flips[idx],
                "hd_keys": keys,
                "P_start": P0, "k_start": k0, "E_start": E0, "mp1": mp1, "mp2": mp2,
                "vote": vote, "computed": bool(comp[idx]), "transition": branches[idx],
                "sigma": [s.hex() for s in sigmas[idx]] if sigmas[idx] is not None else None,
                "lost_vote": bool(info and info["lost_vote"]),
                "hash_fault": bool(info and info["hash_fault"]),
                "seed_ok": p.seed_key == self.alice.seed_key,
                "star_ok": p.star_key == self.alice.star_key,
            }
            self.trace.append(rec)
        self.long_collisions += self.book.update_from_records(self.trace[-len(self.parties):],
                                                            self._hd_values())

    def _hd_values(self):
        """Per channel, {p: (leader hash, member hash)} for indices both sides store."""
        out = []
        A = self.alice
        for i, B in enumerate(self.bobs):
            common = {}
            for p in A.hd.keys() & B.hd.keys():
                common[p] = (self.resolve(A.hd[p][0][i]), self.resolve(B.hd[p][0][0]))
            out.append(common)
        return out

    def _track_memory(self) -> None:
        for p in self.parties:
            if len(p.hd) > p.max_hd:
                p.max_hd = len(p.hd)

    def memory_usage(self) -> int:
        """Upper bound on the largest per-party storage seen: HD entries, seeds, counters."""
        prm = self.prm
        ib = prm.index_bits
        return max(p.max_hd * (ib + p.nch * prm.o + 8 * p.max_snap)
                   + prm.core_star_bits + prm.phase_core_bits + 5 * ib for p in self.parties)

    def memory_bound(self) -> int:
        prm = self.prm
        lr = max(1, ceil_log2(prm.R))
        snap = max(8 * p.max_snap for p in self.parties) or 8
        return MEMORY_K * (prm.m * prm.o * lr + lr * snap)

    # --- bulk skip ---------------------------------------------------------------------

    def _idle(self) -> bool:
        A = self.alice
        if A.P < self.prm.compute_epochs:
            return False
        for p in self.parties:
            if p.P != A.P or p.k or p.E or p.v1 or p.v2:
                return False
        for i, B in enumerate(self.bobs):
            if B.seed_key != A.seed_key or B.star_key != A.star_key:
                return False
            if A.hd.keys() != B.hd.keys():
                return False
            if any(A.hd[p][0][i] is not B.hd[p][0][0] for p in A.hd):
                return False
        return True

    def _event_keys(self) -> np.ndarray:
        if self._events is None:
            keys = [self.layout.classify(ch.schedule.positions(), self.prm.phase_core_budget)
                    for ch in self.channels]
            self._events = np.unique(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)
        return self._events

    def _item_round(self, key: int) -> int:
        lay = self.layout
        if key >= 2 * lay.R:
            return lay.total_rounds
        e = key // 2
        if key % 2 == 0 and e % lay.I == 0:
            return lay.phase_start(e // lay.I)
        return lay.epoch_start(e)

    def bulk_skip(self, key0: int) -> int:
        """Skip clean idle timeline items from key0 on; returns the next item to process.

        Item 2e+1 is epoch e and item 2e (e a phase start) is that phase's seed
        exchange. Every skipped epoch runs verification with all hashes equal,
        then an imaginary computation that changes neither hashes nor states.
        """
        lay = self.layout
        I = lay.I
        ev = self._event_keys()
        pos = np.searchsorted(ev, key0)
        key1 = min(int(ev[pos]) if pos < ev.size else 2 * lay.R, 2 * lay.R)
        if key1 <= key0:
            return key0
        n_epochs = key1 // 2 - key0 // 2
        ph_lo = -(-key0 // (2 * I))
        ph_hi = -(-key1 // (2 * I))
        n_phases = ph_hi - ph_lo
        rounds = self._item_round(key1) - self._item_round(key0)
        for ch in self.channels:
            ch.skip(rounds, used_down=n_epochs * lay.half + n_phases * lay.seed_rounds,
                    used_up=n_epochs * lay.half)
        if n_phases:
            for p in self.parties:
                p.seed_key = ("phase", ph_hi - 1)
        if n_epochs:
            P0 = self.alice.P
            for p in self.parties:
                p.hd = bulk_hd(p.hd, P0, P0 + n_epochs)
                p.P = P0 + n_epochs
            # |allowed(P)| = floor(log2 P) + 2 and pruned points never return, so HD
            # size is non-decreasing over a clean stretch: the last epoch is the peak
            self._track_memory()
        return key1

    # --- driver ------------------------------------------------------------------------

    def run(self) -> SimulationResult:
        t0 = time.perf_counter()
        lay = self.layout
        R, I = lay.R, lay.I
        self._epoch_flips = [0] * (self.cfg.m + 1)
        self.exchange_core_star()
        key = 0
        while key < 2 * R:
            if self.fast and self._idle():
                key2 = self.bulk_skip(key)
                if key2 != key:
                    key = key2
                    continue
            e = key // 2
            if key % 2 == 0:
                if e % I == 0:
                    self.exchange_phase_seed(e // I)
                key += 1
                continue
            self.epoch(e)
            self._epoch_flips = [0] * (self.cfg.m + 1)
            key += 1
        return self._result(time.perf_counter() - t0)

    def _result(self, wall: float) -> SimulationResult:
        ref = reference_run(self.protocol)
        success = all(p.tape == ref.tapes[j] for j, p in enumerate(self.parties))
        n = self.cfg.n
        logical = [ch.logical_bits for ch in self.channels]
        for ch in self.channels:
            assert ch.round == self.layout.total_rounds
        return SimulationResult(
            config=self.cfg.to_dict(), params=self.prm.to_dict(), success=success,
            logical_bits=logical, physical_bits=[ch.physical_bits for ch in self.channels],
            corrupted_bits=[ch.corrupted for ch in self.channels],
            overhead=max(logical) / n, epochs=self.prm.R,
            final_P=[p.P for p in self.parties], final_states=[p.inst.state for p in self.parties],
            short_collisions=self.short_collisions if self.instrument else None,
            long_collisions=self.long_collisions if self.instrument else None,
            memory_bits=self.memory_usage(), memory_bound=self.memory_bound(),
            invariant_violations=list(self.violations), wall_time=wall, trace=self.trace)


def closed_form_bits(prm: SimulationParams) -> int:
    """Logical bits per channel of a noiseless run."""
    lay = Layout.for_params(prm)
    return prm.n + prm.R * 8 * (prm.c + 1) + lay.phases * lay.seed_rounds + lay.core_rounds


def run(cfg: RunConfig, protocol: Protocol | None = None) -> SimulationResult:
    return Simulation(cfg, protocol).run()
