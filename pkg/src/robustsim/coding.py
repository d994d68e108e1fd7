"""Error-corrected seed transmission.

A binary block code built from a shortened systematic Reed-Solomon code over
GF(2^w), with every symbol expanded to w bits. A code with ``d_half`` parity
symbol pairs has symbol distance 2*d_half + 1 and therefore bit distance at
least that, so it corrects any d_half bit flips.

Budgets t >= l are handled as in the seed exchange procedure: a code with
d_half = l, repeated 2*ceil(t/l) + 1 times, and a Boyer-Moore vote over the
decoded copies.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Iterable

import numba
import numpy as np

from robustsim.gf import IRREDUCIBLE, field

MAX_RS_WIDTH = 20


@numba.njit(cache=True)
def _rs_parity(msg, gen_log, exp, log, order):
    """Remainder of msg(x) * x^(2d) modulo the monic generator (LFSR division)."""
    nd = gen_log.shape[0]
    reg = np.zeros(nd, dtype=np.int64)
    for i in range(msg.shape[0]):
        fb = msg[i] ^ reg[0]
        for j in range(nd - 1):
            reg[j] = reg[j + 1]
        reg[nd - 1] = 0
        if fb != 0:
            lf = log[fb]
            for j in range(nd):
                gl = gen_log[j]
                if gl >= 0:
                    reg[j] ^= exp[(lf + gl) % order]
    return reg


@numba.njit(cache=True)
def _rs_syndromes(word, nd, exp, log, order):
    """S_j = c(alpha^j), j = 1..nd, where c has its first symbol at the top degree."""
    syn = np.zeros(nd, dtype=np.int64)
    for j in range(1, nd + 1):
        acc = 0
        for i in range(word.shape[0]):
            if acc != 0:
                acc = exp[(log[acc] + j) % order]
            acc ^= word[i]
        syn[j - 1] = acc
    return syn


@numba.njit(cache=True)
def _gmul(a, b, exp, log, order):
    if a == 0 or b == 0:
        return 0
    return exp[(log[a] + log[b]) % order]


@numba.njit(cache=True)
def _rs_correct(word, syn, exp, log, order):
    """Berlekamp-Massey, Chien search and Forney; corrects word in place.

    Returns the number of corrected symbols, or -1 when decoding fails.
    """
    nd = syn.shape[0]
    n = word.shape[0]
    lam = np.zeros(nd + 1, dtype=np.int64)
    prev = np.zeros(nd + 1, dtype=np.int64)
    lam[0] = 1
    prev[0] = 1
    L = 0
    shift = 1
    b = 1
    for r in range(nd):
        delta = syn[r]
        for i in range(1, L + 1):
            delta ^= _gmul(lam[i], syn[r - i], exp, log, order)
        if delta == 0:
            shift += 1
            continue
        coef = _gmul(delta, exp[(order - log[b]) % order], exp, log, order)
        tmp = lam.copy()
        for i in range(shift, nd + 1):
            lam[i] ^= _gmul(coef, prev[i - shift], exp, log, order)
        if 2 * L <= r:
            L = r + 1 - L
            prev = tmp
            b = delta
            shift = 1
        else:
            shift += 1
    deg = 0
    for i in range(nd + 1):
        if lam[i] != 0:
            deg = i
    if deg != L or L == 0:
        return -1
    # omega = S(x) * lambda(x) mod x^nd
    omega = np.zeros(nd, dtype=np.int64)
    for i in range(nd):
        acc = 0
        for j in range(min(i, L) + 1):
            acc ^= _gmul(lam[j], syn[i - j], exp, log, order)
        omega[i] = acc
    found = 0
    for pos in range(n):
        e = n - 1 - pos                       # locator exponent of this position
        xinv = (order - e) % order           # log of X^-1
        val = 0
        for i in range(L + 1):
            if lam[i] != 0:
                val ^= exp[(log[lam[i]] + xinv * i) % order]
        if val != 0:
            continue
        num = 0
        for i in range(nd):
            if omega[i] != 0:
                num ^= exp[(log[omega[i]] + xinv * i) % order]
        den = 0
        for i in range(1, L + 1, 2):          # formal derivative keeps odd terms
            if lam[i] != 0:
                den ^= exp[(log[lam[i]] + xinv * (i - 1)) % order]
        if den == 0:
            return -1
        word[pos] ^= _gmul(num, exp[(order - log[den]) % order], exp, log, order)
        found += 1
    if found != L:
        return -1
    return found


class BlockCode:
    """Binary code for ell-bit messages correcting d_half bit flips per codeword."""

    def __init__(self, ell: int, d_half: int):
        if ell < 1 or d_half < 0:
            raise ValueError("need ell >= 1 and d_half >= 0")
        self.ell = ell
        self.d_half = d_half
        if d_half == 0:
            self.w = self.k = 0
            self.length = ell
            return
        w = 3
        while -(-ell // w) + 2 * d_half > (1 << w) - 1:
            w += 1
        if w > MAX_RS_WIDTH or w not in IRREDUCIBLE:
            raise ValueError(f"no Reed-Solomon width for ell={ell}, d_half={d_half}")
        self.w = w
        self.k = -(-ell // w)
        self.nd = 2 * d_half
        self.nsym = self.k + self.nd
        self.length = ell + self.nd * w
        f = field(w)
        self._exp = f.exp
        self._log = f.log
        self._order = np.int64(f.q - 1)
        gen = np.array([1], dtype=np.int64)                 # highest degree first
        for i in range(1, self.nd + 1):
            root = int(f.exp[i])
            nxt = np.zeros(gen.size + 1, dtype=np.int64)
            nxt[:-1] = gen
            for j in range(gen.size):
                nxt[j + 1] ^= f.mul(int(gen[j]), root)
            gen = nxt
        tail = gen[1:]                                      # monic: drop the leading 1
        self._gen_log = np.where(tail > 0, f.log[np.maximum(tail, 0)], -1).astype(np.int64)
        self._weights = (1 << np.arange(w - 1, -1, -1)).astype(np.int64)

    def __repr__(self):
        return f"BlockCode(ell={self.ell}, d_half={self.d_half}, length={self.length}, w={self.w})"

    def _symbols(self, bits: np.ndarray) -> np.ndarray:
        padded = np.zeros(self.k * self.w, dtype=np.int64)
        padded[:bits.size] = bits
        return padded.reshape(self.k, self.w) @ self._weights

    def _sym_bits(self, syms: np.ndarray) -> np.ndarray:
        return ((syms[:, None] >> np.arange(self.w - 1, -1, -1)) & 1).astype(np.uint8).ravel()

    def encode(self, msg) -> np.ndarray:
        m = np.asarray(msg, dtype=np.uint8).ravel()
        if m.size != self.ell:
            raise ValueError(f"message must have {self.ell} bits, got {m.size}")
        if self.d_half == 0:
            return m.copy()
        par = _rs_parity(self._symbols(m), self._gen_log, self._exp, self._log, self._order)
        return np.concatenate([m, self._sym_bits(par)])

    def decode(self, word) -> np.ndarray:
        wv = np.asarray(word, dtype=np.uint8).ravel()
        if wv.size != self.length:
            raise ValueError(f"word must have {self.length} bits, got {wv.size}")
        if self.d_half == 0:
            return wv.copy()
        syms = np.concatenate([self._symbols(wv[:self.ell]),
                               wv[self.ell:].astype(np.int64).reshape(self.nd, self.w) @ self._weights])
        syn = _rs_syndromes(syms, self.nd, self._exp, self._log, self._order)
        if syn.any():
            fixed = syms.copy()
            if _rs_correct(fixed, syn, self._exp, self._log, self._order) >= 0:
                syms = fixed
            # on failure fall back to the systematic part as received
        return self._sym_bits(syms[:self.k])[:self.ell]


@lru_cache(maxsize=64)
def block_code(ell: int, d_half: int) -> BlockCode:
    return BlockCode(ell, d_half)


def plan(ell: int, t: int) -> tuple[BlockCode, int]:
    """Code and repetition count for an ell-bit message under budget t."""
    if t < 0:
        raise ValueError("budget must be non-negative")
    if t >= ell:
        return block_code(ell, ell), 2 * (-(-t // ell)) + 1
    return block_code(ell, t), 1


def transmitted_bits(ell: int, t: int) -> int:
    code, reps = plan(ell, t)
    return code.length * reps


class MajorityVote:
    """Boyer-Moore majority over a stream; state is exactly (candidate, count)."""

    __slots__ = ("candidate", "count")

    def __init__(self):
        self.candidate = None
        self.count = 0

    def feed(self, item) -> None:
        if self.count == 0:
            self.candidate = item
            self.count = 1
        elif item == self.candidate:
            self.count += 1
        else:
            self.count -= 1


def boyer_moore(stream: Iterable):
    vote = MajorityVote()
    for item in stream:
        vote.feed(item)
    return vote.candidate


def robust_send(core, t: int, send: Callable[[np.ndarray], None]) -> int:
    """Send the codeword of core as many times as the budget asks; returns bits sent."""
    core = np.asarray(core, dtype=np.uint8).ravel()
    code, reps = plan(core.size, t)
    word = code.encode(core)
    for _ in range(reps):
        send(word)
    return word.size * reps


def robust_receive(ell: int, t: int, recv: Callable[[int], np.ndarray]) -> np.ndarray:
    code, reps = plan(ell, t)
    if reps == 1:
        return code.decode(recv(code.length))
    vote = MajorityVote()
    for _ in range(reps):
        vote.feed(code.decode(recv(code.length)).tobytes())
    return np.frombuffer(vote.candidate, dtype=np.uint8).copy()


def robust_exchange(core, t: int, transfer: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Lockstep form: transfer(word) carries one codeword and returns what arrived."""
    core = np.asarray(core, dtype=np.uint8).ravel()
    code, reps = plan(core.size, t)
    word = code.encode(core)
    if reps == 1:
        return code.decode(transfer(word))
    vote = MajorityVote()
    for _ in range(reps):
        vote.feed(code.decode(transfer(word)).tobytes())
    return np.frombuffer(vote.candidate, dtype=np.uint8).copy()
