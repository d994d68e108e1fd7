"""Inner-product hashes over GF(2).

Hash values are plain ints: bit i-1 of a long hash holds H[i], bit i-1 of a
short hash holds G[i]. ``None`` is BOTTOM for both kinds; on the wire BOTTOM
is a cleared validity flag followed by an all-zero payload.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from robustsim.smallbias import BiasedSource, extract_indices

BOTTOM = None


def bits_to_int(bits) -> int:
    """Big-endian: bits[0] becomes the most significant bit."""
    arr = np.asarray(bits, dtype=np.uint8).ravel()
    if arr.size == 0:
        return 0
    return int.from_bytes(np.packbits(arr).tobytes(), "big") >> (-arr.size % 8)


def int_to_bits(x: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(0, dtype=np.uint8)
    raw = np.frombuffer(x.to_bytes((width + 7) // 8, "big"), dtype=np.uint8)
    return np.unpackbits(raw)[-width:].copy()


def reverse_bits(x: int, width: int) -> int:
    return int(format(x, f"0{width}b")[::-1], 2) if width else 0


def _vec_to_int(vec) -> int:
    """Little-endian packing: vec[i] becomes bit i."""
    return bits_to_int(np.asarray(vec, dtype=np.uint8)[::-1])


def long_hash_update(prev: int | None, sigma_p, block, o: int) -> int:
    """H_p[i] = H_{p-1}[i] XOR <sigma_p, S_i>, with S_i the i-th r-bit slice of block."""
    sigma = np.asarray(sigma_p, dtype=np.uint8).ravel()
    blk = np.asarray(block, dtype=np.uint8).ravel()
    r = sigma.size
    if prev is BOTTOM:
        raise ValueError("previous long hash must be valid")
    if blk.size != r * o:
        raise ValueError(f"block has {blk.size} bits, expected r*o = {r * o}")
    ips = (blk.reshape(o, r).astype(np.int64) @ sigma.astype(np.int64)) & 1
    return prev ^ _vec_to_int(ips)


def epoch_increment(source: BiasedSource, p: int, sigma_p, o: int) -> int:
    """The o-bit vector <sigma_p, S_i>, reading block p of size r*o from the source.

    Only the bits that meet a 1 in sigma_p are extracted.
    """
    sigma = np.asarray(sigma_p, dtype=np.uint8).ravel()
    r = sigma.size
    support = np.flatnonzero(sigma)
    if support.size == 0:
        return 0
    base = (p - 1) * r * o + 1
    idx = (base + np.arange(o)[:, None] * r + support[None, :]).ravel()
    bits = extract_indices(source, idx).reshape(o, support.size)
    return _vec_to_int(np.bitwise_xor.reduce(bits, axis=1))


class ShortHasher:
    """The c-bit hash G(O, S) for objects of at most L bits.

    S_i[1..L] is stored as an L-bit int with S_i[1] as its most significant bit,
    and objects use the same big-endian layout.
    """

    def __init__(self, rand, c: int, L: int):
        bits = np.asarray(rand, dtype=np.uint8).ravel()
        if bits.size != c * L:
            raise ValueError(f"short-hash randomness must have c*L = {c * L} bits, got {bits.size}")
        self.c, self.L = c, L
        self.rows = tuple(bits_to_int(bits[i * L:(i + 1) * L]) for i in range(c))

    def __eq__(self, other):
        return isinstance(other, ShortHasher) and self.rows == other.rows

    def __hash__(self):
        return hash(self.rows)

    def hash_int(self, obj: int, nbits: int) -> int:
        if nbits > self.L:
            raise ValueError(f"object of {nbits} bits exceeds L = {self.L}")
        shift = self.L - nbits
        out = 0
        for i, row in enumerate(self.rows):
            out |= ((obj & (row >> shift)).bit_count() & 1) << i
        return out


def short_hash(obj_bits, rand, c: int, L: int) -> int:
    obj = np.asarray(obj_bits, dtype=np.uint8).ravel()
    if obj.size > L:
        raise ValueError(f"object of {obj.size} bits exceeds L = {L}")
    return ShortHasher(rand, c, L).hash_int(bits_to_int(obj), obj.size)


@dataclass(frozen=True)
class PairLayout:
    """Bit layout of an encoded (p, H_p) pair: index_bits of p, then o hash bits."""

    index_bits: int
    o: int

    @property
    def L(self) -> int:
        return self.index_bits + self.o

    def encode(self, p: int, h: int | None) -> tuple[int, int]:
        """(flag, payload) with payload an L-bit big-endian int."""
        if h is BOTTOM:
            return 0, 0
        if not (0 <= p < (1 << self.index_bits)):
            raise ValueError(f"epoch index {p} does not fit in {self.index_bits} bits")
        # H[1] is the first hash bit on the wire, so reverse the little-endian hash int
        return 1, (p << self.o) | reverse_bits(h, self.o)

    def decode(self, flag: int, payload: int) -> tuple[int, int | None]:
        if not flag:
            return 0, BOTTOM
        p = payload >> self.o
        return p, reverse_bits(payload & ((1 << self.o) - 1), self.o)


def encode_mp_pair(p: int, h: int | None, index_bits: int, o: int) -> tuple[int, np.ndarray]:
    """(flag, L-bit array) for the pair (p, H_p)."""
    layout = PairLayout(index_bits, o)
    flag, payload = layout.encode(p, h)
    return flag, int_to_bits(payload, layout.L)


def decode_mp_pair(flag: int, bits, index_bits: int, o: int) -> tuple[int, int | None]:
    return PairLayout(index_bits, o).decode(flag, bits_to_int(bits))


def short_to_wire(g: int | None, c: int) -> np.ndarray:
    """Validity flag, then G[1..c]."""
    out = np.zeros(c + 1, dtype=np.uint8)
    if g is not BOTTOM:
        out[0] = 1
        out[1:] = (g >> np.arange(c)) & 1
    return out


def short_from_wire(bits) -> int | None:
    bits = np.asarray(bits, dtype=np.uint8)
    if not bits[0]:
        return BOTTOM
    return _vec_to_int(bits[1:])
