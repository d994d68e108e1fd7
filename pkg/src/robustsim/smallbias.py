"""rho-biased q-bit randomness from a short seed.

A source is parsed from a seed ``core`` of l*(1 + 10*log2 q) bits and answers
single-bit or block queries without ever materializing the q-bit string.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numba
import numpy as np

from robustsim.gf import IRREDUCIBLE, clmul_mod, field

MIN_WIDTH = 3


def bias_rounds(rho: float) -> int:
    """l = 3 * ceil(log2(1/rho))."""
    if not (0.0 < rho < 1.0):
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    inv = 1 / Fraction(rho)
    return 3 * (math.ceil(inv) - 1).bit_length()


def field_width(q: int) -> int:
    """Width w of the field used for a q-bit string (q rounded up to a power of two)."""
    if q < 1:
        raise ValueError("q must be positive")
    w = max(MIN_WIDTH, (q - 1).bit_length())
    if w not in IRREDUCIBLE:
        raise ValueError(f"q={q} needs a field of width {w}, beyond the tabulated range")
    return w


def seed_bits(q: int, rho: float) -> int:
    return bias_rounds(rho) * (1 + 10 * field_width(q))


def eval_poly(coeffs: Sequence[int], v: int, w: int) -> int:
    """sum_j coeffs[j] * v^j in GF(2^w), by Horner's rule."""
    if len(coeffs) < 1:
        raise ValueError("need at least one coefficient")
    poly = IRREDUCIBLE[w]
    acc = 0
    for cj in reversed(coeffs):
        acc = clmul_mod(acc, v, w, poly) ^ cj
    return acc


@dataclass(frozen=True, eq=True)
class BiasedSource:
    q: int
    w: int
    l: int
    a: int                          # bit t-1 holds a_t
    b: tuple[tuple[int, ...], ...]  # l rows of 7 field elements
    c_tbl: tuple[int, ...]          # bit j-1 of row t holds c^(t)_j
    d: tuple[tuple[int, int], ...]  # l rows of 2 field elements

    def representation_bits(self) -> int:
        """Bits held by the parsed seed (the O(log(1/rho) log q) footprint)."""
        return self.l * (1 + 10 * self.w)

    def __hash__(self):
        return hash((self.q, self.w, self.a, self.b, self.c_tbl, self.d))


def _bits_to_int(bits: np.ndarray) -> int:
    """Big-endian bit array to int."""
    out = 0
    for x in bits:
        out = (out << 1) | int(x)
    return out


def rand_init(core, q: int, rho: float) -> BiasedSource:
    core = np.asarray(core, dtype=np.uint8).ravel()
    w = field_width(q)
    l = bias_rounds(rho)
    need = l * (1 + 10 * w)
    if core.size < need:
        raise ValueError(f"seed too short: need {need} bits, got {core.size}")
    a = int(np.dot(core[:l].astype(np.int64), 1 << np.arange(l, dtype=np.int64))) if l < 63 \
        else sum(int(x) << t for t, x in enumerate(core[:l]))
    # per round t: 7 coefficients of b, then the w bits of c (c_1 first), then 2 of d
    rows = core[l:need].astype(np.int64).reshape(l, 10, w)
    vals = rows @ (1 << np.arange(w - 1, -1, -1, dtype=np.int64))    # big-endian words
    cvals = rows[:, 7, :] @ (1 << np.arange(w, dtype=np.int64))      # c_j at bit j-1
    b = [tuple(row) for row in vals[:, :7].tolist()]
    c_tbl = cvals.tolist()
    d = [tuple(row) for row in vals[:, 8:].tolist()]
    return BiasedSource(q=1 << w, w=w, l=l, a=a, b=tuple(b), c_tbl=tuple(c_tbl), d=tuple(d))


def _round_bit(src: BiasedSource, t: int, v: int) -> int:
    """r_t for field element v (rank v+1)."""
    u = eval_poly(src.b[t], v, src.w)
    if (u + 1) % 2 == 0:
        return 0
    z = eval_poly(src.d[t], v, src.w)
    j = max(1, z.bit_length())  # ceil(log2(rank z)) with rank z = z + 1
    return (src.c_tbl[t] >> (j - 1)) & 1


def extract_bit_slow(src: BiasedSource, i: int) -> int:
    """Direct per-round evaluation; reference path for small cases."""
    if not (1 <= i <= src.q):
        raise IndexError(f"index {i} outside [1, {src.q}]")
    v = i - 1
    acc = 0
    for t in range(src.l):
        if (src.a >> t) & 1:
            acc ^= _round_bit(src, t, v)
    return acc


# --- bitsliced evaluation -------------------------------------------------
#
# Every round t gets one bit lane of a uint64 word vector. The low bit of
# u_t = EvalPoly(b^t, v) is GF(2)-linear in the bits of v^1..v^6, and every
# bit of z_t = d0 + d1 v is affine in the bits of v, so both are assembled
# from precomputed column masks.

_TABLES: "weakref.WeakKeyDictionary[BiasedSource, tuple]" = weakref.WeakKeyDictionary()


def _tables(src: BiasedSource):
    tab = _TABLES.get(src)
    if tab is None:
        b = np.array(src.b, dtype=np.int64).reshape(src.l, 7)
        d = np.array(src.d, dtype=np.int64).reshape(src.l, 2)
        c = np.array(src.c_tbl, dtype=np.int64)
        a = np.array([(src.a >> t) & 1 for t in range(src.l)], dtype=np.int64)
        tab = _build_tables(b, c, d, a, np.int64(src.w), np.int64(IRREDUCIBLE[src.w]))
        _TABLES[src] = tab
    return tab


@numba.njit(cache=True)
def _gf_mul(a, b, w, poly):
    r = 0
    hi = w - 1
    for _ in range(w):
        r ^= a & -(b & 1)
        b >>= 1
        a = (a << 1) ^ (poly & -((a >> hi) & 1))
    return r


@numba.njit(cache=True)
def _parity64(x):
    x ^= x >> np.uint64(32)
    x ^= x >> np.uint64(16)
    x ^= x >> np.uint64(8)
    x ^= x >> np.uint64(4)
    x ^= x >> np.uint64(2)
    x ^= x >> np.uint64(1)
    return x & np.uint64(1)


@numba.njit(cache=True)
def _build_tables(b, c, d, a, w, poly):
    l = b.shape[0]
    nw = (l + 63) // 64
    nbytes = (w + 7) // 8
    one = np.uint64(1)
    u_const = np.zeros(nw, dtype=np.uint64)
    # u_tab[j-1, byte, value]: lanes whose low bit of b_j * v^j flips, for that byte of v^j
    cols = np.zeros((6, w, nw), dtype=np.uint64)
    z_const = np.zeros((w, nw), dtype=np.uint64)
    z_cols = np.zeros((w, w, nw), dtype=np.uint64)
    c_cols = np.zeros((w + 1, nw), dtype=np.uint64)
    a_mask = np.zeros(nw, dtype=np.uint64)
    for t in range(l):
        x = t >> 6
        bit = one << np.uint64(t & 63)
        if b[t, 0] & 1:
            u_const[x] |= bit
        if a[t]:
            a_mask[x] |= bit
        for j in range(1, 7):
            for k in range(w):
                if _gf_mul(b[t, j], 1 << k, w, poly) & 1:
                    cols[j - 1, k, x] |= bit
        for i in range(w):
            if (d[t, 0] >> i) & 1:
                z_const[i, x] |= bit
        for k in range(w):
            p = _gf_mul(d[t, 1], 1 << k, w, poly)
            for i in range(w):
                if (p >> i) & 1:
                    z_cols[k, i, x] |= bit
        for j in range(1, w + 1):
            if (c[t] >> (j - 1)) & 1:
                c_cols[j, x] |= bit
    u_tab = np.zeros((6, nbytes, 256, nw), dtype=np.uint64)
    for j in range(6):
        for byte in range(nbytes):
            for val in range(1, 256):
                low = val & -val
                k = byte * 8
                while (low >> (k - byte * 8)) != 1:
                    k += 1
                prev = val ^ low
                for x in range(nw):
                    u_tab[j, byte, val, x] = u_tab[j, byte, prev, x]
                    if k < w:
                        u_tab[j, byte, val, x] ^= cols[j, k, x]
    # squaring is GF(2)-linear: sq_tab[byte, value] = (value << 8*byte)^2
    sq_tab = np.zeros((nbytes, 256), dtype=np.int64)
    for byte in range(nbytes):
        for val in range(256):
            e = (val << (8 * byte)) & ((1 << w) - 1)
            if (val << (8 * byte)) >> w == 0:
                sq_tab[byte, val] = _gf_mul(e, e, w, poly)
    return (poly, w, sq_tab, u_const, u_tab, z_const, z_cols, c_cols, a_mask)


@numba.njit(cache=True)
def _square(x, sq_tab):
    r = 0
    for byte in range(sq_tab.shape[0]):
        r ^= sq_tab[byte, (x >> (8 * byte)) & 255]
    return r


@numba.njit(cache=True)
def _extract_sorted(vals, poly, w, sq_tab, u_const, u_tab, z_const, z_cols, c_cols, a_mask):
    """Bits for the ascending field elements vals (v = index - 1)."""
    nw = a_mask.shape[0]
    nbytes = u_tab.shape[1]
    count = vals.shape[0]
    out = np.zeros(count, dtype=np.uint8)
    z = np.empty((w, nw), dtype=np.uint64)
    pw = np.empty(6, dtype=np.int64)
    acc = np.empty(nw, dtype=np.uint64)
    seen = np.empty(nw, dtype=np.uint64)
    rr = np.empty(nw, dtype=np.uint64)
    for i in range(w):
        for x in range(nw):
            z[i, x] = z_const[i, x]
    v = 0
    for idx in range(count):
        # move z from v to the next element: z is affine in the bits of v
        diff = v ^ vals[idx]
        k = 0
        while diff:
            if diff & 1:
                for i in range(w):
                    for x in range(nw):
                        z[i, x] ^= z_cols[k, i, x]
            diff >>= 1
            k += 1
        v = vals[idx]
        pw[0] = v
        pw[1] = _square(v, sq_tab)
        pw[2] = _gf_mul(pw[1], v, w, poly)
        pw[3] = _square(pw[1], sq_tab)
        pw[4] = _gf_mul(pw[3], v, w, poly)
        pw[5] = _square(pw[2], sq_tab)
        for x in range(nw):
            acc[x] = u_const[x]
        for j in range(6):
            e = pw[j]
            for byte in range(nbytes):
                val = (e >> (8 * byte)) & 255
                for x in range(nw):
                    acc[x] ^= u_tab[j, byte, val, x]
        # lanes whose z has its top set bit at i pick c_{i+1}; z = 0 picks c_1
        for x in range(nw):
            seen[x] = 0
            rr[x] = 0
        for i in range(w - 1, -1, -1):
            for x in range(nw):
                zi = z[i, x]
                rr[x] |= zi & ~seen[x] & c_cols[i + 1, x]
                seen[x] |= zi
        bit = np.uint64(0)
        for x in range(nw):
            r = (rr[x] | (~seen[x] & c_cols[1, x])) & ~acc[x]
            bit ^= _parity64(r & a_mask[x])
        out[idx] = np.uint8(bit)
    return out


def extract_range(src: BiasedSource, first: int, count: int) -> np.ndarray:
    """Bits at indices first .. first+count-1 (1-based) as a uint8 array."""
    if count < 0 or first < 1 or first + count - 1 > src.q:
        raise IndexError(f"range [{first}, {first + count - 1}] outside [1, {src.q}]")
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    vals = np.arange(first - 1, first - 1 + count, dtype=np.int64)
    return _extract_sorted(vals, *_tables(src))


def extract_indices(src: BiasedSource, indices) -> np.ndarray:
    """Bits at arbitrary 1-based indices, returned in the given order."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        return np.zeros(0, dtype=np.uint8)
    if idx.min() < 1 or idx.max() > src.q:
        raise IndexError(f"index outside [1, {src.q}]")
    order = np.argsort(idx, kind="stable")
    bits = _extract_sorted(idx[order] - 1, *_tables(src))
    out = np.empty_like(bits)
    out[order] = bits
    return out


def extract_bit(src: BiasedSource, i: int) -> int:
    if not (1 <= i <= src.q):
        raise IndexError(f"index {i} outside [1, {src.q}]")
    return int(extract_range(src, i, 1)[0])


def extract_block(src: BiasedSource, p: int, b: int) -> np.ndarray:
    """The p-th block (1-based) of b bits."""
    if p < 1 or b < 1 or p * b > src.q:
        raise IndexError(f"block {p} of size {b} exceeds q={src.q}")
    return extract_range(src, (p - 1) * b + 1, b)


def materialize(src: BiasedSource) -> np.ndarray:
    """Whole q-bit string. Test helper only; defeats the point for large q."""
    return extract_range(src, 1, src.q)
