"""Binary extension fields GF(2^w) with one fixed irreducible polynomial per width."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

# Lexicographically smallest irreducible polynomial of each degree, bit k = coefficient of x^k.
# Checked against an independent Rabin irreducibility test in tests/test_smallbias.py.
IRREDUCIBLE = {
    1: 0x3, 2: 0x7, 3: 0xB, 4: 0x13, 5: 0x25, 6: 0x43, 7: 0x83, 8: 0x11B,
    9: 0x203, 10: 0x409, 11: 0x805, 12: 0x1009, 13: 0x201B, 14: 0x4021,
    15: 0x8003, 16: 0x1002B, 17: 0x20009, 18: 0x40009, 19: 0x80027,
    20: 0x100009, 21: 0x200005, 22: 0x400003, 23: 0x800021, 24: 0x100001B,
    25: 0x2000009, 26: 0x400001B, 27: 0x8000027, 28: 0x10000003,
    29: 0x20000005, 30: 0x40000003, 31: 0x80000009, 32: 0x10000008D,
}
MAX_WIDTH = max(IRREDUCIBLE)


def clmul_mod(a: int, b: int, w: int, poly: int) -> int:
    """Product of a and b in GF(2)[x] / poly, both operands already reduced."""
    r = 0
    top = 1 << w
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a & top:
            a ^= poly
    return r


class Field:
    """GF(2^w). Elements are ints in [0, 2^w) read as coefficient vectors."""

    def __init__(self, w: int):
        if w not in IRREDUCIBLE:
            raise ValueError(f"no tabulated irreducible polynomial for width {w}")
        self.w = w
        self.q = 1 << w
        self.poly = IRREDUCIBLE[w]
        self._exp = None
        self._log = None
        self._gen = None

    def __repr__(self):
        return f"Field(2^{self.w}, poly={self.poly:#x})"

    def mul(self, a: int, b: int) -> int:
        return clmul_mod(a, b, self.w, self.poly)

    def pow(self, a: int, e: int) -> int:
        r = 1
        while e:
            if e & 1:
                r = self.mul(r, a)
            a = self.mul(a, a)
            e >>= 1
        return r

    def inv(self, a: int) -> int:
        if a == 0:
            raise ZeroDivisionError("0 has no inverse")
        return self.pow(a, self.q - 2)

    # log/exp tables, used by the Reed-Solomon code (small widths only)
    def _build_tables(self):
        order = self.q - 1
        factors = _prime_factors(order)
        for g in range(2, self.q) if self.q > 2 else [1]:
            if all(self.pow(g, order // p) != 1 for p in factors):
                break
        exp = np.zeros(2 * order, dtype=np.int64)
        log = np.full(self.q, -1, dtype=np.int64)
        x = 1
        for i in range(order):
            exp[i] = x
            log[x] = i
            x = self.mul(x, g)
        exp[order:] = exp[:order]
        self._gen, self._exp, self._log = g, exp, log

    @property
    def generator(self) -> int:
        if self._gen is None:
            self._build_tables()
        return self._gen

    @property
    def exp(self) -> np.ndarray:
        if self._exp is None:
            self._build_tables()
        return self._exp

    @property
    def log(self) -> np.ndarray:
        if self._log is None:
            self._build_tables()
        return self._log


def _prime_factors(x: int) -> list[int]:
    out, p = [], 2
    while p * p <= x:
        if x % p == 0:
            out.append(p)
            while x % p == 0:
                x //= p
        p += 1
    if x > 1:
        out.append(x)
    return out


@lru_cache(maxsize=None)
def field(w: int) -> Field:
    return Field(w)
