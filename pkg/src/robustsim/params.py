"""Concrete parameters of the robust simulation, derived from (n, m, eps, delta)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

DEFAULT_K_R = 64


class UnsupportedRegime(ValueError):
    """Raised when (n, m, eps, delta) is outside the supported parameter range."""


def ceil_log2(x: int) -> int:
    """Smallest e >= 0 with 2**e >= x (x >= 1)."""
    if x < 1:
        raise ValueError("ceil_log2 needs x >= 1")
    return (x - 1).bit_length()


def next_pow2(x: int) -> int:
    return 1 << ceil_log2(max(1, x))


@dataclass(frozen=True)
class PotentialCoefficients:
    C2: int
    C3: int
    C4: int
    C5: int
    C6: int
    C7: int

    @classmethod
    def for_m(cls, m: int) -> "PotentialCoefficients":
        return cls(
            C2=1,
            C3=6 + 2 * m,
            C4=30 + 60 * m + 20 * m**2,
            C5=6 + 80 * m + 116 * m**2 + 36 * m**3,
            C6=310 * m + 180 * m**2 + 18 * m**3,
            C7=12 + 4 * m,
        )

    def as_tuple(self) -> tuple[int, ...]:
        return (self.C2, self.C3, self.C4, self.C5, self.C6, self.C7)

    def epoch_drop_bound(self, m: int) -> int:
        """Largest per-epoch decrease allowed on a dirty epoch: (m+1)(2*C6 - C2)."""
        return (m + 1) * (2 * self.C6 - self.C2)


@dataclass(frozen=True)
class SimulationParams:
    n: int
    m: int
    epsilon: float
    delta: float
    o: int
    c: int
    r: int
    R: int
    I: int
    L: int
    k_r: int
    epsilon_eff: float
    coeffs: PotentialCoefficients = field(repr=False)

    @property
    def index_bits(self) -> int:
        """Width of the epoch index inside an encoded (p, H_p) pair."""
        return ceil_log2(self.R)

    @property
    def compute_epochs(self) -> int:
        """Epochs needed to cover the n rounds of the original protocol."""
        return -(-self.n // self.r)

    @property
    def phases(self) -> int:
        return -(-self.R // self.I)

    @property
    def short_hash_wire_bits(self) -> int:
        """One short hash on the wire: c payload bits plus the validity flag."""
        return self.c + 1

    @property
    def verification_rounds(self) -> int:
        return 8 * self.short_hash_wire_bits

    @property
    def phase_core_bits(self) -> int:
        """Seed length sent by RelaxedShareRand at each phase start."""
        w = ceil_log2(next_pow2(self.c * self.L))
        return 3 * self.c * (1 + 10 * w)

    @property
    def phase_core_budget(self) -> int:
        return self.I

    @property
    def core_star_bits(self) -> int:
        w = ceil_log2(next_pow2(self.R * self.r * self.o))
        return 3 * self.o * (1 + 10 * w)

    @property
    def core_star_budget(self) -> int:
        return math.ceil(2 * self.n * exact(self.epsilon))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("n", "m", "epsilon", "delta", "o", "c", "r", "R", "I", "L", "k_r", "epsilon_eff")}
        d["coeffs"] = list(self.coeffs.as_tuple())
        return d


def exact(x: float) -> Fraction:
    """Decimal reading of a float rate, so 0.001 means exactly 1/1000."""
    return Fraction(repr(float(x)))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def derive_params(n: int, m: int, epsilon: float, delta: float,
                  k_r: int = DEFAULT_K_R) -> SimulationParams:
    if not (isinstance(n, int) and n >= 1):
        raise UnsupportedRegime(f"n must be a positive integer, got {n!r}")
    if not (isinstance(m, int) and m >= 1):
        raise UnsupportedRegime(f"m must be a positive integer, got {m!r}")
    if not (isinstance(k_r, int) and k_r >= 1):
        raise UnsupportedRegime(f"k_r must be a positive integer, got {k_r!r}")
    if not (0.0 <= epsilon < 1.0):
        raise UnsupportedRegime(f"epsilon must lie in [0, 1), got {epsilon}")
    if not (0.0 < delta <= 1.0 / n):
        raise UnsupportedRegime(f"delta must lie in (0, 1/n], got {delta} with n={n}")

    eps_eff = max(float(epsilon), 1.0 / n)
    m_cap = min(n ** 0.25, (1.0 / eps_eff) ** 0.199)
    if m > m_cap:
        raise UnsupportedRegime(f"m={m} exceeds min(n^0.25, (1/eps)^0.199) = {m_cap:.3f}")

    c = max(8, ceil_log2(m + 1) + 6)
    r = min(max(_round_half_up(math.sqrt(c / (m**5 * eps_eff))), 1), n)
    eps_x = max(exact(epsilon), Fraction(1, n))
    R = -(-n // r) + k_r * math.ceil(m**5 * n * eps_x)
    # smallest o with 2^o >= 8 m R^2 / delta, computed exactly
    target = 8 * m * R * R / exact(delta)
    o = max(16, ceil_log2(math.ceil(target)))
    I = max(2, ceil_log2(o))
    L = ceil_log2(R) + o
    return SimulationParams(n=n, m=m, epsilon=float(epsilon), delta=float(delta), o=o, c=c,
                            r=r, R=R, I=I, L=L, k_r=k_r, epsilon_eff=eps_eff,
                            coeffs=PotentialCoefficients.for_m(m))
