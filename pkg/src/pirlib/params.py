"""Protocol parameter sets and their validation.

All other modules take a :class:`PirParams` instance; nothing else carries
global configuration.  Two built-in profiles exist: ``table1`` (the full-size
production profile) and ``test`` (smaller ring for fast CI).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import reduce

# Special primes of the form 2^27 + 2^k + 1; all are prime and satisfy
# q = 1 (mod 2^13), so they are NTT-friendly for any ring degree N <= 2^12.
SPECIAL_PRIME_EXPONENTS = (15, 17, 21, 22)
SPECIAL_PRIMES = tuple(2**27 + 2**k + 1 for k in SPECIAL_PRIME_EXPONENTS)


class ParameterError(ValueError):
    """Raised when a parameter set violates a protocol invariant."""


def _is_prime(n: int) -> bool:
    # Deterministic Miller-Rabin, valid for n < 3.3e24.
    if n < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class PirParams:
    """All protocol constants plus derived quantities.

    Attributes:
        N: ring degree of Z_Q[X]/(X^N + 1); a power of two.
        moduli: ordered residue primes q_i, each NTT-friendly and < 2^28.
        P: plaintext modulus (power of 2^8 so records pack byte-aligned).
        D0: initial dimension size (first-dimension one-hot width).
        d: number of subsequent binary dimensions; D = D0 * 2^d polynomials.
        z: gadget decomposition base (power of two).
        ell: gadget length; z^ell >= Q.
    """

    N: int
    moduli: tuple
    P: int
    D0: int
    d: int
    z: int
    ell: int
    profile: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "moduli", tuple(int(q) for q in self.moduli))
        if self.N < 4 or self.N & (self.N - 1):
            raise ParameterError(f"N={self.N} is not a power of two")
        for q in self.moduli:
            if not _is_prime(q):
                raise ParameterError(f"modulus {q} is not prime")
            if q % (2 * self.N) != 1:
                raise ParameterError(
                    f"modulus {q} is not NTT-friendly for N={self.N} "
                    f"(need q = 1 mod 2N)")
            if q >= 2**28:
                raise ParameterError(f"modulus {q} exceeds 28 bits")
        if self.P > 2**32:
            raise ParameterError(f"P={self.P} exceeds 2^32")
        pbits = self.P.bit_length() - 1
        if self.P != 1 << pbits or pbits % 8 != 0:
            raise ParameterError(
                f"P={self.P} must be a power of 2^8 for byte-aligned packing")
        if self.z & (self.z - 1):
            raise ParameterError(f"gadget base z={self.z} must be a power of two")
        if self.z**self.ell < self.Q:
            raise ParameterError(
                f"z^ell = {self.z}^{self.ell} < Q; gadget cannot represent R_Q")
        if self.D0 < 1 or self.d < 0:
            raise ParameterError("D0 must be positive and d nonnegative")
        if self.D0 + self.d * self.ell > self.N:
            raise ParameterError(
                f"query slots D0 + d*ell = {self.D0 + self.d * self.ell} "
                f"exceed ring degree N={self.N}")

    # -- derived quantities -------------------------------------------------

    @property
    def K(self) -> int:
        """Number of residue moduli."""
        return len(self.moduli)

    @property
    def Q(self) -> int:
        """Full ciphertext modulus, product of the residue primes."""
        return reduce(lambda a, b: a * b, self.moduli, 1)

    @property
    def delta(self) -> int:
        """BFV scaling factor floor(Q / P)."""
        return self.Q // self.P

    @property
    def m(self) -> int:
        """Query-expansion tree depth: ceil(log2(D0 + d*ell)) slots."""
        slots = self.D0 + self.d * self.ell
        return max(0, (slots - 1).bit_length())

    @property
    def D(self) -> int:
        """Total record-polynomial count of the database served."""
        return self.D0 * 2**self.d

    @property
    def rows(self) -> int:
        """First-grid-axis size D / D0 = 2^d."""
        return 2**self.d

    @property
    def bytes_per_coeff(self) -> int:
        return (self.P.bit_length() - 1) // 8

    @property
    def poly_payload_bytes(self) -> int:
        """Raw record bytes one plaintext polynomial can carry."""
        return self.N * self.bytes_per_coeff

    @property
    def zbits(self) -> int:
        return self.z.bit_length() - 1

    def digest(self) -> bytes:
        """32-byte identity of this parameter set, stamped into every file."""
        blob = json.dumps(
            {
                "N": self.N,
                "moduli": list(self.moduli),
                "P": self.P,
                "D0": self.D0,
                "d": self.d,
                "z": self.z,
                "ell": self.ell,
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).digest()

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "moduli": list(self.moduli),
            "P": self.P,
            "D0": self.D0,
            "d": self.d,
            "z": self.z,
            "ell": self.ell,
            "profile": self.profile,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PirParams":
        return cls(
            N=data["N"],
            moduli=tuple(data["moduli"]),
            P=data["P"],
            D0=data["D0"],
            d=data["d"],
            z=data["z"],
            ell=data["ell"],
            profile=data.get("profile", "custom"),
        )


def table1_params(**overrides) -> PirParams:
    """Full-size profile: N=2^12, four 28-bit special primes, P=2^32."""
    base = dict(
        N=2**12,
        moduli=SPECIAL_PRIMES,
        P=2**32,
        D0=256,
        d=8,
        z=2**14,
        ell=8,
        profile="table1",
    )
    base.update(overrides)
    return PirParams(**base)


def test_params(**overrides) -> PirParams:
    """Reduced CI profile: N=2^10, three special primes, P=2^16."""
    base = dict(
        N=2**10,
        moduli=SPECIAL_PRIMES[:3],
        P=2**16,
        D0=256,
        d=4,
        z=2**14,
        ell=6,
        profile="test",
    )
    base.update(overrides)
    return PirParams(**base)


PROFILES = {"table1": table1_params, "test": test_params}


def profile_params(name: str, **overrides) -> PirParams:
    try:
        factory = PROFILES[name]
    except KeyError:
        raise ParameterError(f"unknown parameter profile {name!r}") from None
    return factory(**overrides)
