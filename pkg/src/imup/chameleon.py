"""Discrete-log chameleon hash over a prime-order subgroup of Z_p*.

    CH(m, r) = g^H(m) * h^r  (mod p),    h = g^x

``H`` is SHA-256 of ``m`` read as a big-endian integer and reduced mod ``q``.
Anyone with the public values ``(p, q, g, h)`` can evaluate the hash; the holder
of ``x`` can open an existing digest to any other message:

    r' = r + (H(m) - H(m')) * x^-1  (mod q)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import gmpy2

from .codec import FormatError, Reader, pack_int, seeded_random

KEY_MAGIC = b"IMUPKEY1"
MIN_BITS = 16
MAX_BITS = 4096


class KeyError_(ValueError):
    """Base class for key problems (kept distinct from the builtin KeyError)."""


class UnsupportedKeySize(KeyError_):
    pass


class KeygenExhausted(KeyError_):
    pass


class InvalidKey(KeyError_):
    pass


class TrapdoorRequired(KeyError_):
    """A collision was requested from a key pair that carries no trapdoor."""


@dataclass(frozen=True)
class ChameleonDigest:
    """A group element together with its canonical encoding width."""

    value: int
    width: int

    def encode(self) -> bytes:
        return self.value.to_bytes(self.width, "big")

    def __bytes__(self) -> bytes:
        return self.encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> ChameleonDigest:
        return cls(int.from_bytes(data, "big"), len(data))


@dataclass(frozen=True)
class ChameleonKeyPair:
    """Group parameters ``p, q, g``, public key ``h`` and optional trapdoor ``x``."""

    p: int
    q: int
    g: int
    h: int
    x: int | None = field(default=None, repr=False)

    @property
    def width(self) -> int:
        """Byte width of a canonical digest encoding."""
        return (self.p.bit_length() + 7) // 8

    @property
    def q_width(self) -> int:
        """Byte width of an exponent / collision parameter."""
        return (self.q.bit_length() + 7) // 8

    @property
    def has_trapdoor(self) -> bool:
        return self.x is not None

    def public(self) -> ChameleonKeyPair:
        return replace(self, x=None)

    @cached_property
    def _mp(self) -> tuple:
        return gmpy2.mpz(self.p), gmpy2.mpz(self.g), gmpy2.mpz(self.h)

    def check(self) -> None:
        """Raise :class:`InvalidKey` unless every group invariant holds."""
        p, q, g, h, x = self.p, self.q, self.g, self.h, self.x
        if not (gmpy2.is_prime(p) and gmpy2.is_prime(q)):
            raise InvalidKey("p and q must be prime")
        if (p - 1) % q:
            raise InvalidKey("q must divide p - 1")
        if not 1 < g < p or pow(g, q, p) != 1:
            raise InvalidKey("g must have order q")
        if not 1 <= h < p or pow(h, q, p) != 1:
            raise InvalidKey("h must lie in the order-q subgroup")
        if x is not None and (not 1 <= x < q or pow(g, x, p) != h):
            raise InvalidKey("trapdoor does not match public key")

    def is_valid(self) -> bool:
        try:
            self.check()
        except InvalidKey:
            return False
        return True


# Hand-checkable group: 2 has order 11 mod 23, h = 2^3 = 8.
TOY_KEYPAIR = ChameleonKeyPair(p=23, q=11, g=2, h=8, x=3)


def keygen(
    bits: int,
    seed: bytes | str,
    q_bits: int | None = None,
    max_attempts: int = 20_000,
) -> ChameleonKeyPair:
    """Deterministically derive a key pair with a ``bits``-bit modulus.

    ``q`` is a ``q_bits``-bit prime (default ``min(256, bits - 8)``) and
    ``p = k*q + 1`` is prime with exactly ``bits`` bits.
    """
    if not seed:
        raise ValueError("seed must be non-empty")
    if not MIN_BITS <= bits <= MAX_BITS:
        raise UnsupportedKeySize(f"modulus size {bits} outside [{MIN_BITS}, {MAX_BITS}]")
    if q_bits is None:
        q_bits = min(256, bits - 8)
    if not 4 <= q_bits < bits:
        raise UnsupportedKeySize(f"subgroup size {q_bits} incompatible with {bits}-bit modulus")

    rng = seeded_random(b"imup-keygen", f"{bits}/{q_bits}/".encode() + _as_bytes(seed))
    lo, hi = 1 << (bits - 1), (1 << bits) - 1
    for _ in range(max_attempts):
        q = rng.getrandbits(q_bits) | (1 << (q_bits - 1)) | 1
        if not gmpy2.is_prime(q):
            continue
        kmin = -(-(lo - 1) // q)
        kmax = (hi - 1) // q
        kmin += kmin & 1
        kmax -= kmax & 1
        if kmin > kmax:
            continue
        n_even = (kmax - kmin) // 2 + 1
        for _ in range(min(n_even, 4 * bits)):
            p = (kmin + 2 * rng.randrange(n_even)) * q + 1
            if gmpy2.is_prime(p):
                return _complete(p, q, rng)
    raise KeygenExhausted(f"no {bits}-bit group found in {max_attempts} attempts")


def _complete(p: int, q: int, rng) -> ChameleonKeyPair:
    cofactor = (p - 1) // q
    a = 2
    while (g := pow(a, cofactor, p)) == 1:
        a += 1
    x = rng.randrange(1, q)
    return ChameleonKeyPair(p=p, q=q, g=g, h=pow(g, x, p), x=x)


def _as_bytes(seed: bytes | str) -> bytes:
    return seed.encode("utf-8") if isinstance(seed, str) else seed


def hash_to_exponent(pk: ChameleonKeyPair, m: bytes) -> int:
    return int.from_bytes(hashlib.sha256(m).digest(), "big") % pk.q


def chash_exponent(pk: ChameleonKeyPair, e: int, r: int) -> ChameleonDigest:
    """``g^e * h^r mod p`` for an exponent that has already been hashed."""
    p, g, h = pk._mp
    value = gmpy2.powmod(g, e, p) * gmpy2.powmod(h, r, p) % p
    return ChameleonDigest(int(value), pk.width)


def chash(pk: ChameleonKeyPair, m: bytes, r: int) -> ChameleonDigest:
    if not 0 <= r < pk.q:
        raise ValueError("collision parameter out of range [0, q)")
    return chash_exponent(pk, hash_to_exponent(pk, m), r)


def collision_exponent(kp: ChameleonKeyPair, e: int, r: int, e_new: int) -> int:
    """Collision parameter for exponent ``e_new`` matching ``(e, r)``."""
    if kp.x is None:
        raise TrapdoorRequired("collision finding needs the trapdoor")
    if not 0 <= r < kp.q:
        raise ValueError("collision parameter out of range [0, q)")
    inv = gmpy2.invert(kp.x, kp.q)
    assert inv, "trapdoor not invertible mod q"
    return int((r + (e - e_new) * inv) % kp.q)


def find_collision(kp: ChameleonKeyPair, m: bytes, r: int, m_new: bytes) -> int:
    """Return ``r_new`` with ``chash(m_new, r_new) == chash(m, r)``."""
    return collision_exponent(kp, hash_to_exponent(kp, m), r, hash_to_exponent(kp, m_new))


def verify_pair(pk: ChameleonKeyPair, m: bytes, r: int, expected: ChameleonDigest) -> bool:
    if not isinstance(r, int) or not 0 <= r < pk.q:
        return False
    return chash(pk, m, r) == expected


def decode_digest(pk: ChameleonKeyPair, data: bytes) -> ChameleonDigest:
    if len(data) != pk.width:
        raise FormatError("digest has wrong width")
    digest = ChameleonDigest.from_bytes(data)
    if not 1 <= digest.value < pk.p:
        raise FormatError("digest outside the group")
    return digest


def encode_key(kp: ChameleonKeyPair, include_secret: bool = True) -> bytes:
    out = [KEY_MAGIC, pack_int(kp.p), pack_int(kp.q), pack_int(kp.g), pack_int(kp.h)]
    if include_secret and kp.x is not None:
        out.append(pack_int(kp.x))
    return b"".join(out)


def decode_key(data: bytes) -> ChameleonKeyPair:
    rd = Reader(data)
    rd.magic(KEY_MAGIC)
    p, q, g, h = rd.lp_int(), rd.lp_int(), rd.lp_int(), rd.lp_int()
    x = None if rd.at_end() else rd.lp_int()
    rd.expect_end()
    return ChameleonKeyPair(p=p, q=q, g=g, h=h, x=x)


def save_key(path: str | Path, kp: ChameleonKeyPair, include_secret: bool = True) -> None:
    Path(path).write_bytes(encode_key(kp, include_secret))


def load_key(path: str | Path) -> ChameleonKeyPair:
    return decode_key(Path(path).read_bytes())
