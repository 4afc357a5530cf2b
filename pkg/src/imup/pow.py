"""Proof of work whose unit of work is one chameleon-hash evaluation.

For nonce = 0, 1, 2, ... the solver computes

    CH(T || m || nonce_be64 || POW_TAG, r0 = 1)

and stops at the first digest whose canonical encoding starts with ``d`` zero
hex nibbles. Checking a solution costs exactly one hash, whatever ``d`` is.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import gmpy2

from .chameleon import ChameleonDigest, ChameleonKeyPair, chash

TASK_TAG = b"CHASH-ITER"
# Domain separator so a PoW digest can never be replayed as a block digest.
POW_TAG = b"|pow"
R0 = 1
NONCE_SPACE = 1 << 64


class PowExhausted(RuntimeError):
    """No nonce in the searched range meets the difficulty."""


@dataclass(frozen=True)
class PowChallenge:
    message: bytes
    difficulty: int
    task_tag: bytes = TASK_TAG

    def check_bounds(self, pk: ChameleonKeyPair) -> None:
        if not 0 <= self.difficulty <= 2 * pk.width:
            raise ValueError(f"difficulty {self.difficulty} outside [0, {2 * pk.width}]")


@dataclass(frozen=True)
class PowSolution:
    nonce: int
    b_hash: bytes


def leading_zero_nibbles(data: bytes) -> int:
    hexed = data.hex()
    return len(hexed) - len(hexed.lstrip("0"))


def meets_difficulty(encoded: bytes, d: int) -> bool:
    return leading_zero_nibbles(encoded) >= d


def _pow_message(challenge: PowChallenge, nonce: int) -> bytes:
    return challenge.task_tag + challenge.message + struct.pack(">Q", nonce) + POW_TAG


def pow_digest(pk: ChameleonKeyPair, challenge: PowChallenge, nonce: int) -> ChameleonDigest:
    return chash(pk, _pow_message(challenge, nonce), R0)


def solve(
    pk: ChameleonKeyPair,
    challenge: PowChallenge,
    start: int = 0,
    limit: int = NONCE_SPACE,
) -> PowSolution:
    """Smallest nonce in ``[start, limit)`` meeting the challenge difficulty."""
    challenge.check_bounds(pk)
    width = pk.width
    shift = 8 * width - 4 * challenge.difficulty
    p, g, h = pk._mp
    q = pk.q
    hr0 = gmpy2.powmod(h, R0, p)
    base = hashlib.sha256(challenge.task_tag + challenge.message)
    pack = struct.Struct(">Q").pack
    powmod = gmpy2.powmod
    for nonce in range(start, min(limit, NONCE_SPACE)):
        hs = base.copy()
        hs.update(pack(nonce) + POW_TAG)
        e = int.from_bytes(hs.digest(), "big") % q
        value = powmod(g, e, p) * hr0 % p
        if not value >> shift:
            return PowSolution(nonce, int(value).to_bytes(width, "big"))
    raise PowExhausted(f"no solution in nonce range [{start}, {limit})")


def verify(pk: ChameleonKeyPair, challenge: PowChallenge, solution: PowSolution) -> bool:
    try:
        challenge.check_bounds(pk)
    except ValueError:
        return False
    if not isinstance(solution.nonce, int) or not 0 <= solution.nonce < NONCE_SPACE:
        return False
    digest = pow_digest(pk, challenge, solution.nonce).encode()
    return digest == solution.b_hash and meets_difficulty(digest, challenge.difficulty)


def check_nonce(pk: ChameleonKeyPair, challenge: PowChallenge, nonce: int) -> bool:
    """Like :func:`verify` when only the nonce is stored and b_hash is implied."""
    try:
        challenge.check_bounds(pk)
    except ValueError:
        return False
    if not isinstance(nonce, int) or not 0 <= nonce < NONCE_SPACE:
        return False
    return meets_difficulty(pow_digest(pk, challenge, nonce).encode(), challenge.difficulty)
