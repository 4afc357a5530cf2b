"""Big-endian, length-prefixed framing shared by the key, module, pool, image,
device-state and wire formats.

Every variable-length field is a 4-byte big-endian length followed by the
bytes. Integers written with :func:`pack_int` use the minimal big-endian form
(at least one byte); fixed-width integers are used where the width is implied
by the public key.
"""

from __future__ import annotations

import hashlib
import io
import random
import struct
from typing import BinaryIO

# Cap on a single length-prefixed field; a corrupted prefix must not make us
# allocate gigabytes.
MAX_FIELD = 64 * 1024 * 1024


class FormatError(ValueError):
    """Bytes do not parse as the expected record."""


def int_to_bytes(n: int) -> bytes:
    if n < 0:
        raise ValueError("negative integers are not encodable")
    return n.to_bytes(max(1, (n.bit_length() + 7) // 8), "big")


def pack_bytes(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def pack_int(n: int) -> bytes:
    return pack_bytes(int_to_bytes(n))


def pack_str(s: str) -> bytes:
    return pack_bytes(s.encode("utf-8"))


def pack_fixed(n: int, width: int) -> bytes:
    return n.to_bytes(width, "big")


class Reader:
    """Sequential reader over bytes or a binary stream."""

    def __init__(self, source: bytes | bytearray | memoryview | BinaryIO):
        if isinstance(source, (bytes, bytearray, memoryview)):
            source = io.BytesIO(bytes(source))
        self._stream = source

    def take(self, n: int) -> bytes:
        data = self._stream.read(n)
        if len(data) != n:
            raise FormatError(f"truncated: wanted {n} bytes, got {len(data)}")
        return data

    def magic(self, expected: bytes) -> None:
        if self.take(len(expected)) != expected:
            raise FormatError(f"bad magic, expected {expected!r}")

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def fixed_int(self, width: int) -> int:
        return int.from_bytes(self.take(width), "big")

    def lp_bytes(self) -> bytes:
        n = self.u32()
        if n > MAX_FIELD:
            raise FormatError(f"field length {n} exceeds limit")
        return self.take(n)

    def lp_int(self) -> int:
        data = self.lp_bytes()
        if not data or (len(data) > 1 and data[0] == 0):
            raise FormatError("non-canonical integer encoding")
        return int.from_bytes(data, "big")

    def lp_str(self) -> str:
        try:
            return self.lp_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("invalid UTF-8") from exc

    def at_end(self) -> bool:
        pos = self._stream.tell()
        more = self._stream.read(1)
        self._stream.seek(pos)
        return not more

    def expect_end(self) -> None:
        if self._stream.read(1):
            raise FormatError("trailing bytes after record")


def seeded_random(label: bytes, seed: bytes | str | int) -> random.Random:
    """Deterministic PRNG keyed by a domain label and a caller seed."""
    if isinstance(seed, int):
        seed = seed.to_bytes(max(1, (seed.bit_length() + 8) // 8), "big", signed=True)
    elif isinstance(seed, str):
        seed = seed.encode("utf-8")
    digest = hashlib.sha256(label + b"\x00" + seed).digest()
    return random.Random(int.from_bytes(digest, "big"))
