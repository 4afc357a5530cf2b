"""Device-side verification: the functional branch, the security branch with
chain rotation, and install bookkeeping.

Both branches walk the image block by block, so a device never needs more
than one block in memory besides the stored chain.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterable

from .chameleon import ChameleonKeyPair, chash, decode_digest
from .codec import FormatError, Reader, pack_bytes, pack_fixed, pack_str
from .firmware import (
    BIND_LABEL,
    SALT_LEN,
    FilledBlock,
    FirmwareImage,
    ImageKind,
    ImageReader,
    VerificationChain,
)
from .package import FunctionalModule

STATE_MAGIC = b"IMUPDEV1"


class DeviceError(RuntimeError):
    pass


class AlreadyInitialized(DeviceError):
    pass


class NotInitialized(DeviceError):
    pass


class UnverifiedImage(DeviceError):
    pass


class InstallError(DeviceError):
    pass


@dataclass(frozen=True)
class DeviceState:
    stored_chain: VerificationChain | None = None
    installed_modules: frozenset[int] = field(default_factory=frozenset)
    pow_difficulty: int = 0

    @property
    def trust_initialized(self) -> bool:
        return self.stored_chain is not None

    def encode(self, pk: ChameleonKeyPair) -> bytes:
        chain = self.stored_chain
        if chain is None:
            raise NotInitialized("cannot persist an uninitialised device")
        out = [STATE_MAGIC, struct.pack(">H", len(chain.digests))]
        out += [pack_bytes(d.encode()) for d in chain.digests]
        out.append(pack_bytes(pack_fixed(chain.commitment, pk.q_width)))
        out.append(pack_str(chain.checkpoint_id))
        ids = sorted(self.installed_modules)
        out.append(struct.pack(">I", len(ids)) + b"".join(struct.pack(">I", i) for i in ids))
        out.append(struct.pack(">B", self.pow_difficulty))
        return b"".join(out)

    @classmethod
    def decode(cls, data: bytes, pk: ChameleonKeyPair) -> DeviceState:
        rd = Reader(data)
        rd.magic(STATE_MAGIC)
        n = rd.u16()
        if n < 2:
            raise FormatError("chain needs at least one block and a commitment")
        digests = tuple(decode_digest(pk, rd.lp_bytes()) for _ in range(n))
        c_bytes = rd.lp_bytes()
        if len(c_bytes) != pk.q_width:
            raise FormatError("commitment has wrong width")
        checkpoint_id = rd.lp_str()
        count = rd.u32()
        ids = [rd.u32() for _ in range(count)]
        if ids != sorted(set(ids)):
            raise FormatError("installed ids must be sorted and unique")
        d = rd.u8()
        rd.expect_end()
        chain = VerificationChain(digests, int.from_bytes(c_bytes, "big"), checkpoint_id)
        return cls(chain, frozenset(ids), d)

    def save(self, path: str | Path, pk: ChameleonKeyPair) -> None:
        # Write-then-rename so a crash never leaves a half-rotated chain.
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.encode(pk))
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path, pk: ChameleonKeyPair) -> DeviceState:
        return cls.decode(Path(path).read_bytes(), pk)


def factory_init(chain: VerificationChain, pow_difficulty: int = 0,
                 state: DeviceState | None = None) -> DeviceState:
    """Install the trust root; done in the factory, so nothing is verified."""
    if state is not None and state.trust_initialized:
        raise AlreadyInitialized("device already holds a verification chain")
    return DeviceState(chain, frozenset(), pow_difficulty)


class _ImageSource:
    """Adapter giving FirmwareImage objects the ImageReader interface."""

    def __init__(self, image: FirmwareImage):
        self._img = image

    def header(self):
        return self._img.kind, self._img.version_id, len(self._img.blocks)

    def blocks(self):
        return iter(self._img.blocks)

    def commitment_block(self):
        return self._img.commitment_block

    def trailer(self):
        return self._img.block_info, self._img.commitment, self._img.proof

    def finish(self):
        pass


@dataclass
class _Outcome:
    kind: ImageKind
    version_id: str
    digests: tuple
    block_info: bytes
    commitment: int
    proof: int | None


def _walk(pk: ChameleonKeyPair, state: DeviceState, src, expected_kind: ImageKind,
          expect_h: tuple | None) -> _Outcome | None:
    """Check every block of ``src``; return its values or None on any failure.

    ``expect_h`` pins the digest sequence (functional branch). The security
    branch passes None and only requires the length to match.
    """
    d = state.pow_difficulty
    kind, version_id, length = src.header()
    if kind is not expected_kind or length != state.stored_chain.length:
        return None
    bind = hashlib.sha256(BIND_LABEL)
    bind.update(struct.pack(">B", kind) + pack_str(version_id) + struct.pack(">H", length))
    digests = []
    for i, block in enumerate(src.blocks()):
        if expect_h is not None and block.digest != expect_h[i]:
            return None
        if not block.check(pk, d) or not _module_consistent(block):
            return None
        bind.update(block.encode(pk))
        digests.append(block.digest)
    cblock: FilledBlock = src.commitment_block()
    if expect_h is not None and cblock.digest != expect_h[-1]:
        return None
    if not cblock.check(pk, d):
        return None
    bind.update(struct.pack(">Q", cblock.solution_nonce))
    content = cblock.content
    if len(content) != SALT_LEN + 32 or content[SALT_LEN:] != bind.digest():
        return None
    digests.append(cblock.digest)
    block_info, c, p = src.trailer()
    src.finish()
    if block_info != b"".join(dg.encode() for dg in digests[:-1]):
        return None
    if c != cblock.r:
        return None
    return _Outcome(kind, version_id, tuple(digests), block_info, c, p)


def _module_consistent(block: FilledBlock) -> bool:
    if block.module_id is None:
        return True
    try:
        return block.module().module_id == block.module_id
    except (FormatError, ValueError):
        return False


def _require_init(state: DeviceState) -> None:
    if not state.trust_initialized:
        raise NotInitialized("device has no verification chain")


def _run(pk, state, src, expected_kind, expect_h):
    try:
        return _walk(pk, state, src, expected_kind, expect_h)
    except (FormatError, ValueError, OverflowError, struct.error):
        return None


def functional_verify(pk: ChameleonKeyPair, state: DeviceState, image: FirmwareImage) -> bool:
    """Accept a variant of the current checkpoint; never changes state."""
    _require_init(state)
    return _run(pk, state, _ImageSource(image), ImageKind.FUNCTIONAL,
                state.stored_chain.digests) is not None


def security_verify(pk: ChameleonKeyPair, state: DeviceState,
                    image: FirmwareImage) -> tuple[bool, DeviceState]:
    """Check a checkpoint image and its proof; rotate the chain on success."""
    _require_init(state)
    return _security(pk, state, _ImageSource(image))


def _security(pk, state, src) -> tuple[bool, DeviceState]:
    out = _run(pk, state, src, ImageKind.SECURITY, None)
    if out is None or out.proof is None:
        return False, state
    stored = state.stored_chain
    if out.digests == stored.digests:
        return False, state
    new_h = b"".join(dg.encode() for dg in out.digests)
    if not 0 <= out.proof < pk.q:
        return False, state
    if chash(pk, stored.encoded_h(), stored.commitment) != chash(pk, new_h, out.proof):
        return False, state
    chain = VerificationChain(out.digests, out.commitment, out.version_id)
    return True, replace(state, stored_chain=chain)


def verify_image(pk: ChameleonKeyPair, state: DeviceState,
                 image: FirmwareImage) -> tuple[bool, DeviceState]:
    """Dispatch on the image's kind flag; exactly one branch runs."""
    if image.kind is ImageKind.SECURITY:
        return security_verify(pk, state, image)
    return functional_verify(pk, state, image), state


def verify_stream(pk: ChameleonKeyPair, state: DeviceState,
                  source: bytes | BinaryIO) -> tuple[bool, DeviceState]:
    """Verify an encoded image straight from bytes or a file object."""
    _require_init(state)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(bytes(source))
    start = source.tell()
    try:
        kind = ImageKind(Reader(source).take(len(b"IMUPIMG1") + 1)[-1])
    except (FormatError, ValueError):
        return False, state
    source.seek(start)
    reader = ImageReader(source, pk)
    if kind is ImageKind.SECURITY:
        return _security(pk, state, reader)
    ok = _run(pk, state, reader, ImageKind.FUNCTIONAL, state.stored_chain.digests)
    return ok is not None, state


def install(pk: ChameleonKeyPair, state: DeviceState, image: FirmwareImage,
            selected: Iterable[int]) -> DeviceState:
    """Record ``selected`` plus its in-image dependency closure as installed."""
    selected = set(selected)
    if not selected:
        return state
    if image.kind is ImageKind.SECURITY:
        # A security image is trusted once the device has rotated to it.
        ok = state.trust_initialized and state.stored_chain.digests == image.digests
    else:
        ok = functional_verify(pk, state, image)
    if not ok:
        raise UnverifiedImage("image does not verify against the stored chain")
    available: dict[int, FunctionalModule] = image.modules()
    missing = selected - available.keys()
    if missing:
        raise InstallError(f"modules {sorted(missing)} are not in the image")
    closure: set[int] = set()
    stack = list(selected)
    while stack:
        mid = stack.pop()
        if mid in closure:
            continue
        if mid not in available:
            raise InstallError(f"dependency {mid} is not carried by the image")
        closure.add(mid)
        stack.extend(available[mid].dependencies)
    return replace(state, installed_modules=state.installed_modules | closure)
