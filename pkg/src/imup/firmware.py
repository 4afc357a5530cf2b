"""Server-side image assembly: the factory image, security checkpoints and
customised variants that share a checkpoint's digest sequence.

Every image carries ``L`` filled blocks plus one commitment block. Each filled
block reuses a template's chameleon digest by opening it to new content with
the trapdoor, so the ordered digest sequence ``H`` is fixed per checkpoint no
matter which modules a variant carries. The commitment block's content is a
fresh salt followed by a SHA-256 binding over the kind, version id and every
block record; its collision parameter is the image's commitment ``C``.
"""

from __future__ import annotations

import enum
import hashlib
import random
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

from .chameleon import (
    ChameleonDigest,
    ChameleonKeyPair,
    TrapdoorRequired,
    chash,
    decode_digest,
    find_collision,
    verify_pair,
)
from .codec import FormatError, Reader, pack_bytes, pack_fixed, pack_str
from .package import (
    BLOCK_TAG,
    CryptoModule,
    CryptoPool,
    FunctionalModule,
    ModuleCatalog,
)
from .pow import PowChallenge, check_nonce

IMAGE_MAGIC = b"IMUPIMG1"
FILLER_ID = 0xFFFFFFFF
SALT_LEN = 32
BIND_LABEL = b"IMUP/bind"
DEFAULT_CHAIN_LENGTH = 7


class PipelineError(ValueError):
    pass


class InvalidChain(PipelineError):
    pass


class RequestTooLarge(PipelineError):
    pass


class ImageKind(enum.IntEnum):
    FUNCTIONAL = 0
    SECURITY = 1


@dataclass(frozen=True)
class FilledBlock:
    content: bytes
    r: int
    solution_nonce: int
    digest: ChameleonDigest
    module_id: int | None = None

    @property
    def is_filler(self) -> bool:
        return self.module_id is None

    def message(self) -> bytes:
        return self.content + BLOCK_TAG

    def check(self, pk: ChameleonKeyPair, difficulty: int) -> bool:
        return (verify_pair(pk, self.message(), self.r, self.digest)
                and check_nonce(pk, PowChallenge(self.digest.encode(), difficulty),
                                self.solution_nonce))

    def module(self) -> FunctionalModule:
        return FunctionalModule.decode(self.content)

    def encode(self, pk: ChameleonKeyPair) -> bytes:
        mid = FILLER_ID if self.module_id is None else self.module_id
        return (struct.pack(">I", mid) + pack_bytes(self.content)
                + pack_fixed(self.r, pk.q_width) + struct.pack(">Q", self.solution_nonce)
                + self.digest.encode())

    @classmethod
    def read(cls, rd: Reader, pk: ChameleonKeyPair) -> FilledBlock:
        mid = rd.u32()
        content = rd.lp_bytes()
        r = rd.fixed_int(pk.q_width)
        nonce = rd.u64()
        digest = decode_digest(pk, rd.take(pk.width))
        return cls(content, r, nonce, digest, None if mid == FILLER_ID else mid)


@dataclass(frozen=True)
class VerificationChain:
    """Ordered digests ``H`` (L blocks then the commitment block) and ``C``."""

    digests: tuple[ChameleonDigest, ...]
    commitment: int
    checkpoint_id: str

    @property
    def length(self) -> int:
        """Number of functional slots ``L``."""
        return len(self.digests) - 1

    @property
    def block_info(self) -> bytes:
        return b"".join(d.encode() for d in self.digests[:-1])

    def encoded_h(self) -> bytes:
        """All ``L + 1`` digests in order; the message side of the proof equation."""
        return b"".join(d.encode() for d in self.digests)


def aggregate_block_info(blocks: Sequence[FilledBlock]) -> bytes:
    return b"".join(b.digest.encode() for b in blocks)


def binding(pk: ChameleonKeyPair, kind: ImageKind, version_id: str,
            blocks: Iterable[FilledBlock], commit_nonce: int) -> bytes:
    """Hash over everything the commitment block must pin down.

    The commitment block's own PoW nonce is included; its content cannot
    cover its ``r`` or digest, but those are checked by the chain itself.
    """
    blocks = list(blocks)
    h = hashlib.sha256(BIND_LABEL)
    h.update(struct.pack(">B", kind) + pack_str(version_id) + struct.pack(">H", len(blocks)))
    for b in blocks:
        h.update(b.encode(pk))
    h.update(struct.pack(">Q", commit_nonce))
    return h.digest()


@dataclass(frozen=True)
class FirmwareImage:
    version_id: str
    kind: ImageKind
    blocks: tuple[FilledBlock, ...]
    commitment_block: FilledBlock
    block_info: bytes
    commitment: int
    proof: int | None = None

    @property
    def length(self) -> int:
        return len(self.blocks)

    @property
    def module_set(self) -> frozenset[int]:
        return frozenset(b.module_id for b in self.blocks if b.module_id is not None)

    @property
    def digests(self) -> tuple[ChameleonDigest, ...]:
        return tuple(b.digest for b in self.blocks) + (self.commitment_block.digest,)

    def chain(self, checkpoint_id: str | None = None) -> VerificationChain:
        return VerificationChain(self.digests, self.commitment,
                                 self.version_id if checkpoint_id is None else checkpoint_id)

    def modules(self) -> dict[int, FunctionalModule]:
        return {b.module_id: b.module() for b in self.blocks if b.module_id is not None}

    def encode(self, pk: ChameleonKeyPair) -> bytes:
        out = [IMAGE_MAGIC, struct.pack(">B", self.kind), pack_str(self.version_id),
               struct.pack(">H", len(self.blocks))]
        out += [b.encode(pk) for b in self.blocks]
        out.append(self.commitment_block.encode(pk))
        out.append(pack_bytes(self.block_info))
        out.append(pack_fixed(self.commitment, pk.q_width))
        if self.proof is None:
            out.append(b"\x00")
        else:
            out.append(b"\x01" + pack_fixed(self.proof, pk.q_width))
        return b"".join(out)

    @classmethod
    def decode(cls, data: bytes, pk: ChameleonKeyPair) -> FirmwareImage:
        reader = ImageReader(data, pk)
        kind, version_id, _ = reader.header()
        blocks = tuple(reader.blocks())
        cblock = reader.commitment_block()
        block_info, c, p = reader.trailer()
        reader.finish()
        return cls(version_id, kind, blocks, cblock, block_info, c, p)

    def save(self, path: str | Path, pk: ChameleonKeyPair) -> int:
        data = self.encode(pk)
        Path(path).write_bytes(data)
        return len(data)

    @classmethod
    def load(cls, path: str | Path, pk: ChameleonKeyPair) -> FirmwareImage:
        return cls.decode(Path(path).read_bytes(), pk)


class ImageReader:
    """Pull parser for the image file; holds at most one block at a time.

    Sections must be consumed in order: header, blocks, commitment_block,
    trailer, finish.
    """

    def __init__(self, source: bytes | BinaryIO, pk: ChameleonKeyPair):
        self._rd = Reader(source)
        self._pk = pk
        self._length = 0

    def header(self) -> tuple[ImageKind, str, int]:
        rd = self._rd
        rd.magic(IMAGE_MAGIC)
        try:
            kind = ImageKind(rd.u8())
        except ValueError as exc:
            raise FormatError("unknown image kind") from exc
        version_id = rd.lp_str()
        self._length = rd.u16()
        if self._length == 0:
            raise FormatError("image has no blocks")
        self._kind = kind
        return kind, version_id, self._length

    def blocks(self) -> Iterator[FilledBlock]:
        for _ in range(self._length):
            yield FilledBlock.read(self._rd, self._pk)

    def commitment_block(self) -> FilledBlock:
        block = FilledBlock.read(self._rd, self._pk)
        if block.module_id is not None:
            raise FormatError("commitment block must carry the filler id")
        return block

    def trailer(self) -> tuple[bytes, int, int | None]:
        rd, pk = self._rd, self._pk
        block_info = rd.lp_bytes()
        c = rd.fixed_int(pk.q_width)
        flag = rd.u8()
        if flag not in (0, 1):
            raise FormatError("bad proof flag")
        if flag != (self._kind is ImageKind.SECURITY):
            raise FormatError("proof presence does not match image kind")
        p = rd.fixed_int(pk.q_width) if flag else None
        return block_info, c, p

    def finish(self) -> None:
        self._rd.expect_end()


@dataclass
class Checkpoint:
    """A checkpoint image, the chain it installs and the templates behind it.

    ``templates[i]`` is the crypto module whose digest occupies slot ``i`` of
    ``H``; iterate_version opens these again for every variant.
    """

    image: FirmwareImage
    chain: VerificationChain
    templates: tuple[CryptoModule, ...] = field(repr=False)

    @property
    def length(self) -> int:
        return self.chain.length

    @property
    def checkpoint_id(self) -> str:
        return self.chain.checkpoint_id


def _fill(kp: ChameleonKeyPair, template: CryptoModule, content: bytes,
          module_id: int | None) -> FilledBlock:
    r = find_collision(kp, template.block_message(), template.pparam, content + BLOCK_TAG)
    return FilledBlock(content, r, template.solution_nonce, template.digest, module_id)


def _filler(template: CryptoModule) -> FilledBlock:
    return FilledBlock(template.pstr, template.pparam, template.solution_nonce,
                       template.digest, None)


def _assemble(
    kp: ChameleonKeyPair,
    templates: Sequence[CryptoModule],
    slots: Sequence[FunctionalModule | None],
    kind: ImageKind,
    version_id: str,
    rng: random.Random,
) -> FirmwareImage:
    if kp.x is None:
        raise TrapdoorRequired("image assembly needs the trapdoor")
    ids = [m.module_id for m in slots if m is not None]
    if len(ids) != len(set(ids)):
        raise PipelineError("duplicate module ids in image")
    blocks = tuple(
        _filler(t) if m is None else _fill(kp, t, m.encode(), m.module_id)
        for t, m in zip(templates, slots)
    )
    salt = rng.randbytes(SALT_LEN)
    bind = binding(kp, kind, version_id, blocks, templates[-1].solution_nonce)
    cblock = _fill(kp, templates[-1], salt + bind, None)
    return FirmwareImage(version_id, kind, blocks, cblock,
                         aggregate_block_info(blocks), cblock.r)


def init_firmware(
    kp: ChameleonKeyPair,
    pool: CryptoPool,
    fmodules: Sequence[FunctionalModule],
    version_id: str = "factory",
    rng: random.Random | None = None,
    chain_length: int | None = None,
) -> Checkpoint:
    """Build the factory image from ``L + 1`` fresh templates.

    ``fmodules`` fills the first slots in order; any remaining slots (when
    ``chain_length`` exceeds ``len(fmodules)``) stay filler.
    """
    length = len(fmodules) if chain_length is None else chain_length
    if length < 1 or len(fmodules) > length:
        raise PipelineError("need between 1 and L functional modules")
    rng = rng or random.Random()
    templates = tuple(pool.claim(length + 1))
    slots = list(fmodules) + [None] * (length - len(fmodules))
    image = _assemble(kp, templates, slots, ImageKind.FUNCTIONAL, version_id, rng)
    return Checkpoint(image, image.chain(version_id), templates)


def security_update(
    kp: ChameleonKeyPair,
    prev: Checkpoint,
    fmodules: Sequence[FunctionalModule],
    pool: CryptoPool,
    version_id: str,
    rng: random.Random | None = None,
) -> Checkpoint:
    """Issue a security checkpoint with proof ``P`` binding it to ``prev``.

    Fresh templates give the new checkpoint a new ``H``; ``P`` satisfies
    ``CH(enc(H_prev), C_prev) == CH(enc(H_new), P)``.
    """
    if kp.x is None:
        raise TrapdoorRequired("security updates need the trapdoor")
    chain = prev.chain
    if prev.image.digests != chain.digests:
        raise InvalidChain("previous image does not match its chain")
    if not verify_pair(kp, prev.image.commitment_block.message(), chain.commitment,
                       chain.digests[-1]):
        raise InvalidChain("previous chain commitment does not open its commitment block")
    length = chain.length
    if len(fmodules) > length:
        raise PipelineError(f"at most {length} modules fit in a checkpoint image")
    rng = rng or random.Random()
    templates = tuple(pool.claim(length + 1))
    slots = list(fmodules) + [None] * (length - len(fmodules))
    image = _assemble(kp, templates, slots, ImageKind.SECURITY, version_id, rng)
    new_chain = image.chain(version_id)
    proof = find_collision(kp, chain.encoded_h(), chain.commitment, new_chain.encoded_h())
    image = replace(image, proof=proof)
    return Checkpoint(image, new_chain, templates)


def plan_slots(catalog: ModuleCatalog, requested: Iterable[int], length: int,
               pad: Iterable[int] = ()) -> list[int]:
    """Closure of ``requested`` (optionally padded from ``pad``) in install order."""
    target = set(catalog.closure(requested))
    if len(target) > length:
        raise RequestTooLarge(f"request needs {len(target)} slots, image has {length}")
    for mid in pad:
        if len(target) >= length:
            break
        if mid in target:
            continue
        extra = catalog.closure([mid])
        if len(target | extra) <= length:
            target |= extra
    return catalog.install_order(target)


def iterate_version(
    kp: ChameleonKeyPair,
    checkpoint: Checkpoint,
    requested: Iterable[int],
    catalog: ModuleCatalog,
    version_id: str,
    rng: random.Random | None = None,
    pad: Iterable[int] = (),
) -> FirmwareImage:
    """Customised variant sharing ``checkpoint``'s digest sequence."""
    order = plan_slots(catalog, requested, checkpoint.length, pad)
    slots: list[FunctionalModule | None] = [catalog[m] for m in order]
    slots += [None] * (checkpoint.length - len(slots))
    return _assemble(kp, checkpoint.templates, slots, ImageKind.FUNCTIONAL,
                     version_id, rng or random.Random())


def image_digest(pk: ChameleonKeyPair, image: FirmwareImage) -> bytes:
    """Content hash of the encoded image, handy as a cache key."""
    return hashlib.sha256(image.encode(pk)).digest()


def commitment_digest(pk: ChameleonKeyPair, chain: VerificationChain) -> ChameleonDigest:
    return chash(pk, chain.encoded_h(), chain.commitment)
