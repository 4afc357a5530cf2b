import io
import random
from dataclasses import replace

import pytest

from imup.chameleon import TrapdoorRequired, chash
from imup.device import factory_init, functional_verify, security_verify
from imup.firmware import (
    FilledBlock,
    FirmwareImage,
    ImageKind,
    ImageReader,
    PipelineError,
    RequestTooLarge,
    aggregate_block_info,
    init_firmware,
    iterate_version,
    security_update,
)
from imup.package import CryptoPool, PoolExhausted, UnknownModule, gen_crypto_modules


def mods(catalog, *names):
    return [catalog.by_name(n) for n in names]


class TestInit:
    def test_digest_preserved(self, kp64, catalog, rng):
        pool = CryptoPool(gen_crypto_modules(kp64, 3, 1, "init2"), 1)
        templates = list(pool.modules)
        cp = init_firmware(kp64, pool, mods(catalog, "a", "c"), "f", rng)
        assert [b.digest for b in cp.image.blocks] == [t.digest for t in templates[:2]]
        assert cp.image.commitment_block.digest == templates[2].digest
        assert cp.chain.digests == cp.image.digests
        assert len(pool) == 0

    def test_permuted_modules(self, kp64, catalog):
        def build(order):
            pool = CryptoPool(gen_crypto_modules(kp64, 3, 1, "perm"), 1)
            return init_firmware(kp64, pool, mods(catalog, *order), "f", random.Random(0))

        x, y = build(["a", "c"]), build(["c", "a"])
        # Digests belong to slots, not content, so block_info is unchanged.
        assert x.image.block_info == y.image.block_info
        assert x.chain.commitment != y.chain.commitment
        assert x.image.blocks[0].content == y.image.blocks[1].content
        # Fresh templates for the permuted build change block_info as well.
        pool = CryptoPool(gen_crypto_modules(kp64, 3, 1, "other"), 1)
        z = init_firmware(kp64, pool, mods(catalog, "c", "a"), "f", random.Random(0))
        assert z.image.block_info != x.image.block_info
        assert z.chain.commitment != x.chain.commitment

    def test_l7_verifies(self, kp64, catalog, pool64, rng):
        cp = init_firmware(kp64, pool64, mods(catalog, *"abcdefg"), "f", rng)
        assert len(cp.image.blocks) == 7
        assert functional_verify(kp64.public(), factory_init(cp.chain, 1), cp.image)

    def test_pool_exhausted(self, kp64, catalog, rng):
        pool = CryptoPool(gen_crypto_modules(kp64, 2, 0, "tiny"), 0)
        with pytest.raises(PoolExhausted):
            init_firmware(kp64, pool, mods(catalog, "a", "c"), "f", rng)

    def test_duplicate_ids(self, kp64, catalog, pool64, rng):
        with pytest.raises(PipelineError):
            init_firmware(kp64, pool64, mods(catalog, "a", "a"), "f", rng)

    def test_needs_trapdoor(self, kp64, catalog, pool64, rng):
        with pytest.raises(TrapdoorRequired):
            init_firmware(kp64.public(), pool64, mods(catalog, "a"), "f", rng)


class TestSecurityUpdate:
    def test_trivial_update(self, kp64, catalog, pool64, rng):
        cp = init_firmware(kp64, pool64, mods(catalog, *"abcdefg"), "cp0", rng)
        s = security_update(kp64, cp, mods(catalog, *"abcdefg"), pool64, "cp1", rng)
        p = s.image.proof
        assert p is not None and p != cp.chain.commitment
        assert s.chain.commitment != cp.chain.commitment
        assert chash(kp64, cp.chain.encoded_h(), cp.chain.commitment) == \
            chash(kp64, s.chain.encoded_h(), p)

    def test_distinct_proofs(self, kp64, catalog, pool64):
        cp = init_firmware(kp64, pool64, mods(catalog, "a", "c"), "cp0", random.Random(1),
                           chain_length=7)
        s1 = security_update(kp64, cp, mods(catalog, "a"), pool64, "cp1", random.Random(2))
        s2 = security_update(kp64, cp, mods(catalog, "a"), pool64, "cp1", random.Random(3))
        assert s1.image.proof != s2.image.proof

    def test_device_rotates(self, kp64, catalog, pool64, rng):
        cp = init_firmware(kp64, pool64, mods(catalog, *"abcdefg"), "cp0", rng)
        s = security_update(kp64, cp, mods(catalog, "h"), pool64, "cp1", rng)
        state = factory_init(cp.chain, 1)
        ok, new = security_verify(kp64, state, s.image)
        assert ok and new.stored_chain == s.chain

    def test_invalid_prev(self, kp64, catalog, pool64, rng):
        cp = init_firmware(kp64, pool64, mods(catalog, "a"), "cp0", rng, chain_length=3)
        bad = replace(cp, chain=replace(cp.chain, commitment=(cp.chain.commitment + 1) % kp64.q))
        with pytest.raises(PipelineError):
            security_update(kp64, bad, [], pool64, "cp1", rng)

    def test_needs_trapdoor(self, kp64, catalog, pool64, rng):
        cp = init_firmware(kp64, pool64, mods(catalog, "a"), "cp0", rng, chain_length=3)
        with pytest.raises(TrapdoorRequired):
            security_update(kp64.public(), cp, [], pool64, "cp1", rng)


@pytest.fixture
def checkpoint(kp64, catalog, pool64, rng):
    return init_firmware(kp64, pool64, mods(catalog, *"abcdefg"), "cp0", rng)


class TestIterate:
    def test_empty_request(self, kp64, catalog, checkpoint, rng):
        img = iterate_version(kp64, checkpoint, set(), catalog, "v", rng)
        assert img.module_set == frozenset()
        assert all(b.is_filler for b in img.blocks)
        assert [b.content for b in img.blocks] == [t.pstr for t in checkpoint.templates[:7]]
        assert img.digests == checkpoint.chain.digests

    def test_siblings_swap(self, kp64, catalog, checkpoint, rng):
        a, c, d = (catalog.by_name(n).module_id for n in "acd")
        v1 = iterate_version(kp64, checkpoint, {a, c}, catalog, "v1", rng)
        v2 = iterate_version(kp64, checkpoint, {a, c, d}, catalog, "v2", rng)
        state = factory_init(checkpoint.chain, 1)
        assert functional_verify(kp64, state, v1) and functional_verify(kp64, state, v2)
        assert v1.digests == v2.digests == checkpoint.chain.digests
        assert v1.commitment != v2.commitment

    def test_dependency_pulled_in(self, kp64, catalog, checkpoint, rng):
        a, b = catalog.by_name("a").module_id, catalog.by_name("b").module_id
        img = iterate_version(kp64, checkpoint, {b}, catalog, "v", rng)
        assert img.module_set == catalog.closure({b}) == {a, b}
        ids = [blk.module_id for blk in img.blocks if not blk.is_filler]
        assert ids.index(a) < ids.index(b)

    def test_oversize(self, kp64, catalog, checkpoint, rng):
        with pytest.raises(RequestTooLarge):
            iterate_version(kp64, checkpoint, set(catalog.modules), catalog, "v", rng)

    def test_unknown(self, kp64, catalog, checkpoint, rng):
        with pytest.raises(UnknownModule):
            iterate_version(kp64, checkpoint, {999}, catalog, "v", rng)

    def test_unique_commitments(self, kp64, catalog, checkpoint, rng):
        ids = sorted(catalog.modules)
        seen = {}
        for i in range(len(ids)):
            for j in range(i, len(ids)):
                want = {ids[i], ids[j]}
                img = iterate_version(kp64, checkpoint, want, catalog, "v", rng)
                seen.setdefault(img.module_set, set()).add(img.commitment)
        flat = [c for cs in seen.values() for c in cs]
        assert len(flat) == len(set(flat))


class TestAggregate:
    def _block(self, kp, v):
        return FilledBlock(b"", 0, 0, chash(kp, bytes([v]), 1))

    def test_single(self, kp64):
        b = self._block(kp64, 1)
        assert aggregate_block_info([b]) == b.digest.encode()

    def test_order(self, kp64):
        x, y = self._block(kp64, 1), self._block(kp64, 2)
        assert aggregate_block_info([x, y]) != aggregate_block_info([y, x])

    def test_width(self, kp64, checkpoint):
        assert len(checkpoint.image.block_info) == 7 * kp64.width


class TestImageFile:
    def test_round_trip(self, kp64, catalog, checkpoint, rng):
        img = iterate_version(kp64, checkpoint, {1, 3}, catalog, "v", rng)
        data = img.encode(kp64)
        assert data[:8] == b"IMUPIMG1"
        back = FirmwareImage.decode(data, kp64)
        assert back == img and back.encode(kp64) == data

    def test_streaming_reader(self, kp64, checkpoint):
        data = checkpoint.image.encode(kp64)
        rd = ImageReader(io.BytesIO(data), kp64)
        kind, vid, length = rd.header()
        assert (kind, vid, length) == (ImageKind.FUNCTIONAL, "cp0", 7)
        assert list(rd.blocks()) == list(checkpoint.image.blocks)
        assert rd.commitment_block() == checkpoint.image.commitment_block
        assert rd.trailer() == (checkpoint.image.block_info, checkpoint.image.commitment, None)
        rd.finish()

    def test_security_image_round_trip(self, kp64, catalog, checkpoint, pool64, rng):
        s = security_update(kp64, checkpoint, [], pool64, "cp1", rng)
        data = s.image.encode(kp64)
        assert FirmwareImage.decode(data, kp64) == s.image
