import io
import random
from dataclasses import replace

import pytest

from imup.device import (
    AlreadyInitialized,
    DeviceState,
    InstallError,
    NotInitialized,
    UnverifiedImage,
    factory_init,
    functional_verify,
    install,
    security_verify,
    verify_image,
    verify_stream,
)
from imup.firmware import ImageKind, init_firmware, iterate_version, security_update
from imup.package import FunctionalModule


@pytest.fixture
def setup(kp64, catalog, pool64, rng):
    cp = init_firmware(kp64, pool64, [catalog.by_name(n) for n in "abcdefg"], "cp0", rng)
    return cp, factory_init(cp.chain, pool64.difficulty)


def ids(catalog, names):
    return {catalog.by_name(n).module_id for n in names}


class TestFactoryInit:
    def test_fresh(self, setup):
        cp, state = setup
        assert state.trust_initialized and state.stored_chain == cp.chain
        assert state.installed_modules == frozenset()

    def test_double_init(self, setup):
        cp, state = setup
        with pytest.raises(AlreadyInitialized):
            factory_init(cp.chain, 1, state)

    def test_uninitialised(self, kp64, setup):
        cp, _ = setup
        with pytest.raises(NotInitialized):
            functional_verify(kp64, DeviceState(), cp.image)

    def test_state_round_trip(self, tmp_path, kp64, setup):
        _, state = setup
        state = replace(state, installed_modules=frozenset({3, 1, 7}))
        state.save(tmp_path / "dev", kp64)
        assert (tmp_path / "dev").read_bytes()[:8] == b"IMUPDEV1"
        assert DeviceState.load(tmp_path / "dev", kp64) == state


class TestFunctional:
    def test_sibling_variant(self, kp64, catalog, setup, rng):
        cp, state = setup
        img = iterate_version(kp64, cp, ids(catalog, "ch"), catalog, "v", rng)
        assert functional_verify(kp64.public(), state, img)

    def test_reorder(self, kp64, setup):
        cp, state = setup
        blocks = list(cp.image.blocks)
        blocks[0], blocks[1] = blocks[1], blocks[0]
        assert not functional_verify(kp64, state, replace(cp.image, blocks=tuple(blocks)))

    def test_content_flip_each_block(self, kp64, setup):
        cp, state = setup
        for i, b in enumerate(cp.image.blocks):
            flipped = bytearray(b.content)
            flipped[len(flipped) // 2] ^= 0x01
            blocks = list(cp.image.blocks)
            blocks[i] = replace(b, content=bytes(flipped))
            assert not functional_verify(kp64, state, replace(cp.image, blocks=tuple(blocks)))

    def test_no_state_change(self, kp64, setup):
        cp, state = setup
        before = state.encode(kp64)
        functional_verify(kp64, state, cp.image)
        assert state.encode(kp64) == before

    def test_security_image_not_functional(self, kp64, catalog, setup, pool64, rng):
        cp, state = setup
        s = security_update(kp64, cp, [], pool64, "cp1", rng)
        # Same digests as the stored chain would be needed anyway; the kind
        # flag alone already rules the functional branch out.
        relabelled = replace(s.image, kind=ImageKind.FUNCTIONAL, proof=None)
        assert not functional_verify(kp64, state, relabelled)
        assert not functional_verify(kp64, state, s.image)


def _module_block_index(image, module_id):
    return next(i for i, b in enumerate(image.blocks) if b.module_id == module_id)


class TestLabelledTamper:
    """Customisation-class tamper cases: L2 edits configuration, L3 swaps code."""

    @pytest.fixture
    def variant(self, kp64, catalog, setup, rng):
        cp, state = setup
        return iterate_version(kp64, cp, ids(catalog, "bc"), catalog, "v", rng), state

    def test_l2_install_step_edit(self, kp64, catalog, variant):
        img, state = variant
        i = _module_block_index(img, catalog.by_name("c").module_id)
        mod = img.blocks[i].module()
        evil = replace(mod, install_steps=mod.install_steps + ("chmod 777 /etc",))
        blocks = list(img.blocks)
        blocks[i] = replace(blocks[i], content=evil.encode())
        assert not functional_verify(kp64, state, replace(img, blocks=tuple(blocks)))

    def test_l2_dependency_drop(self, kp64, catalog, variant):
        img, state = variant
        i = _module_block_index(img, catalog.by_name("b").module_id)
        mod = img.blocks[i].module()
        blocks = list(img.blocks)
        blocks[i] = replace(blocks[i], content=replace(mod, dependencies=()).encode())
        assert not functional_verify(kp64, state, replace(img, blocks=tuple(blocks)))

    def test_l3_payload_swap(self, kp64, catalog, variant):
        img, state = variant
        i = _module_block_index(img, catalog.by_name("c").module_id)
        mod = img.blocks[i].module()
        blocks = list(img.blocks)
        blocks[i] = replace(blocks[i], content=replace(mod, payload=b"rm -rf /\n").encode())
        assert not functional_verify(kp64, state, replace(img, blocks=tuple(blocks)))

    def test_l3_block_graft(self, kp64, catalog, setup, rng):
        # A valid block from another variant in the same slot: the per-block
        # check passes but the commitment binding does not.
        cp, state = setup
        v1 = iterate_version(kp64, cp, ids(catalog, "c"), catalog, "v", rng)
        v2 = iterate_version(kp64, cp, ids(catalog, "h"), catalog, "v", rng)
        blocks = list(v1.blocks)
        blocks[0] = v2.blocks[0]
        assert blocks[0].check(kp64, state.pow_difficulty)
        assert not functional_verify(kp64, state, replace(v1, blocks=tuple(blocks)))

    def test_commitment_swap(self, kp64, catalog, setup, rng):
        cp, state = setup
        v1 = iterate_version(kp64, cp, ids(catalog, "c"), catalog, "v", rng)
        v2 = iterate_version(kp64, cp, ids(catalog, "h"), catalog, "v", rng)
        mixed = replace(v1, commitment_block=v2.commitment_block, commitment=v2.commitment)
        assert not functional_verify(kp64, state, mixed)


class TestSecurity:
    @pytest.fixture
    def update(self, kp64, catalog, setup, pool64, rng):
        cp, state = setup
        return cp, state, security_update(kp64, cp, [catalog.by_name("h")], pool64, "cp1", rng)

    def test_accept_and_rotate(self, kp64, update):
        cp, state, s = update
        ok, new = security_verify(kp64, state, s.image)
        assert ok and new.stored_chain == s.chain and new.stored_chain != state.stored_chain

    def test_random_proofs(self, kp64, update):
        _, state, s = update
        r = random.Random(9)
        before = state.encode(kp64)
        accepted = 0
        for _ in range(10_000):
            p = r.randrange(kp64.q)
            if p == s.image.proof:
                continue
            ok, after = security_verify(kp64, state, replace(s.image, proof=p))
            accepted += ok
            assert after is state
        assert accepted == 0
        assert state.encode(kp64) == before

    def test_rollback(self, kp64, catalog, update, pool64, rng):
        cp, state, s1 = update
        ok, st1 = security_verify(kp64, state, s1.image)
        assert ok
        s2 = security_update(kp64, s1, [], pool64, "cp2", rng)
        ok, st2 = security_verify(kp64, st1, s2.image)
        assert ok
        assert security_verify(kp64, st2, s1.image) == (False, st2)
        assert security_verify(kp64, st2, s2.image) == (False, st2)
        assert not functional_verify(kp64, st2, cp.image)

    def test_functional_image_not_security(self, kp64, setup):
        cp, state = setup
        assert security_verify(kp64, state, cp.image) == (False, state)
        forced = replace(cp.image, kind=ImageKind.SECURITY, proof=cp.chain.commitment)
        assert security_verify(kp64, state, forced) == (False, state)

    def test_dispatch(self, kp64, update):
        cp, state, s = update
        assert verify_image(kp64, state, cp.image) == (True, state)
        ok, new = verify_image(kp64, state, s.image)
        assert ok and new.stored_chain == s.chain


class TestStream:
    def test_bytes_and_file(self, kp64, tmp_path, setup):
        cp, state = setup
        data = cp.image.encode(kp64)
        assert verify_stream(kp64, state, data)[0]
        (tmp_path / "img").write_bytes(data)
        with open(tmp_path / "img", "rb") as fh:
            assert verify_stream(kp64, state, fh)[0]

    @pytest.mark.parametrize("cut", [0, 5, 9, 100, -1])
    def test_truncated(self, kp64, setup, cut):
        cp, state = setup
        data = cp.image.encode(kp64)
        assert verify_stream(kp64, state, io.BytesIO(data[:cut]))[0] is False

    def test_trailing_bytes(self, kp64, setup):
        cp, state = setup
        assert verify_stream(kp64, state, cp.image.encode(kp64) + b"\x00")[0] is False


class TestInstall:
    def test_empty_selection(self, kp64, setup):
        cp, state = setup
        assert install(kp64, state, cp.image, set()) is state

    def test_pulls_dependency(self, kp64, catalog, setup):
        cp, state = setup
        new = install(kp64, state, cp.image, ids(catalog, "b"))
        assert new.installed_modules == ids(catalog, "ab")
        new = install(kp64, new, cp.image, ids(catalog, "f"))
        assert new.installed_modules == ids(catalog, "abdef")

    def test_absent_module(self, kp64, catalog, setup):
        cp, state = setup
        with pytest.raises(InstallError):
            install(kp64, state, cp.image, ids(catalog, "h"))

    def test_closure_outside_image(self, kp64, catalog, pool64, rng):
        # The factory path does not resolve dependencies, so an image can
        # legitimately carry b without a; installing b must then fail.
        cp = init_firmware(kp64, pool64, [catalog.by_name("b"), catalog.by_name("c")], "x", rng)
        state = factory_init(cp.chain, pool64.difficulty)
        with pytest.raises(InstallError):
            install(kp64, state, cp.image, ids(catalog, "b"))
        assert install(kp64, state, cp.image, ids(catalog, "c")).installed_modules == ids(catalog, "c")

    def test_unverified(self, kp64, catalog, setup):
        cp, state = setup
        mod = FunctionalModule(50, "x", 2, b"x")
        blocks = list(cp.image.blocks)
        blocks[0] = replace(blocks[0], content=mod.encode(), module_id=50)
        with pytest.raises(UnverifiedImage):
            install(kp64, state, replace(cp.image, blocks=tuple(blocks)), {50})
