from __future__ import annotations

import random
from pathlib import Path

import pytest

from imup.chameleon import keygen, load_key
from imup.package import CryptoPool, ModuleCatalog, ModuleKind, gen_crypto_modules

DATA = Path(__file__).parent / "data"

CRITERIA = {
    1: "collision correctness",
    2: "tamper rejection",
    3: "order sensitivity",
    4: "checkpoint equivalence and rollback",
    5: "PoW asymmetry",
    6: "attack-cost asymmetry",
    7: "server reuse trends",
    8: "amortisation",
    9: "concurrency safety",
    10: "format round-trips",
}

_outcomes: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(marker.args[0], []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} [{status}] {CRITERIA[n]}")


@pytest.fixture(scope="session")
def kp64():
    return keygen(64, "tests/64")


@pytest.fixture(scope="session")
def kp1024():
    return keygen(1024, "a")


@pytest.fixture(scope="session")
def fixture_key():
    return load_key(DATA / "fixture33.key")


def fixture_pool(pk, d: int) -> CryptoPool:
    return CryptoPool.load(DATA / f"pool_d{d}.bin", pk)


def small_catalog() -> ModuleCatalog:
    """a..h with b -> a and f -> e -> d."""
    cat = ModuleCatalog()
    a = cat.package("a", ModuleKind.SCRIPT, b"echo a\n", ["install a"])
    cat.package("b", ModuleKind.BINARY, b"\x00b-bin", ["install b"], [a.module_id])
    cat.package("c", ModuleKind.SCRIPT, b"echo c\n", ["install c", "restart c"])
    d = cat.package("d", ModuleKind.BINARY, b"\x01d-bin", ["install d"])
    e = cat.package("e", ModuleKind.BINARY, b"\x02e-bin", ["install e"], [d.module_id])
    cat.package("f", ModuleKind.SCRIPT, b"echo f\n", ["install f"], [e.module_id])
    cat.package("g", ModuleKind.BINARY, b"\x03g", ["install g"])
    cat.package("h", ModuleKind.SCRIPT, b"echo h\n", ["install h"])
    return cat


@pytest.fixture
def catalog():
    return small_catalog()


@pytest.fixture
def pool64(kp64):
    return CryptoPool(gen_crypto_modules(kp64, 64, 1, "tests/pool"), 1)


@pytest.fixture
def rng():
    return random.Random(1234)
