"""Functional-module packaging, the module catalog and crypto-module generation."""

from __future__ import annotations

import enum
import heapq
import os
import struct
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .chameleon import ChameleonDigest, ChameleonKeyPair, chash, decode_digest, verify_pair
from .codec import FormatError, Reader, pack_bytes, pack_fixed, pack_str, seeded_random
from .pow import PowChallenge, check_nonce, solve

MODULE_MAGIC = b"IMUPMOD1"
POOL_MAGIC = b"IMUPPOOL"
# Appended to block content before chameleon hashing; keeps block digests
# disjoint from PoW digests.
BLOCK_TAG = b"|blk"
PSTR_LEN = 32


class CatalogError(ValueError):
    pass


class MissingDependency(CatalogError):
    pass


class DuplicateModule(CatalogError):
    pass


class CyclicDependency(CatalogError):
    pass


class UnknownModule(CatalogError, KeyError):
    def __str__(self) -> str:
        return ValueError.__str__(self)


class PoolExhausted(RuntimeError):
    pass


def default_workers() -> int:
    """Worker cap taken from ``IMUP_THREADS`` (defaults to 1)."""
    try:
        return max(1, int(os.environ.get("IMUP_THREADS", "1")))
    except ValueError:
        return 1


class ModuleKind(enum.IntEnum):
    SCRIPT = 1
    BINARY = 2


@dataclass(frozen=True)
class FunctionalModule:
    module_id: int
    name: str
    kind: ModuleKind
    payload: bytes
    install_steps: tuple[str, ...] = ()
    dependencies: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", ModuleKind(self.kind))
        object.__setattr__(self, "install_steps", tuple(self.install_steps))
        object.__setattr__(self, "dependencies", tuple(sorted(set(self.dependencies))))
        if not 0 <= self.module_id < 0xFFFFFFFF:
            raise ValueError("module id must fit in 32 bits and not be the filler id")
        if not self.name:
            raise ValueError("module name must be non-empty")
        for step in self.install_steps:
            if "\n" in step or "\r" in step:
                raise ValueError("install steps are single lines")
        if self.kind is ModuleKind.SCRIPT:
            try:
                self.payload.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ValueError("script payloads must be UTF-8 text") from exc

    def manifest(self) -> str:
        lines = [f"step:{s}\n" for s in self.install_steps]
        lines += [f"dep:{d}\n" for d in self.dependencies]
        return "".join(lines)

    def encode(self) -> bytes:
        return b"".join([
            MODULE_MAGIC,
            struct.pack(">IB", self.module_id, self.kind),
            pack_str(self.name),
            pack_bytes(self.payload),
            pack_str(self.manifest()),
        ])

    @classmethod
    def decode(cls, data: bytes) -> FunctionalModule:
        rd = Reader(data)
        rd.magic(MODULE_MAGIC)
        module_id, kind = rd.u32(), rd.u8()
        name, payload, manifest = rd.lp_str(), rd.lp_bytes(), rd.lp_str()
        rd.expect_end()
        steps, deps = parse_manifest(manifest)
        try:
            mod = cls(module_id, name, ModuleKind(kind), payload, steps, deps)
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
        if mod.manifest() != manifest:
            raise FormatError("manifest is not in canonical form")
        return mod


def parse_manifest(text: str) -> tuple[list[str], list[int]]:
    steps: list[str] = []
    deps: list[int] = []
    if text and not text.endswith("\n"):
        raise FormatError("manifest lines must be LF-terminated")
    # Split on LF only: str.splitlines also breaks on NEL, U+2028 and friends,
    # which are legal inside a step.
    for line in text[:-1].split("\n") if text else []:
        if line.startswith("step:"):
            steps.append(line[5:])
        elif line.startswith("dep:") and line[4:].isascii() and line[4:].isdigit():
            deps.append(int(line[4:]))
        else:
            raise FormatError(f"bad manifest line {line!r}")
    return steps, deps


class ModuleCatalog:
    """Modules keyed by id plus a popularity ranking (most popular first)."""

    def __init__(self):
        self.modules: dict[int, FunctionalModule] = {}
        self.popularity_rank: list[int] = []
        self._names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.modules)

    def __contains__(self, module_id: int) -> bool:
        return module_id in self.modules

    def __getitem__(self, module_id: int) -> FunctionalModule:
        try:
            return self.modules[module_id]
        except KeyError:
            raise UnknownModule(f"unknown module id {module_id}") from None

    def next_id(self) -> int:
        return max(self.modules, default=0) + 1

    def add(self, module: FunctionalModule) -> FunctionalModule:
        if module.module_id in self.modules:
            raise DuplicateModule(f"module id {module.module_id} already registered")
        if module.name in self._names:
            raise DuplicateModule(f"module name {module.name!r} already registered")
        if module.module_id in module.dependencies:
            raise CyclicDependency(f"module {module.module_id} depends on itself")
        missing = [d for d in module.dependencies if d not in self.modules]
        if missing:
            raise MissingDependency(f"unknown dependencies {missing}")
        self.modules[module.module_id] = module
        self._names[module.name] = module.module_id
        self.popularity_rank.append(module.module_id)
        return module

    def package(
        self,
        name: str,
        kind: ModuleKind,
        payload: bytes,
        install_steps: Iterable[str] = (),
        dependencies: Iterable[int] = (),
    ) -> FunctionalModule:
        mod = FunctionalModule(self.next_id(), name, kind, payload,
                               tuple(install_steps), tuple(dependencies))
        return self.add(mod)

    def by_name(self, name: str) -> FunctionalModule:
        try:
            return self.modules[self._names[name]]
        except KeyError:
            raise UnknownModule(f"unknown module name {name!r}") from None

    def set_popularity(self, ranking: Iterable[int]) -> None:
        ranking = list(ranking)
        if sorted(ranking) != sorted(self.modules):
            raise ValueError("popularity ranking must be a permutation of module ids")
        self.popularity_rank = ranking

    def closure(self, ids: Iterable[int]) -> frozenset[int]:
        """``ids`` plus everything they transitively depend on."""
        seen: set[int] = set()
        stack = list(ids)
        while stack:
            mid = stack.pop()
            if mid in seen:
                continue
            seen.add(mid)
            stack.extend(self[mid].dependencies)
        return frozenset(seen)

    def install_order(self, ids: Iterable[int]) -> list[int]:
        """Dependencies before dependents; ties broken by ascending id."""
        ids = set(ids)
        indeg = {m: 0 for m in ids}
        users: dict[int, list[int]] = {m: [] for m in ids}
        for m in ids:
            for d in self[m].dependencies:
                if d in ids:
                    indeg[m] += 1
                    users[d].append(m)
        ready = [m for m, n in indeg.items() if n == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            m = heapq.heappop(ready)
            order.append(m)
            for u in users[m]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    heapq.heappush(ready, u)
        if len(order) != len(ids):
            raise CyclicDependency("dependency cycle among requested modules")
        return order

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for mod in self.modules.values():
            (directory / f"{mod.module_id:08d}.mod").write_bytes(mod.encode())
        (directory / "popularity.txt").write_text(
            "".join(f"{m}\n" for m in self.popularity_rank))

    @classmethod
    def load(cls, directory: str | Path) -> ModuleCatalog:
        directory = Path(directory)
        mods = [FunctionalModule.decode(p.read_bytes()) for p in directory.glob("*.mod")]
        cat = cls()
        by_id = {m.module_id: m for m in mods}
        if len(by_id) != len(mods):
            raise DuplicateModule("duplicate module ids in catalog directory")
        # Insert in dependency order so add() can enforce its checks.
        pending = dict(by_id)
        while pending:
            ready = sorted(m for m, mod in pending.items()
                           if all(d in cat.modules for d in mod.dependencies))
            if not ready:
                unknown = {d for mod in pending.values() for d in mod.dependencies
                           if d not in by_id}
                if unknown:
                    raise MissingDependency(f"unknown dependencies {sorted(unknown)}")
                raise CyclicDependency("dependency cycle in catalog directory")
            for m in ready:
                cat.add(pending.pop(m))
        rank_file = directory / "popularity.txt"
        if rank_file.exists():
            cat.set_popularity(int(line) for line in rank_file.read_text().split())
        return cat


def package_fmodule(
    name: str,
    kind: ModuleKind,
    payload: bytes,
    install_steps: Iterable[str],
    dependencies: Iterable[int],
    catalog: ModuleCatalog,
) -> FunctionalModule:
    return catalog.package(name, kind, payload, install_steps, dependencies)


@dataclass(frozen=True)
class CryptoModule:
    """Template block: random padding, its collision parameter, PoW nonce, digest."""

    pstr: bytes
    pparam: int
    solution_nonce: int
    digest: ChameleonDigest
    difficulty: int

    def block_message(self) -> bytes:
        return self.pstr + BLOCK_TAG

    def challenge(self) -> PowChallenge:
        return PowChallenge(self.digest.encode(), self.difficulty)

    def check(self, pk: ChameleonKeyPair) -> bool:
        return (len(self.pstr) == PSTR_LEN
                and verify_pair(pk, self.block_message(), self.pparam, self.digest)
                and check_nonce(pk, self.challenge(), self.solution_nonce))

    def encode(self, pk: ChameleonKeyPair) -> bytes:
        return (self.pstr + pack_fixed(self.pparam, pk.q_width)
                + struct.pack(">Q", self.solution_nonce) + self.digest.encode())

    @classmethod
    def read(cls, rd: Reader, pk: ChameleonKeyPair, difficulty: int) -> CryptoModule:
        pstr = rd.take(PSTR_LEN)
        pparam = rd.fixed_int(pk.q_width)
        nonce = rd.u64()
        digest = decode_digest(pk, rd.take(pk.width))
        return cls(pstr, pparam, nonce, digest, difficulty)


def _seal(args) -> CryptoModule:
    pk, pstr, pparam, d = args
    digest = chash(pk, pstr + BLOCK_TAG, pparam)
    sol = solve(pk, PowChallenge(digest.encode(), d))
    return CryptoModule(pstr, pparam, sol.nonce, digest, d)


def gen_crypto_modules(
    pk: ChameleonKeyPair,
    n: int,
    d: int,
    seed: bytes | str | int,
    workers: int | None = None,
) -> list[CryptoModule]:
    """Generate ``n`` PoW-sealed template blocks, sorted by padding string."""
    if n < 1:
        raise ValueError("need at least one module")
    PowChallenge(b"", d).check_bounds(pk)
    rng = seeded_random(b"imup-cmod", seed)
    pub = pk.public()
    jobs = [(pub, rng.randbytes(PSTR_LEN), rng.randrange(pk.q), d) for _ in range(n)]
    workers = default_workers() if workers is None else workers
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n)) as ex:
            mods = list(ex.map(_seal, jobs, chunksize=max(1, n // (4 * workers))))
    else:
        mods = [_seal(job) for job in jobs]
    return sorted(mods, key=lambda m: m.pstr)


@dataclass
class CryptoPool:
    """Unused template blocks; ``claim`` hands each one out at most once."""

    modules: list[CryptoModule]
    difficulty: int
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.modules)

    def claim(self, n: int) -> list[CryptoModule]:
        with self._lock:
            if n > len(self.modules):
                raise PoolExhausted(f"need {n} crypto modules, {len(self.modules)} left")
            taken, self.modules = self.modules[:n], self.modules[n:]
            return taken

    def encode(self, pk: ChameleonKeyPair) -> bytes:
        with self._lock:
            mods = list(self.modules)
        return (POOL_MAGIC + struct.pack(">BI", self.difficulty, len(mods))
                + b"".join(m.encode(pk) for m in mods))

    @classmethod
    def decode(cls, data: bytes, pk: ChameleonKeyPair) -> CryptoPool:
        rd = Reader(data)
        rd.magic(POOL_MAGIC)
        d, count = rd.u8(), rd.u32()
        mods = [CryptoModule.read(rd, pk, d) for _ in range(count)]
        rd.expect_end()
        return cls(mods, d)

    def save(self, path: str | Path, pk: ChameleonKeyPair) -> None:
        Path(path).write_bytes(self.encode(pk))

    @classmethod
    def load(cls, path: str | Path, pk: ChameleonKeyPair) -> CryptoPool:
        return cls.decode(Path(path).read_bytes(), pk)
