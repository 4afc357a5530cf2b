"""Distribution server: request matching against cached variants, on-demand
builds, checkpoint rollover, metrics and a small TCP front end.

A request is served from cache when some image built under the active
checkpoint already carries every requested module (after dependency closure).
Among such images the one with the fewest modules wins, ties going to the
lexicographically smallest image id. Concurrent misses whose module sets would
be covered by a build already in flight wait for it instead of building again.
"""

from __future__ import annotations

import hashlib
import logging
import socket
import socketserver
import struct
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .chameleon import ChameleonKeyPair
from .codec import FormatError, Reader, seeded_random
from .firmware import (
    Checkpoint,
    FirmwareImage,
    RequestTooLarge,
    init_firmware,
    iterate_version,
    plan_slots,
    security_update,
)
from .package import CryptoPool, ModuleCatalog, UnknownModule

log = logging.getLogger(__name__)

REQ_MAGIC = b"IMUPREQ1"
RSP_MAGIC = b"IMUPRSP1"
STATUS_OK, STATUS_OVERSIZE, STATUS_UNKNOWN = 0, 1, 2


@dataclass(frozen=True)
class ImageRef:
    image_id: str
    path: Path
    module_set: frozenset[int]
    checkpoint_id: str
    size_bytes: int


@dataclass
class _Entry:
    ref: ImageRef
    last_used: float


@dataclass
class ServerMetrics:
    total_time_s: float = 0.0
    hit_rate_pct: float = 0.0
    firmware_count: int = 0
    storage_bytes: int = 0
    preparation_time_s: float = 0.0
    first_processing_time_s: float = 0.0
    subsequent_processing_time_s: float = 0.0
    avg_search_time_ms: float = 0.0
    seed: int = 0


class ImageCache:
    """Per-checkpoint index of built variants plus the request counters.

    Not thread-safe on its own; the server serialises access with its lock.
    """

    def __init__(self):
        self.entries: dict[str, _Entry] = {}
        self.active: dict[int, list[str]] = {}  # size bucket -> image ids
        self.retired: set[str] = set()
        self.requests = 0
        self.hits = 0
        self.builds = 0

    def lookup(self, want: frozenset[int], now: float) -> ImageRef | None:
        for size in sorted(s for s in self.active if s >= len(want)):
            matches = [i for i in self.active[size] if want <= self.entries[i].ref.module_set]
            if matches:
                entry = self.entries[min(matches)]
                entry.last_used = now
                return entry.ref
        return None

    def insert(self, ref: ImageRef, now: float) -> None:
        self.entries[ref.image_id] = _Entry(ref, now)
        self.active.setdefault(len(ref.module_set), []).append(ref.image_id)

    def retire_all(self) -> None:
        for ids in self.active.values():
            self.retired.update(ids)
        self.active.clear()

    def active_refs(self) -> list[ImageRef]:
        return [self.entries[i].ref for ids in self.active.values() for i in ids]

    @property
    def storage_bytes(self) -> int:
        return sum(e.ref.size_bytes for e in self.entries.values())


class DistributionServer:
    def __init__(
        self,
        keypair: ChameleonKeyPair,
        catalog: ModuleCatalog,
        pool: CryptoPool,
        storage_dir: str | Path,
        chain_length: int = 7,
        seed: int = 0,
        max_storage_bytes: int | None = None,
        pad_popular: bool = True,
    ):
        if keypair.x is None:
            raise ValueError("the server needs the trapdoor")
        self.kp = keypair
        self.catalog = catalog
        self.pool = pool
        self.chain_length = chain_length
        self.seed = seed
        self.max_storage_bytes = max_storage_bytes
        self.pad_popular = pad_popular
        self.storage = Path(storage_dir)
        self.storage.mkdir(parents=True, exist_ok=True)
        self.cache = ImageCache()
        self.checkpoints: list[Checkpoint] = []
        self._checkpoint_files: dict[str, int] = {}
        self._lock = threading.Lock()
        self._inflight: dict[frozenset[int], Future] = {}
        self._rng = seeded_random(b"imup-server", seed)
        self._preparation_time = 0.0
        self._first_processing = 0.0
        self._build_times: list[float] = []
        self._search_times: list[float] = []
        self._started = time.perf_counter()
        self._served_time = 0.0

    @property
    def pow_difficulty(self) -> int:
        return self.pool.difficulty

    @property
    def active(self) -> Checkpoint:
        if not self.checkpoints:
            raise RuntimeError("server not initialised")
        return self.checkpoints[-1]

    def initialize(self, preparation_time_s: float = 0.0,
                   fmodules: Sequence[int] | None = None) -> Checkpoint:
        """Build the factory checkpoint.

        ``preparation_time_s`` is the time already spent generating the crypto
        pool, so first-processing time covers preparation plus this build.
        """
        t0 = time.perf_counter()
        if fmodules is None:
            fmodules = plan_slots(self.catalog, [], self.chain_length,
                                  self.catalog.popularity_rank)
        mods = [self.catalog[m] for m in fmodules]
        with self._lock:
            rng = self._child_rng()
        cp = init_firmware(self.kp, self.pool, mods, "cp0", rng,
                           chain_length=self.chain_length)
        self._store_checkpoint(cp)
        self._preparation_time = preparation_time_s
        self._first_processing = preparation_time_s + time.perf_counter() - t0
        self._started = time.perf_counter()
        return cp

    def checkpoint_rollover(self, updates: Sequence[int] | None = None) -> Checkpoint:
        """Issue a security checkpoint carrying ``updates`` (module ids)."""
        prev = self.active
        if updates is None:
            updates = sorted(prev.image.module_set)
        order = plan_slots(self.catalog, updates, self.chain_length)
        mods = [self.catalog[m] for m in order]
        with self._lock:
            rng = self._child_rng()
            version = f"cp{len(self.checkpoints)}"
        cp = security_update(self.kp, prev, mods, self.pool, version, rng)
        with self._lock:
            self.cache.retire_all()
            self._store_checkpoint(cp)
            self._prune()
        return cp

    def _child_rng(self):
        return seeded_random(b"imup-build", self._rng.getrandbits(128))

    def _store_checkpoint(self, cp: Checkpoint) -> None:
        path = self.storage / f"{cp.checkpoint_id}.ckpt"
        self._checkpoint_files[cp.checkpoint_id] = cp.image.save(path, self.kp)
        self.checkpoints.append(cp)

    def checkpoint_path(self, checkpoint_id: str) -> Path:
        return self.storage / f"{checkpoint_id}.ckpt"

    def handle_request(self, requested: Iterable[int]) -> tuple[ImageRef, bool]:
        want = self.catalog.closure(requested)
        if len(want) > self.chain_length:
            raise RequestTooLarge(f"request needs {len(want)} slots, image has {self.chain_length}")
        t0 = time.perf_counter()
        with self._lock:
            cp = self.active
            ref = self.cache.lookup(want, t0)
            self._search_times.append(time.perf_counter() - t0)
            if ref is not None:
                self._count(hit=True, t0=t0)
                return ref, True
            pending = self._covering_build(want)
            if pending is None:
                pad = self.catalog.popularity_rank if self.pad_popular else ()
                target = frozenset(plan_slots(self.catalog, want, self.chain_length, pad))
                fut: Future = Future()
                self._inflight[target] = fut
                rng = self._child_rng()
        if pending is not None:
            ref = pending.result()
            with self._lock:
                self._count(hit=True, t0=t0)
            return ref, True
        try:
            ref = self._build(cp, target, rng)
        except BaseException as exc:
            with self._lock:
                del self._inflight[target]
            fut.set_exception(exc)
            raise
        with self._lock:
            del self._inflight[target]
            if cp is self.active:
                self.cache.insert(ref, time.perf_counter())
            else:
                self.cache.entries[ref.image_id] = _Entry(ref, time.perf_counter())
                self.cache.retired.add(ref.image_id)
            self._count(hit=False, t0=t0)
            self._prune()
        fut.set_result(ref)
        return ref, False

    def _covering_build(self, want: frozenset[int]) -> Future | None:
        covering = [t for t in self._inflight if want <= t]
        if not covering:
            return None
        return self._inflight[min(covering, key=lambda t: (len(t), sorted(t)))]

    def _build(self, cp: Checkpoint, target: frozenset[int], rng) -> ImageRef:
        t0 = time.perf_counter()
        version = f"{cp.checkpoint_id}/v"
        image = iterate_version(self.kp, cp, target, self.catalog, version, rng)
        data = image.encode(self.kp)
        image_id = hashlib.sha256(data).hexdigest()[:24]
        path = self.storage / f"{image_id}.img"
        path.write_bytes(data)
        ref = ImageRef(image_id, path, image.module_set, cp.checkpoint_id, len(data))
        self._build_times.append(time.perf_counter() - t0)
        return ref

    def _count(self, hit: bool, t0: float) -> None:
        # Called with the lock held so hits + builds == requests at all times.
        self.cache.requests += 1
        if hit:
            self.cache.hits += 1
        else:
            self.cache.builds += 1
        self._served_time += time.perf_counter() - t0

    def _prune(self) -> None:
        if self.max_storage_bytes is None:
            return
        retired = sorted(self.cache.retired, key=lambda i: self.cache.entries[i].last_used)
        while self.storage_bytes() > self.max_storage_bytes and retired:
            image_id = retired.pop(0)
            entry = self.cache.entries.pop(image_id)
            self.cache.retired.discard(image_id)
            entry.ref.path.unlink(missing_ok=True)

    def storage_bytes(self) -> int:
        return self.cache.storage_bytes + sum(self._checkpoint_files.values())

    def load_image(self, ref: ImageRef) -> FirmwareImage:
        return FirmwareImage.load(ref.path, self.kp)

    def metrics(self) -> ServerMetrics:
        with self._lock:
            c = self.cache
            builds = self._build_times
            return ServerMetrics(
                total_time_s=time.perf_counter() - self._started,
                hit_rate_pct=100.0 * c.hits / c.requests if c.requests else 0.0,
                firmware_count=c.builds,
                storage_bytes=self.storage_bytes(),
                preparation_time_s=self._preparation_time,
                first_processing_time_s=self._first_processing,
                subsequent_processing_time_s=sum(builds) / len(builds) if builds else 0.0,
                avg_search_time_ms=(1000.0 * sum(self._search_times) / len(self._search_times)
                                    if self._search_times else 0.0),
                seed=self.seed,
            )


def encode_request(ids: Iterable[int]) -> bytes:
    ids = sorted(set(ids))
    return REQ_MAGIC + struct.pack(">H", len(ids)) + b"".join(struct.pack(">I", i) for i in ids)


def read_request(rfile) -> list[int]:
    rd = Reader(rfile)
    rd.magic(REQ_MAGIC)
    ids = [rd.u32() for _ in range(rd.u16())]
    if ids != sorted(set(ids)):
        raise FormatError("request ids must be sorted and unique")
    return ids


def encode_response(status: int, hit: bool, image: bytes) -> bytes:
    return RSP_MAGIC + struct.pack(">BBQ", status, int(hit), len(image)) + image


def read_response(rfile) -> tuple[int, bool, bytes]:
    rd = Reader(rfile)
    rd.magic(RSP_MAGIC)
    status, hit, n = rd.u8(), rd.u8(), rd.u64()
    return status, bool(hit), rd.take(n)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: DistributionServer = self.server.imup
        try:
            ids = read_request(self.rfile)
        except FormatError as exc:
            log.warning("bad request from %s: %s", self.client_address, exc)
            return
        try:
            ref, hit = server.handle_request(ids)
            payload = encode_response(STATUS_OK, hit, ref.path.read_bytes())
        except RequestTooLarge:
            payload = encode_response(STATUS_OVERSIZE, False, b"")
        except UnknownModule:
            payload = encode_response(STATUS_UNKNOWN, False, b"")
        self.wfile.write(payload)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve(server: DistributionServer, host: str = "127.0.0.1", port: int = 0) -> _TCPServer:
    """Bind a threaded TCP front end; call ``serve_forever`` on the result."""
    tcp = _TCPServer((host, port), _Handler)
    tcp.imup = server
    return tcp


def fetch(address: tuple[str, int], ids: Iterable[int],
          timeout: float = 30.0) -> tuple[int, bool, bytes]:
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall(encode_request(ids))
        with sock.makefile("rb") as rfile:
            return read_response(rfile)
