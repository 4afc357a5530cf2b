"""Desk-scale experiments: Zipf request workloads against the distribution
server, the attacker-versus-defender cost study, and CSV reporting.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import random
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chameleon import ChameleonKeyPair, chash, collision_exponent, hash_to_exponent, keygen
from .device import factory_init, functional_verify, security_verify
from .firmware import (
    SALT_LEN,
    FilledBlock,
    FirmwareImage,
    ImageKind,
    aggregate_block_info,
    binding,
    init_firmware,
)
from .package import (
    BLOCK_TAG,
    CryptoPool,
    ModuleCatalog,
    ModuleKind,
    default_workers,
    gen_crypto_modules,
)
from .pow import PowChallenge, check_nonce, solve
from .server import DistributionServer, ServerMetrics

# The desk-scale cap on brute-forced trapdoor bits.
EMPIRICAL_BIT_CAP = 24


@dataclass(frozen=True)
class WorkloadSpec:
    num_modules: int = 200
    num_requests: int = 2000
    zipf_exponent: float = 1.0
    min_per_request: int = 1
    max_per_request: int = 5
    seed: int = 1

    def __post_init__(self):
        if self.zipf_exponent <= 0:
            raise ValueError("zipf exponent must be positive")
        if not 1 <= self.min_per_request <= self.max_per_request <= self.num_modules:
            raise ValueError("need 1 <= min <= max <= num_modules modules per request")


def zipf_weights(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=float) ** -s
    return w / w.sum()


class _RankSampler:
    """Draws popularity ranks (0 = most popular) with P(rank k) ~ (k+1)^-s."""

    def __init__(self, n: int, s: float, rng: np.random.Generator):
        self._cdf = np.cumsum(zipf_weights(n, s))
        self._cdf[-1] = 1.0
        self._rng = rng
        self._buf: list[int] = []

    def __call__(self) -> int:
        if not self._buf:
            self._buf = np.searchsorted(self._cdf, self._rng.random(256), side="right").tolist()
            self._buf.reverse()
        return self._buf.pop()


def zipf_draws(n: int, s: float, size: int, seed: int) -> np.ndarray:
    cdf = np.cumsum(zipf_weights(n, s))
    cdf[-1] = 1.0
    return np.searchsorted(cdf, np.random.default_rng(seed).random(size), side="right")


def gen_workload(spec: WorkloadSpec, catalog: ModuleCatalog | None = None) -> list[frozenset[int]]:
    """Requests as module-id sets.

    Each request picks a size uniformly from ``[min, max]`` and draws modules
    by popularity until that many distinct ids are present. With a catalog the
    size counts the dependency closure, and a draw whose closure would
    overshoot is skipped.
    """
    rng = np.random.default_rng(spec.seed)
    draw = _RankSampler(spec.num_modules, spec.zipf_exponent, rng)
    if catalog is not None:
        ranking = catalog.popularity_rank[: spec.num_modules]
        if len(ranking) < spec.num_modules:
            raise ValueError("catalog smaller than the workload's module count")
    else:
        ranking = list(range(1, spec.num_modules + 1))
    closures: dict[int, frozenset[int]] = {}
    out = []
    for _ in range(spec.num_requests):
        k = int(rng.integers(spec.min_per_request, spec.max_per_request + 1))
        req: set[int] = set()
        for _attempt in range(10_000):
            if len(req) >= k:
                break
            mid = ranking[draw()]
            if catalog is None:
                req.add(mid)
                continue
            if mid not in closures:
                closures[mid] = catalog.closure([mid])
            grown = req | closures[mid]
            if len(grown) <= k:
                req = grown
        out.append(frozenset(req))
    return out


def build_bench_catalog(num_modules: int, seed: int = 0, dep_fraction: float = 0.1,
                        payload_size: int = 128) -> ModuleCatalog:
    """Synthetic catalog; module ``i`` is the ``i``-th most popular.

    About ``dep_fraction`` of modules depend on one more popular module.
    """
    rng = random.Random(f"imup-catalog/{seed}")
    cat = ModuleCatalog()
    for i in range(1, num_modules + 1):
        deps = [rng.randrange(1, i)] if i > 1 and rng.random() < dep_fraction else []
        kind = ModuleKind.SCRIPT if i % 2 else ModuleKind.BINARY
        if kind is ModuleKind.SCRIPT:
            payload = f"#!/bin/sh\n# module {i}\n".encode().ljust(payload_size, b"#")
        else:
            payload = rng.randbytes(payload_size)
        cat.package(f"mod{i:04d}", kind, payload, [f"install mod{i:04d}"], deps)
    return cat


def run_server_bench(
    spec: WorkloadSpec,
    chain_length: int = 7,
    pow_difficulty: int = 0,
    key_bits: int = 64,
    storage_dir: str | Path | None = None,
    keypair: ChameleonKeyPair | None = None,
) -> ServerMetrics:
    kp = keypair or keygen(key_bits, f"bench/{spec.seed}")
    catalog = build_bench_catalog(spec.num_modules, spec.seed)
    requests = gen_workload(spec, catalog)
    with tempfile.TemporaryDirectory(prefix="imup-bench-") as tmp:
        t0 = time.perf_counter()
        mods = gen_crypto_modules(kp, chain_length + 1, pow_difficulty, f"pool/{spec.seed}")
        prep = time.perf_counter() - t0
        pool = CryptoPool(mods, pow_difficulty)
        server = DistributionServer(kp, catalog, pool, storage_dir or tmp,
                                    chain_length=chain_length, seed=spec.seed)
        server.initialize(preparation_time_s=prep)
        for req in requests:
            server.handle_request(req)
        return server.metrics()


@dataclass(frozen=True)
class AttackScenario:
    """``key_bits`` is the trapdoor size; the high ``exposed_fraction`` of it leaks."""

    key_bits: int = 64
    exposed_fraction: float = 0.75
    pow_difficulty: int = 2
    attacker_speedup: float = 1000.0
    trials: int = 1
    chain_length: int = 2
    seed: int = 0

    @property
    def unknown_bits(self) -> int:
        return round((1.0 - self.exposed_fraction) * self.key_bits)

    def check(self) -> None:
        if not 0 <= self.exposed_fraction < 1:
            raise ValueError("exposed fraction must lie in [0, 1)")
        if self.unknown_bits > EMPIRICAL_BIT_CAP:
            raise AttackCapExceeded(
                f"{self.unknown_bits} unknown bits exceeds the empirical cap of "
                f"{EMPIRICAL_BIT_CAP}; use extrapolate_attack_time for an analytic estimate")


class AttackCapExceeded(ValueError):
    pass


@dataclass
class AttackReport:
    measured_attacker_trials: int = 0
    measured_attacker_time: float = 0.0
    defender_build_time: float = 0.0
    device_verify_time: float = 0.0
    extrapolated_time: float = 0.0
    candidate_search_time: float = 0.0
    forgery_pow_time: float = 0.0
    unknown_bits: int = 0
    pow_difficulty: int = 0
    seed: int = 0


def extrapolate_attack_time(per_trial_s: float, unknown_bits: int, d: int,
                            speedup: float) -> float:
    """Model, not measurement: per-trial time x 2^u x 16^d / speedup."""
    return per_trial_s * 2.0 ** unknown_bits * 16.0 ** d / speedup


def _forge_image(pk: ChameleonKeyPair, length: int, d: int, version_id: str,
                 rng: random.Random) -> FirmwareImage:
    """Security image an outsider can build without the trapdoor.

    Every block is self-consistent and PoW-sealed; only the proof is missing.
    """
    def sealed(content: bytes, mid=None) -> FilledBlock:
        r = rng.randrange(pk.q)
        digest = chash(pk, content + BLOCK_TAG, r)
        sol = solve(pk, PowChallenge(digest.encode(), d))
        return FilledBlock(content, r, sol.nonce, digest, mid)

    blocks = tuple(sealed(b"\x7fEVIL" + rng.randbytes(27)) for _ in range(length))
    # The commitment block's content binds its own nonce, so the nonce is
    # fixed first and r is searched until that nonce meets the difficulty:
    # about 16^d hashes, the same order as an ordinary PoW.
    nonce = 0
    content = rng.randbytes(SALT_LEN) + binding(pk, ImageKind.SECURITY, version_id,
                                                 blocks, nonce)
    while True:
        r = rng.randrange(pk.q)
        digest = chash(pk, content + BLOCK_TAG, r)
        if check_nonce(pk, PowChallenge(digest.encode(), d), nonce):
            break
    cblock = FilledBlock(content, r, nonce, digest, None)
    return FirmwareImage(version_id, ImageKind.SECURITY, blocks, cblock,
                         aggregate_block_info(blocks), cblock.r, proof=0)


def run_attack_sim(scenario: AttackScenario, seed: int | None = None) -> AttackReport:
    """One end-to-end attack: forge a checkpoint image, then brute-force the
    unknown low trapdoor bits, submitting each candidate proof to the device.

    Success is whatever the device accepts; the secret is never compared.
    """
    scenario.check()
    seed = scenario.seed if seed is None else seed
    d, u, length = scenario.pow_difficulty, scenario.unknown_bits, scenario.chain_length
    kp = keygen(scenario.key_bits + 8, f"attack/{seed}", q_bits=scenario.key_bits)
    pk = kp.public()
    rng = random.Random(f"imup-attack/{seed}")

    # Defender: one legitimate build, crypto modules included.
    t0 = time.perf_counter()
    pool = CryptoPool(gen_crypto_modules(kp, length + 1, d, f"defender/{seed}", workers=1), d)
    cp = init_firmware(kp, pool, [], "cp0", rng, chain_length=length)
    defender = time.perf_counter() - t0

    state = factory_init(cp.chain, d)
    reps = 20
    t0 = time.perf_counter()
    for _ in range(reps):
        assert functional_verify(pk, state, cp.image)
    verify_time = (time.perf_counter() - t0) / reps

    # Attacker: pays the PoW once for the forged image ...
    t0 = time.perf_counter()
    forged = _forge_image(pk, length, d, "cp1", rng)
    pow_time = time.perf_counter() - t0

    # ... then one device check per trapdoor candidate.
    known_high = (kp.x >> u) << u
    stored = state.stored_chain
    e_old = hash_to_exponent(pk, stored.encoded_h())
    e_new = hash_to_exponent(pk, forged.chain().encoded_h())
    trials = 0
    accepted = False
    t0 = time.perf_counter()
    for low in range(1 << u):
        guess = known_high | low
        if not 1 <= guess < pk.q:
            continue
        trials += 1
        proof = collision_exponent(replace(pk, x=guess), e_old, stored.commitment, e_new)
        accepted, _ = security_verify(pk, state, replace(forged, proof=proof))
        if accepted:
            break
    search_time = time.perf_counter() - t0
    if not accepted:
        raise RuntimeError("candidate space exhausted without acceptance")
    per_trial = search_time / trials
    return AttackReport(
        measured_attacker_trials=trials,
        measured_attacker_time=pow_time + search_time,
        defender_build_time=defender,
        device_verify_time=verify_time,
        extrapolated_time=extrapolate_attack_time(per_trial, u, d, scenario.attacker_speedup),
        candidate_search_time=search_time,
        forgery_pow_time=pow_time,
        unknown_bits=u,
        pow_difficulty=d,
        seed=seed,
    )


def _attack_job(args) -> AttackReport:
    return run_attack_sim(*args)


def run_attack_campaign(scenario: AttackScenario, workers: int | None = None) -> list[AttackReport]:
    """``scenario.trials`` independent runs with seeds ``seed, seed+1, ...``."""
    scenario.check()
    jobs = [(scenario, scenario.seed + i) for i in range(scenario.trials)]
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            return list(ex.map(_attack_job, jobs))
    return [_attack_job(j) for j in jobs]


def _fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def write_report(path: str | Path, rows: Sequence, cls: type | None = None,
                 append: bool = False) -> Path:
    """Write dataclass rows as CSV whose columns are the field names in order.

    With ``append`` the existing header must match exactly.
    """
    path = Path(path)
    if cls is None:
        if not rows:
            raise ValueError("cls is required when there are no rows")
        cls = type(rows[0])
    names = _fields(cls)
    exists = append and path.exists() and path.stat().st_size > 0
    if exists:
        with path.open(newline="") as fh:
            header = next(csv.reader(fh), None)
        if header != names:
            raise ValueError(f"schema mismatch: file has {header}, rows have {names}")
    with path.open("a" if exists else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(names)
        for row in rows:
            if type(row) is not cls:
                raise TypeError(f"expected {cls.__name__} rows")
            writer.writerow([_fmt(getattr(row, n)) for n in names])
    return path


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def read_report(path: str | Path, cls: type) -> list:
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(types):
            raise ValueError("CSV columns do not match the report type")
        out = []
        for rec in reader:
            kwargs = {}
            for name, typ in types.items():
                conv = int if typ in (int, "int") else float
                kwargs[name] = conv(rec[name])
            out.append(cls(**kwargs))
    return out


def summarize(values: Iterable[float]) -> tuple[float, float]:
    vals = list(values)
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / max(1, len(vals) - 1)
    return mean, math.sqrt(var)
