"""Command-line entry point: ``imup <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import (
    AttackCapExceeded,
    AttackReport,
    AttackScenario,
    WorkloadSpec,
    build_bench_catalog,
    run_attack_campaign,
    run_server_bench,
    write_report,
)
from .chameleon import keygen, load_key, save_key
from .codec import FormatError
from .device import DeviceState, factory_init, verify_stream
from .firmware import ImageKind
from .package import CryptoPool, ModuleCatalog, gen_crypto_modules
from .server import STATUS_OK, DistributionServer, ServerMetrics, fetch, serve


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _ids(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_keygen(a) -> int:
    kp = keygen(a.bits, a.seed)
    save_key(a.out, kp)
    if a.public_out:
        save_key(a.public_out, kp, include_secret=False)
    print(f"wrote {a.bits}-bit key to {a.out}")
    return 0


def cmd_pool(a) -> int:
    kp = load_key(a.key)
    pool = CryptoPool(gen_crypto_modules(kp, a.count, a.pow_difficulty, a.seed), a.pow_difficulty)
    pool.save(a.out, kp)
    print(f"wrote {a.count} crypto modules (d={a.pow_difficulty}) to {a.out}")
    return 0


def cmd_catalog(a) -> int:
    build_bench_catalog(a.modules, a.seed).save(a.out)
    print(f"wrote {a.modules}-module catalog to {a.out}")
    return 0


def cmd_serve(a) -> int:
    kp = load_key(a.key)
    catalog = ModuleCatalog.load(a.catalog)
    pool = CryptoPool.load(a.pool, kp)
    if pool.difficulty != a.pow_difficulty:
        print(f"pool was built at difficulty {pool.difficulty}, not {a.pow_difficulty}",
              file=sys.stderr)
        return 2
    server = DistributionServer(kp, catalog, pool, a.storage, chain_length=a.chain_length,
                                seed=a.seed, max_storage_bytes=a.max_storage)
    cp = server.initialize()
    if a.state_out:
        factory_init(cp.chain, a.pow_difficulty).save(a.state_out, kp)
    host, port = _addr(a.listen)
    tcp = serve(server, host, port)
    print(f"serving checkpoint {cp.checkpoint_id} on {tcp.server_address[0]}:{tcp.server_address[1]}",
          flush=True)
    try:
        tcp.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        tcp.server_close()
    return 0


def cmd_fetch(a) -> int:
    status, hit, image = fetch(_addr(a.connect), _ids(a.modules))
    if status != STATUS_OK:
        print(f"server refused request (status {status})", file=sys.stderr)
        return 1
    Path(a.out).write_bytes(image)
    print(f"{'hit' if hit else 'built'}: {len(image)} bytes -> {a.out}")
    return 0


def cmd_verify(a) -> int:
    kp = load_key(a.key)
    state = DeviceState.load(a.state, kp)
    with open(a.image, "rb") as fh:
        head = fh.read(9)
        fh.seek(0)
        if a.branch and len(head) == 9 and head[8] != ImageKind[a.branch.upper()]:
            print("image kind does not match the requested branch", file=sys.stderr)
            return 1
        ok, new_state = verify_stream(kp, state, fh)
    if ok and new_state != state:
        new_state.save(a.state, kp)
        print(f"accepted; chain rotated to {new_state.stored_chain.checkpoint_id}")
    else:
        print("accepted" if ok else "rejected")
    return 0 if ok else 1


def cmd_bench(a) -> int:
    spec = WorkloadSpec(a.modules, a.requests, a.zipf, a.min_per_request,
                        a.max_per_request, a.seed)
    m = run_server_bench(spec, a.chain_length, a.pow_difficulty, key_bits=a.key_bits)
    write_report(a.out, [m], ServerMetrics, append=a.append)
    print(f"seed={m.seed} hit_rate={m.hit_rate_pct:.2f}% firmware={m.firmware_count} "
          f"storage={m.storage_bytes}B total={m.total_time_s:.2f}s")
    return 0


def cmd_attack(a) -> int:
    sc = AttackScenario(a.key_bits, a.exposed_frac, a.pow_difficulty, a.speedup,
                        a.runs, a.chain_length, a.seed)
    try:
        reports = run_attack_campaign(sc)
    except AttackCapExceeded as exc:
        print(str(exc), file=sys.stderr)
        return 2
    write_report(a.out, reports, AttackReport, append=a.append)
    n = len(reports)
    print(f"runs={n} unknown_bits={sc.unknown_bits} d={sc.pow_difficulty} "
          f"mean_trials={sum(r.measured_attacker_trials for r in reports) / n:.1f} "
          f"mean_A_C={sum(r.measured_attacker_time for r in reports) / n:.4f}s "
          f"mean_D_c={sum(r.defender_build_time for r in reports) / n:.4f}s "
          f"extrapolated(model)={sum(r.extrapolated_time for r in reports) / n:.3g}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imup", description="Modular firmware update toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a chameleon-hash key pair")
    p.add_argument("--bits", type=int, default=1024)
    p.add_argument("--seed", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--public-out")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("pool", help="generate PoW-sealed crypto modules")
    p.add_argument("--key", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--pow-difficulty", type=int, default=0)
    p.add_argument("--seed", default="pool")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("catalog", help="write a synthetic module catalog")
    p.add_argument("--modules", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_catalog)

    p = sub.add_parser("serve", help="run the distribution server")
    p.add_argument("--key", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--storage", required=True)
    p.add_argument("--listen", default="127.0.0.1:7070")
    p.add_argument("--chain-length", type=int, default=7)
    p.add_argument("--pow-difficulty", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-storage", type=int)
    p.add_argument("--state-out", help="also write a factory device state here")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("fetch", help="request an image from a server")
    p.add_argument("--connect", required=True)
    p.add_argument("--modules", required=True, help="comma-separated module ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("verify", help="verify an image on a device state")
    p.add_argument("--key", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--branch", choices=["functional", "security"])
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="server throughput benchmark")
    p.add_argument("--modules", type=int, default=200)
    p.add_argument("--requests", type=int, default=2000)
    p.add_argument("--chain-length", type=int, default=7)
    p.add_argument("--pow-difficulty", type=int, default=0)
    p.add_argument("--zipf", type=float, default=1.0)
    p.add_argument("--min-per-request", type=int, default=1)
    p.add_argument("--max-per-request", type=int, default=5)
    p.add_argument("--key-bits", type=int, default=64)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--append", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attack-sim", help="attacker versus defender cost study")
    p.add_argument("--key-bits", type=int, default=64)
    p.add_argument("--exposed-frac", type=float, default=0.75)
    p.add_argument("--pow-difficulty", type=int, default=2)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--chain-length", type=int, default=2)
    p.add_argument("--speedup", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--append", action="store_true")
    p.set_defaults(func=cmd_attack)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
