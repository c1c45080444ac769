"""``zipperchain`` command line: init, write, run, verify, bench, durability.

Exit codes: 0 success, 1 not found or verification failure, 2 usage error,
3 service or storage failure.
"""

from __future__ import annotations

import argparse
import json
import math
import statistics
import sys
import threading
import time
from typing import Optional, Sequence

from . import core
from .config import Config, ConfigError
from .core import Link, TxLink, new_uuid, sha3
from .deploy import Deployment, NotInitialized
from .durability import DurabilityModel, ModelError, appendix_rows
from .erasure import CodingScheme
from .pipeline import QueueFull, make_services, init_chain, run_pipeline, write, zip_step
from .services import Replicator, ServiceError, default_buckets
from .verify import SnapshotIncomplete, Verifier

EXIT_OK, EXIT_NOT_FOUND, EXIT_USAGE, EXIT_SERVICE = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def _emit(args, text: str, record: dict) -> None:
    if args.format == "json":
        print(json.dumps(record, sort_keys=True))
    else:
        print(text)


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    if args.root is not None:
        overrides["root"] = args.root
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "ring_size", None) is not None:
        overrides["ring_size"] = str(args.ring_size)
    return cfg.with_overrides(overrides)


def parse_tx_line(line: str) -> TxLink:
    """``schema type payload``; a payload of the form ``uuidhex:digesthex`` is taken as the data link."""
    parts = line.split(None, 2)
    if len(parts) < 3:
        raise UsageError(f"transaction line needs schema, type and payload: {line!r}")
    schema, tx_type, payload = parts
    try:
        return TxLink(schema, tx_type, Link.from_hex(payload))
    except ValueError:
        return TxLink(schema, tx_type, Link(new_uuid(), sha3(payload.encode())))


# -- commands ----------------------------------------------------------------


def cmd_init(args) -> int:
    dep = Deployment(_config(args))
    genesis, triad = dep.init()
    gl = dep.genesis_link()
    _emit(args, gl.hex(), {"genesis": gl.hex(), "ctr": triad.ctr,
                           "ring_size": dep.config.ring_size})
    return EXIT_OK


def cmd_write(args) -> int:
    dep = Deployment.open(_config(args))
    with open(args.txfile, encoding="utf-8") as fh:
        lines = [l.strip() for l in fh]
    txs = [parse_tx_line(l) for l in lines if l and not l.startswith("#")]
    written = []
    try:
        for tx in txs:
            write(tx, dep.chain)
            written.append(tx)
    finally:
        dep.save()
        for tx in written:
            _emit(args, tx.text(), {"tx": tx.text()})
    return EXIT_OK


def cmd_run(args) -> int:
    dep = Deployment.open(_config(args))
    chain = dep.chain
    try:
        report = run_pipeline(chain, dep.config.batch_interval_ms, max_steps=args.steps,
                              faults=dep.fault_schedule())
        dep.step += report.steps
    finally:
        dep.save()
    for tri in report.triads:
        text = f"triad ctr={tri.ctr} block={tri.block.uuid.hex()} ts={tri.time.ts}"
        _emit(args, text, {"event": "triad", "ctr": tri.ctr, "block": tri.block.uuid.hex(),
                           "ts": tri.time.ts})
    for step in report.stalled:
        _emit(args, f"stalled step={step}", {"event": "stalled", "step": step})
    for step, why in report.aborted:
        _emit(args, f"aborted step={step} {why}", {"event": "aborted", "step": step, "error": why})
    summary = report.summary()
    summary["queued"] = len(chain.queue)
    _emit(args, " ".join(f"{k}={v}" for k, v in summary.items()), {"event": "summary", **summary})
    return EXIT_OK


def cmd_verify(args) -> int:
    dep = Deployment(_config(args))
    try:
        genesis_link = Link.from_hex(args.genesis)
        tx = TxLink.from_text(" ".join(args.tx))
    except ValueError as exc:
        raise UsageError(f"malformed link: {exc}") from None
    rep = dep.replicator
    if len(rep.reachable()) < rep.scheme.threshold:
        raise SnapshotIncomplete("too few buckets reachable")
    try:
        genesis = rep.fetch(genesis_link)
    except ServiceError:
        genesis = None
    if genesis is None or not hasattr(genesis, "prev_time_link"):
        _emit(args, "not found", {"found": False, "reason": "unknown genesis"})
        return EXIT_NOT_FOUND
    verifier = Verifier(genesis, dep.replicator, dep.enclave())
    verifier.refresh()
    cert = verifier.certificate(tx)
    if cert is None:
        _emit(args, "not found", {"found": False})
        return EXIT_NOT_FOUND
    _emit(args, cert.text(), {"found": True, "tx": cert.tx.text(), "chain": cert.genesis_link.hex(),
                              "ts": cert.ts, "height": cert.height, "rank": cert.rank})
    return EXIT_OK


def run_bench(cfg: Config, users: int, duration_s: float, rate: float) -> dict:
    """Synthetic producers against an in-memory deployment.

    Finality is measured from enqueue to the replication of the sequence
    attestation of the transaction's triad.
    """
    if cfg.seed is not None:
        core.seed(cfg.seed)
    replicator = Replicator(default_buckets(cfg.buckets), CodingScheme(cfg.buckets, cfg.parity),
                            cfg.write_quorum, cfg.replicate_ms)
    services = make_services(replicator, ring_size=cfg.ring_size, stamp_ms=cfg.stamp_ms,
                             sequence_ms=cfg.sequence_ms)
    _, _, chain = init_chain(services, queue_bound=cfg.queue_bound, batch_max=cfg.batch_max)
    enqueued: dict = {}
    finality: list = []
    lock = threading.Lock()
    stop = threading.Event()

    def finalized(tri, merkle):
        now = time.monotonic()
        with lock:
            for tx in merkle.leaves:
                finality.append(now - enqueued.pop(tx))

    chain.on_finalize = finalized

    def producer(u: int):
        period = 1.0 / rate
        nxt = time.monotonic()
        i = 0
        while not stop.is_set():
            tx = TxLink("bench", f"user{u}", Link(sha3(f"{u}:{i}".encode())[:16], sha3(f"{u}:{i}".encode())))
            with lock:
                enqueued[tx] = time.monotonic()
            try:
                write(tx, chain)
            except QueueFull:
                with lock:
                    enqueued.pop(tx, None)
            i += 1
            nxt += period
            delay = nxt - time.monotonic()
            if delay > 0:
                stop.wait(delay)

    threads = [threading.Thread(target=producer, args=(u,), daemon=True) for u in range(users)]
    started = time.monotonic()
    for t in threads:
        t.start()
    steps = 0
    while time.monotonic() - started < duration_s:
        if zip_step(chain) is None:
            time.sleep(0.001)
        steps += 1
        if cfg.batch_interval_ms:
            time.sleep(cfg.batch_interval_ms / 1000)
    stop.set()
    for t in threads:
        t.join()
    while len(chain.queue) or chain.pending is not None:
        if zip_step(chain) is None and chain.pending is not None:
            break
    elapsed = time.monotonic() - started
    ms = sorted(x * 1000 for x in finality)
    return {
        "users": users,
        "duration_s": round(elapsed, 3),
        "txs": len(ms),
        "mean_finality_ms": round(statistics.fmean(ms), 3) if ms else None,
        "p90_finality_ms": round(ms[max(0, math.ceil(0.9 * len(ms)) - 1)], 3) if ms else None,
        "tps": round(len(ms) / elapsed, 3),
        "steps": steps,
    }


def cmd_bench(args) -> int:
    cfg = _config(args)
    overrides = {}
    for flag, key in (("stamp_ms", "latency.stamp_ms"), ("replicate_ms", "latency.replicate_ms"),
                      ("sequence_ms", "latency.sequence_ms")):
        if getattr(args, flag) is not None:
            overrides[key] = str(getattr(args, flag))
    cfg = cfg.with_overrides(overrides)
    report = run_bench(cfg, args.users, args.duration, args.rate)
    text = "\n".join(f"{k}: {v}" for k, v in report.items())
    _emit(args, text, report)
    return EXIT_OK


def _fmt(v: float) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_durability(args) -> int:
    try:
        model = DurabilityModel.load(args.model)
    except ModelError as exc:
        raise UsageError(str(exc)) from None
    rows = appendix_rows(model)
    if args.format == "json":
        for name, value, nines in rows:
            print(json.dumps({"name": name, "value": value,
                              "nines": None if nines is None else nines}, sort_keys=True))
        return EXIT_OK
    width = max(len(r[0]) for r in rows)
    print(f"{'quantity'.ljust(width)}  {'value':>14}  nines")
    for name, value, nines in rows:
        print(f"{name.ljust(width)}  {_fmt(value):>14}  {'' if nines is None else nines}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--root", help="deployment directory (overrides the config)")
    common.add_argument("--seed", type=int, help="seed for identifiers and keys")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--format", choices=("text", "json"), default="text")

    parser = argparse.ArgumentParser(prog="zipperchain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="create a chain and print its genesis link")
    p.add_argument("--ring-size", type=int)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("write", parents=[common], help="enqueue transactions from a file")
    p.add_argument("txfile")
    p.set_defaults(func=cmd_write)

    p = sub.add_parser("run", parents=[common], help="drive zip steps")
    p.add_argument("--steps", type=int, help="number of steps (default: until idle)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", parents=[common], help="certificate for a transaction")
    p.add_argument("genesis", help="genesis link, uuidhex:digesthex")
    p.add_argument("tx", nargs="+", help="schema type uuidhex:digesthex")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", parents=[common], help="finality and throughput with synthetic users")
    p.add_argument("--users", type=int, default=4)
    p.add_argument("--duration", type=float, default=3.0, help="seconds")
    p.add_argument("--rate", type=float, default=50.0, help="transactions per second per user")
    p.add_argument("--stamp-ms", type=float)
    p.add_argument("--replicate-ms", type=float)
    p.add_argument("--sequence-ms", type=float)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("durability", parents=[common], help="durability and availability table")
    p.add_argument("model", help="model file with key=value entries")
    p.set_defaults(func=cmd_durability)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, OSError) as exc:
        if isinstance(exc, OSError) and not isinstance(exc, FileNotFoundError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_SERVICE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except QueueFull as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (ServiceError, NotInitialized, SnapshotIncomplete) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SERVICE


if __name__ == "__main__":
    sys.exit(main())
