"""Operator command line: serve, scenario, queue-experiments, alpha-eq, bench, keygen."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import random
import secrets
import signal
import sys
import time
from dataclasses import dataclass

from .bucketing import BucketConfig
from .dpf import DomainPoint, PrgCounter, serialized_key_length
from .errors import NonConvergenceError, PsiwcaError
from .group import Group
from .psi import WeightedToken, client_gen_query, server_eval
from .queueing import ScenarioParams, alpha_eq, run_grid
from .service import (
    FssServer,
    KeyServer,
    ServerConfig,
    ServiceClient,
    VerificationServer,
    FrameService,
    send_frame,
)
from .tracing import ScenarioRunner, parse_scenario

CSV_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExperimentSpec:
    """A queue-experiment run: scenario grid plus schedule and output."""

    points: tuple
    days: int
    warmup: int | None
    replications: int
    master_seed: int
    out: str
    order: str = "fifo"

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if self.days > 0 and not self.points:
            raise ValueError("experiment grid is empty")

QUEUE_CSV_COLUMNS = [
    "schema_version", "alpha", "b", "c", "rerandomize", "n", "days", "warmup",
    "replications", "status", "sim_mean", "sim_ci95", "sim_max",
    "sim_daily_max_mean", "stash_mean", "theory_mean", "bound_mean", "bound_valid",
]

ALPHA_EQ_CSV_COLUMNS = ["schema_version", "b", "alpha_eq", "status"]

# Baseline operating point: 14-day window, 74-bit truncated tokens,
# 16-bit integer weights, 80 client tokens per day.
DEFAULT_T = 14
DEFAULT_DOMAIN_BITS = 74
DEFAULT_MODULI = (1 << 16,)
DEFAULT_N_CLIENT = 80

TABLE_GRID = ((0.313, 2), (0.417, 3))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PsiwcaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psiwca", description=__doc__)
    sub = p.add_subparsers(required=True)

    s = sub.add_parser("serve", help="run an FSS / verification / key server from a config file")
    s.add_argument("--config", required=True, help="JSON config; 'service' selects fss|verify|key")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("scenario", help="run a scripted contact-tracing scenario")
    s.add_argument("--file", required=True)
    s.add_argument("--transport", choices=("inprocess", "socket"), default="inprocess")
    s.add_argument("--domain-bits", type=int, default=DEFAULT_DOMAIN_BITS)
    s.add_argument("--T", type=int, default=DEFAULT_T)
    s.add_argument("--bucket-m", type=int, default=1)
    s.add_argument("--bucket-b", type=int, default=64)
    s.add_argument("--bucket-c", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("queue-experiments", help="Monte Carlo + theory grid, CSV out")
    s.add_argument("--grid", default="0.313:2,0.417:3", help="comma list of alpha:b points")
    s.add_argument("--c", default="1,2", help="comma list of hash-choice counts")
    s.add_argument("--R", choices=("both", "true", "false"), default="both")
    s.add_argument("--n", type=int, default=25000)
    s.add_argument("--days", type=int, default=250, help="total simulated days incl. warmup")
    s.add_argument("--warmup", type=int, default=None, help="default: max(50, 10/alpha)")
    s.add_argument("--replications", type=int, default=10)
    s.add_argument("--seed", type=int, default=20200325)
    s.add_argument("--order", choices=("fifo", "uniform"), default="fifo")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_queue_experiments)

    s = sub.add_parser("alpha-eq", help="crossover search between the two c=1 regimes")
    s.add_argument("--b", default="1..4", help="range like 1..4 or comma list")
    s.add_argument("--tol", type=float, default=1e-7)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_alpha_eq)

    s = sub.add_parser("bench", help="throughput report: evals/sec, expansions, query bytes")
    s.add_argument("--n", type=int, default=DEFAULT_N_CLIENT)
    s.add_argument("--big-n", type=int, default=6_000_000 * 14 // 1000,
                   help="server tokens (default: daily 6e6 x 14 days, scaled down 1000x)")
    s.add_argument("--domain-bits", type=int, default=DEFAULT_DOMAIN_BITS)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("keygen", help="generate deployment key material and sample configs")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--base-port", type=int, default=7700)
    s.set_defaults(func=cmd_keygen)
    return p


# ---------------------------------------------------------------------------


def cmd_serve(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    kind = raw.get("service", "fss")
    if kind == "fss":
        cfg = ServerConfig.from_json_file(args.config)
        server = FssServer(cfg).start()
        print(f"fss server role={cfg.role} listening on {server.address[0]}:{server.address[1]}")
        _wait_forever(server)
        return 0
    if kind == "verify":
        k2 = bytes.fromhex(raw["k2_hex"])
        vs_key = bytes.fromhex(raw["vs_auth_key_hex"])
        senders = [
            (lambda addr: (lambda fr: send_frame(addr, fr)))((h, int(p)))
            for h, p in (tuple(a.rsplit(":", 1)) for a in raw["fss_addresses"])
        ]
        vs = VerificationServer(k2, vs_key, senders)
        server = FrameService(raw.get("host", "127.0.0.1"), int(raw.get("port", 0)), vs.dispatch).start()
        print(f"verification server listening on {server.address[0]}:{server.address[1]}")
        _wait_forever(server)
        return 0
    if kind == "key":
        ks = KeyServer(
            bytes.fromhex(raw["k1_hex"]), bytes.fromhex(raw["k2_hex"]),
            bytes.fromhex(raw["enrollment_key_hex"]),
        )
        server = FrameService(raw.get("host", "127.0.0.1"), int(raw.get("port", 0)), ks.dispatch).start()
        print(f"key server listening on {server.address[0]}:{server.address[1]}")
        _wait_forever(server)
        return 0
    raise ValueError(f"unknown service kind {kind!r}")


def _wait_forever(server) -> None:
    stop = []
    signal.signal(signal.SIGINT, lambda *a: stop.append(1))
    signal.signal(signal.SIGTERM, lambda *a: stop.append(1))
    try:
        while not stop:
            time.sleep(0.2)
    finally:
        server.stop()


# ---------------------------------------------------------------------------


def build_scenario_fabric(args, use_sockets: bool):
    """Key material plus transports for the scenario runner."""
    k1 = bytes.fromhex("11" * 32)
    k2 = bytes.fromhex("22" * 32)
    vs_key = bytes.fromhex("33" * 32)
    enroll = bytes.fromhex("44" * 32)
    group = Group(DEFAULT_MODULI)
    base = dict(group=group, domain_bits=args.domain_bits, T=args.T,
                blind_seed=bytes.fromhex("55" * 32), vs_auth_key=vs_key)
    ks = KeyServer(k1, k2, enroll)
    servers = []
    if use_sockets:
        srv1 = FssServer(ServerConfig(role=1, port=0, **base)).start()
        srv0 = FssServer(ServerConfig(role=0, port=0, **base)).start()
        servers = [srv0, srv1]
        t0 = lambda fr: send_frame(srv0.address, fr)
        t1 = lambda fr: send_frame(srv1.address, fr)
        for srv in servers:
            ServiceClient(srv.address).health()

        def roll(day: int) -> None:
            for srv in servers:
                ServiceClient(srv.address).roll(day)
    else:
        from .service import ServerState

        s0 = ServerState(ServerConfig(role=0, **base))
        s1 = ServerState(ServerConfig(role=1, **base))
        t0, t1 = s0.handle_frame, s1.handle_frame

        def roll(day: int) -> None:
            s0.epoch_roll(day)
            s1.epoch_roll(day)

    vs = VerificationServer(k2, vs_key, [t0, t1])
    cfg = BucketConfig(args.bucket_m, args.bucket_b, args.bucket_c,
                       hash_seed=bytes.fromhex("66" * 16))
    runner = ScenarioRunner(
        ks, enroll, vs, t0, t1, roll, group=group, domain_bits=args.domain_bits,
        T=args.T, bucket_cfg=cfg, rng_seed=args.seed,
    )
    return runner, servers


def cmd_scenario(args) -> int:
    with open(args.file, "r", encoding="utf-8") as fh:
        records = parse_scenario(fh.read())
    runner, servers = build_scenario_fabric(args, args.transport == "socket")
    try:
        outcomes = runner.run(records)
    finally:
        for srv in servers:
            srv.stop()
    failed = 0
    for o in outcomes:
        status = "OK" if o.ok else "FAIL"
        print(f"TRACE {o.device_id} expected={o.expected} actual={o.actual} {status}")
        failed += 0 if o.ok else 1
    print(f"{len(outcomes) - failed}/{len(outcomes)} traces matched")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------


def parse_grid(grid: str, cs: str, rmode: str, n: int) -> list[ScenarioParams]:
    points = []
    for pair in grid.split(","):
        a, b = pair.split(":")
        for c in (int(x) for x in cs.split(",")):
            for rer in ((True, False) if rmode == "both" else ((rmode == "true"),)):
                points.append(ScenarioParams(float(a), int(b), c, rer, n))
    return points


def _open_out(path: str):
    return io.StringIO() if path == "-" else open(path, "w", newline="", encoding="utf-8")


def _finish_out(fh, path: str) -> None:
    if path == "-":
        sys.stdout.write(fh.getvalue())
    fh.close()


def cmd_queue_experiments(args) -> int:
    spec = ExperimentSpec(
        points=tuple(parse_grid(args.grid, args.c, args.R, args.n)) if args.days > 0 else (),
        days=args.days,
        warmup=args.warmup,
        replications=args.replications,
        master_seed=args.seed,
        out=args.out,
        order=args.order,
    )
    fh = _open_out(spec.out)
    writer = csv.DictWriter(fh, fieldnames=QUEUE_CSV_COLUMNS)
    writer.writeheader()
    if spec.days > 0:
        rows = run_grid(list(spec.points), spec.days, spec.warmup, spec.replications,
                        spec.master_seed, order=spec.order)
        for row in rows:
            row["schema_version"] = CSV_SCHEMA_VERSION
            writer.writerow(row)
    _finish_out(fh, spec.out)
    return 0


def parse_b_spec(spec: str) -> list[int]:
    if ".." in spec:
        lo, hi = spec.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in spec.split(",")]


def cmd_alpha_eq(args) -> int:
    fh = _open_out(args.out)
    writer = csv.DictWriter(fh, fieldnames=ALPHA_EQ_CSV_COLUMNS)
    writer.writeheader()
    for b in parse_b_spec(args.b):
        row = {"schema_version": CSV_SCHEMA_VERSION, "b": b, "alpha_eq": "", "status": "ok"}
        try:
            row["alpha_eq"] = f"{alpha_eq(b, tol=args.tol):.5f}"
        except NonConvergenceError as exc:
            row["status"] = f"no-crossing: {exc}"
        writer.writerow(row)
    _finish_out(fh, args.out)
    return 0


# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    rng = random.Random(args.seed)
    group = Group(DEFAULT_MODULI)
    bits, n, N = args.domain_bits, args.n, args.big_n
    Y = [
        WeightedToken(DomainPoint(rng.getrandbits(bits), bits), group.element(rng.randrange(1 << 16)))
        for _ in range(n)
    ]
    ctr = PrgCounter()

    t0 = time.perf_counter()
    q0, q1 = client_gen_query(Y, secrets.token_bytes(16), counter=ctr)
    t_gen = time.perf_counter() - t0
    gen_expansions = ctr.expansions
    query_bytes = sum(len(k.to_bytes()) for k in q0.keys)

    X = [DomainPoint(rng.getrandbits(bits), bits) for _ in range(N)]
    ctr.reset()
    t0 = time.perf_counter()
    server_eval(q0, X, group.zero(), counter=ctr)
    t_eval = time.perf_counter() - t0
    eval_expansions = ctr.expansions

    target_bits = 128 * bits * n
    print("psiwca bench")
    print(f"  host: {platform.platform()} / {platform.processor() or 'unknown cpu'}")
    print(f"  params: n={n} N={N} domain_bits={bits} group={group.moduli}")
    print(f"  keygen: {t_gen:.3f}s total, {gen_expansions} expansions")
    print(f"  query bytes per server: {query_bytes} (~{target_bits / 8:.0f} target, "
          f"{query_bytes / (target_bits / 8):.2f}x)")
    print(f"  key bytes each: {serialized_key_length(bits, group)}")
    print(f"  server eval: {t_eval:.3f}s, {eval_expansions} expansions "
          f"({eval_expansions / max(t_eval, 1e-9) / 1e6:.1f}M/s), "
          f"{n * N / max(t_eval, 1e-9):.0f} point-evals/s")
    print(f"  answer bytes per server: {group.element_byte_length()}")
    return 0


# ---------------------------------------------------------------------------


def cmd_keygen(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    material = {
        "blind_seed": secrets.token_hex(32),
        "vs_auth_key": secrets.token_hex(32),
        "channel_key": secrets.token_hex(32),
        "k1": secrets.token_hex(32),
        "k2": secrets.token_hex(32),
        "enrollment_key": secrets.token_hex(32),
    }
    for name, hexval in material.items():
        with open(os.path.join(args.out, f"{name}.hex"), "w", encoding="utf-8") as fh:
            fh.write(hexval + "\n")
    port = args.base_port
    fss_common = {
        "T": DEFAULT_T,
        "domain_bits": DEFAULT_DOMAIN_BITS,
        "moduli": list(DEFAULT_MODULI),
        "vs_auth_key_hex": material["vs_auth_key"],
        "blind_seed_path": os.path.join(args.out, "blind_seed.hex"),
        "host": "127.0.0.1",
    }
    cfg0 = {"service": "fss", "role": 0, "port": port,
            "peer_host": "127.0.0.1", "peer_port": port + 1, **fss_common}
    cfg1 = {"service": "fss", "role": 1, "port": port + 1,
            "channel_key_hex": material["channel_key"], **fss_common}
    cfg_vs = {
        "service": "verify", "port": port + 2, "host": "127.0.0.1",
        "k2_hex": material["k2"], "vs_auth_key_hex": material["vs_auth_key"],
        "fss_addresses": [f"127.0.0.1:{port}", f"127.0.0.1:{port + 1}"],
    }
    cfg_key = {
        "service": "key", "port": port + 3, "host": "127.0.0.1",
        "k1_hex": material["k1"], "k2_hex": material["k2"],
        "enrollment_key_hex": material["enrollment_key"],
    }
    for name, cfg in (("fss0", cfg0), ("fss1", cfg1), ("verify", cfg_vs), ("key_server", cfg_key)):
        with open(os.path.join(args.out, f"{name}.json"), "w", encoding="utf-8") as fh:
            json.dump(cfg, fh, indent=2)
    print(f"wrote key material and configs to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
