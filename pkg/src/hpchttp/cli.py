"""``hpchttp`` command line: object operations, vectored reads, benchmarks, test server.

Exit status: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading

from .bench import MODES, AccessTrace, generate_trace, run_benchmark
from .client import Client
from .config import load_config
from .errors import ConfigInvalid, HttpIOError, InvalidParams
from .metalink import discover_metalink, multistream_download
from .testbed.faults import LATENCY_PRESETS_MS, FaultPlan, LatencyModel
from .testbed.server import METRICS_PATH, ReplicaRoot, serve

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("hpchttp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on its own; keep that but let tests call main() freely
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _host_port(value):
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}")
    return host or "127.0.0.1", int(port)


def _replicas(value):
    out = []
    for i, item in enumerate(filter(None, value.split(","))):
        name, sep, directory = item.partition(":")
        if not sep or not name or not directory:
            raise argparse.ArgumentTypeError(f"expected NAME:DIR, got {item!r}")
        out.append(ReplicaRoot(name, directory, i + 1))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hpchttp", description="High-performance HTTP/1.1 data access toolkit.")
    p.add_argument("--config", help="key=value config file (environment overrides it)")
    p.add_argument("--stats", action="store_true", help="print pool statistics on exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("get", help="download an object")
    s.add_argument("uri")
    s.add_argument("-o", "--output", help="output file (default: stdout)")

    s = sub.add_parser("put", help="upload a file")
    s.add_argument("file")
    s.add_argument("uri")

    s = sub.add_parser("rm", help="delete an object")
    s.add_argument("uri")

    s = sub.add_parser("info", help="show object metadata")
    s.add_argument("uri")

    s = sub.add_parser("vecread", help="read the fragments of a trace in one vectored call")
    s.add_argument("uri")
    s.add_argument("--trace", required=True)
    s.add_argument("--out", required=True, help="directory receiving one file per fragment")

    s = sub.add_parser("dl-multi", help="multi-stream download from metalink replicas")
    s.add_argument("uri")
    s.add_argument("--streams", type=int, default=None)
    s.add_argument("-o", "--output", help="output file (default: basename of the URI)")

    s = sub.add_parser("bench", help="run a trace benchmark")
    s.add_argument("--trace", required=True)
    s.add_argument("--mode", required=True, choices=MODES)
    s.add_argument("--repeat", type=int, default=5)
    s.add_argument("--report", required=True, help="key=value report output path")
    s.add_argument("--csv", help="per-repetition CSV output path")
    s.add_argument("--uri", help="object URI (default: the trace's object_uri)")
    s.add_argument("--metrics", help=f"testbed metrics URL, e.g. http://HOST:PORT{METRICS_PATH}")

    s = sub.add_parser("gen-trace", help="generate a random access trace")
    s.add_argument("--object-uri", default="")
    s.add_argument("--object-size", type=int, required=True)
    s.add_argument("--count", type=int, default=1200)
    s.add_argument("--min", type=int, default=100)
    s.add_argument("--max", type=int, default=1000)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("-o", "--output", help="trace file (default: stdout)")

    s = sub.add_parser("testbed", help="run the test server in the foreground")
    s.add_argument("--corpus", required=True)
    s.add_argument("--replicas", type=_replicas, default=[])
    s.add_argument("--latency-ms", type=float, default=None)
    s.add_argument("--preset", choices=sorted(LATENCY_PRESETS_MS))
    s.add_argument("--jitter-ms", type=float, default=0.0)
    s.add_argument("--mb-delay-ms", type=float, default=0.0, help="extra delay per MiB of body")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--faults", help="fault plan file")
    s.add_argument("--bind", type=_host_port, default=("127.0.0.1", 8080))
    return p


def _cmd_get(client, args, out):
    if args.output:
        with open(args.output, "wb") as fh:
            client.download(args.uri, fh)
    else:
        client.download(args.uri, out.buffer if hasattr(out, "buffer") else out)


def _cmd_put(client, args, out):
    try:
        fh = open(args.file, "rb")
    except OSError as exc:
        raise HttpIOError(f"cannot read {args.file}: {exc}") from None
    with fh:
        body = fh.read()
    info = client.put(args.uri, body)
    print(f"status={info.status}", file=out)
    print(f"size={info.size}", file=out)


def _cmd_rm(client, args, out):
    if not client.remove(args.uri):
        print(f"{args.uri}: already absent", file=out)


def _cmd_info(client, args, out):
    info = client.stat(args.uri)
    print(f"uri={info.uri}", file=out)
    print(f"size={'unknown' if info.size is None else info.size}", file=out)
    print(f"supports_ranges={str(info.supports_ranges).lower()}", file=out)
    print(f"etag={info.etag or ''}", file=out)
    print(f"last_modified={info.last_modified.isoformat() if info.last_modified else ''}", file=out)


def _cmd_vecread(client, args, out):
    trace = AccessTrace.load(args.trace)
    os.makedirs(args.out, exist_ok=True)
    outcomes = client.vector_read(args.uri, trace.fragments())
    failed = 0
    for o in outcomes:
        if not o.ok:
            failed += 1
            log.error("fragment %s: %s", o.fragment.id, o.error)
            continue
        with open(os.path.join(args.out, f"{o.fragment.id}.bin"), "wb") as fh:
            fh.write(o.fragment.destination)
    print(f"fragments={len(outcomes)}", file=out)
    print(f"failed={failed}", file=out)
    print(f"requests={client.requests_issued}", file=out)
    if failed:
        raise HttpIOError(f"{failed} fragment(s) failed")


def _cmd_dl_multi(client, args, out):
    cfg = client.config
    streams = args.streams or cfg.metalink_streams
    if streams < 1:
        raise UsageError("--streams must be >= 1")
    doc = discover_metalink(client.pool, args.uri, **client._kw())
    if doc is None:
        raise HttpIOError(f"no metalink found for {args.uri}")
    target = args.output or os.path.basename(args.uri.rstrip("/")) or "download.bin"
    with open(target, "w+b") as fh:
        report = multistream_download(client.pool, doc, fh, streams=streams,
                                      chunk_size=cfg.metalink_chunk_size,
                                      limits=cfg.limits, **client._kw())
    print(f"output={target}", file=out)
    print(f"bytes={report.bytes}", file=out)
    print(f"checksum_verified={str(report.checksum_verified).lower()}", file=out)
    print(f"migrated_chunks={report.migrated_chunks}", file=out)
    for url, n in sorted(report.chunks_per_replica.items()):
        print(f"chunks.{url}={n}", file=out)
    for w in report.warnings:
        print(f"warning={w}", file=out)


def _cmd_bench(args, config, out):
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    trace = AccessTrace.load(args.trace)
    report = run_benchmark(trace, args.mode, config, args.metrics, args.repeat, uri=args.uri)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report.as_text())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.as_csv())
    out.write(report.as_text())
    if not report.valid:
        raise HttpIOError(report.error or "benchmark run invalid")


def _cmd_gen_trace(args, out):
    trace = generate_trace(args.object_size, args.count, args.min, args.max, args.seed, args.object_uri)
    if args.output:
        trace.save(args.output)
    else:
        out.write(trace.dumps())


def _cmd_testbed(args, out, stop_event=None):
    if args.latency_ms is not None:
        per_request = args.latency_ms / 1000
    elif args.preset:
        per_request = LATENCY_PRESETS_MS[args.preset] / 1000
    else:
        per_request = 0.0
    latency = LatencyModel(per_request, args.mb_delay_ms / 1000, args.jitter_ms / 1000, args.seed)
    try:
        faults = FaultPlan.load(args.faults)
    except OSError as exc:
        raise HttpIOError(f"cannot read fault file: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"fault file: {exc}") from None
    handle = serve(args.corpus, args.replicas, latency, faults, args.bind)
    print(f"listening={handle.url}", file=out)
    print(f"metrics={handle.url}{METRICS_PATH}", file=out)
    out.flush()
    stop_event = stop_event or threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop_event.set())
    try:
        stop_event.wait()
    finally:
        handle.stop()


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-trace":
            _cmd_gen_trace(args, out)
            return EXIT_OK
        if args.command == "testbed":
            _cmd_testbed(args, out)
            return EXIT_OK
        config = load_config(args.config)
        if args.command == "bench":
            _cmd_bench(args, config, out)
            return EXIT_OK
        with Client(config) as client:
            try:
                handler = globals()["_cmd_" + args.command.replace("-", "_")]
                handler(client, args, out)
            finally:
                if args.stats:
                    sys.stderr.write(client.pool.stats().as_text())
                    sys.stderr.write(f"client.requests_issued={client.requests_issued}\n")
        return EXIT_OK
    except (UsageError, InvalidParams, ConfigInvalid) as exc:
        print(f"hpchttp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HttpIOError, OSError) as exc:
        print(f"hpchttp: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
