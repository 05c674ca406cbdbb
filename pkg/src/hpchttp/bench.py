"""Access traces and the fractional-read benchmark harness.

Trace file::

    trace.version=1
    object_uri=http://127.0.0.1:8080/events.bin
    object_size=7000000
    seed=42
    # id offset length
    0 123456 512
    ...

Report file: flat ``key=value`` lines, ``report.version=1`` first. The
optional CSV has one row per repetition with the columns in ``CSV_COLUMNS``.
"""

from __future__ import annotations

import hashlib
import http.client
import io
import logging
import random
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional
from urllib.parse import urlsplit

from .client import Client
from .config import ClientConfig
from .errors import HttpIOError, InvalidParams
from .metalink import discover_metalink, failover_read, multistream_download
from .ranges import ByteRange
from .testbed.server import METRICS_PATH, ServerMetrics
from .vector import FragmentRequest, plan_fragments, vector_read

log = logging.getLogger(__name__)

MODES = ("sequential", "vectored", "failover", "multistream")
TRACE_VERSION = 1
REPORT_VERSION = 1
CSV_COLUMNS = ("repetition", "wall_ms", "requests", "connections", "bytes")


@dataclass
class TraceEntry:
    id: int
    offset: int
    length: int


@dataclass
class AccessTrace:
    object_uri: str
    object_size: int
    seed: Optional[int]
    entries: list = field(default_factory=list)

    def fragments(self) -> list:
        return [FragmentRequest(e.id, ByteRange(e.offset, e.length)) for e in self.entries]

    def dumps(self) -> str:
        head = [f"trace.version={TRACE_VERSION}", f"object_uri={self.object_uri}",
                f"object_size={self.object_size}", f"seed={'' if self.seed is None else self.seed}",
                "# id offset length"]
        body = [f"{e.id} {e.offset} {e.length}" for e in self.entries]
        return "\n".join(head + body) + "\n"

    def save(self, path):
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "AccessTrace":
        header = {}
        entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
                continue
            try:
                fid, off, length = (int(x) for x in line.split())
            except ValueError:
                raise InvalidParams(f"trace line {lineno}: expected 'id offset length'") from None
            entries.append(TraceEntry(fid, off, length))
        if header.get("trace.version") != str(TRACE_VERSION):
            raise InvalidParams(f"unsupported trace version {header.get('trace.version')!r}")
        try:
            size = int(header["object_size"])
        except (KeyError, ValueError):
            raise InvalidParams("trace header lacks a numeric object_size") from None
        seed = header.get("seed") or None
        trace = cls(header.get("object_uri", ""), size, int(seed) if seed else None, entries)
        for e in entries:
            if e.length < 1 or not 0 <= e.offset < size:
                raise InvalidParams(f"trace entry {e.id}: offset {e.offset} outside [0, {size})")
        return trace

    @classmethod
    def load(cls, path) -> "AccessTrace":
        with open(path, encoding="ascii") as fh:
            return cls.loads(fh.read())


def generate_trace(object_size: int, fragment_count: int, min_size: int, max_size: int,
                   seed: int, object_uri: str = "") -> AccessTrace:
    """Uniform random fragments, each lying entirely inside the object."""
    if fragment_count < 1:
        raise InvalidParams("fragment_count must be >= 1")
    if not 1 <= min_size <= max_size:
        raise InvalidParams("need 1 <= min <= max")
    if object_size < max_size:
        raise InvalidParams("object_size must be >= max fragment size")
    rng = random.Random(seed)
    entries = []
    for i in range(fragment_count):
        length = rng.randint(min_size, max_size)
        entries.append(TraceEntry(i, rng.randint(0, object_size - length), length))
    return AccessTrace(object_uri, object_size, seed, entries)


class MetricsProbe:
    """Reads the testbed metrics document over one persistent connection.

    The connection is opened on construction, so its own TCP accept happens
    before the first snapshot and never shows up in a delta.
    """

    def __init__(self, metrics_url: str, timeout: float = 30):
        parts = urlsplit(metrics_url)
        self.path = parts.path or METRICS_PATH
        self.conn = http.client.HTTPConnection(parts.hostname, parts.port or 80, timeout=timeout)
        self.conn.connect()

    def snapshot(self) -> ServerMetrics:
        self.conn.request("GET", self.path)
        resp = self.conn.getresponse()
        body = resp.read()
        if resp.status != 200:
            raise HttpIOError(f"metrics endpoint answered {resp.status}")
        return ServerMetrics.from_text(body.decode("ascii"))

    def close(self):
        self.conn.close()


@dataclass
class Repetition:
    index: int
    wall_ms: float
    requests: int
    connections: int
    bytes: Optional[int]
    server_requests: Optional[int] = None
    server_connections: Optional[int] = None


@dataclass
class BenchReport:
    mode: str
    object_uri: str
    fragments: int
    repetitions: list = field(default_factory=list)
    extra_bytes: int = 0
    coalesced_ranges: int = 0
    batch_count: int = 0
    batch_timings_ms: list = field(default_factory=list)
    fragment_digest: str = ""
    valid: bool = True
    error: str = ""
    config: dict = field(default_factory=dict)

    @property
    def wall_times(self):
        return [r.wall_ms for r in self.repetitions]

    @property
    def requests_issued(self) -> int:
        return sum(r.requests for r in self.repetitions)

    @property
    def tcp_connections(self) -> int:
        return sum(r.connections for r in self.repetitions)

    @property
    def bytes_transferred(self) -> Optional[int]:
        vals = [r.bytes for r in self.repetitions]
        return None if not vals or None in vals else sum(vals)

    @property
    def metrics_agree(self) -> Optional[bool]:
        reps = self.repetitions
        if not reps or any(r.server_requests is None for r in reps):
            return None
        return all(r.requests == r.server_requests and r.connections == r.server_connections
                   for r in reps)

    def as_text(self) -> str:
        walls = self.wall_times
        rows = [
            ("report.version", REPORT_VERSION),
            ("mode", self.mode),
            ("object_uri", self.object_uri),
            ("fragments", self.fragments),
            ("repetitions", len(self.repetitions)),
            ("valid", str(self.valid).lower()),
            ("wall_ms.mean", f"{statistics.fmean(walls):.3f}" if walls else ""),
            ("wall_ms.min", f"{min(walls):.3f}" if walls else ""),
            ("wall_ms.max", f"{max(walls):.3f}" if walls else ""),
            ("requests_issued", self.requests_issued),
            ("tcp_connections", self.tcp_connections),
            ("bytes_transferred", "" if self.bytes_transferred is None else self.bytes_transferred),
            ("extra_bytes", self.extra_bytes),
            ("coalesced_ranges", self.coalesced_ranges),
            ("batch_count", self.batch_count),
            ("batch_ms", ",".join(f"{t:.3f}" for t in self.batch_timings_ms)),
            ("fragment_digest", self.fragment_digest),
            ("metrics_agree", "" if self.metrics_agree is None else str(self.metrics_agree).lower()),
        ]
        if self.error:
            rows.append(("error", self.error.replace("\n", " ")))
        rows += [(f"config.{k}", v) for k, v in sorted(self.config.items())]
        return "".join(f"{k}={v}\n" for k, v in rows)

    def as_csv(self) -> str:
        out = [",".join(CSV_COLUMNS)]
        for r in self.repetitions:
            out.append(f"{r.index},{r.wall_ms:.3f},{r.requests},{r.connections},"
                       f"{'' if r.bytes is None else r.bytes}")
        return "\n".join(out) + "\n"


def fragment_digest(blobs) -> str:
    """Order-independent digest of the fragment contents (a multiset hash)."""
    h = hashlib.sha256()
    for d in sorted(hashlib.sha256(b).hexdigest() for b in blobs):
        h.update(d.encode())
    return h.hexdigest()


def _execute(client: Client, trace: AccessTrace, mode: str, uri: str, batch_timings: list) -> list:
    """Run the trace once; returns the fragment contents in trace order."""
    cfg = client.config
    kw = dict(limits=cfg.limits, credential_id=cfg.credential_id, counter=client.counter,
              headers=client.headers or None)
    frags = trace.fragments()
    if mode == "sequential":
        out = []
        for f in frags:
            outcome = vector_read(client.pool, uri, [f], cfg.vector, **kw)[0]
            out.append(outcome.data)
        return out
    if mode == "vectored":
        return [o.data for o in vector_read(client.pool, uri, frags, cfg.vector,
                                            timings=batch_timings, **kw)]
    if mode == "failover":
        return [o.data for o in failover_read(client.pool, uri, frags, cfg.vector, **kw)]
    doc = discover_metalink(client.pool, uri, **{k: kw[k] for k in ("credential_id", "counter", "headers")})
    if doc is None:
        raise HttpIOError(f"no metalink found for {uri}")
    sink = io.BytesIO()
    multistream_download(client.pool, doc, sink, streams=cfg.metalink_streams,
                         chunk_size=cfg.metalink_chunk_size, **kw)
    view = sink.getbuffer()
    return [bytes(view[f.range.offset:f.range.end]) for f in frags]


def run_benchmark(trace: AccessTrace, mode: str, config: Optional[ClientConfig] = None,
                  metrics_url: Optional[str] = None, repeat: int = 5,
                  uri: Optional[str] = None) -> BenchReport:
    """Execute ``trace`` ``repeat`` times, each with a fresh client.

    Errors stop the run and come back as a report with ``valid`` false.
    """
    if mode not in MODES:
        raise InvalidParams(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    if repeat < 1:
        raise InvalidParams("repeat must be >= 1")
    config = (config or ClientConfig()).validate()
    uri = uri or trace.object_uri
    if not uri:
        raise InvalidParams("trace has no object_uri and none was given")
    plan = plan_fragments(trace.fragments(), config.vector)
    report = BenchReport(mode, uri, len(trace.entries), extra_bytes=plan.stats.extra_bytes,
                         coalesced_ranges=plan.stats.coalesced_ranges,
                         batch_count=plan.stats.batch_count,
                         config={"gap_threshold": config.vector.gap_threshold,
                                 "max_ranges_per_request": config.vector.max_ranges_per_request,
                                 "max_range_header_bytes": config.vector.max_range_header_bytes,
                                 "max_concurrent_batches": config.vector.max_concurrent_batches,
                                 "metalink_streams": config.metalink_streams,
                                 "metalink_chunk_size": config.metalink_chunk_size,
                                 "repeat": repeat})
    probe = MetricsProbe(metrics_url) if metrics_url else None
    digests = set()
    try:
        for rep in range(1, repeat + 1):
            before = probe.snapshot() if probe else None
            timings = []
            client = Client(config)
            t0 = time.perf_counter()
            try:
                blobs = _execute(client, trace, mode, uri, timings)
            except HttpIOError as exc:
                report.valid = False
                report.error = f"{type(exc).__name__}: {exc}"
                blobs = None
            wall = (time.perf_counter() - t0) * 1000
            client.close()
            after = probe.snapshot() if probe else None
            r = Repetition(rep, wall, client.requests_issued, client.pool.stats().sessions_created, None)
            if probe:
                r.server_requests = after.requests_total - before.requests_total
                r.server_connections = after.tcp_accepts - before.tcp_accepts
                r.bytes = after.body_bytes_sent - before.body_bytes_sent
            report.repetitions.append(r)
            if blobs is None:
                break
            digests.add(fragment_digest(blobs))
            if rep == 1:
                report.batch_timings_ms = [t * 1000 for _, t in sorted(timings)]
    finally:
        if probe:
            probe.close()
    if len(digests) > 1:
        report.valid = False
        report.error = "fragment contents differ between repetitions"
    report.fragment_digest = digests.pop() if len(digests) == 1 else ""
    return report
