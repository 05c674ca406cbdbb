"""Metalink/4 replica descriptions, replica fail-over and multi-source download."""

from __future__ import annotations

import hashlib
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence
from urllib.parse import urlsplit, urlunsplit
from xml.etree import ElementTree as ET

from .engine import EngineLimits, execute_ranged_get
from .errors import (
    AllReplicasFailed,
    ChecksumMismatch,
    HttpError,
    HttpIOError,
    MalformedMetalink,
    MalformedResponse,
    NoReplicaAvailable,
    SizeUnknown,
)
from .pool import SessionPool
from .ranges import ByteRange
from .transport import RequestCounter, exchange_following
from .vector import FragmentRequest, VectorConfig, is_failover_error, vector_read

log = logging.getLogger(__name__)

METALINK_NS = "urn:ietf:params:xml:ns:metalink"
METALINK_TYPES = ("application/metalink4+xml", "application/metalink+xml")
MAX_METALINK_BYTES = 1024 * 1024
DEFAULT_PRIORITY = 999999
DEFAULT_CHUNK_SIZE = 8 * 1024 * 1024

# Metalink hash names -> hashlib names, strongest first
HASHES = (("sha-512", "sha512"), ("sha-384", "sha384"), ("sha-256", "sha256"),
          ("sha-224", "sha224"), ("sha-1", "sha1"), ("md5", "md5"))


@dataclass(frozen=True)
class Replica:
    url: str
    priority: int = DEFAULT_PRIORITY
    location: Optional[str] = None
    document_order: int = 0


@dataclass
class MetalinkDocument:
    name: str
    size: Optional[int]
    checksums: dict
    replicas: list
    dropped_urls: int = 0


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _children(elem, name):
    return [c for c in elem if _local(c.tag) == name]


def parse_metalink(xml: bytes) -> MetalinkDocument:
    try:
        root = ET.fromstring(xml)
    except ET.ParseError as exc:
        raise MalformedMetalink(f"not XML: {exc}") from None
    if _local(root.tag) != "metalink":
        raise MalformedMetalink(f"root element is <{_local(root.tag)}>, not <metalink>")
    files = _children(root, "file")
    if not files:
        raise MalformedMetalink("no <file> element")
    f = files[0]
    name = f.get("name") or ""
    size = None
    size_el = _children(f, "size")
    if size_el:
        try:
            size = int((size_el[0].text or "").strip())
        except ValueError:
            raise MalformedMetalink(f"bad <size> {size_el[0].text!r}") from None
        if size < 0:
            raise MalformedMetalink(f"negative <size> {size}")
    checksums = {}
    for h in _children(f, "hash"):
        algo = (h.get("type") or "").strip().lower()
        digest = (h.text or "").strip().lower()
        if algo and digest:
            checksums[algo] = digest
    replicas = []
    dropped = 0
    for order, u in enumerate(_children(f, "url")):
        url = (u.text or "").strip()
        if urlsplit(url).scheme.lower() not in ("http", "https"):
            dropped += 1
            continue
        try:
            priority = int(u.get("priority", DEFAULT_PRIORITY))
        except ValueError:
            priority = DEFAULT_PRIORITY
        replicas.append(Replica(url, max(priority, 1), u.get("location"), order))
    if not replicas:
        raise MalformedMetalink(f"no usable http/https replica ({dropped} other url(s) dropped)")
    return MetalinkDocument(name, size, checksums, replicas, dropped)


def order_replicas(doc: MetalinkDocument, dead_set=frozenset()) -> list:
    live = [r for r in doc.replicas if r.url not in dead_set]
    if not live:
        raise NoReplicaAvailable(f"all {len(doc.replicas)} replica(s) of {doc.name!r} are marked dead")
    return sorted(live, key=lambda r: (r.priority, r.document_order))


def _with_query(uri: str, query: str) -> str:
    p = urlsplit(uri)
    return urlunsplit((p.scheme, p.netloc, p.path, query, ""))


def _with_suffix(uri: str, suffix: str) -> str:
    p = urlsplit(uri)
    return urlunsplit((p.scheme, p.netloc, p.path + suffix, p.query, ""))


def discover_metalink(pool: SessionPool, uri: str, *, credential_id: str = "anonymous",
                      counter: Optional[RequestCounter] = None,
                      headers: Optional[dict] = None,
                      attempts: Optional[list] = None) -> Optional[MetalinkDocument]:
    """Try content negotiation, ``?metalink`` and ``.meta4`` in that order.

    Failures are not raised; each attempt is appended to ``attempts`` as
    ``(strategy, url, outcome)`` and logged.
    """
    ladder = (
        ("accept", uri, {"Accept": "application/metalink4+xml"}),
        ("query", _with_query(uri, "metalink"), {}),
        ("suffix", _with_suffix(uri, ".meta4"), {}),
    )
    for strategy, url, extra in ladder:
        try:
            doc = _fetch_metalink(pool, url, {**(headers or {}), **extra}, credential_id, counter)
            outcome = "ok"
        except HttpIOError as exc:
            doc, outcome = None, f"{type(exc).__name__}: {exc}"
        log.debug("metalink discovery %s %s: %s", strategy, url, outcome)
        if attempts is not None:
            attempts.append((strategy, url, outcome))
        if doc is not None:
            return doc
    return None


def _fetch_metalink(pool, url, headers, credential_id, counter) -> MetalinkDocument:
    with exchange_following(pool, "GET", url, headers=headers,
                            credential_id=credential_id, counter=counter) as ex:
        if ex.status != 200:
            ex.drain()
            raise HttpError(ex.status, ex.reason, url)
        ctype = (ex.header("Content-Type") or "").split(";")[0].strip().lower()
        if ctype not in METALINK_TYPES and not ctype.endswith("xml"):
            # most likely the object itself; do not download it
            ex.failed = True
            raise MalformedMetalink(f"reply is {ctype or 'untyped'}, not a metalink")
        body = ex.read(MAX_METALINK_BYTES + 1)
        if len(body) > MAX_METALINK_BYTES:
            ex.failed = True
            raise MalformedMetalink("metalink document too large")
        ex.drain()
    return parse_metalink(body)


def failover_read(pool: SessionPool, uri: str, fragments: Sequence[FragmentRequest],
                  config: Optional[VectorConfig] = None, *,
                  limits: EngineLimits = EngineLimits(),
                  credential_id: str = "anonymous",
                  counter: Optional[RequestCounter] = None,
                  headers: Optional[dict] = None,
                  discovery_uri: Optional[str] = None,
                  document: Optional[MetalinkDocument] = None) -> list:
    """``vector_read`` that falls back to metalink replicas when ``uri`` fails.

    Fail-over triggers on transport errors, 404 and 5xx; other HTTP errors
    (401, 403, ...) are raised immediately. Replicas are tried in priority
    order and each failing replica is skipped for the rest of this call.
    """
    fragments = list(fragments)
    kw = dict(limits=limits, credential_id=credential_id, counter=counter, headers=headers)
    try:
        outcomes = vector_read(pool, uri, fragments, config, **kw)
        first = _first_failover_error(outcomes)
        if first is None:
            return outcomes
    except HttpIOError as exc:
        if not is_failover_error(exc):
            raise
        first = exc
    errors = [(uri, first)]
    log.info("%s unavailable (%s); looking for replicas", uri, first)
    doc = document or discover_metalink(pool, discovery_uri or uri, credential_id=credential_id,
                                        counter=counter, headers=headers)
    if doc is None:
        raise AllReplicasFailed(errors)
    dead = {uri}
    while True:
        try:
            replica = order_replicas(doc, dead)[0]
        except NoReplicaAvailable:
            raise AllReplicasFailed(errors) from None
        dead.add(replica.url)
        try:
            outcomes = vector_read(pool, replica.url, fragments, config, **kw)
        except HttpIOError as exc:
            if not is_failover_error(exc):
                raise
            errors.append((replica.url, exc))
            continue
        failure = _first_failover_error(outcomes)
        if failure is None:
            return outcomes
        errors.append((replica.url, failure))


def _first_failover_error(outcomes):
    for o in outcomes:
        if o.error is not None and is_failover_error(o.error):
            return o.error
    return None


# -- multi-stream download ----------------------------------------------------

PENDING, ACTIVE, DONE, FAILED = "pending", "active", "done", "failed"


@dataclass
class Chunk:
    range: ByteRange
    replica: int
    state: str = PENDING
    tried: set = field(default_factory=set)


@dataclass
class StreamPlan:
    chunk_size: int
    chunks: list
    streams: int


def build_stream_plan(size: int, chunk_size: int = DEFAULT_CHUNK_SIZE, replicas: int = 1,
                      streams: int = 4) -> StreamPlan:
    if chunk_size < 1 or streams < 1 or replicas < 1:
        raise ValueError("chunk_size, streams and replicas must be >= 1")
    chunks = [Chunk(ByteRange(off, min(chunk_size, size - off)), i % replicas)
              for i, off in enumerate(range(0, size, chunk_size))]
    return StreamPlan(chunk_size, chunks, streams)


@dataclass
class DownloadReport:
    bytes: int
    chunks_per_replica: dict
    checksum_verified: bool
    checksum_algorithm: Optional[str] = None
    migrated_chunks: int = 0
    failed_replicas: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


class _Download:
    def __init__(self, pool, doc, sink, plan, replicas, kw):
        self.pool = pool
        self.doc = doc
        self.sink = sink
        self.plan = plan
        self.replicas = replicas
        self.kw = kw
        self.cond = threading.Condition()
        self.sink_lock = threading.Lock()
        self.pending = deque(range(len(plan.chunks)))
        self.active = 0
        self.dead = set()
        self.load = [0] * len(replicas)
        self.served = {r.url: 0 for r in replicas}
        self.failed = {}
        self.migrated = 0
        self.abort = None

    def pick(self, chunk, home):
        """Replica index for ``chunk``: the worker's home if usable, else least loaded."""
        usable = [i for i in range(len(self.replicas)) if i not in self.dead and i not in chunk.tried]
        if not usable:
            return None
        if home in usable:
            return home
        return min(usable, key=lambda i: (self.load[i], i))

    def worker(self, home):
        while True:
            with self.cond:
                while not self.pending and self.active and self.abort is None:
                    self.cond.wait()
                if self.abort is not None or not self.pending:
                    return
                cidx = self.pending.popleft()
                chunk = self.plan.chunks[cidx]
                rid = self.pick(chunk, home)
                if rid is None:
                    chunk.state = FAILED
                    self.abort = AllReplicasFailed(
                        [(self.replicas[i].url, self.failed.get(self.replicas[i].url, "not tried"))
                         for i in range(len(self.replicas))])
                    self.cond.notify_all()
                    return
                home = rid
                chunk.replica = rid
                chunk.state = ACTIVE
                self.active += 1
                self.load[rid] += 1
            replica = self.replicas[rid]
            try:
                data = self.fetch(replica.url, chunk.range)
                with self.sink_lock:
                    self.sink.seek(chunk.range.offset)
                    self.sink.write(data)
                error = None
            except HttpIOError as exc:
                error = exc
            with self.cond:
                self.active -= 1
                self.load[rid] -= 1
                if error is None:
                    chunk.state = DONE
                    self.served[replica.url] += 1
                else:
                    log.info("chunk %d+%d failed on %s: %s; requeueing",
                             chunk.range.offset, chunk.range.length, replica.url, error)
                    chunk.state = PENDING
                    chunk.tried.add(rid)
                    self.dead.add(rid)
                    self.failed[replica.url] = error
                    self.migrated += 1
                    self.pending.appendleft(cidx)
                self.cond.notify_all()

    def fetch(self, url, rng) -> bytes:
        resp = execute_ranged_get(self.pool, url, [rng], **self.kw)
        data = resp.slice(rng)
        if data is None:
            raise MalformedResponse(f"{url} did not return bytes {rng.offset}+{rng.length}")
        return data


def multistream_download(pool: SessionPool, doc: MetalinkDocument, sink: BinaryIO, *,
                         streams: int = 4, chunk_size: int = DEFAULT_CHUNK_SIZE,
                         limits: EngineLimits = EngineLimits(),
                         credential_id: str = "anonymous",
                         counter: Optional[RequestCounter] = None,
                         headers: Optional[dict] = None,
                         dead_set=frozenset()) -> DownloadReport:
    """Download ``doc`` into the seekable ``sink`` from several replicas at once.

    Each stream starts on its own replica and pulls chunks from a shared
    queue. A chunk that fails is put back at the head of the queue, its
    replica is dropped for the rest of the download and the stream moves to
    the least loaded surviving replica.
    """
    if doc.size is None:
        raise SizeUnknown(f"metalink for {doc.name!r} carries no size")
    replicas = order_replicas(doc, dead_set)
    plan = build_stream_plan(doc.size, chunk_size, len(replicas), streams)
    kw = dict(limits=limits, credential_id=credential_id, counter=counter, headers=headers)
    job = _Download(pool, doc, sink, plan, replicas, kw)
    nworkers = min(streams, len(replicas))
    threads = [threading.Thread(target=job.worker, args=(i,), name=f"mstream-{i}", daemon=True)
               for i in range(nworkers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if job.abort is not None:
        raise job.abort
    report = DownloadReport(bytes=doc.size, chunks_per_replica=dict(job.served),
                            checksum_verified=False, migrated_chunks=job.migrated,
                            failed_replicas={u: str(e) for u, e in job.failed.items()})
    _verify(doc, sink, report)
    return report


def _verify(doc, sink, report):
    for meta_name, lib_name in HASHES:
        expected = doc.checksums.get(meta_name)
        if expected:
            break
    else:
        if doc.checksums:
            report.warnings.append(f"no supported checksum among {sorted(doc.checksums)}")
        else:
            report.warnings.append("metalink carries no checksum; download not verified")
        return
    if not hasattr(sink, "read"):
        report.warnings.append("sink is not readable; download not verified")
        return
    h = hashlib.new(lib_name)
    sink.flush()
    sink.seek(0)
    left = doc.size
    while left > 0:
        block = sink.read(min(left, 1 << 20))
        if not block:
            break
        h.update(block)
        left -= len(block)
    actual = h.hexdigest()
    if actual != expected:
        raise ChecksumMismatch(meta_name, expected, actual)
    report.checksum_verified = True
    report.checksum_algorithm = meta_name


__all__ = [
    "Replica", "MetalinkDocument", "StreamPlan", "Chunk", "DownloadReport",
    "parse_metalink", "discover_metalink", "order_replicas", "failover_read",
    "build_stream_plan", "multistream_download",
]
