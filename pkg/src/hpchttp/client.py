"""Object-level client: CRUD over HTTP verbs plus a positional read handle."""

from __future__ import annotations

import io
import logging
import threading
from dataclasses import dataclass
from datetime import datetime
from email.utils import parsedate_to_datetime
from typing import BinaryIO, Optional, Sequence, Union

from .config import ClientConfig
from .errors import AllReplicasFailed, HttpError, HttpIOError, RangeNotSatisfiable, TransportError
from .metalink import (
    MetalinkDocument,
    discover_metalink,
    failover_read,
    multistream_download,
    order_replicas,
)
from .pool import SessionPool
from .ranges import ByteRange
from .transport import RequestCounter, exchange, exchange_following
from .vector import FragmentOutcome, FragmentRequest, is_failover_error, vector_read

log = logging.getLogger(__name__)

COPY_BLOCK = 1 << 20


@dataclass
class ResourceInfo:
    uri: str
    size: Optional[int]
    last_modified: Optional[datetime]
    etag: Optional[str]
    supports_ranges: bool
    status: Optional[int] = None

    @classmethod
    def from_headers(cls, uri, headers, status=None) -> "ResourceInfo":
        size = headers.get("Content-Length")
        try:
            size = int(size) if size is not None else None
        except ValueError:
            size = None
        modified = headers.get("Last-Modified")
        try:
            modified = parsedate_to_datetime(modified) if modified else None
        except (TypeError, ValueError):
            modified = None
        ranges = (headers.get("Accept-Ranges") or "").lower()
        return cls(uri, size, modified, headers.get("ETag"), "bytes" in ranges, status)


class Client:
    """Thread-safe entry point; every call shares one session pool."""

    def __init__(self, config: Optional[ClientConfig] = None, *, pool: Optional[SessionPool] = None,
                 headers: Optional[dict] = None, ssl_context=None):
        self.config = (config or ClientConfig()).validate()
        self.pool = pool or SessionPool(self.config.pool, ssl_context=ssl_context)
        self.counter = RequestCounter()
        # pass-through credential hook: sent verbatim on every request
        self.headers = dict(headers or {})
        self.last_report = None  # DownloadReport of the last multi-stream download

    def close(self):
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def requests_issued(self) -> int:
        return self.counter.value

    @property
    def failover_enabled(self) -> bool:
        return self.config.metalink_strategy != "off"

    def _kw(self):
        return dict(credential_id=self.config.credential_id, counter=self.counter,
                    headers=self.headers or None)

    def _exchange(self, method, uri, follow=True, **kw):
        opener = exchange_following if follow else exchange
        return opener(self.pool, method, uri, credential_id=self.config.credential_id,
                      counter=self.counter, headers={**self.headers, **kw.pop("headers", {})}, **kw)

    # -- CRUD ----------------------------------------------------------------

    def put(self, uri: str, body: Union[bytes, BinaryIO]) -> ResourceInfo:
        """Create or replace ``uri``. Redirects are never followed for writes."""
        headers = {}
        if isinstance(body, (bytes, bytearray, memoryview)):
            headers["Content-Length"] = str(len(body))
        with self._exchange("PUT", uri, follow=False, body=body, headers=headers) as ex:
            status = ex.status
            ex.drain()
            if not 200 <= status < 300:
                raise HttpError(status, ex.reason, uri)
        info = self.stat(uri)
        info.status = status
        return info

    def get(self, uri: str) -> bytes:
        sink = io.BytesIO()
        self.download(uri, sink)
        return sink.getvalue()

    def download(self, uri: str, sink: BinaryIO) -> int:
        """Stream the whole object into ``sink``; returns the byte count.

        With a metalink strategy enabled, an unavailable ``uri`` is retried on
        its replicas (all of them at once for the multistream strategy).
        """
        strategy = self.config.metalink_strategy
        if strategy == "multistream":
            doc = discover_metalink(self.pool, uri, **self._kw())
            if doc is not None and doc.size is not None:
                self.last_report = multistream_download(
                    self.pool, doc, sink,
                    streams=self.config.metalink_streams,
                    chunk_size=self.config.metalink_chunk_size,
                    limits=self.config.limits, **self._kw())
                return doc.size
        start = sink.tell() if hasattr(sink, "tell") else None
        try:
            return self._plain_get(uri, sink)
        except HttpIOError as exc:
            if strategy == "off" or not is_failover_error(exc):
                raise
            first = exc
        doc = discover_metalink(self.pool, uri, **self._kw())
        if doc is None:
            raise first
        errors = [(uri, first)]
        for replica in order_replicas(doc):
            if start is not None:
                sink.seek(start)
                sink.truncate()
            try:
                return self._plain_get(replica.url, sink)
            except HttpIOError as exc:
                if not is_failover_error(exc):
                    raise
                errors.append((replica.url, exc))
        raise AllReplicasFailed(errors)

    def _plain_get(self, uri, sink) -> int:
        total = 0
        with self._exchange("GET", uri) as ex:
            if ex.status != 200:
                ex.drain()
                raise HttpError(ex.status, ex.reason, uri)
            while True:
                block = ex.read(COPY_BLOCK)
                if not block:
                    break
                sink.write(block)
                total += len(block)
            expected = ex.header("Content-Length")
        if expected is not None and int(expected) != total:
            raise TransportError(f"GET {uri}: got {total} of {expected} bytes")
        return total

    def remove(self, uri: str) -> bool:
        """DELETE ``uri``. Returns False if it was already absent (404)."""
        with self._exchange("DELETE", uri, follow=False) as ex:
            status = ex.status
            ex.drain()
        if status == 404:
            log.info("DELETE %s: already absent", uri)
            return False
        if not 200 <= status < 300:
            raise HttpError(status, ex.reason, uri)
        return True

    def stat(self, uri: str) -> ResourceInfo:
        with self._exchange("HEAD", uri) as ex:
            status = ex.status
            final = ex.url
            headers = ex.headers
            ex.drain()
        if status != 200:
            raise HttpError(status, ex.reason, uri)
        return ResourceInfo.from_headers(final, headers, status)

    # -- positional I/O --------------------------------------------------------

    def open(self, uri: str) -> "RemoteFileHandle":
        try:
            return RemoteFileHandle(self, uri, self.stat(uri))
        except HttpIOError as exc:
            if not self.failover_enabled or not is_failover_error(exc):
                raise
            first = exc
        doc = discover_metalink(self.pool, uri, **self._kw())
        if doc is None:
            raise first
        for replica in order_replicas(doc):
            try:
                info = self.stat(replica.url)
            except HttpIOError as exc:
                if not is_failover_error(exc):
                    raise
                continue
            log.info("%s unavailable (%s); bound to replica %s", uri, first, replica.url)
            return RemoteFileHandle(self, replica.url, info, origin=uri, document=doc)
        raise first

    def vector_read(self, uri: str, fragments: Sequence[FragmentRequest]) -> list:
        if self.failover_enabled:
            return failover_read(self.pool, uri, fragments, self.config.vector,
                                 limits=self.config.limits, **self._kw())
        return vector_read(self.pool, uri, fragments, self.config.vector,
                           limits=self.config.limits, **self._kw())


class RemoteFileHandle:
    """Positional reader over a remote object.

    ``pread`` and ``preadvec`` may be used from several threads; ``read`` and
    ``seek`` move the shared position and belong to a single owner.
    """

    def __init__(self, client: Client, uri: str, info: ResourceInfo, *,
                 origin: Optional[str] = None, document: Optional[MetalinkDocument] = None):
        self.client = client
        self.uri = uri
        self.info = info
        self.origin = origin or uri
        self.document = document
        self.position = 0
        self.config = client.config
        self._lock = threading.Lock()

    @property
    def size(self) -> Optional[int]:
        return self.info.size

    @property
    def failover_enabled(self) -> bool:
        return self.config.metalink_strategy != "off"

    def preadvec(self, fragments: Sequence[FragmentRequest]) -> list:
        c = self.client
        if self.failover_enabled:
            return failover_read(c.pool, self.uri, fragments, self.config.vector,
                                 limits=self.config.limits, discovery_uri=self.origin,
                                 document=self.document, **c._kw())
        return vector_read(c.pool, self.uri, fragments, self.config.vector,
                           limits=self.config.limits, **c._kw())

    def pread(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0:
            raise ValueError("offset and length must be >= 0")
        size = self.size
        if size is not None:
            if offset >= size:
                raise RangeNotSatisfiable(size)
            length = min(length, size - offset)
        if length == 0:
            return b""
        outcome: FragmentOutcome = self.preadvec([FragmentRequest.of(offset, length)])[0]
        err = outcome.error
        if isinstance(err, RangeNotSatisfiable) and err.total is not None and offset < err.total:
            # size was unknown up front: short read at EOF
            return self.pread_exact(offset, err.total - offset)
        return outcome.data

    def pread_exact(self, offset, length) -> bytes:
        return self.preadvec([FragmentRequest.of(offset, length)])[0].data

    def read(self, length: int = -1) -> bytes:
        with self._lock:
            size = self.size
            if length < 0:
                if size is None:
                    raise ValueError("read() to EOF needs a known size")
                length = size - self.position
            if length == 0 or (size is not None and self.position >= size):
                return b""
            try:
                data = self.pread(self.position, length)
            except RangeNotSatisfiable:
                return b""
            self.position += len(data)
            return data

    def seek(self, offset: int, whence: int = io.SEEK_SET) -> int:
        with self._lock:
            if whence == io.SEEK_SET:
                pos = offset
            elif whence == io.SEEK_CUR:
                pos = self.position + offset
            elif whence == io.SEEK_END:
                if self.size is None:
                    raise ValueError("SEEK_END needs a known size")
                pos = self.size + offset
            else:
                raise ValueError(f"bad whence {whence}")
            if pos < 0 or (self.size is not None and pos > self.size):
                raise ValueError(f"position {pos} outside [0, {self.size}]")
            self.position = pos
            return pos

    def tell(self) -> int:
        return self.position


def fragments_from_ranges(ranges: Sequence) -> list:
    """Build FragmentRequests from ``(offset, length)`` pairs, ids = list index."""
    return [FragmentRequest(i, r if isinstance(r, ByteRange) else ByteRange(*r))
            for i, r in enumerate(ranges)]
