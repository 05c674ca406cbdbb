"""Deterministic HTTP/1.1 origin with range modes, outages, latency and metrics.

Layout of the URL space:

* ``/<path>``        the primary corpus root
* ``/<name>/<path>`` replica root ``name``
* ``/.metrics``      flat ``key=value`` counters (not itself counted)

Metalink documents for a primary path are generated from the replica list and
served on three endpoints: ``Accept: application/metalink4+xml``,
``<path>?metalink`` and ``<path>.meta4``. The metalink endpoints play the part
of a federation service, so they keep answering while the primary root is
scripted offline.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import socket
import struct
import tempfile
import threading
import time
from dataclasses import dataclass, field
from email.utils import formatdate
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import unquote, urlsplit
from xml.etree import ElementTree as ET

from ..errors import BindFailed, CorpusUnreadable
from .faults import FaultPlan, LatencyModel
from .multipart import closing_delimiter, part_header

log = logging.getLogger(__name__)

PRIMARY = "primary"
METRICS_PATH = "/.metrics"
METALINK_TYPE = "application/metalink4+xml"
METALINK_NS = "urn:ietf:params:xml:ns:metalink"
WRITE_BLOCK = 256 * 1024
TAG_HEADER = "X-Client-Tag"


@dataclass
class ServerMetrics:
    tcp_accepts: int = 0
    requests_total: int = 0
    ranged_requests: int = 0
    multipart_responses: int = 0
    metalink_requests: int = 0
    body_bytes_sent: int = 0
    per_connection: dict = field(default_factory=dict)
    per_path: dict = field(default_factory=dict)

    def as_text(self) -> str:
        lines = [f"{k}={getattr(self, k)}" for k in
                 ("tcp_accepts", "requests_total", "ranged_requests", "multipart_responses",
                  "metalink_requests", "body_bytes_sent")]
        lines += [f"connection.{cid}.requests={n}" for cid, n in sorted(self.per_connection.items())]
        lines += [f"path.{p}.requests={n}" for p, n in sorted(self.per_path.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ServerMetrics":
        m = cls()
        for line in text.splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                continue
            if key.startswith("connection."):
                m.per_connection[int(key.split(".")[1])] = int(value)
            elif key.startswith("path.") and key.endswith(".requests"):
                m.per_path[key[len("path."):-len(".requests")]] = int(value)
            elif hasattr(m, key):
                setattr(m, key, int(value))
        return m


@dataclass
class ReplicaRoot:
    name: str
    directory: str
    priority: int
    location: Optional[str] = None


def parse_request_ranges(value: str, size: int):
    """Resolve a Range header against ``size``.

    Returns None when the header is not a syntactically valid byte-range set
    (the server then ignores it), otherwise a list of satisfiable
    ``(first, last)`` pairs, clipped to the object, in request order.
    """
    m = re.fullmatch(r"\s*bytes\s*=\s*(.+)", value or "", re.IGNORECASE)
    if not m:
        return None
    out = []
    for spec in m.group(1).split(","):
        spec = spec.strip()
        if not spec:
            continue
        sm = re.fullmatch(r"(\d*)\s*-\s*(\d*)", spec)
        if not sm or (not sm.group(1) and not sm.group(2)):
            return None
        a, b = sm.group(1), sm.group(2)
        if a:
            first = int(a)
            last = int(b) if b else size - 1
            if b and last < first:
                return None
            if first >= size:
                continue
            out.append((first, min(last, size - 1)))
        else:
            suffix = int(b)
            if suffix == 0 or size == 0:
                continue
            out.append((max(size - suffix, 0), size - 1))
    return out


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128

    def __init__(self, addr, testbed):
        self.testbed = testbed
        super().__init__(addr, _Handler)

    def handle_error(self, request, client_address):
        log.debug("testbed handler error for %s", client_address, exc_info=True)

    def process_request(self, request, client_address):
        self.testbed._accepted(request)
        super().process_request(request, client_address)


class _Abort(Exception):
    """Drop the connection with a TCP reset."""


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "hpchttp-testbed/0.1"
    disable_nagle_algorithm = True

    def setup(self):
        super().setup()
        self.tb = self.server.testbed
        self.conn_id = self.tb._register(self.connection)

    def finish(self):
        try:
            super().finish()
        finally:
            self.tb._unregister(self.connection)

    def send_response(self, code, message=None):
        # no Date header: replies must be byte-identical across runs
        self.log_request(code)
        self.send_response_only(code, message)
        self.send_header("Server", self.version_string())

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def do_GET(self):
        self._dispatch("GET")

    def do_HEAD(self):
        self._dispatch("HEAD")

    def do_PUT(self):
        self._dispatch("PUT")

    def do_DELETE(self):
        self._dispatch("DELETE")

    # ------------------------------------------------------------------

    def _dispatch(self, method):
        parts = urlsplit(self.path)
        path = unquote(parts.path) or "/"
        if path == METRICS_PATH and method in ("GET", "HEAD"):
            self._send_simple(200, self.tb.snapshot_metrics().as_text().encode(), "text/plain",
                              head=method == "HEAD")
            return
        try:
            self._handle(method, path, parts.query)
        except _Abort:
            self._reset()
        except (ConnectionError, socket.timeout):
            self.close_connection = True

    def _handle(self, method, path, query):
        tb = self.tb
        body = self._read_request_body() if method == "PUT" else None
        endpoint = self._metalink_endpoint(method, path, query)
        n, state = tb._count_request(self.conn_id, path, bool(self.headers.get("Range")),
                                     endpoint is not None, self.headers.get(TAG_HEADER))
        self._req_no = n
        self._state = state
        self._force_close = bool(state.connection_close_every and n % state.connection_close_every == 0)
        delay = tb.latency.request_delay(n)
        if delay:
            time.sleep(delay)
        if endpoint is not None:
            self._serve_metalink(endpoint, path)
            return
        root, fs_path = tb._resolve(path)
        if fs_path is None:
            self._send_simple(404, b"not found\n")
            return
        if tb._is_down(root, state):
            raise _Abort()
        if method in ("GET", "HEAD", "DELETE") and not os.path.isfile(fs_path):
            self._send_simple(404, b"not found\n")
            return
        if method == "GET":
            self._get(root, fs_path)
        elif method == "HEAD":
            self._head(fs_path)
        elif method == "PUT":
            self._put(path, fs_path, body)
        else:
            self._delete(path, fs_path)

    # -- request bodies ---------------------------------------------------

    def _read_request_body(self):
        if "chunked" in (self.headers.get("Transfer-Encoding") or "").lower():
            chunks = []
            while True:
                line = self.rfile.readline(1024)
                if not line:
                    raise ConnectionError("eof in chunked body")
                size = int(line.split(b";", 1)[0].strip() or b"0", 16)
                if size == 0:
                    while self.rfile.readline(1024) not in (b"\r\n", b"\n", b""):
                        pass
                    break
                chunks.append(self.rfile.read(size))
                self.rfile.readline(8)
            return b"".join(chunks)
        length = int(self.headers.get("Content-Length") or 0)
        data = self.rfile.read(length) if length else b""
        if len(data) != length:
            raise ConnectionError("short request body")
        return data

    # -- metalink ----------------------------------------------------------

    def _metalink_endpoint(self, method, path, query):
        if method != "GET":
            return None
        if path.endswith(".meta4"):
            return "suffix"
        if query == "metalink":
            return "query"
        if METALINK_TYPE in (self.headers.get("Accept") or ""):
            return "accept"
        return None

    def _serve_metalink(self, endpoint, path):
        tb, state = self.tb, self._state
        target = path[:-len(".meta4")] if endpoint == "suffix" else path
        if endpoint not in state.metalink_endpoints:
            if endpoint == "accept":
                # no negotiation: behave like a plain server and send the object
                root, fs_path = tb._resolve(target)
                if fs_path is None:
                    self._send_simple(404, b"not found\n")
                elif tb._is_down(root, state):
                    raise _Abort()
                else:
                    self._get(root, fs_path, honour_range=False)
                return
            self._send_simple(404, b"no metalink\n")
            return
        if endpoint in state.metalink_garbage:
            self._send_simple(200, b"this is not xml <<<\x00", METALINK_TYPE)
            return
        doc = tb.metalink_for(target, host=self.headers.get("Host"))
        if doc is None:
            self._send_simple(404, b"no such resource\n")
            return
        self._send_simple(200, doc, METALINK_TYPE)

    # -- verbs -------------------------------------------------------------

    def _file_headers(self, st, *, omit_length=False):
        hdrs = {
            "Last-Modified": formatdate(st.st_mtime, usegmt=True),
            "ETag": f'"{st.st_ino:x}-{st.st_size:x}-{int(st.st_mtime_ns):x}"',
            "Accept-Ranges": "none" if self._state.ignore_range else "bytes",
        }
        if not omit_length:
            hdrs["Content-Length"] = str(st.st_size)
        return hdrs

    def _head(self, fs_path):
        st = os.stat(fs_path)
        hdrs = self._file_headers(st, omit_length=self._state.omit_content_length)
        hdrs["Content-Type"] = "application/octet-stream"
        self._start(200, hdrs)

    def _get(self, root, fs_path, honour_range=True):
        state = self._state
        st = os.stat(fs_path)
        size = st.st_size
        spec = self.headers.get("Range")
        ranges = None
        if spec and honour_range and not state.ignore_range:
            ranges = parse_request_ranges(spec, size)
        with open(fs_path, "rb") as fh:
            if ranges is None:
                hdrs = self._file_headers(st)
                hdrs["Content-Type"] = "application/octet-stream"
                self._start(200, hdrs)
                self._copy(root, fh, 0, size)
                return
            if not ranges:
                self._send_simple(416, b"", extra={"Content-Range": f"bytes */{size}"})
                return
            if len(ranges) > 1 and state.coalesce_ranges:
                ranges = [(min(a for a, _ in ranges), max(b for _, b in ranges))]
            elif len(ranges) > 1 and state.single_range_only:
                ranges = ranges[:1]
            hdrs = self._file_headers(st)
            if len(ranges) == 1:
                first, last = ranges[0]
                hdrs["Content-Length"] = str(last - first + 1)
                hdrs["Content-Range"] = f"bytes {first}-{last}/{size}"
                hdrs["Content-Type"] = "application/octet-stream"
                self._start(206, hdrs)
                self._copy(root, fh, first, last - first + 1)
                return
            boundary = self.tb.boundary_for(self._req_no)
            heads = [part_header(a, b - a + 1, size, boundary) for a, b in ranges]
            tail = closing_delimiter(boundary)
            hdrs["Content-Length"] = str(sum(len(h) for h in heads) + len(tail)
                                         + sum(b - a + 1 for a, b in ranges))
            hdrs["Content-Type"] = f"multipart/byteranges; boundary={boundary}"
            self.tb._count_multipart()
            self._start(206, hdrs)
            for head, (a, b) in zip(heads, ranges):
                self._write(root, head)
                self._copy(root, fh, a, b - a + 1)
            self._write(root, tail)

    def _put(self, path, fs_path, body):
        if self._state.is_read_only(path):
            self._send_simple(403, b"read-only area\n")
            return
        existed = os.path.exists(fs_path)
        os.makedirs(os.path.dirname(fs_path), exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(fs_path), prefix=".put-")
        try:
            with os.fdopen(fd, "wb") as out:
                out.write(body)
            os.replace(tmp, fs_path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self._send_simple(204 if existed else 201, b"")

    def _delete(self, path, fs_path):
        if self._state.is_read_only(path):
            self._send_simple(403, b"read-only area\n")
            return
        if not os.path.isfile(fs_path):
            self._send_simple(404, b"not found\n")
            return
        os.unlink(fs_path)
        self._send_simple(204, b"")

    # -- output ------------------------------------------------------------

    def _start(self, status, headers):
        self.send_response(status)
        for k, v in headers.items():
            self.send_header(k, v)
        if self._force_close:
            self.send_header("Connection", "close")
            self.close_connection = True
        self.end_headers()

    def _send_simple(self, status, body, ctype="text/plain", head=False, extra=None):
        self._force_close = getattr(self, "_force_close", False)
        hdrs = {"Content-Type": ctype, "Content-Length": str(len(body))}
        if extra:
            hdrs.update(extra)
        if status in (204, 304):
            del hdrs["Content-Length"]
            del hdrs["Content-Type"]
        self._start(status, hdrs)
        if body and not head and status not in (204, 304):
            self.wfile.write(body)

    def _copy(self, root, fh, offset, length):
        fh.seek(offset)
        left = length
        while left > 0:
            block = fh.read(min(WRITE_BLOCK, left))
            if not block:
                raise _Abort()
            self._write(root, block)
            left -= len(block)

    def _write(self, root, data):
        allowed = self.tb._body_allowance(root, len(data), self._state)
        if allowed < len(data):
            if allowed:
                self.wfile.write(data[:allowed])
            raise _Abort()
        delay = self.tb.latency.body_delay(len(data))
        if delay:
            time.sleep(delay)
        self.wfile.write(data)

    def _reset(self):
        self.close_connection = True
        try:
            self.connection.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
        except OSError:
            pass
        try:
            self.connection.close()
        except OSError:
            pass


class Testbed:
    """Handle on a running test server (see ``serve``)."""

    __test__ = False  # not a pytest class

    def __init__(self, corpus_root, replicas=(), latency=None, faults=None,
                 bind=("127.0.0.1", 0)):
        if not os.path.isdir(corpus_root) or not os.access(corpus_root, os.R_OK | os.X_OK):
            raise CorpusUnreadable(f"corpus root {corpus_root!r} is not a readable directory")
        self.corpus_root = os.path.abspath(corpus_root)
        self.replicas = {}
        for i, rep in enumerate(replicas):
            if not isinstance(rep, ReplicaRoot):
                name, directory, *rest = rep
                rep = ReplicaRoot(name, directory, rest[0] if rest else i + 1,
                                  rest[1] if len(rest) > 1 else None)
            if not os.path.isdir(rep.directory):
                raise CorpusUnreadable(f"replica root {rep.directory!r} is not a directory")
            rep.directory = os.path.abspath(rep.directory)
            self.replicas[rep.name] = rep
        self.latency = latency or LatencyModel()
        self.faults = faults or FaultPlan()
        self._lock = threading.Lock()
        self._metrics = ServerMetrics()
        self._request_no = 0
        self._next_conn = 0
        self._conns = {}
        self._tags = {}
        self._dead = set()
        self._bytes_by_root = {}
        self._digest_cache = {}
        try:
            self._server = _Server(tuple(bind), self)
        except OSError as exc:
            raise BindFailed(f"cannot bind {bind}: {exc}") from exc
        self.host, self.port = self._server.server_address[:2]
        self._thread = None

    # -- lifecycle ---------------------------------------------------------

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def url_for(self, path: str, root: str = PRIMARY) -> str:
        path = "/" + path.lstrip("/")
        return self.url + (path if root == PRIMARY else f"/{root}{path}")

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        kwargs={"poll_interval": 0.05},
                                        name=f"testbed:{self.port}", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        with self._lock:
            socks = list(self._conns)
        for s in socks:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._thread:
            self._thread.join(5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()

    def set_faults(self, plan: FaultPlan):
        with self._lock:
            self.faults = plan
            self._dead.clear()
            self._bytes_by_root.clear()

    def set_latency(self, model: LatencyModel):
        self.latency = model

    # -- metrics -----------------------------------------------------------

    def snapshot_metrics(self) -> ServerMetrics:
        with self._lock:
            m = self._metrics
            return ServerMetrics(m.tcp_accepts, m.requests_total, m.ranged_requests,
                                 m.multipart_responses, m.metalink_requests, m.body_bytes_sent,
                                 dict(m.per_connection), dict(m.per_path))

    def connection_tags(self) -> dict:
        """conn id -> set of X-Client-Tag values seen on that connection."""
        with self._lock:
            return {cid: set(tags) for cid, tags in self._tags.items()}

    def open_connections(self) -> int:
        with self._lock:
            return len(self._conns)

    # -- metalink ----------------------------------------------------------

    def metalink_for(self, path: str, host: Optional[str] = None) -> Optional[bytes]:
        """Metalink/4 document for the primary ``path``, or None if unknown."""
        source = None
        for root in [self.corpus_root] + [r.directory for r in self.replicas.values()]:
            candidate = self._safe_join(root, path)
            if candidate and os.path.isfile(candidate):
                source = candidate
                break
        if source is None:
            return None
        base = f"http://{host}" if host else self.url
        st = os.stat(source)
        ET.register_namespace("", METALINK_NS)
        root = ET.Element(f"{{{METALINK_NS}}}metalink")
        f = ET.SubElement(root, f"{{{METALINK_NS}}}file", name=os.path.basename(path))
        ET.SubElement(f, f"{{{METALINK_NS}}}size").text = str(st.st_size)
        h = ET.SubElement(f, f"{{{METALINK_NS}}}hash", type="sha-256")
        h.text = self._sha256(source, st)
        for rep in self.replicas.values():
            attrs = {"priority": str(rep.priority)}
            if rep.location:
                attrs["location"] = rep.location
            u = ET.SubElement(f, f"{{{METALINK_NS}}}url", attrs)
            u.text = f"{base}/{rep.name}/{path.lstrip('/')}"
        return ET.tostring(root, encoding="utf-8", xml_declaration=True)

    def _sha256(self, fs_path, st):
        key = (fs_path, st.st_size, st.st_mtime_ns)
        with self._lock:
            if key in self._digest_cache:
                return self._digest_cache[key]
        h = hashlib.sha256()
        with open(fs_path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
        digest = h.hexdigest()
        with self._lock:
            self._digest_cache[key] = digest
        return digest

    def boundary_for(self, request_no: int) -> str:
        return f"hpchttp-{self.latency.seed & 0xffffffff:08x}-{request_no:010d}"

    # -- internals used by the handler ---------------------------------------

    def _accepted(self, sock):
        with self._lock:
            self._metrics.tcp_accepts += 1

    def _register(self, sock):
        with self._lock:
            self._next_conn += 1
            self._conns[sock] = self._next_conn
            return self._next_conn

    def _unregister(self, sock):
        with self._lock:
            self._conns.pop(sock, None)

    def _count_request(self, conn_id, path, ranged, metalink, tag):
        with self._lock:
            self._request_no += 1
            n = self._request_no
            m = self._metrics
            m.requests_total += 1
            if ranged:
                m.ranged_requests += 1
            if metalink:
                m.metalink_requests += 1
            m.per_connection[conn_id] = m.per_connection.get(conn_id, 0) + 1
            m.per_path[path] = m.per_path.get(path, 0) + 1
            if tag is not None:
                self._tags.setdefault(conn_id, set()).add(tag)
            state = self.faults.state_at(n)
        return n, state

    def _count_multipart(self):
        with self._lock:
            self._metrics.multipart_responses += 1

    def _is_down(self, root, state):
        with self._lock:
            return root in state.offline or root in self._dead

    def _body_allowance(self, root, n, state):
        """How many of the next ``n`` body bytes ``root`` may still send."""
        with self._lock:
            limit = state.die_after_bytes.get(root)
            sent = self._bytes_by_root.get(root, 0)
            allowed = n if limit is None else max(0, min(n, limit - sent))
            self._bytes_by_root[root] = sent + allowed
            self._metrics.body_bytes_sent += allowed
            if allowed < n:
                self._dead.add(root)
            return allowed

    @staticmethod
    def _safe_join(root, path):
        rel = os.path.normpath("/" + path).lstrip("/")
        if rel in ("", ".") or rel.startswith(".."):
            return None
        return os.path.join(root, rel)

    def _resolve(self, path):
        """(root name, filesystem path) for a request path; fs path None if absent."""
        stripped = path.lstrip("/")
        head, _, rest = stripped.partition("/")
        if head in self.replicas and rest:
            root, base, rel = head, self.replicas[head].directory, rest
        else:
            root, base, rel = PRIMARY, self.corpus_root, stripped
        fs_path = self._safe_join(base, rel)
        if fs_path is None or os.path.isdir(fs_path):
            return root, None
        return root, fs_path


def serve(corpus_root, replicas=(), latency: Optional[LatencyModel] = None,
          faults: Optional[FaultPlan] = None, bind=("127.0.0.1", 0)) -> Testbed:
    """Start a test server in a background thread and return its handle."""
    return Testbed(corpus_root, replicas, latency, faults, bind).start()
