"""One HTTP/1.1 request/response exchange over a pooled session."""

from __future__ import annotations

import http.client
import logging
import threading
from contextlib import contextmanager
from typing import Iterator, Mapping, Optional
from urllib.parse import urljoin, urlsplit

from .errors import HttpIOError, MalformedUri, TransportError
from .pool import PooledSession, SessionPool, session_key

log = logging.getLogger(__name__)

REDIRECT_CODES = (301, 302, 303, 307, 308)
MAX_REDIRECTS = 5
USER_AGENT = "hpchttp/0.1"

# errors that a recycled keep-alive socket produces when the server already hung up
_STALE_ERRORS = (http.client.RemoteDisconnected, ConnectionResetError,
                 BrokenPipeError, ConnectionAbortedError)


class RequestCounter:
    """Counts requests put on the wire; shared by everything using one pool."""

    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def incr(self):
        with self._lock:
            self.value += 1


class Exchange:
    """A response whose connection is still leased.

    Read the body through ``read``; the session is released when the
    surrounding ``exchange`` block exits, and only goes back to the idle set if
    the body was consumed to the end without error.
    """

    def __init__(self, url: str, session: PooledSession, response: http.client.HTTPResponse):
        self.url = url
        self.session = session
        self.response = response
        self.failed = False

    @property
    def status(self) -> int:
        return self.response.status

    @property
    def reason(self) -> str:
        return self.response.reason

    @property
    def headers(self):
        return self.response.headers

    def header(self, name: str, default=None):
        return self.response.getheader(name, default)

    def read(self, n: int = -1) -> bytes:
        try:
            return self.response.read(n) if n >= 0 else self.response.read()
        except (OSError, http.client.HTTPException) as exc:
            self.failed = True
            raise TransportError(f"reading body from {self.url}: {exc!r}") from exc

    def drain(self, limit: int = 64 * 1024) -> bool:
        """Consume up to ``limit`` leftover body bytes; True if the body ended."""
        left = limit
        while left > 0:
            chunk = self.read(min(left, 16 * 1024))
            if not chunk:
                return True
            left -= len(chunk)
        return self.response.isclosed()

    @property
    def reusable(self) -> bool:
        r = self.response
        return not self.failed and not r.will_close and r.isclosed()

    # file-like view for streaming parsers
    def readable(self):
        return True


def request_path(url: str) -> str:
    parts = urlsplit(url)
    path = parts.path or "/"
    if parts.query:
        path += "?" + parts.query
    return path


@contextmanager
def exchange(pool: SessionPool, method: str, url: str, *,
             headers: Optional[Mapping[str, str]] = None, body=None,
             credential_id: str = "anonymous",
             counter: Optional[RequestCounter] = None) -> Iterator[Exchange]:
    """Send one request on a pooled session and yield the open response.

    A recycled session that turns out to be dead before any response byte
    arrives is discarded and the request is replayed once on a fresh
    connection; every verb this toolkit issues is idempotent.
    """
    key = session_key(url, credential_id)
    hdrs = {"User-Agent": USER_AGENT}
    if headers:
        hdrs.update(headers)
    path = request_path(url)
    fresh = False
    while True:
        session = pool.acquire(key, fresh=fresh)
        if hasattr(body, "seek") and fresh:
            body.seek(0)
        try:
            if counter is not None:
                counter.incr()
            session.connection.request(method, path, body=body, headers=hdrs)
            response = session.connection.getresponse()
        except _STALE_ERRORS as exc:
            recycled = session.recycled
            pool.release(session, False)
            if recycled and not fresh:
                log.debug("recycled session to %s was dead (%r); retrying fresh", key, exc)
                fresh = True
                continue
            raise TransportError(f"{method} {url}: {exc!r}") from exc
        except (OSError, http.client.HTTPException) as exc:
            pool.release(session, False)
            raise TransportError(f"{method} {url}: {exc!r}") from exc
        except BaseException:
            pool.release(session, False)
            raise
        break
    session.requests_served += 1
    ex = Exchange(url, session, response)
    try:
        yield ex
    except BaseException:
        # an error raised after the body was fully read leaves the socket clean
        if not response.isclosed():
            ex.failed = True
        raise
    finally:
        if not ex.failed and not response.isclosed() and response.length == 0:
            response.read()  # HEAD, 204, 304: nothing to drain but the flag
        reusable = ex.reusable
        if not reusable:
            try:
                response.close()
            except Exception:
                pass
        pool.release(session, reusable)


def redirect_target(ex: Exchange) -> Optional[str]:
    if ex.status not in REDIRECT_CODES:
        return None
    location = ex.header("Location")
    if not location:
        return None
    target = urljoin(ex.url, location)
    if urlsplit(target).scheme.lower() not in ("http", "https"):
        raise MalformedUri(f"redirect to unsupported location {target!r}")
    return target


@contextmanager
def exchange_following(pool: SessionPool, method: str, url: str, *,
                       max_redirects: int = MAX_REDIRECTS, **kwargs) -> Iterator[Exchange]:
    """``exchange`` that follows up to ``max_redirects`` redirects.

    Each hop is pooled under its own host's key.
    """
    for _ in range(max_redirects + 1):
        with exchange(pool, method, url, **kwargs) as ex:
            target = redirect_target(ex)
            if target is None:
                yield ex
                return
            ex.drain()
        log.debug("%s %s redirected to %s", method, url, target)
        url = target
    raise HttpIOError(f"more than {max_redirects} redirects for {method} {url}")
