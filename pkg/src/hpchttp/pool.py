"""Keep-alive connection pool keyed by endpoint identity.

Connections are plain HTTP/1.1 without pipelining: a session is leased to one
request at a time and goes back to the idle set only when the exchange left
the connection in a clean state.
"""

from __future__ import annotations

import http.client
import logging
import ssl
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Optional
from urllib.parse import urlsplit

from .errors import AcquireTimeout, ConnectFailed, MalformedUri

log = logging.getLogger(__name__)

DEFAULT_PORTS = {"http": 80, "https": 443}


@dataclass(frozen=True)
class SessionKey:
    scheme: str
    host: str
    port: int
    credential_id: str = "anonymous"

    def __str__(self):
        return f"{self.scheme}://{self.host}:{self.port}#{self.credential_id}"


def session_key(uri: str, credential_id: Optional[str] = "anonymous") -> SessionKey:
    try:
        parts = urlsplit(uri)
        port = parts.port
    except ValueError as exc:
        raise MalformedUri(f"{uri!r}: {exc}") from None
    scheme = parts.scheme.lower()
    if scheme not in DEFAULT_PORTS:
        raise MalformedUri(f"unsupported scheme in {uri!r}")
    host = (parts.hostname or "").lower()
    if not host:
        raise MalformedUri(f"no host in {uri!r}")
    if port is None:
        port = DEFAULT_PORTS[scheme]
    if not 1 <= port <= 65535:
        raise MalformedUri(f"port out of range in {uri!r}")
    return SessionKey(scheme, host, port, credential_id or "anonymous")


@dataclass
class PoolConfig:
    max_sessions_per_key: int = 16
    max_total_sessions: int = 128
    idle_ttl: float = 60.0
    connect_timeout: float = 30.0
    io_timeout: float = 60.0
    tcp_connect_timeout: Optional[float] = None  # defaults to connect_timeout

    def validate(self):
        from .errors import ConfigInvalid

        if self.max_sessions_per_key < 1:
            raise ConfigInvalid("pool.max_per_key", "must be >= 1")
        if self.max_total_sessions < self.max_sessions_per_key:
            raise ConfigInvalid("pool.max_total", "must be >= pool.max_per_key")
        if self.idle_ttl < 0:
            raise ConfigInvalid("pool.idle_ttl_s", "must be >= 0")
        if self.connect_timeout <= 0:
            raise ConfigInvalid("pool.connect_timeout_s", "must be > 0")
        if self.io_timeout <= 0:
            raise ConfigInvalid("http.io_timeout_s", "must be > 0")
        if self.tcp_connect_timeout is not None and self.tcp_connect_timeout <= 0:
            raise ConfigInvalid("http.connect_timeout_s", "must be > 0")
        return self


@dataclass
class PoolStats:
    sessions_created: int = 0
    sessions_reused: int = 0
    sessions_evicted: int = 0
    current_idle: int = 0
    current_leased: int = 0
    connect_failures: int = 0
    close_failures: int = 0

    def as_text(self, prefix="pool.") -> str:
        return "".join(f"{prefix}{k}={v}\n" for k, v in vars(self).items())


@dataclass(eq=False)
class PooledSession:
    key: SessionKey
    connection: http.client.HTTPConnection
    created_at: float
    last_used_at: float
    requests_served: int = 0
    leased: bool = field(default=False, repr=False)

    @property
    def recycled(self) -> bool:
        return self.requests_served > 0


def open_connection(key: SessionKey, config: PoolConfig,
                    ssl_context: Optional[ssl.SSLContext] = None) -> http.client.HTTPConnection:
    timeout = config.tcp_connect_timeout or config.connect_timeout
    if key.scheme == "https":
        conn = http.client.HTTPSConnection(key.host, key.port, timeout=timeout,
                                           context=ssl_context or ssl.create_default_context())
    else:
        conn = http.client.HTTPConnection(key.host, key.port, timeout=timeout)
    conn.connect()
    conn.sock.settimeout(config.io_timeout)
    # a dropped socket must surface as an error, never as a silent reconnect
    conn.auto_open = 0
    return conn


class SessionPool:
    """Thread-safe pool of reusable HTTP/1.1 connections.

    ``acquire`` hands out the most recently used idle connection for a key,
    opens a new one while the per-key and total caps allow it, and otherwise
    waits up to ``connect_timeout`` for a release. New connections are opened
    outside the pool lock.
    """

    def __init__(self, config: Optional[PoolConfig] = None, *,
                 connector: Optional[Callable] = None,
                 ssl_context: Optional[ssl.SSLContext] = None,
                 clock: Callable[[], float] = time.monotonic):
        self.config = (config or PoolConfig()).validate()
        self._connector = connector or (lambda key, cfg: open_connection(key, cfg, ssl_context))
        self._clock = clock
        self._cond = threading.Condition()
        self._idle = defaultdict(deque)   # key -> deque, most recent on the right
        self._open = defaultdict(int)     # key -> idle + leased + connecting
        self._open_total = 0
        self._stats = PoolStats()
        self._closed = False

    # -- leasing -----------------------------------------------------------

    def acquire(self, key: SessionKey, *, fresh: bool = False) -> PooledSession:
        cfg = self.config
        deadline = self._clock() + cfg.connect_timeout
        doomed = []
        timed_out = False
        with self._cond:
            while True:
                if self._closed:
                    raise RuntimeError("session pool is closed")
                idle = self._idle.get(key)
                if idle and not fresh:
                    session = idle.pop()
                    session.leased = True
                    self._stats.current_idle -= 1
                    self._stats.current_leased += 1
                    self._stats.sessions_reused += 1
                    return session
                if fresh and idle:
                    # caller distrusts recycled sockets for this key: drop one to make room
                    doomed.append(self._drop_idle_locked(idle.popleft()))
                    continue
                if self._open[key] < cfg.max_sessions_per_key:
                    if self._open_total >= cfg.max_total_sessions:
                        victim = self._lru_idle_locked()
                        if victim is not None:
                            doomed.append(victim)
                            continue
                    else:
                        self._open[key] += 1
                        self._open_total += 1
                        break
                remaining = deadline - self._clock()
                if remaining <= 0:
                    timed_out = True
                    break
                self._close_all(doomed)
                doomed = []
                self._cond.wait(remaining)
        self._close_all(doomed)
        if timed_out:
            raise AcquireTimeout(f"no session for {key} within {cfg.connect_timeout}s")
        try:
            conn = self._connector(key, cfg)
        except Exception as exc:
            with self._cond:
                self._open[key] -= 1
                self._open_total -= 1
                self._stats.connect_failures += 1
                self._cond.notify_all()
            raise ConnectFailed(f"cannot connect to {key.host}:{key.port}: {exc}") from exc
        now = self._clock()
        session = PooledSession(key, conn, created_at=now, last_used_at=now, leased=True)
        with self._cond:
            self._stats.sessions_created += 1
            self._stats.current_leased += 1
        return session

    def release(self, session: PooledSession, reusable: bool) -> None:
        with self._cond:
            if not session.leased:
                raise ValueError("releasing a session that is not leased")
            session.leased = False
            self._stats.current_leased -= 1
            now = self._clock()
            session.last_used_at = max(now, session.created_at)
            idle = self._idle[session.key]
            if reusable and not self._closed and len(idle) < self.config.max_sessions_per_key:
                idle.append(session)
                self._stats.current_idle += 1
                self._cond.notify_all()
                return
            self._open[session.key] -= 1
            self._open_total -= 1
            self._cond.notify_all()
        self._close(session)

    # -- hygiene -----------------------------------------------------------

    def evict_idle(self, now: Optional[float] = None) -> int:
        if now is None:
            now = self._clock()
        ttl = self.config.idle_ttl
        doomed = []
        with self._cond:
            for key, idle in list(self._idle.items()):
                keep = deque(s for s in idle if now - s.last_used_at <= ttl)
                for s in idle:
                    if now - s.last_used_at > ttl:
                        doomed.append(s)
                self._idle[key] = keep
            for s in doomed:
                self._open[s.key] -= 1
                self._open_total -= 1
            self._stats.current_idle -= len(doomed)
            self._stats.sessions_evicted += len(doomed)
            if doomed:
                self._cond.notify_all()
        self._close_all(doomed)
        return len(doomed)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            doomed = [s for idle in self._idle.values() for s in idle]
            for s in doomed:
                self._open[s.key] -= 1
                self._open_total -= 1
            self._idle.clear()
            self._stats.current_idle = 0
            self._cond.notify_all()
        self._close_all(doomed)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- introspection -----------------------------------------------------

    def stats(self) -> PoolStats:
        with self._cond:
            return PoolStats(**vars(self._stats))

    def open_counts(self) -> tuple:
        """(total open, {key: open}) including leased and connecting sessions."""
        with self._cond:
            return self._open_total, {k: v for k, v in self._open.items() if v}

    def idle_sessions(self, key: SessionKey) -> list:
        with self._cond:
            return list(self._idle.get(key, ()))

    # -- internals ---------------------------------------------------------

    def _drop_idle_locked(self, session):
        self._open[session.key] -= 1
        self._open_total -= 1
        self._stats.current_idle -= 1
        self._stats.sessions_evicted += 1
        return session

    def _lru_idle_locked(self):
        oldest = None
        for idle in self._idle.values():
            if idle and (oldest is None or idle[0].last_used_at < oldest.last_used_at):
                oldest = idle[0]
        if oldest is None:
            return None
        self._idle[oldest.key].popleft()
        return self._drop_idle_locked(oldest)

    def _close_all(self, sessions):
        for s in sessions:
            self._close(s)

    def _close(self, session):
        try:
            session.connection.close()
        except Exception:
            log.debug("closing %s failed", session.key, exc_info=True)
            with self._cond:
                self._stats.close_failures += 1
