import random
import shutil
import ssl
import subprocess
import threading
import time

import pytest

from hpchttp.errors import AcquireTimeout, ConfigInvalid, ConnectFailed, MalformedUri
from hpchttp.pool import PoolConfig, SessionKey, SessionPool, session_key
from hpchttp.testbed import FaultPlan, LatencyModel, Testbed
from hpchttp.transport import RequestCounter, exchange


class FakeConn:
    def __init__(self, key):
        self.key = key
        self.closed = False

    def close(self):
        self.closed = True


class FakeClock:
    def __init__(self):
        self.now = 1000.0

    def __call__(self):
        return self.now


def fake_pool(**cfg):
    clock = FakeClock()
    opened = []

    def connector(key, config):
        conn = FakeConn(key)
        opened.append(conn)
        return conn

    pool = SessionPool(PoolConfig(**cfg), connector=connector, clock=clock)
    return pool, clock, opened


K = SessionKey("http", "data.example", 80, "anon")


def test_session_key_examples():
    assert session_key("http://data.example:8080/f1", "anon") == SessionKey("http", "data.example", 8080, "anon")
    assert session_key("https://Data.Example/f2", "anon") == SessionKey("https", "data.example", 443, "anon")
    with pytest.raises(MalformedUri):
        session_key("ftp://x/y", "anon")


@pytest.mark.parametrize("uri", ["http:///nohost", "not a uri", "http://h:0/", "http://h:70000/"])
def test_session_key_malformed(uri):
    with pytest.raises(MalformedUri):
        session_key(uri, "anon")


def test_session_key_invariants():
    a = session_key("http://h/a?x=1#frag", "c")
    assert a == session_key("http://H:80/b", "c")
    assert a != session_key("http://h/a", "d")
    assert session_key("http://[::1]/x", "c").host == "::1"


@pytest.mark.parametrize("field,value,key", [
    ("max_sessions_per_key", 0, "pool.max_per_key"),
    ("max_total_sessions", 4, "pool.max_total"),
    ("idle_ttl", -1, "pool.idle_ttl_s"),
    ("connect_timeout", 0, "pool.connect_timeout_s"),
])
def test_config_invalid(field, value, key):
    cfg = PoolConfig(max_sessions_per_key=8, **{field: value}) if field != "max_sessions_per_key" \
        else PoolConfig(max_sessions_per_key=value)
    with pytest.raises(ConfigInvalid) as ei:
        cfg.validate()
    assert ei.value.key == key


def test_reuse_and_create_paths():
    pool, _, opened = fake_pool()
    s = pool.acquire(K)
    assert pool.stats().sessions_created == 1
    pool.release(s, True)
    assert pool.idle_sessions(K) == [s]
    s2 = pool.acquire(K)
    assert s2 is s
    st = pool.stats()
    assert (st.sessions_created, st.sessions_reused, st.current_idle, st.current_leased) == (1, 1, 0, 1)


def test_release_not_reusable_closes():
    pool, _, opened = fake_pool()
    s = pool.acquire(K)
    pool.release(s, False)
    assert opened[0].closed
    assert pool.stats().current_idle == 0
    assert pool.acquire(K) is not s


def test_release_twice_rejected():
    pool, _, _ = fake_pool()
    s = pool.acquire(K)
    pool.release(s, True)
    with pytest.raises(ValueError):
        pool.release(s, True)


def test_mru_order():
    pool, _, _ = fake_pool()
    a, b = pool.acquire(K), pool.acquire(K)
    pool.release(a, True)
    pool.release(b, True)
    assert pool.acquire(K) is b


def test_serial_cycles_counts():
    pool, _, _ = fake_pool()
    for _ in range(100):
        pool.release(pool.acquire(K), True)
    st = pool.stats()
    assert (st.sessions_created, st.sessions_reused) == (1, 99)


def test_evict_idle():
    pool, clock, _ = fake_pool(idle_ttl=60)
    assert pool.evict_idle() == 0
    s = [pool.acquire(K) for _ in range(4)]
    for x in s[:2]:
        pool.release(x, True)
    clock.now += 100
    pool.release(s[2], True)
    # s[3] stays leased
    assert pool.evict_idle(clock.now) == 2
    st = pool.stats()
    assert (st.current_idle, st.current_leased, st.sessions_evicted) == (1, 1, 2)
    assert pool.idle_sessions(K) == [s[2]]


def test_evict_never_touches_leased():
    pool, clock, _ = fake_pool(idle_ttl=1)
    leased = [pool.acquire(K) for _ in range(3)]
    clock.now += 1e6
    assert pool.evict_idle() == 0
    assert pool.stats().current_leased == 3
    assert all(s.leased for s in leased)


def test_acquire_timeout_when_saturated():
    # real clock: the deadline has to pass
    pool = SessionPool(PoolConfig(max_sessions_per_key=1, max_total_sessions=1, connect_timeout=0.05),
                       connector=lambda k, c: FakeConn(k))
    pool.acquire(K)
    with pytest.raises(AcquireTimeout):
        pool.acquire(K)


def test_blocked_acquire_wakes_on_release():
    pool = SessionPool(PoolConfig(max_sessions_per_key=1, max_total_sessions=1, connect_timeout=5),
                       connector=lambda k, c: FakeConn(k))
    s = pool.acquire(K)
    got = []
    t = threading.Thread(target=lambda: got.append(pool.acquire(K)))
    t.start()
    time.sleep(0.05)
    pool.release(s, True)
    t.join(2)
    assert got == [s]


def test_total_cap_evicts_lru_idle_of_other_key():
    pool, clock, opened = fake_pool(max_sessions_per_key=2, max_total_sessions=2)
    k2 = SessionKey("http", "other", 80, "anon")
    a = pool.acquire(K)
    clock.now += 1
    b = pool.acquire(K)
    pool.release(a, True)
    clock.now += 1
    pool.release(b, True)
    pool.acquire(k2)
    assert opened[0].closed and not opened[1].closed
    assert pool.open_counts()[0] == 2


def test_connect_failure_frees_slot():
    calls = []

    def connector(key, cfg):
        calls.append(key)
        if len(calls) == 1:
            raise OSError("refused")
        return FakeConn(key)

    pool = SessionPool(PoolConfig(max_sessions_per_key=1, max_total_sessions=1), connector=connector)
    with pytest.raises(ConnectFailed):
        pool.acquire(K)
    assert pool.open_counts()[0] == 0
    assert pool.acquire(K) is not None
    assert pool.stats().connect_failures == 1


def test_serial_use_under_stress():
    """No session is ever leased to two holders at once."""
    pool = SessionPool(PoolConfig(max_sessions_per_key=4, max_total_sessions=6, connect_timeout=10),
                       connector=lambda k, c: FakeConn(k))
    keys = [SessionKey("http", f"h{i}", 80, "anon") for i in range(3)]
    holders = {}
    lock = threading.Lock()
    violations = []

    def worker(seed):
        rnd = random.Random(seed)
        for _ in range(300):
            s = pool.acquire(rnd.choice(keys))
            with lock:
                if id(s) in holders:
                    violations.append(s)
                holders[id(s)] = seed
            time.sleep(rnd.random() / 5000)
            with lock:
                del holders[id(s)]
            pool.release(s, rnd.random() < 0.9)
            total, per_key = pool.open_counts()
            if total > 6 or any(v > 4 for v in per_key.values()):
                violations.append((total, per_key))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert violations == []
    st = pool.stats()
    assert st.current_leased == 0
    assert st.sessions_created + st.sessions_reused == 12 * 300


# -- against the test server ----------------------------------------------------


def _get(pool, url, counter=None, credential="anonymous", headers=None):
    with exchange(pool, "GET", url, counter=counter, credential_id=credential, headers=headers) as ex:
        body = ex.read()
        return ex.status, body


def test_keepalive_single_accept(testbed, objects):
    pool = SessionPool()
    counter = RequestCounter()
    for _ in range(20):
        status, body = _get(pool, testbed.url_for("kib.bin"), counter)
        assert (status, body) == (200, objects["kib.bin"])
    m = testbed.snapshot_metrics()
    assert (m.tcp_accepts, m.requests_total, counter.value) == (1, 20, 20)


def test_connection_close_forces_new_connection(testbed):
    testbed.set_faults(FaultPlan().add("connection_close_every", 1))
    pool = SessionPool()
    _get(pool, testbed.url_for("kib.bin"))
    _get(pool, testbed.url_for("kib.bin"))
    assert testbed.snapshot_metrics().tcp_accepts == 2
    assert pool.stats().sessions_created == 2


def test_stale_recycled_socket_is_retried(testbed):
    pool = SessionPool()
    _get(pool, testbed.url_for("kib.bin"))
    _kill_server_side(testbed)
    time.sleep(0.05)
    status, _ = _get(pool, testbed.url_for("kib.bin"))
    assert status == 200
    assert pool.stats().sessions_created == 2


def _kill_server_side(testbed):
    import socket

    for s in list(testbed._conns):
        try:
            s.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass


def test_credentials_never_share_connections(testbed):
    pool = SessionPool()
    url = testbed.url_for("kib.bin")
    for i in range(12):
        cred = f"user{i % 3}"
        _get(pool, url, credential=cred, headers={"X-Client-Tag": cred})
    tags = testbed.connection_tags()
    assert len(tags) == 3
    assert all(len(t) == 1 for t in tags.values())
    assert sorted(next(iter(t)) for t in tags.values()) == ["user0", "user1", "user2"]


def test_connect_failed_on_closed_port():
    import socket

    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    pool = SessionPool(PoolConfig(connect_timeout=2))
    with pytest.raises(ConnectFailed):
        pool.acquire(session_key(f"http://127.0.0.1:{port}/", "anonymous"))


@pytest.fixture
def tls_testbed(corpus, tmp_path):
    if shutil.which("openssl") is None:
        pytest.skip("openssl CLI not available")
    cert, key = tmp_path / "cert.pem", tmp_path / "key.pem"
    subprocess.run(["openssl", "req", "-x509", "-newkey", "rsa:2048", "-nodes", "-days", "1",
                    "-subj", "/CN=localhost", "-addext", "subjectAltName=DNS:localhost,IP:127.0.0.1",
                    "-keyout", str(key), "-out", str(cert)], check=True, capture_output=True)
    handle = Testbed(corpus["roots"]["primary"], (), LatencyModel(), FaultPlan())
    server_ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    server_ctx.load_cert_chain(str(cert), str(key))
    # loopback TLS shim: wrap the listening socket before serving
    handle._server.socket = server_ctx.wrap_socket(handle._server.socket, server_side=True)
    handle.start()
    client_ctx = ssl.create_default_context(cafile=str(cert))
    yield handle, client_ctx
    handle.stop()


def test_https_pooling_through_tls_shim(tls_testbed, objects):
    handle, ctx = tls_testbed
    pool = SessionPool(ssl_context=ctx)
    url = f"https://localhost:{handle.port}/kib.bin"
    for _ in range(5):
        assert _get(pool, url) == (200, objects["kib.bin"])
    key = session_key(url, "anonymous")
    assert (key.scheme, key.port) == ("https", handle.port)
    assert pool.stats().sessions_created == 1
    assert handle.snapshot_metrics().tcp_accepts == 1
