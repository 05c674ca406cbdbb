import random
import shutil
import socket
import threading

import pytest

from hpchttp.testbed import FaultPlan, LatencyModel, serve

SMALL_SIZE = 700
MEDIUM_SIZE = 300_000


def _payload(size, seed):
    return random.Random(seed).randbytes(size)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Primary root plus three replica roots holding identical objects."""
    base = tmp_path_factory.mktemp("corpus")
    objects = {
        "small.bin": _payload(SMALL_SIZE, 1),
        "kib.bin": _payload(1024, 2),
        "twenty.bin": bytes(range(20)),
        "medium.bin": _payload(MEDIUM_SIZE, 3),
    }
    extra = {"replica-only.bin": _payload(5000, 4)}
    roots = {}
    for name in ("primary", "r0", "r1", "r2"):
        d = base / name
        d.mkdir()
        for fname, data in objects.items():
            (d / fname).write_bytes(data)
        roots[name] = str(d)
    for name in ("r1", "r2"):
        (base / name / "replica-only.bin").write_bytes(extra["replica-only.bin"])
    (base / "primary" / "ro").mkdir()
    (base / "primary" / "ro" / "locked.bin").write_bytes(b"locked")
    return {"roots": roots, "objects": {**objects, **extra}}


@pytest.fixture
def testbed(corpus, tmp_path):
    """Fresh server per test on a private writable copy of the primary root."""
    primary = tmp_path / "primary"
    shutil.copytree(corpus["roots"]["primary"], primary)
    replicas = [(n, corpus["roots"][n]) for n in ("r0", "r1", "r2")]
    handle = serve(str(primary), replicas, LatencyModel(), FaultPlan())
    yield handle
    handle.stop()


@pytest.fixture
def objects(corpus):
    return corpus["objects"]


# -- acceptance reporting ----------------------------------------------------

_AC_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(tag, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    tag, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        if rep.failed:
            msg = str(rep.longrepr).strip().splitlines()
            detail = (detail + " | " if detail else "") + (msg[-1] if msg else "failed")
        _AC_RESULTS[tag] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _AC_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for tag in sorted(_AC_RESULTS, key=lambda t: int(t[2:])):
        status, title, detail = _AC_RESULTS[tag]
        tr.write_line(f"{tag:<5} {status}  {title}" + (f"  [{detail}]" if detail else ""))



class CannedServer:
    """Loopback server replying to each request with ``respond(request_head)`` bytes.

    Keeps connections open between requests; used for replies the test
    server never produces (reordered parts, broken framing, redirects).
    """

    def __init__(self, respond):
        self.respond = respond
        self.requests = []
        self.accepts = 0
        self.sock = socket.socket()
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(16)
        self.port = self.sock.getsockname()[1]
        self.url = f"http://127.0.0.1:{self.port}"
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _accept_loop(self):
        while True:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            self.accepts += 1
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn):
        buf = b""
        with conn:
            while True:
                while b"\r\n\r\n" not in buf:
                    try:
                        chunk = conn.recv(65536)
                    except OSError:
                        return
                    if not chunk:
                        return
                    buf += chunk
                head, _, buf = buf.partition(b"\r\n\r\n")
                text = head.decode("latin-1")
                self.requests.append(text)
                reply = self.respond(text)
                if reply is None:
                    return
                conn.sendall(reply)

    def close(self):
        self.sock.close()


@pytest.fixture
def canned():
    servers = []

    def make(respond):
        s = CannedServer(respond)
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.close()


def http_reply(status, headers, body=b"", reason="X"):
    lines = [f"HTTP/1.1 {status} {reason}"] + [f"{k}: {v}" for k, v in headers.items()]
    if "Content-Length" not in headers:
        lines.append(f"Content-Length: {len(body)}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1") + body
