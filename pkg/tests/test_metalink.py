import hashlib
import io
import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import http_reply
from hpchttp.errors import (
    AllReplicasFailed,
    ChecksumMismatch,
    HttpError,
    MalformedMetalink,
    NoReplicaAvailable,
    SizeUnknown,
)
from hpchttp.metalink import (
    MetalinkDocument,
    Replica,
    build_stream_plan,
    discover_metalink,
    failover_read,
    multistream_download,
    order_replicas,
    parse_metalink,
)
from hpchttp.pool import SessionPool
from hpchttp.testbed import FaultPlan
from hpchttp.transport import RequestCounter
from hpchttp.vector import FragmentRequest, VectorConfig

THREE_URLS = b"""<?xml version="1.0" encoding="UTF-8"?>
<metalink xmlns="urn:ietf:params:xml:ns:metalink">
  <file name="run42.root">
    <size>700</size>
    <hash type="sha-256">F2CA1BB6C7E907D06DAFE4687E579FCE76B37E4E93B7605022DA52E6CCC26FD2</hash>
    <url priority="1" location="ch">http://a.example/run42.root</url>
    <url priority="1" location="de">http://b.example/run42.root</url>
    <url priority="2">https://c.example/run42.root</url>
    <url priority="1">ftp://d.example/run42.root</url>
  </file>
</metalink>
"""


def test_parse_three_urls():
    doc = parse_metalink(THREE_URLS)
    assert doc.name == "run42.root" and doc.size == 700
    assert doc.checksums == {"sha-256": "f2ca1bb6c7e907d06dafe4687e579fce76b37e4e93b7605022da52e6ccc26fd2"}
    assert [(r.priority, r.location, r.document_order) for r in doc.replicas] == [
        (1, "ch", 0), (1, "de", 1), (2, None, 2)]
    assert doc.dropped_urls == 1


def test_parse_only_ftp():
    xml = b'<metalink xmlns="urn:ietf:params:xml:ns:metalink"><file name="x"><url>ftp://x/y</url></file></metalink>'
    with pytest.raises(MalformedMetalink):
        parse_metalink(xml)


def test_parse_without_size_and_priority():
    xml = b'<metalink xmlns="urn:ietf:params:xml:ns:metalink"><file name="x"><url>http://x/y</url></file></metalink>'
    doc = parse_metalink(xml)
    assert doc.size is None
    assert doc.replicas[0].priority == 999999


@pytest.mark.parametrize("xml", [b"not xml at all", b"<html/>", b'<metalink xmlns="urn:ietf:params:xml:ns:metalink"/>'])
def test_parse_malformed(xml):
    with pytest.raises(MalformedMetalink):
        parse_metalink(xml)


def _doc(priorities):
    reps = [Replica(f"http://r{i}/f", p, None, i) for i, p in enumerate(priorities)]
    return MetalinkDocument("f", 10, {}, reps)


def test_order_replicas():
    doc = _doc([2, 1, 1])
    assert [r.document_order for r in order_replicas(doc)] == [1, 2, 0]
    assert [r.document_order for r in order_replicas(doc, {"http://r1/f", "http://r2/f"})] == [0]
    with pytest.raises(NoReplicaAvailable):
        order_replicas(doc, {r.url for r in doc.replicas})


@st.composite
def size_and_chunk(draw):
    chunk = draw(st.integers(1, 10**6))
    return draw(st.integers(0, chunk * 300)), chunk


@given(size_and_chunk(), st.integers(1, 8), st.integers(1, 8))
def test_stream_plan_tiles(sc, replicas, streams):
    size, chunk = sc
    plan = build_stream_plan(size, chunk, replicas, streams)
    pos = 0
    for c in plan.chunks:
        assert c.range.offset == pos and 1 <= c.range.length <= chunk
        assert 0 <= c.replica < replicas
        pos = c.range.end
    assert pos == size
    assert sum(c.range.length for c in plan.chunks) == size


# -- discovery ----------------------------------------------------------------


def test_discovery_by_negotiation(testbed):
    counter = RequestCounter()
    doc = discover_metalink(SessionPool(), testbed.url_for("small.bin"), counter=counter)
    assert doc.size == 700 and len(doc.replicas) == 3
    assert counter.value == 1
    assert testbed.snapshot_metrics().metalink_requests == 1


@pytest.mark.parametrize("endpoints,expected", [("query", "query"), ("suffix", "suffix")])
def test_discovery_ladder(testbed, endpoints, expected):
    testbed.set_faults(FaultPlan().add("metalink", (endpoints,)))
    attempts = []
    doc = discover_metalink(SessionPool(), testbed.url_for("small.bin"), attempts=attempts)
    assert doc is not None
    assert attempts[-1][0] == expected and attempts[-1][2] == "ok"


def test_discovery_none_anywhere(testbed):
    testbed.set_faults(FaultPlan().add("metalink", ()))
    attempts = []
    counter = RequestCounter()
    assert discover_metalink(SessionPool(), testbed.url_for("small.bin"), attempts=attempts, counter=counter) is None
    assert len(attempts) == 3 and counter.value <= 3
    # negotiation answered with the object itself: that connection is abandoned,
    # the two 404s share the next one
    assert testbed.snapshot_metrics().tcp_accepts == 2


def test_discovery_garbage_suffix(testbed):
    testbed.set_faults(FaultPlan().add("metalink", ("suffix",)).add("metalink_garbage", "suffix"))
    attempts = []
    assert discover_metalink(SessionPool(), testbed.url_for("small.bin"), attempts=attempts) is None
    assert "MalformedMetalink" in attempts[-1][2]


# -- fail-over ------------------------------------------------------------------


def _frags():
    return [FragmentRequest.of(o, n) for o, n in [(0, 10), (100, 50), (650, 50)]]


def test_failover_happy_path_costs_nothing(testbed, objects):
    counter = RequestCounter()
    out = failover_read(SessionPool(), testbed.url_for("small.bin"), _frags(), counter=counter)
    assert [o.data for o in out] == [objects["small.bin"][o.fragment.range.offset:o.fragment.range.end]
                                     for o in out]
    m = testbed.snapshot_metrics()
    assert (m.metalink_requests, m.requests_total, counter.value) == (0, 1, 1)


def test_failover_to_third_replica(testbed, objects):
    testbed.set_faults(FaultPlan().add("replica_offline", "primary").add("replica_offline", "r0")
                       .add("replica_offline", "r1"))
    out = failover_read(SessionPool(), testbed.url_for("small.bin"), _frags())
    data = objects["small.bin"]
    assert [o.data for o in out] == [data[0:10], data[100:150], data[650:700]]


def test_failover_on_404_primary(testbed, objects):
    # object only exists on the replicas
    out = failover_read(SessionPool(), testbed.url_for("r0only.bin"), [FragmentRequest.of(0, 4)],
                        document=parse_metalink(testbed.metalink_for("small.bin")))
    assert out[0].data == objects["small.bin"][:4]


def test_failover_no_metalink(testbed):
    testbed.set_faults(FaultPlan().add("replica_offline", "primary").add("metalink", ()))
    with pytest.raises(AllReplicasFailed) as ei:
        failover_read(SessionPool(), testbed.url_for("small.bin"), _frags())
    assert len(ei.value.errors) == 1
    assert ei.value.errors[0][0] == testbed.url_for("small.bin")


def test_failover_all_dead(testbed):
    plan = FaultPlan()
    for name in ("primary", "r0", "r1", "r2"):
        plan.add("replica_offline", name)
    testbed.set_faults(plan)
    with pytest.raises(AllReplicasFailed) as ei:
        failover_read(SessionPool(), testbed.url_for("small.bin"), _frags())
    assert len(ei.value.errors) == 4


def test_forbidden_is_not_failed_over(canned):
    srv = canned(lambda req: http_reply(403, {}, b"no"))
    with pytest.raises(HttpError) as ei:
        failover_read(SessionPool(), srv.url + "/f", _frags())
    assert ei.value.status == 403
    assert len(srv.requests) == 1


# -- multi-stream -----------------------------------------------------------------


def test_multistream_spreads_and_verifies(testbed, objects):
    doc = discover_metalink(SessionPool(), testbed.url_for("medium.bin"))
    sink = io.BytesIO()
    report = multistream_download(SessionPool(), doc, sink, streams=3, chunk_size=40_000)
    assert sink.getvalue() == objects["medium.bin"]
    assert report.checksum_verified and report.checksum_algorithm == "sha-256"
    assert sum(report.chunks_per_replica.values()) == 8
    assert all(n >= 1 for n in report.chunks_per_replica.values())


def test_multistream_single_replica_two_streams(testbed, objects):
    doc = discover_metalink(SessionPool(), testbed.url_for("medium.bin"))
    doc.replicas = doc.replicas[:1]
    sink = io.BytesIO()
    report = multistream_download(SessionPool(), doc, sink, streams=2, chunk_size=64_000)
    assert sink.getvalue() == objects["medium.bin"]
    assert list(report.chunks_per_replica.values()) == [5]


def test_multistream_replica_dies(testbed, objects):
    testbed.set_faults(FaultPlan().add("die_after_bytes", "r0", 50_000))
    doc = discover_metalink(SessionPool(), testbed.url_for("medium.bin"))
    sink = io.BytesIO()
    report = multistream_download(SessionPool(), doc, sink, streams=3, chunk_size=30_000)
    assert sink.getvalue() == objects["medium.bin"]
    assert report.migrated_chunks >= 1
    assert doc.replicas[0].url in report.failed_replicas
    assert report.checksum_verified


def test_multistream_all_replicas_die(testbed):
    plan = FaultPlan()
    for name in ("r0", "r1", "r2"):
        plan.add("die_after_bytes", name, 1000)
    testbed.set_faults(plan)
    doc = discover_metalink(SessionPool(), testbed.url_for("medium.bin"))
    with pytest.raises(AllReplicasFailed):
        multistream_download(SessionPool(), doc, io.BytesIO(), streams=3, chunk_size=30_000)


def test_multistream_size_unknown():
    with pytest.raises(SizeUnknown):
        multistream_download(SessionPool(), MetalinkDocument("f", None, {}, [Replica("http://x/f")]), io.BytesIO())


def test_multistream_checksum_mismatch(testbed):
    doc = discover_metalink(SessionPool(), testbed.url_for("small.bin"))
    doc.checksums = {"sha-256": hashlib.sha256(b"something else").hexdigest()}
    with pytest.raises(ChecksumMismatch):
        multistream_download(SessionPool(), doc, io.BytesIO(), chunk_size=100)


def test_multistream_without_checksum_warns(testbed, objects):
    doc = discover_metalink(SessionPool(), testbed.url_for("small.bin"))
    doc.checksums = {}
    report = multistream_download(SessionPool(), doc, io.BytesIO(), chunk_size=100)
    assert not report.checksum_verified and report.warnings


def test_failover_totality_small(testbed, objects):
    """Every non-empty set of live replicas serves the same bytes."""
    names = ("r0", "r1", "r2")
    data = objects["small.bin"]
    for k in range(1, 4):
        for live in itertools.combinations(names, k):
            plan = FaultPlan().add("replica_offline", "primary")
            for n in names:
                if n not in live:
                    plan.add("replica_offline", n)
            testbed.set_faults(plan)
            out = failover_read(SessionPool(), testbed.url_for("small.bin"), _frags(),
                                VectorConfig(gap_threshold=0))
            assert [o.data for o in out] == [data[0:10], data[100:150], data[650:700]], live
