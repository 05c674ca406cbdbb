"""Vectored reads: coalesce fragment reads into few multi-range requests.

The pipeline is ``normalize_fragments`` (sort, merge within a gap threshold),
``partition_ranges`` (split the merged ranges into requests that respect the
per-request range count and Range header size), then ``vector_read`` which
dispatches the batches over the session pool and scatters the bytes back into
each fragment's destination buffer.

When a server does not honour multi-range requests the read degrades, in
order, to slicing a coalesced single range, slicing a full body (size-guarded)
and finally one single-range GET per merged range.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from .engine import FULL_BODY, EngineLimits, RangedResponse, execute_ranged_get
from .errors import (
    FullBodyTooLarge,
    HttpError,
    HttpIOError,
    MalformedResponse,
    RangeNotSatisfiable,
    TransportError,
)
from .pool import SessionPool
from .ranges import ByteRange, range_header_length
from .transport import RequestCounter

log = logging.getLogger(__name__)


@dataclass
class FragmentRequest:
    id: Any
    range: ByteRange
    destination: Any = None  # writable buffer of len == range.length

    def __post_init__(self):
        if self.destination is None:
            self.destination = bytearray(self.range.length)
        elif len(self.destination) != self.range.length:
            raise ValueError(f"fragment {self.id!r}: destination holds {len(self.destination)} "
                             f"bytes, range needs {self.range.length}")

    @classmethod
    def of(cls, offset: int, length: int, id=None, destination=None) -> "FragmentRequest":
        return cls(id if id is not None else offset, ByteRange(offset, length), destination)


@dataclass
class FragmentOutcome:
    fragment: FragmentRequest
    error: Optional[Exception] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def data(self) -> bytes:
        if self.error is not None:
            raise self.error
        return bytes(self.fragment.destination)


@dataclass
class VectorConfig:
    gap_threshold: int = 2048
    max_ranges_per_request: int = 200
    max_range_header_bytes: int = 7000
    max_concurrent_batches: int = 4

    def validate(self):
        from .errors import ConfigInvalid

        if self.gap_threshold < 0:
            raise ConfigInvalid("vector.gap_threshold", "must be >= 0")
        if self.max_ranges_per_request < 1:
            raise ConfigInvalid("vector.max_ranges_per_request", "must be >= 1")
        if self.max_range_header_bytes < 1:
            raise ConfigInvalid("vector.max_range_header_bytes", "must be >= 1")
        if self.max_concurrent_batches < 1:
            raise ConfigInvalid("vector.max_concurrent_batches", "must be >= 1")
        return self


@dataclass
class PlanStats:
    input_fragments: int = 0
    coalesced_ranges: int = 0
    batch_count: int = 0
    extra_bytes: int = 0


@dataclass
class VectorPlan:
    coalesced: list = field(default_factory=list)   # [ByteRange], sorted, disjoint
    batches: list = field(default_factory=list)     # [[coalesced index, ...], ...]
    mapping: list = field(default_factory=list)     # per fragment: (coalesced index, offset within it)
    stats: PlanStats = field(default_factory=PlanStats)


def normalize_fragments(fragments: Sequence[FragmentRequest], config: VectorConfig) -> VectorPlan:
    plan = VectorPlan(stats=PlanStats(input_fragments=len(fragments)))
    if not fragments:
        return plan
    order = sorted(range(len(fragments)), key=lambda i: (fragments[i].range.offset, fragments[i].range.length))
    plan.mapping = [None] * len(fragments)
    gap = config.gap_threshold
    union = 0
    start = end = None
    members = []

    def flush():
        idx = len(plan.coalesced)
        plan.coalesced.append(ByteRange(start, end - start))
        for i in members:
            plan.mapping[i] = (idx, fragments[i].range.offset - start)

    for i in order:
        r = fragments[i].range
        if start is None:
            start, end, members = r.offset, r.end, [i]
            union += r.length
            continue
        if r.offset <= end + gap:
            if r.end > end:
                union += r.end - max(r.offset, end)
                end = r.end
            members.append(i)
        else:
            flush()
            start, end, members = r.offset, r.end, [i]
            union += r.length
    flush()
    plan.stats.coalesced_ranges = len(plan.coalesced)
    plan.stats.extra_bytes = sum(r.length for r in plan.coalesced) - union
    return plan


def partition_ranges(plan: VectorPlan, config: VectorConfig) -> VectorPlan:
    """Greedy left-to-right split of the coalesced ranges into requests."""
    batches = []
    current = []
    header_len = 0
    for idx, r in enumerate(plan.coalesced):
        spec_len = range_header_length([r]) - len("bytes=")
        grown = header_len + spec_len + (1 if current else len("bytes="))
        if current and (len(current) >= config.max_ranges_per_request
                        or grown > config.max_range_header_bytes):
            batches.append(current)
            current, header_len = [], 0
            grown = len("bytes=") + spec_len
        current.append(idx)
        header_len = grown
    if current:
        batches.append(current)
    plan.batches = batches
    plan.stats.batch_count = len(batches)
    return plan


def plan_fragments(fragments: Sequence[FragmentRequest], config: VectorConfig) -> VectorPlan:
    return partition_ranges(normalize_fragments(fragments, config), config)


class _Reader:
    """State for one vector_read call."""

    def __init__(self, pool, uri, fragments, plan, limits, credential_id, counter, headers):
        self.pool = pool
        self.uri = uri
        self.fragments = fragments
        self.plan = plan
        self.limits = limits
        self.credential_id = credential_id
        self.counter = counter
        self.headers = headers
        self.errors = [None] * len(fragments)
        self.filled = [False] * len(fragments)
        self.members = [[] for _ in plan.coalesced]
        for i, (cidx, _) in enumerate(plan.mapping):
            self.members[cidx].append(i)
        # set once a server shows it answers only one range per request
        self.single_only = threading.Event()

    def get(self, ranges) -> RangedResponse:
        return execute_ranged_get(self.pool, self.uri, ranges, self.limits,
                                  credential_id=self.credential_id, counter=self.counter,
                                  headers=self.headers)

    def scatter(self, cidx, resp: RangedResponse) -> bool:
        """Fill the fragments of merged range ``cidx`` from ``resp``.

        Returns False if some fragment is neither served nor provably past EOF.
        """
        complete = True
        for i in self.members[cidx]:
            if self.filled[i] or self.errors[i] is not None:
                continue
            frag = self.fragments[i]
            data = resp.slice(frag.range)
            if data is not None:
                frag.destination[:] = data
                self.filled[i] = True
            elif resp.total_size is not None and frag.range.end > resp.total_size:
                self.errors[i] = RangeNotSatisfiable(resp.total_size)
            else:
                complete = False
        return complete

    def fail(self, cidx, exc):
        for i in self.members[cidx]:
            if not self.filled[i] and self.errors[i] is None:
                self.errors[i] = exc

    def run_batch(self, batch):
        pending = list(batch)
        if len(pending) > 1 and not self.single_only.is_set():
            ranges = [self.plan.coalesced[c] for c in pending]
            try:
                resp = self.get(ranges)
            except RangeNotSatisfiable as exc:
                for c in pending:
                    self.fail(c, exc)
                return
            except FullBodyTooLarge as exc:
                log.info("%s: %s; falling back to per-range GETs", self.uri, exc)
                resp = None
            except HttpIOError as exc:
                for c in pending:
                    self.fail(c, exc)
                return
            if resp is not None:
                pending = [c for c in pending if not self.scatter(c, resp)]
                if pending and resp.kind != FULL_BODY:
                    # answered fewer ranges than asked: stop sending multi-range
                    self.single_only.set()
        for c in pending:
            self.run_single(c)

    def run_single(self, cidx):
        try:
            resp = self.get([self.plan.coalesced[cidx]])
        except HttpIOError as exc:
            self.fail(cidx, exc)
            return
        if not self.scatter(cidx, resp):
            self.fail(cidx, MalformedResponse(
                f"{self.uri}: server did not return bytes {self.plan.coalesced[cidx].offset}"
                f"+{self.plan.coalesced[cidx].length}"))


def vector_read(pool: SessionPool, uri: str, fragments: Sequence[FragmentRequest],
                config: Optional[VectorConfig] = None, *,
                limits: EngineLimits = EngineLimits(),
                credential_id: str = "anonymous",
                counter: Optional[RequestCounter] = None,
                headers: Optional[dict] = None,
                plan: Optional[VectorPlan] = None,
                timings: Optional[list] = None) -> list:
    """Read every fragment, returning one ``FragmentOutcome`` per input, in order.

    Fragments past the end of the object fail individually with
    ``RangeNotSatisfiable``. If nothing could be read at all, the first
    transport or HTTP error is raised instead. ``timings``, if given, receives
    one ``(batch index, seconds)`` pair per batch.
    """
    config = config or VectorConfig()
    fragments = list(fragments)
    if not fragments:
        return []
    if plan is None:
        plan = plan_fragments(fragments, config)
    reader = _Reader(pool, uri, fragments, plan, limits, credential_id, counter, headers)

    def run(i):
        t0 = time.perf_counter()
        reader.run_batch(plan.batches[i])
        if timings is not None:
            timings.append((i, time.perf_counter() - t0))

    workers = min(config.max_concurrent_batches, len(plan.batches))
    if workers <= 1:
        for i in range(len(plan.batches)):
            run(i)
    else:
        with ThreadPoolExecutor(workers, thread_name_prefix="vecread") as pool_exec:
            for fut in [pool_exec.submit(run, i) for i in range(len(plan.batches))]:
                fut.result()
    outcomes = [FragmentOutcome(f, e) for f, e in zip(fragments, reader.errors)]
    if not any(reader.filled):
        hard = [e for e in reader.errors if e is not None and not isinstance(e, RangeNotSatisfiable)]
        if hard:
            raise hard[0]
    return outcomes


def is_failover_error(exc: BaseException) -> bool:
    """Errors that mean "this location cannot serve the data"."""
    if isinstance(exc, (TransportError, MalformedResponse)):
        return True
    if isinstance(exc, HttpError):
        return exc.status == 404 or exc.status >= 500
    return False
