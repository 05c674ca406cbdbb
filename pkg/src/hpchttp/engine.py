"""Execute single- and multi-range GETs and normalize every legal reply shape."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import (
    FullBodyTooLarge,
    HttpError,
    MalformedContentRange,
    MalformedMultipart,
    MalformedResponse,
    RangeNotSatisfiable,
)
from .pool import SessionPool
from .ranges import (
    PART_HEADER_LIMIT,
    ByteRange,
    MultipartByterangesParser,
    boundary_from_content_type,
    compose_range_header,
    parse_content_range,
    unsatisfied_total,
)
from .transport import RequestCounter, exchange_following

SINGLE = "single"
MULTIPART = "multipart"
FULL_BODY = "full_body"


@dataclass(frozen=True)
class EngineLimits:
    max_full_body_fallback: int = 64 * 1024 * 1024
    max_part_header_bytes: int = PART_HEADER_LIMIT


@dataclass
class RangedResponse:
    kind: str
    parts: list  # [(ByteRange, bytes)] sorted by offset
    total_size: Optional[int]
    connection_reusable: bool = False
    requested: list = field(default_factory=list)

    def slice(self, rng: ByteRange) -> Optional[bytes]:
        """Bytes for ``rng`` if some returned part fully contains it."""
        offsets = self.__dict__.get("_offsets")
        if offsets is None or len(offsets) != len(self.parts):
            offsets = self.__dict__["_offsets"] = [p[0].offset for p in self.parts]
        i = bisect.bisect_right(offsets, rng.offset) - 1
        # parts may overlap when a server answers with redundant ranges
        while i >= 0:
            prange, data = self.parts[i]
            if prange.contains(rng):
                start = rng.offset - prange.offset
                return data[start:start + rng.length]
            i -= 1
        return None

    def covers(self, rng: ByteRange) -> bool:
        return self.slice(rng) is not None


def _read_exact(ex, n: int) -> bytes:
    chunks = []
    left = n
    while left > 0:
        chunk = ex.read(min(left, 1 << 20))
        if not chunk:
            ex.failed = True
            raise MalformedResponse(f"body truncated: {n - left} of {n} bytes")
        chunks.append(chunk)
        left -= len(chunk)
    return b"".join(chunks)


def _read_bounded(ex, limit: int) -> bytes:
    chunks = []
    size = 0
    while True:
        chunk = ex.read(1 << 20)
        if not chunk:
            return b"".join(chunks)
        size += len(chunk)
        if size > limit:
            ex.failed = True
            raise FullBodyTooLarge(size, limit)
        chunks.append(chunk)


def _content_length(ex) -> Optional[int]:
    value = ex.header("Content-Length")
    if value is None:
        return None
    try:
        n = int(value)
    except ValueError:
        return None
    return n if n >= 0 else None


def execute_ranged_get(pool: SessionPool, uri: str, ranges: Sequence[ByteRange],
                       limits: EngineLimits = EngineLimits(), *,
                       credential_id: str = "anonymous",
                       counter: Optional[RequestCounter] = None,
                       headers: Optional[dict] = None) -> RangedResponse:
    """One GET carrying every range in ``ranges``.

    Parts come back sorted by offset and are looked up by containment, so
    reordered multipart replies and coalesced single-range replies are both
    handled. A 200 reply is accepted only up to ``max_full_body_fallback``.
    """
    hdrs = {"Range": compose_range_header(ranges), "Accept-Encoding": "identity"}
    if headers:
        hdrs.update(headers)
    with exchange_following(pool, "GET", uri, headers=hdrs,
                            credential_id=credential_id, counter=counter) as ex:
        status = ex.status
        if status == 206:
            result = _read_partial(ex, limits)
        elif status == 200:
            length = _content_length(ex)
            if length is not None and length > limits.max_full_body_fallback:
                ex.failed = True
                raise FullBodyTooLarge(length, limits.max_full_body_fallback)
            if length is not None:
                data = _read_exact(ex, length)
            else:
                data = _read_bounded(ex, limits.max_full_body_fallback)
            parts = [(ByteRange(0, len(data)), data)] if data else []
            result = RangedResponse(FULL_BODY, parts, len(data))
        elif status == 416:
            total = unsatisfied_total(ex.header("Content-Range"))
            ex.drain()
            raise RangeNotSatisfiable(total)
        else:
            ex.drain()
            raise HttpError(status, ex.reason, ex.url)
        # the epilogue, if any
        ex.drain()
    result.connection_reusable = ex.reusable
    result.requested = list(ranges)
    return result


def _read_partial(ex, limits: EngineLimits) -> RangedResponse:
    ctype = ex.header("Content-Type") or ""
    boundary = boundary_from_content_type(ctype)
    if boundary is not None:
        parser = MultipartByterangesParser(ex, boundary, max_header_bytes=limits.max_part_header_bytes)
        try:
            parts = list(parser)
        except MalformedMultipart:
            ex.failed = True
            raise
        parts.sort(key=lambda p: (p[0].offset, -p[0].length))
        return RangedResponse(MULTIPART, parts, parser.total)
    if ctype.lower().startswith("multipart/"):
        ex.failed = True
        raise MalformedMultipart(f"multipart reply without usable boundary: {ctype!r}")
    try:
        info = parse_content_range(ex.header("Content-Range") or "")
    except MalformedContentRange:
        ex.failed = True
        raise
    data = _read_exact(ex, info.last - info.first + 1)
    return RangedResponse(SINGLE, [(info.range, data)], info.total)
