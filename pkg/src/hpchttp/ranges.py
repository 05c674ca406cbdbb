"""Byte ranges, Range/Content-Range grammar and the multipart/byteranges parser."""

from __future__ import annotations

import io
import re
from dataclasses import dataclass
from email.message import Message
from typing import BinaryIO, Iterator, Optional, Sequence, Union

from .errors import (
    EmptyRangeSet,
    MalformedContentRange,
    MalformedMultipart,
    OverlappingRanges,
)

MAX_U64 = 2**64 - 1
PART_HEADER_LIMIT = 8 * 1024


@dataclass(frozen=True, order=True)
class ByteRange:
    offset: int
    length: int

    def __post_init__(self):
        if self.offset < 0:
            raise ValueError(f"negative offset {self.offset}")
        if self.length < 1:
            raise ValueError(f"length must be >= 1, got {self.length}")
        if self.offset + self.length - 1 > MAX_U64:
            raise ValueError("range overflows 64-bit offsets")

    @property
    def end(self) -> int:
        """Exclusive end offset."""
        return self.offset + self.length

    @property
    def last(self) -> int:
        """Inclusive last-byte position, as written on the wire."""
        return self.offset + self.length - 1

    def contains(self, other: "ByteRange") -> bool:
        return self.offset <= other.offset and other.end <= self.end

    @classmethod
    def inclusive(cls, first: int, last: int) -> "ByteRange":
        return cls(first, last - first + 1)


@dataclass(frozen=True)
class ContentRangeInfo:
    first: int
    last: int
    total: Optional[int]  # None when the server sent "*"

    @property
    def range(self) -> ByteRange:
        return ByteRange.inclusive(self.first, self.last)


def compose_range_header(ranges: Sequence[ByteRange]) -> str:
    if not ranges:
        raise EmptyRangeSet("at least one range is required")
    specs = []
    prev_end = None
    for r in ranges:
        if prev_end is not None and r.offset < prev_end:
            raise OverlappingRanges(f"range {r.offset}-{r.last} overlaps or precedes the previous one")
        prev_end = r.end
        specs.append(f"{r.offset}-{r.last}")
    return "bytes=" + ",".join(specs)


def range_header_length(ranges: Sequence[ByteRange]) -> int:
    """Length of compose_range_header(ranges) without building the string."""
    n = len("bytes=") + max(len(ranges) - 1, 0)
    for r in ranges:
        n += len(str(r.offset)) + 1 + len(str(r.last))
    return n


_CONTENT_RANGE_RE = re.compile(r"^\s*bytes\s+(\d+)-(\d+)/(\d+|\*)\s*$", re.IGNORECASE)
_UNSATISFIED_RE = re.compile(r"^\s*bytes\s+\*/(\d+)\s*$", re.IGNORECASE)


def parse_content_range(value: str) -> ContentRangeInfo:
    m = _CONTENT_RANGE_RE.match(value or "")
    if not m:
        raise MalformedContentRange(f"unparseable Content-Range {value!r}")
    first, last = int(m.group(1)), int(m.group(2))
    total = None if m.group(3) == "*" else int(m.group(3))
    if first > last:
        raise MalformedContentRange(f"first byte after last byte in {value!r}")
    if total is not None and total <= last:
        raise MalformedContentRange(f"last byte beyond complete length in {value!r}")
    return ContentRangeInfo(first, last, total)


def unsatisfied_total(value: Optional[str]) -> Optional[int]:
    """Complete length from a 416 reply's "bytes */N", if present."""
    if not value:
        return None
    m = _UNSATISFIED_RE.match(value)
    return int(m.group(1)) if m else None


def boundary_from_content_type(content_type: str) -> Optional[str]:
    """Return the boundary of a multipart/byteranges Content-Type, or None."""
    msg = Message()
    msg["Content-Type"] = content_type
    if msg.get_content_type() != "multipart/byteranges":
        return None
    boundary = msg.get_param("boundary")
    return str(boundary) if boundary else None


class MultipartByterangesParser:
    """Incremental multipart/byteranges reader.

    Pulls from ``stream.read(n)`` and yields ``(ByteRange, bytes)`` per body
    part as soon as the part is complete, so the whole body never has to be
    resident. Part header blocks are bounded by ``max_header_bytes``.
    """

    def __init__(self, stream: BinaryIO, boundary: str, *,
                 max_header_bytes: int = PART_HEADER_LIMIT, read_size: int = 64 * 1024):
        if not boundary:
            raise MalformedMultipart("empty boundary")
        self._stream = stream
        self._dash = b"--" + boundary.encode("latin-1")
        self._max_header = max_header_bytes
        self._read_size = read_size
        self._buf = bytearray()
        self._eof = False
        self.finished = False
        self.total = None  # complete length announced by the parts, if any

    def _fill(self, want: int) -> bool:
        """Grow the buffer to at least ``want`` bytes; False if the stream ran dry."""
        while len(self._buf) < want and not self._eof:
            chunk = self._stream.read(max(self._read_size, want - len(self._buf)))
            if not chunk:
                self._eof = True
                break
            self._buf += chunk
        return len(self._buf) >= want

    def _skip_preamble(self):
        dash = self._dash
        # a delimiter at the very start of the body needs no leading CRLF
        if self._fill(len(dash)) and self._buf.startswith(dash):
            del self._buf[:len(dash)]
            return
        needle = b"\r\n" + dash
        while True:
            idx = self._buf.find(needle)
            if idx >= 0:
                del self._buf[:idx + len(needle)]
                return
            keep = len(needle) - 1
            if len(self._buf) > keep:
                del self._buf[:len(self._buf) - keep]
            if not self._fill(len(self._buf) + 1):
                raise MalformedMultipart("boundary delimiter not found")

    def _after_delimiter(self) -> bool:
        """Consume what follows a delimiter. True if it was the close delimiter."""
        if not self._fill(2):
            raise MalformedMultipart("body ends right after a boundary delimiter")
        if self._buf[:2] == b"--":
            del self._buf[:2]
            self.finished = True
            return True
        # transport padding, then CRLF
        i = 0
        while True:
            if not self._fill(i + 2):
                raise MalformedMultipart("unterminated boundary delimiter line")
            if self._buf[i:i + 2] == b"\r\n":
                break
            if self._buf[i] not in (0x20, 0x09):
                raise MalformedMultipart("garbage after boundary delimiter")
            i += 1
            if i > 1024:
                raise MalformedMultipart("boundary padding too long")
        del self._buf[:i + 2]
        return False

    def _read_headers(self) -> dict:
        if self._fill(2) and self._buf[:2] == b"\r\n":
            del self._buf[:2]
            return {}
        while True:
            idx = self._buf.find(b"\r\n\r\n")
            if idx >= 0:
                break
            if len(self._buf) > self._max_header:
                raise MalformedMultipart(f"part headers exceed {self._max_header} bytes")
            if not self._fill(len(self._buf) + 1):
                raise MalformedMultipart("body ends inside part headers")
        if idx > self._max_header:
            raise MalformedMultipart(f"part headers exceed {self._max_header} bytes")
        block = bytes(self._buf[:idx]).decode("latin-1")
        del self._buf[:idx + 4]
        headers = {}
        for line in block.split("\r\n"):
            name, sep, value = line.partition(":")
            if not sep:
                raise MalformedMultipart(f"bad part header line {line!r}")
            headers[name.strip().lower()] = value.strip()
        return headers

    def _read_payload(self, n: int) -> bytes:
        if not self._fill(n):
            raise MalformedMultipart(f"part payload truncated: wanted {n} bytes, got {len(self._buf)}")
        data = bytes(self._buf[:n])
        del self._buf[:n]
        return data

    def __iter__(self) -> Iterator[tuple]:
        self._skip_preamble()
        count = 0
        while not self._after_delimiter():
            headers = self._read_headers()
            if "content-range" not in headers:
                raise MalformedMultipart("body part without Content-Range")
            try:
                info = parse_content_range(headers["content-range"])
            except MalformedContentRange as exc:
                raise MalformedMultipart(str(exc)) from exc
            rng = info.range
            if info.total is not None:
                self.total = info.total
            data = self._read_payload(rng.length)
            count += 1
            yield rng, data
            closing = b"\r\n" + self._dash
            if not self._fill(len(closing)) or bytes(self._buf[:len(closing)]) != closing:
                raise MalformedMultipart("part payload not followed by a boundary delimiter")
            del self._buf[:len(closing)]
        if count == 0:
            raise MalformedMultipart("multipart body without parts")

    @property
    def leftover(self) -> bytes:
        """Buffered bytes past the close delimiter (start of the epilogue)."""
        return bytes(self._buf)


def parse_multipart_byteranges(body: Union[bytes, bytearray, BinaryIO], boundary: str, *,
                               max_header_bytes: int = PART_HEADER_LIMIT) -> list:
    if isinstance(body, (bytes, bytearray, memoryview)):
        body = io.BytesIO(bytes(body))
    return list(MultipartByterangesParser(body, boundary, max_header_bytes=max_header_bytes))
