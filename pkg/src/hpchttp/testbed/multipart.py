"""Server-side multipart/byteranges body composition."""

from __future__ import annotations

from ..errors import InvalidPart


def part_header(offset: int, length: int, total, boundary: str,
                content_type: str = "application/octet-stream") -> bytes:
    total_s = "*" if total is None else str(total)
    return (f"\r\n--{boundary}\r\n"
            f"Content-Type: {content_type}\r\n"
            f"Content-Range: bytes {offset}-{offset + length - 1}/{total_s}\r\n"
            f"\r\n").encode("latin-1")


def closing_delimiter(boundary: str) -> bytes:
    return f"\r\n--{boundary}--\r\n".encode("latin-1")


def compose_multipart(parts, total, boundary: str, *, preamble: bytes = b"",
                      epilogue: bytes = b"", leading_crlf: bool = True,
                      content_type: str = "application/octet-stream") -> bytes:
    """Build a multipart/byteranges body from ``[(ByteRange, bytes), ...]``.

    ``total`` may be None for an unknown complete length. The first delimiter
    is preceded by CRLF, as common servers emit it; with an empty preamble and
    ``leading_crlf=False`` the body opens directly on the delimiter.
    """
    if not parts:
        raise InvalidPart("a multipart/byteranges body needs at least one part")
    if not boundary or len(boundary) > 70:
        raise InvalidPart(f"bad boundary {boundary!r}")
    out = [preamble]
    first = True
    for rng, data in parts:
        if len(data) != rng.length:
            raise InvalidPart(f"part {rng.offset}+{rng.length} carries {len(data)} bytes")
        if total is not None and rng.end > total:
            raise InvalidPart(f"part {rng.offset}+{rng.length} runs past complete length {total}")
        head = part_header(rng.offset, rng.length, total, boundary, content_type)
        if first and not preamble and not leading_crlf:
            head = head[2:]
        first = False
        out.append(head)
        out.append(bytes(data))
    out.append(closing_delimiter(boundary))
    out.append(epilogue)
    return b"".join(out)
