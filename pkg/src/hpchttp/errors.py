"""Exception hierarchy shared by every layer of the toolkit."""


class HttpIOError(Exception):
    """Base class for all errors raised by hpchttp."""


class MalformedUri(HttpIOError, ValueError):
    pass


class ConfigInvalid(HttpIOError, ValueError):
    def __init__(self, key, reason=""):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}" if reason else key)


class TransportError(HttpIOError):
    """Socket-level failure: refused, reset, truncated, timed out."""


class ConnectFailed(TransportError):
    pass


class AcquireTimeout(HttpIOError):
    pass


class HttpError(HttpIOError):
    def __init__(self, status, reason="", url=None):
        self.status = status
        self.reason = reason
        self.url = url
        msg = f"HTTP {status}"
        if reason:
            msg += f" {reason}"
        if url:
            msg += f" ({url})"
        super().__init__(msg)


class RangeNotSatisfiable(HttpIOError):
    def __init__(self, total=None, message=None):
        self.total = total
        super().__init__(message or f"range not satisfiable (object size {total if total is not None else 'unknown'})")


class FullBodyTooLarge(HttpIOError):
    def __init__(self, length, limit):
        self.length = length
        self.limit = limit
        super().__init__(f"server ignored Range; full body of {length} bytes exceeds fallback limit {limit}")


class EmptyRangeSet(HttpIOError, ValueError):
    pass


class OverlappingRanges(HttpIOError, ValueError):
    pass


class MalformedContentRange(HttpIOError, ValueError):
    pass


class MalformedResponse(HttpIOError):
    """The server answered, but not with what was asked for."""


class MalformedMultipart(MalformedResponse):
    pass


class MalformedMetalink(HttpIOError, ValueError):
    pass


class NoReplicaAvailable(HttpIOError):
    pass


class AllReplicasFailed(HttpIOError):
    def __init__(self, errors):
        # list of (url, exception)
        self.errors = list(errors)
        detail = "; ".join(f"{url}: {exc}" for url, exc in self.errors) or "no replica tried"
        super().__init__(f"all replicas failed: {detail}")


class SizeUnknown(HttpIOError):
    pass


class ChecksumMismatch(HttpIOError):
    def __init__(self, algorithm, expected, actual):
        self.algorithm = algorithm
        self.expected = expected
        self.actual = actual
        super().__init__(f"{algorithm} mismatch: expected {expected}, got {actual}")


class InvalidParams(HttpIOError, ValueError):
    pass


class InvalidPart(HttpIOError, ValueError):
    pass


class BindFailed(HttpIOError):
    pass


class CorpusUnreadable(HttpIOError):
    pass
