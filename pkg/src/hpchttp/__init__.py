"""High-performance data access over plain HTTP/1.1.

Pooled keep-alive sessions, vectored multi-range reads, metalink replica
fail-over and multi-stream download, plus a deterministic test server.
"""

from .client import Client, RemoteFileHandle, ResourceInfo
from .config import ClientConfig, load_config
from .engine import EngineLimits, RangedResponse, execute_ranged_get
from .errors import *  # noqa: F401,F403
from .metalink import (
    MetalinkDocument,
    Replica,
    discover_metalink,
    failover_read,
    multistream_download,
    order_replicas,
    parse_metalink,
)
from .pool import PoolConfig, PoolStats, SessionKey, SessionPool, session_key
from .ranges import ByteRange, compose_range_header, parse_content_range, parse_multipart_byteranges
from .vector import FragmentOutcome, FragmentRequest, VectorConfig, normalize_fragments, partition_ranges, vector_read

__version__ = "0.1.0"
