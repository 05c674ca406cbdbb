"""Deterministic HTTP/1.1 test server used as oracle and measurement substrate."""

from .faults import LATENCY_PRESETS_MS, FaultEvent, FaultPlan, FaultState, LatencyModel
from .multipart import compose_multipart
from .server import METRICS_PATH, PRIMARY, ReplicaRoot, ServerMetrics, Testbed, serve


def snapshot_metrics(handle: Testbed) -> ServerMetrics:
    return handle.snapshot_metrics()


__all__ = [
    "LATENCY_PRESETS_MS", "FaultEvent", "FaultPlan", "FaultState", "LatencyModel",
    "compose_multipart", "METRICS_PATH", "PRIMARY", "ReplicaRoot", "ServerMetrics",
    "Testbed", "serve", "snapshot_metrics",
]
