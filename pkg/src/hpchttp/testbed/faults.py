"""Latency model and scripted fault plans for the test server.

A fault file is line oriented; ``#`` starts a comment. Each line is one event,
optionally gated on the global request counter (1-based)::

    replica_offline r1 from 5
    replica_online r1 from 40
    ignore_range on
    single_range_only off
    coalesce_ranges on
    connection_close_every 3
    die_after_bytes r0 12582912
    read_only /ro
    omit_content_length on
    metalink accept,suffix          # or: metalink off
    metalink_garbage suffix

Later events override earlier ones once their ``from`` request is reached.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

METALINK_ENDPOINTS = ("accept", "query", "suffix")
LATENCY_PRESETS_MS = {"lan": 2.0, "geant": 40.0, "wan": 250.0}

_BOOL = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}

# kind -> argument parsers
_ARITY = {
    "replica_offline": (str,),
    "replica_online": (str,),
    "ignore_range": ("bool",),
    "single_range_only": ("bool",),
    "coalesce_ranges": ("bool",),
    "connection_close_every": (int,),
    "die_after_bytes": (str, int),
    "read_only": (str,),
    "omit_content_length": ("bool",),
    "metalink": ("endpoints",),
    "metalink_garbage": ("endpoint",),
}


class FaultSyntaxError(ValueError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    per_request_delay: float = 0.0
    per_megabyte_delay: float = 0.0
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.per_request_delay, self.per_megabyte_delay, self.jitter) < 0:
            raise ValueError("latency parameters must be >= 0")

    @classmethod
    def preset(cls, name: str, **kw) -> "LatencyModel":
        return cls(per_request_delay=LATENCY_PRESETS_MS[name] / 1000.0, **kw)

    def request_delay(self, request_no: int) -> float:
        """Delay before the status line of the ``request_no``-th request."""
        if not self.jitter:
            return self.per_request_delay
        rng = random.Random(f"{self.seed}:{request_no}")
        return max(0.0, self.per_request_delay + rng.uniform(-self.jitter, self.jitter))

    def body_delay(self, nbytes: int) -> float:
        return self.per_megabyte_delay * nbytes / (1024 * 1024)


@dataclass(frozen=True)
class FaultEvent:
    kind: str
    args: tuple = ()
    from_request: int = 1

    def __post_init__(self):
        if self.kind not in _ARITY:
            raise FaultSyntaxError(f"unknown fault event {self.kind!r}")
        if self.from_request < 1:
            raise FaultSyntaxError("from request must be >= 1")


@dataclass
class FaultState:
    offline: set = field(default_factory=set)
    ignore_range: bool = False
    single_range_only: bool = False
    coalesce_ranges: bool = False
    connection_close_every: int = 0
    die_after_bytes: dict = field(default_factory=dict)
    read_only: list = field(default_factory=list)
    omit_content_length: bool = False
    metalink_endpoints: frozenset = frozenset(METALINK_ENDPOINTS)
    metalink_garbage: set = field(default_factory=set)

    def is_read_only(self, path: str) -> bool:
        for prefix in self.read_only:
            p = prefix.rstrip("/")
            if path == p or path.startswith(p + "/"):
                return True
        return False


@dataclass
class FaultPlan:
    events: list = field(default_factory=list)

    def add(self, kind: str, *args, from_request: int = 1) -> "FaultPlan":
        self.events.append(FaultEvent(kind, tuple(args), from_request))
        return self

    def state_at(self, request_no: int) -> FaultState:
        st = FaultState()
        for ev in self.events:
            if ev.from_request > request_no:
                continue
            k, a = ev.kind, ev.args
            if k == "replica_offline":
                st.offline.add(a[0])
            elif k == "replica_online":
                st.offline.discard(a[0])
            elif k == "die_after_bytes":
                st.die_after_bytes[a[0]] = a[1]
            elif k == "read_only":
                st.read_only.append(a[0])
            elif k == "metalink":
                st.metalink_endpoints = frozenset(a[0])
            elif k == "metalink_garbage":
                st.metalink_garbage.add(a[0])
            else:
                setattr(st, k, a[0])
        return st

    @classmethod
    def parse(cls, text: str) -> "FaultPlan":
        plan = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            words = line.split()
            from_request = 1
            if len(words) >= 3 and words[-2] == "from":
                try:
                    from_request = int(words[-1])
                except ValueError:
                    raise FaultSyntaxError(f"line {lineno}: bad request number {words[-1]!r}") from None
                words = words[:-2]
            kind, rest = words[0], words[1:]
            if kind not in _ARITY:
                raise FaultSyntaxError(f"line {lineno}: unknown event {kind!r}")
            spec = _ARITY[kind]
            if len(rest) != len(spec):
                raise FaultSyntaxError(f"line {lineno}: {kind} takes {len(spec)} argument(s)")
            try:
                args = tuple(_convert(t, w) for t, w in zip(spec, rest))
            except ValueError as exc:
                raise FaultSyntaxError(f"line {lineno}: {exc}") from None
            plan.events.append(FaultEvent(kind, args, from_request))
        return plan

    @classmethod
    def load(cls, path: Optional[str]) -> "FaultPlan":
        if not path:
            return cls()
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())


def _convert(kind, word):
    if kind == "bool":
        if word.lower() not in _BOOL:
            raise ValueError(f"expected on/off, got {word!r}")
        return _BOOL[word.lower()]
    if kind == "endpoints":
        if word == "off":
            return frozenset()
        names = frozenset(w for w in word.split(",") if w)
        bad = names - set(METALINK_ENDPOINTS)
        if bad:
            raise ValueError(f"unknown metalink endpoint(s) {sorted(bad)}")
        return names
    if kind == "endpoint":
        if word not in METALINK_ENDPOINTS:
            raise ValueError(f"unknown metalink endpoint {word!r}")
        return word
    if kind is int:
        n = int(word)
        if n < 0:
            raise ValueError(f"negative count {n}")
        return n
    return word
