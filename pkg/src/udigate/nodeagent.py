"""Compute-node agent: mounts, credential checks, and group resolution.

Group lookups go through an identity backend with a hard concurrency cap and
a FIFO queue; a request that would wait past the timeout fails with
IdentityTimeout instead of camping on the directory service. Each node keeps
its own positive-and-negative result cache so a storm of simultaneous job
starts does not turn into a storm of directory lookups.

Mounting is gated hard: node auth must be up, the credential must verify,
and the archive must pass a full verify_udi. There is deliberately no fast
path that trusts bytes on disk.
"""
from __future__ import annotations

import heapq
import logging
import threading
import time as _time
from dataclasses import dataclass
from typing import Optional

from .authsvc import Credential, CredentialVerifier, Principal
from .config import Config
from .errors import (AlreadyMounted, AuthServiceDown, IdentityTimeout, NotFound,
                     UdiCorrupt)
from .udi import UdiDescriptor, scan_udi, verify_udi

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MountHandle:
    node_id: int
    job_id: str
    digest: str
    path: str
    mounted_at: float


@dataclass(frozen=True)
class NodeState:
    node_id: int
    mounts: tuple[MountHandle, ...]
    auth_up: bool
    cache_enabled: bool
    cached_uids: int
    health: str


class GroupCache:
    """Per-node uid -> gids cache with TTL and negative entries."""

    def __init__(self, ttl: float):
        self.ttl = ttl
        self._entries: dict[int, tuple[Optional[tuple[int, ...]], float]] = {}

    def get(self, uid: int, now: float) -> tuple[bool, Optional[tuple[int, ...]]]:
        hit = self._entries.get(uid)
        if hit is None:
            return False, None
        gids, stored_at = hit
        if now - stored_at >= self.ttl:
            del self._entries[uid]
            return False, None
        return True, gids

    def put(self, uid: int, gids: Optional[tuple[int, ...]], now: float) -> None:
        self._entries[uid] = (gids, now)

    def flush(self) -> None:
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


class IdentityBackend:
    """Virtual-time directory service with cap, FIFO queue, and timeout.

    Service completions live in a heap; a lookup arriving at time t first
    retires everything finished by t, then either starts immediately (a slot
    is free) or inherits the earliest completion as its admission time. The
    maths stays exact for simultaneous arrival storms because admission
    times along the FIFO are non-decreasing.
    """

    def __init__(self, directory: dict[int, tuple[int, ...]], cap: int, timeout: float,
                 latency_mean: float, latency_jitter: float = 0.0, rng=None, tracer=None):
        self.directory = {int(k): tuple(sorted(v)) for k, v in directory.items()}
        self.cap = int(cap)
        self.timeout = float(timeout)
        self.latency_mean = float(latency_mean)
        self.latency_jitter = float(latency_jitter)
        self.rng = rng
        self.tracer = tracer
        self._busy: list[float] = []
        self.requests = 0
        self.admitted = 0
        self.timeouts = 0

    def _service_time(self) -> float:
        if self.latency_jitter > 0 and self.rng is not None:
            return self.latency_mean + self.rng.expovariate(1.0 / self.latency_jitter)
        return self.latency_mean

    def lookup(self, uid: int, arrival: float) -> tuple[Optional[tuple[int, ...]], float]:
        """Returns (gids or None, seconds from arrival to completion)."""
        self.requests += 1
        busy = self._busy
        while busy and busy[0] <= arrival:
            heapq.heappop(busy)
        if len(busy) < self.cap:
            admit = arrival
        else:
            admit = heapq.heappop(busy)
        queued = admit - arrival
        if queued > self.timeout:
            heapq.heappush(busy, admit)  # the slot was never consumed
            self.timeouts += 1
            if self.tracer is not None:
                self.tracer.emit(arrival, "identity", "timeout",
                                 [("uid", uid), ("queued", f"{queued:.6f}")])
            raise IdentityTimeout(
                f"group resolution for uid {uid} queued {queued:.3f}s, "
                f"timeout is {self.timeout:.3f}s")
        done = admit + self._service_time()
        heapq.heappush(busy, done)
        self.admitted += 1
        if self.tracer is not None:
            self.tracer.emit(arrival, "identity", "admit",
                             [("uid", uid), ("queued", f"{queued:.6f}"),
                              ("done", f"{done:.6f}")])
        return self.directory.get(int(uid)), done - arrival

    def in_flight_at(self, t: float) -> int:
        return sum(1 for d in self._busy if d > t)


class ThreadedIdentityBackend:
    """Wall-clock twin of IdentityBackend for the service runtime."""

    def __init__(self, directory: dict[int, tuple[int, ...]], cap: int, timeout: float,
                 latency_mean: float = 0.0):
        self.directory = {int(k): tuple(sorted(v)) for k, v in directory.items()}
        self.timeout = float(timeout)
        self.latency_mean = float(latency_mean)
        self._sem = threading.BoundedSemaphore(int(cap))
        self.requests = 0
        self.timeouts = 0

    def lookup(self, uid: int, arrival: float = 0.0) -> tuple[Optional[tuple[int, ...]], float]:
        self.requests += 1
        start = _time.monotonic()
        if not self._sem.acquire(timeout=self.timeout):
            self.timeouts += 1
            raise IdentityTimeout(
                f"group resolution for uid {uid} waited past {self.timeout:.3f}s")
        try:
            if self.latency_mean > 0:
                _time.sleep(self.latency_mean)
            return self.directory.get(int(uid)), _time.monotonic() - start
        finally:
            self._sem.release()


class NodeAgent:
    def __init__(self, node_id: int, clock, verifier: Optional[CredentialVerifier],
                 identity, config: Config, tracer=None,
                 cache_enabled: Optional[bool] = None):
        self.node_id = int(node_id)
        self.name = f"node/{self.node_id:04d}"
        self.clock = clock
        self.verifier = verifier
        self.identity = identity
        self.config = config
        self.tracer = tracer
        self.auth_up = True
        self.cache_enabled = config.cache_enabled if cache_enabled is None else cache_enabled
        self.cache = GroupCache(config.cache_ttl)
        self._mounts: dict[tuple[str, str], MountHandle] = {}
        self.cache_hits = 0
        self.cache_misses = 0
        self.mounts_done = 0
        self.unmounts_done = 0

    # -- control messages ------------------------------------------------------

    def set_auth_up(self, up: bool) -> None:
        self.auth_up = bool(up)

    def flush_cache(self) -> None:
        self.cache.flush()

    def prime_cache(self, uid: int, gids: tuple[int, ...]) -> None:
        self.cache.put(int(uid), tuple(sorted(gids)), self.clock.now())

    @property
    def health(self) -> str:
        return "ok" if self.auth_up else "degraded"

    def state(self) -> NodeState:
        return NodeState(node_id=self.node_id,
                         mounts=tuple(self._mounts[k] for k in sorted(self._mounts)),
                         auth_up=self.auth_up, cache_enabled=self.cache_enabled,
                         cached_uids=len(self.cache), health=self.health)

    def _trace(self, event: str, details) -> None:
        if self.tracer is not None:
            self.tracer.emit(self.clock.now(), self.name, event, details)

    # -- group resolution --------------------------------------------------------

    def resolve_groups(self, uid: int) -> tuple[tuple[int, ...], float]:
        """Returns (gids, wait_seconds). wait is 0 on a cache hit. Timeouts
        propagate and are never cached; unknown uids are negative-cached."""
        now = self.clock.now()
        if self.cache_enabled:
            hit, gids = self.cache.get(uid, now)
            if hit:
                self.cache_hits += 1
                if gids is None:
                    raise NotFound(f"uid {uid} unknown to directory (cached)")
                return gids, 0.0
        self.cache_misses += 1
        gids, wait = self.identity.lookup(uid, now)
        if self.cache_enabled:
            self.cache.put(uid, gids, now)
        if gids is None:
            raise NotFound(f"uid {uid} unknown to directory")
        return gids, wait

    # -- mount lifecycle ------------------------------------------------------------

    def mount_udi(self, desc: UdiDescriptor, cred: Credential, job_id: str) -> tuple[MountHandle, float]:
        """Validate everything, register the mount. Returns (handle,
        identity_wait). Raises AuthServiceDown, MacMismatch,
        CredentialExpired, UdiCorrupt, NotFound, IdentityTimeout,
        AlreadyMounted."""
        if not self.auth_up:
            raise AuthServiceDown(f"{self.name}: credential service down on node")
        if self.verifier is not None:
            principal = self.verifier.verify(cred)
        else:
            principal = Principal(uid=cred.uid, gids=cred.gids, scope=cred.scope)

        key = (job_id, desc.content_digest)
        if key in self._mounts:
            raise AlreadyMounted(f"{self.name}: {desc.content_digest[:12]} already mounted for {job_id}")

        check = verify_udi(desc.path)
        if not check.ok:
            raise UdiCorrupt(check.reason)
        actual, _ = scan_udi(desc.path)
        if actual.content_digest != desc.content_digest:
            raise UdiCorrupt("descriptor mismatch")

        gids, wait = self.resolve_groups(principal.uid)

        handle = MountHandle(node_id=self.node_id, job_id=job_id,
                             digest=desc.content_digest, path=desc.path,
                             mounted_at=self.clock.now())
        self._mounts[key] = handle
        self.mounts_done += 1
        self._trace("mount", [("job", job_id), ("digest", desc.content_digest[:12]),
                              ("groups", len(gids))])
        return handle, wait

    def has_mount(self, job_id: str, digest: str) -> bool:
        return (job_id, digest) in self._mounts

    def mounts_for(self, job_id: str) -> list[MountHandle]:
        return [h for (j, _), h in sorted(self._mounts.items()) if j == job_id]

    def unmount_udi(self, job_id: str, digest: str) -> bool:
        """Idempotent: unmounting something absent is a logged no-op."""
        handle = self._mounts.pop((job_id, digest), None)
        if handle is None:
            log.debug("%s: unmount of absent (%s, %s)", self.name, job_id, digest[:12])
            return False
        self.unmounts_done += 1
        self._trace("unmount", [("job", job_id), ("digest", digest[:12])])
        return True

    def unmount_job(self, job_id: str) -> int:
        count = 0
        for (j, digest) in sorted(self._mounts):
            if j == job_id:
                self.unmount_udi(job_id, digest)
                count += 1
        return count

    def mount_count(self) -> int:
        return len(self._mounts)
