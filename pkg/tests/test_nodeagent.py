"""Node agent: identity backend queueing, group cache, mount gating."""

import pytest

from helpers import payload_tree
from udigate.authsvc import CredentialVerifier, issue_credential
from udigate.clock import VirtualClock
from udigate.errors import (
    AlreadyMounted,
    AuthServiceDown,
    CredentialExpired,
    IdentityTimeout,
    MacMismatch,
    NotFound,
    UdiCorrupt,
)
from udigate.nodeagent import GroupCache, IdentityBackend, NodeAgent, ThreadedIdentityBackend
from udigate.udi import UdiDescriptor, write_udi

SECRET = b"node-secret"
DIRECTORY = {1001: (100, 200), 1002: (100,)}


# -- identity backend ---------------------------------------------------------


def backend(cap=2, timeout=5.0, latency=1.0):
    return IdentityBackend(DIRECTORY, cap=cap, timeout=timeout, latency_mean=latency)


def test_lookup_under_cap_is_immediate():
    be = backend()
    gids, wait = be.lookup(1001, arrival=0.0)
    assert gids == (100, 200)
    assert wait == 1.0  # pure service time, no queueing


def test_unknown_uid_returns_none():
    be = backend()
    gids, _ = be.lookup(9999, arrival=0.0)
    assert gids is None


def test_fifo_admission_is_nondecreasing():
    # cap 2, service 1s, 6 simultaneous arrivals: admissions 0,0,1,1,2,2
    be = backend(cap=2, timeout=50.0, latency=1.0)
    waits = [be.lookup(1001, arrival=0.0)[1] for _ in range(6)]
    assert waits == [1.0, 1.0, 2.0, 2.0, 3.0, 3.0]


def test_storm_timeout_count_matches_closed_form():
    # n simultaneous arrivals, cap c, service s, timeout T: requests whose
    # queue position implies a wait beyond T fail, which is everything after
    # the first c * (floor(T / s) + 1) admissions
    n, cap, service, timeout = 2048, 500, 2.0, 5.0
    be = IdentityBackend({0: (0,)}, cap=cap, timeout=timeout, latency_mean=service)
    outcomes = []
    for _ in range(n):
        try:
            be.lookup(0, arrival=0.0)
            outcomes.append("ok")
        except IdentityTimeout:
            outcomes.append("timeout")
    expected_failures = n - cap * (int(timeout / service) + 1)
    assert outcomes.count("timeout") == expected_failures == 548
    assert be.timeouts == 548
    assert be.admitted == n - 548
    # FIFO means no late success after the first timeout
    first_timeout = outcomes.index("timeout")
    assert all(o == "timeout" for o in outcomes[first_timeout:])


def test_timeout_releases_slot():
    be = backend(cap=1, timeout=0.5, latency=1.0)
    be.lookup(1001, arrival=0.0)
    with pytest.raises(IdentityTimeout):
        be.lookup(1001, arrival=0.0)
    # the failed request must not have consumed the pending completion
    gids, wait = be.lookup(1001, arrival=1.0)
    assert gids == (100, 200)
    assert wait == 1.0


def test_in_flight_accounting():
    be = backend(cap=3, timeout=10.0, latency=2.0)
    for _ in range(3):
        be.lookup(1001, arrival=0.0)
    assert be.in_flight_at(1.0) == 3
    assert be.in_flight_at(2.0) == 0


def test_threaded_backend_smoke():
    be = ThreadedIdentityBackend(DIRECTORY, cap=4, timeout=1.0)
    gids, wait = be.lookup(1002)
    assert gids == (100,)
    assert wait < 1.0
    assert be.lookup(9999)[0] is None


# -- group cache --------------------------------------------------------------


def test_cache_hit_miss_and_ttl():
    c = GroupCache(ttl=600.0)
    assert c.get(1001, now=0.0) == (False, None)
    c.put(1001, (100,), now=0.0)
    assert c.get(1001, now=599.9) == (True, (100,))
    assert c.get(1001, now=600.0) == (False, None)  # expired exactly at ttl
    assert len(c) == 0  # expiry evicts


def test_cache_negative_entries():
    c = GroupCache(ttl=600.0)
    c.put(777, None, now=0.0)
    assert c.get(777, now=1.0) == (True, None)


def test_cache_flush():
    c = GroupCache(ttl=600.0)
    c.put(1, (1,), now=0.0)
    c.flush()
    assert len(c) == 0


# -- node agent ---------------------------------------------------------------


@pytest.fixture
def rig(fast_cfg, tmp_path):
    cfg = fast_cfg.replace(identity_latency_mean=1.0, identity_timeout=5.0)
    clock = VirtualClock()
    verifier = CredentialVerifier(SECRET, ttl=cfg.credential_ttl, clock=clock)
    identity = IdentityBackend(DIRECTORY, cap=cfg.identity_cap,
                               timeout=cfg.identity_timeout,
                               latency_mean=cfg.identity_latency_mean)
    agent = NodeAgent(7, clock, verifier, identity, cfg)
    desc = write_udi(payload_tree(), str(tmp_path / "img.udi"),
                     source_ref="a/b:v1", created_at=0.0)
    cred = issue_credential(1001, (100, 200), "user", SECRET, clock.now())
    return agent, clock, identity, desc, cred


def test_mount_happy_path(rig):
    agent, clock, _, desc, cred = rig
    handle, wait = agent.mount_udi(desc, cred, "job-1")
    assert handle.node_id == 7
    assert handle.digest == desc.content_digest
    assert wait == 1.0  # first resolution goes to the backend
    assert agent.has_mount("job-1", desc.content_digest)
    assert agent.mount_count() == 1


def test_resolve_groups_caches_positive(rig):
    agent, _, identity, _, _ = rig
    gids, wait = agent.resolve_groups(1001)
    assert gids == (100, 200)
    assert wait == 1.0
    gids, wait = agent.resolve_groups(1001)
    assert wait == 0.0
    assert identity.requests == 1
    assert agent.cache_hits == 1


def test_resolve_groups_caches_negative(rig):
    agent, _, identity, _, _ = rig
    with pytest.raises(NotFound):
        agent.resolve_groups(9999)
    with pytest.raises(NotFound) as exc_info:
        agent.resolve_groups(9999)
    assert "cached" in str(exc_info.value)
    assert identity.requests == 1


def test_cache_expiry_forces_refetch(rig, fast_cfg):
    agent, clock, identity, _, _ = rig
    agent.resolve_groups(1001)
    clock.advance(fast_cfg.cache_ttl + 1.0)
    agent.resolve_groups(1001)
    assert identity.requests == 2


def test_cache_disabled_always_hits_backend(fast_cfg):
    cfg = fast_cfg.replace(identity_latency_mean=1.0)
    clock = VirtualClock()
    identity = IdentityBackend(DIRECTORY, cap=500, timeout=5.0, latency_mean=1.0)
    agent = NodeAgent(1, clock, None, identity, cfg, cache_enabled=False)
    agent.resolve_groups(1001)
    agent.resolve_groups(1001)
    assert identity.requests == 2
    assert agent.cache_hits == 0


def test_timeout_never_cached(fast_cfg):
    cfg = fast_cfg.replace(identity_latency_mean=2.0, identity_timeout=1.0)
    clock = VirtualClock()
    identity = IdentityBackend(DIRECTORY, cap=1, timeout=1.0, latency_mean=2.0)
    agent = NodeAgent(1, clock, None, identity, cfg)
    agent.resolve_groups(1001)
    with pytest.raises(IdentityTimeout):
        agent.resolve_groups(1002)  # queued behind, waits past timeout
    assert len(agent.cache) == 1  # only the success landed in the cache
    clock.advance(3.0)
    gids, _ = agent.resolve_groups(1002)  # backend free again: succeeds
    assert gids == (100,)


def test_prime_cache_avoids_backend(rig):
    agent, _, identity, _, _ = rig
    agent.prime_cache(1001, (200, 100))
    gids, wait = agent.resolve_groups(1001)
    assert gids == (100, 200)
    assert wait == 0.0
    assert identity.requests == 0


def test_mount_requires_node_auth(rig):
    agent, _, _, desc, cred = rig
    agent.set_auth_up(False)
    assert agent.health == "degraded"
    with pytest.raises(AuthServiceDown):
        agent.mount_udi(desc, cred, "job-1")
    agent.set_auth_up(True)
    agent.mount_udi(desc, cred, "job-1")


def test_mount_rejects_bad_mac(rig):
    agent, clock, _, desc, _ = rig
    forged = issue_credential(1001, (100, 200), "user", b"wrong-secret", clock.now())
    with pytest.raises(MacMismatch):
        agent.mount_udi(desc, forged, "job-1")


def test_mount_rejects_expired_credential(rig, fast_cfg):
    agent, clock, _, desc, cred = rig
    clock.advance(fast_cfg.credential_ttl + 1.0)
    with pytest.raises(CredentialExpired):
        agent.mount_udi(desc, cred, "job-1")


def test_mount_rejects_corrupt_archive(rig, tmp_path):
    agent, _, _, desc, cred = rig
    data = bytearray(open(desc.path, "rb").read())
    data[len(data) // 2] ^= 0xFF
    with open(desc.path, "wb") as fh:
        fh.write(bytes(data))
    with pytest.raises(UdiCorrupt):
        agent.mount_udi(desc, cred, "job-1")
    assert agent.mount_count() == 0


def test_mount_rejects_descriptor_mismatch(rig):
    agent, _, _, desc, cred = rig
    lying = UdiDescriptor(path=desc.path, content_digest="0" * 64,
                          size_bytes=desc.size_bytes, created_at=desc.created_at,
                          source_ref=desc.source_ref)
    with pytest.raises(UdiCorrupt) as exc_info:
        agent.mount_udi(lying, cred, "job-1")
    assert "descriptor mismatch" in str(exc_info.value)


def test_duplicate_mount_rejected(rig):
    agent, _, _, desc, cred = rig
    agent.mount_udi(desc, cred, "job-1")
    with pytest.raises(AlreadyMounted):
        agent.mount_udi(desc, cred, "job-1")
    # same archive for a different job is a separate mount
    handle, _ = agent.mount_udi(desc, cred, "job-2")
    assert handle.job_id == "job-2"
    assert agent.mount_count() == 2


def test_unmount_idempotent(rig):
    agent, _, _, desc, cred = rig
    agent.mount_udi(desc, cred, "job-1")
    assert agent.unmount_udi("job-1", desc.content_digest) is True
    assert agent.unmount_udi("job-1", desc.content_digest) is False
    assert agent.mount_count() == 0


def test_unmount_job_clears_only_that_job(rig, tmp_path):
    agent, clock, _, desc, cred = rig
    other = write_udi(payload_tree(b"other"), str(tmp_path / "o.udi"),
                      source_ref="a/c:v1", created_at=0.0)
    agent.mount_udi(desc, cred, "job-1")
    agent.mount_udi(other, cred, "job-1")
    agent.mount_udi(desc, cred, "job-2")
    assert agent.unmount_job("job-1") == 2
    assert agent.mount_count() == 1
    assert agent.mounts_for("job-2")[0].digest == desc.content_digest


def test_state_snapshot(rig):
    agent, _, _, desc, cred = rig
    agent.mount_udi(desc, cred, "job-1")
    st = agent.state()
    assert st.node_id == 7
    assert st.health == "ok"
    assert st.cache_enabled is True
    assert st.cached_uids == 1
    assert [m.job_id for m in st.mounts] == ["job-1"]
