"""HTTP front ends over real sockets: routing, status mapping, JSON shapes."""

import json
import threading
import urllib.error
import urllib.request

import pytest

from helpers import payload_tree, tiny_tree
from udigate.authsvc import (
    CredentialVerifier,
    WIRE_HEADER,
    credential_to_wire,
    issue_credential,
)
from udigate.clock import SystemClock
from udigate.config import Config
from udigate.filetree import flatten
from udigate.gateway import Gateway
from udigate.httpd import make_agent_server, make_gateway_server, make_registry_server
from udigate.nodeagent import NodeAgent, ThreadedIdentityBackend
from udigate.registry import HttpRegistryClient, LocalRegistry
from udigate.service import GatewayRuntime
from udigate.udi import write_udi

SECRET = b"httpd-test-secret"
CLOCK = SystemClock()


def serve(srv):
    # short poll so fixture shutdown() does not stall the suite
    threading.Thread(target=lambda: srv.serve_forever(poll_interval=0.02),
                     daemon=True).start()
    return srv.server_address[1]


def req(port, method, path, body=None, cred=None):
    headers = {}
    if cred is not None:
        headers[WIRE_HEADER] = credential_to_wire(cred)
    data = json.dumps(body).encode() if body is not None else None
    r = urllib.request.Request(f"http://127.0.0.1:{port}{path}",
                               data=data, method=method, headers=headers)
    try:
        with urllib.request.urlopen(r, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def user_cred():
    return issue_credential(1001, (100, 200), "user", SECRET, CLOCK.now())


def admin_cred():
    return issue_credential(0, (0,), "admin", SECRET, CLOCK.now())


# -- gateway API ---------------------------------------------------------------


@pytest.fixture
def gw_rig(fast_cfg, tmp_path):
    registry = LocalRegistry()
    registry.add_image("team/app", "v1", [tiny_tree(), payload_tree()],
                       total_size=8192)
    verifier = CredentialVerifier(SECRET, fast_cfg.credential_ttl, CLOCK)
    gw = Gateway(fast_cfg, CLOCK, registry, str(tmp_path / "state"),
                 verifier=verifier)
    runtime = GatewayRuntime(gw, sweep=False)
    gw.task_sink = runtime.submit
    runtime.start()
    srv = make_gateway_server(gw)
    port = serve(srv)
    yield port, gw, runtime
    srv.shutdown()
    runtime.stop()
    gw.close()


def test_pull_lookup_list_roundtrip(gw_rig):
    port, _, runtime = gw_rig
    code, rec = req(port, "POST", "/api/pull/local/team/app:v1", cred=user_cred())
    assert code == 200
    assert rec["state"] in ("ENQUEUED", "PULLING", "CONVERTING", "READY")
    runtime.drain()
    code, rec = req(port, "GET", "/api/lookup/local/team/app:v1")
    assert code == 200
    assert rec["state"] == "READY"
    assert rec["ref"] == "team/app:v1"
    assert "lease_id" not in rec
    code, listing = req(port, "GET", "/api/list/local")
    assert code == 200
    assert [r["ref"] for r in listing["records"]] == ["team/app:v1"]


def test_pull_without_credential_is_401(gw_rig):
    port, _, _ = gw_rig
    code, err = req(port, "POST", "/api/pull/local/team/app:v1")
    assert code == 401
    assert err["error"] == "AuthError"


def test_pull_with_forged_credential_is_401(gw_rig):
    port, _, _ = gw_rig
    forged = issue_credential(1001, (100,), "user", b"wrong-secret", CLOCK.now())
    code, err = req(port, "POST", "/api/pull/local/team/app:v1", cred=forged)
    assert code == 401
    assert err["error"] == "MacMismatch"


def test_lookup_unknown_is_404(gw_rig):
    port, _, _ = gw_rig
    code, err = req(port, "GET", "/api/lookup/local/team/ghost:v9")
    assert code == 404
    assert err["error"] == "NotFound"


def test_malformed_reference_is_404(gw_rig):
    port, _, _ = gw_rig
    # handler unquotes before parsing, so the space reaches parse_reference
    code, err = req(port, "GET", "/api/lookup/local/not%20a%20ref")
    assert code == 404
    assert err["error"] == "InvalidReference"


def test_unknown_endpoint_is_404(gw_rig):
    port, _, _ = gw_rig
    for path in ("/api", "/api/pull/local", "/nope", "/api/zap/local/team/app:v1"):
        code, err = req(port, "GET", path)
        assert code == 404, path


def test_expire_requires_admin_scope(gw_rig):
    port, _, runtime = gw_rig
    req(port, "POST", "/api/pull/local/team/app:v1", cred=user_cred())
    runtime.drain()
    code, err = req(port, "POST", "/api/expire/local/team/app:v1", cred=user_cred())
    assert code == 401
    assert err["error"] == "AuthError"
    code, rec = req(port, "POST", "/api/expire/local/team/app:v1", cred=admin_cred())
    assert code == 200
    assert rec["state"] == "EXPIRED"


# -- registry ---------------------------------------------------------------------


@pytest.fixture
def reg_rig():
    registry = LocalRegistry()
    registry.add_image("team/app", "v1", [tiny_tree(), payload_tree()],
                       total_size=8192)
    srv = make_registry_server(registry)
    port = serve(srv)
    yield port, registry
    srv.shutdown()


def test_manifest_over_http(reg_rig):
    port, registry = reg_rig
    code, doc = req(port, "GET", "/registry/team/app:v1/manifest.json")
    assert code == 200
    assert doc == registry.fetch_manifest("team/app:v1").to_json_dict()


def test_blob_over_http(reg_rig):
    port, registry = reg_rig
    digest = registry.fetch_manifest("team/app:v1").layers[0]
    with urllib.request.urlopen(
            f"http://127.0.0.1:{port}/registry/blobs/{digest}", timeout=10) as resp:
        assert resp.status == 200
        assert resp.read() == registry.fetch_layer(digest)


def test_unknown_image_is_404(reg_rig):
    port, _ = reg_rig
    code, err = req(port, "GET", "/registry/team/ghost:v1/manifest.json")
    assert code == 404
    assert err["error"] == "RegistryUnknownImage"


def test_registry_down_is_503(reg_rig):
    port, registry = reg_rig
    registry.set_down(True)
    code, err = req(port, "GET", "/registry/team/app:v1/manifest.json")
    assert code == 503
    assert err["error"] == "RegistryIoError"


def test_http_client_round_trip(reg_rig):
    port, registry = reg_rig
    client = HttpRegistryClient(f"http://127.0.0.1:{port}")
    manifest = client.fetch_manifest("team/app:v1")
    assert manifest == registry.fetch_manifest("team/app:v1")
    for digest in manifest.layers:
        assert client.fetch_layer(digest) == registry.fetch_layer(digest)
    with pytest.raises(Exception) as exc_info:
        client.fetch_manifest("team/ghost:v1")
    assert type(exc_info.value).__name__ == "RegistryUnknownImage"


# -- node agent -------------------------------------------------------------------


@pytest.fixture
def agent_rig(tmp_path):
    cfg = Config(identity_latency_mean=0.0)
    verifier = CredentialVerifier(SECRET, cfg.credential_ttl, CLOCK)
    identity = ThreadedIdentityBackend({1001: (100, 200)}, cap=8, timeout=2.0)
    agent = NodeAgent(3, CLOCK, verifier, identity, cfg)
    tree = flatten([tiny_tree(), payload_tree()])
    udi_path = str(tmp_path / "app.udi")
    write_udi(tree, udi_path, "team/app:v1", created_at=0.0)
    srv = make_agent_server(agent)
    port = serve(srv)
    yield port, agent, udi_path
    srv.shutdown()


def test_resolve_over_http(agent_rig):
    port, _, _ = agent_rig
    code, doc = req(port, "GET", "/agent/resolve/1001")
    assert code == 200
    assert doc["uid"] == 1001
    assert doc["gids"] == [100, 200]
    assert doc["wait"] >= 0.0


def test_resolve_unknown_uid_is_404(agent_rig):
    port, agent, _ = agent_rig
    code, err = req(port, "GET", "/agent/resolve/4242")
    assert code == 404
    assert err["error"] == "NotFound"
    # second miss answers from the negative cache
    code, err = req(port, "GET", "/agent/resolve/4242")
    assert code == 404
    assert "cached" in err["detail"]


def test_mount_and_duplicate(agent_rig):
    port, agent, udi_path = agent_rig
    body = {"udi_path": udi_path, "job_id": "job-7"}
    code, doc = req(port, "POST", "/agent/mount", body=body, cred=user_cred())
    assert code == 200
    assert doc["node_id"] == 3
    assert doc["job_id"] == "job-7"
    assert len(doc["digest"]) == 64
    assert agent.state().mounts[0].digest == doc["digest"]

    code, err = req(port, "POST", "/agent/mount", body=body, cred=user_cred())
    assert code == 409
    assert err["error"] == "AlreadyMounted"

    code, doc2 = req(port, "POST", "/agent/unmount",
                     body={"job_id": "job-7", "digest": doc["digest"]})
    assert code == 200 and doc2["unmounted"] is True
    code, doc2 = req(port, "POST", "/agent/unmount",
                     body={"job_id": "job-7", "digest": doc["digest"]})
    assert code == 200 and doc2["unmounted"] is False


def test_mount_without_credential_is_401(agent_rig):
    port, _, udi_path = agent_rig
    code, err = req(port, "POST", "/agent/mount",
                    body={"udi_path": udi_path, "job_id": "job-7"})
    assert code == 401
    assert err["error"] == "AuthError"


def test_mount_with_auth_down_names_service(agent_rig):
    port, _, udi_path = agent_rig
    code, doc = req(port, "POST", "/agent/set_auth_up", body={"up": False})
    assert code == 200 and doc["auth_up"] is False
    code, err = req(port, "POST", "/agent/mount",
                    body={"udi_path": udi_path, "job_id": "job-7"},
                    cred=user_cred())
    assert code == 401
    assert err["error"] == "AuthServiceDown"
    req(port, "POST", "/agent/set_auth_up", body={"up": True})


def test_mount_corrupt_archive_is_409(agent_rig, tmp_path):
    port, _, udi_path = agent_rig
    data = bytearray(open(udi_path, "rb").read())
    data[len(data) // 2] ^= 0x41
    bad = str(tmp_path / "bad.udi")
    with open(bad, "wb") as fh:
        fh.write(bytes(data))
    code, err = req(port, "POST", "/agent/mount",
                    body={"udi_path": bad, "job_id": "job-8"}, cred=user_cred())
    assert code == 409
    assert err["error"] == "UdiCorrupt"


def test_flush_cache_endpoint(agent_rig):
    port, agent, _ = agent_rig
    req(port, "GET", "/agent/resolve/1001")
    assert len(agent.cache) == 1
    code, doc = req(port, "POST", "/agent/flush_cache")
    assert code == 200 and doc["flushed"] is True
    assert len(agent.cache) == 0
