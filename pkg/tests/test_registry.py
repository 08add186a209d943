"""Registry fixture behavior: manifests, fault injection, disk layout."""

import pytest

from helpers import payload_tree, tiny_tree
from udigate.errors import DigestMismatch, RegistryIoError, RegistryUnknownImage
from udigate.filetree import blob_digest, tree_to_blob
from udigate.registry import LocalRegistry, Manifest, SilentAbort


@pytest.fixture
def reg():
    r = LocalRegistry()
    r.add_image("team/app", "v1", [tiny_tree(), payload_tree()], total_size=10_000)
    return r


def test_fetch_manifest(reg):
    m = reg.fetch_manifest("team/app:v1")
    assert m.canonical() == "team/app:v1"
    assert m.total_size == 10_000
    assert m.layers == (blob_digest(tree_to_blob(tiny_tree())),
                        blob_digest(tree_to_blob(payload_tree())))
    assert reg.manifest_fetches["team/app:v1"] == 1


def test_fetch_layer_matches_digest(reg):
    m = reg.fetch_manifest("team/app:v1")
    for d in m.layers:
        assert blob_digest(reg.fetch_layer(d)) == d


def test_unknown_image_and_blob(reg):
    with pytest.raises(RegistryUnknownImage):
        reg.fetch_manifest("team/app:v2")
    with pytest.raises(RegistryUnknownImage):
        reg.fetch_layer("f" * 64)


def test_down_registry(reg):
    reg.set_down(True)
    with pytest.raises(RegistryIoError):
        reg.fetch_manifest("team/app:v1")
    reg.set_down(False)
    assert reg.fetch_manifest("team/app:v1").tag == "v1"


def test_corrupt_blob_raises_digest_mismatch(reg):
    d = reg.fetch_manifest("team/app:v1").layers[0]
    reg.set_corrupt(d)
    with pytest.raises(DigestMismatch):
        reg.fetch_layer(d)
    reg.set_corrupt(d, False)
    reg.fetch_layer(d)


def test_abort_fires_once_at_fraction(reg):
    d = reg.fetch_manifest("team/app:v1").layers[0]
    reg.set_abort(d, fraction=0.5, mode="error")
    reg.transfer_tick(d, 0.25)  # below threshold
    with pytest.raises(RegistryIoError):
        reg.transfer_tick(d, 0.5)
    reg.transfer_tick(d, 1.0)  # one-shot fault consumed


def test_silent_abort_not_a_package_error(reg):
    from udigate.errors import UdigateError
    d = reg.fetch_manifest("team/app:v1").layers[0]
    reg.set_abort(d, fraction=0.1, mode="silent")
    with pytest.raises(SilentAbort) as exc_info:
        reg.transfer_tick(d, 0.9)
    assert not isinstance(exc_info.value, UdigateError)


def test_bad_abort_mode_rejected(reg):
    with pytest.raises(ValueError):
        reg.set_abort("d" * 64, 0.5, mode="sideways")


def test_manifest_document_validation():
    with pytest.raises(RegistryIoError):
        Manifest.from_json_dict({"name": "x", "tag": "y", "layers": [], "total_size": 1})
    with pytest.raises(RegistryIoError):
        Manifest.from_json_dict({"name": "x", "tag": "y", "layers": ["a", "a"], "total_size": 1})
    with pytest.raises(RegistryIoError):
        Manifest.from_json_dict({"name": "x", "tag": "y", "layers": ["a"], "total_size": -5})
    with pytest.raises(RegistryIoError):
        Manifest.from_json_dict({"name": "x", "layers": ["a"], "total_size": 1})


def test_save_and_load_dir(reg, tmp_path):
    reg.save_to_dir(str(tmp_path))
    assert (tmp_path / "team" / "app:v1" / "manifest.json").is_file()
    back = LocalRegistry.load_from_dir(str(tmp_path))
    assert back.images() == ["team/app:v1"]
    m = back.fetch_manifest("team/app:v1")
    assert m == reg.fetch_manifest("team/app:v1")
    for d in m.layers:
        assert back.fetch_layer(d) == reg.fetch_layer(d)


def test_load_dir_rejects_corrupt_blob(reg, tmp_path):
    reg.save_to_dir(str(tmp_path))
    d = reg.fetch_manifest("team/app:v1").layers[0]
    blob = tmp_path / "team" / "app:v1" / "blobs" / d
    blob.write_bytes(b"tampered")
    with pytest.raises(DigestMismatch):
        LocalRegistry.load_from_dir(str(tmp_path))


def test_load_missing_root():
    with pytest.raises(RegistryIoError):
        LocalRegistry.load_from_dir("/no/such/dir")
