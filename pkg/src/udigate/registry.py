"""Registry stand-ins.

LocalRegistry is an in-process content store with fault injection hooks: it
can go down, corrupt a blob, or abort a transfer partway through either
loudly (RegistryIoError) or silently (SilentAbort, which models the worker
process dying mid-stream and reporting nothing). HttpRegistryClient speaks
the same interface against the serving layout over HTTP.

On-disk layout, one directory per image reference:

    <root>/<repository...>/<name:tag>/manifest.json
    <root>/<repository...>/<name:tag>/blobs/<digest>

manifest.json carries exactly: name, tag, layers (digest list, transfer
order), total_size (declared transfer size in bytes; fixture blobs stay tiny
while total_size models the real image scale).
"""
from __future__ import annotations

import json
import os
import threading
import urllib.error
import urllib.parse
import urllib.request
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional

from .errors import DigestMismatch, RegistryIoError, RegistryUnknownImage
from .filetree import FileTree, blob_digest, tree_to_blob


class SilentAbort(Exception):
    """Transfer stops and nobody reports anything.

    Deliberately NOT a UdigateError: this is a fault-injection control signal
    that workers must not convert into a FAILED record, the whole point is
    that the record stays transient until the lease sweeper notices.
    """


@dataclass(frozen=True)
class Manifest:
    name: str
    tag: str
    layers: tuple[str, ...]
    total_size: int

    def canonical(self) -> str:
        return f"{self.name}:{self.tag}"

    def to_json_dict(self) -> dict:
        return {"name": self.name, "tag": self.tag,
                "layers": list(self.layers), "total_size": self.total_size}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Manifest":
        try:
            layers = tuple(str(d) for d in doc["layers"])
            m = cls(name=str(doc["name"]), tag=str(doc["tag"]),
                    layers=layers, total_size=int(doc["total_size"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise RegistryIoError(f"bad manifest document: {exc}") from exc
        if not m.layers:
            raise RegistryIoError("manifest with zero layers")
        if len(set(m.layers)) != len(m.layers):
            raise RegistryIoError("manifest with duplicate layers")
        if m.total_size < 0:
            raise RegistryIoError("negative total_size")
        return m


@dataclass
class _Abort:
    fraction: float
    mode: str  # "error" | "silent"
    once: bool = True


class LocalRegistry:
    def __init__(self):
        self._images: dict[str, Manifest] = {}
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self.manifest_fetches: Counter = Counter()
        self.layer_fetches: Counter = Counter()
        self._down = False
        self._corrupt: set[str] = set()
        self._aborts: dict[str, _Abort] = {}

    # -- population ---------------------------------------------------------

    def add_image(self, name: str, tag: str, layers: Iterable[FileTree],
                  total_size: Optional[int] = None) -> Manifest:
        blobs = [tree_to_blob(t) for t in layers]
        if not blobs:
            raise RegistryIoError("image must have at least one layer")
        digests = []
        with self._lock:
            for b in blobs:
                d = blob_digest(b)
                self._blobs[d] = b
                digests.append(d)
            if len(set(digests)) != len(digests):
                raise RegistryIoError("duplicate layers within one image")
            declared = sum(len(b) for b in blobs) if total_size is None else int(total_size)
            manifest = Manifest(name=name, tag=tag, layers=tuple(digests), total_size=declared)
            self._images[manifest.canonical()] = manifest
        return manifest

    def remove_image(self, canonical: str) -> None:
        with self._lock:
            self._images.pop(canonical, None)

    def images(self) -> list[str]:
        with self._lock:
            return sorted(self._images)

    # -- fault injection ------------------------------------------------------

    def set_down(self, down: bool) -> None:
        with self._lock:
            self._down = down

    def set_corrupt(self, digest: str, corrupt: bool = True) -> None:
        with self._lock:
            if corrupt:
                self._corrupt.add(digest)
            else:
                self._corrupt.discard(digest)

    def set_abort(self, digest: str, fraction: float, mode: str = "error", once: bool = True) -> None:
        if mode not in ("error", "silent"):
            raise ValueError(f"unknown abort mode {mode!r}")
        with self._lock:
            self._aborts[digest] = _Abort(fraction=fraction, mode=mode, once=once)

    def clear_faults(self) -> None:
        with self._lock:
            self._down = False
            self._corrupt.clear()
            self._aborts.clear()

    # -- fetch interface ------------------------------------------------------

    def fetch_manifest(self, canonical: str) -> Manifest:
        with self._lock:
            if self._down:
                raise RegistryIoError("registry unreachable")
            self.manifest_fetches[canonical] += 1
            m = self._images.get(canonical)
        if m is None:
            raise RegistryUnknownImage(f"no such image: {canonical}")
        return m

    def transfer_tick(self, digest: str, fraction: float) -> None:
        """Called by pull workers at chunk boundaries with the cumulative
        fraction transferred. Raises if an abort fault fires here."""
        with self._lock:
            if self._down:
                raise RegistryIoError("registry unreachable")
            ab = self._aborts.get(digest)
            if ab is not None and fraction >= ab.fraction:
                if ab.once:
                    del self._aborts[digest]
                mode = ab.mode
            else:
                return
        if mode == "error":
            raise RegistryIoError(f"stream aborted at {fraction:.0%} of layer {digest[:12]}")
        raise SilentAbort(digest)

    def fetch_layer(self, digest: str) -> bytes:
        with self._lock:
            if self._down:
                raise RegistryIoError("registry unreachable")
            self.layer_fetches[digest] += 1
            data = self._blobs.get(digest)
            corrupt = digest in self._corrupt
        if data is None:
            raise RegistryUnknownImage(f"no such blob: {digest[:12]}")
        if corrupt:
            data = bytes([data[0] ^ 0x01]) + data[1:]
        if blob_digest(data) != digest:
            raise DigestMismatch(f"layer {digest[:12]} bytes do not match digest")
        return data

    # -- disk layout ----------------------------------------------------------

    def save_to_dir(self, root: str) -> None:
        for canonical in self.images():
            m = self._images[canonical]
            img_dir = os.path.join(root, canonical)
            blob_dir = os.path.join(img_dir, "blobs")
            os.makedirs(blob_dir, exist_ok=True)
            with open(os.path.join(img_dir, "manifest.json"), "w", encoding="utf-8") as fh:
                json.dump(m.to_json_dict(), fh, sort_keys=True, indent=2)
                fh.write("\n")
            for d in m.layers:
                with open(os.path.join(blob_dir, d), "wb") as fh:
                    fh.write(self._blobs[d])

    @classmethod
    def load_from_dir(cls, root: str) -> "LocalRegistry":
        reg = cls()
        if not os.path.isdir(root):
            raise RegistryIoError(f"no such registry root: {root}")
        for dirpath, _dirnames, filenames in os.walk(root):
            if "manifest.json" not in filenames:
                continue
            with open(os.path.join(dirpath, "manifest.json"), "r", encoding="utf-8") as fh:
                manifest = Manifest.from_json_dict(json.load(fh))
            with reg._lock:
                reg._images[manifest.canonical()] = manifest
                for d in manifest.layers:
                    blob_path = os.path.join(dirpath, "blobs", d)
                    try:
                        with open(blob_path, "rb") as bf:
                            data = bf.read()
                    except OSError as exc:
                        raise RegistryIoError(f"missing blob file for {d[:12]}: {exc}") from exc
                    if blob_digest(data) != d:
                        raise DigestMismatch(f"blob file {d[:12]} corrupted on disk")
                    reg._blobs[d] = data
        return reg


class HttpRegistryClient:
    """Same fetch interface as LocalRegistry, over the serving endpoints."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _get(self, path: str) -> bytes:
        url = f"{self.base_url}{path}"
        try:
            with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code == 404:
                raise RegistryUnknownImage(f"registry returned 404 for {path}") from exc
            raise RegistryIoError(f"registry returned {exc.code} for {path}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise RegistryIoError(f"registry unreachable: {exc}") from exc

    def fetch_manifest(self, canonical: str) -> Manifest:
        quoted = urllib.parse.quote(canonical, safe=":/")
        doc = json.loads(self._get(f"/registry/{quoted}/manifest.json"))
        return Manifest.from_json_dict(doc)

    def transfer_tick(self, digest: str, fraction: float) -> None:
        pass  # no fault injection over the wire

    def fetch_layer(self, digest: str) -> bytes:
        # the layout nests blobs under each image dir; the serving side
        # resolves digests globally so the client asks by digest alone
        data = self._get(f"/registry/blobs/{urllib.parse.quote(digest)}")
        if blob_digest(data) != digest:
            raise DigestMismatch(f"layer {digest[:12]} bytes do not match digest")
        return data
