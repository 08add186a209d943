"""Single-file image archive format.

Layout, all integers little-endian:

    magic      4 bytes  b"UDI1"
    version    u16      currently 1
    meta_len   u32
    metadata   meta_len bytes of canonical JSON (created_at, source_ref, site_mods)
    count      u32      file table entry count
    entry *count, each:
        path_len    u16
        path        path_len bytes, UTF-8
        kind        u8   (0 file, 1 dir, 2 symlink)
        mode        u16
        content_len u64
        content     content_len bytes (file bytes, or symlink target UTF-8)
    trailer    32 bytes, SHA-256 over every preceding byte

Entries are sorted by path, so identical trees with identical metadata give
bit-identical archives. Writers stream through a hashing wrapper and land on
the final name via rename, a crashed writer leaves no partial archive behind.

verify_udi never raises: it walks the structure with seeks (no content is
held in memory), then stream-hashes everything before the trailer, and
reports (ok, reason). Readers and mounters must gate on it.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import StorageIoError, UdiCorrupt
from .filetree import (KIND_DIR, KIND_FILE, KIND_SYMLINK, FileTree, TreeEntry)

MAGIC = b"UDI1"
VERSION = 1
TRAILER_LEN = 32
_FIXED_HEAD = len(MAGIC) + 2 + 4  # magic + version + meta_len
MIN_SIZE = _FIXED_HEAD + 4 + TRAILER_LEN

_KIND_CODE = {KIND_FILE: 0, KIND_DIR: 1, KIND_SYMLINK: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}

_META_LIMIT = 16 * 1024 * 1024
_COUNT_LIMIT = 10_000_000
_CHUNK = 1024 * 1024


@dataclass(frozen=True)
class UdiDescriptor:
    path: str
    content_digest: str  # hex of the trailer hash
    size_bytes: int
    created_at: float
    source_ref: str
    site_mods: tuple[str, ...] = ()


@dataclass(frozen=True)
class UdiCheck:
    ok: bool
    reason: str = ""
    detail: str = ""


@dataclass(frozen=True)
class UdiEntryInfo:
    path: str
    kind: str
    mode: int
    size: int
    content_offset: int


class _HashingWriter:
    def __init__(self, fh):
        self._fh = fh
        self.sha = hashlib.sha256()
        self.written = 0

    def write(self, data: bytes) -> None:
        self.sha.update(data)
        self._fh.write(data)
        self.written += len(data)


def _metadata_bytes(created_at: float, source_ref: str, site_mods: Iterable[str]) -> bytes:
    doc = {"created_at": created_at, "site_mods": list(site_mods), "source_ref": source_ref}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_udi_stream(dest_path: str, created_at: float, source_ref: str,
                     site_mods: Iterable[str],
                     entries: Iterable[tuple[str, str, int, int, Iterable[bytes]]]) -> UdiDescriptor:
    """Streaming writer. entries yields (path, kind, mode, content_len,
    content_chunks) already sorted by path; chunks must total content_len.
    Writes to a temp file in the destination directory and renames into
    place, so a crash mid-write never leaves a partial archive at dest_path.
    """
    entries = list(entries)
    meta = _metadata_bytes(created_at, source_ref, site_mods)
    if len(meta) > _META_LIMIT:
        raise StorageIoError("metadata block too large")
    dest_dir = os.path.dirname(os.path.abspath(dest_path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".udi-", dir=dest_dir)
    try:
        with os.fdopen(fd, "wb") as raw:
            w = _HashingWriter(raw)
            w.write(MAGIC)
            w.write(struct.pack("<H", VERSION))
            w.write(struct.pack("<I", len(meta)))
            w.write(meta)
            w.write(struct.pack("<I", len(entries)))
            for path, kind, mode, content_len, chunks in entries:
                pb = path.encode("utf-8")
                w.write(struct.pack("<H", len(pb)))
                w.write(pb)
                w.write(struct.pack("<B", _KIND_CODE[kind]))
                w.write(struct.pack("<H", mode))
                w.write(struct.pack("<Q", content_len))
                fed = 0
                for chunk in chunks:
                    if chunk:
                        w.write(chunk)
                        fed += len(chunk)
                if fed != content_len:
                    raise StorageIoError(
                        f"entry {path}: declared {content_len} bytes, got {fed}")
            digest = w.sha.digest()
            raw.write(digest)
            size = w.written + TRAILER_LEN
        os.replace(tmp, dest_path)
        tmp = None
    except OSError as exc:
        raise StorageIoError(f"archive write failed: {exc}") from exc
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
    return UdiDescriptor(path=dest_path, content_digest=digest.hex(), size_bytes=size,
                         created_at=created_at, source_ref=source_ref,
                         site_mods=tuple(site_mods))


def _tree_entry_stream(tree: FileTree) -> Iterator[tuple[str, str, int, int, Iterable[bytes]]]:
    for path, e in tree.items():
        if e.kind == KIND_FILE:
            yield path, e.kind, e.mode, len(e.content), (e.content,)
        elif e.kind == KIND_SYMLINK:
            tb = e.target.encode("utf-8")
            yield path, e.kind, e.mode, len(tb), (tb,)
        else:
            yield path, e.kind, e.mode, 0, ()


def write_udi(tree: FileTree, dest_path: str, source_ref: str, created_at: float,
              site_mods: Iterable[str] = ()) -> UdiDescriptor:
    return write_udi_stream(dest_path, created_at, source_ref, site_mods,
                            _tree_entry_stream(tree))


class _Walker:
    """Structural walk over an archive without loading contents."""

    def __init__(self, fh, size: int):
        self.fh = fh
        self.size = size
        self.body_end = size - TRAILER_LEN  # first trailer byte
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > self.body_end:
            raise UdiCorrupt("truncated", what)
        self.fh.seek(self.off)
        data = self.fh.read(n)
        if len(data) != n:
            raise UdiCorrupt("truncated", what)
        self.off += n
        return data

    def skip(self, n: int, what: str) -> int:
        start = self.off
        if self.off + n > self.body_end:
            raise UdiCorrupt("truncated", what)
        self.off += n
        return start


def _walk_structure(fh, size: int) -> tuple[dict, list[UdiEntryInfo]]:
    if size < MIN_SIZE:
        raise UdiCorrupt("truncated", "shorter than fixed header")
    w = _Walker(fh, size)
    if w.take(4, "magic") != MAGIC:
        raise UdiCorrupt("magic", "bad magic")
    (version,) = struct.unpack("<H", w.take(2, "version"))
    if version != VERSION:
        raise UdiCorrupt("version", f"unsupported version {version}")
    (meta_len,) = struct.unpack("<I", w.take(4, "meta_len"))
    if meta_len > _META_LIMIT:
        raise UdiCorrupt("truncated", "metadata length exceeds limit")
    meta_raw = w.take(meta_len, "metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
        if not isinstance(meta, dict):
            raise ValueError("metadata not an object")
    except (ValueError, UnicodeDecodeError) as exc:
        raise UdiCorrupt("metadata", str(exc))
    (count,) = struct.unpack("<I", w.take(4, "count"))
    if count > _COUNT_LIMIT:
        raise UdiCorrupt("truncated", "entry count exceeds limit")
    infos: list[UdiEntryInfo] = []
    for i in range(count):
        (path_len,) = struct.unpack("<H", w.take(2, f"entry {i} path_len"))
        path_raw = w.take(path_len, f"entry {i} path")
        try:
            path = path_raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise UdiCorrupt("metadata", f"entry {i} path not utf-8: {exc}")
        (kind_code,) = struct.unpack("<B", w.take(1, f"entry {i} kind"))
        if kind_code not in _CODE_KIND:
            raise UdiCorrupt("metadata", f"entry {i} unknown kind {kind_code}")
        (mode,) = struct.unpack("<H", w.take(2, f"entry {i} mode"))
        (content_len,) = struct.unpack("<Q", w.take(8, f"entry {i} content_len"))
        content_off = w.skip(content_len, f"entry {i} content")
        infos.append(UdiEntryInfo(path=path, kind=_CODE_KIND[kind_code], mode=mode,
                                  size=content_len, content_offset=content_off))
    if w.off != w.body_end:
        raise UdiCorrupt("truncated", f"{w.body_end - w.off} undeclared bytes before trailer")
    return meta, infos


def _hash_body(fh, size: int) -> bytes:
    sha = hashlib.sha256()
    fh.seek(0)
    remaining = size - TRAILER_LEN
    while remaining > 0:
        chunk = fh.read(min(_CHUNK, remaining))
        if not chunk:
            raise UdiCorrupt("truncated", "short read while hashing")
        sha.update(chunk)
        remaining -= len(chunk)
    return sha.digest()


_SMALL_ARCHIVE = 8 * 1024 * 1024


def verify_udi(path: str) -> UdiCheck:
    """Full integrity check: structure walk plus trailer hash over the whole
    body. Bounded memory regardless of archive size. Never raises."""
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as real:
            # small archives are checked from memory, seek-heavy walks on
            # the page cache are pure overhead at this size
            fh = io.BytesIO(real.read()) if size <= _SMALL_ARCHIVE else real
            try:
                _walk_structure(fh, size)
            except UdiCorrupt as exc:
                return UdiCheck(False, exc.reason, str(exc))
            computed = _hash_body(fh, size)
            fh.seek(size - TRAILER_LEN)
            stored = fh.read(TRAILER_LEN)
            if len(stored) != TRAILER_LEN:
                return UdiCheck(False, "truncated", "trailer short read")
            if computed != stored:
                return UdiCheck(False, "checksum", "trailer does not match body hash")
    except OSError as exc:
        return UdiCheck(False, "io", str(exc))
    except UdiCorrupt as exc:
        return UdiCheck(False, exc.reason, str(exc))
    return UdiCheck(True)


def verify_udi_bytes(data: bytes) -> UdiCheck:
    """verify_udi over an in-memory image, used by corruption sweeps."""
    fh = io.BytesIO(data)
    size = len(data)
    try:
        _walk_structure(fh, size)
    except UdiCorrupt as exc:
        return UdiCheck(False, exc.reason, str(exc))
    computed = hashlib.sha256(data[:-TRAILER_LEN]).digest() if size >= TRAILER_LEN else b""
    if size < TRAILER_LEN or computed != data[-TRAILER_LEN:]:
        return UdiCheck(False, "checksum", "trailer does not match body hash")
    return UdiCheck(True)


def scan_udi(path: str) -> tuple[UdiDescriptor, list[UdiEntryInfo]]:
    """Metadata walk without content loads or hashing. Structural errors
    raise UdiCorrupt. Callers that need integrity must verify_udi first."""
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            meta, infos = _walk_structure(fh, size)
            fh.seek(size - TRAILER_LEN)
            stored = fh.read(TRAILER_LEN)
    except OSError as exc:
        raise StorageIoError(f"cannot scan archive: {exc}") from exc
    desc = UdiDescriptor(
        path=path, content_digest=stored.hex(), size_bytes=size,
        created_at=float(meta.get("created_at", 0.0)),
        source_ref=str(meta.get("source_ref", "")),
        site_mods=tuple(meta.get("site_mods", ())))
    return desc, infos


def read_udi(path: str) -> tuple[FileTree, UdiDescriptor]:
    """Verify, then load the whole tree into memory. For archives too large
    to hold, use scan_udi + read_entry_content."""
    check = verify_udi(path)
    if not check.ok:
        raise UdiCorrupt(check.reason, path)
    desc, infos = scan_udi(path)
    tree = FileTree()
    with open(path, "rb") as fh:
        for info in infos:
            if info.kind == KIND_FILE:
                fh.seek(info.content_offset)
                content = fh.read(info.size)
                tree.set_entry(info.path, TreeEntry(KIND_FILE, info.mode, content))
            elif info.kind == KIND_SYMLINK:
                fh.seek(info.content_offset)
                target = fh.read(info.size).decode("utf-8")
                tree.set_entry(info.path, TreeEntry(KIND_SYMLINK, info.mode, b"", target))
            else:
                tree.set_entry(info.path, TreeEntry(KIND_DIR, info.mode))
    return tree, desc


def read_entry_content(path: str, info: UdiEntryInfo, chunk_size: int = _CHUNK) -> Iterator[bytes]:
    """Stream one entry's content without loading it whole."""
    with open(path, "rb") as fh:
        fh.seek(info.content_offset)
        remaining = info.size
        while remaining > 0:
            chunk = fh.read(min(chunk_size, remaining))
            if not chunk:
                raise UdiCorrupt("truncated", info.path)
            yield chunk
            remaining -= len(chunk)
