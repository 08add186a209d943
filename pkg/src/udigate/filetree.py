"""In-memory file trees, layer blobs, flattening, and site modification.

A tree maps absolute normalized paths to entries (file, dir, or symlink).
Registry layers are canonical-JSON blobs of such trees; flattening applies
layers bottom-to-top with docker-style whiteout semantics, producing the
single tree that later becomes the archive payload.

Flatten rules, chosen to match what sequentially extracting each layer onto a
real filesystem does (the property tests check exactly that):

  * an entry named ``.wh.<name>`` removes ``<name>`` and its subtree from the
    result before the rest of its layer applies, and is not itself kept
  * a dir entry over an existing dir updates the mode and keeps children
  * any other kind change (file over dir, dir over file, symlink over
    anything) removes the old subtree first
  * missing parents are created as dirs (mode 0o755); a parent that exists
    as a non-dir is replaced by a dir
"""
from __future__ import annotations

import base64
import hashlib
import json
import posixpath
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from .errors import EmptyLayerList, MalformedLayer, ModConflict

KIND_FILE = "file"
KIND_DIR = "dir"
KIND_SYMLINK = "symlink"
_KINDS = (KIND_FILE, KIND_DIR, KIND_SYMLINK)

WHITEOUT_PREFIX = ".wh."

DEFAULT_DIR_MODE = 0o755
DEFAULT_FILE_MODE = 0o644
SYMLINK_MODE = 0o777  # lstat reports 0o777 for links on linux; fixed for determinism

MAX_PATH_LEN = 4096


@dataclass(frozen=True)
class TreeEntry:
    kind: str
    mode: int = DEFAULT_FILE_MODE
    content: bytes = b""
    target: str = ""


def normalize_path(path: str) -> str:
    if not isinstance(path, str) or not path:
        raise MalformedLayer("empty path")
    if not path.startswith("/"):
        raise MalformedLayer(f"path not absolute: {path!r}")
    parts = path.split("/")
    for seg in parts[1:]:
        if seg in ("", ".", ".."):
            raise MalformedLayer(f"bad path segment in {path!r}")
    norm = "/" + "/".join(parts[1:])
    if len(norm.encode("utf-8")) > MAX_PATH_LEN:
        raise MalformedLayer(f"path too long: {norm[:80]!r}...")
    return norm


def _check_entry(path: str, entry: TreeEntry) -> TreeEntry:
    if entry.kind not in _KINDS:
        raise MalformedLayer(f"unknown kind {entry.kind!r} at {path}")
    if not (0 <= entry.mode <= 0o7777):
        raise MalformedLayer(f"mode out of range at {path}: {entry.mode:o}")
    if entry.kind == KIND_SYMLINK:
        if not entry.target:
            raise MalformedLayer(f"symlink without target at {path}")
        if entry.content:
            raise MalformedLayer(f"symlink with content at {path}")
        if entry.mode != SYMLINK_MODE:
            entry = TreeEntry(KIND_SYMLINK, SYMLINK_MODE, b"", entry.target)
    else:
        if entry.target:
            raise MalformedLayer(f"{entry.kind} with symlink target at {path}")
        if entry.kind == KIND_DIR and entry.content:
            raise MalformedLayer(f"dir with content at {path}")
    return entry


def is_whiteout(path: str) -> bool:
    return posixpath.basename(path).startswith(WHITEOUT_PREFIX)


def whiteout_target(path: str) -> str:
    parent, name = posixpath.split(path)
    victim = name[len(WHITEOUT_PREFIX):]
    if not victim:
        raise MalformedLayer(f"whiteout with empty target: {path}")
    return posixpath.join(parent, victim)


class FileTree:
    """Mutable mapping of normalized absolute paths to TreeEntry."""

    def __init__(self, entries: Optional[dict[str, TreeEntry]] = None):
        self._entries: dict[str, TreeEntry] = {}
        if entries:
            for p, e in entries.items():
                self.set_entry(p, e)

    def set_entry(self, path: str, entry: TreeEntry) -> None:
        path = normalize_path(path)
        self._entries[path] = _check_entry(path, entry)

    def add_file(self, path: str, content: bytes = b"", mode: int = DEFAULT_FILE_MODE) -> None:
        self.set_entry(path, TreeEntry(KIND_FILE, mode, content))

    def add_dir(self, path: str, mode: int = DEFAULT_DIR_MODE) -> None:
        self.set_entry(path, TreeEntry(KIND_DIR, mode))

    def add_symlink(self, path: str, target: str) -> None:
        self.set_entry(path, TreeEntry(KIND_SYMLINK, SYMLINK_MODE, b"", target))

    def get(self, path: str) -> Optional[TreeEntry]:
        return self._entries.get(path)

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, FileTree) and self._entries == other._entries

    def paths(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, TreeEntry]]:
        for p in sorted(self._entries):
            yield p, self._entries[p]

    def copy(self) -> "FileTree":
        t = FileTree()
        t._entries = dict(self._entries)
        return t

    def remove_subtree(self, path: str) -> int:
        """Drop path and everything under it. Returns entries removed."""
        path = normalize_path(path)
        prefix = path if path.endswith("/") else path + "/"
        doomed = [p for p in self._entries if p == path or p.startswith(prefix)]
        for p in doomed:
            del self._entries[p]
        return len(doomed)

    def content_size(self) -> int:
        return sum(len(e.content) for e in self._entries.values())

    def validate(self) -> None:
        """Check parent-kind consistency: a present ancestor must be a dir."""
        for path in self._entries:
            parent = posixpath.dirname(path)
            while parent != "/":
                ent = self._entries.get(parent)
                if ent is not None and ent.kind != KIND_DIR:
                    raise MalformedLayer(f"{path} is under non-dir {parent}")
                parent = posixpath.dirname(parent)

    def digest(self) -> str:
        return hashlib.sha256(tree_to_blob(self)).hexdigest()


# --- canonical blob codec ----------------------------------------------------

def tree_to_blob(tree: FileTree) -> bytes:
    """Canonical JSON serialization. Same tree always gives identical bytes,
    which is what makes content digests meaningful."""
    entries = {}
    for path, e in tree.items():
        rec: dict = {"kind": e.kind, "mode": e.mode}
        if e.kind == KIND_FILE:
            rec["content_b64"] = base64.b64encode(e.content).decode("ascii")
        elif e.kind == KIND_SYMLINK:
            rec["target"] = e.target
        entries[path] = rec
    doc = {"entries": entries}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def tree_from_blob(data: bytes) -> FileTree:
    try:
        doc = json.loads(data.decode("utf-8"))
        entries = doc["entries"]
        if not isinstance(entries, dict):
            raise TypeError("entries must be an object")
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise MalformedLayer(f"undecodable layer blob: {exc}") from exc
    tree = FileTree()
    for path, rec in entries.items():
        try:
            kind = rec["kind"]
            mode = int(rec["mode"])
            content = base64.b64decode(rec["content_b64"]) if "content_b64" in rec else b""
            target = rec.get("target", "")
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedLayer(f"bad entry at {path!r}: {exc}") from exc
        tree.set_entry(path, TreeEntry(kind, mode, content, target))
    return tree


def blob_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --- flatten -----------------------------------------------------------------

def _ensure_parent_dirs(result: FileTree, path: str) -> None:
    parents = []
    parent = posixpath.dirname(path)
    while parent != "/":
        parents.append(parent)
        parent = posixpath.dirname(parent)
    for p in reversed(parents):
        ent = result.get(p)
        if ent is None:
            result.set_entry(p, TreeEntry(KIND_DIR, DEFAULT_DIR_MODE))
        elif ent.kind != KIND_DIR:
            result.remove_subtree(p)
            result.set_entry(p, TreeEntry(KIND_DIR, DEFAULT_DIR_MODE))


def apply_layer(result: FileTree, layer: FileTree) -> None:
    whiteouts = [p for p, _ in layer.items() if is_whiteout(p)]
    for p in whiteouts:
        result.remove_subtree(whiteout_target(p))
    for path, entry in layer.items():
        if is_whiteout(path):
            continue
        _ensure_parent_dirs(result, path)
        existing = result.get(path)
        if entry.kind == KIND_DIR and existing is not None and existing.kind == KIND_DIR:
            result.set_entry(path, entry)  # mode refresh, children survive
            continue
        if existing is not None:
            result.remove_subtree(path)
        result.set_entry(path, entry)


def flatten(layers: Iterable[FileTree]) -> FileTree:
    layers = list(layers)
    if not layers:
        raise EmptyLayerList("cannot flatten zero layers")
    result = FileTree()
    for layer in layers:
        apply_layer(result, layer)
    return result


# --- site modification --------------------------------------------------------

ENV_FILE = "/etc/environment"


@dataclass(frozen=True)
class SiteMod:
    op: str  # inject_file | make_dir | remove_path | append_env
    path: str = ""
    content: bytes = b""
    mode: int = DEFAULT_FILE_MODE
    key: str = ""
    value: str = ""

    def summary(self) -> str:
        if self.op == "append_env":
            return f"append_env:{self.key}"
        return f"{self.op}:{self.path}"


@dataclass(frozen=True)
class SiteConfig:
    mods: tuple[SiteMod, ...] = ()
    cleanup_commands: tuple[str, ...] = ()


def apply_site_mods(tree: FileTree, site: SiteConfig) -> FileTree:
    """Return a new tree with site modifications applied in order.

    Conflicts (injecting a file where a dir sits, or mkdir over a file) raise
    ModConflict rather than guessing, a broken site config must not produce a
    silently wrong image.
    """
    out = tree.copy()
    for mod in site.mods:
        if mod.op == "inject_file":
            path = normalize_path(mod.path)
            existing = out.get(path)
            if existing is not None and existing.kind == KIND_DIR:
                raise ModConflict(f"inject_file over dir: {path}")
            _ensure_parent_dirs(out, path)
            out.set_entry(path, TreeEntry(KIND_FILE, mod.mode, mod.content))
        elif mod.op == "make_dir":
            path = normalize_path(mod.path)
            existing = out.get(path)
            if existing is not None and existing.kind != KIND_DIR:
                raise ModConflict(f"make_dir over {existing.kind}: {path}")
            _ensure_parent_dirs(out, path)
            if existing is None:
                out.set_entry(path, TreeEntry(KIND_DIR, mod.mode if mod.mode else DEFAULT_DIR_MODE))
        elif mod.op == "remove_path":
            out.remove_subtree(normalize_path(mod.path))
        elif mod.op == "append_env":
            if not mod.key:
                raise ModConflict("append_env without key")
            existing = out.get(ENV_FILE)
            if existing is not None and existing.kind != KIND_FILE:
                raise ModConflict(f"append_env target is a {existing.kind}")
            _ensure_parent_dirs(out, ENV_FILE)
            body = existing.content if existing is not None else b""
            line = f"{mod.key}={mod.value}\n".encode("utf-8")
            mode = existing.mode if existing is not None else DEFAULT_FILE_MODE
            out.set_entry(ENV_FILE, TreeEntry(KIND_FILE, mode, body + line))
        else:
            raise ModConflict(f"unknown site op {mod.op!r}")
    return out


def parse_site_file(text: str) -> SiteConfig:
    """Site config grammar, one directive per line:

        inject_file PATH MODE BASE64CONTENT
        make_dir PATH [MODE]
        remove_path PATH
        append_env KEY VALUE
        cleanup COMMAND...
    """
    mods: list[SiteMod] = []
    cleanup: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        op, _, rest = line.partition(" ")
        args = rest.split()
        try:
            if op == "inject_file":
                path, mode, b64 = args[0], int(args[1], 8), args[2] if len(args) > 2 else ""
                mods.append(SiteMod("inject_file", path=path, mode=mode,
                                    content=base64.b64decode(b64)))
            elif op == "make_dir":
                mode = int(args[1], 8) if len(args) > 1 else DEFAULT_DIR_MODE
                mods.append(SiteMod("make_dir", path=args[0], mode=mode))
            elif op == "remove_path":
                mods.append(SiteMod("remove_path", path=args[0]))
            elif op == "append_env":
                mods.append(SiteMod("append_env", key=args[0], value=args[1] if len(args) > 1 else ""))
            elif op == "cleanup":
                cleanup.append(rest.strip())
            else:
                raise ValueError(f"unknown directive {op!r}")
        except (IndexError, ValueError) as exc:
            raise ModConflict(f"site config line {lineno}: {exc}") from exc
    return SiteConfig(mods=tuple(mods), cleanup_commands=tuple(cleanup))


def default_site_config() -> SiteConfig:
    """The stock site policy: resolver and environment glue plus a scratch
    mount point, roughly what a site prepares before images go live."""
    return SiteConfig(
        mods=(
            SiteMod("make_dir", path="/etc", mode=DEFAULT_DIR_MODE),
            SiteMod("inject_file", path="/etc/nsswitch.conf",
                    content=b"passwd: files\ngroup: files\nhosts: files dns\n"),
            SiteMod("make_dir", path="/scratch", mode=0o777),
            SiteMod("append_env", key="UDI_SITE", value="1"),
        ),
        cleanup_commands=("cleanup_scratch", "drop_node_cache"),
    )
