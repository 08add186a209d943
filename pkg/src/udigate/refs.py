"""Image reference parsing.

A reference is written ``[repository/]name:tag``. The tag separator is the
LAST colon and the repository separator is the LAST slash before the name, so
registry hosts with ports ("reg.example:5000/tools/busybox:1.36") parse
correctly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import InvalidReference

_PART = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")

DEFAULT_SYSTEM = "local"


@dataclass(frozen=True, order=True)
class ImageReference:
    system: str
    repository: str
    name: str
    tag: str

    def canonical(self) -> str:
        """Canonical text form, stable for use as a dedup key."""
        if self.repository:
            return f"{self.repository}/{self.name}:{self.tag}"
        return f"{self.name}:{self.tag}"

    def key(self) -> str:
        return f"{self.system}|{self.canonical()}"

    def __str__(self) -> str:
        return self.canonical()


def parse_reference(text: str, system: str = DEFAULT_SYSTEM) -> ImageReference:
    """Parse ``[repository/]name:tag`` into an ImageReference.

    Raises InvalidReference on empty parts or a missing tag.
    """
    if not isinstance(text, str) or not text.strip():
        raise InvalidReference("empty image reference")
    text = text.strip()
    head, sep, tag = text.rpartition(":")
    if not sep or not head or not tag:
        raise InvalidReference(f"missing tag in reference {text!r}")
    repository, _, name = head.rpartition("/")
    if not name:
        raise InvalidReference(f"missing name in reference {text!r}")
    for part in (name, tag):
        if not _PART.match(part):
            raise InvalidReference(f"bad characters in reference {text!r}")
    # repository may contain slashes and ports; validate each path segment
    if repository:
        for seg in repository.replace(":", ".").split("/"):
            if not _PART.match(seg):
                raise InvalidReference(f"bad repository segment in {text!r}")
    if not system or "|" in system:
        raise InvalidReference(f"bad system id {system!r}")
    return ImageReference(system=system, repository=repository, name=name, tag=tag)
