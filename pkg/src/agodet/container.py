"""Versioned binary container with a section table.

Layout: magic ``AGOF`` | u32 version | u32 section count | table entries
(16-byte name, u64 offset, u64 length) | payload bytes. All integers are
little-endian. Used for scene, bank, and checkpoint files.
"""

from __future__ import annotations

import struct
from pathlib import Path

MAGIC = b"AGOF"
_HEADER = struct.Struct("<4sII")
_ENTRY = struct.Struct("<16sQQ")


class ContainerError(ValueError):
    pass


def write_container(path, sections: dict[str, bytes], version: int) -> None:
    names = list(sections)
    for name in names:
        if len(name.encode()) > 16:
            raise ContainerError(f"section name too long: {name!r}")
    header_size = _HEADER.size + _ENTRY.size * len(names)
    blobs = [sections[n] for n in names]
    offsets = []
    pos = header_size
    for blob in blobs:
        offsets.append(pos)
        pos += len(blob)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, version, len(names)))
        for name, off, blob in zip(names, offsets, blobs):
            fh.write(_ENTRY.pack(name.encode().ljust(16, b"\0"), off, len(blob)))
        for blob in blobs:
            fh.write(blob)


def read_container(path, expected_version: int | None = None) -> tuple[int, dict[str, bytes]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContainerError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if expected_version is not None and version != expected_version:
        raise ContainerError(
            f"{path}: version mismatch, expected {expected_version}, found {version}"
        )
    table_end = _HEADER.size + _ENTRY.size * count
    if len(raw) < table_end:
        raise ContainerError(f"{path}: truncated section table")
    sections: dict[str, bytes] = {}
    for i in range(count):
        name_raw, off, length = _ENTRY.unpack_from(raw, _HEADER.size + _ENTRY.size * i)
        name = name_raw.rstrip(b"\0").decode()
        if off + length > len(raw):
            raise ContainerError(
                f"{path}: section {name!r} extends past end of file "
                f"({off}+{length} > {len(raw)})"
            )
        sections[name] = raw[off : off + length]
    return version, sections
