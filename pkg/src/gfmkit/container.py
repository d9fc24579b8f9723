"""Self-describing binary container for graph datasets.

A container is a directory holding one index file plus a configurable number
of data sub-files:

    manifest.gfm
    data.0 ... data.(m-1)

Records are assigned to sub-files round-robin in global record order
(trainset, then valset, then testset), which balances sub-file sizes for
heterogeneous graphs and keeps offsets within each sub-file strictly
increasing. Any number of readers may then work on disjoint index ranges of a
group (the n readers : m sub-files pattern); the manifest is small enough to
be read once and shared.

Manifest layout (all little-endian):

    magic "GFMC" | u32 version | u32 subfile_count | u64 total_records
    u32 group_count, then per group:
        u32 name_len | name bytes | u64 record_count
        record_count x { u32 subfile_id | u64 offset | u64 length
                         | u32 n_atoms | u32 edge_count }
    u32 crc32 over everything above

Writes are single-writer; a sealed container is immutable and reads are
side-effect free.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptionError,
    FormatError,
    OutputExistsError,
    UnsupportedVersionError,
    ValidationError,
)
from .records import GraphRecord, decode_record, encode_record, validate_record

MANIFEST_MAGIC = b"GFMC"
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.gfm"
GROUP_NAMES = ("trainset", "valset", "testset")

_ENTRY_DTYPE = np.dtype(
    [
        ("subfile", "<u4"),
        ("offset", "<u8"),
        ("length", "<u8"),
        ("n_atoms", "<u4"),
        ("edge_count", "<u4"),
    ]
)

# Instrumented read counter: every payload read from a sub-file bumps it.
# The distributed store's "no file I/O after load" invariant is asserted
# against this counter.
_read_lock = threading.Lock()
_read_count = 0


def file_read_count() -> int:
    """Number of record payloads read from disk since the last reset."""
    with _read_lock:
        return _read_count


def reset_file_read_count() -> None:
    global _read_count
    with _read_lock:
        _read_count = 0


def _count_read(n: int = 1) -> None:
    global _read_count
    with _read_lock:
        _read_count += n


@dataclass
class GroupIndex:
    """Per-record location and size metadata for one logical group."""

    entries: np.ndarray  # structured array with _ENTRY_DTYPE fields

    @property
    def record_count(self) -> int:
        return int(self.entries.shape[0])


@dataclass
class ContainerManifest:
    """Index of a sealed container: groups, sub-file layout, totals."""

    version: int
    subfile_count: int
    total_records: int
    groups: dict[str, GroupIndex] = field(default_factory=dict)

    def group(self, name: str) -> GroupIndex:
        if name not in self.groups:
            raise ValidationError(
                f"unknown group {name!r}; expected one of {sorted(self.groups)}"
            )
        return self.groups[name]


def subfile_path(path: str, subfile_id: int) -> str:
    return os.path.join(path, f"data.{subfile_id}")


def manifest_path(path: str) -> str:
    return os.path.join(path, MANIFEST_NAME)


def write_container(
    records_by_group: dict[str, list[GraphRecord]],
    subfile_count: int,
    path: str,
) -> ContainerManifest:
    """Write records to a new container directory and return its manifest.

    ``records_by_group`` must provide exactly the groups ``trainset``,
    ``valset`` and ``testset`` (empty lists are fine). Refuses to write into
    an existing non-empty directory.
    """
    if subfile_count < 1:
        raise ValidationError(f"subfile_count must be >= 1, got {subfile_count}")
    if set(records_by_group) != set(GROUP_NAMES):
        raise ValidationError(
            f"groups must be exactly {set(GROUP_NAMES)}, got {set(records_by_group)}"
        )
    if os.path.exists(path) and os.listdir(path):
        raise OutputExistsError(f"output directory {path!r} exists and is not empty")
    os.makedirs(path, exist_ok=True)

    handles = [open(subfile_path(path, i), "wb") for i in range(subfile_count)]
    offsets = [0] * subfile_count
    groups: dict[str, GroupIndex] = {}
    try:
        global_index = 0
        for name in GROUP_NAMES:
            records = records_by_group[name]
            entries = np.zeros(len(records), dtype=_ENTRY_DTYPE)
            for local_i, record in enumerate(records):
                try:
                    validate_record(record, index=local_i)
                except ValidationError as exc:
                    raise ValidationError(f"group {name!r}: {exc}") from exc
                payload = encode_record(record)
                sub = global_index % subfile_count
                handles[sub].write(payload)
                entries[local_i] = (
                    sub,
                    offsets[sub],
                    len(payload),
                    record.n_atoms,
                    record.edge_count,
                )
                offsets[sub] += len(payload)
                global_index += 1
            groups[name] = GroupIndex(entries)
    finally:
        for h in handles:
            h.close()

    manifest = ContainerManifest(
        version=MANIFEST_VERSION,
        subfile_count=subfile_count,
        total_records=sum(g.record_count for g in groups.values()),
        groups=groups,
    )
    with open(manifest_path(path), "wb") as fh:
        fh.write(_encode_manifest(manifest))
    return manifest


def _encode_manifest(manifest: ContainerManifest) -> bytes:
    parts = [
        MANIFEST_MAGIC,
        struct.pack(
            "<IIQ", manifest.version, manifest.subfile_count, manifest.total_records
        ),
        struct.pack("<I", len(manifest.groups)),
    ]
    for name in GROUP_NAMES:
        group = manifest.groups[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", group.record_count))
        parts.append(group.entries.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def read_manifest(path: str) -> ContainerManifest:
    """Read and verify the manifest of a sealed container."""
    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise FormatError(f"no {MANIFEST_NAME} in {path!r}")
    with open(mpath, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MANIFEST_MAGIC:
        raise FormatError(
            f"bad manifest magic {blob[:4]!r}, expected {MANIFEST_MAGIC!r}"
        )
    if len(blob) < 24:
        raise CorruptionError("manifest truncated before header")
    version, subfile_count, total_records = struct.unpack_from("<IIQ", blob, 4)
    if version != MANIFEST_VERSION:
        raise UnsupportedVersionError(
            f"manifest version {version} not supported (expected {MANIFEST_VERSION})"
        )
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CorruptionError("manifest checksum mismatch")

    off = 20
    (group_count,) = struct.unpack_from("<I", blob, off)
    off += 4
    groups: dict[str, GroupIndex] = {}
    for _ in range(group_count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (record_count,) = struct.unpack_from("<Q", blob, off)
        off += 8
        nbytes = record_count * _ENTRY_DTYPE.itemsize
        if off + nbytes > len(blob) - 4:
            raise CorruptionError(f"manifest truncated inside group {name!r} table")
        entries = np.frombuffer(blob, dtype=_ENTRY_DTYPE, count=record_count, offset=off).copy()
        off += nbytes
        groups[name] = GroupIndex(entries)

    if set(groups) != set(GROUP_NAMES):
        raise FormatError(f"manifest groups {set(groups)} != {set(GROUP_NAMES)}")
    manifest = ContainerManifest(version, subfile_count, total_records, groups)
    if sum(g.record_count for g in groups.values()) != total_records:
        raise CorruptionError("manifest group counts do not sum to total_records")
    return manifest


def partition_for_readers(record_count: int, reader_count: int) -> list[tuple[int, int]]:
    """Split [0, record_count) into ``reader_count`` contiguous ranges.

    Ranges are disjoint, cover the whole index set, differ in size by at most
    one, and the larger ranges go to the lower reader ids.
    """
    if reader_count < 1:
        raise ValidationError(f"reader_count must be >= 1, got {reader_count}")
    base, extra = divmod(record_count, reader_count)
    ranges = []
    start = 0
    for reader in range(reader_count):
        size = base + (1 if reader < extra else 0)
        ranges.append((start, start + size))
        start += size
    return ranges


def read_payloads(
    manifest: ContainerManifest,
    group: str,
    index_range: tuple[int, int],
    path: str,
) -> list[bytes]:
    """Read raw (still checksummed) record payloads for a half-open range."""
    lo, hi = index_range
    gindex = manifest.group(group)
    if not (0 <= lo <= hi <= gindex.record_count):
        raise ValidationError(
            f"range [{lo}, {hi}) out of bounds for group {group!r} "
            f"with {gindex.record_count} records"
        )
    payloads: list[bytes] = []
    handles: dict[int, object] = {}
    try:
        for idx in range(lo, hi):
            entry = gindex.entries[idx]
            sub = int(entry["subfile"])
            if sub not in handles:
                handles[sub] = open(subfile_path(path, sub), "rb")
            fh = handles[sub]
            fh.seek(int(entry["offset"]))
            payload = fh.read(int(entry["length"]))
            if len(payload) != int(entry["length"]):
                raise CorruptionError(
                    f"sub-file data.{sub} truncated at offset {int(entry['offset'])}"
                )
            payloads.append(payload)
            _count_read()
    finally:
        for fh in handles.values():
            fh.close()
    return payloads


def read_range(
    manifest: ContainerManifest,
    group: str,
    index_range: tuple[int, int],
    path: str,
) -> list[GraphRecord]:
    """Decode the records of a half-open index range, in order."""
    return [decode_record(p) for p in read_payloads(manifest, group, index_range, path)]


def read_group(manifest: ContainerManifest, group: str, path: str) -> list[GraphRecord]:
    return read_range(manifest, group, (0, manifest.group(group).record_count), path)


def read_record(
    manifest: ContainerManifest, group: str, index: int, path: str
) -> GraphRecord:
    return read_range(manifest, group, (index, index + 1), path)[0]
