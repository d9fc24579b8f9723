import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from gfmkit.container import (
    GROUP_NAMES,
    MANIFEST_NAME,
    ContainerManifest,
    file_read_count,
    manifest_path,
    partition_for_readers,
    read_group,
    read_manifest,
    read_payloads,
    read_range,
    read_record,
    reset_file_read_count,
    write_container,
)
from gfmkit.errors import (
    CorruptionError,
    FormatError,
    OutputExistsError,
    UnsupportedVersionError,
    ValidationError,
)
from gfmkit.records import encode_record

from conftest import make_random_records


def groups_of(seed, n_train, n_val, n_test):
    records = make_random_records(seed, n_train + n_val + n_test)
    return {
        "trainset": records[:n_train],
        "valset": records[n_train : n_train + n_val],
        "testset": records[n_train + n_val :],
    }


def test_write_creates_subfile_count_plus_one_files(tmp_path):
    groups = groups_of(0, 20, 3, 3)
    for m in (1, 4, 7):
        out = tmp_path / f"c{m}"
        write_container(groups, m, str(out))
        names = sorted(os.listdir(out))
        assert len(names) == m + 1
        assert MANIFEST_NAME in names
        assert {f"data.{i}" for i in range(m)} == set(names) - {MANIFEST_NAME}


def test_manifest_roundtrip(tmp_path):
    groups = groups_of(1, 17, 5, 4)
    written = write_container(groups, 3, str(tmp_path / "c"))
    read = read_manifest(str(tmp_path / "c"))
    assert read.version == written.version
    assert read.subfile_count == written.subfile_count
    assert read.total_records == written.total_records == 26
    for name in GROUP_NAMES:
        np.testing.assert_array_equal(
            read.groups[name].entries, written.groups[name].entries
        )


def test_read_reproduces_records_bit_exactly(tmp_path):
    groups = groups_of(2, 30, 4, 4)
    manifest = write_container(groups, 5, str(tmp_path / "c"))
    for name in GROUP_NAMES:
        got = read_group(manifest, name, str(tmp_path / "c"))
        assert len(got) == len(groups[name])
        for a, b in zip(groups[name], got):
            assert encode_record(a) == encode_record(b)


def test_round_robin_assignment_in_global_order(tmp_path):
    groups = groups_of(3, 10, 2, 2)
    manifest = write_container(groups, 4, str(tmp_path / "c"))
    g = 0
    for name in GROUP_NAMES:
        for entry in manifest.groups[name].entries:
            assert int(entry["subfile"]) == g % 4
            g += 1


def test_offsets_strictly_increasing_per_subfile(tmp_path):
    groups = groups_of(4, 40, 5, 5)
    manifest = write_container(groups, 3, str(tmp_path / "c"))
    per_sub = {}
    for name in GROUP_NAMES:
        for entry in manifest.groups[name].entries:
            per_sub.setdefault(int(entry["subfile"]), []).append(
                (int(entry["offset"]), int(entry["length"]))
            )
    for spans in per_sub.values():
        for (o1, l1), (o2, _) in zip(spans, spans[1:]):
            assert o1 + l1 <= o2
            assert o2 > o1


def test_refuses_existing_nonempty_path(tmp_path):
    groups = groups_of(5, 4, 1, 1)
    out = tmp_path / "c"
    write_container(groups, 2, str(out))
    with pytest.raises(OutputExistsError):
        write_container(groups, 2, str(out))


def test_invalid_record_names_index_and_group(tmp_path):
    groups = groups_of(6, 4, 1, 1)
    groups["valset"][0].atomic_numbers = np.zeros(
        groups["valset"][0].n_atoms, dtype=np.uint8
    )
    with pytest.raises(ValidationError, match="valset.*record 0"):
        write_container(groups, 2, str(tmp_path / "c"))


def test_wrong_group_names_rejected(tmp_path):
    with pytest.raises(ValidationError):
        write_container({"train": []}, 1, str(tmp_path / "c"))


def test_empty_groups_permitted(tmp_path):
    groups = {"trainset": make_random_records(7, 6), "valset": [], "testset": []}
    manifest = write_container(groups, 2, str(tmp_path / "c"))
    assert manifest.total_records == 6
    assert read_manifest(str(tmp_path / "c")).groups["valset"].record_count == 0


def test_bad_magic_is_format_error(tmp_path):
    groups = groups_of(8, 4, 1, 1)
    write_container(groups, 2, str(tmp_path / "c"))
    mpath = manifest_path(str(tmp_path / "c"))
    blob = bytearray(open(mpath, "rb").read())
    blob[0] ^= 0xFF
    open(mpath, "wb").write(bytes(blob))
    with pytest.raises(FormatError):
        read_manifest(str(tmp_path / "c"))


def test_unsupported_version(tmp_path):
    groups = groups_of(9, 4, 1, 1)
    write_container(groups, 2, str(tmp_path / "c"))
    mpath = manifest_path(str(tmp_path / "c"))
    blob = bytearray(open(mpath, "rb").read())
    blob[4:8] = (999).to_bytes(4, "little")
    open(mpath, "wb").write(bytes(blob))
    with pytest.raises(UnsupportedVersionError):
        read_manifest(str(tmp_path / "c"))


def test_truncated_manifest_is_corruption_error(tmp_path):
    groups = groups_of(10, 12, 2, 2)
    write_container(groups, 2, str(tmp_path / "c"))
    mpath = manifest_path(str(tmp_path / "c"))
    blob = open(mpath, "rb").read()
    open(mpath, "wb").write(blob[: len(blob) // 2])
    with pytest.raises(CorruptionError):
        read_manifest(str(tmp_path / "c"))


def test_corrupt_payload_detected_on_read(tmp_path):
    groups = groups_of(11, 6, 1, 1)
    manifest = write_container(groups, 1, str(tmp_path / "c"))
    dpath = os.path.join(tmp_path / "c", "data.0")
    blob = bytearray(open(dpath, "rb").read())
    blob[10] ^= 0xFF
    open(dpath, "wb").write(bytes(blob))
    with pytest.raises(CorruptionError):
        read_group(manifest, "trainset", str(tmp_path / "c"))


# --- partition_for_readers -------------------------------------------------


def test_partition_examples():
    assert partition_for_readers(10, 4) == [(0, 3), (3, 6), (6, 8), (8, 10)]
    assert partition_for_readers(5, 8) == [
        (0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 5), (5, 5), (5, 5),
    ]


def test_partition_coverage_exhaustive():
    # Brute-force coverage oracle at N = 1,000,000, R = 7.
    n, r = 1_000_000, 7
    ranges = partition_for_readers(n, r)
    seen = np.zeros(n, dtype=bool)
    prev_stop = 0
    sizes = []
    for lo, hi in ranges:
        assert lo == prev_stop
        assert hi >= lo
        seen[lo:hi] = True
        sizes.append(hi - lo)
        prev_stop = hi
    assert prev_stop == n
    assert seen.all()
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


def test_partition_rejects_zero_readers():
    with pytest.raises(ValidationError):
        partition_for_readers(10, 0)


# --- range reads -------------------------------------------------------------


def test_parallel_reads_equal_serial(tmp_path):
    groups = groups_of(12, 41, 7, 5)
    manifest = write_container(groups, 4, str(tmp_path / "c"))
    path = str(tmp_path / "c")
    serial = [encode_record(r) for r in read_group(manifest, "trainset", path)]
    for r_count in (1, 2, 4, 8):
        parts = partition_for_readers(41, r_count)
        with ThreadPoolExecutor(max_workers=r_count) as pool:
            chunks = list(
                pool.map(lambda rg: read_range(manifest, "trainset", rg, path), parts)
            )
        merged = [encode_record(rec) for chunk in chunks for rec in chunk]
        assert merged == serial


def test_empty_range_and_bounds(tmp_path):
    groups = groups_of(13, 8, 1, 1)
    manifest = write_container(groups, 2, str(tmp_path / "c"))
    path = str(tmp_path / "c")
    assert read_range(manifest, "trainset", (5, 5), path) == []
    with pytest.raises(ValidationError):
        read_range(manifest, "trainset", (0, 9), path)
    with pytest.raises(ValidationError):
        read_range(manifest, "trainset", (-1, 3), path)


def test_read_counter_instrumentation(tmp_path):
    groups = groups_of(14, 9, 1, 1)
    manifest = write_container(groups, 2, str(tmp_path / "c"))
    reset_file_read_count()
    read_group(manifest, "trainset", str(tmp_path / "c"))
    assert file_read_count() == 9
    read_record(manifest, "valset", 0, str(tmp_path / "c"))
    assert file_read_count() == 10


@pytest.mark.slow
def test_one_gigabyte_parallel_read_benchmark(tmp_path):
    """Gigabyte-scale read benchmark: parallel chunks rebuild the serial stream.

    A pool of large distinct records is tiled to ~1 GiB of payload (every copy
    is stored and read in full, so the I/O is real even though generation is
    bounded). Streams are compared by digest to keep memory flat. Throughput
    ordering between serial and 8-way reads is only asserted when more than
    one core is usable; on a single core thread "parallelism" adds overhead.
    """
    from gfmkit.preprocess import generate_synthetic

    pool_records = generate_synthetic(
        2000, n_atoms_range=(380, 400), box_length=22.0, seed=200
    )
    n = 50_000
    records = [pool_records[i % len(pool_records)] for i in range(n)]
    path = str(tmp_path / "gig")
    write_container(
        {"trainset": records, "valset": [], "testset": []},
        subfile_count=8,
        path=path,
    )
    data_bytes = sum(
        os.path.getsize(os.path.join(path, name))
        for name in os.listdir(path)
        if name.startswith("data.")
    )
    assert data_bytes >= 1 << 30

    manifest = read_manifest(path)
    assert manifest.group("trainset").record_count == n
    parts = partition_for_readers(n, 16)

    def digest_stream(workers):
        t0 = time.perf_counter()
        digest = hashlib.sha256()
        total = 0
        if workers == 1:
            chunks = (read_payloads(manifest, "trainset", rg, path) for rg in parts)
        else:
            executor = ThreadPoolExecutor(max_workers=workers)
            chunks = executor.map(
                lambda rg: read_payloads(manifest, "trainset", rg, path), parts
            )
        for chunk in chunks:
            for payload in chunk:
                digest.update(payload)
                total += len(payload)
        if workers > 1:
            executor.shutdown()
        return digest.hexdigest(), total, time.perf_counter() - t0

    serial_digest, serial_bytes, serial_s = digest_stream(1)
    parallel_digest, parallel_bytes, parallel_s = digest_stream(8)
    assert serial_bytes == parallel_bytes == data_bytes
    assert parallel_digest == serial_digest
    if len(os.sched_getaffinity(0)) >= 2:
        assert parallel_bytes / parallel_s >= 0.9 * (serial_bytes / serial_s)
