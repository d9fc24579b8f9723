"""Distributed in-memory sample store.

Each rank loads its owned contiguous chunk of a container group into memory
once; afterwards every sample is served from memory — either locally (no
message at all) or with exactly one request/response round trip to the
owning rank inside the caller's replica sub-group. The container is never
touched again after load, which the instrumented reader counter can prove.

Wire protocol (little-endian), identical over TCP sockets and in-process
channels:

    request:  magic "DDSQ" | u64 request id | u8 group id | u64 global index
    response: magic "DDSR" | u64 request id | u8 status
              | u64 payload length | payload

    status: 0 ok, 1 out-of-range, 2 internal error

Group ids: trainset 0, valset 1, testset 2. Rank service addresses come from
a rendezvous file of ``rank host:port`` lines.

Batch scheduling uses one global permutation per (base seed, epoch), dealt
round-robin to ranks (permutation index k goes to rank k mod P) and chunked
into batches with the final short batch kept, so every sample index appears
exactly once per epoch across all ranks.
"""

from __future__ import annotations

import itertools
import logging
import queue
import struct
import threading
import time

import numpy as np

from . import container as container_io
from .errors import ConfigError, TransportError, ValidationError
from .records import GraphRecord, decode_record
from .transport import Endpoint, SocketEndpoint, announce, connect, listen, wait_for_ranks

log = logging.getLogger(__name__)

REQUEST_MAGIC = b"DDSQ"
RESPONSE_MAGIC = b"DDSR"
STATUS_OK = 0
STATUS_OUT_OF_RANGE = 1
STATUS_INTERNAL = 2

GROUP_IDS = {"trainset": 0, "valset": 1, "testset": 2}
GROUP_BY_ID = {v: k for k, v in GROUP_IDS.items()}

_REQ = struct.Struct("<QBQ")  # request id, group id, index (after magic)
_RESP_HEAD = struct.Struct("<QBQ")  # request id, status, payload length


def pack_request(request_id: int, group_id: int, index: int) -> bytes:
    return REQUEST_MAGIC + _REQ.pack(request_id, group_id, index)


def unpack_request(frame: bytes) -> tuple[int, int, int]:
    if len(frame) != 4 + _REQ.size or frame[:4] != REQUEST_MAGIC:
        raise TransportError(f"bad fetch request frame ({frame[:4]!r})")
    return _REQ.unpack_from(frame, 4)


def pack_response(request_id: int, status: int, payload: bytes = b"") -> bytes:
    return RESPONSE_MAGIC + _RESP_HEAD.pack(request_id, status, len(payload)) + payload


def read_request(ep: Endpoint, deadline=None) -> tuple[int, int, int]:
    magic = ep.recv_exact(4, deadline)
    if magic != REQUEST_MAGIC:
        raise TransportError(f"bad request magic {magic!r}")
    return _REQ.unpack(ep.recv_exact(_REQ.size, deadline))


def read_response(ep: Endpoint, deadline=None) -> tuple[int, int, bytes]:
    magic = ep.recv_exact(4, deadline)
    if magic != RESPONSE_MAGIC:
        raise TransportError(f"bad response magic {magic!r}")
    request_id, status, length = _RESP_HEAD.unpack(
        ep.recv_exact(_RESP_HEAD.size, deadline)
    )
    payload = ep.recv_exact(length, deadline) if length else b""
    return request_id, status, payload


# --------------------------------------------------------------------------
# Ownership
# --------------------------------------------------------------------------


class OwnershipMap:
    """Who holds which contiguous slice, per replica sub-group.

    Ranks are partitioned into ``replication_factor`` sub-groups of
    P / R consecutive ranks; each sub-group holds the full dataset, split
    contiguously and evenly (larger chunks on lower local ranks) unless
    explicit ``chunk_sizes`` are supplied.
    """

    def __init__(
        self,
        n_samples: int,
        n_ranks: int,
        replication_factor: int = 1,
        chunk_sizes: list[int] | None = None,
    ):
        if n_ranks < 1:
            raise ConfigError(f"n_ranks must be >= 1, got {n_ranks}")
        if replication_factor < 1 or n_ranks % replication_factor != 0:
            raise ConfigError(
                f"replication_factor {replication_factor} must divide n_ranks {n_ranks}"
            )
        self.n_samples = int(n_samples)
        self.n_ranks = int(n_ranks)
        self.replication_factor = int(replication_factor)
        self.group_size = n_ranks // replication_factor
        if chunk_sizes is None:
            local_ranges = container_io.partition_for_readers(
                n_samples, self.group_size
            )
        else:
            if len(chunk_sizes) != self.group_size:
                raise ConfigError(
                    f"chunk_sizes needs {self.group_size} entries, got {len(chunk_sizes)}"
                )
            if any(s < 0 for s in chunk_sizes) or sum(chunk_sizes) != n_samples:
                raise ConfigError(
                    f"chunk_sizes must be nonnegative and sum to {n_samples}"
                )
            local_ranges = []
            start = 0
            for size in chunk_sizes:
                local_ranges.append((start, start + size))
                start += size
        self.local_ranges = local_ranges
        self._bounds = np.array([lo for lo, _ in local_ranges] + [n_samples])

    def subgroup_of(self, rank: int) -> int:
        return rank // self.group_size

    def local_rank(self, rank: int) -> int:
        return rank % self.group_size

    def range_of(self, rank: int) -> tuple[int, int]:
        """The contiguous global index range owned by ``rank``."""
        return self.local_ranges[self.local_rank(rank)]

    def chunk_sizes(self) -> list[int]:
        return [hi - lo for lo, hi in self.local_ranges]

    def owner_of(self, global_index: int, caller_rank: int) -> int:
        """Owning rank of an index within the caller's replica sub-group."""
        if not (0 <= global_index < self.n_samples):
            raise ValidationError(
                f"index {global_index} out of range [0, {self.n_samples})"
            )
        local = int(np.searchsorted(self._bounds, global_index, side="right") - 1)
        # explicit chunk sizes may contain empty ranges sharing a boundary
        while self.local_ranges[local][0] == self.local_ranges[local][1]:
            local += 1
        return self.subgroup_of(caller_rank) * self.group_size + local


def build_ownership(
    n_samples: int,
    n_ranks: int,
    replication_factor: int = 1,
    chunk_sizes: list[int] | None = None,
) -> OwnershipMap:
    return OwnershipMap(n_samples, n_ranks, replication_factor, chunk_sizes)


# --------------------------------------------------------------------------
# Fabrics: how a rank reaches the service loops of its peers
# --------------------------------------------------------------------------


class ChannelFabric:
    """In-process fabric for thread ranks.

    Every rank registers an inbox; remote fetches drop (frame, reply queue)
    pairs into the owner's inbox, whose service thread answers in arrival
    order. One request/response per record, same frames as the socket path.
    """

    def __init__(self, n_ranks: int):
        self.n_ranks = n_ranks
        self.inboxes: list[queue.Queue] = [queue.Queue() for _ in range(n_ranks)]

    def request_many(
        self, owner: int, frames: list[bytes], timeout: float
    ) -> list[bytes]:
        reply: queue.Queue = queue.Queue()
        for frame in frames:
            self.inboxes[owner].put((frame, reply))
        out = []
        deadline = time.monotonic() + timeout
        for _ in frames:
            budget = deadline - time.monotonic()
            if budget <= 0:
                raise TransportError(f"fetch from rank {owner} timed out")
            try:
                out.append(reply.get(timeout=budget))
            except queue.Empty:
                raise TransportError(f"fetch from rank {owner} timed out")
        return out

    def serve(self, rank: int, handler) -> threading.Thread:
        inbox = self.inboxes[rank]

        def loop():
            while True:
                item = inbox.get()
                if item is None:
                    return
                frame, reply = item
                reply.put(handler(frame))

        thread = threading.Thread(target=loop, name=f"ddstore-svc-{rank}", daemon=True)
        thread.start()
        return thread

    def shutdown(self, rank: int) -> None:
        self.inboxes[rank].put(None)


class SocketFabric:
    """TCP fabric for process ranks, addressed via the rendezvous file."""

    def __init__(self, rank: int, n_ranks: int, rendezvous_path: str):
        self.rank = rank
        self.n_ranks = n_ranks
        self.rendezvous_path = rendezvous_path
        self._listener = None
        self._threads: list[threading.Thread] = []
        self._conns: dict[int, Endpoint] = {}
        self._conn_lock = threading.Lock()
        self._stop = threading.Event()

    def serve(self, handler) -> None:
        sock, port = listen()
        self._listener = sock
        announce(self.rendezvous_path, self.rank, "127.0.0.1", port)

        def accept_loop():
            while not self._stop.is_set():
                try:
                    sock.settimeout(0.2)
                    conn, _ = sock.accept()
                except TimeoutError:
                    continue
                except OSError:
                    return
                t = threading.Thread(
                    target=self._serve_conn,
                    args=(SocketEndpoint(conn), handler),
                    daemon=True,
                )
                t.start()
                self._threads.append(t)

        t = threading.Thread(
            target=accept_loop, name=f"ddstore-accept-{self.rank}", daemon=True
        )
        t.start()
        self._threads.append(t)

    def _serve_conn(self, ep: Endpoint, handler) -> None:
        try:
            while not self._stop.is_set():
                request_id, group_id, index = read_request(ep)
                ep.send(handler(pack_request(request_id, group_id, index)))
        except TransportError:
            ep.close()

    def _endpoint(self, owner: int, timeout: float) -> Endpoint:
        with self._conn_lock:
            if owner not in self._conns:
                table = wait_for_ranks(self.rendezvous_path, [owner], timeout)
                host, port = table[owner]
                self._conns[owner] = connect(host, port, timeout)
            return self._conns[owner]

    def request_many(
        self, owner: int, frames: list[bytes], timeout: float
    ) -> list[bytes]:
        ep = self._endpoint(owner, timeout)
        deadline = time.monotonic() + timeout
        for frame in frames:  # pipeline: write all, then drain in order
            ep.send(frame)
        out = []
        for _ in frames:
            request_id, status, payload = read_response(ep, deadline)
            out.append(pack_response(request_id, status, payload))
        return out

    def shutdown(self) -> None:
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        with self._conn_lock:
            for ep in self._conns.values():
                ep.close()
            self._conns.clear()


# --------------------------------------------------------------------------
# The store
# --------------------------------------------------------------------------


class DDStore:
    """One rank's view of the distributed sample store.

    ``fabric`` is a ChannelFabric (thread ranks) or SocketFabric (process
    ranks); None means single-rank, purely local. Records are held as their
    encoded payload bytes, so remote responses are byte-identical to the
    owner's copy by construction.
    """

    def __init__(
        self,
        rank: int,
        n_ranks: int,
        replication_factor: int = 1,
        fabric: ChannelFabric | SocketFabric | None = None,
        fetch_timeout: float = 5.0,
        chunk_sizes: list[int] | None = None,
    ):
        if n_ranks > 1 and fabric is None:
            raise ConfigError("multi-rank stores need a fabric")
        self.rank = rank
        self.n_ranks = n_ranks
        self.replication_factor = replication_factor
        self.fabric = fabric
        self.fetch_timeout = fetch_timeout
        self._chunk_sizes = chunk_sizes
        self.ownership: dict[str, OwnershipMap] = {}
        self._shards: dict[str, dict[int, bytes]] = {}
        self._request_ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self._serving = False
        self.local_fetches = 0
        self.remote_fetches = 0

    # -- lifecycle ---------------------------------------------------------

    def load(self, container_path: str, group: str) -> None:
        """Read this rank's owned chunk of ``group`` into memory."""
        if group not in GROUP_IDS:
            raise ValidationError(f"unknown group {group!r}")
        manifest = container_io.read_manifest(container_path)
        n = manifest.group(group).record_count
        ownership = build_ownership(
            n, self.n_ranks, self.replication_factor, self._chunk_sizes
        )
        lo, hi = ownership.range_of(self.rank)
        payloads = container_io.read_payloads(manifest, group, (lo, hi), container_path)
        self.ownership[group] = ownership
        self._shards[group] = {lo + i: p for i, p in enumerate(payloads)}
        log.debug(
            "rank %d loaded %s[%d:%d] (%d records)", self.rank, group, lo, hi, hi - lo
        )
        if self.fabric is not None and not self._serving:
            self.start_service()

    def start_service(self) -> None:
        if self._serving or self.fabric is None:
            return
        if isinstance(self.fabric, ChannelFabric):
            self.fabric.serve(self.rank, self._handle_request)
        else:
            self.fabric.serve(self._handle_request)
        self._serving = True

    def close(self) -> None:
        if self.fabric is None or not self._serving:
            return
        if isinstance(self.fabric, ChannelFabric):
            self.fabric.shutdown(self.rank)
        else:
            self.fabric.shutdown()
        self._serving = False

    def resident_count(self, group: str) -> int:
        return len(self._shards.get(group, {}))

    def resident_indices(self, group: str) -> set[int]:
        return set(self._shards.get(group, {}))

    # -- service side --------------------------------------------------------

    def _handle_request(self, frame: bytes) -> bytes:
        try:
            request_id, group_id, index = unpack_request(frame)
        except TransportError:
            return pack_response(0, STATUS_INTERNAL)
        group = GROUP_BY_ID.get(group_id)
        if group is None or group not in self._shards:
            return pack_response(request_id, STATUS_INTERNAL)
        payload = self._shards[group].get(int(index))
        if payload is None:
            return pack_response(request_id, STATUS_OUT_OF_RANGE)
        return pack_response(request_id, STATUS_OK, payload)

    # -- fetch side ------------------------------------------------------------

    def _next_id(self) -> int:
        with self._id_lock:
            return next(self._request_ids)

    def _local_payload(self, group: str, index: int) -> bytes:
        self.local_fetches += 1
        return self._shards[group][index]

    def _check(self, group: str, index: int) -> OwnershipMap:
        if group not in self.ownership:
            raise ValidationError(f"group {group!r} not loaded on rank {self.rank}")
        ownership = self.ownership[group]
        if not (0 <= index < ownership.n_samples):
            raise ValidationError(
                f"index {index} out of range [0, {ownership.n_samples})"
            )
        return ownership

    def fetch_payload(self, group: str, index: int) -> bytes:
        ownership = self._check(group, index)
        owner = ownership.owner_of(index, self.rank)
        if owner == self.rank:
            return self._local_payload(group, index)
        (payload,) = self._fetch_remote(group, owner, [index])
        return payload

    def fetch(self, group: str, index: int) -> GraphRecord:
        return decode_record(self.fetch_payload(group, index))

    def fetch_batch(self, group: str, indices) -> list[GraphRecord]:
        """Fetch many records; remote requests are grouped per owner and
        pipelined (still one request/response per record)."""
        indices = [int(i) for i in indices]
        ownership = self.ownership.get(group)
        if ownership is None:
            raise ValidationError(f"group {group!r} not loaded on rank {self.rank}")
        by_owner: dict[int, list[int]] = {}
        for pos, idx in enumerate(indices):
            self._check(group, idx)
            owner = ownership.owner_of(idx, self.rank)
            by_owner.setdefault(owner, []).append(pos)
        payloads: list[bytes | None] = [None] * len(indices)
        for owner, positions in sorted(by_owner.items()):
            if owner == self.rank:
                for pos in positions:
                    payloads[pos] = self._local_payload(group, indices[pos])
            else:
                got = self._fetch_remote(
                    group, owner, [indices[pos] for pos in positions]
                )
                for pos, payload in zip(positions, got):
                    payloads[pos] = payload
        return [decode_record(p) for p in payloads]  # type: ignore[arg-type]

    def _fetch_remote(self, group: str, owner: int, indices: list[int]) -> list[bytes]:
        group_id = GROUP_IDS[group]
        frames = []
        want_ids = []
        for idx in indices:
            request_id = self._next_id()
            want_ids.append(request_id)
            frames.append(pack_request(request_id, group_id, idx))
        responses = self.fabric.request_many(owner, frames, self.fetch_timeout)
        out = []
        for idx, want, resp in zip(indices, want_ids, responses):
            request_id, status, length = _RESP_HEAD.unpack_from(resp, 4)
            if request_id != want:
                raise TransportError(
                    f"response id {request_id} does not match request {want}"
                )
            if status == STATUS_OUT_OF_RANGE:
                raise ValidationError(
                    f"owner rank {owner} reports index {idx} out of range"
                )
            if status != STATUS_OK:
                raise TransportError(f"owner rank {owner} internal error on {idx}")
            out.append(resp[4 + _RESP_HEAD.size :])
            self.remote_fetches += 1
        return out


# --------------------------------------------------------------------------
# Epoch scheduling
# --------------------------------------------------------------------------


class EpochSchedule:
    """Per-rank batch lists derived from one global permutation."""

    def __init__(self, epoch, base_seed, batch_size, n_ranks, per_rank):
        self.epoch = epoch
        self.base_seed = base_seed
        self.batch_size = batch_size
        self.n_ranks = n_ranks
        self.per_rank = per_rank  # list over ranks of list of index arrays

    def for_rank(self, rank: int) -> list[np.ndarray]:
        return self.per_rank[rank]

    def max_batches(self) -> int:
        return max((len(b) for b in self.per_rank), default=0)


def epoch_permutation(n_samples: int, base_seed: int, epoch: int) -> np.ndarray:
    """The global shuffle every rank derives identically."""
    return np.random.default_rng([int(base_seed), int(epoch)]).permutation(n_samples)


def epoch_schedule(
    n_samples: int,
    n_ranks: int,
    batch_size: int,
    base_seed: int,
    epoch: int,
) -> EpochSchedule:
    """Deal one global permutation round-robin to ranks, then chunk.

    Permutation index k goes to rank k mod P; each rank's stream is cut into
    batches of ``batch_size`` with the final short batch kept, so the union
    over ranks covers every index exactly once.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    perm = epoch_permutation(n_samples, base_seed, epoch)
    per_rank = []
    for rank in range(n_ranks):
        stream = perm[rank::n_ranks]
        batches = [
            stream[i : i + batch_size] for i in range(0, stream.shape[0], batch_size)
        ]
        per_rank.append(batches)
    return EpochSchedule(epoch, base_seed, batch_size, n_ranks, per_rank)
