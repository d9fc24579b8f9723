"""Deterministic collectives over a star topology.

Rank 0 is the hub: every collective gathers contributions to rank 0, which
combines them **in ascending rank order** and sends the identical result back
to all ranks. The fixed reduction order makes gradient averaging bitwise
reproducible — a P-rank allreduce equals the single-process oracle
``(g_0 + g_1 + ... + g_{P-1}) / P`` evaluated left to right, and every rank
receives the exact same bytes.

The same hub logic runs over in-process channels (thread ranks) or TCP
sockets (process ranks, bootstrapped from the rendezvous file).
"""

from __future__ import annotations

import pickle
import struct
import time

import numpy as np

from .errors import TransportError, ValidationError
from .transport import (
    COLLECTIVE_MAGIC,
    ChannelEndpoint,
    Endpoint,
    SocketEndpoint,
    announce,
    connect,
    listen,
    recv_blob,
    send_blob,
    wait_for_ranks,
)

_OP_ALLREDUCE_MEAN = 1
_OP_ALLREDUCE_SUM = 2
_OP_BARRIER = 3
_OP_GATHER = 4
_OP_BCAST = 5
_OP_HELLO = 6

_HEAD = struct.Struct("<BI")  # op, rank


def _pack(op: int, rank: int, body: bytes = b"") -> bytes:
    return _HEAD.pack(op, rank) + body


def _unpack(blob: bytes) -> tuple[int, int, bytes]:
    op, rank = _HEAD.unpack_from(blob, 0)
    return op, rank, blob[_HEAD.size :]


class Comm:
    """Collective interface shared by all transports."""

    rank: int
    size: int

    def allreduce_mean(self, vec: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def allreduce_sum(self, vec: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def barrier(self) -> None:
        raise NotImplementedError

    def gather_obj(self, obj, root: int = 0):
        raise NotImplementedError

    def broadcast_obj(self, obj, root: int = 0):
        raise NotImplementedError

    def close(self) -> None:
        pass


class LocalComm(Comm):
    """The one-rank degenerate case."""

    def __init__(self):
        self.rank = 0
        self.size = 1

    def allreduce_mean(self, vec):
        return np.array(vec, dtype=np.float64, copy=True)

    def allreduce_sum(self, vec):
        return np.array(vec, dtype=np.float64, copy=True)

    def barrier(self):
        return None

    def gather_obj(self, obj, root: int = 0):
        return [obj]

    def broadcast_obj(self, obj, root: int = 0):
        return obj


class StarComm(Comm):
    """Hub-and-spoke collectives; rank 0 owns the reduction order.

    ``endpoints`` is rank0's map {rank -> Endpoint} on the hub, or the single
    endpoint to rank 0 on spokes.
    """

    def __init__(self, rank: int, size: int, endpoints, timeout: float = 60.0):
        self.rank = rank
        self.size = size
        self.timeout = timeout
        if rank == 0:
            self._peers: dict[int, Endpoint] = endpoints
        else:
            self._hub: Endpoint = endpoints

    def _deadline(self):
        return time.monotonic() + self.timeout if self.timeout else None

    # -- vector collectives ------------------------------------------------

    def _allreduce(self, vec: np.ndarray, op: int) -> np.ndarray:
        vec = np.ascontiguousarray(vec, dtype=np.float64)
        if self.rank == 0:
            deadline = self._deadline()
            contributions = {0: vec}
            for r in range(1, self.size):
                _, blob = recv_blob(self._peers[r], COLLECTIVE_MAGIC, deadline)
                got_op, got_rank, body = _unpack(blob)
                if got_op != op:
                    raise TransportError(
                        f"rank {got_rank} sent op {got_op}, hub expected {op}"
                    )
                peer_vec = np.frombuffer(body, dtype="<f8")
                if peer_vec.shape != vec.shape:
                    raise ValidationError(
                        f"allreduce count mismatch: rank {got_rank} sent "
                        f"{peer_vec.shape[0]}, rank 0 has {vec.shape[0]}"
                    )
                contributions[got_rank] = peer_vec
            total = contributions[0].astype(np.float64, copy=True)
            for r in range(1, self.size):  # ascending rank order, always
                total += contributions[r]
            if op == _OP_ALLREDUCE_MEAN:
                total /= self.size
            payload = total.astype("<f8", copy=False).tobytes()
            for r in range(1, self.size):
                send_blob(self._peers[r], COLLECTIVE_MAGIC, _pack(op, 0, payload))
            return np.frombuffer(payload, dtype="<f8").copy()
        send_blob(
            self._hub,
            COLLECTIVE_MAGIC,
            _pack(op, self.rank, vec.astype("<f8", copy=False).tobytes()),
        )
        _, blob = recv_blob(self._hub, COLLECTIVE_MAGIC, self._deadline())
        got_op, _, body = _unpack(blob)
        if got_op != op:
            raise TransportError(f"hub replied op {got_op}, expected {op}")
        return np.frombuffer(body, dtype="<f8").copy()

    def allreduce_mean(self, vec):
        return self._allreduce(vec, _OP_ALLREDUCE_MEAN)

    def allreduce_sum(self, vec):
        return self._allreduce(vec, _OP_ALLREDUCE_SUM)

    # -- control collectives -------------------------------------------------

    def barrier(self):
        if self.rank == 0:
            deadline = self._deadline()
            for r in range(1, self.size):
                recv_blob(self._peers[r], COLLECTIVE_MAGIC, deadline)
            for r in range(1, self.size):
                send_blob(self._peers[r], COLLECTIVE_MAGIC, _pack(_OP_BARRIER, 0))
        else:
            send_blob(self._hub, COLLECTIVE_MAGIC, _pack(_OP_BARRIER, self.rank))
            recv_blob(self._hub, COLLECTIVE_MAGIC, self._deadline())

    def gather_obj(self, obj, root: int = 0):
        if root != 0:
            raise ValidationError("star topology gathers to rank 0 only")
        if self.rank == 0:
            deadline = self._deadline()
            out = [None] * self.size
            out[0] = obj
            for r in range(1, self.size):
                _, blob = recv_blob(self._peers[r], COLLECTIVE_MAGIC, deadline)
                _, got_rank, body = _unpack(blob)
                out[got_rank] = pickle.loads(body)
            return out
        send_blob(
            self._hub, COLLECTIVE_MAGIC, _pack(_OP_GATHER, self.rank, pickle.dumps(obj))
        )
        return None

    def broadcast_obj(self, obj, root: int = 0):
        if root != 0:
            raise ValidationError("star topology broadcasts from rank 0 only")
        if self.rank == 0:
            payload = pickle.dumps(obj)
            for r in range(1, self.size):
                send_blob(self._peers[r], COLLECTIVE_MAGIC, _pack(_OP_BCAST, 0, payload))
            return obj
        _, blob = recv_blob(self._hub, COLLECTIVE_MAGIC, self._deadline())
        _, _, body = _unpack(blob)
        return pickle.loads(body)

    def close(self):
        if self.rank == 0:
            for ep in self._peers.values():
                ep.close()
        else:
            self._hub.close()


def create_thread_comms(size: int, timeout: float = 60.0) -> list[Comm]:
    """Channel-transport comms for ``size`` ranks living in one process."""
    if size == 1:
        return [LocalComm()]
    hub_side: dict[int, Endpoint] = {}
    comms: list[Comm] = [None] * size  # type: ignore[list-item]
    for r in range(1, size):
        hub_end, spoke_end = ChannelEndpoint.pair()
        hub_side[r] = hub_end
        comms[r] = StarComm(r, size, spoke_end, timeout)
    comms[0] = StarComm(0, size, hub_side, timeout)
    return comms


def socket_comm(
    rank: int, size: int, rendezvous_path: str, timeout: float = 60.0
) -> Comm:
    """Socket-transport comm bootstrapped via the rendezvous file.

    Rank 0 listens and announces ``0 host:port``; other ranks connect and
    identify themselves with a hello frame.
    """
    if size == 1:
        return LocalComm()
    if rank == 0:
        sock, port = listen()
        announce(rendezvous_path, 0, "127.0.0.1", port)
        peers: dict[int, Endpoint] = {}
        deadline = time.monotonic() + timeout
        while len(peers) < size - 1:
            sock.settimeout(max(0.1, deadline - time.monotonic()))
            try:
                conn, _ = sock.accept()
            except TimeoutError:
                raise TransportError(
                    f"comm hub: only {len(peers)}/{size - 1} ranks connected"
                )
            ep = SocketEndpoint(conn)
            _, blob = recv_blob(ep, COLLECTIVE_MAGIC, deadline)
            op, peer_rank, _ = _unpack(blob)
            if op != _OP_HELLO or not (0 < peer_rank < size):
                raise TransportError(f"bad hello from peer (op={op}, rank={peer_rank})")
            peers[peer_rank] = ep
        sock.close()
        return StarComm(0, size, peers, timeout)
    table = wait_for_ranks(rendezvous_path, [0], timeout)
    host, port = table[0]
    ep = connect(host, port, timeout)
    send_blob(ep, COLLECTIVE_MAGIC, _pack(_OP_HELLO, rank))
    return StarComm(rank, size, ep, timeout)


def allreduce_gradients(comm: Comm, grad: np.ndarray) -> np.ndarray:
    """Average gradients across ranks (sum in rank order, divide by P).

    The result is bitwise identical on every rank.
    """
    return comm.allreduce_mean(grad)
