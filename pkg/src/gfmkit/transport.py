"""Byte-stream endpoints over TCP sockets or in-process channels.

Every distributed piece of the toolkit (store fetches, gradient collectives,
HPO manager/worker control) speaks little-endian frames over a byte stream.
Two interchangeable stream implementations exist:

* :class:`SocketEndpoint` — a connected TCP socket (rank = OS process);
* :class:`ChannelEndpoint` — a pair of in-process byte pipes (rank = thread),
  used by tests and thread-mode runs.

Generic frames are ``magic(4) | u64 body length | body``; protocol-specific
frames (the store's fetch request/response) define their own layout on top of
``recv_exact``. Rank addresses for socket mode come from a rendezvous file of
``rank host:port`` lines, appended atomically by each rank.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import time

from .errors import TransportError

BLOB_HEADER = struct.Struct("<Q")

COLLECTIVE_MAGIC = b"GFCL"
HPO_MAGIC = b"GFHP"


class Endpoint:
    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def recv_exact(self, n: int, deadline: float | None = None) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket):
        self._sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def recv_exact(self, n: int, deadline: float | None = None) -> bytes:
        chunks = []
        remaining = n
        while remaining > 0:
            if deadline is not None:
                budget = deadline - time.monotonic()
                if budget <= 0:
                    raise TransportError(f"timed out waiting for {remaining} bytes")
                self._sock.settimeout(budget)
            else:
                self._sock.settimeout(None)
            try:
                chunk = self._sock.recv(min(remaining, 1 << 20))
            except socket.timeout as exc:
                raise TransportError(f"timed out waiting for {remaining} bytes") from exc
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class BytePipe:
    """One direction of an in-process byte stream."""

    def __init__(self):
        self._chunks: queue.Queue[bytes] = queue.Queue()
        self._buffer = b""
        self._closed = False

    def write(self, data: bytes) -> None:
        self._chunks.put(bytes(data))

    def close(self) -> None:
        self._chunks.put(b"")  # sentinel

    def read_exact(self, n: int, deadline: float | None = None) -> bytes:
        while len(self._buffer) < n:
            timeout = None
            if deadline is not None:
                timeout = deadline - time.monotonic()
                if timeout <= 0:
                    raise TransportError(f"timed out waiting for {n} bytes")
            try:
                chunk = self._chunks.get(timeout=timeout)
            except queue.Empty:
                raise TransportError(f"timed out waiting for {n} bytes")
            if chunk == b"":
                raise TransportError("peer closed the channel")
            self._buffer += chunk
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out


class ChannelEndpoint(Endpoint):
    def __init__(self, rx: BytePipe, tx: BytePipe):
        self._rx = rx
        self._tx = tx

    @staticmethod
    def pair() -> tuple["ChannelEndpoint", "ChannelEndpoint"]:
        a_to_b, b_to_a = BytePipe(), BytePipe()
        return ChannelEndpoint(b_to_a, a_to_b), ChannelEndpoint(a_to_b, b_to_a)

    def send(self, data: bytes) -> None:
        self._tx.write(data)

    def recv_exact(self, n: int, deadline: float | None = None) -> bytes:
        return self._rx.read_exact(n, deadline)

    def close(self) -> None:
        self._tx.close()


# --------------------------------------------------------------------------
# Generic length-prefixed frames
# --------------------------------------------------------------------------


def send_blob(ep: Endpoint, magic: bytes, body: bytes) -> None:
    assert len(magic) == 4
    ep.send(magic + BLOB_HEADER.pack(len(body)) + body)


def recv_blob(
    ep: Endpoint, expect_magic: bytes | None = None, deadline: float | None = None
) -> tuple[bytes, bytes]:
    magic = ep.recv_exact(4, deadline)
    if expect_magic is not None and magic != expect_magic:
        raise TransportError(f"unexpected frame magic {magic!r} (wanted {expect_magic!r})")
    (length,) = BLOB_HEADER.unpack(ep.recv_exact(8, deadline))
    body = ep.recv_exact(length, deadline) if length else b""
    return magic, body


# --------------------------------------------------------------------------
# Socket plumbing and the rendezvous file
# --------------------------------------------------------------------------


def listen(host: str = "127.0.0.1") -> tuple[socket.socket, int]:
    """Bind a listener on an ephemeral port; returns (socket, port)."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, 0))
    sock.listen(64)
    return sock, sock.getsockname()[1]


def connect(host: str, port: int, timeout: float = 30.0) -> SocketEndpoint:
    deadline = time.monotonic() + timeout
    last: Exception | None = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
            sock.settimeout(None)
            return SocketEndpoint(sock)
        except OSError as exc:
            last = exc
            time.sleep(0.02)
    raise TransportError(f"could not connect to {host}:{port}: {last}")


def announce(path: str, rank: int, host: str, port: int) -> None:
    """Append this rank's ``rank host:port`` line (atomic small write)."""
    with open(path, "a") as fh:
        fh.write(f"{rank} {host}:{port}\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_rendezvous(path: str) -> dict[int, tuple[str, int]]:
    """Parse whatever lines exist right now; missing file -> empty map."""
    if not os.path.exists(path):
        return {}
    table: dict[int, tuple[str, int]] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rank_s, addr = line.split()
                host, port_s = addr.rsplit(":", 1)
                table[int(rank_s)] = (host, int(port_s))
            except ValueError:
                raise TransportError(f"malformed rendezvous line {line!r} in {path}")
    return table


def wait_for_ranks(
    path: str, ranks, timeout: float = 30.0
) -> dict[int, tuple[str, int]]:
    """Poll the rendezvous file until every requested rank has announced."""
    wanted = set(int(r) for r in ranks)
    deadline = time.monotonic() + timeout
    while True:
        table = read_rendezvous(path)
        if wanted <= set(table):
            return {r: table[r] for r in wanted}
        if time.monotonic() > deadline:
            missing = sorted(wanted - set(table))
            raise TransportError(
                f"rendezvous timed out; ranks {missing} never announced in {path}"
            )
        time.sleep(0.01)
