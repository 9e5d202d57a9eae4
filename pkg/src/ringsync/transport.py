"""Point-to-point framed message passing between workers.

Two backends share one wire format: an in-process channel (a queue of
encoded frames per directed link) and TCP sockets. Sends are buffered and
never block on a slow receiver; receives block until a frame arrives.

Wire frame, all integers little-endian::

    magic "RPAR" | version u8 | msg_type u8 | round u16 | block_index u32 |
    payload_len u32 | payload (float64 LE for GradBlock)

Simulated link delay is charged on the receiving side: a frame becomes
visible ``per_message_delay + per_byte_delay * frame_bytes`` after the link
is free, and links that share a clock (the server side of a star) serialize
their traffic.
"""

from __future__ import annotations

import enum
import logging
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .core import ClusterConfig

logger = logging.getLogger(__name__)

MAGIC = b"RPAR"
VERSION = 1
HEADER = struct.Struct("<4sBBHII")
HEADER_SIZE = HEADER.size  # 16
ELEMENT_SIZE = 8
SERVER = -1
PORT_BASE_ENV = "RINGSYNC_PORT_BASE"

_WIRE_DTYPE = np.dtype("<f8")


class TransportError(RuntimeError):
    pass


class TransportSetupError(TransportError):
    def __init__(self, rank: int, message: str):
        super().__init__(f"rank {rank}: {message}")
        self.rank = rank


class LinkClosedError(TransportError):
    pass


class ProtocolError(TransportError):
    pass


class MsgType(enum.IntEnum):
    GRAD_BLOCK = 0
    HELLO = 1
    DONE = 2


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    round: int = 0
    block_index: int = 0
    payload: bytes = b""

    @classmethod
    def grad_block(cls, round_: int, block_index: int, values) -> Frame:
        data = np.ascontiguousarray(values, dtype=_WIRE_DTYPE).tobytes()
        return cls(MsgType.GRAD_BLOCK, round_, block_index, data)

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def element_count(self) -> int:
        return len(self.payload) // ELEMENT_SIZE

    def values(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=_WIRE_DTYPE).astype(np.float64)

    def encode(self) -> bytes:
        if not 0 <= self.round <= 0xFFFF:
            raise ValueError(f"round {self.round} does not fit in u16")
        if not 0 <= self.block_index <= 0xFFFFFFFF:
            raise ValueError(f"block_index {self.block_index} does not fit in u32")
        if self.msg_type == MsgType.GRAD_BLOCK and len(self.payload) % ELEMENT_SIZE:
            raise ValueError("GradBlock payload length must be a multiple of 8")
        header = HEADER.pack(
            MAGIC, VERSION, int(self.msg_type), self.round, self.block_index, len(self.payload)
        )
        return header + self.payload


def decode_header(data: bytes) -> tuple[MsgType, int, int, int]:
    if len(data) != HEADER_SIZE:
        raise ProtocolError(f"short header: {len(data)} bytes")
    magic, version, msg_type, round_, block_index, payload_len = HEADER.unpack(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {msg_type}") from None
    if kind == MsgType.GRAD_BLOCK and payload_len % ELEMENT_SIZE:
        raise ProtocolError(f"GradBlock payload_len {payload_len} not a multiple of 8")
    return kind, round_, block_index, payload_len


def decode(data: bytes) -> Frame:
    kind, round_, block_index, payload_len = decode_header(data[:HEADER_SIZE])
    payload = data[HEADER_SIZE:]
    if len(payload) != payload_len:
        raise ProtocolError(f"payload_len {payload_len} but {len(payload)} bytes follow")
    return Frame(kind, round_, block_index, bytes(payload))


@dataclass(frozen=True)
class LinkProfile:
    per_message_delay: float = 0.0
    per_byte_delay: float = 0.0

    def __post_init__(self) -> None:
        if self.per_message_delay < 0 or self.per_byte_delay < 0:
            raise ValueError("link delays must be non-negative")

    @property
    def is_zero(self) -> bool:
        return self.per_message_delay == 0 and self.per_byte_delay == 0

    def delay(self, frame_bytes: int) -> float:
        return self.per_message_delay + self.per_byte_delay * frame_bytes

    def cost(self, frames: int, frame_bytes: int) -> float:
        """Total simulated time for ``frames`` messages carrying ``frame_bytes``."""
        return self.per_message_delay * frames + self.per_byte_delay * frame_bytes


NO_DELAY = LinkProfile()


@dataclass
class TransferRecord:
    """Traffic counters for one endpoint. Only GradBlock frames are counted."""

    elements_sent: int = 0
    elements_received: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    header_bytes_sent: int = 0
    frames_sent: int = 0
    frames_received: int = 0
    simulated_delay: float = 0.0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class CommLedger:
    workers: dict[int, TransferRecord] = field(default_factory=dict)
    server: TransferRecord | None = None

    @classmethod
    def from_endpoints(cls, endpoints) -> CommLedger:
        ledger = cls()
        for ep in endpoints:
            if ep.rank == SERVER:
                ledger.server = ep.record
            else:
                ledger.workers[ep.rank] = ep.record
        return ledger

    def records(self) -> list[TransferRecord]:
        out = [self.workers[r] for r in sorted(self.workers)]
        if self.server is not None:
            out.append(self.server)
        return out

    def total(self, counter: str):
        return sum(getattr(r, counter) for r in self.records())

    def snapshot(self) -> dict:
        snap = {"workers": {r: rec.as_dict() for r, rec in sorted(self.workers.items())}}
        snap["server"] = self.server.as_dict() if self.server is not None else None
        return snap


class LinkClock:
    """Tracks when a (possibly shared) simulated link next becomes free."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._busy_until = 0.0

    def reserve(self, arrival: float, delay: float) -> float:
        with self._lock:
            start = max(arrival, self._busy_until)
            self._busy_until = start + delay
            return self._busy_until


# --- link backends -------------------------------------------------------


class _QueueOutbox:
    def __init__(self, q: queue.Queue):
        self._q = q

    def put(self, data: bytes) -> None:
        self._q.put((time.monotonic(), data))

    def close(self) -> None:
        self._q.put((time.monotonic(), Frame(MsgType.DONE).encode()))


class _QueueInbox:
    def __init__(self, q: queue.Queue):
        self._q = q

    def get(self, timeout: float | None) -> tuple[float, Frame]:
        try:
            arrival, data = self._q.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"receive timed out after {timeout}s") from None
        return arrival, decode(data)

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise LinkClosedError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> Frame:
    kind, round_, block_index, payload_len = decode_header(_recv_exact(sock, HEADER_SIZE))
    payload = _recv_exact(sock, payload_len) if payload_len else b""
    return Frame(kind, round_, block_index, payload)


class _SocketOutbox:
    """Buffered writer: a background thread drains a queue into the socket."""

    def __init__(self, sock: socket.socket, name: str):
        self._sock = sock
        self._q: queue.Queue = queue.Queue()
        self._error: BaseException | None = None
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while True:
            data = self._q.get()
            if data is None:
                return
            try:
                self._sock.sendall(data)
            except OSError as exc:
                self._error = exc
                return

    def put(self, data: bytes) -> None:
        if self._error is not None:
            raise LinkClosedError(f"send failed: {self._error}")
        self._q.put(data)

    def close(self) -> None:
        self._q.put(Frame(MsgType.DONE).encode())
        self._q.put(None)
        self._thread.join()
        try:
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass


class _SocketInbox:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    def get(self, timeout: float | None) -> tuple[float, Frame]:
        self._sock.settimeout(timeout)
        try:
            frame = _read_frame(self._sock)
        except socket.timeout:
            raise TransportError(f"receive timed out after {timeout}s") from None
        except OSError as exc:
            raise LinkClosedError(str(exc)) from exc
        return time.monotonic(), frame

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


# --- endpoints ------------------------------------------------------------


class Endpoint:
    """One worker's (or the server's) view of its links.

    An endpoint is owned by a single thread; its ``record`` is only ever
    written by that thread.
    """

    def __init__(self, rank: int, profile: LinkProfile = NO_DELAY, timeout: float | None = None):
        self.rank = rank
        self.profile = profile
        self.timeout = timeout
        self.record = TransferRecord()
        self.left: int | None = None
        self.right: int | None = None
        self._out: dict[int, object] = {}
        self._in: dict[int, object] = {}
        self._clocks: dict[int, LinkClock] = {}
        self._closed = False

    def __repr__(self) -> str:
        return f"Endpoint(rank={self.rank}, peers={sorted(self._out)})"

    @property
    def peers(self) -> list[int]:
        return sorted(self._out)

    def _attach(self, peer: int, outbox, inbox, clock: LinkClock | None = None) -> None:
        if outbox is not None:
            self._out[peer] = outbox
        if inbox is not None:
            self._in[peer] = inbox
            self._clocks[peer] = clock or LinkClock()

    def send_frame(self, peer: int, frame: Frame) -> None:
        if self._closed:
            raise LinkClosedError(f"rank {self.rank}: endpoint is closed")
        try:
            outbox = self._out[peer]
        except KeyError:
            raise TransportError(f"rank {self.rank} has no link to {peer}") from None
        outbox.put(frame.encode())
        rec = self.record
        rec.header_bytes_sent += HEADER_SIZE
        if frame.msg_type == MsgType.GRAD_BLOCK:
            rec.frames_sent += 1
            rec.elements_sent += frame.element_count
            rec.bytes_sent += frame.payload_len

    def recv_frame(self, peer: int) -> Frame:
        try:
            inbox = self._in[peer]
        except KeyError:
            raise TransportError(f"rank {self.rank} has no link from {peer}") from None
        arrival, frame = inbox.get(self.timeout)
        if frame.msg_type == MsgType.DONE:
            raise LinkClosedError(f"rank {self.rank}: link from {peer} closed")
        if not self.profile.is_zero:
            delay = self.profile.delay(HEADER_SIZE + frame.payload_len)
            ready = self._clocks[peer].reserve(arrival, delay)
            wait = ready - time.monotonic()
            if wait > 0:
                time.sleep(wait)
        rec = self.record
        if frame.msg_type == MsgType.GRAD_BLOCK:
            rec.frames_received += 1
            rec.elements_received += frame.element_count
            rec.bytes_received += frame.payload_len
            rec.simulated_delay += self.profile.delay(HEADER_SIZE + frame.payload_len)
        return frame

    def send_right(self, frame: Frame) -> None:
        self.send_frame(self.right, frame)

    def recv_left(self) -> Frame:
        return self.recv_frame(self.left)

    def close(self) -> None:
        """Tell every peer this side is done. Idempotent."""
        if self._closed:
            return
        self._closed = True
        for outbox in self._out.values():
            try:
                outbox.close()
            except Exception:  # closing must not mask the original error
                logger.debug("rank %s: error closing outbox", self.rank, exc_info=True)
        for inbox in self._in.values():
            inbox.close()

    def __enter__(self) -> Endpoint:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --- topology construction ---------------------------------------------------


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def load_topology(path) -> list[tuple[str, int]]:
    """Read a JSON list of ``"host:port"`` strings, one per rank."""
    import json

    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list) or not all(isinstance(e, str) for e in entries):
        raise ValueError(f"{path}: topology must be a JSON list of 'host:port' strings")
    return [parse_address(e) for e in entries]


def default_addresses(count: int, host: str = "127.0.0.1") -> list[tuple[str, int]]:
    """Ephemeral ports unless the port-base environment variable is set."""
    base = os.environ.get(PORT_BASE_ENV)
    if base:
        return [(host, int(base) + i) for i in range(count)]
    return [(host, 0)] * count


def _listen(rank: int, addr: tuple[str, int], backlog: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind(addr)
        sock.listen(backlog)
    except OSError as exc:
        sock.close()
        raise TransportSetupError(rank, f"cannot listen on {addr[0]}:{addr[1]}: {exc}") from exc
    return sock


def _connect(rank: int, addr: tuple[str, int], timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection(addr, timeout=timeout)
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise TransportSetupError(rank, f"cannot connect to {addr[0]}:{addr[1]}: {exc}") from exc
            time.sleep(0.05)
            continue
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        return sock


def _accept_hello(rank: int, listener: socket.socket, timeout: float) -> tuple[socket.socket, int]:
    listener.settimeout(timeout)
    try:
        sock, _ = listener.accept()
    except OSError as exc:
        raise TransportSetupError(rank, f"accept failed: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(timeout)
    try:
        hello = _read_frame(sock)
    except (OSError, TransportError) as exc:
        sock.close()
        raise TransportSetupError(rank, f"handshake failed: {exc}") from exc
    if hello.msg_type != MsgType.HELLO:
        sock.close()
        raise TransportSetupError(rank, f"expected Hello, got {hello.msg_type.name}")
    sock.settimeout(None)
    peer = hello.block_index
    return sock, (SERVER if peer == 0xFFFFFFFF else peer)


def _hello(rank: int) -> bytes:
    return Frame(MsgType.HELLO, block_index=0xFFFFFFFF if rank == SERVER else rank).encode()


def tcp_ring_endpoint(
    rank: int,
    addresses: list[tuple[str, int]],
    profile: LinkProfile = NO_DELAY,
    *,
    listener: socket.socket | None = None,
    connect_timeout: float = 10.0,
    timeout: float | None = None,
) -> Endpoint:
    """Build one rank's ring endpoint over TCP.

    Each rank listens on ``addresses[rank]``, accepts a connection from its
    left neighbour, and dials its right neighbour. Usable from separate
    processes; :func:`connect_ring` runs it for all ranks in threads.
    """
    n = len(addresses)
    left, right = (rank - 1) % n, (rank + 1) % n
    own_listener = listener is None
    if own_listener:
        listener = _listen(rank, addresses[rank], backlog=1)
    accepted: dict = {}

    def accept() -> None:
        try:
            accepted["sock"] = _accept_hello(rank, listener, connect_timeout)
        except TransportSetupError as exc:
            accepted["error"] = exc

    acceptor = threading.Thread(target=accept, daemon=True)
    acceptor.start()
    try:
        out_sock = _connect(rank, addresses[right], connect_timeout)
        out_sock.sendall(_hello(rank))
    finally:
        acceptor.join()
        if own_listener:
            listener.close()
    if "error" in accepted:
        out_sock.close()
        raise accepted["error"]
    in_sock, peer = accepted["sock"]
    if peer != left:
        raise TransportSetupError(rank, f"expected left neighbour {left}, got {peer}")
    ep = Endpoint(rank, profile, timeout)
    ep.left, ep.right = left, right
    ep._attach(right, _SocketOutbox(out_sock, f"ring-{rank}-tx"), None)
    ep._attach(left, None, _SocketInbox(in_sock))
    return ep


def _run_threads(fns) -> tuple[list, list]:
    results: list = [None] * len(fns)
    errors: list = []

    def call(i, fn):
        try:
            results[i] = fn()
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=call, args=(i, fn), daemon=True) for i, fn in enumerate(fns)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results, errors


def connect_ring(
    config: ClusterConfig,
    profile: LinkProfile = NO_DELAY,
    *,
    transport: str = "inproc",
    addresses: list[tuple[str, int]] | None = None,
    timeout: float | None = None,
) -> list[Endpoint]:
    """Return N ring endpoints: rank r sends to r+1 and receives from r-1."""
    n = config.worker_count
    if n < 2:
        raise ValueError("a ring needs at least 2 workers")
    if transport == "inproc":
        links = [queue.Queue() for _ in range(n)]  # links[r]: r -> r+1
        eps = []
        for r in range(n):
            ep = Endpoint(r, profile, timeout)
            ep.left, ep.right = (r - 1) % n, (r + 1) % n
            ep._attach(ep.right, _QueueOutbox(links[r]), None)
            ep._attach(ep.left, None, _QueueInbox(links[ep.left]))
            eps.append(ep)
        return eps
    if transport != "tcp":
        raise ValueError(f"unknown transport {transport!r}")
    addresses = list(addresses) if addresses is not None else default_addresses(n)
    if len(addresses) != n:
        raise ValueError(f"need {n} addresses, got {len(addresses)}")
    listeners = []
    try:
        for r, addr in enumerate(addresses):
            listeners.append(_listen(r, addr, backlog=1))
        bound = [ls.getsockname()[:2] for ls in listeners]
        eps, errors = _run_threads([
            (lambda r=r: tcp_ring_endpoint(r, bound, profile, listener=listeners[r], timeout=timeout))
            for r in range(n)
        ])
        if errors:
            for ep in eps:
                if ep is not None:
                    ep.close()
            raise errors[0]
        return eps
    finally:
        for ls in listeners:
            ls.close()


def connect_star(
    config: ClusterConfig,
    profile: LinkProfile = NO_DELAY,
    *,
    transport: str = "inproc",
    address: tuple[str, int] | None = None,
    timeout: float | None = None,
) -> tuple[Endpoint, list[Endpoint]]:
    """Return (server, workers) with one bidirectional link per worker.

    All uplinks share one clock at the server and so do all downlinks,
    modelling the server's single network interface.
    """
    n = config.worker_count
    server = Endpoint(SERVER, profile, timeout)
    workers = [Endpoint(r, profile, timeout) for r in range(n)]
    downlink_clock = LinkClock()
    uplink_clock = LinkClock()
    if transport == "inproc":
        for ep in workers:
            up, down = queue.Queue(), queue.Queue()
            ep._attach(SERVER, _QueueOutbox(up), _QueueInbox(down), downlink_clock)
            server._attach(ep.rank, _QueueOutbox(down), _QueueInbox(up), uplink_clock)
        return server, workers
    if transport != "tcp":
        raise ValueError(f"unknown transport {transport!r}")
    addr = address or default_addresses(1)[0]
    listener = _listen(SERVER, addr, backlog=n)
    bound = listener.getsockname()[:2]

    def accept_all():
        socks = {}
        for _ in range(n):
            sock, peer = _accept_hello(SERVER, listener, 10.0)
            if peer in socks or not 0 <= peer < n:
                raise TransportSetupError(SERVER, f"unexpected worker rank {peer}")
            socks[peer] = sock
        return socks

    def dial(r):
        sock = _connect(r, bound, 10.0)
        sock.sendall(_hello(r))
        return sock

    try:
        results, errors = _run_threads([accept_all, *[lambda r=r: dial(r) for r in range(n)]])
    finally:
        listener.close()
    if errors:
        for res in results:
            for sock in (res.values() if isinstance(res, dict) else [res]):
                if sock is not None:
                    sock.close()
        raise errors[0]
    server_socks, worker_socks = results[0], results[1:]
    for r, (ep, sock) in enumerate(zip(workers, worker_socks)):
        ep._attach(SERVER, _SocketOutbox(sock, f"worker-{r}-tx"), _SocketInbox(sock), downlink_clock)
        ssock = server_socks[r]
        server._attach(r, _SocketOutbox(ssock, f"server-{r}-tx"), _SocketInbox(ssock), uplink_clock)
    return server, workers
