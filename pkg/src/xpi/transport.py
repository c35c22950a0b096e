"""Length-prefixed framing over sockets, with exact byte accounting.

Wire format per frame: a 12-byte little-endian header ``<IQ`` holding
(msg_type: u32, payload_length: u64), then the payload. Ring tensors
travel as little-endian u64 words, so a payload of N elements is
exactly 8*N bytes. Every endpoint counts bytes and frames in both
directions and folds the exact wire bytes into per-direction SHA-256
digests, which lets tests pin communication costs and replay equality
without parsing transcripts.
"""

import hashlib
import selectors
import socket
import struct
import threading
import time
from dataclasses import dataclass

from xpi.errors import TransportClosedError, TransportError

MSG_HANDSHAKE = 1
MSG_OPEN = 2
MSG_IO = 3
MSG_CONTROL = 4
_KNOWN_TYPES = (MSG_HANDSHAKE, MSG_OPEN, MSG_IO, MSG_CONTROL)

HEADER = struct.Struct("<IQ")
MAX_PAYLOAD = 1 << 30
_CHUNK = 1 << 20


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes


@dataclass
class Counters:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: int = 0
    frames_received: int = 0

    def snapshot(self) -> "Counters":
        return Counters(
            self.bytes_sent, self.bytes_received, self.frames_sent, self.frames_received
        )

    def delta(self, earlier: "Counters") -> "Counters":
        return Counters(
            self.bytes_sent - earlier.bytes_sent,
            self.bytes_received - earlier.bytes_received,
            self.frames_sent - earlier.frames_sent,
            self.frames_received - earlier.frames_received,
        )


def _encode(frame: Frame) -> bytes:
    if frame.msg_type not in _KNOWN_TYPES:
        raise TransportError(f"cannot send unknown frame type {frame.msg_type}")
    if len(frame.payload) > MAX_PAYLOAD:
        raise TransportError(
            f"payload of {len(frame.payload)} bytes exceeds the {MAX_PAYLOAD} byte cap"
        )
    return HEADER.pack(frame.msg_type, len(frame.payload)) + frame.payload


class Endpoint:
    """One side of a framed channel.

    ``send_frame``/``recv_frame`` are the blocking half-duplex calls;
    ``exchange`` sends and receives one frame simultaneously without
    deadlocking when both sides stream large payloads at once.
    """

    def __init__(self, sock: socket.socket, inject_rtt_ms: float = 0.0):
        sock.setblocking(True)
        self._sock = sock
        self._delay = max(inject_rtt_ms, 0.0) / 2000.0
        self.counters = Counters()
        self._digest_sent = hashlib.sha256()
        self._digest_received = hashlib.sha256()
        self._closed = False

    def wire_digests(self) -> dict:
        return {
            "sent": self._digest_sent.hexdigest(),
            "received": self._digest_received.hexdigest(),
        }

    def _account_sent(self, wire: bytes) -> None:
        self.counters.bytes_sent += len(wire)
        self.counters.frames_sent += 1
        self._digest_sent.update(wire)

    def _account_received(self, wire: bytes) -> None:
        self.counters.bytes_received += len(wire)
        self.counters.frames_received += 1
        self._digest_received.update(wire)

    def send_frame(self, frame: Frame) -> None:
        wire = _encode(frame)
        try:
            self._sock.sendall(wire)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc
        self._account_sent(wire)

    def _recv_exact(self, n: int, at_boundary: bool) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(min(n - len(buf), _CHUNK))
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                if at_boundary and not buf:
                    raise TransportClosedError("peer closed the channel")
                raise TransportError(
                    f"stream truncated: expected {n} bytes, got {len(buf)}"
                )
            buf += chunk
        return bytes(buf)

    def recv_frame(self) -> Frame:
        header = self._recv_exact(HEADER.size, at_boundary=True)
        msg_type, length = HEADER.unpack(header)
        if msg_type not in _KNOWN_TYPES:
            raise TransportError(f"unknown frame type {msg_type} on the wire")
        if length > MAX_PAYLOAD:
            raise TransportError(
                f"declared payload of {length} bytes exceeds the {MAX_PAYLOAD} byte cap"
            )
        payload = self._recv_exact(length, at_boundary=False) if length else b""
        self._account_received(header + payload)
        if self._delay:
            time.sleep(self._delay)
        return Frame(msg_type, payload)

    def exchange(self, frame: Frame) -> Frame:
        """Send one frame and receive one frame, full duplex.

        Both parties calling exchange at the same step is the engine's
        single communication pattern for opens; pumping reads while
        writes are pending keeps large simultaneous sends from filling
        both kernel buffers and deadlocking.
        """
        out = _encode(frame)
        sent = 0
        in_buf = bytearray()
        need_header = True
        want = HEADER.size
        msg_type = None
        self._sock.setblocking(False)
        sel = selectors.DefaultSelector()
        try:
            sel.register(self._sock, selectors.EVENT_READ | selectors.EVENT_WRITE)
            while sent < len(out) or want > len(in_buf):
                events = sel.select(timeout=30.0)
                if not events:
                    raise TransportError("exchange stalled for 30s")
                _, mask = events[0]
                if mask & selectors.EVENT_READ and want > len(in_buf):
                    try:
                        chunk = self._sock.recv(min(want - len(in_buf), _CHUNK))
                    except BlockingIOError:
                        chunk = None
                    except OSError as exc:
                        raise TransportError(f"receive failed: {exc}") from exc
                    if chunk == b"":
                        raise TransportError("stream truncated during exchange")
                    if chunk:
                        in_buf += chunk
                        if need_header and len(in_buf) >= HEADER.size:
                            msg_type, length = HEADER.unpack(in_buf[: HEADER.size])
                            if msg_type not in _KNOWN_TYPES:
                                raise TransportError(
                                    f"unknown frame type {msg_type} on the wire"
                                )
                            if length > MAX_PAYLOAD:
                                raise TransportError(
                                    f"declared payload of {length} bytes exceeds "
                                    f"the {MAX_PAYLOAD} byte cap"
                                )
                            need_header = False
                            want = HEADER.size + length
                if mask & selectors.EVENT_WRITE and sent < len(out):
                    try:
                        sent += self._sock.send(out[sent : sent + _CHUNK])
                    except BlockingIOError:
                        pass
                    except OSError as exc:
                        raise TransportError(f"send failed: {exc}") from exc
                    if sent >= len(out):
                        sel.modify(self._sock, selectors.EVENT_READ)
        finally:
            sel.close()
            self._sock.setblocking(True)
        self._account_sent(out)
        wire = bytes(in_buf)
        self._account_received(wire)
        if self._delay:
            time.sleep(self._delay)
        return Frame(msg_type, wire[HEADER.size :])

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def loopback_pair(inject_rtt_ms: float = 0.0) -> tuple:
    """In-process channel: a connected socketpair wrapped as endpoints."""
    a, b = socket.socketpair()
    return Endpoint(a, inject_rtt_ms), Endpoint(b, inject_rtt_ms)


def paired_channels(transport: str = "loopback", inject_rtt_ms: float = 0.0) -> tuple:
    """Two connected endpoints in one process: loopback or localhost TCP."""
    if transport == "loopback":
        return loopback_pair(inject_rtt_ms)
    if transport == "tcp":
        listener = Listener("127.0.0.1", 0)
        accepted: list = []
        t = threading.Thread(
            target=lambda: accepted.append(listener.accept(inject_rtt_ms, timeout=30.0)),
            daemon=True,
        )
        t.start()
        first = connect_endpoint("127.0.0.1", listener.port, inject_rtt_ms)
        t.join(timeout=30.0)
        if not accepted:
            first.close()
            raise TransportError("localhost self-connection failed")
        return first, accepted[0]
    raise ValueError(f"unknown transport {transport!r}")


class Listener:
    """One-shot TCP listener; accept() yields a single Endpoint."""

    def __init__(self, host: str, port: int):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            self._sock.close()
            raise TransportError(f"cannot bind {host}:{port}: {exc}") from exc
        self._sock.listen(1)

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    def accept(self, inject_rtt_ms: float = 0.0, timeout: float | None = None) -> Endpoint:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout as exc:
            raise TransportError("timed out waiting for a peer") from exc
        finally:
            self._sock.close()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return Endpoint(conn, inject_rtt_ms)

    def close(self) -> None:
        self._sock.close()


def connect_endpoint(
    host: str, port: int, inject_rtt_ms: float = 0.0, timeout: float = 10.0
) -> Endpoint:
    """Dial a listener, retrying briefly so peers can start in any order."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return Endpoint(sock, inject_rtt_ms)
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise TransportError(f"cannot reach {host}:{port}: {exc}") from exc
            time.sleep(0.05)
