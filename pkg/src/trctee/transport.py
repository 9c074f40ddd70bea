"""Record transport: 4-byte big-endian length prefix, then the payload.

The same framing runs over in-process queue pairs and TCP sockets, so
protocol code above this layer cannot tell the difference.  Wrappers add
traffic recording and the adversary taps used by attack scenarios.
"""

from __future__ import annotations

import queue
import socket
import struct

MAX_RECORD = 16 * 1024 * 1024  # sanity bound on the length prefix


class TransportError(Exception):
    pass


class TransportClosed(TransportError):
    pass


class ReceiveTimeout(TransportError):
    pass


class BindError(TransportError):
    pass


class ConnectError(TransportError):
    pass


class InProcTransport:
    """One end of an in-process pipe; build both with :func:`pipe_pair`."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send_record(self, payload: bytes) -> None:
        if self._closed:
            raise TransportClosed("transport is closed")
        self._outbox.put(payload)

    def recv_record(self, timeout: float | None = None) -> bytes:
        try:
            record = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ReceiveTimeout(f"no record within {timeout}s") from None
        if record is None:
            raise TransportClosed("peer closed the transport")
        return record

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def pipe_pair() -> tuple[InProcTransport, InProcTransport]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return InProcTransport(b_to_a, a_to_b), InProcTransport(a_to_b, b_to_a)


class TcpTransport:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send_record(self, payload: bytes) -> None:
        try:
            self._sock.sendall(struct.pack(">I", len(payload)) + payload)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def _recv_exact(self, n: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            try:
                chunk = self._sock.recv(n - len(chunks))
            except socket.timeout:
                raise ReceiveTimeout("socket receive timed out") from None
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                raise TransportClosed("peer closed the connection")
            chunks.extend(chunk)
        return bytes(chunks)

    def recv_record(self, timeout: float | None = None) -> bytes:
        self._sock.settimeout(timeout)
        (length,) = struct.unpack(">I", self._recv_exact(4))
        if length > MAX_RECORD:
            raise TransportError(f"record of {length} bytes exceeds the {MAX_RECORD} cap")
        return self._recv_exact(length)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def listen(host: str, port: int) -> socket.socket:
    try:
        server = socket.create_server((host, port))
    except OSError as exc:
        raise BindError(f"cannot bind {host}:{port}: {exc}") from exc
    return server


def accept_one(server: socket.socket, timeout: float | None = None) -> TcpTransport:
    server.settimeout(timeout)
    try:
        conn, _ = server.accept()
    except socket.timeout:
        raise ReceiveTimeout("no connection arrived") from None
    return TcpTransport(conn)


def connect(host: str, port: int, timeout: float = 5.0) -> TcpTransport:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectError(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.settimeout(None)
    return TcpTransport(sock)


class RecordingTransport:
    """Passthrough wrapper appending (direction, payload) to a shared list."""

    def __init__(self, inner, log: list[tuple[str, bytes]], sent_label: str = "sent",
                 received_label: str = "received"):
        self._inner = inner
        self.log = log
        self._sent = sent_label
        self._received = received_label

    def send_record(self, payload: bytes) -> None:
        self.log.append((self._sent, payload))
        self._inner.send_record(payload)

    def recv_record(self, timeout: float | None = None) -> bytes:
        record = self._inner.recv_record(timeout)
        self.log.append((self._received, record))
        return record

    def close(self) -> None:
        self._inner.close()


class AdversaryTap:
    """Wire-level attacker sitting on one endpoint's receive path.

    Attacks arm for the next incoming record only: ``tamper`` flips a bit,
    ``replay`` re-delivers the last accepted record, ``drop`` swallows one
    record.  Modeling the tap on the receive side keeps the resulting typed
    failure observable at the endpoint under test.
    """

    def __init__(self, inner):
        self._inner = inner
        self._armed: str | None = None
        self._last_received: bytes | None = None

    def arm(self, action: str) -> None:
        if action not in ("tamper", "replay", "drop"):
            raise ValueError(f"unknown adversary action {action!r}")
        self._armed = action

    def send_record(self, payload: bytes) -> None:
        self._inner.send_record(payload)

    def recv_record(self, timeout: float | None = None) -> bytes:
        if self._armed == "replay" and self._last_received is not None:
            self._armed = None
            return self._last_received
        record = self._inner.recv_record(timeout)
        if self._armed == "drop":
            self._armed = None
            record = self._inner.recv_record(timeout)
        elif self._armed == "tamper":
            self._armed = None
            record = record[:-1] + bytes([record[-1] ^ 0x01])
        self._last_received = record
        return record

    def close(self) -> None:
        self._inner.close()
