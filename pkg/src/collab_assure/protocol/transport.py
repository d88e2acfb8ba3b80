"""Byte-frame channels: an in-process queue pair and a TCP stream."""

from __future__ import annotations

import queue
import socket
import struct
import time

from .messages import HEADER


class TransportError(ConnectionError):
    pass


_CLOSED = object()


class Channel:
    """Moves whole frames; keeps a transcript of ``(direction, frame)`` pairs."""

    def __init__(self):
        self.transcript = []

    def send(self, frame: bytes):
        self._send(frame)
        self.transcript.append(("out", frame))

    def recv(self) -> bytes:
        frame = self._recv()
        self.transcript.append(("in", frame))
        return frame

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class QueueChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None = 600.0):
        super().__init__()
        self._inbox, self._outbox, self._timeout = inbox, outbox, timeout
        self._closed = False

    def _send(self, frame):
        if self._closed:
            raise TransportError("channel closed")
        self._outbox.put(bytes(frame))

    def _recv(self):
        try:
            item = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise TransportError("timed out waiting for peer") from None
        if item is _CLOSED:
            raise TransportError("peer closed the channel")
        return item

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def inproc_pair() -> tuple[QueueChannel, QueueChannel]:
    a, b = queue.Queue(), queue.Queue()
    return QueueChannel(a, b), QueueChannel(b, a)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self._sock = sock

    def _send(self, frame):
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed by peer")
            buf += chunk
        return bytes(buf)

    def _recv(self):
        head = self._read_exact(HEADER.size)
        (length,) = struct.unpack_from(">I", head, 0)
        return head + self._read_exact(length)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


class Listener:
    """Bound, listening socket; ``accept`` yields one channel."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, timeout: float | None = 600.0):
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(timeout)

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def accept(self) -> SocketChannel:
        try:
            conn, _ = self._sock.accept()
        except OSError as exc:
            raise TransportError(f"accept failed: {exc}") from exc
        finally:
            self._sock.close()
        conn.settimeout(None)
        return SocketChannel(conn)


def tcp_connect(host: str, port: int, retries: int = 50, delay: float = 0.1) -> SocketChannel:
    for attempt in range(retries):
        try:
            return SocketChannel(socket.create_connection((host, port)))
        except OSError:
            if attempt == retries - 1:
                raise TransportError(f"could not connect to {host}:{port}") from None
            time.sleep(delay)


def parse_hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)
