"""Frame transports: TCP sockets for worker processes, queues for threads.

Both channels push every frame through ``encode_frame``/``decode_frame`` so
the in-process mode exercises the same byte-level protocol.
"""

import queue
import socket
import threading
import time
from collections import deque

from armfleet.core.errors import ArmfleetError, ConfigError
from armfleet.core.protocol import Frame, FrameDecoder, decode_frame, encode_frame

RECV_CHUNK = 1 << 16


class ChannelClosedError(ArmfleetError):
    """The peer closed the connection or went away."""


class ChannelTimeoutError(ArmfleetError):
    """No frame arrived within the timeout."""


def parse_address(address: str) -> tuple[str, int]:
    """Split ``host:port``; an empty host means localhost."""
    host, sep, port = address.rpartition(":")
    if not sep:
        raise ConfigError(f"Address '{address}' must look like host:port")
    try:
        number = int(port)
    except ValueError as e:
        raise ConfigError(f"Invalid port in address '{address}'") from e
    if not 0 <= number <= 65535:
        raise ConfigError(f"Port {number} out of range in '{address}'")
    return host or "127.0.0.1", number


class SocketChannel:
    """Channel over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._decoder = FrameDecoder()
        self._ready: deque[Frame] = deque()
        self._send_lock = threading.Lock()
        self._closed = False

    @property
    def peer(self) -> str:
        try:
            host, port = self._sock.getpeername()[:2]
            return f"{host}:{port}"
        except OSError:
            return "disconnected"

    def send(self, frame: Frame) -> None:
        if self._closed:
            raise ChannelClosedError("Channel is closed", "closed")
        data = encode_frame(frame)
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as e:
                raise ChannelClosedError(f"Send failed: {e}", "closed") from e

    def receive(self, timeout: float | None = None) -> Frame:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._ready:
            if self._closed:
                raise ChannelClosedError("Channel is closed", "closed")
            remaining = None if deadline is None else max(deadline - time.monotonic(), 0.0)
            if remaining == 0.0:
                raise ChannelTimeoutError(f"No frame within {timeout}s", "timeout")
            try:
                self._sock.settimeout(remaining)
                chunk = self._sock.recv(RECV_CHUNK)
            except TimeoutError as e:
                raise ChannelTimeoutError(f"No frame within {timeout}s", "timeout") from e
            except OSError as e:
                raise ChannelClosedError(f"Receive failed: {e}", "closed") from e
            if not chunk:
                raise ChannelClosedError("Peer closed the connection", "closed")
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.popleft()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def connect_channel(address: str, timeout: float = 30.0) -> SocketChannel:
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise ChannelClosedError(f"Cannot connect to {address}: {e}", "connect") from e
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketChannel(sock)


class QueueChannel:
    """One end of an in-memory channel pair; frames travel as encoded bytes."""

    def __init__(self, inbox: "queue.Queue[bytes | None]", outbox: "queue.Queue[bytes | None]"):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False
        self._peer_closed = False

    def send(self, frame: Frame) -> None:
        if self._closed or self._peer_closed:
            raise ChannelClosedError("Channel is closed", "closed")
        self._outbox.put(encode_frame(frame))

    def receive(self, timeout: float | None = None) -> Frame:
        if self._closed or self._peer_closed:
            raise ChannelClosedError("Channel is closed", "closed")
        try:
            data = self._inbox.get(timeout=timeout)
        except queue.Empty as e:
            raise ChannelTimeoutError(f"No frame within {timeout}s", "timeout") from e
        if data is None:
            self._peer_closed = True
            raise ChannelClosedError("Peer closed the channel", "closed")
        return decode_frame(data)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def queue_channel_pair() -> tuple[QueueChannel, QueueChannel]:
    """Two connected in-process channel ends (coordinator side first)."""
    forward: queue.Queue[bytes | None] = queue.Queue()
    backward: queue.Queue[bytes | None] = queue.Queue()
    return QueueChannel(backward, forward), QueueChannel(forward, backward)
