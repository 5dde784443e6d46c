"""Inter-worker transport: frame codec plus in-process and TCP links.

A link carries one direction pair between two workers: item frames flow
forward on it, acknowledgement and heartbeat frames flow back.  Frames on
the wire are tagged: an item frame is the item wire format behind a tag
byte; acknowledgements and heartbeats are a tag byte plus one 64-bit field.

The sender side of a link owns the unacknowledged-frame cache and enforces
the gamma cap: once ``gamma`` frames are unacknowledged the sender blocks
until acknowledgements drain the count down.  If the link drops, cached
frames are retransmitted on reconnect.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from collections import OrderedDict
from typing import Callable, Optional

from ..core import Item, ItemKind, decode_item, encode_item, make_item

TAG_ITEM = 0x01
TAG_ACK = 0x02
TAG_HEARTBEAT = 0x03

_U64 = struct.Struct(">Q")
_ITEM_HEAD = struct.Struct(">BQI")


def encode_ack(seq: int) -> bytes:
    return bytes([TAG_ACK]) + _U64.pack(seq)


def encode_heartbeat(timestamp_ms: int) -> bytes:
    return bytes([TAG_HEARTBEAT]) + _U64.pack(timestamp_ms)


def encode_item_frame(item: Item) -> bytes:
    return bytes([TAG_ITEM]) + encode_item(item)


def decode_frame(buf: bytes) -> tuple[int, object]:
    """Decode one complete frame; returns (tag, item or seq or timestamp)."""
    tag = buf[0]
    if tag == TAG_ITEM:
        item, _ = decode_item(buf, 1)
        return tag, item
    if tag in (TAG_ACK, TAG_HEARTBEAT):
        return tag, _U64.unpack_from(buf, 1)[0]
    raise ValueError(f"unknown frame tag {tag:#x}")


class _SenderState:
    """Gamma-capped unacknowledged-frame tracking, shared by all links."""

    def __init__(self, gamma: float) -> None:
        self.gamma = gamma
        self.cache: "OrderedDict[int, Item]" = OrderedDict()
        self.wire = 0
        self.cond = threading.Condition()
        self.closed = False

    def reserve(self, item: Item, timeout: Optional[float]) -> int:
        """Block until below the cap, then cache the item under a wire seq."""
        with self.cond:
            deadline = None if timeout is None else time.monotonic() + timeout
            while len(self.cache) >= self.gamma and not self.closed:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError("send blocked at gamma cap")
                self.cond.wait(remaining)
            if self.closed:
                raise ConnectionError("link closed")
            self.wire += 1
            self.cache[self.wire] = item
            return self.wire

    def would_block(self) -> bool:
        with self.cond:
            return len(self.cache) >= self.gamma

    def acked(self, wire: int) -> None:
        with self.cond:
            if self.cache.pop(wire, None) is not None:
                self.cond.notify_all()

    def unacked(self) -> int:
        with self.cond:
            return len(self.cache)

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()


class InprocLink:
    """In-process link: delivery is a callback into the receiver's mailbox.

    The receiver registers ``deliver(link, wire_seq, item)``; it must call
    ``link.ack(wire_seq)`` once the item is accepted.
    """

    def __init__(self, gamma: float = float("inf")) -> None:
        self._state = _SenderState(gamma)
        self._deliver: Optional[Callable[["InprocLink", int, Item], None]] = None
        self.last_heartbeat_ms: Optional[int] = None

    def connect(self, deliver: Callable[["InprocLink", int, Item], None]) -> None:
        self._deliver = deliver

    def send_item(self, item: Item, timeout: Optional[float] = None) -> int:
        wire = self._state.reserve(item, timeout)
        self._deliver(self, wire, make_item(item.kind, item.payload, item.origin))
        return wire

    def try_send_item(self, item: Item) -> Optional[int]:
        """Nonblocking send; None means blocked at the gamma cap."""
        if self._state.would_block():
            return None
        return self.send_item(item, timeout=0.001)

    def ack(self, wire: int) -> None:
        self._state.acked(wire)

    def heartbeat(self, timestamp_ms: Optional[int] = None) -> None:
        self.last_heartbeat_ms = timestamp_ms or int(time.time() * 1000)

    def unacked(self) -> int:
        return self._state.unacked()

    def retransmit(self) -> None:
        """Redeliver every cached frame, oldest first."""
        with self._state.cond:
            pending = list(self._state.cache.items())
        for wire, item in pending:
            self._deliver(self, wire,
                          make_item(item.kind, item.payload, item.origin))

    def close(self) -> None:
        self._state.close()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("peer closed")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, object]:
    """Read one tagged frame off a stream socket."""
    tag = _recv_exact(sock, 1)[0]
    if tag in (TAG_ACK, TAG_HEARTBEAT):
        return tag, _U64.unpack(_recv_exact(sock, 8))[0]
    if tag == TAG_ITEM:
        head = _recv_exact(sock, _ITEM_HEAD.size)
        kind, seq, length = _ITEM_HEAD.unpack(head)
        payload = _recv_exact(sock, length) if length else b""
        return tag, Item(kind=ItemKind(kind), payload=payload, seq=seq)
    raise ValueError(f"unknown frame tag {tag:#x}")


class TcpLink:
    """Sender end of a TCP link.

    A reader thread consumes acknowledgement and heartbeat frames coming
    back from the receiver.
    """

    def __init__(self, sock: socket.socket, gamma: float = float("inf")) -> None:
        self._sock = sock
        self._state = _SenderState(gamma)
        self._wire_to_seq: dict[int, int] = {}
        self._send_lock = threading.Lock()
        self.last_heartbeat_ms: Optional[int] = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    @classmethod
    def connect(cls, host: str, port: int, gamma: float = float("inf"),
                timeout: float = 10.0) -> "TcpLink":
        return cls(socket.create_connection((host, port), timeout=timeout), gamma)

    def send_item(self, item: Item, timeout: Optional[float] = None) -> int:
        wire = self._state.reserve(item, timeout)
        framed = Item(kind=item.kind, payload=item.payload, seq=wire,
                      origin=item.origin)
        with self._send_lock:
            self._sock.sendall(encode_item_frame(framed))
        return wire

    def send_heartbeat(self) -> None:
        with self._send_lock:
            self._sock.sendall(encode_heartbeat(int(time.time() * 1000)))

    def unacked(self) -> int:
        return self._state.unacked()

    def _read_loop(self) -> None:
        while True:
            try:
                tag, value = read_frame(self._sock)
            except (ConnectionError, OSError, ValueError):
                return
            if tag == TAG_ACK:
                self._state.acked(value)
            elif tag == TAG_HEARTBEAT:
                self.last_heartbeat_ms = value

    def close(self) -> None:
        self._state.close()
        try:
            self._sock.close()
        except OSError:
            pass


class TcpReceiver:
    """Receiver end of a TCP link: accepts one peer, feeds a callback.

    The wire sequence the sender stamped rides in the item's seq field; the
    receiving worker acknowledges with it, then assigns its own sequence.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0) -> None:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self.host, self.port = self._listener.getsockname()
        self._sock: Optional[socket.socket] = None
        self._send_lock = threading.Lock()
        self.last_heartbeat_ms: Optional[int] = None

    def accept_and_run(self, deliver: Callable[["TcpReceiver", int, Item], None],
                       ) -> threading.Thread:
        def loop() -> None:
            self._sock, _ = self._listener.accept()
            while True:
                try:
                    tag, value = read_frame(self._sock)
                except (ConnectionError, OSError, ValueError):
                    return
                if tag == TAG_ITEM:
                    wire = value.seq
                    value.seq = 0  # receiver assigns its own sequence
                    deliver(self, wire, value)
                elif tag == TAG_HEARTBEAT:
                    self.last_heartbeat_ms = value

        thread = threading.Thread(target=loop, daemon=True)
        thread.start()
        return thread

    def ack(self, wire: int) -> None:
        if self._sock is not None:
            with self._send_lock:
                self._sock.sendall(encode_ack(wire))

    def send_heartbeat(self) -> None:
        if self._sock is not None:
            with self._send_lock:
                self._sock.sendall(encode_heartbeat(int(time.time() * 1000)))

    def close(self) -> None:
        for sock in (self._sock, self._listener):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
