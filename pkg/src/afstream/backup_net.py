"""Socket protocol for the backup store.

Length-prefixed binary frames over a stream socket, four verbs mirroring
the store operations.  The server wraps any in-process store; the client
satisfies the same interface the runtime uses, so workers can back up to a
store living in another process.
"""

from __future__ import annotations

import socket
import struct
import threading
import zlib
from typing import Optional

from .backup_store import (
    BackupStore,
    BackupStoreError,
    MaterializedState,
    StateSnapshot,
    _decode_state_record,
    _encode_state_record,
)
from .core import Item, decode_item, encode_item

VERB_PUT_STATE = 1
VERB_GET_LATEST_STATE = 2
VERB_PUT_ITEMS = 3
VERB_REPLAY_ITEMS = 4

STATUS_OK = 0
STATUS_ERROR = 1

_LEN = struct.Struct(">I")
_CRC = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)) + payload + _CRC.pack(zlib.crc32(payload)))


def recv_frame(sock: socket.socket) -> bytes:
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    payload = _recv_exact(sock, length)
    (crc,) = _CRC.unpack(_recv_exact(sock, _CRC.size))
    if zlib.crc32(payload) != crc:
        raise BackupStoreError("frame checksum mismatch")
    return payload


def _pack_request(verb: int, worker_id: str, body: bytes) -> bytes:
    wid = worker_id.encode()
    return bytes([verb]) + _U16.pack(len(wid)) + wid + body


def _unpack_request(payload: bytes) -> tuple[int, str, bytes]:
    verb = payload[0]
    (wlen,) = _U16.unpack_from(payload, 1)
    worker_id = payload[3:3 + wlen].decode()
    return verb, worker_id, payload[3 + wlen:]


def _encode_items(items: list[Item]) -> bytes:
    parts = [_U32.pack(len(items))]
    parts.extend(encode_item(it) for it in items)
    return b"".join(parts)


def _decode_items(body: bytes) -> list[Item]:
    (count,) = _U32.unpack_from(body, 0)
    offset = _U32.size
    items = []
    for _ in range(count):
        item, offset = decode_item(body, offset)
        items.append(item)
    return items


class BackupServer:
    """Serves a store over TCP; one thread per connection."""

    def __init__(self, store: BackupStore, host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen()
        self.host, self.port = self._sock.getsockname()
        self._stop = threading.Event()
        self._accept_thread: Optional[threading.Thread] = None

    def start(self) -> "BackupServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        with conn:
            while True:
                try:
                    request = recv_frame(conn)
                except (ConnectionError, OSError):
                    return
                try:
                    response = self._handle(request)
                except BackupStoreError as exc:
                    response = bytes([STATUS_ERROR]) + str(exc).encode()
                except Exception as exc:  # defensive: keep the server alive
                    response = bytes([STATUS_ERROR]) + f"internal: {exc}".encode()
                try:
                    send_frame(conn, response)
                except OSError:
                    return

    def _handle(self, request: bytes) -> bytes:
        verb, worker_id, body = _unpack_request(request)
        if verb == VERB_PUT_STATE:
            snap = _decode_state_record(body)
            epoch = self.store.put_state(worker_id, snap)
            return bytes([STATUS_OK]) + _U64.pack(epoch)
        if verb == VERB_GET_LATEST_STATE:
            state = self.store.get_latest_state(worker_id)
            head = _U64.pack(state.last_seq) + _U64.pack(state.epoch)
            head += bytes([state.value_format]) + _U32.pack(len(state.entries))
            parts = [bytes([STATUS_OK]), head]
            for key, value in state.entries.items():
                parts.append(_U32.pack(len(key)) + key)
                parts.append(_U32.pack(len(value)) + value)
            return b"".join(parts)
        if verb == VERB_PUT_ITEMS:
            self.store.put_items(worker_id, _decode_items(body))
            return bytes([STATUS_OK])
        if verb == VERB_REPLAY_ITEMS:
            (after_seq,) = _U64.unpack(body)
            items = self.store.replay_items(worker_id, after_seq)
            return bytes([STATUS_OK]) + _encode_items(items)
        raise BackupStoreError(f"unknown verb {verb}")

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass


class BackupClient:
    """Store interface backed by a remote server.

    Safe to share across a worker's threads; requests are serialized on the
    single connection.
    """

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._lock = threading.Lock()

    def _call(self, verb: int, worker_id: str, body: bytes) -> bytes:
        with self._lock:
            send_frame(self._sock, _pack_request(verb, worker_id, body))
            response = recv_frame(self._sock)
        if response[0] != STATUS_OK:
            raise BackupStoreError(response[1:].decode())
        return response[1:]

    def put_state(self, worker_id: str, snapshot: StateSnapshot) -> int:
        body = _encode_state_record(snapshot)
        (epoch,) = _U64.unpack(self._call(VERB_PUT_STATE, worker_id, body))
        snapshot.worker_id = worker_id
        snapshot.epoch = epoch
        return epoch

    def get_latest_state(self, worker_id: str) -> MaterializedState:
        body = self._call(VERB_GET_LATEST_STATE, worker_id, b"")
        (last_seq,) = _U64.unpack_from(body, 0)
        (epoch,) = _U64.unpack_from(body, 8)
        value_format = body[16]
        (count,) = _U32.unpack_from(body, 17)
        offset = 21
        entries: dict[bytes, bytes] = {}
        for _ in range(count):
            (klen,) = _U32.unpack_from(body, offset)
            offset += 4
            key = body[offset:offset + klen]
            offset += klen
            (vlen,) = _U32.unpack_from(body, offset)
            offset += 4
            entries[key] = body[offset:offset + vlen]
            offset += vlen
        return MaterializedState(entries=entries, last_seq=last_seq,
                                 epoch=epoch, value_format=value_format)

    def put_items(self, worker_id: str, items: list[Item]) -> None:
        self._call(VERB_PUT_ITEMS, worker_id, _encode_items(items))

    def replay_items(self, worker_id: str, after_seq: int) -> list[Item]:
        body = self._call(VERB_REPLAY_ITEMS, worker_id, _U64.pack(after_seq))
        return _decode_items(body)

    def last_logged_seq(self, worker_id: str) -> int:
        items = self.replay_items(worker_id, 0)
        return items[-1].seq if items else 0

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
