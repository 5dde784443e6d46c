"""Durable backup store for operator snapshots and item logs.

One logical store serves every worker: per worker it keeps a snapshot
history (full or partial epochs) and an append-only item log ordered by
sequence number.  Two implementations share a common in-memory core: a pure
memory store for tests and a file-backed store that persists each worker as
a directory of length-prefixed, checksummed log records.  Corrupt or torn
tail records are truncated away on open.

The store itself never replicates; it is the reliable end of the system and
can be swapped for any other durable backend behind the same four verbs.
"""

from __future__ import annotations

import os
import re
import struct
import threading
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional

from .core import Item, ItemKind, decode_item, encode_item

ROOT_ENV_VAR = "AFSTREAM_BACKUP_ROOT"

_FRAME = struct.Struct(">I")          # record length
_CRC = struct.Struct(">I")            # checksum trailer
_STATE_HEAD = struct.Struct(">QBBQI")  # epoch, mode, value_format, last_seq, n
_ENTRY_LEN = struct.Struct(">I")


class BackupStoreError(RuntimeError):
    pass


class SnapshotRegressionError(BackupStoreError):
    """A snapshot tried to move last_seq backward; protocol bug signal."""


class DuplicateSequenceError(BackupStoreError):
    """An item log append reused or reordered a sequence number."""


class SnapshotMode(IntEnum):
    FULL = 0
    PARTIAL = 1


@dataclass(slots=True)
class StateSnapshot:
    mode: SnapshotMode
    entries: list[tuple[bytes, bytes]]
    value_format: int = 0
    worker_id: str = ""
    epoch: int = 0
    last_seq: int = 0


@dataclass(slots=True)
class MaterializedState:
    """A full state reconstructed from the snapshot history."""

    entries: dict[bytes, bytes]
    last_seq: int = 0
    epoch: int = 0
    value_format: int = 0

    @property
    def empty(self) -> bool:
        return self.epoch == 0


@dataclass
class _WorkerRecords:
    snapshots: list[StateSnapshot] = field(default_factory=list)
    items: list[Item] = field(default_factory=list)
    lock: threading.RLock = field(default_factory=threading.RLock)


def materialize(snapshots: list[StateSnapshot]) -> MaterializedState:
    """Fold a snapshot history into a full state.

    A full snapshot replaces the state wholesale; partial snapshots overlay
    onto the latest full one.
    """
    if not snapshots:
        return MaterializedState(entries={})
    start = 0
    for i in range(len(snapshots) - 1, -1, -1):
        if snapshots[i].mode is SnapshotMode.FULL:
            start = i
            break
    entries: dict[bytes, bytes] = {}
    for snap in snapshots[start:]:
        if snap.mode is SnapshotMode.FULL:
            entries = dict(snap.entries)
        else:
            entries.update(snap.entries)
    last = snapshots[-1]
    return MaterializedState(
        entries=entries,
        last_seq=last.last_seq,
        epoch=last.epoch,
        value_format=last.value_format,
    )


def consecutive_suffix(items: list[Item]) -> list[Item]:
    """The longest run of consecutive sequence numbers ending at the tail."""
    if not items:
        return []
    end = len(items) - 1
    start = end
    while start > 0 and items[start - 1].seq + 1 == items[start].seq:
        start -= 1
    return items[start:]


class BackupStore:
    """In-memory store core; subclasses add persistence.

    Mutations are serialized per worker; different workers never block each
    other.
    """

    def __init__(self) -> None:
        self._workers: dict[str, _WorkerRecords] = {}
        self._map_lock = threading.Lock()

    def _records(self, worker_id: str) -> _WorkerRecords:
        with self._map_lock:
            rec = self._workers.get(worker_id)
            if rec is None:
                rec = self._workers[worker_id] = _WorkerRecords()
                self._load_worker(worker_id, rec)
            return rec

    # Persistence hooks, no-ops for the memory store.
    def _load_worker(self, worker_id: str, rec: _WorkerRecords) -> None:
        pass

    def _persist_snapshot(self, worker_id: str, snap: StateSnapshot) -> None:
        pass

    def _persist_items(self, worker_id: str, items: list[Item]) -> None:
        pass

    def _persist_prune(self, worker_id: str, kept: list[Item]) -> None:
        pass

    def put_state(self, worker_id: str, snapshot: StateSnapshot) -> int:
        rec = self._records(worker_id)
        with rec.lock:
            if rec.snapshots and snapshot.last_seq < rec.snapshots[-1].last_seq:
                raise SnapshotRegressionError(
                    f"{worker_id}: last_seq {snapshot.last_seq} regresses below "
                    f"{rec.snapshots[-1].last_seq}"
                )
            snapshot.worker_id = worker_id
            snapshot.epoch = rec.snapshots[-1].epoch + 1 if rec.snapshots else 1
            rec.snapshots.append(snapshot)
            self._persist_snapshot(worker_id, snapshot)
            return snapshot.epoch

    def get_latest_state(self, worker_id: str) -> MaterializedState:
        rec = self._records(worker_id)
        with rec.lock:
            return materialize(rec.snapshots)

    def put_items(self, worker_id: str, items: list[Item]) -> None:
        if not items:
            return
        rec = self._records(worker_id)
        with rec.lock:
            last = rec.items[-1].seq if rec.items else 0
            for item in items:
                if item.seq <= last:
                    raise DuplicateSequenceError(
                        f"{worker_id}: seq {item.seq} not above {last}"
                    )
                last = item.seq
            rec.items.extend(items)
            self._persist_items(worker_id, items)

    def replay_items(self, worker_id: str, after_seq: int) -> list[Item]:
        rec = self._records(worker_id)
        with rec.lock:
            run = consecutive_suffix(rec.items)
            return [it for it in run if it.seq > after_seq]

    def last_logged_seq(self, worker_id: str) -> int:
        rec = self._records(worker_id)
        with rec.lock:
            return rec.items[-1].seq if rec.items else 0

    def prune_items(self, worker_id: str) -> int:
        """Drop logged items covered by the latest snapshot. Off by default
        in every harness path so audits can see the full log."""
        rec = self._records(worker_id)
        with rec.lock:
            horizon = rec.snapshots[-1].last_seq if rec.snapshots else 0
            kept = [it for it in rec.items if it.seq > horizon]
            removed = len(rec.items) - len(kept)
            if removed:
                rec.items = kept
                self._persist_prune(worker_id, kept)
            return removed

    def snapshot_history(self, worker_id: str) -> list[StateSnapshot]:
        rec = self._records(worker_id)
        with rec.lock:
            return list(rec.snapshots)

    def close(self) -> None:
        pass


class MemoryBackupStore(BackupStore):
    """Store for in-process use; nothing outlives the process."""


def _encode_state_record(snap: StateSnapshot) -> bytes:
    parts = [
        _STATE_HEAD.pack(snap.epoch, int(snap.mode), snap.value_format,
                         snap.last_seq, len(snap.entries))
    ]
    for key, value in snap.entries:
        parts.append(_ENTRY_LEN.pack(len(key)))
        parts.append(key)
        parts.append(_ENTRY_LEN.pack(len(value)))
        parts.append(value)
    return b"".join(parts)


def _decode_state_record(buf: bytes) -> StateSnapshot:
    epoch, mode, value_format, last_seq, n = _STATE_HEAD.unpack_from(buf, 0)
    offset = _STATE_HEAD.size
    entries = []
    for _ in range(n):
        (klen,) = _ENTRY_LEN.unpack_from(buf, offset)
        offset += _ENTRY_LEN.size
        key = bytes(buf[offset:offset + klen])
        offset += klen
        (vlen,) = _ENTRY_LEN.unpack_from(buf, offset)
        offset += _ENTRY_LEN.size
        value = bytes(buf[offset:offset + vlen])
        offset += vlen
        entries.append((key, value))
    return StateSnapshot(mode=SnapshotMode(mode), entries=entries,
                         value_format=value_format, epoch=epoch,
                         last_seq=last_seq)


def frame_record(payload: bytes) -> bytes:
    return _FRAME.pack(len(payload)) + payload + _CRC.pack(zlib.crc32(payload))


def read_framed(data: bytes) -> tuple[list[bytes], int]:
    """Parse framed records; returns (payloads, clean byte length).

    Stops at the first short or checksum-failing record so a torn tail can
    be truncated at the returned offset.
    """
    payloads = []
    offset = 0
    while offset + _FRAME.size <= len(data):
        (length,) = _FRAME.unpack_from(data, offset)
        end = offset + _FRAME.size + length + _CRC.size
        if end > len(data):
            break
        payload = data[offset + _FRAME.size: offset + _FRAME.size + length]
        (crc,) = _CRC.unpack_from(data, end - _CRC.size)
        if zlib.crc32(payload) != crc:
            break
        payloads.append(bytes(payload))
        offset = end
    return payloads, offset


_SAFE_NAME = re.compile(r"[^A-Za-z0-9._-]")


class FileBackupStore(BackupStore):
    """File-backed store: one directory per worker holding ``state.log``
    and ``items.log``."""

    def __init__(self, root: Optional[os.PathLike] = None, fsync: bool = False) -> None:
        super().__init__()
        if root is None:
            env = os.environ.get(ROOT_ENV_VAR)
            if not env:
                raise ValueError(
                    f"no store root given and {ROOT_ENV_VAR} is unset"
                )
            root = env
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._handles: dict[str, object] = {}

    def _dir(self, worker_id: str) -> Path:
        return self.root / _SAFE_NAME.sub("_", worker_id)

    def _read_log(self, path: Path) -> list[bytes]:
        if not path.exists():
            return []
        data = path.read_bytes()
        payloads, clean = read_framed(data)
        if clean < len(data):
            with open(path, "r+b") as fh:
                fh.truncate(clean)
        return payloads

    def _load_worker(self, worker_id: str, rec: _WorkerRecords) -> None:
        d = self._dir(worker_id)
        for payload in self._read_log(d / "state.log"):
            snap = _decode_state_record(payload)
            snap.worker_id = worker_id
            rec.snapshots.append(snap)
        for payload in self._read_log(d / "items.log"):
            item, _ = decode_item(payload)
            rec.items.append(item)

    def _append(self, worker_id: str, name: str, blob: bytes) -> None:
        d = self._dir(worker_id)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / name, "ab") as fh:
            fh.write(blob)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    def _persist_snapshot(self, worker_id: str, snap: StateSnapshot) -> None:
        self._append(worker_id, "state.log", frame_record(_encode_state_record(snap)))

    def _persist_items(self, worker_id: str, items: list[Item]) -> None:
        blob = b"".join(frame_record(encode_item(it)) for it in items)
        self._append(worker_id, "items.log", blob)

    def _persist_prune(self, worker_id: str, kept: list[Item]) -> None:
        d = self._dir(worker_id)
        blob = b"".join(frame_record(encode_item(it)) for it in kept)
        tmp = d / "items.log.tmp"
        tmp.write_bytes(blob)
        os.replace(tmp, d / "items.log")
