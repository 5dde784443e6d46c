"""Built-in fault-tolerant state primitives.

Five containers (scalar, vector, matrix, hash table, set) that keep a cached
copy of their last backup, a dirty set of changed entries, and an
incrementally maintained divergence figure.  Updating one entry costs a few
arithmetic operations regardless of state size, and a partial backup ships
only the dirty entries.  Euclidean divergence is maintained as a squared sum
so per-update work avoids square roots; ``divergence_exceeds`` compares in
squared space.
"""

from __future__ import annotations

import math
import struct
from enum import Enum
from typing import Iterable, Union

import numpy as np

from .backup_store import SnapshotMode, StateSnapshot
from .core import FTOperator, OperatorContractError

Number = Union[int, float]

# Snapshot value encodings, declared in the snapshot header.
VALUE_RAW = 0
VALUE_F64 = 1
VALUE_I64 = 2

_F64 = struct.Struct(">d")
_I64 = struct.Struct(">q")
_U32 = struct.Struct(">I")
_U32X2 = struct.Struct(">II")


class DivergenceKind(Enum):
    ABS_DIFF = "abs_diff"          # scalars only
    MANHATTAN = "manhattan"
    EUCLIDEAN = "euclidean"
    MAX_DIFF = "max_diff"
    CARDINALITY = "cardinality"    # sets and hash tables only


def encode_value(v: Number, value_format: int) -> bytes:
    if value_format == VALUE_I64:
        return _I64.pack(int(v))
    return _F64.pack(float(v))


def decode_value(buf: bytes, value_format: int) -> Number:
    if value_format == VALUE_I64:
        return _I64.unpack(buf)[0]
    return _F64.unpack(buf)[0]


def keyed_divergence(current: dict, backup: dict, kind: DivergenceKind) -> float:
    """From-scratch divergence between two keyed numeric states.

    Missing keys read as zero.  Used by recovery audits and as the
    independent check against the incremental figures.
    """
    keys = set(current) | set(backup)
    if kind is DivergenceKind.CARDINALITY:
        return float(sum(1 for k in keys if (k in current) != (k in backup)))
    diffs = (abs(current.get(k, 0) - backup.get(k, 0)) for k in keys)
    if kind is DivergenceKind.MANHATTAN:
        return float(sum(diffs))
    if kind is DivergenceKind.EUCLIDEAN:
        return math.sqrt(sum(d * d for d in diffs))
    if kind is DivergenceKind.MAX_DIFF:
        return float(max(diffs, default=0.0))
    raise ValueError(f"{kind} is not a keyed divergence")


class _Meter:
    """Incremental divergence accumulator over per-key absolute diffs."""

    __slots__ = ("kind", "_sum", "_sum_sq", "_diffs", "_max", "_stale")

    def __init__(self, kind: DivergenceKind) -> None:
        self.kind = kind
        self.reset()

    def reset(self) -> None:
        self._sum = 0.0
        self._sum_sq = 0.0
        self._diffs: dict = {}
        self._max = 0.0
        self._stale = False

    def update(self, key, old_diff: float, new_diff: float) -> None:
        if self.kind is DivergenceKind.MANHATTAN:
            self._sum += new_diff - old_diff
        elif self.kind is DivergenceKind.EUCLIDEAN:
            self._sum_sq += new_diff * new_diff - old_diff * old_diff
        elif self.kind is DivergenceKind.MAX_DIFF:
            if new_diff > 0:
                self._diffs[key] = new_diff
            else:
                self._diffs.pop(key, None)
            if new_diff >= self._max:
                self._max = new_diff
                self._stale = False
            elif old_diff >= self._max:
                # The previous maximum shrank; recompute lazily on read.
                self._stale = True

    def value(self) -> float:
        if self.kind is DivergenceKind.MANHATTAN:
            return max(self._sum, 0.0)
        if self.kind is DivergenceKind.EUCLIDEAN:
            return math.sqrt(max(self._sum_sq, 0.0))
        if self._stale:
            self._max = max(self._diffs.values(), default=0.0)
            self._stale = False
        return self._max

    def rebuild(self, diffs: dict) -> None:
        """Reset the accumulators from a full per-key diff map; bulk-update hook."""
        self.reset()
        if self.kind is DivergenceKind.MANHATTAN:
            self._sum = float(sum(diffs.values()))
        elif self.kind is DivergenceKind.EUCLIDEAN:
            self._sum_sq = float(sum(d * d for d in diffs.values()))
        elif self.kind is DivergenceKind.MAX_DIFF:
            self._diffs = {k: d for k, d in diffs.items() if d > 0}
            self._max = max(self._diffs.values(), default=0.0)

    def exceeds(self, threshold: float) -> bool:
        if self.kind is DivergenceKind.EUCLIDEAN:
            if math.isinf(threshold):
                return False
            return max(self._sum_sq, 0.0) > threshold * threshold
        return self.value() > threshold


def _check_finite(value: float) -> float:
    if not math.isfinite(value):
        raise OperatorContractError(f"non-finite state value: {value!r}")
    return value


class FTScalar(FTOperator):
    """A single fault-tolerant numeric variable."""

    KEY = b"value"

    def __init__(self, kind: DivergenceKind = DivergenceKind.ABS_DIFF,
                 value: Number = 0, value_format: int = VALUE_F64) -> None:
        if kind is not DivergenceKind.ABS_DIFF:
            raise ValueError("scalars only support absolute difference")
        self.value = value
        self.value_format = value_format
        self._backup = value

    def set(self, value: Number) -> float:
        self.value = _check_finite(value)
        return self.state_divergence()

    def add(self, delta: Number) -> float:
        return self.set(self.value + delta)

    def state_divergence(self) -> float:
        return abs(self.value - self._backup)

    def backup_state(self, full: bool = False) -> StateSnapshot:
        entries = [(self.KEY, encode_value(self.value, self.value_format))]
        self._backup = self.value
        return StateSnapshot(mode=SnapshotMode.FULL, entries=entries,
                             value_format=self.value_format)

    def recover_state(self, entries: dict[bytes, bytes]) -> None:
        raw = entries.get(self.KEY)
        self.value = decode_value(raw, self.value_format) if raw is not None else 0
        self._backup = self.value


class _KeyedBase(FTOperator):
    """Shared dirty-set and backup machinery for keyed numeric containers."""

    value_format: int
    kind: DivergenceKind

    def __init__(self, kind: DivergenceKind, value_format: int) -> None:
        self.kind = kind
        self.value_format = value_format
        self._dirty: set = set()
        self._meter = _Meter(kind)

    # Subclasses provide raw access by internal key.
    def _get(self, key) -> Number: ...
    def _backup_get(self, key) -> Number: ...
    def _set_raw(self, key, value: Number) -> None: ...
    def _backup_set_raw(self, key, value: Number) -> None: ...
    def _encode_key(self, key) -> bytes: ...
    def _decode_key(self, kb: bytes): ...
    def _all_keys(self) -> Iterable: ...
    def _replace_all(self, entries: dict) -> None: ...

    def _apply(self, key, value: Number) -> float:
        value = _check_finite(value)
        bkp = self._backup_get(key)
        old = self._get(key)
        self._set_raw(key, value)
        self._meter.update(key, abs(old - bkp), abs(value - bkp))
        if value != bkp:
            self._dirty.add(key)
        else:
            self._dirty.discard(key)
        return self._meter.value()

    def state_divergence(self) -> float:
        return self._meter.value()

    def divergence_exceeds(self, threshold: float) -> bool:
        return self._meter.exceeds(threshold)

    def scratch_divergence(self) -> float:
        """Recompute divergence from scratch; test and audit hook."""
        cur = {k: self._get(k) for k in self._dirty}
        bkp = {k: self._backup_get(k) for k in self._dirty}
        return keyed_divergence(cur, bkp, self.kind)

    def backup_state(self, full: bool = False) -> StateSnapshot:
        if full:
            keys = sorted(self._all_keys())
            mode = SnapshotMode.FULL
        else:
            keys = sorted(self._dirty)
            mode = SnapshotMode.PARTIAL
        entries = [
            (self._encode_key(k), encode_value(self._get(k), self.value_format))
            for k in keys
        ]
        for k in self._dirty:
            self._backup_set_raw(k, self._get(k))
        self._dirty.clear()
        self._meter.reset()
        return StateSnapshot(mode=mode, entries=entries, value_format=self.value_format)

    def recover_state(self, entries: dict[bytes, bytes]) -> None:
        decoded = {
            self._decode_key(kb): decode_value(vb, self.value_format)
            for kb, vb in entries.items()
        }
        self._replace_all(decoded)
        self._dirty.clear()
        self._meter.reset()


class FTHashTable(_KeyedBase):
    """Fault-tolerant hash table keyed by bytes.

    Missing keys read as zero for the numeric divergences.  The divergence
    kind must be chosen explicitly; there is no sensible default shared by
    counters and cardinality-style states.
    """

    def __init__(self, kind: DivergenceKind, value_format: int = VALUE_F64) -> None:
        if kind is DivergenceKind.ABS_DIFF:
            raise ValueError("abs_diff is for scalars; use max_diff or manhattan")
        super().__init__(kind, value_format)
        self._data: dict[bytes, Number] = {}
        self._bkp: dict[bytes, Number] = {}

    def _get(self, key):
        return self._data.get(key, 0)

    def _backup_get(self, key):
        return self._bkp.get(key, 0)

    def _set_raw(self, key, value):
        self._data[key] = value

    def _backup_set_raw(self, key, value):
        self._bkp[key] = value

    def _encode_key(self, key):
        return key

    def _decode_key(self, kb):
        return kb

    def _all_keys(self):
        return self._data.keys()

    def _replace_all(self, entries):
        self._data = dict(entries)
        self._bkp = dict(entries)

    def set(self, key: bytes, value: Number) -> float:
        if self.kind is DivergenceKind.CARDINALITY:
            fresh = key not in self._data
            self._data[key] = _check_finite(value)
            if key not in self._bkp:
                self._dirty.add(key)
                if fresh:
                    self._meter.update(key, 0.0, 1.0)
            return self._meter.value()
        return self._apply(key, value)

    def add(self, key: bytes, delta: Number) -> float:
        if self.kind is DivergenceKind.CARDINALITY:
            return self.set(key, self._get(key) + delta)
        return self._apply(key, self._get(key) + delta)

    def get(self, key: bytes, default: Number = 0) -> Number:
        return self._data.get(key, default)

    def __len__(self) -> int:
        return len(self._data)

    def as_dict(self) -> dict[bytes, Number]:
        return dict(self._data)


class FTVector(_KeyedBase):
    """Fault-tolerant fixed-length vector of floats."""

    def __init__(self, length: int, kind: DivergenceKind = DivergenceKind.MANHATTAN,
                 value_format: int = VALUE_F64) -> None:
        if kind in (DivergenceKind.ABS_DIFF, DivergenceKind.CARDINALITY):
            raise ValueError(f"{kind.value} does not apply to vectors")
        super().__init__(kind, value_format)
        self._data = np.zeros(length, dtype=np.float64)
        self._bkp = np.zeros(length, dtype=np.float64)

    def _check_index(self, i: int) -> int:
        if not 0 <= i < len(self._data):
            raise IndexError(f"index {i} out of range 0..{len(self._data) - 1}")
        return i

    def _get(self, key):
        return float(self._data[key])

    def _backup_get(self, key):
        return float(self._bkp[key])

    def _set_raw(self, key, value):
        self._data[key] = value

    def _backup_set_raw(self, key, value):
        self._bkp[key] = value

    def _encode_key(self, key):
        return _U32.pack(key)

    def _decode_key(self, kb):
        return _U32.unpack(kb)[0]

    def _all_keys(self):
        return range(len(self._data))

    def _replace_all(self, entries):
        self._data = np.zeros(len(self._data), dtype=np.float64)
        for i, v in entries.items():
            self._data[i] = v
        self._bkp = self._data.copy()

    def set(self, index: int, value: Number) -> float:
        return self._apply(self._check_index(index), value)

    def add(self, index: int, delta: Number) -> float:
        i = self._check_index(index)
        return self._apply(i, self._get(i) + delta)

    def get(self, index: int) -> float:
        return self._get(self._check_index(index))

    def __len__(self) -> int:
        return len(self._data)

    def as_array(self) -> np.ndarray:
        return self._data.copy()


class FTMatrix(_KeyedBase):
    """Fault-tolerant matrix of floats, keyed by (row, col)."""

    def __init__(self, rows: int, cols: int,
                 kind: DivergenceKind = DivergenceKind.MAX_DIFF,
                 value_format: int = VALUE_F64) -> None:
        if kind in (DivergenceKind.ABS_DIFF, DivergenceKind.CARDINALITY):
            raise ValueError(f"{kind.value} does not apply to matrices")
        super().__init__(kind, value_format)
        self.rows = rows
        self.cols = cols
        self._data = np.zeros((rows, cols), dtype=np.float64)
        self._bkp = np.zeros((rows, cols), dtype=np.float64)

    def _check_key(self, key) -> tuple[int, int]:
        r, c = key
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise IndexError(f"({r}, {c}) out of range for {self.rows}x{self.cols}")
        return r, c

    def _get(self, key):
        return float(self._data[key])

    def _backup_get(self, key):
        return float(self._bkp[key])

    def _set_raw(self, key, value):
        self._data[key] = value

    def _backup_set_raw(self, key, value):
        self._bkp[key] = value

    def _encode_key(self, key):
        return _U32X2.pack(*key)

    def _decode_key(self, kb):
        return _U32X2.unpack(kb)

    def _all_keys(self):
        return ((r, c) for r in range(self.rows) for c in range(self.cols))

    def _replace_all(self, entries):
        self._data = np.zeros((self.rows, self.cols), dtype=np.float64)
        for (r, c), v in entries.items():
            self._data[r, c] = v
        self._bkp = self._data.copy()

    def set(self, row: int, col: int, value: Number) -> float:
        return self._apply(self._check_key((row, col)), value)

    def add(self, row: int, col: int, delta: Number) -> float:
        key = self._check_key((row, col))
        return self._apply(key, self._get(key) + delta)

    def get(self, row: int, col: int) -> float:
        return self._get(self._check_key((row, col)))

    def add_everywhere(self, delta: Number) -> float:
        """Shift every counter; used by recovery compensation.

        Vectorized: the dirty set and meter are rebuilt from the arrays
        instead of walking cells one at a time.
        """
        self._data += float(delta)
        diff = np.abs(self._data - self._bkp)
        nz_rows, nz_cols = np.nonzero(diff)
        self._dirty = {(int(r), int(c)) for r, c in zip(nz_rows, nz_cols)}
        self._meter.rebuild(
            {(int(r), int(c)): float(diff[r, c])
             for r, c in zip(nz_rows, nz_cols)}
        )
        return self._meter.value()

    def as_array(self) -> np.ndarray:
        return self._data.copy()


class FTSet(FTOperator):
    """Fault-tolerant set of byte keys with cardinality-churn divergence.

    Divergence counts membership churn since the last backup: insertions
    plus removals.  Monotone workloads (sampling reservoirs) never remove,
    so the figure is simply the number of new members.
    """

    def __init__(self) -> None:
        self.kind = DivergenceKind.CARDINALITY
        self.value_format = VALUE_RAW
        self._members: set[bytes] = set()
        self._added: set[bytes] = set()
        self._removed: set[bytes] = set()

    def insert(self, member: bytes) -> float:
        if member not in self._members:
            self._members.add(member)
            if member in self._removed:
                self._removed.discard(member)
            else:
                self._added.add(member)
        return self.state_divergence()

    def discard(self, member: bytes) -> float:
        if member in self._members:
            self._members.discard(member)
            if member in self._added:
                self._added.discard(member)
            else:
                self._removed.add(member)
        return self.state_divergence()

    def __contains__(self, member: bytes) -> bool:
        return member in self._members

    def __len__(self) -> int:
        return len(self._members)

    def members(self) -> set[bytes]:
        return set(self._members)

    def state_divergence(self) -> float:
        return float(len(self._added) + len(self._removed))

    def scratch_divergence(self) -> float:
        backup = (self._members - self._added) | self._removed
        return keyed_divergence(
            {m: 1 for m in self._members}, {m: 1 for m in backup},
            DivergenceKind.CARDINALITY,
        )

    def backup_state(self, full: bool = False) -> StateSnapshot:
        if full:
            entries = [(m, b"") for m in sorted(self._members)]
            mode = SnapshotMode.FULL
        else:
            # Removals cannot be expressed in an additive partial snapshot.
            if self._removed:
                return self.backup_state(full=True)
            entries = [(m, b"") for m in sorted(self._added)]
            mode = SnapshotMode.PARTIAL
        self._added.clear()
        self._removed.clear()
        return StateSnapshot(mode=mode, entries=entries, value_format=VALUE_RAW)

    def recover_state(self, entries: dict[bytes, bytes]) -> None:
        self._members = set(entries.keys())
        self._added.clear()
        self._removed.clear()
