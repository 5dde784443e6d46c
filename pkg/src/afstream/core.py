"""Stream item model, sequence numbering, windowing, and the operator contract.

Everything else in the package builds on the types here: items are tagged
records with opaque byte payloads, sequence numbers are assigned by the
receiving worker, and stateful operators expose a divergence/backup/recover
triple so the runtime can decide when a backup is actually worth issuing.
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import TYPE_CHECKING, Optional

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, typing only
    from .backup_store import StateSnapshot

SEQ_MAX = 2**64 - 1


class ItemKind(IntEnum):
    DATA = 0
    FEEDBACK = 1
    PUNCTUATION = 2


@dataclass(slots=True)
class Item:
    """A stream record.

    ``seq`` is 0 until the receiving worker assigns one; the payload is
    opaque bytes that only the operator code interprets.
    """

    kind: ItemKind
    payload: bytes
    seq: int = 0
    origin: str = ""

    @property
    def assigned(self) -> bool:
        return self.seq > 0


def make_item(kind: ItemKind, payload: bytes, origin: str = "") -> Item:
    if not isinstance(payload, (bytes, bytearray)):
        raise TypeError(f"payload must be bytes, got {type(payload).__name__}")
    return Item(kind=kind, payload=bytes(payload), origin=origin)


class SequenceOverflowError(RuntimeError):
    """Raised when a per-worker sequence counter would exceed 64 bits."""


class SeqCounter:
    """Monotone per-worker, per-direction sequence counter.

    Confined to the single upstream (or downstream, for feedback) thread of
    a worker; never shared across threads.
    """

    __slots__ = ("value",)

    def __init__(self, start: int = 0) -> None:
        if start < 0:
            raise ValueError("sequence counter cannot start below zero")
        self.value = start

    def next(self) -> int:
        if self.value >= SEQ_MAX:
            raise SequenceOverflowError("sequence counter exhausted")
        self.value += 1
        return self.value


def assign_seq(item: Item, counter: SeqCounter) -> Item:
    """Stamp ``item`` with the next sequence number from ``counter``."""
    item.seq = counter.next()
    return item


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

class WindowKind(Enum):
    HOPPING = "hopping"
    SLIDING = "sliding"
    DECAYING = "decaying"


class WindowUnit(Enum):
    ITEMS = "items"
    MILLIS = "millis"


class Tick(Enum):
    CONTINUE = "continue"
    BOUNDARY = "boundary"


@dataclass(frozen=True, slots=True)
class WindowSpec:
    kind: WindowKind
    length: int
    unit: WindowUnit = WindowUnit.ITEMS

    def __post_init__(self) -> None:
        if self.length <= 0:
            raise ValueError("window length must be positive")

    @property
    def adapts_thresholds(self) -> bool:
        """Decaying windows disable threshold adaptation entirely."""
        return self.kind is not WindowKind.DECAYING


class WindowTracker:
    """Tracks window progress for one worker and reports boundaries.

    Item-count mode is the default and is fully deterministic; wall-clock
    mode exists for millis-unit windows and takes an explicit timestamp so
    callers stay in control of time.

    A hopping window reaches a boundary every ``length`` units.  A sliding
    window reports a boundary at the same cadence, but only when the most
    recent recorded failure has already slid out of the window; a boundary
    is what allows thresholds to be stepped back up.  Decaying windows never
    report a boundary.
    """

    def __init__(self, spec: WindowSpec) -> None:
        self.spec = spec
        self.position = 0
        self.window_start = 0
        self.last_failure_at: Optional[int] = None

    def note_failure(self) -> None:
        self.last_failure_at = self.position

    def tick(self, now_ms: Optional[int] = None) -> Tick:
        if self.spec.kind is WindowKind.DECAYING:
            return Tick.CONTINUE
        if self.spec.unit is WindowUnit.MILLIS:
            if now_ms is None:
                raise ValueError("millis windows need an explicit timestamp")
            self.position = now_ms
        else:
            self.position += 1
        if self.position - self.window_start < self.spec.length:
            return Tick.CONTINUE
        self.window_start = self.position
        if self.spec.kind is WindowKind.HOPPING:
            return Tick.BOUNDARY
        # Sliding: only a boundary once the last failure left the window.
        if self.last_failure_at is None:
            return Tick.CONTINUE
        if self.position - self.last_failure_at >= self.spec.length:
            return Tick.BOUNDARY
        return Tick.CONTINUE

    def failure_in_window(self) -> bool:
        if self.last_failure_at is None:
            return False
        return self.position - self.last_failure_at < self.spec.length


def window_tick(tracker: WindowTracker, now_ms: Optional[int] = None) -> Tick:
    return tracker.tick(now_ms)


# ---------------------------------------------------------------------------
# Operator contract
# ---------------------------------------------------------------------------

class OperatorContractError(RuntimeError):
    """An operator broke the divergence/backup/recover contract."""


class FTOperator(ABC):
    """Capability implemented by every stateful operator.

    ``state_divergence`` must be 0 immediately after ``backup_state`` or
    ``recover_state`` completes; the runtime relies on that to meter how far
    the live state has drifted from the last durable copy.
    """

    @abstractmethod
    def state_divergence(self) -> float:
        """Distance between the current state and the cached backup copy."""

    def divergence_exceeds(self, threshold: float) -> bool:
        """Cheap comparison hook; collections may avoid square roots here."""
        return self.state_divergence() > threshold

    @abstractmethod
    def backup_state(self, full: bool = False) -> "StateSnapshot":
        """Return the entries to persist and refresh the cached copy."""

    @abstractmethod
    def recover_state(self, entries: dict[bytes, bytes]) -> None:
        """Replace the state with a materialized full snapshot."""


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

_ITEM_HEADER = struct.Struct(">BQI")  # kind tag, seq, payload length


def encode_item(item: Item) -> bytes:
    return _ITEM_HEADER.pack(item.kind, item.seq, len(item.payload)) + item.payload


def decode_item(buf: bytes, offset: int = 0) -> tuple[Item, int]:
    """Decode one item starting at ``offset``; returns (item, next offset)."""
    kind, seq, length = _ITEM_HEADER.unpack_from(buf, offset)
    start = offset + _ITEM_HEADER.size
    end = start + length
    if end > len(buf):
        raise ValueError("truncated item payload")
    return Item(kind=ItemKind(kind), payload=bytes(buf[start:end]), seq=seq), end
