"""Worker protocol core: receive, backup, send, and recover logic.

``WorkerCore`` is the single-threaded state machine shared by both
execution modes: the deterministic in-process engine drives it inline, and
the threaded runtime drives it from its upstream/compute/downstream
threads.  The rules it enforces:

* every received item gets a per-direction sequence number and is
  acknowledged before it is dispatched to a compute partition;
* punctuation items are always written to the item log (flushing any
  pending items first, so logged sequence numbers stay ordered);
* data and feedback items are backed up only when more than ``l`` of them
  are pending (received but not yet processed);
* a partition backs up its state only when the divergence since the last
  backup exceeds its per-thread share of ``theta``;
* recovery restores the latest snapshot per partition, replays only logged
  items beyond each partition's snapshot, then halves the thresholds.
"""

from __future__ import annotations

import hashlib
import math
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..backup_store import MaterializedState, StateSnapshot
from ..core import (
    FTOperator,
    Item,
    ItemKind,
    OperatorContractError,
    SeqCounter,
    Tick,
    WindowSpec,
    WindowTracker,
    assign_seq,
    make_item,
)
from ..thresholds import (
    ThresholdSet,
    WindowBoundary,
    on_recovery,
    on_window_boundary,
    per_thread_theta,
)

# Item log directions: data and punctuation flow in from upstream, feedback
# flows in from downstream.  Each direction has its own counter and log.
DIR_IN = "in"
DIR_FB = "fb"

_META_FB_SEQ = b"\xff.fbseq"
_U64 = struct.Struct(">Q")

_HASH_KEY = b"afstream-dispatch"


def stable_hash(key: bytes) -> int:
    """Process-independent hash for partitioning decisions."""
    digest = hashlib.blake2b(key, digest_size=8, key=_HASH_KEY).digest()
    return int.from_bytes(digest, "big")


def dispatch_to_compute(key: bytes, num_threads: int) -> int:
    """Deterministic compute-thread choice for a payload key."""
    if num_threads == 1:
        return 0
    return stable_hash(key) % num_threads


class Emitter:
    """Collects an operator's outputs during one item application."""

    __slots__ = ("data", "puncts", "feedback")

    def __init__(self) -> None:
        self.data: list[bytes] = []
        self.puncts: list[bytes] = []
        self.feedback: list[tuple[bytes, Optional[str]]] = []

    def emit(self, payload: bytes) -> None:
        self.data.append(payload)

    def emit_punctuation(self, payload: bytes) -> None:
        self.puncts.append(payload)

    def emit_feedback(self, payload: bytes, target: Optional[str] = None) -> None:
        self.feedback.append((payload, target))


class Operator(FTOperator):
    """Base class for pipeline operators.

    Stateful subclasses implement the divergence/backup/recover triple,
    usually by delegating to a fault-tolerant primitive.
    """

    stateful = True

    def on_data(self, payload: bytes, out: Emitter) -> None:
        raise NotImplementedError

    def on_punctuation(self, payload: bytes, out: Emitter) -> None:
        pass

    def on_feedback(self, payload: bytes, out: Emitter) -> None:
        pass

    def holding(self) -> bool:
        """Consistency gate: True pauses data processing, feedback still flows."""
        return False

    def after_recovery(self, failure_count: int) -> None:
        """Hook for recovery compensation, called once replay is done."""

    def state_dict(self) -> dict:
        """Decoded view of the state for audits; {} for stateless operators."""
        return {}


class StatelessOperator(Operator):
    stateful = False

    def state_divergence(self) -> float:
        return 0.0

    def backup_state(self, full: bool = False) -> StateSnapshot:
        raise OperatorContractError("stateless operator has no state to back up")

    def recover_state(self, entries: dict[bytes, bytes]) -> None:
        pass


@dataclass
class WorkerConfig:
    worker_id: str
    operator_factory: Callable[[int], Operator]  # partition index -> operator
    thresholds: ThresholdSet
    window: WindowSpec
    num_compute_threads: int = 1
    compute_key: Callable[[bytes], bytes] = staticmethod(lambda payload: payload)

    def __post_init__(self) -> None:
        if self.num_compute_threads < 1:
            raise ValueError("a worker needs at least one compute thread")


@dataclass
class WorkerMetrics:
    received: int = 0
    processed: int = 0
    replayed: int = 0
    state_backups: int = 0
    state_entries_written: int = 0
    items_logged: int = 0
    punct_logged: int = 0
    flushes: int = 0
    sent: int = 0
    feedback_sent: int = 0
    recoveries: int = 0
    window_adaptations: int = 0

    def merge(self, other: "WorkerMetrics") -> None:
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))


class Partition:
    """One compute thread's slice of the worker: an operator it owns."""

    __slots__ = ("idx", "operator", "store_key", "theta", "last_in_seq",
                 "last_fb_seq", "queue", "fb_queue")

    def __init__(self, idx: int, operator: Operator, store_key: str) -> None:
        self.idx = idx
        self.operator = operator
        self.store_key = store_key
        self.theta = math.inf
        self.last_in_seq = 0
        self.last_fb_seq = 0
        self.queue: deque[Item] = deque()
        self.fb_queue: deque[Item] = deque()


@dataclass
class RecoveryInfo:
    """What recovery saw, for bound audits."""

    pre_replay_states: dict[int, dict] = field(default_factory=dict)
    snapshot_seqs: dict[int, int] = field(default_factory=dict)
    replayed_in: int = 0
    replayed_fb: int = 0
    duration_s: float = 0.0


class WorkerCore:
    """Protocol state machine for one worker."""

    def __init__(self, config: WorkerConfig, store,
                 send_data: Callable[["WorkerCore", Item], None],
                 send_feedback: Callable[["WorkerCore", Item, Optional[str]], None],
                 ) -> None:
        self.config = config
        self.worker_id = config.worker_id
        self.store = store
        self.send_data = send_data
        self.send_feedback = send_feedback
        self.thresholds = config.thresholds
        self.window = WindowTracker(config.window)
        self.metrics = WorkerMetrics()
        self.crashed = False
        self._counters = {DIR_IN: SeqCounter(), DIR_FB: SeqCounter()}
        self._pending: dict[str, dict[int, Item]] = {DIR_IN: {}, DIR_FB: {}}
        self.partitions = [
            Partition(i, config.operator_factory(i), f"{config.worker_id}.p{i}")
            for i in range(config.num_compute_threads)
        ]
        self._refresh_partition_thetas()

    # -- store keys --------------------------------------------------------

    def log_key(self, direction: str) -> str:
        return f"{self.worker_id}.{direction}"

    def _refresh_partition_thetas(self) -> None:
        share = per_thread_theta(self.thresholds.theta, len(self.partitions))
        for p in self.partitions:
            p.theta = share

    # -- receive path ------------------------------------------------------

    def ingest(self, item: Item, ack: Callable[[], None],
               direction: str = DIR_IN) -> list[tuple[int, Item, str]]:
        """Receive one item: sequence, back up per policy, acknowledge.

        Returns the (partition index, item, direction) dispatch targets; the
        caller queues them, which keeps this method safe to run from a
        dedicated receive thread.
        """
        if self.crashed:
            raise RuntimeError(f"{self.worker_id} is crashed")
        assign_seq(item, self._counters[direction])
        self.metrics.received += 1
        pending = self._pending[direction]
        if item.kind is ItemKind.PUNCTUATION:
            # Flush pending first so the log stays in sequence order, then
            # the punctuation itself is always logged.
            if pending and math.isfinite(self.thresholds.l):
                self._flush_pending(direction)
            self.store.put_items(self.log_key(direction), [item])
            self.metrics.punct_logged += 1
        else:
            pending[item.seq] = item
            if len(pending) > self.thresholds.l:
                self._flush_pending(direction)
        ack()
        targets = self._targets(item, direction)
        if item.kind is ItemKind.DATA and direction == DIR_IN:
            if self.window.tick() is Tick.BOUNDARY:
                self._adapt_at_boundary()
        return targets

    def on_frame(self, item: Item, ack: Callable[[], None],
                 direction: str = DIR_IN) -> None:
        """Receive one item and dispatch it to the local partition queues."""
        for idx, it, d in self.ingest(item, ack, direction):
            p = self.partitions[idx]
            (p.fb_queue if d == DIR_FB else p.queue).append(it)

    def _flush_pending(self, direction: str) -> None:
        pending = self._pending[direction]
        if not pending:
            return
        items = list(pending.values())
        self.store.put_items(self.log_key(direction), items)
        self.metrics.items_logged += len(items)
        self.metrics.flushes += 1
        pending.clear()

    def _adapt_at_boundary(self) -> None:
        event = WindowBoundary(failure_in_window=self.window.failure_in_window())
        adapted = on_window_boundary(self.thresholds, event)
        if adapted is not self.thresholds:
            self.thresholds = adapted
            self._refresh_partition_thetas()
            self.metrics.window_adaptations += 1

    def _targets(self, item: Item, direction: str) -> list[tuple[int, Item, str]]:
        if direction == DIR_FB or item.kind is ItemKind.FEEDBACK:
            return [(p.idx, item, DIR_FB) for p in self.partitions]
        if item.kind is ItemKind.PUNCTUATION:
            return [(p.idx, item, DIR_IN) for p in self.partitions]
        key = self.config.compute_key(item.payload)
        idx = dispatch_to_compute(key, len(self.partitions))
        return [(idx, item, DIR_IN)]

    # -- compute path ------------------------------------------------------

    def process_available(self) -> int:
        """Drain partition queues; returns the number of items applied.

        Feedback always flows; data and punctuation wait while the
        operator's consistency gate holds.
        """
        applied = 0
        while True:
            progress = 0
            for p in self.partitions:
                while p.fb_queue:
                    self._apply(p, p.fb_queue.popleft(), DIR_FB)
                    progress += 1
                while p.queue and not p.operator.holding():
                    self._apply(p, p.queue.popleft(), DIR_IN)
                    progress += 1
            applied += progress
            if not progress:
                return applied

    def apply_in_partition(self, idx: int, item: Item,
                           direction: str = DIR_IN) -> None:
        """Apply one item inside a partition; compute-thread entry point."""
        self._apply(self.partitions[idx], item, direction)

    def _apply(self, p: Partition, item: Item, direction: str) -> None:
        out = Emitter()
        op = p.operator
        if item.kind is ItemKind.DATA:
            op.on_data(item.payload, out)
        elif item.kind is ItemKind.PUNCTUATION:
            op.on_punctuation(item.payload, out)
        else:
            op.on_feedback(item.payload, out)
        if direction == DIR_FB:
            p.last_fb_seq = max(p.last_fb_seq, item.seq)
        else:
            p.last_in_seq = max(p.last_in_seq, item.seq)
        self._pending[direction].pop(item.seq, None)
        self.metrics.processed += 1
        if op.stateful:
            self.maybe_backup(p)
        self._route_outputs(out)

    def _route_outputs(self, out: Emitter) -> None:
        for payload in out.data:
            self.metrics.sent += 1
            self.send_data(self, make_item(ItemKind.DATA, payload, self.worker_id))
        for payload in out.puncts:
            self.metrics.sent += 1
            self.send_data(self, make_item(ItemKind.PUNCTUATION, payload, self.worker_id))
        for payload, target in out.feedback:
            self.metrics.feedback_sent += 1
            self.send_feedback(
                self, make_item(ItemKind.FEEDBACK, payload, self.worker_id), target
            )

    def maybe_backup(self, p: Partition, force: bool = False) -> Optional[int]:
        """Back up a partition's state if it drifted past its threshold."""
        divergence = p.operator.state_divergence()
        if math.isnan(divergence) or divergence < 0:
            raise OperatorContractError(
                f"{self.worker_id}.p{p.idx}: invalid divergence {divergence!r}"
            )
        if not force and divergence <= p.theta:
            return None
        snap = p.operator.backup_state(full=force)
        snap.last_seq = p.last_in_seq
        snap.entries.append((_META_FB_SEQ, _U64.pack(p.last_fb_seq)))
        epoch = self.store.put_state(p.store_key, snap)
        self.metrics.state_backups += 1
        self.metrics.state_entries_written += len(snap.entries)
        return epoch

    # -- forensic access ---------------------------------------------------

    def state_dicts(self) -> dict[int, dict]:
        return {p.idx: p.operator.state_dict() for p in self.partitions
                if p.operator.stateful}

    def pending_counts(self) -> dict[str, int]:
        return {d: len(v) for d, v in self._pending.items()}

    def crash(self) -> None:
        self.crashed = True

    # -- recovery ----------------------------------------------------------

    @classmethod
    def recover(cls, config: WorkerConfig, store,
                send_data, send_feedback,
                previous_thresholds: ThresholdSet) -> tuple["WorkerCore", RecoveryInfo]:
        """Build a replacement worker from the backup store.

        Restores each partition from its latest materialized snapshot,
        replays logged items beyond the snapshots (most recent consecutive
        run only), then halves the thresholds for the next failure.
        """
        started = time.perf_counter()
        config.thresholds = previous_thresholds
        core = cls(config, store, send_data, send_feedback)
        info = RecoveryInfo()

        max_in = 0
        max_fb = 0
        for p in core.partitions:
            state: MaterializedState = store.get_latest_state(p.store_key)
            entries = dict(state.entries)
            fb_raw = entries.pop(_META_FB_SEQ, None)
            if p.operator.stateful:
                p.operator.recover_state(entries)
            p.last_in_seq = state.last_seq
            p.last_fb_seq = _U64.unpack(fb_raw)[0] if fb_raw else 0
            info.pre_replay_states[p.idx] = p.operator.state_dict()
            info.snapshot_seqs[p.idx] = p.last_in_seq
            max_in = max(max_in, p.last_in_seq)
            max_fb = max(max_fb, p.last_fb_seq)

        info.replayed_in = core._replay(DIR_IN)
        info.replayed_fb = core._replay(DIR_FB)

        core._counters[DIR_IN] = SeqCounter(
            max(max_in, store.last_logged_seq(core.log_key(DIR_IN))))
        core._counters[DIR_FB] = SeqCounter(
            max(max_fb, store.last_logged_seq(core.log_key(DIR_FB))))

        core.thresholds = on_recovery(previous_thresholds)
        core._refresh_partition_thetas()
        core.window.note_failure()
        for p in core.partitions:
            p.operator.after_recovery(core.thresholds.k)
            if p.operator.stateful and math.isfinite(core.thresholds.theta):
                core.maybe_backup(p)
        core.metrics.recoveries = 1
        info.duration_s = time.perf_counter() - started
        return core, info

    def _replay(self, direction: str) -> int:
        """Replay logged items into their partitions, skipping anything a
        partition's snapshot already covers."""
        horizon_attr = "last_in_seq" if direction == DIR_IN else "last_fb_seq"
        floor = min(getattr(p, horizon_attr) for p in self.partitions)
        items = self.store.replay_items(self.log_key(direction), floor)
        replayed = 0
        for item in items:
            targets = self._replay_targets(item, direction)
            for p in targets:
                if item.seq > getattr(p, horizon_attr):
                    self._apply(p, item, direction)
                    replayed += 1
        self.metrics.replayed += replayed
        return replayed

    def _replay_targets(self, item: Item, direction: str) -> list[Partition]:
        if direction == DIR_FB or item.kind is not ItemKind.DATA:
            return self.partitions
        key = self.config.compute_key(item.payload)
        return [self.partitions[dispatch_to_compute(key, len(self.partitions))]]
