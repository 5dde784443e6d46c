"""Threaded worker: one upstream thread, N compute threads, one downstream
thread, and a dedicated backup thread per worker.

Threads communicate only through bounded ring buffers carrying item
handles.  The upstream thread is the sole sequence assigner and item-backup
decider; each compute thread owns its state partition; the downstream
thread is the sole sender and acknowledgement tracker; the backup thread
drains backups to the store so compute threads never wait on store I/O
(unless the bounded backup queue fills, which is deliberate backpressure).

This mode exercises the real concurrency surfaces.  Counter reads across
threads are treated as informational; exact-value assertions belong to the
deterministic engine, while the error bounds hold here under any thread
timing.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..core import Item, ItemKind
from ..thresholds import ThresholdSet
from .queues import RingBuffer, RingBufferClosed
from .worker import DIR_FB, DIR_IN, WorkerConfig, WorkerCore
from .transport import InprocLink, TcpLink

_POLL_S = 0.02


class BackupGatewayError(RuntimeError):
    pass


class AsyncStoreGateway:
    """Store facade: writes are queued for the backup thread, reads are
    synchronous against the real store."""

    def __init__(self, store, capacity: int = 256) -> None:
        self.store = store
        self.queue = RingBuffer(capacity)
        self._idle = threading.Event()
        self._idle.set()

    def put_state(self, worker_id: str, snapshot) -> int:
        self._idle.clear()
        self.queue.put(("state", worker_id, snapshot))
        return 0

    def put_items(self, worker_id: str, items) -> None:
        self._idle.clear()
        self.queue.put(("items", worker_id, list(items)))

    def get_latest_state(self, worker_id: str):
        return self.store.get_latest_state(worker_id)

    def replay_items(self, worker_id: str, after_seq: int):
        return self.store.replay_items(worker_id, after_seq)

    def last_logged_seq(self, worker_id: str) -> int:
        return self.store.last_logged_seq(worker_id)

    def wait_idle(self, timeout: float = 5.0) -> bool:
        return self._idle.wait(timeout)

    def _mark_idle_if_empty(self) -> None:
        if len(self.queue) == 0:
            self._idle.set()


@dataclass
class Wiring:
    """Where a worker's outputs go."""

    data_links: list = field(default_factory=list)
    route_key: Callable[[bytes], int] = staticmethod(lambda payload: 0)
    sink: Optional[Callable[[Item], None]] = None
    fb_links: dict = field(default_factory=dict)  # target worker id -> link


class ThreadedWorker:
    def __init__(self, config: WorkerConfig, store, wiring: Wiring,
                 core: Optional[WorkerCore] = None,
                 queue_capacity: int = 1024,
                 backup_queue_capacity: int = 256,
                 store_retries: int = 3) -> None:
        self.config = config
        self.wiring = wiring
        self.gateway = AsyncStoreGateway(store, backup_queue_capacity)
        self._store_retries = store_retries
        self.mailbox = RingBuffer(queue_capacity)       # into upstream thread
        self.out_mailbox = RingBuffer(queue_capacity)   # into downstream thread
        self.partition_queues = [RingBuffer(queue_capacity)
                                 for _ in range(config.num_compute_threads)]
        # Feedback bypasses the consistency gate, so it gets its own queues.
        self.partition_fb_queues = [RingBuffer(queue_capacity)
                                    for _ in range(config.num_compute_threads)]
        self.stop_flag = threading.Event()
        self.killed = threading.Event()
        self.failed = threading.Event()
        self._replay_buffer: list[tuple[str, Item, Optional[str]]] = []
        if core is None:
            self.core = WorkerCore(config, self.gateway,
                                   self._emit_data, self._emit_feedback)
        else:
            self.core = core
            core.store = self.gateway
            core.send_data = self._emit_data
            core.send_feedback = self._emit_feedback
        self._threads: list[threading.Thread] = []

    # -- output hooks (called from compute threads) -------------------------

    def _emit_data(self, core: WorkerCore, item: Item) -> None:
        self.out_mailbox.put(("out", item, None))

    def _emit_feedback(self, core: WorkerCore, item: Item,
                       target: Optional[str]) -> None:
        self.out_mailbox.put(("outfb", item, target))

    # -- delivery entry points ----------------------------------------------

    def feed(self, item: Item, ack: Callable[[], None] = lambda: None) -> None:
        """Hand an item to the upstream thread (source or upstream link)."""
        self.mailbox.put(("item", ack, item))

    def deliver_from_link(self, link, wire: int, item: Item) -> None:
        self.mailbox.put(("item", lambda: link.ack(wire), item))

    def deliver_feedback(self, link, wire: int, item: Item) -> None:
        self.out_mailbox.put(("fb", lambda: link.ack(wire), item))

    # -- threads -------------------------------------------------------------

    def start(self) -> "ThreadedWorker":
        mk = threading.Thread
        self._threads = [
            mk(target=self._upstream_loop, name=f"{self.core.worker_id}-up",
               daemon=True),
            mk(target=self._downstream_loop, name=f"{self.core.worker_id}-down",
               daemon=True),
            mk(target=self._backup_loop, name=f"{self.core.worker_id}-bkup",
               daemon=True),
        ]
        self._threads += [
            mk(target=self._compute_loop, args=(i,),
               name=f"{self.core.worker_id}-c{i}", daemon=True)
            for i in range(len(self.partition_queues))
        ]
        for t in self._threads:
            t.start()
        for direction, item, target in self._replay_buffer:
            if direction == "out":
                self._emit_data(self.core, item)
            else:
                self._emit_feedback(self.core, item, target)
        self._replay_buffer.clear()
        return self

    def _should_run(self) -> bool:
        return not (self.stop_flag.is_set() or self.killed.is_set()
                    or self.failed.is_set())

    def _queue_targets(self, targets) -> None:
        for idx, it, d in targets:
            if d == DIR_FB:
                self.partition_fb_queues[idx].put(it)
            else:
                self.partition_queues[idx].put(it)

    def _upstream_loop(self) -> None:
        while self._should_run():
            try:
                _, ack, item = self.mailbox.get(timeout=_POLL_S)
            except (TimeoutError, RingBufferClosed):
                continue
            self._queue_targets(self.core.ingest(item, ack))

    def _compute_loop(self, idx: int) -> None:
        data_q = self.partition_queues[idx]
        fb_q = self.partition_fb_queues[idx]
        while self._should_run():
            ok, item = fb_q.try_get()
            if ok:
                self.core.apply_in_partition(idx, item, DIR_FB)
                continue
            if self.core.partitions[idx].operator.holding():
                time.sleep(_POLL_S / 4)
                continue
            try:
                item = data_q.get(timeout=_POLL_S)
            except (TimeoutError, RingBufferClosed):
                continue
            self.core.apply_in_partition(idx, item, DIR_IN)

    def _downstream_loop(self) -> None:
        while self._should_run():
            try:
                tag, payload, target = self._next_downstream()
            except (TimeoutError, RingBufferClosed):
                continue
            if tag == "out":
                self._send_out(payload)
            elif tag == "outfb":
                link = self.wiring.fb_links.get(target)
                if link is not None:
                    link.send_item(payload)
                elif target is None:
                    for l in self.wiring.fb_links.values():
                        l.send_item(payload)
            elif tag == "fb":
                item, ack = payload
                self._queue_targets(self.core.ingest(item, ack, DIR_FB))

    def _next_downstream(self):
        entry = self.out_mailbox.get(timeout=_POLL_S)
        tag = entry[0]
        if tag == "fb":
            _, ack, item = entry
            return "fb", (item, ack), None
        return entry

    def _send_out(self, item: Item) -> None:
        if not self.wiring.data_links:
            if self.wiring.sink is not None:
                self.wiring.sink(item)
            return
        if item.kind is ItemKind.PUNCTUATION:
            for link in self.wiring.data_links:
                link.send_item(item)
            return
        idx = self.wiring.route_key(item.payload) % len(self.wiring.data_links)
        self.wiring.data_links[idx].send_item(item)

    def _backup_loop(self) -> None:
        while True:
            try:
                op, key, payload = self.gateway.queue.get(timeout=_POLL_S)
            except (TimeoutError, RingBufferClosed):
                self.gateway._mark_idle_if_empty()
                if not self._should_run():
                    return
                continue
            if self.killed.is_set():
                return  # crash loses queued backups
            last_error = None
            for _ in range(self._store_retries):
                try:
                    if op == "state":
                        self.gateway.store.put_state(key, payload)
                    else:
                        self.gateway.store.put_items(key, payload)
                    last_error = None
                    break
                except ConnectionError as exc:
                    last_error = exc
                    time.sleep(_POLL_S)
            if last_error is not None:
                # Consistency over availability: halt the worker.
                self.failed.set()
                return
            self.gateway._mark_idle_if_empty()

    # -- lifecycle ------------------------------------------------------------

    def drain(self, timeout: float = 10.0) -> bool:
        """Wait until every queue is empty and backups are durable."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            busy = (len(self.mailbox) or len(self.out_mailbox)
                    or any(len(q) for q in self.partition_queues)
                    or any(len(q) for q in self.partition_fb_queues)
                    or len(self.gateway.queue))
            if not busy:
                return True
            time.sleep(_POLL_S)
        return False

    def stop(self) -> None:
        self.drain()
        self.stop_flag.set()
        for t in self._threads:
            t.join(timeout=5.0)

    def kill(self) -> None:
        """Crash: drop every queue, including not-yet-durable backups."""
        self.killed.set()
        self.core.crash()
        for t in self._threads:
            t.join(timeout=5.0)

    @classmethod
    def recover(cls, config: WorkerConfig, store, wiring: Wiring,
                previous_thresholds: ThresholdSet, **kwargs) -> "ThreadedWorker":
        """Rebuild a killed worker from the store; replay output is queued
        and flows once the threads start."""
        buffer: list[tuple[str, Item, Optional[str]]] = []
        core, _info = WorkerCore.recover(
            config, store,
            send_data=lambda c, item: buffer.append(("out", item, None)),
            send_feedback=lambda c, item, target: buffer.append(("outfb", item, target)),
            previous_thresholds=previous_thresholds,
        )
        worker = cls(config, store, wiring, core=core, **kwargs)
        worker._replay_buffer = buffer
        return worker
