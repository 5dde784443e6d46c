"""Deterministic in-process pipeline engine.

Runs a multi-stage worker topology cooperatively in one thread: the source
emits frames in bursts, each burst is followed by a cascade that drains
worker inboxes and compute queues to quiescence.  Determinism is total:
identical configuration and seeds produce identical states, logs, and sink
output, which is what lets the harness assert exact per-failure bounds.

Failure injection follows the stream: a kill frame rides the channels in
stream position, each targeted worker crashes the moment it reads the
frame, and the engine recovers it in place before resuming.  A crash loses
exactly what a process loss would: the worker's queued unprocessed items,
its unacknowledged in-flight output, and any state drift past the last
backup.  Items the sender still holds unacknowledged are retransmitted to
the recovered worker.
"""

from __future__ import annotations

import math
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

from ..core import Item, ItemKind, make_item
from ..primitives import DivergenceKind, keyed_divergence
from ..thresholds import Budgets, ThresholdSet, TopologyFactors, init_thresholds
from ..core import WindowSpec
from .worker import (
    DIR_FB,
    DIR_IN,
    Operator,
    WorkerConfig,
    WorkerCore,
    WorkerMetrics,
    stable_hash,
)

END_STREAM = b"\x00end-of-stream"


@dataclass
class StageSpec:
    name: str
    n_workers: int
    make_operator: Callable[[int, int], Operator]  # (worker_idx, partition_idx)
    n_compute: int = 1
    stateful: bool = True
    route_key: Optional[Callable[[bytes], bytes]] = None  # None: round-robin
    compute_key: Callable[[bytes], bytes] = staticmethod(lambda payload: payload)
    divergence_kind: Optional[DivergenceKind] = None


@dataclass
class PipelineSpec:
    stages: list[StageSpec]
    beta: float = 1.0
    alpha: float = 0.0


@dataclass(frozen=True)
class FailureSpec:
    position: int                     # source item count after which to kill
    targets: Union[str, tuple[str, ...]] = "all"


@dataclass
class FailureEvent:
    """Per-failure forensics recorded by the engine."""

    fid: int
    worker_id: str
    position: int
    live_theta: float
    live_l: float
    live_gamma: float
    k_before: int
    rollback_divergence: float = 0.0
    lost_unprocessed: int = 0
    lost_unprocessed_fb: int = 0
    inflight_dropped: int = 0
    replayed: int = 0
    recovery_s: float = 0.0


@dataclass
class RunResult:
    sink: list[Item]
    metrics: dict[str, WorkerMetrics]
    failures: list[FailureEvent]
    elapsed_s: float
    items_emitted: int
    state_dicts: dict[str, dict[int, dict]]  # worker -> partition -> state
    recovery_times: list[float] = field(default_factory=list)

    def totals(self) -> WorkerMetrics:
        total = WorkerMetrics()
        for m in self.metrics.values():
            total.merge(m)
        return total

    def state_backup_fraction(self) -> float:
        total = self.totals()
        return total.state_backups / total.processed if total.processed else 0.0

    def item_backup_fraction(self) -> float:
        total = self.totals()
        logged = total.items_logged + total.punct_logged
        return logged / total.received if total.received else 0.0

    def sink_payloads(self) -> list[bytes]:
        return [it.payload for it in self.sink]


class _KillFrame:
    __slots__ = ("fid", "targets")

    def __init__(self, fid: int, targets: Union[str, tuple[str, ...]]) -> None:
        self.fid = fid
        self.targets = targets

    def hits(self, worker_id: str) -> bool:
        return self.targets == "all" or worker_id in self.targets


class Channel:
    """One direction of a worker-to-worker (or source-to-worker) link.

    Keeps the sender-side cache of unacknowledged frames and applies the
    gamma cap: a sender with gamma unacknowledged frames forces the
    receiver to take delivery before it may send more.
    """

    __slots__ = ("engine", "sender_id", "receiver_id", "direction", "inbox",
                 "cache", "unacked", "_wire")

    def __init__(self, engine: "Engine", sender_id: str, receiver_id: str,
                 direction: str) -> None:
        self.engine = engine
        self.sender_id = sender_id
        self.receiver_id = receiver_id
        self.direction = direction
        self.inbox: deque = deque()
        self.cache: "OrderedDict[int, tuple[ItemKind, bytes, str]]" = OrderedDict()
        self.unacked = 0
        self._wire = 0

    def _gamma(self) -> float:
        sender = self.engine.workers.get(self.sender_id)
        if sender is None:
            return math.inf  # source and sink ends are reliable
        return sender.core.thresholds.gamma

    def send(self, kind: ItemKind, payload: bytes, origin: str) -> None:
        while self.unacked >= self._gamma():
            self.engine.force_receive(self.receiver_id)
        self._wire += 1
        self.cache[self._wire] = (kind, payload, origin)
        self.inbox.append((self._wire, None))
        self.unacked += 1
        self.engine.mark_dirty(self.receiver_id)

    def send_kill(self, frame: _KillFrame) -> None:
        self._wire += 1
        self.inbox.append((self._wire, frame))
        self.engine.mark_dirty(self.receiver_id)

    def read(self) -> tuple[int, Optional[_KillFrame], Optional[Item]]:
        wire, kill = self.inbox.popleft()
        if kill is not None:
            return wire, kill, None
        kind, payload, origin = self.cache[wire]
        return wire, None, make_item(kind, payload, origin)

    def mark_acked(self, wire: int) -> None:
        if self.cache.pop(wire, None) is not None:
            self.unacked -= 1

    def drop_inflight(self) -> int:
        """Sender crashed: in-flight unread frames are lost; kills survive."""
        kept = deque(entry for entry in self.inbox if entry[1] is not None)
        dropped = len(self.inbox) - len(kept)
        self.inbox = kept
        self.cache.clear()
        self.unacked = 0
        return dropped

    def requeue_unacked(self) -> None:
        """Receiver recovered: redeliver everything still cached, keeping
        surviving kill frames in their original stream positions."""
        kills = [entry for entry in self.inbox if entry[1] is not None]
        merged = [(wire, None) for wire in self.cache.keys()] + kills
        merged.sort(key=lambda entry: entry[0])
        self.inbox = deque(merged)
        if merged:
            self.engine.mark_dirty(self.receiver_id)


class SimWorker:
    __slots__ = ("core", "stage_idx", "worker_idx", "in_channels", "fb_channels",
                 "out_channels", "out_fb_channels", "forwarded_kills",
                 "handled_kills", "config")

    def __init__(self, core: WorkerCore, config: WorkerConfig,
                 stage_idx: int, worker_idx: int) -> None:
        self.core = core
        self.config = config
        self.stage_idx = stage_idx
        self.worker_idx = worker_idx
        self.in_channels: list[Channel] = []
        self.fb_channels: list[Channel] = []
        self.out_channels: list[Channel] = []
        self.out_fb_channels: dict[str, Channel] = {}
        self.forwarded_kills: set[int] = set()
        self.handled_kills: set[int] = set()


class Engine:
    def __init__(self, pipeline: PipelineSpec, budgets: Budgets,
                 window: WindowSpec, store, burst: int = 64,
                 failures: Iterable[FailureSpec] = (),
                 position_hook: Optional[Callable[[int, "Engine"], None]] = None,
                 ) -> None:
        self.pipeline = pipeline
        self.budgets = budgets
        self.window = window
        self.store = store
        self.burst = max(1, burst)
        self.failures = sorted(failures, key=lambda f: f.position)
        self.position_hook = position_hook
        self.sink: list[Item] = []
        self.failure_events: list[FailureEvent] = []
        self.workers: dict[str, SimWorker] = {}
        self.stage_ids: list[list[str]] = []
        self._dirty: deque[str] = deque()
        self._dirty_set: set[str] = set()
        self._rr_next = 0  # round-robin cursor for source routing
        self._position = 0
        self._dead_metrics = WorkerMetrics()  # accumulated from crashed cores
        self._build()

    # -- construction ------------------------------------------------------

    def _thresholds_for(self, stage_idx: int) -> ThresholdSet:
        spec = self.pipeline.stages[stage_idx]
        factors = TopologyFactors(
            n_copies=spec.n_workers,
            pipeline_len=len(self.pipeline.stages),
            pipeline_pos=stage_idx + 1,
            beta=self.pipeline.beta,
            alpha=self.pipeline.alpha,
        )
        return init_thresholds(self.budgets, factors, self.window)

    def _build(self) -> None:
        for stage_idx, spec in enumerate(self.pipeline.stages):
            ids = []
            for w in range(spec.n_workers):
                wid = f"s{stage_idx + 1}w{w}"
                config = WorkerConfig(
                    worker_id=wid,
                    operator_factory=lambda p, _w=w, _s=spec: _s.make_operator(_w, p),
                    thresholds=self._thresholds_for(stage_idx),
                    window=self.window,
                    num_compute_threads=spec.n_compute,
                    compute_key=spec.compute_key,
                )
                core = WorkerCore(config, self.store, self._send_data,
                                  self._send_feedback)
                self.workers[wid] = SimWorker(core, config, stage_idx, w)
                ids.append(wid)
            self.stage_ids.append(ids)
        # source -> stage 1
        for wid in self.stage_ids[0]:
            ch = Channel(self, "source", wid, DIR_IN)
            self.workers[wid].in_channels.append(ch)
        # stage i -> stage i+1 (data) and back (feedback)
        for stage_idx in range(len(self.stage_ids) - 1):
            for up in self.stage_ids[stage_idx]:
                for down in self.stage_ids[stage_idx + 1]:
                    fwd = Channel(self, up, down, DIR_IN)
                    self.workers[up].out_channels.append(fwd)
                    self.workers[down].in_channels.append(fwd)
                    back = Channel(self, down, up, DIR_FB)
                    self.workers[down].out_fb_channels[up] = back
                    self.workers[up].fb_channels.append(back)

    # -- routing -----------------------------------------------------------

    def _source_channels(self) -> list[Channel]:
        return [self.workers[wid].in_channels[0] for wid in self.stage_ids[0]]

    def _send_data(self, core: WorkerCore, item: Item) -> None:
        w = self.workers[core.worker_id]
        if w.stage_idx == len(self.stage_ids) - 1:
            self.sink.append(item)
            return
        next_spec = self.pipeline.stages[w.stage_idx + 1]
        channels = w.out_channels
        if item.kind is ItemKind.PUNCTUATION:
            for ch in channels:
                ch.send(item.kind, item.payload, item.origin)
            return
        if next_spec.route_key is None:
            idx = stable_hash(item.payload) % len(channels)
        else:
            idx = stable_hash(next_spec.route_key(item.payload)) % len(channels)
        channels[idx].send(item.kind, item.payload, item.origin)

    def _send_feedback(self, core: WorkerCore, item: Item,
                       target: Optional[str]) -> None:
        w = self.workers[core.worker_id]
        if not w.out_fb_channels:
            return
        if target is None:
            for ch in w.out_fb_channels.values():
                ch.send(item.kind, item.payload, item.origin)
        else:
            w.out_fb_channels[target].send(item.kind, item.payload, item.origin)

    # -- cascade machinery ---------------------------------------------------

    def mark_dirty(self, worker_id: str) -> None:
        if worker_id != "sink" and worker_id not in self._dirty_set:
            self._dirty_set.add(worker_id)
            self._dirty.append(worker_id)

    def force_receive(self, worker_id: str) -> None:
        """Gamma cap reached: the receiver takes delivery (acks) now."""
        self._receive_drain(self.workers[worker_id])
        self.mark_dirty(worker_id)

    def _receive_drain(self, w: SimWorker) -> None:
        while True:
            progress = False
            for ch in list(w.in_channels) + list(w.fb_channels):
                while ch.inbox:
                    wire, kill, item = ch.read()
                    if kill is not None:
                        if self._handle_kill(w, kill):
                            return  # worker was replaced; drain restarts later
                        continue
                    progress = True
                    current = self.workers[w.core.worker_id]
                    current.core.on_frame(
                        item, ack=lambda c=ch, n=wire: c.mark_acked(n),
                        direction=ch.direction,
                    )
            if not progress:
                return

    def _handle_kill(self, w: SimWorker, kill: _KillFrame) -> bool:
        """Forward the kill downstream, then crash if targeted.

        Returns True when this worker crashed and was replaced.
        """
        if kill.fid not in w.forwarded_kills:
            w.forwarded_kills.add(kill.fid)
            for ch in w.out_channels:
                ch.send_kill(kill)
        if kill.hits(w.core.worker_id) and kill.fid not in w.handled_kills:
            w.handled_kills.add(kill.fid)
            self._crash_and_recover(w, kill.fid)
            return True
        return False

    def _crash_and_recover(self, w: SimWorker, fid: int) -> None:
        core = w.core
        ts = core.thresholds
        pending = core.pending_counts()
        crash_states = core.state_dicts()
        event = FailureEvent(
            fid=fid,
            worker_id=core.worker_id,
            position=self._position,
            live_theta=ts.theta,
            live_l=ts.l,
            live_gamma=ts.gamma,
            k_before=ts.k,
            lost_unprocessed=pending[DIR_IN],
            lost_unprocessed_fb=pending[DIR_FB],
        )
        core.crash()
        self._dead_metrics.merge(core.metrics)
        # The crash drops in-flight output frames and wipes queued input;
        # queued input is still cached sender-side and comes back below.
        for ch in list(w.out_channels) + list(w.out_fb_channels.values()):
            event.inflight_dropped += ch.drop_inflight()
        for ch in list(w.in_channels) + list(w.fb_channels):
            ch.inbox = deque(e for e in ch.inbox if e[1] is not None)

        new_core, info = WorkerCore.recover(
            w.config, self.store, self._send_data, self._send_feedback,
            previous_thresholds=ts,
        )
        new_core.metrics.recoveries = 1
        w.core = new_core
        event.replayed = info.replayed_in + info.replayed_fb
        event.recovery_s = info.duration_s
        event.rollback_divergence = self._rollback_divergence(
            w, crash_states, info.pre_replay_states)
        self.failure_events.append(event)
        for ch in list(w.in_channels) + list(w.fb_channels):
            ch.requeue_unacked()
        self.mark_dirty(new_core.worker_id)

    def _rollback_divergence(self, w: SimWorker, crash_states: dict,
                             snapshot_states: dict) -> float:
        kind = self.pipeline.stages[w.stage_idx].divergence_kind
        if kind is None or not crash_states:
            return 0.0
        per_partition = [
            keyed_divergence(crash_states.get(idx, {}),
                             snapshot_states.get(idx, {}), kind)
            for idx in crash_states
        ]
        if not per_partition:
            return 0.0
        if kind is DivergenceKind.MAX_DIFF:
            return max(per_partition)
        if kind is DivergenceKind.EUCLIDEAN:
            return math.sqrt(sum(d * d for d in per_partition))
        return float(sum(per_partition))

    def _cascade(self) -> None:
        while self._dirty:
            wid = self._dirty.popleft()
            self._dirty_set.discard(wid)
            w = self.workers[wid]
            self._receive_drain(w)
            live = self.workers[wid]
            if not live.core.crashed:
                live.core.process_available()

    # -- main loop -----------------------------------------------------------

    def run(self, source: Iterable[tuple[ItemKind, bytes]]) -> RunResult:
        started = time.perf_counter()
        failures = deque(self.failures)
        next_fid = 1
        self._position = 0
        emitted = 0
        channels = self._source_channels()
        for kind, payload in source:
            self._position += 1
            emitted += 1
            if kind is ItemKind.PUNCTUATION:
                for ch in channels:
                    ch.send(kind, payload, "source")
            else:
                spec = self.pipeline.stages[0]
                if spec.route_key is None:
                    idx = self._rr_next % len(channels)
                    self._rr_next += 1
                else:
                    idx = stable_hash(spec.route_key(payload)) % len(channels)
                channels[idx].send(kind, payload, "source")
            while failures and failures[0].position == self._position:
                spec = failures.popleft()
                frame = _KillFrame(next_fid, spec.targets)
                next_fid += 1
                for ch in channels:
                    ch.send_kill(frame)
            if self._position % self.burst == 0:
                self._cascade()
                if self.position_hook is not None:
                    self.position_hook(self._position, self)
        # End-of-stream punctuation lets operators flush their results.
        for ch in channels:
            ch.send(ItemKind.PUNCTUATION, END_STREAM, "source")
        self._cascade()
        elapsed = time.perf_counter() - started
        metrics = {wid: w.core.metrics for wid, w in self.workers.items()}
        result = RunResult(
            sink=self.sink,
            metrics=metrics,
            failures=self.failure_events,
            elapsed_s=elapsed,
            items_emitted=emitted,
            state_dicts={wid: w.core.state_dicts()
                         for wid, w in self.workers.items()},
            recovery_times=[e.recovery_s for e in self.failure_events],
        )
        # Counters from crashed incarnations still belong to the run totals.
        if self._dead_metrics.received or self._dead_metrics.processed:
            result.metrics["(crashed)"] = self._dead_metrics
        return result
