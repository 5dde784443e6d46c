"""Bounded multi-producer single-consumer ring buffer.

Producers hand over object references, never payload copies, so transfer
cost and queue occupancy are measured in handles regardless of item size.
Slots are preallocated; a full buffer applies backpressure by blocking the
producer.  Per-producer FIFO order is guaranteed: two puts from the same
thread are dequeued in put order.
"""

from __future__ import annotations

import threading
from typing import Any, Optional


class RingBufferClosed(RuntimeError):
    pass


class RingBuffer:
    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._slots: list[Any] = [None] * capacity
        self._head = 0  # next slot to read
        self._size = 0
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._not_empty = threading.Condition(self._lock)
        self._closed = False

    def put(self, item: Any, timeout: Optional[float] = None) -> None:
        with self._not_full:
            while self._size == self.capacity and not self._closed:
                if not self._not_full.wait(timeout):
                    raise TimeoutError("ring buffer full")
            if self._closed:
                raise RingBufferClosed("put on closed ring buffer")
            self._slots[(self._head + self._size) % self.capacity] = item
            self._size += 1
            self._not_empty.notify()

    def try_put(self, item: Any) -> bool:
        with self._not_full:
            if self._size == self.capacity or self._closed:
                return False
            self._slots[(self._head + self._size) % self.capacity] = item
            self._size += 1
            self._not_empty.notify()
            return True

    def get(self, timeout: Optional[float] = None) -> Any:
        with self._not_empty:
            while self._size == 0:
                if self._closed:
                    raise RingBufferClosed("get on drained, closed ring buffer")
                if not self._not_empty.wait(timeout):
                    raise TimeoutError("ring buffer empty")
            item = self._slots[self._head]
            self._slots[self._head] = None
            self._head = (self._head + 1) % self.capacity
            self._size -= 1
            self._not_full.notify()
            return item

    def try_get(self) -> tuple[bool, Any]:
        with self._not_empty:
            if self._size == 0:
                return False, None
            item = self._slots[self._head]
            self._slots[self._head] = None
            self._head = (self._head + 1) % self.capacity
            self._size -= 1
            self._not_full.notify()
            return True, item

    def close(self) -> None:
        """Wake all waiters; pending items may still be drained."""
        with self._lock:
            self._closed = True
            self._not_empty.notify_all()
            self._not_full.notify_all()

    def __len__(self) -> int:
        with self._lock:
            return self._size
