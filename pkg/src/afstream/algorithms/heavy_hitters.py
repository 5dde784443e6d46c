"""Count-min sketch heavy hitter detection with recovery compensation.

The sketch is a rows-by-width counter matrix over 2-universal multiply-shift
hashes with explicit 64-bit seeds, so runs are reproducible.  Estimates are
the minimum across rows and never undercount the true value as long as no
updates are lost.  After a failure, lost updates would break that
no-undercount property, so recovery adds a compensation offset to every
counter that covers the worst case; heavy hitters are then never missed,
at the price of a bounded bump in false positives.

Since a sketch cannot enumerate keys, detection tracks a bounded candidate
set of keys seen so far, pruned by estimate.
"""

from __future__ import annotations

import hashlib
import math
import struct
from typing import Iterable

import numpy as np

from ..primitives import DivergenceKind, FTMatrix

_MASK64 = (1 << 64) - 1
_U64X2 = struct.Struct(">QQ")

DEFAULT_CANDIDATE_CAP = 4096


def sketch_size(total_volume: float, epsilon: float, phi: float,
                delta: float) -> tuple[int, int]:
    """Rows and width needed for the standard sketch guarantee: rows =
    log2(1/delta), width = total volume / (epsilon * phi)."""
    if not (0 < delta < 1 and 0 < epsilon and phi > 0):
        raise ValueError("need 0<delta<1, epsilon>0, phi>0")
    rows = max(1, math.ceil(math.log2(1.0 / delta)))
    width = max(1, math.ceil(total_volume / (epsilon * phi)))
    return rows, width


def make_row_seeds(master_seed: int, rows: int) -> list[tuple[int, int]]:
    """Per-row multiply-shift coefficients derived from one master seed."""
    rng = np.random.Generator(np.random.PCG64(master_seed))
    seeds = []
    for _ in range(rows):
        a = int(rng.integers(1, _MASK64, dtype=np.uint64)) | 1  # odd multiplier
        b = int(rng.integers(0, _MASK64, dtype=np.uint64))
        seeds.append((a, b))
    return seeds


def _key64(key: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


class CountMinSketch:
    def __init__(self, rows: int, width: int, seeds: list[tuple[int, int]],
                 candidate_cap: int = DEFAULT_CANDIDATE_CAP) -> None:
        if len(seeds) != rows:
            raise ValueError("need one (a, b) seed pair per row")
        self.rows = rows
        self.width = width
        self.seeds = seeds
        self.counters = FTMatrix(rows, width, DivergenceKind.MAX_DIFF)
        self.candidate_cap = candidate_cap
        self.candidates: set[bytes] = set()

    def _columns(self, key: bytes) -> list[int]:
        x = _key64(key)
        return [(((a * x + b) & _MASK64) * self.width) >> 64
                for a, b in self.seeds]

    def update(self, key: bytes, value: float) -> None:
        if value < 0:
            raise ValueError("sketch updates must be nonnegative")
        for row, col in enumerate(self._columns(key)):
            self.counters.add(row, col, value)
        self.candidates.add(key)
        if len(self.candidates) > 2 * self.candidate_cap:
            self._prune_candidates()

    def _prune_candidates(self) -> None:
        ranked = sorted(self.candidates,
                        key=lambda k: (-self.estimate(k), k))
        self.candidates = set(ranked[:self.candidate_cap])

    def estimate(self, key: bytes) -> float:
        return min(self.counters.get(row, col)
                   for row, col in enumerate(self._columns(key)))

    def detect_heavy_hitters(self, phi: float) -> dict[bytes, float]:
        """Candidate keys whose estimate reaches the threshold."""
        found = {}
        for key in self.candidates:
            est = self.estimate(key)
            if est >= phi:
                found[key] = est
        return found

    def compensate(self, failure_count: int, theta_budget: float,
                   items_budget: float, alpha: float) -> float:
        """Counter the worst-case undercount after the k-th failure by
        adding budget/2^k plus items*alpha/2^k to every counter."""
        if failure_count < 1:
            raise ValueError("compensation applies from the first failure on")
        shift = (theta_budget + items_budget * alpha) / (2 ** failure_count)
        if shift:
            self.counters.add_everywhere(shift)
        return shift

    # -- merge/serialize for pipeline emission -------------------------------

    def to_bytes(self) -> bytes:
        head = struct.pack(">II", self.rows, self.width)
        body = self.counters.as_array().astype(">f8").tobytes()
        cand = b"\x00".join(sorted(self.candidates))
        return head + struct.pack(">I", len(cand)) + cand + body

    @staticmethod
    def array_from_bytes(blob: bytes) -> tuple[np.ndarray, set[bytes]]:
        rows, width = struct.unpack_from(">II", blob, 0)
        (clen,) = struct.unpack_from(">I", blob, 8)
        cand_blob = blob[12:12 + clen]
        candidates = set(cand_blob.split(b"\x00")) if cand_blob else set()
        body = blob[12 + clen:]
        arr = np.frombuffer(body, dtype=">f8").astype(np.float64)
        return arr.reshape(rows, width), candidates


def estimate_from_array(arr: np.ndarray, seeds: list[tuple[int, int]],
                        key: bytes) -> float:
    width = arr.shape[1]
    x = _key64(key)
    return float(min(arr[row][(((a * x + b) & _MASK64) * width) >> 64]
                     for row, (a, b) in enumerate(seeds)))


def detect_from_array(arr: np.ndarray, seeds: list[tuple[int, int]],
                      candidates: Iterable[bytes], phi: float) -> dict[bytes, float]:
    found = {}
    for key in candidates:
        est = estimate_from_array(arr, seeds, key)
        if est >= phi:
            found[key] = est
    return found
