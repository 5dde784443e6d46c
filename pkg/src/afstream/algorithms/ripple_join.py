"""Sampled online join: Bernoulli admission, join counting, and the
confidence interval that widens when failures lose samples.

Admission is a pure function of the tuple identity and the seed, so a
reference run admits exactly the same tuples as the pipeline; lost samples
can then be counted one by one against the reference.

Two scalings for the count estimate are available.  ``paper`` divides the
sampled join count by the sampling rate once; ``two_sided`` divides by the
rate squared, which is the unbiased choice when both streams are sampled
independently.  The default is ``paper``; coverage tests run ``two_sided``.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Optional

from ..primitives import FTSet

_THRESH_SCALE = float(1 << 64)
SIDE_A = "A"
SIDE_B = "B"

ESTIMATOR_PAPER = "paper"
ESTIMATOR_TWO_SIDED = "two_sided"


def sample_admits(uid: bytes, rate: float, seed: int, side: str) -> bool:
    """Seeded Bernoulli draw, independent per tuple."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("sampling rate must lie in [0, 1]")
    if rate == 1.0:
        return True
    if rate == 0.0:
        return False
    key = struct.pack(">Q", seed) + side.encode()
    h = int.from_bytes(
        hashlib.blake2b(uid, digest_size=8, key=key).digest(), "big")
    return h < rate * _THRESH_SCALE


def member_token(side: str, join_key: bytes, uid: bytes) -> bytes:
    return side.encode() + b"\x1f" + join_key + b"\x1f" + uid


def split_token(member: bytes) -> tuple[str, bytes, bytes]:
    side, join_key, uid = member.split(b"\x1f", 2)
    return side.decode(), join_key, uid


class SampledJoinState:
    """Join-side state: one fault-tolerant set of sampled tuples plus a
    derived per-key index and running joined-pair count.

    Only the set is backed up; the index and count are rebuilt exactly from
    the set on recovery.
    """

    def __init__(self) -> None:
        self.members = FTSet()
        self._index: dict[str, dict[bytes, int]] = {SIDE_A: {}, SIDE_B: {}}
        self.joined = 0

    def add(self, side: str, join_key: bytes, uid: bytes) -> int:
        """Insert a sampled tuple; returns the number of new joined pairs."""
        token = member_token(side, join_key, uid)
        if token in self.members:
            return 0
        other = SIDE_B if side == SIDE_A else SIDE_A
        matches = self._index[other].get(join_key, 0)
        self.members.insert(token)
        bucket = self._index[side]
        bucket[join_key] = bucket.get(join_key, 0) + 1
        self.joined += matches
        return matches

    def sampled_count(self) -> int:
        return len(self.members)

    def rebuild_derived(self) -> None:
        """Recompute the index and joined count from the set contents."""
        self._index = {SIDE_A: {}, SIDE_B: {}}
        for member in self.members.members():
            side, join_key, _ = split_token(member)
            bucket = self._index[side]
            bucket[join_key] = bucket.get(join_key, 0) + 1
        self.joined = sum(
            count * self._index[SIDE_B].get(key, 0)
            for key, count in self._index[SIDE_A].items()
        )


def estimate_join_count(joined_sampled: int, rate: float,
                        estimator: str = ESTIMATOR_PAPER) -> float:
    if rate <= 0:
        raise ValueError("sampling rate must be positive to estimate")
    if estimator == ESTIMATOR_PAPER:
        return joined_sampled / rate
    if estimator == ESTIMATOR_TWO_SIDED:
        return joined_sampled / (rate * rate)
    raise ValueError(f"unknown estimator {estimator!r}")


@dataclass(frozen=True)
class IntervalResult:
    estimate: float
    half_width: Optional[float]
    effective_samples: float
    valid: bool


def confidence_interval(joined_sampled: int, n_sampled: int, rate: float,
                        z: float, estimator: str = ESTIMATOR_PAPER,
                        theta_budget: float = 0.0, items_budget: float = 0.0,
                        unacked_budget: float = 0.0, beta: float = 1.0,
                        ) -> IntervalResult:
    """Estimate plus half-width ``z / sqrt(n')`` where the effective sample
    count discounts the worst-case failure losses."""
    estimate = estimate_join_count(joined_sampled, rate, estimator)
    lost_cap = theta_budget + items_budget * beta + unacked_budget
    effective = n_sampled - lost_cap
    if effective <= 0:
        return IntervalResult(estimate, None, effective, valid=False)
    return IntervalResult(estimate, z / math.sqrt(effective), effective, True)
