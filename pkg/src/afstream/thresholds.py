"""Threshold algebra: deriving live limits from user budgets.

Users configure three budgets: ``theta`` (total state divergence the run may
lose to failures), ``l`` (total unprocessed items that may be lost), and
``gamma`` (total unacknowledged in-flight items that may be lost).  The
runtime works with smaller live thresholds derived from those budgets.  Live
values start at half the budget, scaled down for operator duplication and
pipeline position, and are halved again after every recovery so the error
series stays geometric and the accumulated loss never exceeds the budget,
no matter how many failures occur.  Window boundaries may reset or relax the
live values; decaying windows disable adaptation entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

from .core import WindowKind, WindowSpec

Number = Union[int, float]

INF = math.inf


@dataclass(frozen=True, slots=True)
class Budgets:
    """User-facing error budgets. ``inf`` disables the backing mechanism."""

    theta: float  # max state divergence lost across all failures
    l: float      # max lost unprocessed items (integer budget)
    gamma: float  # max lost unacknowledged items (integer budget)

    def __post_init__(self) -> None:
        for name in ("theta", "l", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"budget {name} must be nonnegative")

    @property
    def state_backup_enabled(self) -> bool:
        return math.isfinite(self.theta)

    @property
    def item_backup_enabled(self) -> bool:
        return math.isfinite(self.l)


@dataclass(frozen=True, slots=True)
class TopologyFactors:
    """Topology and per-algorithm analysis constants.

    ``alpha`` bounds the divergence one item can add to a state; ``beta``
    bounds how many output items one input can generate.  Both are supplied
    as configuration per algorithm, never measured.
    """

    n_copies: int = 1
    pipeline_len: int = 1
    pipeline_pos: int = 1
    beta: float = 1.0
    alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.n_copies < 1:
            raise ValueError("n_copies must be positive")
        if not 1 <= self.pipeline_pos <= self.pipeline_len:
            raise ValueError("pipeline_pos must lie in 1..pipeline_len")
        if self.beta < 1:
            raise ValueError("beta below 1 is treated as a configuration error")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    @property
    def scale(self) -> float:
        """Initialization divisor: copies times beta^(stages downstream)."""
        return self.n_copies * self.beta ** (self.pipeline_len - self.pipeline_pos)


def _floor_int(x: float) -> float:
    return x if math.isinf(x) else float(math.floor(x))


@dataclass(frozen=True, slots=True)
class ThresholdSet:
    """Live thresholds plus everything needed to adapt them."""

    theta: float
    l: float
    gamma: float
    k: int
    budgets: Budgets
    factors: TopologyFactors
    window: WindowSpec
    init_theta: float
    init_l: float
    init_gamma: float


_DEFAULT_WINDOW = WindowSpec(WindowKind.HOPPING, length=2**62)


def init_thresholds(
    budgets: Budgets,
    factors: TopologyFactors,
    window: Optional[WindowSpec] = None,
) -> ThresholdSet:
    """Derive initial live thresholds from the budgets and topology.

    Halving mode starts at budget / (2 * n * beta^(m-i)); decaying windows
    keep the full scaled budget since errors fade on their own.  Integer
    thresholds floor, so a small budget can reach zero, which degenerates to
    backing up on every item (error-free mode).
    """
    window = window or _DEFAULT_WINDOW
    divisor = factors.scale if window.kind is WindowKind.DECAYING else 2 * factors.scale
    theta = budgets.theta / divisor
    l = _floor_int(budgets.l / divisor)
    gamma = _floor_int(budgets.gamma / divisor)
    return ThresholdSet(
        theta=theta, l=l, gamma=gamma, k=0,
        budgets=budgets, factors=factors, window=window,
        init_theta=theta, init_l=l, init_gamma=gamma,
    )


def on_recovery(ts: ThresholdSet) -> ThresholdSet:
    """Halve every live threshold after a failure recovery.

    Decaying-window mode only counts the failure; values stay put.
    """
    if ts.window.kind is WindowKind.DECAYING:
        return replace(ts, k=ts.k + 1)
    return replace(
        ts,
        theta=ts.theta / 2,
        l=_floor_int(ts.l / 2),
        gamma=_floor_int(ts.gamma / 2),
        k=ts.k + 1,
    )


@dataclass(frozen=True, slots=True)
class WindowBoundary:
    """What the window tracker observed at a boundary."""

    failure_in_window: bool = False


def on_window_boundary(ts: ThresholdSet, event: WindowBoundary) -> ThresholdSet:
    """Adapt thresholds at a window boundary.

    Hopping windows reset to the initial values and forget past failures.
    Sliding windows step one halving back (doubling, capped at the initial
    values) when no failure remains inside the window.  Decaying windows
    never adapt.
    """
    kind = ts.window.kind
    if kind is WindowKind.DECAYING:
        return ts
    if kind is WindowKind.HOPPING:
        return replace(ts, theta=ts.init_theta, l=ts.init_l, gamma=ts.init_gamma, k=0)
    # Sliding.
    if event.failure_in_window or ts.k == 0:
        return ts
    return replace(
        ts,
        theta=min(ts.theta * 2, ts.init_theta),
        l=min(_floor_int(ts.l * 2), ts.init_l),
        gamma=min(_floor_int(ts.gamma * 2), ts.init_gamma),
        k=ts.k - 1,
    )


def per_thread_theta(theta: float, num_compute_threads: int) -> float:
    """Split a worker's divergence threshold across compute threads.

    The per-thread value is nudged down until the float sum over all
    threads provably stays at or below ``theta``.
    """
    if num_compute_threads < 1:
        raise ValueError("need at least one compute thread")
    if math.isinf(theta):
        return theta
    share = theta / num_compute_threads
    while share * num_compute_threads > theta:
        share = math.nextafter(share, 0.0)
    return share


def accumulated_bounds(
    budgets: Budgets, factors: TopologyFactors
) -> tuple[float, float]:
    """Worst-case accumulated loss over any number of failures.

    Returns (max state divergence, max lost output items): the halving
    schedule keeps the per-failure losses a geometric series, so the totals
    are budget + item-budget scaled by the per-item constants.
    """
    max_divergence = budgets.theta + budgets.l * factors.alpha
    max_lost_outputs = budgets.gamma + budgets.l * factors.beta
    if not math.isinf(max_lost_outputs):
        max_lost_outputs = float(math.floor(max_lost_outputs))
    return max_divergence, max_lost_outputs


def lost_sample_bound(budgets: Budgets, factors: TopologyFactors) -> float:
    """Worst-case sampled items a sampling join can lose to failures."""
    return budgets.theta + budgets.gamma + budgets.l * factors.beta
