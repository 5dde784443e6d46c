"""Online logistic regression by stochastic gradient descent.

The model is a fault-tolerant hash table of parameters under Euclidean
divergence.  The learning rate decays as 1/sqrt(t) where t counts gradient
applications; features are expected L2-normalized so gradient norms stay
at or below one.  Local workers train on their slice and periodically ship
their model to a global worker, which averages and feeds the result back;
the consistency gate decides whether a local worker may keep computing on
a stale model while it waits.
"""

from __future__ import annotations

import math
import struct
from enum import Enum
from typing import Iterable, Sequence

from ..primitives import DivergenceKind, FTHashTable

_U32 = struct.Struct(">I")
_ENTRY = struct.Struct(">If")

Features = Sequence[tuple[int, float]]


class Consistency(Enum):
    ASP = "asp"
    BSP = "bsp"
    SSP = "ssp"


class Gate(Enum):
    PROCEED = "proceed"
    WAIT = "wait"


def consistency_gate(mode: Consistency, current_iteration: int,
                     last_feedback_iteration: int, staleness: int = 0) -> Gate:
    """May a local worker keep processing, given how stale its model is?"""
    if mode is Consistency.ASP:
        return Gate.PROCEED
    lag = current_iteration - last_feedback_iteration
    if mode is Consistency.BSP:
        return Gate.PROCEED if lag <= 0 else Gate.WAIT
    return Gate.PROCEED if lag <= staleness else Gate.WAIT


def feature_key(index: int) -> bytes:
    return _U32.pack(index)


def normalize(features: Features) -> list[tuple[int, float]]:
    norm = math.sqrt(sum(v * v for _, v in features))
    if norm == 0:
        return list(features)
    return [(i, v / norm) for i, v in features]


def logistic_loss(margin: float) -> float:
    """log(1 + exp(-margin)), computed stably."""
    if margin > 35:
        return math.exp(-margin)
    if margin < -35:
        return -margin
    return math.log1p(math.exp(-margin))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def logistic_gradient(features: Features, label: int,
                      score: float) -> list[tuple[int, float]]:
    """Gradient of the logistic loss at the given model score."""
    scale = -label * _sigmoid(-label * score)
    return [(i, scale * v) for i, v in features]


class SGDModel:
    """Parameter table plus step counter; one instance per local worker."""

    def __init__(self) -> None:
        self.params = FTHashTable(DivergenceKind.EUCLIDEAN)
        self.t = 0
        self.rejected = 0

    def weight(self, index: int) -> float:
        return self.params.get(feature_key(index))

    def score(self, features: Features) -> float:
        return sum(self.params.get(feature_key(i)) * v for i, v in features)

    def as_dict(self) -> dict[int, float]:
        return {_U32.unpack(k)[0]: v for k, v in self.params.as_dict().items()}

    def set_weights(self, weights: dict[int, float]) -> None:
        for index, value in weights.items():
            self.params.set(feature_key(index), value)


def sgd_step(model: SGDModel, features: Features, label: int) -> float:
    """Apply one gradient step; returns the loss at the updated model.

    The step uses eta_t = 1/sqrt(t) with t counting applied items.  Items
    producing a non-finite gradient are rejected and counted, leaving the
    model and t untouched.
    """
    score = model.score(features)
    if not math.isfinite(score):
        model.rejected += 1
        return math.nan
    t = model.t + 1
    eta = 1.0 / math.sqrt(t)
    scale = -label * _sigmoid(-label * score)
    if not math.isfinite(scale):
        model.rejected += 1
        return math.nan
    for i, v in features:
        model.params.add(feature_key(i), -eta * scale * v)
    model.t = t
    # With unit-norm features the post-update margin shifts by exactly
    # -eta * scale, saving a second dot product.
    new_margin = label * (score - eta * scale)
    return logistic_loss(new_margin)


def merge_models(models: Iterable[dict[int, float]]) -> dict[int, float]:
    """Plain average of parameter vectors, missing entries read as zero."""
    models = list(models)
    if not models:
        return {}
    keys = set()
    for m in models:
        keys.update(m)
    n = len(models)
    return {k: sum(m.get(k, 0.0) for m in models) / n for k in keys}


def l1_distance(a: dict[int, float], b: dict[int, float]) -> float:
    keys = set(a) | set(b)
    return sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


def regret_trace(losses: Sequence[float], reference_losses: Sequence[float],
                 checkpoints: int = 100) -> list[tuple[int, float]]:
    """Average regret after every checkpoint's worth of items.

    ``losses[i]`` is the loss the pipeline recorded for its i-th processed
    item; ``reference_losses[i]`` is the loss of the same item under the
    frozen reference model.  The trace reports the running mean difference.
    """
    if len(losses) != len(reference_losses):
        raise ValueError("paired loss sequences must have equal length")
    n = len(losses)
    if n == 0:
        return []
    step = max(1, n // checkpoints)
    trace = []
    running = 0.0
    for i, (lo, ref) in enumerate(zip(losses, reference_losses), start=1):
        running += lo - ref
        if i % step == 0 or i == n:
            trace.append((i, running / i))
    return trace


# -- model payload codec (punctuation and feedback items) --------------------

def encode_model(worker_idx: int, iteration: int,
                 weights: dict[int, float], t: int) -> bytes:
    parts = [struct.pack(">IIQI", worker_idx, iteration, t, len(weights))]
    for index in sorted(weights):
        parts.append(struct.pack(">Id", index, weights[index]))
    return b"".join(parts)


def decode_model(blob: bytes) -> tuple[int, int, int, dict[int, float]]:
    worker_idx, iteration, t, n = struct.unpack_from(">IIQI", blob, 0)
    offset = struct.calcsize(">IIQI")
    weights = {}
    for _ in range(n):
        index, value = struct.unpack_from(">Id", blob, offset)
        offset += struct.calcsize(">Id")
        weights[index] = value
    return worker_idx, iteration, t, weights
