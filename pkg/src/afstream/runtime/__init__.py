"""Worker runtime: protocol core, deterministic engine, threaded workers."""

from .worker import (  # noqa: F401
    Emitter,
    Operator,
    StatelessOperator,
    WorkerConfig,
    WorkerCore,
    WorkerMetrics,
    dispatch_to_compute,
)
