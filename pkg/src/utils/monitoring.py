"""Operation counters for cross-checking the analytical FLOPs model."""

import time
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterator, List, Optional

from .logging import setup_logger

logger = setup_logger(__name__)


@dataclass
class OpMetric:
    """Represents a single instrumented kernel execution."""
    op: str
    macs: int
    duration: float = 0.0
    timestamp: datetime = field(default_factory=datetime.now)


class MetricsCollector:
    """Collects multiply-accumulate counts from instrumented kernels."""

    def __init__(self):
        self.op_metrics: List[OpMetric] = []
        self.error_counts: Dict[str, int] = {}

    def track_op(self, op: str, macs: int, duration: float = 0.0):
        """
        Track one kernel execution.

        Args:
            op (str): Kernel name, e.g. "conv2d"
            macs (int): Multiply-accumulate pairs executed
            duration (float): Wall time in seconds
        """
        self.op_metrics.append(OpMetric(op=op, macs=int(macs), duration=duration))
        logger.debug(f"Op metric recorded: {op} - {macs} MACs - {duration:.6f}s")

    def track_error(self, error_type: str):
        """
        Track error occurrences by type.

        Args:
            error_type (str): Type of error encountered
        """
        self.error_counts[error_type] = self.error_counts.get(error_type, 0) + 1
        logger.warning(f"Error tracked: {error_type} (count: {self.error_counts[error_type]})")

    def total_macs(self, op: Optional[str] = None) -> int:
        """Total MACs recorded, optionally restricted to one op name."""
        return sum(m.macs for m in self.op_metrics if op is None or m.op == op)

    def get_summary(self) -> Dict[str, Dict[str, float]]:
        """
        Summarize recorded metrics per op.

        Returns:
            Dict[str, Dict[str, float]]: calls, MACs and total seconds per op
        """
        summary: Dict[str, Dict[str, float]] = {}
        for metric in self.op_metrics:
            entry = summary.setdefault(metric.op, {"calls": 0, "macs": 0, "seconds": 0.0})
            entry["calls"] += 1
            entry["macs"] += metric.macs
            entry["seconds"] += metric.duration
        return summary


_active: ContextVar[Optional[MetricsCollector]] = ContextVar("active_collector", default=None)


@contextmanager
def collecting(collector: Optional[MetricsCollector] = None) -> Iterator[MetricsCollector]:
    """Activate a collector for kernels executed in the current context."""
    collector = collector or MetricsCollector()
    token = _active.set(collector)
    try:
        yield collector
    finally:
        _active.reset(token)


@contextmanager
def timed_op(op: str, macs: int) -> Iterator[None]:
    """Record ``macs`` for ``op`` into the active collector, if any."""
    collector = _active.get()
    if collector is None:
        yield
        return
    start = time.perf_counter()
    try:
        yield
    finally:
        collector.track_op(op, macs, time.perf_counter() - start)
