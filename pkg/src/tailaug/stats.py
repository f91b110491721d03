"""Class-frequency analysis and head/tail partitioning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ClassRegistry, Manifest


@dataclass(frozen=True)
class ClassStats:
    counts: np.ndarray  # per-class positive counts, length K
    total_samples: int

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        arr.flags.writeable = False
        object.__setattr__(self, "counts", arr)
        if (arr < 0).any() or (arr > self.total_samples).any():
            raise ValueError("counts must lie in [0, total_samples]")


@dataclass(frozen=True)
class HeadTailPartition:
    head: frozenset[int]
    tail: frozenset[int]
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.head & self.tail:
            raise ValueError("head and tail must be disjoint")

    @property
    def K(self) -> int:
        return len(self.head) + len(self.tail)


def compute_class_stats(manifest: Manifest) -> ClassStats:
    """Count positive flags per class across the manifest."""
    if len(manifest) == 0:
        raise ValueError("cannot compute stats on an empty manifest")
    counts = np.zeros(manifest.registry.K, dtype=np.int64)
    for record in manifest:
        counts += record.labels.flags
    return ClassStats(counts=counts, total_samples=len(manifest))


def partition_head_tail(
    stats: ClassStats,
    registry: ClassRegistry,
    *,
    tail_names: Sequence[str] | None = None,
    threshold: float | None = None,
) -> HeadTailPartition:
    """Split classes into head and tail.

    Exactly one policy applies: an explicit tail-name list, or a frequency
    threshold where class i is tail iff counts[i] < threshold * max(counts).
    Ties at the threshold go to head.
    """
    if (tail_names is None) == (threshold is None):
        raise ValueError("give exactly one of tail_names or threshold")
    K = registry.K
    if stats.counts.shape[0] != K:
        raise ValueError("stats and registry disagree on class count")
    if tail_names is not None:
        tail = frozenset(registry.index(n) for n in tail_names)
        head = frozenset(range(K)) - tail
        return HeadTailPartition(head=head, tail=tail)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    cutoff = threshold * stats.counts.max()
    tail = frozenset(int(i) for i in range(K) if stats.counts[i] < cutoff)
    head = frozenset(range(K)) - tail
    warnings = ()
    if not tail:
        warnings = ("frequency policy produced an empty tail; augmentation will be a no-op",)
    return HeadTailPartition(head=head, tail=tail, warnings=warnings)


def stats_report(stats: ClassStats, registry: ClassRegistry, partition: HeadTailPartition) -> list[dict]:
    """JSON-ready rows: {class, count, fraction, group}."""
    rows = []
    for i, name in enumerate(registry.names):
        rows.append(
            {
                "class": name,
                "count": int(stats.counts[i]),
                "fraction": float(stats.counts[i] / stats.total_samples),
                "group": "tail" if i in partition.tail else "head",
            }
        )
    return rows
