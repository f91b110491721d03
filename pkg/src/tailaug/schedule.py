"""Progressive inclusion schedule: augmented data ramps in as 1 - e^(-beta * epoch)."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import Manifest, SampleRecord, philox_generator


@dataclass(frozen=True)
class ProgressiveSchedule:
    """Epoch-indexed inclusion rule for the augmented set.

    beta controls how fast augmented records enter training; the ordering
    seed fixes a one-time shuffle so inclusion grows as a stable prefix.
    """

    beta: float
    total_augmented: int
    ordering_seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.total_augmented < 0:
            raise ValueError("total_augmented must be >= 0")


def inclusion_fraction(epoch: int, beta: float) -> float:
    """Fraction of the augmented set included at this epoch: 1 - e^(-beta*epoch)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    return 1.0 - math.exp(-beta * epoch)


def included_count(epoch: int, schedule: ProgressiveSchedule) -> int:
    """floor(total * fraction), clamped to [0, total]."""
    frac = inclusion_fraction(epoch, schedule.beta)
    count = int(math.floor(schedule.total_augmented * frac))
    return max(0, min(count, schedule.total_augmented))


@dataclass(frozen=True)
class EpochView:
    """One epoch's training set: all originals plus a prefix of the shuffled augment set."""

    records: tuple[SampleRecord, ...]
    n_original: int
    n_augmented: int

    def __len__(self) -> int:
        return len(self.records)


def _shuffled_indices(n: int, ordering_seed: int) -> tuple[int, ...]:
    gen = philox_generator(ordering_seed, "augment-order")
    return tuple(int(i) for i in gen.permutation(n))


def build_epoch_dataset(
    d_o: Manifest, d_i: Manifest, epoch: int, sched: ProgressiveSchedule
) -> EpochView:
    """All of d_o plus the first included_count(epoch) records of the shuffled d_i.

    The prefix grows monotonically with the epoch, so every epoch's augmented
    subset contains the previous epoch's.
    """
    if sched.total_augmented != len(d_i):
        raise ValueError(f"schedule says {sched.total_augmented} augmented records, manifest has {len(d_i)}")
    order = _shuffled_indices(len(d_i), sched.ordering_seed)
    n_inc = included_count(epoch, sched)
    included = tuple(d_i.records[i] for i in order[:n_inc])
    seen = {r.id for r in d_o.records}
    for r in included:
        if r.id in seen:
            raise ValueError(f"augmented record id collides with original set: {r.id!r}")
        seen.add(r.id)
    return EpochView(records=d_o.records + included, n_original=len(d_o), n_augmented=n_inc)
