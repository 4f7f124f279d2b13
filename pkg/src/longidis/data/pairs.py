"""Visit pairing and one-pair-per-subject batch construction."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import TrainingError
from .manifest import SubjectRecord, Visit


@dataclass(frozen=True)
class VisitPair:
    subject_id: str
    earlier: Visit
    later: Visit

    def __post_init__(self):
        if self.later.time <= self.earlier.time:
            raise TrainingError(
                f"subject {self.subject_id}: pair is not time-ordered "
                f"({self.earlier.time} -> {self.later.time})"
            )

    @property
    def time_gap(self) -> float:
        return self.later.time - self.earlier.time


def make_pairs(record: SubjectRecord) -> list[VisitPair]:
    """All earlier/later visit combinations of one subject: C(n, 2) pairs."""
    return [
        VisitPair(record.subject_id, a, b)
        for a, b in itertools.combinations(record.visits, 2)
    ]


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for a (seed, epoch, batch, ...) stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def make_batches(
    pairs: list[VisitPair],
    batch_size: int,
    rng: int | np.random.Generator,
) -> list[list[VisitPair]]:
    """One epoch of batches over the given pairs.

    Each subject contributes exactly one of its pairs, drawn uniformly at
    random; subjects are shuffled and chunked so subject ids never repeat
    within a batch. Deterministic for a given generator state.
    """
    if batch_size < 2:
        raise TrainingError(f"batch_size must be >= 2, got {batch_size}")
    if isinstance(rng, (int, np.integer)):
        rng = rng_for(int(rng))

    by_subject: dict[str, list[VisitPair]] = {}
    for pair in pairs:
        by_subject.setdefault(pair.subject_id, []).append(pair)
    if len(by_subject) < 2:
        raise TrainingError(
            f"need at least 2 distinct subjects with pairs, got {len(by_subject)}"
        )

    subject_ids = sorted(by_subject)
    chosen = [
        by_subject[sid][int(rng.integers(len(by_subject[sid])))] for sid in subject_ids
    ]
    order = rng.permutation(len(chosen))
    shuffled = [chosen[i] for i in order]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]
