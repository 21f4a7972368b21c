from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class FoldPlan:
    """Balanced random partition of ``range(n)`` into ``v`` validation folds."""

    v: int
    assignment: np.ndarray
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.assignment.shape[0]

    def validation(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def training(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def splits(self):
        for k in range(self.v):
            yield self.training(k), self.validation(k)


def make_folds(n: int, v: int, seed=None) -> FoldPlan:
    """Split ``n`` subjects into ``v`` folds whose sizes differ by at most one.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    if v < 2:
        raise ValidationError(f"need at least 2 folds, got {v}")
    if v > n:
        raise ValidationError(f"cannot make {v} folds from {n} subjects")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    assignment[rng.permutation(n)] = np.arange(n) % v
    assignment.setflags(write=False)
    return FoldPlan(v, assignment, seed if isinstance(seed, (int, np.integer)) else None)
