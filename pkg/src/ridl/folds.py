"""Rolling k-fold plans: subset k tests, subset k + 1 validates, the rest train."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FoldPlan:
    ids: tuple[str, ...]
    assignments: np.ndarray  # subset index per sample, aligned with ids
    n_folds: int

    def roles(self, fold: int) -> tuple[tuple[int, ...], int, int]:
        """(training subsets, validation subset, test subset) of ``fold``."""
        if not 0 <= fold < self.n_folds:
            raise IndexError(f"fold {fold} outside 0..{self.n_folds - 1}")
        val = (fold + 1) % self.n_folds
        train = tuple(s for s in range(self.n_folds) if s not in (fold, val))
        return train, val, fold

    def indices(self, fold: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sample positions (ascending) of the training, validation and test parts."""
        train, val, test = self.roles(fold)
        a = self.assignments
        return (np.flatnonzero(np.isin(a, train)), np.flatnonzero(a == val), np.flatnonzero(a == test))

    def subset(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)


def rolling_folds(ids: Sequence[str], n_folds: int = 5, seed: int = 0,
                  labels: Sequence[int] | None = None, stratify: bool = False) -> FoldPlan:
    """Shuffle by ``seed`` and split into ``n_folds`` near-equal subsets.

    With ``stratify`` the shuffled samples of each class are dealt round-robin,
    so every subset gets a near-equal share of both classes.
    """
    n = len(ids)
    if n_folds < 3:
        raise ValueError("rolling folds need at least 3 subsets (train, validation, test)")
    if n < n_folds:
        raise ValueError(f"{n} samples cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    assignments = np.empty(n, dtype=np.int64)
    if stratify:
        if labels is None or len(labels) != n:
            raise ValueError("stratified folds need one label per sample")
        labels = np.asarray(labels)
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
        assignments[order] = np.arange(n) % n_folds
    else:
        for k, chunk in enumerate(np.array_split(rng.permutation(n), n_folds)):
            assignments[chunk] = k
    return FoldPlan(tuple(ids), assignments, n_folds)
