"""Permutation feature importance measured inside cross-validation folds."""

from __future__ import annotations

import numpy as np

from .evaluator import DegenerateTargetError, Learner, fit_fold, score_fold, target_vector
from .tabular import Dataset, FoldPlan


def permutation_importance(d: Dataset, learner: Learner, folds: FoldPlan, repeats: int = 5,
                           seed: int = 0) -> list[tuple[str, float]]:
    """Mean held-out metric drop when one feature's test values are shuffled.

    Each fold's model is fitted once; every feature is then permuted
    ``repeats`` times among that fold's test rows. Sorted by importance,
    descending, ties by name.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    y, classes = target_vector(d)
    names = sorted(d.feature_names)
    drops = {n: [] for n in names}
    rng = np.random.default_rng(seed)
    for k in range(folds.k):
        train, test = folds.split(k)
        model = fit_fold(d, train, learner, y, classes)
        if model is None or len(test) == 0:
            continue
        try:
            base = score_fold(model, d, test, y)
        except DegenerateTargetError:
            continue
        for n in names:
            col = d[n].values[test]
            for _ in range(repeats):
                shuffled = col[rng.permutation(len(test))]
                drops[n].append(base - score_fold(model, d, test, y, {n: shuffled}))
    scores = {n: float(np.mean(v)) if v else 0.0 for n, v in drops.items()}
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
