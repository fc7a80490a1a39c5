"""Pixel-level AUROC and F1-optimal threshold selection.

AUROC uses the rank-statistic (Mann-Whitney U) formulation with midranks
for ties, pooling every pixel of every evaluated image - foreground and
background alike. Threshold selection sweeps candidate cut points and
returns the one maximizing pixel-level F1, breaking ties toward the larger
threshold (fewer false positives).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SingleClassError

__all__ = ["EvalResult", "pixel_auroc", "select_threshold", "midranks"]

# Below this many pooled scores the F1 sweep is exact over all distinct
# values; above it, a 256-point quantile grid bounds the work at megapixel
# scale.
EXACT_SWEEP_LIMIT = 4096


@dataclass
class EvalResult:
    p_auroc: float
    best_f1: float
    best_threshold: float
    per_image: list = field(default_factory=list)  # (image id, p_auroc or None)
    p_auroc_foreground: float | None = None

    def to_dict(self) -> dict:
        out = {
            "p_auroc": self.p_auroc,
            "best_f1": self.best_f1,
            "best_threshold": self.best_threshold,
            "per_image": [[i, a] for i, a in self.per_image],
        }
        if self.p_auroc_foreground is not None:
            out["p_auroc_foreground"] = self.p_auroc_foreground
        return out


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pixel_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve over individual pixels.

    Equivalent to the probability that a uniformly chosen positive pixel
    outscores a uniformly chosen negative one, ties counting one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.size != labels.size:
        raise ValueError(f"length mismatch: {scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC undefined: both classes must be present")
    ranks = midranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _f1_curve(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """F1 of the rule (score >= t) for each threshold, vectorized.

    Sorting once lets each threshold's TP/FP come from a suffix count.
    """
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    pos_sorted = labels[order].astype(np.int64)
    total_pos = int(pos_sorted.sum())
    # suffix sums: predictions are positive from the first index with score >= t
    cum_pos = np.concatenate([[0], np.cumsum(pos_sorted)])
    first_idx = np.searchsorted(sorted_scores, thresholds, side="left")
    tp = total_pos - cum_pos[first_idx]
    pred_pos = scores.size - first_idx
    fp = pred_pos - tp
    fn = total_pos - tp
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return f1


def select_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Threshold maximizing pixel-level F1 on the validation pool.

    Candidates are all distinct score values when the pool is small enough
    for an exact sweep, otherwise the 256 evenly spaced quantiles of the
    pooled distribution; {0, max} are always included. Ties go to the
    larger threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.size != labels.size:
        raise ValueError(f"length mismatch: {scores.size} scores vs {labels.size} labels")
    if not labels.any():
        raise SingleClassError("threshold selection needs at least one defective pixel")
    if scores.size <= EXACT_SWEEP_LIMIT:
        candidates = np.unique(scores)
    else:
        qs = np.quantile(scores, np.linspace(0.0, 1.0, 256))
        candidates = np.unique(qs)
    candidates = np.unique(np.concatenate([candidates, [0.0, scores.max()]]))
    f1s = _f1_curve(scores, labels, candidates)
    best = 0
    for i in range(1, candidates.size):
        if f1s[i] >= f1s[best]:
            best = i
    return float(candidates[best]), float(f1s[best])
