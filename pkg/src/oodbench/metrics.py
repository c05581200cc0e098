"""Detection metrics over labeled score lists: AUROC and FPR at a TPR target.

Conventions, fixed so results are deterministic and reproducible:

- AUROC is the Mann-Whitney statistic: the mean over all (id, ood) score
  pairs of 1 if id > ood, 0.5 if equal, 0 otherwise. Implemented with
  average ranks in O(n log n); equal to the pairwise definition exactly,
  ties included.
- The FPR threshold is drawn from the observed ID scores: the largest
  value t such that at least tpr_target of the ID scores are >= t. An
  image is classified ID iff its score >= t. No interpolation.
- The ROC curve has one point per distinct score value (threshold swept
  from high to low) preceded by (0, 0); tied id/ood scores produce a
  diagonal segment, so the trapezoidal area reproduces the tie-aware AUROC.

All functions are pure and safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class LabeledScores:
    """Scores of the in-distribution and out-of-distribution populations."""

    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "id_scores", np.asarray(self.id_scores, dtype=np.float64))
        object.__setattr__(self, "ood_scores", np.asarray(self.ood_scores, dtype=np.float64))

    def validate(self) -> None:
        for name, arr in (("id_scores", self.id_scores), ("ood_scores", self.ood_scores)):
            if arr.ndim != 1 or arr.size == 0:
                raise DomainError(f"{name}: need a non-empty 1-D score list")
            if not np.isfinite(arr).all():
                raise DomainError(f"{name}: non-finite score")


@dataclass(frozen=True)
class MetricResult:
    auroc: float
    fpr95: float
    threshold95: float
    counts: tuple[int, int]  # (n_id, n_ood)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    before = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return (before + (counts + 1) / 2.0)[inverse]


def auroc(scores: LabeledScores) -> float:
    """Probability that a random ID score outranks a random OOD score (ties half)."""
    scores.validate()
    n_id = scores.id_scores.size
    n_ood = scores.ood_scores.size
    ranks = _average_ranks(np.concatenate([scores.ood_scores, scores.id_scores]))
    id_rank_sum = ranks[n_ood:].sum()
    u = id_rank_sum - n_id * (n_id + 1) / 2.0
    return float(u / (n_id * n_ood))


def fpr_at_tpr(scores: LabeledScores, tpr_target: float = 0.95) -> tuple[float, float]:
    """FPR of the OOD scores at the loosest ID threshold reaching tpr_target.

    Returns (fpr, threshold). The threshold is the largest observed ID
    score t with |{id >= t}| / n_id >= tpr_target; fpr = |{ood >= t}| / n_ood.
    """
    scores.validate()
    if not 0.0 < tpr_target <= 1.0:
        raise DomainError(f"tpr_target must be in (0, 1], got {tpr_target}")
    id_scores = scores.id_scores
    n_id = id_scores.size
    # Distinct candidate thresholds, descending; count of id >= each.
    unique_desc = np.sort(np.unique(id_scores))[::-1]
    sorted_desc = np.sort(id_scores)[::-1]
    n_ge = np.searchsorted(-sorted_desc, -unique_desc, side="right")
    tpr = n_ge / n_id
    hit = np.nonzero(tpr >= tpr_target)[0]
    threshold = float(unique_desc[hit[0]])
    fpr = float(np.count_nonzero(scores.ood_scores >= threshold) / scores.ood_scores.size)
    return fpr, threshold


def roc_curve(scores: LabeledScores) -> list[tuple[float, float]]:
    """(fpr, tpr) staircase from (0, 0) to (1, 1), one point per distinct threshold."""
    scores.validate()
    n_id = scores.id_scores.size
    n_ood = scores.ood_scores.size
    thresholds = np.sort(np.unique(np.concatenate([scores.id_scores, scores.ood_scores])))[::-1]
    id_sorted = np.sort(scores.id_scores)[::-1]
    ood_sorted = np.sort(scores.ood_scores)[::-1]
    tpr = np.searchsorted(-id_sorted, -thresholds, side="right") / n_id
    fpr = np.searchsorted(-ood_sorted, -thresholds, side="right") / n_ood
    points = [(0.0, 0.0)]
    points.extend((float(f), float(t)) for f, t in zip(fpr, tpr))
    return points


def trapezoid_area(points: list[tuple[float, float]]) -> float:
    """Area under a piecewise-linear (fpr, tpr) curve."""
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def compute_metrics(scores: LabeledScores, tpr_target: float = 0.95) -> MetricResult:
    """AUROC and FPR@tpr_target for one (ID set, OOD set) pairing."""
    fpr, threshold = fpr_at_tpr(scores, tpr_target)
    return MetricResult(
        auroc=auroc(scores),
        fpr95=fpr,
        threshold95=threshold,
        counts=(scores.id_scores.size, scores.ood_scores.size),
    )
