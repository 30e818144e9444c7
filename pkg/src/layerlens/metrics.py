"""Detection metrics: AUROC, softmax baseline, prediction rates, quantiles.

Every detector emits a ScoreSet carrying an explicit orientation, so the
AUROC here can reorient internally and always report "probability a random
OOD sample scores more OOD-like than a random ID sample".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError

HIGHER_IS_ID = "higher_is_id"
HIGHER_IS_OOD = "higher_is_ood"
_ORIENTATIONS = (HIGHER_IS_ID, HIGHER_IS_OOD)


@dataclass
class ScoreSet:
    """Per-sample detector outputs plus the direction that means OOD.

    excluded_count tracks samples the detector had to drop (for example
    zero-norm features); they never enter AUROC.
    """

    name: str
    orientation: str
    scores: np.ndarray
    excluded_count: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.orientation not in _ORIENTATIONS:
            raise ValidationError(f"orientation must be one of {_ORIENTATIONS}, got {self.orientation!r}")
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.size and not np.all(np.isfinite(self.scores)):
            raise ValidationError(f"score set {self.name!r} contains non-finite values")
        if self.excluded_count < 0:
            raise ValidationError("excluded_count must be >= 0")

    def __len__(self) -> int:
        return self.scores.size


def subsample(score_set: ScoreSet, n: int, seed: int) -> ScoreSet:
    """Seeded subsample without replacement; no-op when already small enough."""
    if n < 1:
        raise ValidationError("subsample size must be >= 1")
    if len(score_set) <= n:
        return score_set
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(score_set), size=n, replace=False))
    return ScoreSet(
        name=score_set.name,
        orientation=score_set.orientation,
        scores=score_set.scores[idx],
        excluded_count=score_set.excluded_count,
        meta=dict(score_set.meta, subsample_seed=seed),
    )


def auroc(id_set: ScoreSet, ood_set: ScoreSet) -> float:
    """Mann-Whitney AUROC with half-credit ties.

    Returns the probability that a random OOD sample scores more OOD-like
    than a random ID sample, regardless of the sets' orientation (which
    must agree between the two).
    """
    if id_set.orientation != ood_set.orientation:
        raise ValidationError(
            f"orientation mismatch: {id_set.orientation!r} vs {ood_set.orientation!r}"
        )
    if len(id_set) == 0 or len(ood_set) == 0:
        raise ValidationError("auroc needs nonempty ID and OOD score sets")
    id_scores = id_set.scores
    ood_scores = ood_set.scores
    if id_set.orientation == HIGHER_IS_ID:
        id_scores, ood_scores = -id_scores, -ood_scores
    combined = np.concatenate([ood_scores, id_scores])
    ranks = rankdata(combined, method="average")
    n_ood = ood_scores.size
    n_id = id_scores.size
    u = ranks[:n_ood].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_ood * n_id))


def max_softmax(logits: np.ndarray) -> ScoreSet:
    """Largest softmax probability per row; higher means in-distribution."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValidationError(f"logits must be [B, K] with K >= 2, got shape {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    # max prob = exp(0) / sum(exp(shifted)); never overflows
    scores = 1.0 / np.exp(shifted).sum(axis=1)
    return ScoreSet(name="max_softmax", orientation=HIGHER_IS_ID, scores=scores)


def prediction_rates(logits: np.ndarray) -> np.ndarray:
    """Fraction of samples whose argmax lands on each class.

    Ties break toward the lowest class index, so the result is a
    deterministic function of the logits.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValidationError(f"logits must be a nonempty [B, K] matrix, got shape {logits.shape}")
    k = logits.shape[1]
    picks = np.argmax(logits, axis=1)
    counts = np.bincount(picks, minlength=k).astype(np.float64)
    return counts / logits.shape[0]


def coefficient_of_variation(rates) -> float:
    """Population std of the class rates over their mean (mean is 1/K)."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.ndim != 1 or rates.size < 2:
        raise ValidationError(f"rates must be a vector of length >= 2, got shape {rates.shape}")
    total = rates.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValidationError(f"rates must sum to 1, got {total}")
    mean = rates.mean()
    return float(rates.std() / mean)


class QuantileSummary(NamedTuple):
    median: float
    q25: float
    q75: float

    @property
    def error_bar(self) -> float:
        """Mean absolute deviation of the two quartiles from the median."""
        return 0.5 * (abs(self.median - self.q25) + abs(self.q75 - self.median))


def quantile_summary(values) -> QuantileSummary:
    """Median and quartiles with linear interpolation between order stats."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValidationError("quantile_summary needs at least one value")
    q25, med, q75 = np.quantile(values, [0.25, 0.5, 0.75], method="linear")
    return QuantileSummary(median=float(med), q25=float(q25), q75=float(q75))
