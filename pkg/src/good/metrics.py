"""Detection and classification metrics with deterministic conventions.

The false-positive rate is computed with an explicit step convention
(threshold = the ceil(0.95 * n_id)-th largest ID score, no interpolation)
so that reports are byte-reproducible across implementations. AUROC is
the Mann-Whitney statistic with half credit for ties, computed two ways
(exact pair counting and rank sums) that must agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .embedkit import OOD_LABEL, EmbeddingSet
from .scoring import PrototypeBank, score_set

# above this many score pairs, pairwise counting is replaced by rank sums
_PAIRWISE_LIMIT = 1_000_000


def _check_scores(id_scores: np.ndarray, ood_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score arrays must be non-empty")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("scores must be finite")
    return a, b


def fpr_at_tpr(id_scores: np.ndarray, ood_scores: np.ndarray,
               tpr_target: float = 0.95) -> float:
    """Fraction of OOD scores at or above the threshold that keeps
    ceil(tpr_target * n_id) of the ID scores.

    Higher score means more in-distribution. Step convention, no
    interpolation: the threshold is an actual ID score.
    """
    id_s, ood_s = _check_scores(id_scores, ood_scores)
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError("tpr_target must be in (0, 1]")
    k = math.ceil(tpr_target * id_s.size)
    t = np.sort(id_s)[::-1][k - 1]  # k-th largest
    return float((ood_s >= t).mean())


def auroc_pairwise(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Exact pair counting: wins plus half the ties over all pairs."""
    id_s, ood_s = _check_scores(id_scores, ood_scores)
    diff = id_s[:, None] - ood_s[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (id_s.size * ood_s.size))


def auroc_rank(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Rank-sum form of the same statistic; average ranks encode tie credit."""
    id_s, ood_s = _check_scores(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([id_s, ood_s]), method="average")
    u = ranks[:id_s.size].sum() - id_s.size * (id_s.size + 1) / 2.0
    return float(u / (id_s.size * ood_s.size))


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Probability that a random ID sample outscores a random OOD sample,
    ties counted half."""
    id_s, ood_s = _check_scores(id_scores, ood_scores)
    if id_s.size * ood_s.size <= _PAIRWISE_LIMIT:
        return auroc_pairwise(id_s, ood_s)
    return auroc_rank(id_s, ood_s)


def id_accuracy(posteriors: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax class (lowest index on ties) is the label."""
    P = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(labels)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("posteriors must be a non-empty (n, C) array")
    if labels.shape != (P.shape[0],):
        raise ValueError("labels length must match posterior rows")
    if (labels == OOD_LABEL).any():
        raise ValueError("accuracy is defined on labeled ID samples only")
    pred = P.argmax(axis=1)  # argmax takes the lowest index on ties
    return float((pred == labels.astype(np.int64)).mean())


@dataclass(frozen=True)
class EvalReport:
    """One detector evaluation: detection rates plus ID classification."""

    fpr95: float
    auroc: float
    id_accuracy: float
    score_kind: str
    n_id: int
    n_ood: int

    def __post_init__(self):
        for name in ("fpr95", "auroc", "id_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.n_id <= 0 or self.n_ood <= 0:
            raise ValueError("sample counts must be positive")

    def to_json_dict(self) -> dict:
        return {
            "fpr95": self.fpr95,
            "auroc": self.auroc,
            "id_accuracy": self.id_accuracy,
            "score_kind": self.score_kind,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
        }


def evaluate(bank: PrototypeBank, test_id: EmbeddingSet, test_ood: EmbeddingSet,
             score_kind: str = "mcm") -> EvalReport:
    """Score both test splits with one bank and assemble the report."""
    if test_id.labels is None:
        raise ValueError("ID test split must carry labels")
    if (test_id.labels == OOD_LABEL).any():
        raise ValueError("ID test split contains OOD sentinel rows")
    id_scores = score_set(bank, test_id, score_kind)
    ood_scores = score_set(bank, test_ood, score_kind)
    acc = id_accuracy(bank.posterior_matrix(test_id.globals.astype(np.float64)),
                      test_id.labels)
    return EvalReport(
        fpr95=fpr_at_tpr(id_scores, ood_scores, 0.95),
        auroc=auroc(id_scores, ood_scores),
        id_accuracy=acc,
        score_kind=score_kind,
        n_id=test_id.n_samples,
        n_ood=test_ood.n_samples,
    )
