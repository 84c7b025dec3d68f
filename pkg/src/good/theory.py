"""Computable terms of the generalization bound for prototype detectors.

The bound decomposes a detector's joint test error into a trainable term
(root of half the train KL), the posterior gap between the tuned bank and
its frozen reference on train and test data, and a signed train/test
discrepancy measured through a reference model. Everything here is an
expectation of per-sample divergences, so each term is a mean over rows.

The bound's additive constant (capacity and confidence terms) has no
computable form; reports expose the sum of computable terms and leave the
offset to the caller, who can only fit it jointly across runs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .embedkit import EmbeddingSet, true_target_rows
from .scoring import PrototypeBank

_CLAMP = 1e-12


def _aligned(P: np.ndarray, Q: np.ndarray, ndim: int) -> tuple[np.ndarray, np.ndarray]:
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError("distribution arrays must have matching shape")
    if P.ndim != ndim:
        raise ValueError(f"expected {ndim}-d arrays")
    return P, Q


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation between two distributions, half the L1 gap."""
    p, q = _aligned(p, q, 1)
    return float(0.5 * np.abs(p - q).sum())


def tv_dataset(F: np.ndarray, G: np.ndarray) -> float:
    """Mean per-row total variation between aligned output matrices."""
    F, G = _aligned(F, G, 2)
    if F.shape[0] == 0:
        raise ValueError("empty dataset")
    return float(0.5 * np.abs(F - G).sum(axis=1).mean())


def _kl_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    if ((Q < _CLAMP) & (P > 0)).any():
        warnings.warn("reference entries clamped to 1e-12 inside KL", RuntimeWarning)
    Qc = np.clip(Q, _CLAMP, None)
    terms = np.where(P > 0, P * (np.log(np.clip(P, _CLAMP, None)) - np.log(Qc)), 0.0)
    return terms.sum(axis=1)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p against q) in nats with 0·log 0 = 0 and q clamped at 1e-12."""
    p, q = _aligned(p, q, 1)
    return float(_kl_rows(p[None, :], q[None, :])[0])


def kl_dataset(P: np.ndarray, Q: np.ndarray) -> float:
    """Mean per-row KL between aligned output matrices."""
    P, Q = _aligned(P, Q, 2)
    if P.shape[0] == 0:
        raise ValueError("empty dataset")
    return float(_kl_rows(P, Q).mean())


def pinsker_gap(p: np.ndarray, q: np.ndarray) -> float:
    """sqrt(KL/2) - TV; nonnegative by Pinsker's inequality."""
    return float(np.sqrt(kl_divergence(p, q) / 2.0) - tv_distance(p, q))


def gerror(F: np.ndarray, targets: np.ndarray) -> float:
    """Mean TV between detector outputs and the ground-truth rows.

    Ground truth is one-hot on the label for ID rows and uniform for OOD
    rows, so this measures detection and classification jointly.
    """
    return tv_dataset(F, targets)


def df_estimate(g: PrototypeBank, train_rows: np.ndarray, test_rows: np.ndarray,
                fstar_train: np.ndarray, fstar_test: np.ndarray) -> float:
    """Signed train/test discrepancy seen through the reference model.

    TV(g, f*) on test minus TV(g, f*) on train; zero when the two splits
    are distributed identically, and the only signed term in the bound.
    """
    if fstar_train is None or fstar_test is None:
        raise ValueError("reference-model outputs are required")
    tv_tr = tv_dataset(g.posterior_matrix(train_rows), np.asarray(fstar_train, dtype=np.float64))
    tv_te = tv_dataset(g.posterior_matrix(test_rows), np.asarray(fstar_test, dtype=np.float64))
    return tv_te - tv_tr


@dataclass(frozen=True)
class BoundReport:
    """Every computable bound term for one tuned bank.

    sum_computable = train_term + tv_train + tv_test + df. All terms are
    finite and nonnegative except df, which is a signed difference.
    lambda_config and mode record which objective produced the bank.
    """

    gerror: float
    train_term: float
    tv_train: float
    tv_test: float
    df: float
    sum_computable: float
    lambda_config: float
    mode: str

    def __post_init__(self):
        vals = (self.gerror, self.train_term, self.tv_train, self.tv_test,
                self.df, self.sum_computable)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("bound terms must be finite")
        for name in ("gerror", "train_term", "tv_train", "tv_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_json_dict(self) -> dict:
        return {
            "gerror": self.gerror,
            "train_term": self.train_term,
            "tv_train": self.tv_train,
            "tv_test": self.tv_test,
            "df": self.df,
            "sum_computable": self.sum_computable,
            "lambda_config": self.lambda_config,
            "mode": self.mode,
        }


def bound_report(f: PrototypeBank, g: PrototypeBank, train: EmbeddingSet,
                 test: EmbeddingSet, fstar_train: np.ndarray, fstar_test: np.ndarray,
                 lambda_config: float = 0.0, mode: str = "kde") -> BoundReport:
    """Assemble all computable bound terms for a tuned bank f.

    train and test must carry labels (the OOD sentinel marks unlabeled
    rows); the train term is the root of half the mean KL from the
    ground-truth rows to f's train outputs, and the two TV terms compare f
    with the frozen bank g on each split separately.
    """
    if train.labels is None or test.labels is None:
        raise ValueError("bound terms need labeled splits")
    if f.dim != g.dim or f.n_classes != g.n_classes:
        raise ValueError("banks disagree on shape")
    tr_rows = train.globals.astype(np.float64)
    te_rows = test.globals.astype(np.float64)
    f_tr, f_te = f.posterior_matrix(tr_rows), f.posterior_matrix(te_rows)
    g_tr, g_te = g.posterior_matrix(tr_rows), g.posterior_matrix(te_rows)
    targets_tr = true_target_rows(train.labels, f.n_classes)
    targets_te = true_target_rows(test.labels, f.n_classes)

    train_term = float(np.sqrt(kl_dataset(targets_tr, f_tr) / 2.0))
    tv_train = tv_dataset(g_tr, f_tr)
    tv_test = tv_dataset(g_te, f_te)
    df = df_estimate(g, tr_rows, te_rows, fstar_train, fstar_test)
    err = gerror(f_te, targets_te)
    return BoundReport(err, train_term, tv_train, tv_test, df,
                       train_term + tv_train + tv_test + df, lambda_config, mode)
