"""Training objectives and their analytic gradients.

The per-sample train term is plain cross-entropy for labeled rows and a
scaled cross-entropy-to-uniform for auxiliary OOD rows (the sentinel
label). The regularization term pulls the tuned bank's posterior toward
the frozen general bank's posterior with a per-class L1 penalty. Three
batch objectives are supported:

    baseline   mean_i  train_i
    reg        mean_i  train_i + lambda * reg_i
    kde        mean_i  (1 - u_i) * train_i + lambda * u_i * reg_i

where u_i is the general bank's belief (its max posterior) for sample i:
a sample the general bank already recognizes mostly regularizes, an
unfamiliar one mostly trains. u is a readout of a frozen model, so no
gradient flows through it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .embedkit import OOD_LABEL
from .scoring import PrototypeBank

_CLAMP = 1e-12

MODES = ("baseline", "reg", "kde")


def _safe_log(P: np.ndarray) -> np.ndarray:
    if (P < _CLAMP).any():
        warnings.warn("posterior entries clamped to 1e-12 before log", RuntimeWarning)
    return np.log(np.clip(P, _CLAMP, None))


def _id_mask(labels: np.ndarray) -> np.ndarray:
    return np.asarray(labels) != OOD_LABEL


# ------------------------------------------------------------- scalar forms

def ce_loss(p: np.ndarray, y: int) -> float:
    """-log p_y for one posterior row."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < p.shape[0]:
        raise ValueError("label out of range")
    return float(-_safe_log(p[None, :])[0, y])


def uniform_ood_loss(p: np.ndarray) -> float:
    """Cross-entropy to uniform, -(1/C) sum_j log p_j; minimum ln C at uniform."""
    p = np.asarray(p, dtype=np.float64)
    return float(-_safe_log(p[None, :]).mean())


def reg_loss(p: np.ndarray, q_gkm: np.ndarray) -> float:
    """Mean absolute posterior gap (1/C) sum_j |p_j - q_j|.

    Equals (2/C) times the total-variation distance between the rows.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q_gkm, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("posterior rows must have matching length")
    return float(np.abs(p - q).sum() / p.shape[0])


def train_loss(p: np.ndarray, target: int, alpha: float) -> float:
    """Per-sample train term: CE for a labeled row, alpha * uniform-CE for OOD."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if target == OOD_LABEL:
        return alpha * uniform_ood_loss(p)
    return ce_loss(p, int(target))


# -------------------------------------------------------------- batch forms

def ce_rows(P: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row -log p_y; OOD sentinel rows get 0."""
    P = np.asarray(P, dtype=np.float64)
    logp = _safe_log(P)
    labels = np.asarray(labels)
    mask = _id_mask(labels)
    out = np.zeros(P.shape[0], dtype=np.float64)
    idx = np.nonzero(mask)[0]
    out[idx] = -logp[idx, labels[mask].astype(np.int64)]
    return out


def uniform_ce_rows(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    return -_safe_log(P).mean(axis=1)


def reg_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError("posterior matrices must have matching shape")
    return np.abs(P - Q).sum(axis=1) / P.shape[1]


def train_rows(P: np.ndarray, labels: np.ndarray, alpha: float) -> np.ndarray:
    mask = _id_mask(labels)
    out = ce_rows(P, labels)
    if (~mask).any():
        out[~mask] = alpha * uniform_ce_rows(np.asarray(P, dtype=np.float64)[~mask])
    return out


def kde_combine(train_terms: np.ndarray, reg_terms: np.ndarray,
                u: np.ndarray, lam: float) -> np.ndarray:
    """Per-sample blend (1-u)*train + lambda*u*reg; affine in each u_i."""
    u = np.asarray(u, dtype=np.float64)
    return (1.0 - u) * np.asarray(train_terms, dtype=np.float64) \
        + lam * u * np.asarray(reg_terms, dtype=np.float64)


# ---------------------------------------------------------------- objective

@dataclass(frozen=True)
class LossBreakdown:
    """Objective value split into the components that enter the total.

    ce / ood_uniform / reg are batch-mean contributions, carrying any
    per-sample belief weights of the mode, so the mode identity holds
    exactly: baseline total == ce + alpha*ood_uniform, reg and kde totals
    == ce + alpha*ood_uniform + lam*reg. per_sample_u is empty when no
    general-bank posteriors were supplied.
    """

    ce: float
    ood_uniform: float
    reg: float
    total: float
    per_sample_u: np.ndarray


def kde_objective(P: np.ndarray, Q: np.ndarray | None, targets: np.ndarray,
                  alpha: float, lam: float, mode: str = "kde") -> LossBreakdown:
    """Batch objective over posterior rows P with general-bank rows Q."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if alpha < 0 or lam < 0:
        raise ValueError("alpha and lambda must be nonnegative")
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    if n == 0:
        raise ValueError("objective needs at least one row")
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ValueError("targets length must match batch size")
    mask = _id_mask(targets)
    ce_r = ce_rows(P, targets)
    ood_r = np.zeros(n, dtype=np.float64)
    if (~mask).any():
        ood_r[~mask] = uniform_ce_rows(P[~mask])

    if Q is not None:
        Q = np.asarray(Q, dtype=np.float64)
        u = Q.max(axis=1)
        reg_r = reg_rows(P, Q)
    else:
        u = np.empty(0, dtype=np.float64)
        reg_r = None

    if mode == "baseline":
        ce = float(ce_r.sum() / n)
        ood = float(ood_r.sum() / n)
        reg = float(reg_r.sum() / n) if reg_r is not None else 0.0
        return LossBreakdown(ce, ood, reg, ce + alpha * ood, u)

    if reg_r is None:
        raise ValueError(f"{mode} mode needs the general bank's posterior rows")

    if mode == "reg":
        ce = float(ce_r.sum() / n)
        ood = float(ood_r.sum() / n)
        reg = float(reg_r.sum() / n)
        return LossBreakdown(ce, ood, reg, ce + alpha * ood + lam * reg, u)

    w = 1.0 - u
    ce = float((w * ce_r).sum() / n)
    ood = float((w * ood_r).sum() / n)
    reg = float((u * reg_r).sum() / n)
    return LossBreakdown(ce, ood, reg, ce + alpha * ood + lam * reg, u)


def objective_value(rows: np.ndarray, bank: PrototypeBank, Q: np.ndarray | None,
                    targets: np.ndarray, alpha: float, lam: float,
                    mode: str = "kde") -> LossBreakdown:
    """Batch objective of a bank evaluated on raw feature rows."""
    return kde_objective(bank.posterior_matrix(rows), Q, targets, alpha, lam, mode)


def objective_gradient(rows: np.ndarray, bank: PrototypeBank, Q: np.ndarray | None,
                       targets: np.ndarray, alpha: float, lam: float,
                       mode: str = "kde") -> np.ndarray:
    """d total / d prototypes, shape (C, dim).

    Every per-row term differentiates through the softmax into a
    coefficient row times the feature:

        cross-entropy      p - onehot(y)
        uniform target     p - 1/C
        L1 regularizer     (s*p - p <s,p>) / C,  s = sign(p - q)

    so the gradient is coeff^T @ rows / (tau * n). The L1 subgradient
    uses sign(0) = 0 at ties, and u enters only as a constant weight.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rows = np.asarray(rows, dtype=np.float64)
    targets = np.asarray(targets)
    n, C = rows.shape[0], bank.n_classes
    if n == 0:
        raise ValueError("gradient needs at least one row")
    P = bank.posterior_matrix(rows)
    mask = _id_mask(targets)

    coeff = np.empty((n, C), dtype=np.float64)
    n_id = int(mask.sum())
    onehot = np.zeros((n_id, C), dtype=np.float64)
    onehot[np.arange(n_id), targets[mask].astype(np.int64)] = 1.0
    coeff[mask] = P[mask] - onehot
    coeff[~mask] = alpha * (P[~mask] - 1.0 / C)

    if mode != "baseline":
        if Q is None:
            raise ValueError(f"{mode} mode needs the general bank's posterior rows")
        Q = np.asarray(Q, dtype=np.float64)
        s = np.sign(P - Q)
        sp = (s * P).sum(axis=1, keepdims=True)
        reg_coeff = (lam / C) * (s * P - P * sp)
        if mode == "kde":
            u = Q.max(axis=1)
            coeff *= (1.0 - u)[:, None]
            coeff += u[:, None] * reg_coeff
        else:
            coeff += reg_coeff

    return coeff.T @ rows / (bank.tau * n)
