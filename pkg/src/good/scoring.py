"""Prototype banks, their softmax posteriors, and confidence scores.

A bank is a (C, dim) matrix of class prototypes plus a temperature. Its
posterior for a feature x is softmax of the inner products with each
prototype divided by the temperature. Two confidence scores are built on
top: the max posterior of the global feature, and a global-plus-local
variant that adds the best patch match. An input is accepted as
in-distribution when its score clears a threshold.

Banks serialize to a small binary container ("GPTB", little-endian):

    magic   4 bytes  b"GPTB"
    version u32      1
    C       u32      class count
    dim     u32      feature dimension
    tau     f32      temperature
    rows    C*dim float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedkit import EmbeddingSet, FormatError

BANK_MAGIC = b"GPTB"
BANK_VERSION = 1

_BANK_HEADER = struct.Struct("<4sIIIf")


@dataclass
class PrototypeBank:
    """(C, dim) prototypes with a softmax temperature.

    Prototypes are held in float64; float32 is only a storage format at
    the file boundary.
    """

    prototypes: np.ndarray
    tau: float = 1.0
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        p = np.ascontiguousarray(self.prototypes, dtype=np.float64)
        self.prototypes = p
        if p.ndim != 2 or p.shape[0] < 2:
            raise ValueError("prototypes must be (C, dim) with C >= 2")
        if not np.isfinite(p).all():
            raise ValueError("prototypes contain non-finite entries")
        if not (self.tau > 0) or not np.isfinite(self.tau):
            raise ValueError("tau must be a positive finite number")
        if self.class_names and len(self.class_names) != p.shape[0]:
            raise ValueError("class_names length must match prototype count")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def logits(self, rows: np.ndarray) -> np.ndarray:
        """Temperature-scaled similarities, shape (n, C)."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape[1] != self.dim:
            raise ValueError("feature dimension does not match bank")
        return rows @ self.prototypes.T / self.tau

    def posterior_matrix(self, rows: np.ndarray) -> np.ndarray:
        """Row-wise softmax posteriors, shape (n, C)."""
        z = self.logits(rows)
        z -= z.max(axis=1, keepdims=True)  # max-shift keeps exp() in range
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def class_posteriors(self, x: np.ndarray) -> np.ndarray:
        """Posterior vector for a single feature, shape (C,)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("class_posteriors takes a single feature vector")
        return self.posterior_matrix(x[None, :])[0]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.tau, list(self.class_names))


def bank_from_means(means: np.ndarray, tau: float,
                    class_names: list[str] | None = None) -> PrototypeBank:
    """Bank whose prototypes are the given class means."""
    return PrototypeBank(np.asarray(means, dtype=np.float64).copy(), tau,
                         class_names or [])


def mcm_scores(bank: PrototypeBank, rows: np.ndarray) -> np.ndarray:
    """Max softmax posterior per row; values in [1/C, 1]."""
    return bank.posterior_matrix(rows).max(axis=1)


def mcm_score(bank: PrototypeBank, x: np.ndarray) -> float:
    return float(mcm_scores(bank, np.asarray(x, dtype=np.float64)[None, :])[0])


def glmcm_scores(bank: PrototypeBank, rows: np.ndarray, locals_: np.ndarray) -> np.ndarray:
    """Global max posterior plus the best patch max posterior, per row.

    Each patch is scored with the same softmax-over-classes the global
    feature gets; the patch term is the max over both patches and classes,
    so the total lives in (2/C, 2].
    """
    locals_ = np.asarray(locals_, dtype=np.float64)
    if locals_.ndim != 3:
        raise ValueError("locals must be (n, n_patches, dim)")
    n, P, dim = locals_.shape
    if P == 0:
        raise ValueError("global-local scoring needs at least one patch")
    g = mcm_scores(bank, rows)
    if g.shape[0] != n:
        raise ValueError("global and local sample counts disagree")
    flat = bank.posterior_matrix(locals_.reshape(n * P, dim))
    local_best = flat.max(axis=1).reshape(n, P).max(axis=1)
    return g + local_best


def glmcm_score(bank: PrototypeBank, x: np.ndarray, x_locals: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(glmcm_scores(bank, x[None, :], np.asarray(x_locals)[None, :, :])[0])


def score_set(bank: PrototypeBank, eset: EmbeddingSet, kind: str = "mcm") -> np.ndarray:
    """Confidence scores for every sample in a set."""
    if kind == "mcm":
        return mcm_scores(bank, eset.globals.astype(np.float64))
    if kind == "glmcm":
        if eset.locals_ is None:
            raise ValueError("set has no local features; global-local scoring impossible")
        return glmcm_scores(bank, eset.globals.astype(np.float64),
                            eset.locals_.astype(np.float64))
    raise ValueError(f"unknown score kind {kind!r}")


def decide(scores: np.ndarray, threshold: float) -> np.ndarray:
    """True where the score accepts the sample as in-distribution."""
    return np.asarray(scores, dtype=np.float64) >= threshold


def g_belief(gkm: PrototypeBank, rows: np.ndarray) -> np.ndarray:
    """Per-row belief that the frozen general bank recognizes the sample.

    This is just the general bank's max posterior, in [1/C, 1]: high when
    the sample looks like one of its classes, near 1/C when it is lost.
    """
    return gkm.posterior_matrix(rows).max(axis=1)


def save_bank(bank: PrototypeBank, path: str | Path) -> None:
    blob = _BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.n_classes, bank.dim,
                             bank.tau) + bank.prototypes.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(blob)


def load_bank(path: str | Path) -> PrototypeBank:
    blob = Path(path).read_bytes()
    if len(blob) < _BANK_HEADER.size:
        raise FormatError("truncated header")
    magic, version, C, dim, tau = _BANK_HEADER.unpack_from(blob)
    if magic != BANK_MAGIC:
        raise FormatError("bad magic")
    if version != BANK_VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = _BANK_HEADER.size + C * dim * 4
    if len(blob) < expected:
        raise FormatError("truncated payload")
    if len(blob) > expected:
        raise FormatError("payload size mismatch: trailing bytes disagree with header")
    rows = np.frombuffer(blob, dtype="<f4", count=C * dim,
                         offset=_BANK_HEADER.size).reshape(C, dim)
    if not np.isfinite(rows).all():
        raise FormatError("non-finite values in payload")
    try:
        return PrototypeBank(rows.astype(np.float64), float(tau))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
