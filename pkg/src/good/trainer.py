"""Few-shot prototype tuning against a frozen general bank.

The loop subsamples a seeded episode of shots per class, then runs plain
mini-batch SGD on the chosen objective mode. When the episode carries
patch features, each batch mines auxiliary OOD rows online: a patch whose
posterior ranks the true class below the top K becomes an extra unlabeled
sample for that batch, re-extracted under the current bank every step.

Everything downstream of the seed is deterministic: one stream drives the
episode subsample, a second drives the per-epoch shuffles, and all math
is sequential float64, so identical configs produce identical banks bit
for bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedkit import OOD_LABEL, EmbeddingSet, concat_sets, take_rows
from .losses import MODES, LossBreakdown, objective_gradient, objective_value
from .metrics import evaluate
from .prng import SplitMix64
from .scoring import PrototypeBank, load_bank, save_bank
from .theory import bound_report


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one tuning run; lam serializes as "lambda"."""

    lam: float = 0.3
    alpha: float = 0.25
    tau: float = 1.0
    top_k: int = 200
    lr: float = 0.002
    epochs: int = 50
    batch: int = 32
    shots_per_class: int = 16
    seed: int = 0
    mode: str = "kde"
    score_kind: str = "mcm"

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lambda and alpha must be nonnegative")
        if not self.tau > 0 or not self.lr > 0:
            raise ValueError("tau and lr must be positive")
        if min(self.top_k, self.epochs, self.batch, self.shots_per_class) < 1:
            raise ValueError("counts must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.score_kind not in ("mcm", "glmcm"):
            raise ValueError(f"unknown score kind {self.score_kind!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["lam"] = d.pop("lambda")
        return TrainConfig(**d)


@dataclass
class Checkpoint:
    """A tuned bank plus the per-epoch loss record that produced it."""

    bank: PrototypeBank
    epoch: int
    loss_history: list[LossBreakdown] = field(default_factory=list)
    config: TrainConfig = field(default_factory=TrainConfig)


def extract_ood_patches(local_posteriors: np.ndarray, y: int, k: int) -> np.ndarray:
    """Indices of patches whose posterior buries the true class below rank k.

    Rank is 1-based in descending posterior order with ties broken by
    class index, so rank(y) = 1 + #{j : p_j > p_y} + #{j < y : p_j = p_y}.
    A patch is extracted as auxiliary OOD iff rank(y) > k.
    """
    P = np.asarray(local_posteriors, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError("local posteriors must be (n_patches, C)")
    C = P.shape[1]
    if not 0 <= y < C:
        raise ValueError("label out of range")
    if k > C:
        raise ValueError("top_k cannot exceed the class count")
    p_y = P[:, y][:, None]
    rank = 1 + (P > p_y).sum(axis=1) + (P[:, :y] == p_y).sum(axis=1)
    return np.nonzero(rank > k)[0]


def episode_indices(labels: np.ndarray, shots_per_class: int, seed: int) -> np.ndarray:
    """Seeded few-shot subsample: first shots of each class along a random
    permutation, plus every OOD sentinel row; returned in file order.

    The selection depends on the labels only through the partition they
    induce, so relabeling classes selects the same rows.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    rng = SplitMix64(seed).spawn()
    counts: dict[int, int] = {}
    chosen = []
    for i in rng.shuffle_indices(n):
        y = int(labels[i])
        if y == OOD_LABEL:
            chosen.append(i)
        elif counts.get(y, 0) < shots_per_class:
            chosen.append(i)
            counts[y] = counts.get(y, 0) + 1
    short = {y: c for y, c in counts.items() if c < shots_per_class}
    if short:
        raise ValueError(f"not enough samples for {shots_per_class} shots: "
                         f"class counts {short}")
    return np.sort(np.array(chosen, dtype=np.int64))


def _assemble_batch(episode: EmbeddingSet, bank: PrototypeBank, idx: np.ndarray,
                    top_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch rows plus online-mined auxiliary OOD patch rows."""
    rows = [episode.globals[idx].astype(np.float64)]
    targets = [episode.labels[idx]]
    if episode.locals_ is not None:
        for i in idx:
            y = int(episode.labels[i])
            if y == OOD_LABEL:
                continue
            loc = episode.locals_[i].astype(np.float64)
            mined = extract_ood_patches(bank.posterior_matrix(loc), y, top_k)
            if mined.size:
                rows.append(loc[mined])
                targets.append(np.full(mined.size, OOD_LABEL, dtype=np.uint32))
    return np.concatenate(rows, axis=0), np.concatenate(targets)


def train(train_set: EmbeddingSet, gkm: PrototypeBank | None,
          init: PrototypeBank | None = None,
          cfg: TrainConfig = TrainConfig()) -> Checkpoint:
    """Tune a prototype bank on a few-shot episode of train_set.

    The general bank gkm stays frozen; it supplies per-sample beliefs and
    the regularization target. init supplies the starting prototypes and
    defaults to a copy of gkm. Raises if the loss or the bank goes
    non-finite (divergence guard).
    """
    if gkm is None and cfg.mode != "baseline":
        raise ValueError(f"{cfg.mode} mode needs the frozen general bank")
    if init is None:
        if gkm is None:
            raise ValueError("need an init bank when no general bank is given")
        init = gkm
    if train_set.labels is None:
        raise ValueError("training needs labels")
    if gkm is not None and (gkm.dim != init.dim or gkm.n_classes != init.n_classes):
        raise ValueError("general and init banks disagree on shape")
    if init.dim != train_set.dim or init.n_classes != train_set.n_classes:
        raise ValueError("bank shape does not match the training set")

    sel = episode_indices(train_set.labels, cfg.shots_per_class, cfg.seed)
    episode = take_rows(train_set, sel)
    if episode.locals_ is None:
        warnings.warn("no local features: no auxiliary OOD patches will be mined",
                      RuntimeWarning)

    bank = PrototypeBank(init.prototypes.copy(), cfg.tau, list(init.class_names))
    # the root's first child seeded the episode subsample; shuffles run on
    # the second so the two draws never overlap
    root = SplitMix64(cfg.seed)
    root.spawn()
    shuffle_rng = root.spawn()

    n = episode.n_samples
    history: list[LossBreakdown] = []
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.shuffle_indices(n)
        sums = np.zeros(4, dtype=np.float64)  # ce, ood, reg, total
        rows_seen = 0
        u_parts: list[np.ndarray] = []
        for start in range(0, n, cfg.batch):
            idx = perm[start:start + cfg.batch]
            rows, targets = _assemble_batch(episode, bank, idx, cfg.top_k)
            with np.errstate(over="ignore", invalid="ignore"):
                Q = gkm.posterior_matrix(rows) if gkm is not None else None
                out = objective_value(rows, bank, Q, targets, cfg.alpha, cfg.lam, cfg.mode)
                if not math.isfinite(out.total):
                    raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
                grad = objective_gradient(rows, bank, Q, targets, cfg.alpha, cfg.lam, cfg.mode)
            bank.prototypes -= cfg.lr * grad
            if not np.isfinite(bank.prototypes).all():
                raise RuntimeError(f"training diverged: non-finite bank at epoch {epoch}")
            m = rows.shape[0]
            sums += m * np.array([out.ce, out.ood_uniform, out.reg, out.total])
            rows_seen += m
            if out.per_sample_u.size:
                u_parts.append(out.per_sample_u)
        epoch_u = np.concatenate(u_parts) if u_parts else np.empty(0)
        ce, ood, reg, total = sums / rows_seen
        history.append(LossBreakdown(ce, ood, reg, total, epoch_u))
    return Checkpoint(bank, cfg.epochs, history, cfg)


def save_checkpoint(ckpt: Checkpoint, bank_path: str | Path) -> None:
    """Bank in its binary container plus a JSON training log alongside."""
    save_bank(ckpt.bank, bank_path)
    log = {
        "config": ckpt.config.to_dict(),
        "epochs": ckpt.epoch,
        "history": [
            {
                "epoch": i,
                "ce": h.ce,
                "ood_uniform": h.ood_uniform,
                "reg": h.reg,
                "total": h.total,
                "mean_u": float(h.per_sample_u.mean()) if h.per_sample_u.size else None,
            }
            for i, h in enumerate(ckpt.loss_history)
        ],
    }
    Path(str(bank_path) + ".log.json").write_text(json.dumps(log, indent=2) + "\n")


def load_checkpoint(bank_path: str | Path) -> Checkpoint:
    bank = load_bank(bank_path)
    log = json.loads(Path(str(bank_path) + ".log.json").read_text())
    history = [
        LossBreakdown(h["ce"], h["ood_uniform"], h["reg"], h["total"],
                      np.empty(0) if h["mean_u"] is None else np.array([h["mean_u"]]))
        for h in log["history"]
    ]
    return Checkpoint(bank, log["epochs"], history, TrainConfig.from_dict(log["config"]))


SWEEP_COLUMNS = ("lambda", "mode", "fpr95", "auroc", "id_accuracy", "gerror",
                 "train_term", "tv_train", "tv_test", "df", "sum_computable",
                 "final_total_loss")


def sweep(train_set: EmbeddingSet, test_id: EmbeddingSet, test_ood: EmbeddingSet,
          gkm: PrototypeBank, init: PrototypeBank | None, cfg: TrainConfig,
          lambdas: list[float], fstar_train: np.ndarray,
          fstar_test: np.ndarray) -> list[dict]:
    """One tuned bank per regularization weight, with metrics and bound terms.

    fstar_train aligns with train_set rows (the episode subset is taken
    internally) and fstar_test with test_id followed by test_ood. A run
    that raises is recorded as a row of NaNs and the sweep continues.
    """
    if len(lambdas) < 1:
        raise ValueError("sweep needs at least one lambda value")
    joint_test = concat_sets(test_id, test_ood)
    fstar_test = np.asarray(fstar_test, dtype=np.float64)
    if fstar_test.shape[0] != joint_test.n_samples:
        raise ValueError("fstar_test must cover test_id followed by test_ood")
    fstar_train = np.asarray(fstar_train, dtype=np.float64)
    if fstar_train.shape[0] != train_set.n_samples:
        raise ValueError("fstar_train must align with train_set rows")
    sel = episode_indices(train_set.labels, cfg.shots_per_class, cfg.seed)
    episode = take_rows(train_set, sel)
    fstar_episode = fstar_train[sel]

    rows = []
    for lam in lambdas:
        try:
            run_cfg = dataclasses.replace(cfg, lam=lam)
            ckpt = train(train_set, gkm, init, run_cfg)
            rep = evaluate(ckpt.bank, test_id, test_ood, cfg.score_kind)
            bound = bound_report(ckpt.bank, gkm, episode, joint_test,
                                 fstar_episode, fstar_test, lam, cfg.mode)
            rows.append({
                "lambda": lam, "mode": cfg.mode,
                "fpr95": rep.fpr95, "auroc": rep.auroc,
                "id_accuracy": rep.id_accuracy, "gerror": bound.gerror,
                "train_term": bound.train_term, "tv_train": bound.tv_train,
                "tv_test": bound.tv_test, "df": bound.df,
                "sum_computable": bound.sum_computable,
                "final_total_loss": ckpt.loss_history[-1].total,
            })
        except Exception as exc:  # noqa: BLE001 - failed runs become NaN rows
            warnings.warn(f"sweep run lambda={lam} failed: {exc}", RuntimeWarning)
            row = dict.fromkeys(SWEEP_COLUMNS, float("nan"))
            row["lambda"] = lam
            row["mode"] = cfg.mode
            rows.append(row)
    return rows


def sweep_csv(rows: list[dict]) -> str:
    """Fixed-column CSV rendering of sweep rows."""
    lines = [",".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            row[c] if isinstance(row[c], str) else repr(float(row[c]))
            for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"
