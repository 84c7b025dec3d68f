"""Direct-log oracles, mode algebra, and finite-difference gradient checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from good.embedkit import OOD_LABEL
from good.losses import (
    LossBreakdown,
    ce_loss,
    ce_rows,
    kde_combine,
    kde_objective,
    objective_gradient,
    objective_value,
    reg_loss,
    reg_rows,
    train_loss,
    train_rows,
    uniform_ce_rows,
    uniform_ood_loss,
)
from good.scoring import PrototypeBank


def simplex_rows(rng, n, C):
    raw = rng.gamma(1.0, size=(n, C))
    return raw / raw.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------ scalars

def test_ce_oracles():
    assert ce_loss(np.array([0.0, 1.0, 0.0]), 1) == 0.0
    assert abs(ce_loss(np.full(10, 0.1), 3) - math.log(10)) < 1e-12
    assert abs(ce_loss(np.array([0.5, 0.5]), 0) - math.log(2)) < 1e-12


def test_ce_clamps_zero_probability():
    with pytest.warns(RuntimeWarning, match="clamped"):
        v = ce_loss(np.array([0.0, 1.0]), 0)
    assert abs(v - (-math.log(1e-12))) < 1e-9


def test_ce_label_range():
    with pytest.raises(ValueError, match="out of range"):
        ce_loss(np.array([0.5, 0.5]), 2)


def test_uniform_ood_oracles():
    assert abs(uniform_ood_loss(np.full(5, 0.2)) - math.log(5)) < 1e-12
    assert abs(uniform_ood_loss(np.array([0.5, 0.5])) - math.log(2)) < 1e-12
    v = uniform_ood_loss(np.array([0.9, 0.1]))
    assert abs(v - (-0.5 * (math.log(0.9) + math.log(0.1)))) < 1e-12
    assert abs(v - 1.2040) < 1e-4


@given(st.integers(min_value=0, max_value=2**31), st.integers(min_value=2, max_value=8))
@settings(max_examples=100)
def test_uniform_ood_minimized_at_uniform(seed, C):
    p = simplex_rows(np.random.default_rng(seed), 1, C)[0]
    assert uniform_ood_loss(p) >= math.log(C) - 1e-9


def test_reg_oracles():
    assert reg_loss(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0
    assert abs(reg_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])) - 1.0) < 1e-12
    assert abs(reg_loss(np.array([0.6, 0.4]), np.array([0.4, 0.6])) - 0.2) < 1e-12
    with pytest.raises(ValueError, match="matching"):
        reg_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))


def test_train_loss_dispatch():
    p = np.full(10, 0.1)
    assert train_loss(np.eye(10)[4], 4, 0.25) == 0.0
    assert train_loss(p, OOD_LABEL, 0.0) == 0.0
    assert abs(train_loss(p, OOD_LABEL, 0.25) - 0.25 * math.log(10)) < 1e-12
    with pytest.raises(ValueError, match="nonnegative"):
        train_loss(p, 0, -1.0)


# -------------------------------------------------------------- batch forms

def test_rows_match_scalars():
    rng = np.random.default_rng(0)
    P = simplex_rows(rng, 6, 4)
    labels = np.array([0, 1, OOD_LABEL, 3, OOD_LABEL, 2], dtype=np.uint32)
    Q = simplex_rows(rng, 6, 4)
    ce = ce_rows(P, labels)
    tr = train_rows(P, labels, 0.25)
    rr = reg_rows(P, Q)
    for i, y in enumerate(labels):
        if y != OOD_LABEL:
            assert abs(ce[i] - ce_loss(P[i], int(y))) < 1e-15
        else:
            assert ce[i] == 0.0
        assert abs(tr[i] - train_loss(P[i], int(y), 0.25)) < 1e-15
        assert abs(rr[i] - reg_loss(P[i], Q[i])) < 1e-15
    assert np.allclose(uniform_ce_rows(P), [uniform_ood_loss(p) for p in P])


def test_reg_equals_scaled_tv():
    from good.theory import tv_distance
    rng = np.random.default_rng(1)
    for C in (2, 3, 7):
        p, q = simplex_rows(rng, 1, C)[0], simplex_rows(rng, 1, C)[0]
        assert abs(reg_loss(p, q) - (2.0 / C) * tv_distance(p, q)) < 1e-12


def test_losses_are_permutation_equivariant():
    rng = np.random.default_rng(2)
    C = 5
    P = simplex_rows(rng, 4, C)
    Q = simplex_rows(rng, 4, C)
    labels = np.array([0, 3, OOD_LABEL, 2], dtype=np.uint32)
    perm = rng.permutation(C)
    relabeled = labels.copy()
    inv = np.argsort(perm)
    for i, y in enumerate(labels):
        if y != OOD_LABEL:
            relabeled[i] = inv[y]
    a = kde_objective(P, Q, labels, 0.25, 0.3, "kde")
    b = kde_objective(P[:, perm], Q[:, perm], relabeled, 0.25, 0.3, "kde")
    assert abs(a.total - b.total) < 1e-12
    assert abs(a.reg - b.reg) < 1e-12


# ---------------------------------------------------------------- objective

def test_mode_identities():
    rng = np.random.default_rng(3)
    P = simplex_rows(rng, 8, 5)
    Q = simplex_rows(rng, 8, 5)
    labels = np.array([0, 1, 2, OOD_LABEL, 4, OOD_LABEL, 1, 3], dtype=np.uint32)
    alpha, lam = 0.25, 0.3
    base = kde_objective(P, Q, labels, alpha, lam, "baseline")
    regm = kde_objective(P, Q, labels, alpha, lam, "reg")
    kde = kde_objective(P, Q, labels, alpha, lam, "kde")
    assert abs(base.total - (base.ce + alpha * base.ood_uniform)) < 1e-9
    assert abs(regm.total - (regm.ce + alpha * regm.ood_uniform + lam * regm.reg)) < 1e-9
    assert abs(kde.total - (kde.ce + alpha * kde.ood_uniform + lam * kde.reg)) < 1e-9
    # reg with lambda=0 collapses to baseline
    assert abs(kde_objective(P, Q, labels, alpha, 0.0, "reg").total - base.total) < 1e-12
    # u bounds
    assert (kde.per_sample_u >= 1.0 / 5 - 1e-12).all() and (kde.per_sample_u <= 1.0).all()


def test_kde_u_endpoints():
    rng = np.random.default_rng(4)
    P = simplex_rows(rng, 6, 4)
    labels = np.array([0, 1, 2, 3, OOD_LABEL, OOD_LABEL], dtype=np.uint32)
    # one-hot general posteriors make u = 1 everywhere: train part weighted out
    Q_onehot = np.eye(4)[rng.integers(0, 4, size=6)]
    kde = kde_objective(P, Q_onehot, labels, 0.25, 0.3, "kde")
    assert abs(kde.ce) < 1e-15 and abs(kde.ood_uniform) < 1e-15
    expect = 0.3 * reg_rows(P, Q_onehot).mean()
    assert abs(kde.total - expect) < 1e-12
    # hypothetical u = 0 reduces to the baseline total
    t = train_rows(P, labels, 0.25)
    r = reg_rows(P, Q_onehot)
    assert abs(kde_combine(t, r, np.zeros(6), 0.3).mean()
               - kde_objective(P, None, labels, 0.25, 0.3, "baseline").total) < 1e-12


def test_kde_combine_swap_identity():
    rng = np.random.default_rng(5)
    t, r, u = rng.gamma(1, size=10), rng.gamma(1, size=10), rng.uniform(size=10)
    a = kde_combine(t, r, u, 1.0)
    b = kde_combine(r, t, 1.0 - u, 1.0)
    assert np.allclose(a, b, atol=1e-12)


def test_objective_requires_gkm_outside_baseline():
    P = simplex_rows(np.random.default_rng(6), 3, 4)
    labels = np.zeros(3, dtype=np.uint32)
    for mode in ("reg", "kde"):
        with pytest.raises(ValueError, match="general bank"):
            kde_objective(P, None, labels, 0.25, 0.3, mode)
    # baseline tolerates a missing general bank and reports no beliefs
    out = kde_objective(P, None, labels, 0.25, 0.3, "baseline")
    assert out.reg == 0.0 and out.per_sample_u.size == 0


def test_objective_rejects_bad_args():
    P = simplex_rows(np.random.default_rng(7), 3, 4)
    labels = np.zeros(3, dtype=np.uint32)
    with pytest.raises(ValueError, match="unknown mode"):
        kde_objective(P, None, labels, 0.25, 0.3, "kda")
    with pytest.raises(ValueError, match="length"):
        kde_objective(P, None, np.zeros(2, dtype=np.uint32), 0.25, 0.3, "baseline")
    with pytest.raises(ValueError, match="at least one row"):
        kde_objective(P[:0], None, labels[:0], 0.25, 0.3, "baseline")


# ----------------------------------------------------------------- gradient

def numeric_gradient(rows, bank, Q, targets, alpha, lam, mode, step=1e-5):
    g = np.zeros_like(bank.prototypes)
    for c in range(bank.n_classes):
        for d in range(bank.dim):
            plus = bank.copy()
            plus.prototypes[c, d] += step
            minus = bank.copy()
            minus.prototypes[c, d] -= step
            fp = objective_value(rows, plus, Q, targets, alpha, lam, mode).total
            fm = objective_value(rows, minus, Q, targets, alpha, lam, mode).total
            g[c, d] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def test_gradient_zero_at_onehot_fit():
    # a bank with enormous correct logits has p == onehot so CE gradient is 0
    protos = 200.0 * np.eye(3)
    bank = PrototypeBank(protos, tau=1.0)
    rows = np.eye(3)
    targets = np.array([0, 1, 2], dtype=np.uint32)
    g = objective_gradient(rows, bank, None, targets, 0.25, 0.3, "baseline")
    assert np.abs(g).max() < 1e-12


def test_gradient_zero_for_uniform_ood():
    bank = PrototypeBank(np.zeros((4, 5)), tau=1.0)  # all-equal logits -> uniform p
    rows = np.random.default_rng(8).normal(size=(3, 5))
    targets = np.full(3, OOD_LABEL, dtype=np.uint32)
    g = objective_gradient(rows, bank, None, targets, 0.25, 0.3, "baseline")
    assert np.abs(g).max() < 1e-12


@pytest.mark.parametrize("mode", ["baseline", "reg", "kde"])
def test_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(9)
    C, dim, n = 6, 8, 4
    for trial in range(20):
        bank = PrototypeBank(rng.normal(size=(C, dim)), tau=1.0 + rng.uniform())
        gkm = PrototypeBank(rng.normal(size=(C, dim)), tau=1.0)
        rows = rng.normal(size=(n, dim))
        targets = rng.integers(0, C, size=n).astype(np.uint32)
        targets[rng.integers(0, n)] = OOD_LABEL
        Q = gkm.posterior_matrix(rows)
        analytic = objective_gradient(rows, bank, Q, targets, 0.25, 0.3, mode)
        numeric = numeric_gradient(rows, bank, Q, targets, 0.25, 0.3, mode)
        assert rel_err(analytic, numeric).max() <= 1e-4
        assert np.isfinite(analytic).all()


def test_gradient_many_seeds_all_modes():
    # wide but shallow: one config per seed, every mode
    for seed in range(100):
        rng = np.random.default_rng(seed)
        C, dim, n = 4, 5, 3
        bank = PrototypeBank(rng.normal(size=(C, dim)), tau=1.0)
        gkm = PrototypeBank(rng.normal(size=(C, dim)), tau=1.0)
        rows = rng.normal(size=(n, dim))
        targets = rng.integers(0, C, size=n).astype(np.uint32)
        if seed % 2:
            targets[0] = OOD_LABEL
        Q = gkm.posterior_matrix(rows)
        mode = ("baseline", "reg", "kde")[seed % 3]
        analytic = objective_gradient(rows, bank, Q, targets, 0.25, 0.3, mode)
        numeric = numeric_gradient(rows, bank, Q, targets, 0.25, 0.3, mode)
        assert rel_err(analytic, numeric).max() <= 1e-4


def test_breakdown_is_frozen():
    b = LossBreakdown(1.0, 2.0, 3.0, 4.0, np.empty(0))
    with pytest.raises(Exception):
        b.total = 0.0
