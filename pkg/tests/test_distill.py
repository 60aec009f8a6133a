import math

import numpy as np
import pytest

from oracles import central_diff, rel_err
from tkd.distill import (
    DistillError, SoftLabelMatrix, TeacherRegistry, TkdLossConfig, cross_entropy, generate_soft_labels,
    kl_divergence, simplified_loss, tkd_logit_grad, tkd_loss, tkd_loss_grad_probs,
)


def rows(p):
    p = np.atleast_1d(np.asarray(p, dtype=float))
    return np.c_[1 - p, p]


def random_fixture(rng, n=8, m=3):
    y = rows(rng.uniform(0.05, 0.95, n))
    Y = rng.integers(0, 2, n)
    soft = [rows(rng.uniform(0.01, 0.99, n)) for _ in range(m)]
    return Y, y, soft


class Const:
    def __init__(self, p, d=2):
        self.p, self.n_features = p, d

    def predict_proba_rows(self, X):
        return rows(np.full(len(X), self.p))


def test_hand_computed_example():
    # one sample, label 0, student [0.6, 0.4], teacher [0.9, 0.1]
    expected = 0.5 * -math.log(0.6) + 0.5 * (0.9 * math.log(0.9 / 0.6) + 0.1 * math.log(0.1 / 0.4))
    got = tkd_loss([0], [[0.6, 0.4]], [np.array([[0.9, 0.1]])], TkdLossConfig(alpha=0.5))
    assert got == pytest.approx(expected, abs=1e-15)


def test_alpha_one_is_cross_entropy_exactly():
    rng = np.random.default_rng(0)
    for _ in range(100):
        Y, y, soft = random_fixture(rng)
        assert tkd_loss(Y, y, soft, TkdLossConfig(alpha=1.0)) == cross_entropy(Y, y)
        assert tkd_loss(Y, y, [], TkdLossConfig(alpha=1.0)) == cross_entropy(Y, y)


def test_teachers_equal_student_kl_zero():
    rng = np.random.default_rng(1)
    for _ in range(100):
        Y, y, _ = random_fixture(rng)
        cfg = TkdLossConfig(alpha=0.3)
        assert abs(tkd_loss(Y, y, [y.copy(), y.copy()], cfg) - 0.3 * cross_entropy(Y, y)) <= 1e-9


def test_simplified_is_twice_general():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m = int(rng.integers(1, 5))
        Y, y, soft = random_fixture(rng, m=m)
        s = simplified_loss(Y, y, soft, K=0, t=m)
        g = tkd_loss(Y, y, soft, TkdLossConfig(alpha=0.5, agg="mean"))
        assert abs(s - 2 * g) <= 1e-12


def test_simplified_teacher_count_check():
    Y, y, soft = random_fixture(np.random.default_rng(0), m=2)
    with pytest.raises(DistillError):
        simplified_loss(Y, y, soft, K=0, t=3)


@pytest.mark.parametrize("agg", ["mean", "max", "sum"])
def test_teacher_permutation_invariant(agg):
    rng = np.random.default_rng(4)
    Y, y, soft = random_fixture(rng, m=4)
    cfg = TkdLossConfig(agg=agg)
    assert tkd_loss(Y, y, soft, cfg) == pytest.approx(tkd_loss(Y, y, soft[::-1], cfg), abs=1e-14)


def test_aggregators_relation():
    Y, y, soft = random_fixture(np.random.default_rng(5), m=3)
    kls = [kl_divergence(O, y) for O in soft]
    ce = cross_entropy(Y, y)
    for agg, val in (("mean", np.mean(kls)), ("sum", np.sum(kls)), ("max", np.max(kls))):
        assert tkd_loss(Y, y, soft, TkdLossConfig(alpha=0.25, agg=agg)) == pytest.approx(0.25 * ce + 0.75 * val)


def test_kl_nonnegative_and_zero_log_zero():
    rng = np.random.default_rng(6)
    for _ in range(200):
        O, y = rows(rng.random(5)), rows(rng.random(5))
        assert kl_divergence(O, y) >= -1e-15
    # one-hot teacher: 0 * log 0 contributes nothing
    assert kl_divergence([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(math.log(2))


def test_eps_clipping_keeps_loss_finite():
    loss = tkd_loss([1], [[1.0, 0.0]], [np.array([[0.0, 1.0]])])
    assert np.isfinite(loss) and loss > 20


@pytest.mark.parametrize("agg", ["mean", "max", "sum"])
@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_prob_gradient_matches_finite_differences(agg, alpha):
    rng = np.random.default_rng(7)
    Y, y, soft = random_fixture(rng, n=3, m=3)
    cfg = TkdLossConfig(alpha=alpha, agg=agg)
    analytic = tkd_loss_grad_probs(Y, y, soft, cfg)
    numeric = central_diff(lambda: tkd_loss(Y, y, soft, cfg), y)
    assert rel_err(analytic, numeric) < 1e-6


@pytest.mark.parametrize("agg", ["mean", "max", "sum"])
@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_logit_gradient_matches_finite_differences(agg, alpha):
    rng = np.random.default_rng(8)
    Y, _, soft = random_fixture(rng, n=3, m=3)
    z = rng.normal(size=(3, 2))
    cfg = TkdLossConfig(alpha=alpha, agg=agg)

    def probs():
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    analytic = tkd_logit_grad(Y, probs(), soft, cfg)
    numeric = central_diff(lambda: tkd_loss(Y, probs(), soft, cfg), z)
    assert rel_err(analytic, numeric) < 1e-6


def test_uniform_teachers_equal_simplified_at_half_rate():
    # general form at alpha=.5 is exactly half the simplified form, so its gradient is too
    rng = np.random.default_rng(9)
    Y, y, soft = random_fixture(rng, n=6, m=3)
    g_general = tkd_logit_grad(Y, y, soft, TkdLossConfig(alpha=0.5))
    g_simple = tkd_logit_grad(Y, y, soft, TkdLossConfig(form="simplified"))
    np.testing.assert_array_equal(2 * g_general, g_simple)


def test_uniform_teachers_act_as_label_smoothing():
    # uniform soft labels pull the logit-gradient target toward 0.5 instead of the hard label
    Y = np.array([1])
    y = rows([0.5])
    soft = [rows([0.5])] * 3
    assert tkd_logit_grad(Y, y, soft, TkdLossConfig(alpha=0.5))[0, 1] == pytest.approx(0.5 * (0.5 - 1))


def test_empty_teachers_with_kl_weight_raises():
    with pytest.raises(DistillError):
        tkd_loss([0], [[0.6, 0.4]], [], TkdLossConfig(alpha=0.5))


def test_nan_rejected():
    with pytest.raises(DistillError):
        tkd_loss([0], [[np.nan, 0.4]], [np.array([[0.5, 0.5]])])
    with pytest.raises(DistillError):
        tkd_loss([0], [[0.6, 0.4]], [np.array([[np.nan, 0.5]])])


def test_config_validation():
    for bad in ({"alpha": 1.5}, {"K": -1}, {"agg": "median"}, {"eps": 0}, {"form": "other"}):
        with pytest.raises(DistillError):
            TkdLossConfig(**bad)
    cfg = TkdLossConfig(alpha=0.2, K=1, agg="max")
    assert TkdLossConfig.from_dict(cfg.to_dict()) == cfg


def test_registry_and_soft_labels():
    reg = TeacherRegistry()
    for p, q in ((0, 0.1), (1, 0.2), (2, 0.3)):
        reg.add(p, Const(q))
    with pytest.raises(DistillError):
        reg.add(2, Const(0.5))
    X = np.zeros((4, 2))
    soft = generate_soft_labels(reg, X, t=3, K=1)
    assert [s.teacher_period for s in soft] == [1, 2]
    assert all(s.target_period == 3 for s in soft)
    np.testing.assert_allclose(soft[0].probs[:, 1], 0.2)
    assert [s.teacher_period for s in generate_soft_labels(reg, X, t=2)] == [0, 1]


def test_no_eligible_teachers():
    with pytest.raises(DistillError, match="no eligible teachers"):
        generate_soft_labels(TeacherRegistry(), np.zeros((2, 2)), t=1)
    reg = TeacherRegistry()
    reg.add(0, Const(0.1))
    with pytest.raises(DistillError, match="no eligible teachers"):
        generate_soft_labels(reg, np.zeros((2, 2)), t=3, K=1)


def test_teacher_width_mismatch():
    reg = TeacherRegistry()
    reg.add(0, Const(0.1, d=3))
    with pytest.raises(DistillError):
        generate_soft_labels(reg, np.zeros((2, 2)), t=1)


def test_soft_label_matrix_validation():
    with pytest.raises(DistillError):
        SoftLabelMatrix(0, 1, np.array([[0.5, 0.6]]))
    with pytest.raises(DistillError):
        SoftLabelMatrix(0, 1, np.array([0.5, 0.5]))
