"""Temporal distillation core: teacher registry, soft labels and the composite loss.

The composite loss for period ``t`` is

    alpha * CE(Y_t, y_t) + (1 - alpha) * AGG_{K <= i <= t-1} KL(O_{i,t} || y_t)

where ``O_{i,t}`` is teacher ``M_i``'s class-probability output on ``X_t`` and
``y_t`` the student output. The "simplified" form ``CE + mean_i KL`` equals twice
the general form at ``alpha = 0.5`` with mean aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

AGGREGATORS = ("mean", "max", "sum")
LOSS_FORMS = ("general", "simplified")


class DistillError(ValueError):
    pass


@dataclass(frozen=True)
class TkdLossConfig:
    alpha: float = 0.5
    K: int = 0
    agg: str = "mean"
    eps: float = 1e-12
    form: str = "general"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DistillError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.K < 0:
            raise DistillError(f"K must be >= 0, got {self.K}")
        if self.agg not in AGGREGATORS:
            raise DistillError(f"agg must be one of {AGGREGATORS}, got {self.agg!r}")
        if not self.eps > 0:
            raise DistillError("eps must be > 0")
        if self.form not in LOSS_FORMS:
            raise DistillError(f"form must be one of {LOSS_FORMS}, got {self.form!r}")

    @property
    def weights(self) -> tuple[float, float]:
        """(CE weight, KL weight) for the configured form."""
        if self.form == "simplified":
            return 1.0, 1.0
        return self.alpha, 1.0 - self.alpha

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "K": self.K, "agg": self.agg, "eps": self.eps, "form": self.form}

    @classmethod
    def from_dict(cls, d: dict | None) -> "TkdLossConfig":
        d = dict(d or {})
        return cls(**{k: d[k] for k in ("alpha", "K", "agg", "eps", "form") if k in d})


@dataclass
class SoftLabelMatrix:
    teacher_period: int
    target_period: int
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[1] != 2:
            raise DistillError(f"soft labels must be (n, 2), got {self.probs.shape}")
        if np.any(self.probs < -1e-6) or not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-6):
            raise DistillError("soft-label rows must lie on the probability simplex")

    def __len__(self):
        return self.probs.shape[0]


@dataclass
class TeacherRegistry:
    """Ordered (period, model) entries with strictly increasing periods."""

    entries: list = field(default_factory=list)

    def add(self, period: int, model) -> None:
        if self.entries and period <= self.entries[-1][0]:
            raise DistillError(
                f"teacher period {period} must exceed last registered period {self.entries[-1][0]}"
            )
        self.entries.append((int(period), model))

    @property
    def periods(self) -> list[int]:
        return [p for p, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, period: int):
        for p, m in self.entries:
            if p == period:
                return m
        raise KeyError(period)

    def eligible(self, t: int, K: int = 0) -> list:
        return [(p, m) for p, m in self.entries if K <= p <= t - 1]


def generate_soft_labels(registry: TeacherRegistry, X_t, t: int, K: int = 0) -> list[SoftLabelMatrix]:
    """Outputs of every teacher ``M_i`` with ``K <= i <= t-1`` on ``X_t``, in period order."""
    X_t = np.asarray(X_t, dtype=np.float64)
    teachers = registry.eligible(t, K)
    if not teachers:
        raise DistillError(f"no eligible teachers for period {t} with K={K}")
    out = []
    for i, model in teachers:
        if model.n_features != X_t.shape[1]:
            raise DistillError(
                f"teacher {i} expects {model.n_features} features, data has {X_t.shape[1]}"
            )
        out.append(SoftLabelMatrix(i, t, model.predict_proba_rows(X_t)))
    return out


def _onehot(Y, n_rows):
    Y = np.asarray(Y).ravel()
    if Y.shape[0] != n_rows:
        raise DistillError(f"row-count mismatch: {Y.shape[0]} labels vs {n_rows} predictions")
    if not np.all((Y == 0) | (Y == 1)):
        raise DistillError("labels must be 0/1")
    out = np.zeros((n_rows, 2))
    out[np.arange(n_rows), Y.astype(np.int64)] = 1.0
    return out


def _soft_arrays(soft, n_rows):
    arrs = [s.probs if isinstance(s, SoftLabelMatrix) else np.asarray(s, dtype=np.float64) for s in soft]
    for a in arrs:
        if a.shape != (n_rows, 2):
            raise DistillError(f"soft labels shape {a.shape} does not match ({n_rows}, 2)")
        if np.isnan(a).any():
            raise DistillError("NaN in soft labels")
    return arrs


def cross_entropy(Y, y, eps: float = 1e-12) -> float:
    """Mean over samples of -log p(true class)."""
    y = np.asarray(y, dtype=np.float64)
    T = _onehot(Y, y.shape[0])
    return float(-np.mean(np.sum(T * np.log(np.clip(y, eps, 1 - eps)), axis=1)))


def kl_divergence(O, y, eps: float = 1e-12) -> float:
    """Mean over samples of sum_c O log(O / y); ``0 log 0`` taken as 0."""
    O = np.asarray(O, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    logy = np.log(np.clip(y, eps, 1 - eps))
    return float(np.mean(np.sum(xlogy(O, O) - O * logy, axis=1)))


def _aggregate(values, agg):
    values = np.asarray(values)
    if agg == "mean":
        return float(values.mean())
    if agg == "sum":
        return float(values.sum())
    return float(values.max())


def _agg_weights(kls, agg):
    """d AGG / d KL_i for each teacher; max routes to the first maximal teacher."""
    m = len(kls)
    if agg == "mean":
        return np.full(m, 1.0 / m)
    if agg == "sum":
        return np.ones(m)
    w = np.zeros(m)
    w[int(np.argmax(kls))] = 1.0
    return w


def _validate(Y, y, soft, cfg):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 2:
        raise DistillError(f"student output must be (n, 2), got {y.shape}")
    if np.isnan(y).any():
        raise DistillError("NaN in student output")
    T = _onehot(Y, y.shape[0])
    arrs = _soft_arrays(soft or [], y.shape[0])
    ce_w, kl_w = cfg.weights
    if not arrs and kl_w > 0:
        raise DistillError("empty teacher list with a non-zero KL weight (alpha < 1)")
    return T, y, arrs


def tkd_loss(Y_t, y_t, soft, cfg: TkdLossConfig = TkdLossConfig()) -> float:
    """Composite CE + aggregated KL loss; weights follow ``cfg.form``."""
    T, y, arrs = _validate(Y_t, y_t, soft, cfg)
    ce_w, kl_w = cfg.weights
    ce = float(-np.mean(np.sum(T * np.log(np.clip(y, cfg.eps, 1 - cfg.eps)), axis=1)))
    loss = ce_w * ce
    if arrs:
        kls = [kl_divergence(O, y, cfg.eps) for O in arrs]
        loss = loss + kl_w * _aggregate(kls, cfg.agg)
    return loss


def simplified_loss(Y_t, y_t, soft, K: int, t: int, eps: float = 1e-12) -> float:
    """``CE + (1/(t-K)) * sum_{i=K}^{t-1} KL``; requires exactly ``t - K`` teachers."""
    if len(soft) != t - K:
        raise DistillError(f"expected {t - K} teachers for t={t}, K={K}, got {len(soft)}")
    return tkd_loss(Y_t, y_t, soft, TkdLossConfig(alpha=0.5, K=K, agg="mean", eps=eps, form="simplified"))


def tkd_loss_grad_probs(Y_t, y_t, soft, cfg: TkdLossConfig = TkdLossConfig()) -> np.ndarray:
    """Gradient of ``tkd_loss`` with respect to the student probability matrix.

    Clipping is treated as the identity, which matches the loss wherever
    ``eps < y < 1 - eps``.
    """
    T, y, arrs = _validate(Y_t, y_t, soft, cfg)
    n = y.shape[0]
    ce_w, kl_w = cfg.weights
    grad = -ce_w * T / y / n
    if arrs:
        kls = [kl_divergence(O, y, cfg.eps) for O in arrs]
        for w, O in zip(_agg_weights(kls, cfg.agg), arrs):
            if w:
                grad = grad - kl_w * w * O / y / n
    return grad


def tkd_logit_grad(Y, probs, soft, cfg: TkdLossConfig) -> np.ndarray:
    """Gradient of the composite loss with respect to softmax logits.

    Uses ``d/dz [-sum_c t_c log softmax(z)_c] = softmax(z) - t`` for any target
    distribution ``t`` that sums to one. With no teachers this is plain
    cross-entropy regardless of ``alpha``.
    """
    n = probs.shape[0]
    T = _onehot(Y, n)
    arrs = _soft_arrays(soft or [], n)
    if not arrs:
        return (probs - T) / n
    ce_w, kl_w = cfg.weights
    grad = ce_w * (probs - T)
    kls = [kl_divergence(O, probs, cfg.eps) for O in arrs] if cfg.agg == "max" else [0.0] * len(arrs)
    kl_grad = np.zeros_like(probs)
    for w, O in zip(_agg_weights(kls, cfg.agg), arrs):
        if w:
            kl_grad += w * (probs - O)
    return (grad + kl_w * kl_grad) / n
