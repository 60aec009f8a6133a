"""Ranking metrics for imbalanced binary detection, the improvement delta, and fit timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"length mismatch: {scores.size} scores vs {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be 0/1")
    return scores, labels.astype(np.int64)


def precision_recall_curve(scores, labels):
    """Precision and recall at every distinct score threshold, highest threshold first.

    All samples sharing a score enter the predicted-positive set together, so the
    curve does not depend on the order of tied samples.

    Returns
    -------
    precision, recall, thresholds : ndarray
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # last index of each tie group
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[last]
    pp = last + 1
    return tp / pp, tp / n_pos, s[last]


def auprc(scores, labels) -> float:
    """Step-interpolated average precision: sum over thresholds of (R_k - R_{k-1}) * P_k."""
    precision, recall, _ = precision_recall_curve(scores, labels)
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic P(s_pos > s_neg) + 0.5 * P(tie) from average ranks."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    auprc: float
    auroc: float
    n_samples: int
    n_positive: int
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)
    train_seconds: float | None = None
    seed: int | None = None

    def to_dict(self, curves: bool = True) -> dict:
        out = {
            "auprc": self.auprc,
            "auroc": self.auroc,
            "n_samples": self.n_samples,
            "n_positive": self.n_positive,
            "train_seconds": self.train_seconds,
            "seed": self.seed,
        }
        if curves:
            out["precision"] = self.precision.tolist()
            out["recall"] = self.recall.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            auprc=d["auprc"],
            auroc=d["auroc"],
            n_samples=d["n_samples"],
            n_positive=d["n_positive"],
            precision=np.asarray(d.get("precision", []), dtype=np.float64),
            recall=np.asarray(d.get("recall", []), dtype=np.float64),
            train_seconds=d.get("train_seconds"),
            seed=d.get("seed"),
        )


def evaluate(scores, labels, train_seconds=None, seed=None) -> EvalReport:
    precision, recall, _ = precision_recall_curve(scores, labels)
    labels = np.asarray(labels).ravel()
    return EvalReport(
        auprc=auprc(scores, labels),
        auroc=auroc(scores, labels),
        n_samples=int(labels.size),
        n_positive=int(labels.sum()),
        precision=precision,
        recall=recall,
        train_seconds=train_seconds,
        seed=seed,
    )


@dataclass(frozen=True)
class DeltaReport:
    base_auprc: float
    tkd_auprc: float
    delta: float
    relative_pct: float


def delta(base, tkd) -> DeltaReport:
    """Absolute and relative AUPRC gain of ``tkd`` over ``base``.

    Accepts EvalReports or plain AUPRC floats.
    """
    b = base.auprc if isinstance(base, EvalReport) else float(base)
    t = tkd.auprc if isinstance(tkd, EvalReport) else float(tkd)
    if b == 0:
        raise MetricError("base AUPRC is 0; relative improvement undefined")
    d = t - b
    return DeltaReport(base_auprc=b, tkd_auprc=t, delta=d, relative_pct=d / b * 100.0)


class Stopwatch:
    """Wall-clock timer; ``with Stopwatch() as sw: ...`` then read ``sw.seconds``."""

    def __init__(self):
        self.seconds = 0.0
        self._start = None

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds += time.perf_counter() - self._start
        self._start = None
        return False
