"""Independent slow reference implementations used to freeze expected values."""

from fractions import Fraction

import numpy as np


def ap_bruteforce(scores, labels) -> Fraction:
    """Average precision by sweeping every distinct threshold in exact arithmetic."""
    scores = [float(s) for s in scores]
    labels = [int(v) for v in labels]
    n_pos = sum(labels)
    total, prev_recall = Fraction(0), Fraction(0)
    for thr in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(chosen)
        recall = Fraction(tp, n_pos)
        total += (recall - prev_recall) * Fraction(tp, len(chosen))
        prev_recall = recall
    return total


def auroc_pairwise(scores, labels) -> Fraction:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = Fraction(0)
    for a in pos:
        for b in neg:
            wins += 1 if a > b else Fraction(1, 2) if a == b else 0
    return wins / (len(pos) * len(neg))


def central_diff(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def logistic_regression(X, Y, iters=2000, lr=0.5):
    """Plain batch gradient descent logistic fit, for sanity bounds."""
    Xb = np.c_[X, np.ones(len(X))]
    w = np.zeros(Xb.shape[1])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-Xb @ w))
        w -= lr * Xb.T @ (p - Y) / len(Y)
    return 1 / (1 + np.exp(-Xb @ w))


def best_split_exhaustive(x, g, h, lam, alpha, gamma, min_child_weight):
    """Best (threshold, gain) for one feature by scoring every midpoint; None if no valid split."""

    def score(G, H):
        s = np.sign(G) * max(abs(G) - alpha, 0.0)
        return s * s / (H + lam)

    values = sorted(set(x.tolist()))
    G, H = g.sum(), h.sum()
    best = None
    for a, b in zip(values[:-1], values[1:]):
        thr = (a + b) / 2
        left = x < thr
        GL, HL = g[left].sum(), h[left].sum()
        GR, HR = G - GL, H - HL
        if HL < min_child_weight or HR < min_child_weight:
            continue
        gain = score(GL, HL) + score(GR, HR) - score(G, H)
        if gain <= 0 or gain < gamma:
            continue
        if best is None or gain > best[1]:
            best = (thr, gain)
    return best
