"""Second-order gradient boosting of depth-limited regression trees.

Split search is exact greedy over sorted unique feature values, run level by
level: one presort per fit, then at each depth every (node, feature) candidate
is scored from segmented cumulative gradient/hessian sums.

Split gain follows the usual L1/L2-regularized form without the 1/2 factor::

    gain = S(G_L)^2/(H_L+lambda) + S(G_R)^2/(H_R+lambda) - S(G)^2/(H+lambda)

with ``S`` the soft-threshold by ``reg_alpha``. Leaf weight is ``-S(G)/(H+lambda)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, xlogy

from .distill import AGGREGATORS, DistillError


class GbtError(ValueError):
    pass


@dataclass
class GbtConfig:
    max_depth: int = 3
    n_estimators: int = 200
    learning_rate: float = 0.1
    min_child_weight: float = 2.89
    gamma: float = 0.9
    reg_alpha: float = 3.0
    reg_lambda: float = 40.0
    subsample: float = 0.94
    colsample_bytree: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.subsample <= 1 or not 0 < self.colsample_bytree <= 1:
            raise GbtError("subsample and colsample_bytree must be in (0, 1]")
        if self.max_depth < 1:
            raise GbtError("max_depth must be >= 1")
        if self.n_estimators < 0:
            raise GbtError("n_estimators must be >= 0")
        if self.reg_lambda < 0 or self.reg_alpha < 0 or self.min_child_weight < 0:
            raise GbtError("regularization terms must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["gamma"]):
            d["gamma"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "GbtConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise GbtError(f"unknown GBT config fields: {sorted(unknown)}")
        if d.get("gamma") == "inf":
            d["gamma"] = math.inf
        return cls(**d)


def sigmoid(z):
    return expit(z)


def tkd_objective(logit, y, teacher_probs=(), alpha: float = 0.5):
    """Per-sample gradient and hessian of the composite loss in the logit.

    ``g = alpha*(p - y) + (1 - alpha)*mean_i(p - q_i)`` and ``h = p*(1 - p)`` with
    ``p = sigmoid(logit)``; with no teachers ``g = p - y``. Works elementwise on
    arrays, with ``teacher_probs`` of shape ``(n_teachers, ...)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DistillError(f"alpha must be in [0, 1], got {alpha}")
    q = np.asarray(teacher_probs, dtype=np.float64)
    if q.size and (np.any(q < 0) or np.any(q > 1) or np.isnan(q).any()):
        raise DistillError("teacher probabilities must lie in [0, 1]")
    p = sigmoid(np.asarray(logit, dtype=np.float64))
    h = p * (1.0 - p)
    if q.size == 0:
        g = p - y
    else:
        g = alpha * (p - y) + (1.0 - alpha) * np.mean(p - q, axis=0)
    if np.ndim(g) == 0:
        return float(g), float(h)
    return g, h


def _bernoulli_kl(q, p, eps):
    """KL(q || p) for Bernoulli distributions, elementwise."""
    p = np.clip(p, eps, 1 - eps)
    return xlogy(q, q) + xlogy(1 - q, 1 - q) - q * np.log(p) - (1 - q) * np.log1p(-p)


class BoostObjective:
    """Composite CE + aggregated-KL objective on logits; logistic loss without teachers.

    ``teacher_probs`` holds each teacher's positive-class probability per sample,
    shape ``(n_teachers, n_samples)``.
    """

    def __init__(self, teacher_probs=None, alpha: float = 0.5, agg: str = "mean",
                 form: str = "general", eps: float = 1e-12):
        if not 0.0 <= alpha <= 1.0:
            raise DistillError(f"alpha must be in [0, 1], got {alpha}")
        if agg not in AGGREGATORS:
            raise DistillError(f"agg must be one of {AGGREGATORS}")
        q = np.empty((0, 0)) if teacher_probs is None else np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
        if q.size and (np.any(q < 0) or np.any(q > 1)):
            raise DistillError("teacher probabilities must lie in [0, 1]")
        self.q = q if q.size else None
        self.alpha = alpha
        self.agg = agg
        self.eps = eps
        if form == "simplified":
            self.ce_w, self.kl_w = 1.0, 1.0
        else:
            self.ce_w, self.kl_w = alpha, 1.0 - alpha

    @property
    def n_teachers(self) -> int:
        return 0 if self.q is None else self.q.shape[0]

    def subset(self, idx) -> "BoostObjective":
        out = object.__new__(BoostObjective)
        out.__dict__.update(self.__dict__)
        out.q = None if self.q is None else self.q[:, idx]
        return out

    def _teacher_weights(self, p):
        m = self.n_teachers
        if self.agg == "mean":
            return np.full(m, 1.0 / m)
        if self.agg == "sum":
            return np.ones(m)
        kls = _bernoulli_kl(self.q, p[None, :], self.eps).mean(axis=1)
        w = np.zeros(m)
        w[int(np.argmax(kls))] = 1.0
        return w

    def grad_hess(self, logits, y):
        p = sigmoid(logits)
        base_h = p * (1.0 - p)
        if self.q is None:
            return p - y, base_h
        w = self._teacher_weights(p)
        g_kl = np.zeros_like(p)
        for wi, qi in zip(w, self.q):
            if wi:
                g_kl += wi * (p - qi)
        g = self.ce_w * (p - y) + self.kl_w * g_kl
        scale = self.ce_w + self.kl_w * float(w.sum())
        h = base_h if scale == 1.0 else scale * base_h
        return g, h

    def loss(self, logits, y) -> float:
        p = np.clip(sigmoid(logits), self.eps, 1 - self.eps)
        ce = float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))
        if self.q is None:
            return ce
        kls = _bernoulli_kl(self.q, p[None, :], self.eps).mean(axis=1)
        if self.agg == "mean":
            agg = float(kls.mean())
        elif self.agg == "sum":
            agg = float(kls.sum())
        else:
            agg = float(kls.max())
        return self.ce_w * ce + self.kl_w * agg


@dataclass
class Tree:
    """Flat preorder node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def depth(self) -> int:
        def d(i):
            return 0 if self.feature[i] < 0 else 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)

    def predict(self, X) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            r = rows[internal]
            nd = node[internal]
            go_left = X[r, feat[internal]] < self.threshold[nd]
            node[internal] = np.where(go_left, self.left[nd], self.right[nd])
        return self.value[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
        )


def leaf_tree(value: float) -> Tree:
    return Tree(
        feature=np.array([-1]), threshold=np.array([0.0]),
        left=np.array([-1]), right=np.array([-1]), value=np.array([float(value)]),
    )


@dataclass
class GbtModel:
    trees: list
    base_score: float
    learning_rate: float
    n_features: int
    config: GbtConfig = field(default_factory=GbtConfig)
    kind: str = field(default="gbt", init=False)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise GbtError(f"expected input with {self.n_features} columns, got shape {X.shape}")
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def predict_proba(self, X) -> np.ndarray:
        """Positive-class probability per sample."""
        return sigmoid(self.decision_function(X))

    def predict_proba_rows(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        return np.column_stack([1.0 - p, p])


def _soft_threshold(G, alpha):
    if alpha == 0:
        return G
    return np.sign(G) * np.maximum(np.abs(G) - alpha, 0.0)


def _score(G, H, cfg):
    return _soft_threshold(G, cfg.reg_alpha) ** 2 / (H + cfg.reg_lambda)


def leaf_weight(G, H, cfg) -> float:
    return float(-_soft_threshold(G, cfg.reg_alpha) / (H + cfg.reg_lambda))


def _build_tree(X, order, g, h, rows, cols, cfg) -> Tree:
    """Grow one tree on ``rows`` using features ``cols``.

    ``order`` is the full-data column-wise argsort of ``X``.
    """
    n = X.shape[0]
    node_of = np.full(n, -1, dtype=np.int64)
    node_of[rows] = 0
    nodes = [{"G": float(g[rows].sum()), "H": float(h[rows].sum()), "feature": -1}]
    frontier = [0]
    sub_order = order[:, cols]
    for _depth in range(cfg.max_depth):
        splittable = [k for k in frontier if nodes[k]["H"] >= 2 * cfg.min_child_weight]
        if not splittable:
            break
        level_id = np.full(len(nodes), -1, dtype=np.int64)
        level_id[splittable] = np.arange(len(splittable))
        raw = node_of[sub_order]
        nid = np.where(raw >= 0, level_id[np.maximum(raw, 0)], -1)
        big = len(splittable)
        key = np.where(nid >= 0, nid, big)
        perm = np.argsort(key, axis=0, kind="stable")
        counts = np.bincount(key[:, 0], minlength=big + 1)[:big]
        m = int(counts.sum())
        perm = perm[:m]
        ridx = np.take_along_axis(sub_order, perm, axis=0)
        vals = X[ridx, cols[None, :]]
        G = np.cumsum(g[ridx], axis=0)
        H = np.cumsum(h[ridx], axis=0)
        starts = np.r_[0, np.cumsum(counts)[:-1]]
        new_frontier = []
        for j, k in enumerate(splittable):
            s, e = int(starts[j]), int(starts[j] + counts[j])
            if e - s < 2:
                continue
            G0 = G[s - 1] if s > 0 else 0.0
            H0 = H[s - 1] if s > 0 else 0.0
            GL = G[s:e - 1] - G0
            HL = H[s:e - 1] - H0
            Gt, Ht = nodes[k]["G"], nodes[k]["H"]
            GR = Gt - GL
            HR = Ht - HL
            v = vals[s:e]
            valid = (v[1:] > v[:-1]) & (HL >= cfg.min_child_weight) & (HR >= cfg.min_child_weight)
            if not valid.any():
                continue
            gain = _score(GL, HL, cfg) + _score(GR, HR, cfg) - _score(Gt, Ht, cfg)
            gain = np.where(valid, gain, -np.inf)
            flat = int(np.argmax(gain))
            pos, fj = divmod(flat, gain.shape[1])
            best = gain[pos, fj]
            if not (best > 0 and best >= cfg.gamma):
                continue
            lo, hi = v[pos, fj], v[pos + 1, fj]
            thr = 0.5 * (lo + hi)
            if not lo < thr:
                thr = hi
            feat = int(cols[fj])
            gl, hl = float(GL[pos, fj]), float(HL[pos, fj])
            left = len(nodes)
            nodes.append({"G": gl, "H": hl, "feature": -1})
            nodes.append({"G": Gt - gl, "H": Ht - hl, "feature": -1})
            nodes[k].update(feature=feat, threshold=float(thr), left=left, right=left + 1)
            in_node = ridx[s:e, 0]
            go_left = X[in_node, feat] < thr
            node_of[in_node[go_left]] = left
            node_of[in_node[~go_left]] = left + 1
            new_frontier += [left, left + 1]
        if not new_frontier:
            break
        frontier = new_frontier
    return _to_preorder(nodes, cfg)


def _to_preorder(nodes, cfg) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def visit(k):
        i = len(feature)
        nd = nodes[k]
        feature.append(nd["feature"])
        threshold.append(nd.get("threshold", 0.0))
        left.append(-1)
        right.append(-1)
        value.append(0.0 if nd["feature"] >= 0 else leaf_weight(nd["G"], nd["H"], cfg))
        if nd["feature"] >= 0:
            left[i] = visit(nd["left"])
            right[i] = visit(nd["right"])
        return i

    visit(0)
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


def base_score_for(Y) -> float:
    rate = float(np.mean(Y))
    if rate <= 0.0:
        return -10.0
    if rate >= 1.0:
        return 10.0
    return float(np.clip(math.log(rate / (1.0 - rate)), -10.0, 10.0))


def fit(config: GbtConfig, train_ds, objective: BoostObjective | None = None,
        seed: int | None = None, loss_trace: list | None = None) -> GbtModel:
    """Boost ``config.n_estimators`` trees on ``train_ds`` under ``objective``.

    ``loss_trace``, if given, receives the objective value before the first
    round and after every round.
    """
    X = np.asarray(train_ds.X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise GbtError("empty training data")
    if train_ds.Y is None:
        raise GbtError("training set has no labels")
    Y = np.asarray(train_ds.Y, dtype=np.float64).ravel()
    if Y.shape[0] != X.shape[0]:
        raise GbtError("row-count mismatch between X and Y")
    if not np.all(np.isfinite(X)):
        raise GbtError("training data contains non-finite values")
    objective = objective or BoostObjective()
    if objective.q is not None and objective.q.shape[1] != X.shape[0]:
        raise GbtError("teacher probabilities do not match training rows")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n, d = X.shape
    base = base_score_for(Y)
    model = GbtModel(trees=[], base_score=base, learning_rate=config.learning_rate,
                     n_features=d, config=config)
    logits = np.full(n, base)
    if loss_trace is not None:
        loss_trace.append(objective.loss(logits, Y))
    if config.n_estimators == 0:
        return model
    order = np.argsort(X, axis=0, kind="stable")
    n_rows = max(1, int(round(config.subsample * n)))
    n_cols = max(1, int(round(config.colsample_bytree * d)))
    all_cols = np.arange(d)
    for _ in range(config.n_estimators):
        g, h = objective.grad_hess(logits, Y)
        rows = np.sort(rng.choice(n, size=n_rows, replace=False)) if n_rows < n else np.arange(n)
        cols = np.sort(rng.choice(d, size=n_cols, replace=False)) if n_cols < d else all_cols
        tree = _build_tree(X, order, g, h, rows, cols, config)
        model.trees.append(tree)
        logits = logits + config.learning_rate * tree.predict(X)
        if loss_trace is not None:
            loss_trace.append(objective.loss(logits, Y))
    return model


def predict_proba(model: GbtModel, X) -> np.ndarray:
    return model.predict_proba(X)
