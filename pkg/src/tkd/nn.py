"""Dense ReLU network with batch norm, inverted dropout and a two-class softmax head.

Layout (default widths 400, 400)::

    Dense(400, relu) -> BatchNorm -> Dropout -> Dense(400, relu) -> Dropout -> Dense(2, softmax)

Gradients are derived by hand; training is minibatch SGD with optional momentum
and early stopping on validation AUPRC.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .distill import TkdLossConfig, _aggregate, kl_divergence, tkd_logit_grad
from .metrics import Stopwatch, auprc

log = logging.getLogger(__name__)


class MlpError(ValueError):
    pass


@dataclass
class MlpConfig:
    hidden: tuple = (400, 400)
    batchnorm: bool = True
    keep_prob: float = 0.5
    lr: float = 0.01
    batch_size: int = 512
    max_epochs: int = 50
    patience: int = 5
    momentum: float = 0.0
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden:
            raise MlpError("at least one hidden layer is required")
        if not 0.0 < self.keep_prob <= 1.0:
            raise MlpError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise MlpError("batch_size >= 1, max_epochs >= 0, patience >= 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "MlpConfig":
        d = dict(d or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise MlpError(f"unknown MLP config fields: {sorted(unknown)}")
        return cls(**d)


N_CLASSES = 2


@dataclass
class MlpModel:
    widths: tuple
    params: dict
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    keep_prob: float = 0.5
    bn_eps: float = 1e-5
    training: bool = False
    kind: str = field(default="mlp", init=False)

    @property
    def n_features(self) -> int:
        return self.widths[0]

    @property
    def n_hidden(self) -> int:
        return len(self.widths) - 2

    @property
    def batchnorm(self) -> bool:
        return "gamma" in self.params

    def predict_proba(self, X) -> np.ndarray:
        return forward(self, X, training=False)

    predict_proba_rows = predict_proba

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)


def init_mlp(config: MlpConfig, n_features: int, seed: int | None = None) -> MlpModel:
    """He-uniform weights, zero biases, unit BN scale."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    widths = (int(n_features),) + config.hidden + (N_CLASSES,)
    params = {}
    for l in range(len(widths) - 1):
        fan_in = widths[l]
        limit = np.sqrt(6.0 / fan_in)
        params[f"W{l}"] = rng.uniform(-limit, limit, size=(widths[l], widths[l + 1]))
        params[f"b{l}"] = np.zeros(widths[l + 1])
    model = MlpModel(widths=widths, params={}, keep_prob=config.keep_prob, bn_eps=config.bn_eps)
    # params kept in layer order so serialization is stable
    for l in range(len(widths) - 1):
        model.params[f"W{l}"] = params[f"W{l}"]
        model.params[f"b{l}"] = params[f"b{l}"]
        if l == 0 and config.batchnorm:
            model.params["gamma"] = np.ones(widths[1])
            model.params["beta"] = np.zeros(widths[1])
    if config.batchnorm:
        model.running_mean = np.zeros(widths[1])
        model.running_var = np.ones(widths[1])
    return model


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_input(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise MlpError(f"expected input with {model.n_features} columns, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise MlpError("input contains non-finite values")
    return X


def _forward(model, X, training, rng):
    """Forward pass returning probabilities, a backprop cache and BN batch stats."""
    p = model.params
    cache = {"h": [X], "a": [], "mask": [], "bn": None}
    batch_stats = None
    h = X
    for l in range(model.n_hidden):
        a = h @ p[f"W{l}"] + p[f"b{l}"]
        r = np.maximum(a, 0.0)
        cache["a"].append(a)
        if l == 0 and model.batchnorm:
            if training:
                mu = r.mean(axis=0)
                var = r.var(axis=0)
                batch_stats = (mu, var)
            else:
                mu, var = model.running_mean, model.running_var
            inv_std = 1.0 / np.sqrt(var + model.bn_eps)
            xhat = (r - mu) * inv_std
            cache["bn"] = (xhat, inv_std, training)
            r = p["gamma"] * xhat + p["beta"]
        mask = None
        if training and model.keep_prob < 1.0:
            mask = (rng.random(r.shape) < model.keep_prob) / model.keep_prob
            r = r * mask
        cache["mask"].append(mask)
        h = r
        cache["h"].append(h)
    L = model.n_hidden
    z = h @ p[f"W{L}"] + p[f"b{L}"]
    return _softmax(z), cache, batch_stats


def forward(model: MlpModel, X, training: bool = False, dropout_seed: int | None = None) -> np.ndarray:
    """Class probabilities; training mode uses batch statistics and inverted dropout."""
    X = _check_input(model, X)
    rng = np.random.default_rng(dropout_seed)
    probs, _, _ = _forward(model, X, training, rng)
    return probs


def _backprop(model, cache, dz):
    p = model.params
    grads = {}
    L = model.n_hidden
    grads[f"W{L}"] = cache["h"][L].T @ dz
    grads[f"b{L}"] = dz.sum(axis=0)
    dh = dz @ p[f"W{L}"].T
    for l in range(L - 1, -1, -1):
        mask = cache["mask"][l]
        if mask is not None:
            dh = dh * mask
        if l == 0 and model.batchnorm:
            xhat, inv_std, batch_mode = cache["bn"]
            grads["gamma"] = np.sum(dh * xhat, axis=0)
            grads["beta"] = dh.sum(axis=0)
            dxhat = dh * p["gamma"]
            if batch_mode:
                n = dxhat.shape[0]
                dh = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            else:
                dh = dxhat * inv_std
        da = dh * (cache["a"][l] > 0)
        grads[f"W{l}"] = cache["h"][l].T @ da
        grads[f"b{l}"] = da.sum(axis=0)
        if l > 0:
            dh = da @ p[f"W{l}"].T
    return {k: grads[k] for k in p}


def _soft_list(soft_labels, n):
    if not soft_labels:
        return []
    arrs = [getattr(s, "probs", s) for s in soft_labels]
    for a in arrs:
        if np.shape(a)[0] != n:
            raise MlpError(f"soft labels have {np.shape(a)[0]} rows, X has {n}")
    return arrs


def batch_loss(Y, probs, soft, loss_cfg: TkdLossConfig) -> float:
    """Composite loss; plain cross-entropy when there are no teachers."""
    n = probs.shape[0]
    pc = np.clip(probs, loss_cfg.eps, 1 - loss_cfg.eps)
    ce = float(-np.mean(np.log(pc[np.arange(n), np.asarray(Y, dtype=np.int64)])))
    if not soft:
        return ce
    ce_w, kl_w = loss_cfg.weights
    kls = [kl_divergence(O, probs, loss_cfg.eps) for O in soft]
    return ce_w * ce + kl_w * _aggregate(kls, loss_cfg.agg)


def backward(
    model: MlpModel,
    X,
    Y,
    soft_labels=None,
    loss_cfg: TkdLossConfig = TkdLossConfig(),
    training: bool = False,
    dropout_seed: int | None = None,
):
    """Gradients of the configured loss for every parameter.

    Returns ``(grads, loss)``; ``grads`` has the same keys and shapes as ``model.params``.
    """
    X = _check_input(model, X)
    Y = np.asarray(Y).ravel()
    if Y.shape[0] != X.shape[0]:
        raise MlpError(f"row-count mismatch: X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    soft = _soft_list(soft_labels, X.shape[0])
    rng = np.random.default_rng(dropout_seed)
    probs, cache, _ = _forward(model, X, training, rng)
    dz = tkd_logit_grad(Y, probs, soft, loss_cfg)
    return _backprop(model, cache, dz), batch_loss(Y, probs, soft, loss_cfg)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_auprc: float | None
    seconds: float


def _as_xy(ds):
    X = np.asarray(ds.X, dtype=np.float64)
    Y = None if ds.Y is None else np.asarray(ds.Y).ravel()
    return X, Y


def train(
    config: MlpConfig,
    train_ds,
    validation=None,
    teachers=None,
    loss_cfg: TkdLossConfig = TkdLossConfig(),
    seed: int | None = None,
):
    """Fit an MLP; returns ``(best model, list[EpochLog])``.

    ``teachers`` are soft-label matrices aligned with the rows of ``train_ds``.
    Early stopping watches validation AUPRC; without a two-class validation set
    the final epoch is returned.
    """
    X, Y = _as_xy(train_ds)
    if X.shape[0] == 0:
        raise MlpError("empty training set")
    if Y is None:
        raise MlpError("training set has no labels")
    if np.unique(Y).size < 2:
        raise MlpError("training data contains a single class")
    soft = _soft_list(teachers, X.shape[0])
    seed = config.seed if seed is None else seed
    model = init_mlp(config, X.shape[1], seed)
    history: list[EpochLog] = []
    if config.max_epochs == 0:
        return model, history
    _check_input(model, X)

    Xv = Yv = None
    if validation is not None:
        Xv, Yv = _as_xy(validation)
        if Yv is None or Xv.shape[0] == 0 or np.unique(Yv).size < 2:
            Xv = Yv = None

    rng = np.random.default_rng([seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()} if config.momentum else None
    best_score, best_model, wait = -np.inf, None, 0
    n = X.shape[0]
    for epoch in range(config.max_epochs):
        with Stopwatch() as sw:
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                xb, yb = X[idx], Y[idx]
                sb = [s[idx] for s in soft]
                probs, cache, stats = _forward(model, xb, True, rng)
                dz = tkd_logit_grad(yb, probs, sb, loss_cfg)
                grads = _backprop(model, cache, dz)
                total += batch_loss(yb, probs, sb, loss_cfg) * idx.size
                for k, g in grads.items():
                    if velocity is not None:
                        velocity[k] = config.momentum * velocity[k] - config.lr * g
                        model.params[k] += velocity[k]
                    else:
                        model.params[k] -= config.lr * g
                if stats is not None:
                    m = config.bn_momentum
                    model.running_mean = m * model.running_mean + (1 - m) * stats[0]
                    model.running_var = m * model.running_var + (1 - m) * stats[1]
            val = None
            if Xv is not None:
                val = auprc(model.predict_proba(Xv)[:, 1], Yv)
        history.append(EpochLog(epoch, total / n, val, sw.seconds))
        log.debug("epoch %d loss %.5f val_auprc %s", epoch, total / n, val)
        if not np.all([np.all(np.isfinite(v)) for v in model.params.values()]):
            raise MlpError(f"non-finite parameters after epoch {epoch}; lower the learning rate")
        if Xv is None:
            continue
        if val > best_score:
            best_score, best_model, wait = val, model.copy(), 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    final = best_model if best_model is not None else model
    final.training = False
    return final, history
