"""Tabular ingestion, fraud-table preprocessing, rebalancing and synthetic drift data.

Preprocessing rules per column:

* continuous: ``log10`` or identity; nulls are replaced by a fill constant
  *instead of* being transformed.
* categorical: one-hot over a vocabulary fit on training periods only.
  Nulls become the ``"NA"`` category; categories rarer than a frequency
  threshold collapse into ``"Others"``; categories unseen at fit time encode
  as an all-zeros block.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NA = "NA"
OTHERS = "Others"
NULL_TOKENS = frozenset({"", "NA", "NaN", "nan", "null", "NULL", "None"})
CONTINUOUS, CATEGORICAL = "continuous", "categorical"


class DataError(ValueError):
    pass


class TransformError(DataError):
    pass


# -- raw tables ---------------------------------------------------------------


@dataclass
class RawTable:
    """Column-oriented raw records; ``None`` marks a null cell."""

    columns: list  # [(name, kind)]
    data: dict  # name -> list of values
    timestamp: str
    label: str | None = None
    period_rule: dict = field(default_factory=lambda: {"mode": "index"})

    def __post_init__(self):
        n = {len(v) for v in self.data.values()}
        if len(n) > 1:
            raise DataError("all columns must have the same number of rows")
        for name, kind in self.columns:
            if kind not in (CONTINUOUS, CATEGORICAL):
                raise DataError(f"column {name!r}: unknown kind {kind!r}")
            if name not in self.data:
                raise DataError(f"column {name!r} declared but missing from data")
        if self.timestamp not in self.data:
            raise DataError(f"timestamp column {self.timestamp!r} missing")

    @property
    def n_rows(self) -> int:
        return len(self.data[self.timestamp])

    @property
    def kinds(self) -> dict:
        return dict(self.columns)

    def periods(self) -> np.ndarray:
        return np.asarray([to_period(v, self.period_rule) for v in self.data[self.timestamp]], dtype=np.int64)

    def labels(self) -> list | None:
        if self.label is None or self.label not in self.data:
            return None
        return self.data[self.label]


def _month_index(when: dt.datetime, start: dt.datetime) -> int:
    return (when.year - start.year) * 12 + when.month - start.month


def to_period(value, rule: dict) -> int:
    """Map a timestamp cell to a period index.

    ``mode`` is ``index`` (the cell already holds the period), ``offset_seconds``
    (seconds after ``start``, bucketed by calendar month) or ``date`` (ISO date,
    bucketed by calendar month relative to ``start``).
    """
    if value is None:
        raise DataError("null timestamp")
    mode = rule.get("mode", "index")
    if mode == "index":
        return int(float(value))
    start = dt.datetime.fromisoformat(rule["start"])
    if mode == "offset_seconds":
        when = start + dt.timedelta(seconds=float(value))
    elif mode == "date":
        when = dt.datetime.fromisoformat(str(value))
    else:
        raise DataError(f"unknown period mode {mode!r}")
    idx = _month_index(when, start)
    if idx < 0:
        raise DataError(f"timestamp {value!r} precedes period start {rule['start']}")
    return idx


def load_schema(path) -> dict:
    schema = json.loads(Path(path).read_text())
    for key in ("columns", "timestamp"):
        if key not in schema:
            raise DataError(f"schema missing {key!r}")
    return schema


def read_csv(csv_path, schema: dict) -> RawTable:
    """Read a comma-separated file with a header row, typed by ``schema``."""
    columns = [(c["name"], c["kind"]) for c in schema["columns"]]
    ts, label = schema["timestamp"], schema.get("label")
    wanted = [n for n, _ in columns] + [ts] + ([label] if label else [])
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty file") from None
        missing = [n for n in wanted if n not in header and n != label]
        if missing:
            raise DataError(f"{csv_path}: columns missing from header: {missing}")
        pos = {n: header.index(n) for n in wanted if n in header}
        data = {n: [] for n in pos}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{csv_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for n, i in pos.items():
                cell = row[i].strip()
                data[n].append(None if cell in NULL_TOKENS else cell)
    kinds = dict(columns)
    for n, vals in data.items():
        if kinds.get(n) == CONTINUOUS:
            try:
                data[n] = [None if v is None else float(v) for v in vals]
            except ValueError as e:
                raise DataError(f"column {n!r}: non-numeric value ({e})") from None
    if label and label not in data:
        label = None
    return RawTable(columns=columns, data=data, timestamp=ts, label=label,
                    period_rule=schema.get("period", {"mode": "index"}))


# -- preprocessing --------------------------------------------------------------


@dataclass(frozen=True)
class ColumnRule:
    transform: str = "identity"  # log10 | identity
    encoding: str = "none"  # one-hot | none
    null_fill: float | None = None
    freq_threshold: int = 0

    def __post_init__(self):
        if self.transform not in ("log10", "identity"):
            raise DataError(f"unknown transform {self.transform!r}")
        if self.encoding not in ("one-hot", "none"):
            raise DataError(f"unknown encoding {self.encoding!r}")
        if self.freq_threshold < 0:
            raise DataError("freq_threshold must be >= 0")


def rule_from_dict(d: dict) -> ColumnRule:
    unknown = set(d) - {"transform", "encoding", "null_fill", "freq_threshold"}
    if unknown:
        raise DataError(f"unknown rule fields {sorted(unknown)}")
    return ColumnRule(**d)


@dataclass
class PreprocessSpec:
    """Per-column rules; unlisted columns get kind defaults."""

    rules: dict = field(default_factory=dict)

    def rule_for(self, name: str, kind: str) -> ColumnRule:
        if name in self.rules:
            return self.rules[name]
        return ColumnRule(encoding="one-hot") if kind == CATEGORICAL else ColumnRule()

    def to_dict(self) -> dict:
        return {k: asdict(v) for k, v in self.rules.items()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "PreprocessSpec":
        return cls({k: rule_from_dict(v) for k, v in (d or {}).items()})


def fraud_table_spec() -> PreprocessSpec:
    """Rules for the card-not-present transaction columns (log10 amounts, -0.001 distance fill,
    one-hot categoricals with rare device/browser values pooled below 200 occurrences)."""
    one_hot = ColumnRule(encoding="one-hot")
    pooled = ColumnRule(encoding="one-hot", freq_threshold=200)
    rules = {
        "TransactionAmt": ColumnRule(transform="log10"),
        "dist1": ColumnRule(transform="log10", null_fill=-0.001),
        "dist2": ColumnRule(transform="log10", null_fill=-0.001),
        "ProductCD": one_hot,
        "card4": one_hot,
        "card6": one_hot,
        "device_name": pooled,
        "OS": one_hot,
        "Browser": pooled,
        "DeviceType": one_hot,
    }
    rules.update({f"M{i}": one_hot for i in range(1, 10)})
    return PreprocessSpec(rules)


@dataclass(frozen=True)
class FittedPreprocessor:
    """Immutable fitted state: output column plan plus per-column vocabularies."""

    columns: tuple  # ((name, kind, ColumnRule), ...)
    vocab: dict  # name -> tuple of categories (sorted)
    pooled: dict  # name -> frozenset of raw categories mapped to "Others"
    train_periods: tuple

    @property
    def feature_names(self) -> list[str]:
        names = []
        for name, kind, _ in self.columns:
            if kind == CATEGORICAL:
                names += [f"{name}={c}" for c in self.vocab[name]]
            else:
                names.append(name)
        return names

    def to_dict(self) -> dict:
        return {
            "columns": [{"name": n, "kind": k, "rule": asdict(r)} for n, k, r in self.columns],
            "vocab": {n: list(v) for n, v in self.vocab.items()},
            "pooled": {n: sorted(v) for n, v in self.pooled.items()},
            "train_periods": list(self.train_periods),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedPreprocessor":
        return cls(
            columns=tuple((c["name"], c["kind"], ColumnRule(**c["rule"])) for c in d["columns"]),
            vocab={n: tuple(v) for n, v in d["vocab"].items()},
            pooled={n: frozenset(v) for n, v in d["pooled"].items()},
            train_periods=tuple(d["train_periods"]),
        )


def fit_preprocessor(table: RawTable, spec: PreprocessSpec, training_period_filter) -> FittedPreprocessor:
    """Fit vocabularies on rows whose period is in ``training_period_filter``."""
    train_periods = sorted({int(p) for p in training_period_filter})
    if not train_periods:
        raise DataError("training_period_filter must be non-empty")
    kinds = table.kinds
    for name in spec.rules:
        if name not in kinds:
            raise DataError(f"rule for unknown column {name!r}")
    periods = table.periods()
    in_train = np.isin(periods, train_periods)
    plan, vocab, pooled = [], {}, {}
    for name, kind in table.columns:
        rule = spec.rule_for(name, kind)
        if kind == CONTINUOUS:
            if rule.encoding == "one-hot":
                raise DataError(f"continuous column {name!r} cannot be one-hot encoded")
            if rule.freq_threshold:
                raise DataError(f"frequency threshold given for continuous column {name!r}")
        else:
            if rule.encoding != "one-hot":
                raise DataError(f"categorical column {name!r} requires one-hot encoding")
            if rule.transform != "identity":
                raise DataError(f"categorical column {name!r} cannot take a numeric transform")
            counts = Counter(
                NA if v is None else str(v)
                for v, keep in zip(table.data[name], in_train) if keep
            )
            counts.pop(NA, None)
            rare = {c for c, k in counts.items() if k < rule.freq_threshold}
            kept = {c for c in counts if c not in rare} | {NA}
            if rare:
                kept.add(OTHERS)
            vocab[name] = tuple(sorted(kept))
            pooled[name] = frozenset(rare)
        plan.append((name, kind, rule))
    return FittedPreprocessor(columns=tuple(plan), vocab=vocab, pooled=pooled,
                              train_periods=tuple(train_periods))


@dataclass
class TemporalDataset:
    period: int
    X: np.ndarray
    Y: np.ndarray | None
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataError(f"X must be 2-D, got shape {self.X.shape}")
        if self.Y is not None:
            self.Y = np.asarray(self.Y, dtype=np.int64).ravel()
            if self.Y.shape[0] != self.X.shape[0]:
                raise DataError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def labeled(self) -> bool:
        return self.Y is not None

    @property
    def n_positive(self) -> int:
        return int(self.Y.sum()) if self.Y is not None else 0

    @property
    def positive_rate(self) -> float:
        return self.n_positive / self.n_rows if self.n_rows else 0.0

    def subset(self, idx) -> "TemporalDataset":
        return TemporalDataset(self.period, self.X[idx], None if self.Y is None else self.Y[idx],
                               list(self.feature_names))

    def without_labels(self) -> "TemporalDataset":
        return TemporalDataset(self.period, self.X, None, list(self.feature_names))

    def split_tail(self, fraction: float):
        """(head, tail) by row order, tail holding the last ``fraction`` of rows."""
        n_tail = int(math.floor(self.n_rows * fraction))
        cut = self.n_rows - n_tail
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))


def concat(datasets, period: int | None = None) -> TemporalDataset:
    if not datasets:
        raise DataError("nothing to concatenate")
    if any(d.Y is None for d in datasets):
        raise DataError("cannot concatenate unlabeled datasets")
    return TemporalDataset(
        datasets[-1].period if period is None else period,
        np.vstack([d.X for d in datasets]),
        np.concatenate([d.Y for d in datasets]),
        list(datasets[0].feature_names),
    )


def _encode_continuous(name, values, rule):
    out = np.empty(len(values))
    for i, v in enumerate(values):
        if v is None:
            if rule.null_fill is None:
                raise TransformError(f"row {i} column {name!r}: null value and no null_fill configured")
            out[i] = rule.null_fill
        elif rule.transform == "log10":
            if not v > 0:
                raise TransformError(f"row {i} column {name!r}: log10 of non-positive value {v!r}")
            out[i] = math.log10(v)
        else:
            out[i] = float(v)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise TransformError(f"row {bad} column {name!r}: non-finite value")
    return out[:, None]


def _encode_categorical(values, vocab, pooled):
    index = {c: j for j, c in enumerate(vocab)}
    out = np.zeros((len(values), len(vocab)))
    for i, v in enumerate(values):
        c = NA if v is None else str(v)
        if c in pooled:
            c = OTHERS
        j = index.get(c)
        if j is not None:
            out[i, j] = 1.0
    return out


def _labels_array(raw, name="label"):
    out = np.empty(len(raw), dtype=np.int64)
    for i, v in enumerate(raw):
        f = float(v)
        if f not in (0.0, 1.0):
            raise TransformError(f"row {i}: {name} must be 0/1, got {v!r}")
        out[i] = int(f)
    return out


def transform(table: RawTable, prep: FittedPreprocessor) -> dict:
    """Encode every row and split by period; returns ``{period: TemporalDataset}``.

    A period whose label cells are all null (or a table without a label column)
    yields an unlabeled dataset.
    """
    kinds = table.kinds
    blocks = []
    for name, kind, rule in prep.columns:
        if name not in kinds:
            raise DataError(f"column {name!r} missing from table")
        if kinds[name] != kind:
            raise DataError(f"column {name!r}: kind {kinds[name]!r} differs from fitted {kind!r}")
        values = table.data[name]
        if kind == CONTINUOUS:
            blocks.append(_encode_continuous(name, values, rule))
        else:
            blocks.append(_encode_categorical(values, prep.vocab[name], prep.pooled[name]))
    X = np.hstack(blocks) if blocks else np.zeros((table.n_rows, 0))
    periods = table.periods()
    raw_labels = table.labels()
    names = prep.feature_names
    out = {}
    for p in sorted(set(periods.tolist())):
        idx = np.flatnonzero(periods == p)
        Y = None
        if raw_labels is not None:
            cells = [raw_labels[i] for i in idx]
            present = [c is not None for c in cells]
            if all(present):
                Y = _labels_array(cells)
            elif any(present):
                raise TransformError(f"period {p}: label column partially null")
        out[p] = TemporalDataset(p, X[idx], Y, names)
    return out


# -- rebalancing ----------------------------------------------------------------


def rebalance(ds: TemporalDataset, target_positive_ratio: float, seed: int = 0) -> TemporalDataset:
    """Keep every positive, undersample negatives (without replacement) to the target ratio.

    Negatives kept = floor(n_pos * (1 - r) / r). Row order is preserved.
    """
    if ds.Y is None:
        raise DataError("cannot rebalance an unlabeled dataset")
    if not 0.0 < target_positive_ratio < 1.0:
        raise DataError(f"target ratio must be in (0, 1), got {target_positive_ratio}")
    pos = np.flatnonzero(ds.Y == 1)
    neg = np.flatnonzero(ds.Y == 0)
    if pos.size == 0 or neg.size == 0:
        raise DataError("rebalance needs both classes")
    r = target_positive_ratio
    want = int(math.floor(pos.size * (1.0 - r) / r + 1e-9))
    if want >= neg.size:
        if want > neg.size:
            log.info("period %d: only %d negatives for %d requested; achieved ratio %.4f",
                     ds.period, neg.size, want, pos.size / ds.n_rows)
        return ds.subset(np.arange(ds.n_rows))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(neg, size=want, replace=False)
    return ds.subset(np.sort(np.concatenate([pos, chosen])))


# -- synthetic drift --------------------------------------------------------------


@dataclass
class GaussianComponent:
    mean: list
    std: float | list = 1.0
    weight: float = 1.0
    velocity: list | None = None

    def center(self, t: int, d: int) -> np.ndarray:
        m = _pad(self.mean, d)
        if self.velocity is not None:
            m = m + t * _pad(self.velocity, d)
        return m


def _pad(v, d):
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if v.size > d:
        raise DataError(f"vector of length {v.size} exceeds n_features={d}")
    return np.concatenate([v, np.zeros(d - v.size)])


def _component(d) -> GaussianComponent:
    return d if isinstance(d, GaussianComponent) else GaussianComponent(**d)


@dataclass
class DriftGeneratorConfig:
    """Gaussian-mixture classes whose means move by ``velocity`` each period.

    ``recurrence`` maps a period to a strictly earlier period whose fraud-class
    distribution it reuses.
    """

    n_periods: int = 6
    samples_per_period: int | list = 10_000
    fraud_rate: float | list = 0.03
    n_features: int = 8
    normal: list = field(default_factory=lambda: [
        GaussianComponent(mean=[0.0], std=1.5, velocity=[0.1, 0.05]),
    ])
    fraud: list = field(default_factory=lambda: [
        GaussianComponent(mean=[-2.0, 2.0], std=0.6, velocity=[1.0, -0.5]),
        GaussianComponent(mean=[0.0, 0.0, 2.5], std=0.7, weight=0.3),
    ])
    recurrence: dict = field(default_factory=lambda: {4: 0, 5: 1})
    seed: int = 0

    def __post_init__(self):
        self.normal = [_component(c) for c in self.normal]
        self.fraud = [_component(c) for c in self.fraud]
        self.recurrence = {int(k): int(v) for k, v in self.recurrence.items()}
        self.validate()

    def sizes(self) -> list[int]:
        s = self.samples_per_period
        return [int(s)] * self.n_periods if np.isscalar(s) else [int(x) for x in s]

    def rates(self) -> list[float]:
        r = self.fraud_rate
        return [float(r)] * self.n_periods if np.isscalar(r) else [float(x) for x in r]

    def validate(self):
        if self.n_periods < 1:
            raise DataError("n_periods must be >= 1")
        if self.n_features < 1:
            raise DataError("n_features must be >= 1")
        sizes, rates = self.sizes(), self.rates()
        if len(sizes) != self.n_periods or len(rates) != self.n_periods:
            raise DataError("per-period sizes and rates must have n_periods entries")
        if any(s < 1 for s in sizes):
            raise DataError("every period needs at least one sample")
        if any(not 0.0 < r < 0.5 for r in rates):
            raise DataError("fraud rate must lie in (0, 0.5)")
        if not self.normal or not self.fraud:
            raise DataError("both classes need at least one mixture component")
        for t, s in self.recurrence.items():
            if not 0 <= s < t:
                raise DataError(f"recurrence {t} -> {s} must reference a strictly earlier period")
        for c in self.normal + self.fraud:
            c.center(0, self.n_features)
            if c.weight <= 0:
                raise DataError("component weights must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recurrence"] = {str(k): v for k, v in self.recurrence.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "DriftGeneratorConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)

    def fraud_time(self, t: int) -> int:
        """Period whose fraud distribution period ``t`` draws from."""
        while t in self.recurrence:
            t = self.recurrence[t]
        return t


def _sample_mixture(rng, comps, t, n, d):
    w = np.array([c.weight for c in comps], dtype=np.float64)
    which = rng.choice(len(comps), size=n, p=w / w.sum())
    X = np.empty((n, d))
    for k, c in enumerate(comps):
        rows = which == k
        std = _pad(c.std, d) if not np.isscalar(c.std) else np.full(d, float(c.std))
        X[rows] = c.center(t, d) + std * rng.standard_normal((int(rows.sum()), d))
    return X


def generate_drift(cfg: DriftGeneratorConfig) -> list[TemporalDataset]:
    cfg.validate()
    d = cfg.n_features
    out = []
    for t, (n, rate) in enumerate(zip(cfg.sizes(), cfg.rates())):
        rng = np.random.default_rng([cfg.seed, t])
        n_pos = min(max(1, int(round(rate * n))), n)
        Xn = _sample_mixture(rng, cfg.normal, t, n - n_pos, d)
        Xf = _sample_mixture(rng, cfg.fraud, cfg.fraud_time(t), n_pos, d)
        X = np.vstack([Xn, Xf])
        Y = np.r_[np.zeros(n - n_pos, dtype=np.int64), np.ones(n_pos, dtype=np.int64)]
        perm = rng.permutation(n)
        out.append(TemporalDataset(t, X[perm], Y[perm], [f"x{i}" for i in range(d)]))
    return out
