"""Rolling-period experiment: cumulative retraining versus latest-slice distillation.

For experiment period ``p`` over ``N`` periods the model trains on periods
``0..p``, period ``p+1`` is the unlabeled (label-delay) month, and periods
``p+2..N-1`` are tested. Distilled students train on period ``p`` alone with
soft labels from the registered teachers ``M_K..M_{p-1}``.

Teachers are MLP+GBT ensembles trained once per period with the base seed: the
cumulative ensemble at period 0, then each period's distilled ensemble.
Repeated runs reuse that registry and vary only the students.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gbt, nn
from .data import DataError, DriftGeneratorConfig, TemporalDataset, concat, generate_drift, rebalance
from .distill import DistillError, TeacherRegistry, TkdLossConfig, generate_soft_labels
from .ensemble import EnsembleModel
from .metrics import Stopwatch, delta, evaluate

log = logging.getLogger(__name__)

BASE_CANDIDATES = ("MLP", "XG", "MLP-XG")
TKD_CANDIDATES = ("MLP-TKD", "XG-TKD", "MLP-XG-TKD")
LATEST_CANDIDATES = ("MLP-LATEST", "XG-LATEST", "MLP-XG-LATEST")
ALL_CANDIDATES = BASE_CANDIDATES + TKD_CANDIDATES
# candidate -> member kinds it averages
MEMBERS = {"MLP": ("mlp",), "XG": ("gbt",), "MLP-XG": ("mlp", "gbt")}
# (distilled candidate, counterpart) pairs reported in delta tables
PAIRS = [(t, b) for t, b in zip(TKD_CANDIDATES, BASE_CANDIDATES)]
LATEST_PAIRS = [(t, b) for t, b in zip(TKD_CANDIDATES, LATEST_CANDIDATES)]


class HarnessError(RuntimeError):
    pass


def _family(candidate: str) -> tuple[str, str]:
    """Split ``'MLP-XG-TKD'`` into (``'MLP-XG'``, ``'tkd'``)."""
    for suffix, regime in (("-TKD", "tkd"), ("-LATEST", "latest")):
        if candidate.endswith(suffix):
            return candidate[: -len(suffix)], regime
    return candidate, "cumulative"


# -- schedule -------------------------------------------------------------------


@dataclass(frozen=True)
class PeriodAssignment:
    period: int
    train: tuple
    no_label: int
    test: tuple

    def to_dict(self) -> dict:
        return {"period": self.period, "train": list(self.train), "no_label": self.no_label,
                "test": list(self.test)}


@dataclass(frozen=True)
class PeriodSchedule:
    n_periods: int
    assignments: tuple

    def __iter__(self):
        return iter(self.assignments)

    def __len__(self):
        return len(self.assignments)

    def __getitem__(self, p) -> PeriodAssignment:
        return self.assignments[p]

    def to_dict(self) -> dict:
        return {"n_periods": self.n_periods, "assignments": [a.to_dict() for a in self.assignments]}


def build_schedule(N: int) -> PeriodSchedule:
    """Experiment periods ``0..N-3``: train ``{0..p}``, hold out ``p+1``, test ``{p+2..N-1}``."""
    if N < 3:
        raise HarnessError(f"need at least 3 periods for a testing period, got {N}")
    rows = tuple(
        PeriodAssignment(p, tuple(range(p + 1)), p + 1, tuple(range(p + 2, N)))
        for p in range(N - 2)
    )
    return PeriodSchedule(N, rows)


# -- configuration ----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    candidates: list = field(default_factory=lambda: list(ALL_CANDIDATES))
    runs: int = 10
    base_seed: int = 0
    loss: TkdLossConfig = field(default_factory=TkdLossConfig)
    rebalance_ratio: float | None = 0.1
    validation_fraction: float = 0.1
    mlp: nn.MlpConfig = field(default_factory=nn.MlpConfig)
    gbt: gbt.GbtConfig = field(default_factory=gbt.GbtConfig)
    min_child_weight_scale: float = 1.0
    latest_baselines: bool = False
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    jobs: int = 1

    def __post_init__(self):
        if self.runs < 1:
            raise HarnessError("runs must be >= 1")
        if not self.candidates:
            raise HarnessError("candidate list is empty")
        allowed = set(ALL_CANDIDATES) | set(LATEST_CANDIDATES)
        bad = [c for c in self.candidates if c not in allowed]
        if bad:
            raise HarnessError(f"unknown candidates {bad}; choose from {sorted(allowed)}")
        if self.rebalance_ratio is not None and not 0 < self.rebalance_ratio < 1:
            raise HarnessError("rebalance_ratio must be in (0, 1) or null")
        if not 0 <= self.validation_fraction < 1:
            raise HarnessError("validation_fraction must be in [0, 1)")
        if self.min_child_weight_scale < 0:
            raise HarnessError("min_child_weight_scale must be >= 0")

    @property
    def gbt_config(self) -> gbt.GbtConfig:
        d = self.gbt.to_dict()
        d["min_child_weight"] = self.gbt.min_child_weight * self.min_child_weight_scale
        return gbt.GbtConfig.from_dict(d)

    @property
    def all_candidates(self) -> list[str]:
        out = list(self.candidates)
        if self.latest_baselines:
            out += [c for c in LATEST_CANDIDATES if c not in out]
        return out

    def to_dict(self) -> dict:
        return {
            "candidates": list(self.candidates),
            "runs": self.runs,
            "base_seed": self.base_seed,
            "loss": self.loss.to_dict(),
            "rebalance_ratio": self.rebalance_ratio,
            "validation_fraction": self.validation_fraction,
            "mlp": self.mlp.to_dict(),
            "gbt": self.gbt.to_dict(),
            "min_child_weight_scale": self.min_child_weight_scale,
            "latest_baselines": self.latest_baselines,
            "data": self.data,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise HarnessError(f"unknown experiment config fields: {sorted(unknown)}")
        if "loss" in d:
            d["loss"] = TkdLossConfig.from_dict(d["loss"])
        if "mlp" in d:
            d["mlp"] = nn.MlpConfig.from_dict(d["mlp"])
        if "gbt" in d:
            d["gbt"] = gbt.GbtConfig.from_dict(d["gbt"])
        return cls(**d)


def load_data(cfg: ExperimentConfig) -> list[TemporalDataset]:
    """Materialize the configured data source as a period-ordered list."""
    src = cfg.data or {"synthetic": {}}
    if "synthetic" in src:
        return generate_drift(DriftGeneratorConfig.from_dict(src["synthetic"]))
    if "manifest" in src:
        from .persistence import load_dataset_dir
        return load_dataset_dir(src["manifest"])
    raise HarnessError(f"data source needs 'synthetic' or 'manifest', got {sorted(src)}")


# -- label-delay enforcement ------------------------------------------------------


class PeriodView:
    """Read access to the periods one experiment period may touch.

    Training may read periods ``0..p`` and evaluation ``p+2..``; the no-label
    period is never handed out with labels.
    """

    def __init__(self, datasets, train_periods, test_periods=(), no_label=None):
        self._data = {d.period: d for d in datasets}
        self.train_periods = set(train_periods)
        self.test_periods = set(test_periods)
        self.no_label = no_label
        self.accessed: list[tuple[str, int]] = []

    def train(self, i: int) -> TemporalDataset:
        if i not in self.train_periods:
            raise HarnessError(f"period {i} is not a training period here")
        return self._get(i, "train")

    def test(self, i: int) -> TemporalDataset:
        if i not in self.test_periods:
            raise HarnessError(f"period {i} is not a testing period here")
        return self._get(i, "test")

    def unlabeled(self, i: int) -> TemporalDataset:
        return self._get(i, "unlabeled").without_labels()

    def _get(self, i, role):
        if i not in self._data:
            raise HarnessError(f"missing data for period {i}")
        ds = self._data[i]
        if role != "unlabeled" and ds.Y is None:
            raise HarnessError(f"period {i} has no labels")
        self.accessed.append((role, i))
        return ds


def view_for(datasets, assignment: PeriodAssignment) -> PeriodView:
    return PeriodView(datasets, assignment.train, assignment.test, assignment.no_label)


# -- training -----------------------------------------------------------------------


@dataclass
class Trained:
    """Member models of one training regime plus bookkeeping."""

    models: dict  # kind -> model
    seconds: dict  # kind -> fit seconds
    train_rows: int
    soft_seconds: float = 0.0
    n_teachers: int = 0

    def candidate(self, family: str):
        kinds = MEMBERS[family]
        model = self.models[kinds[0]] if len(kinds) == 1 else EnsembleModel([self.models[k] for k in kinds])
        secs = self.soft_seconds + sum(self.seconds[k] for k in kinds)
        return model, secs


def _rebalance_seed(seed: int, period: int) -> int:
    return int(np.random.SeedSequence([seed, period, 7]).generate_state(1)[0])


def training_slice(cfg: ExperimentConfig, view: PeriodView, periods, seed: int) -> TemporalDataset:
    parts = []
    for i in periods:
        ds = view.train(i)
        if cfg.rebalance_ratio is not None:
            ds = rebalance(ds, cfg.rebalance_ratio, _rebalance_seed(seed, i))
        parts.append(ds)
    return concat(parts, period=max(periods))


def fit_members(cfg: ExperimentConfig, train_ds: TemporalDataset, seed: int, soft=None,
                kinds=("mlp", "gbt")) -> Trained:
    """Fit the requested member kinds, timing each fit only."""
    models, seconds = {}, {}
    soft_arrays = [s.probs for s in soft] if soft else []
    if "mlp" in kinds:
        head, tail = train_ds.split_tail(cfg.validation_fraction) if cfg.validation_fraction else (train_ds, None)
        head_soft = [a[: head.n_rows] for a in soft_arrays]
        with Stopwatch() as sw:
            models["mlp"], _ = nn.train(cfg.mlp, head, tail, head_soft or None, cfg.loss, seed=seed)
        seconds["mlp"] = sw.seconds
    if "gbt" in kinds:
        objective = gbt.BoostObjective(
            np.stack([a[:, 1] for a in soft_arrays]) if soft_arrays else None,
            alpha=cfg.loss.alpha, agg=cfg.loss.agg, form=cfg.loss.form, eps=cfg.loss.eps,
        )
        with Stopwatch() as sw:
            models["gbt"] = gbt.fit(cfg.gbt_config, train_ds, objective, seed=seed)
        seconds["gbt"] = sw.seconds
    return Trained(models, seconds, train_ds.n_rows)


def run_baseline(cfg: ExperimentConfig, view: PeriodView, p: int, seed: int | None = None,
                 kinds=("mlp", "gbt")) -> Trained:
    """Cumulative retraining on every labeled period ``0..p``."""
    seed = cfg.base_seed if seed is None else seed
    train_ds = training_slice(cfg, view, range(p + 1), seed)
    return fit_members(cfg, train_ds, seed, kinds=kinds)


def run_latest(cfg: ExperimentConfig, view: PeriodView, p: int, seed: int | None = None,
               kinds=("mlp", "gbt")) -> Trained:
    """Period ``p`` only, no teachers."""
    seed = cfg.base_seed if seed is None else seed
    return fit_members(cfg, training_slice(cfg, view, [p], seed), seed, kinds=kinds)


def run_tkd(cfg: ExperimentConfig, view: PeriodView, p: int, registry: TeacherRegistry,
            seed: int | None = None, kinds=("mlp", "gbt")) -> Trained:
    """Students on period ``p`` only, regularized by teachers ``M_K..M_{p-1}``.

    Timing covers soft-label generation plus each student fit.
    """
    seed = cfg.base_seed if seed is None else seed
    if not registry.eligible(p, cfg.loss.K):
        raise DistillError(f"no eligible teachers for period {p} (K={cfg.loss.K}); "
                           "period 0 must use the cumulative baseline")
    train_ds = training_slice(cfg, view, [p], seed)
    with Stopwatch() as sw:
        soft = generate_soft_labels(registry, train_ds.X, p, cfg.loss.K)
    out = fit_members(cfg, train_ds, seed, soft=soft, kinds=kinds)
    out.soft_seconds = sw.seconds
    out.n_teachers = len(soft)
    return out


# -- experiment --------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: dict
    schedule: dict
    rows: list  # one dict per (candidate, period, run, test period)
    timing: list  # one dict per (candidate, period, run)
    registry_periods: list
    accessed: list = field(default_factory=list)

    def means(self) -> list[dict]:
        groups = defaultdict(list)
        for r in self.rows:
            groups[(r["candidate"], r["period"], r["test_period"])].append(r)
        out = []
        for (c, p, tp), rs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0])):
            a = np.array([r["auprc"] for r in rs])
            out.append({
                "candidate": c, "period": p, "test_period": tp, "n_runs": len(rs),
                "auprc_mean": float(a.mean()), "auprc_std": float(a.std()),
                "auroc_mean": float(np.mean([r["auroc"] for r in rs])),
            })
        return out

    def _mean_lookup(self):
        return {(m["candidate"], m["period"], m["test_period"]): m["auprc_mean"] for m in self.means()}

    def deltas(self, pairs=None) -> list[dict]:
        """Per (pair, period, test month) delta of mean AUPRC."""
        lookup = self._mean_lookup()
        present = {r["candidate"] for r in self.rows}
        pairs = pairs or [pr for pr in PAIRS + LATEST_PAIRS if pr[0] in present and pr[1] in present]
        out = []
        for (c, p, tp), v in sorted(lookup.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0])):
            for tkd_name, base_name in pairs:
                if c != tkd_name or (base_name, p, tp) not in lookup:
                    continue
                d = delta(lookup[(base_name, p, tp)], v)
                out.append({"tkd": tkd_name, "base": base_name, "period": p, "test_period": tp,
                            "base_auprc": d.base_auprc, "tkd_auprc": d.tkd_auprc,
                            "delta": d.delta, "relative_pct": d.relative_pct})
        return out

    def delta_summary(self) -> list[dict]:
        groups = defaultdict(list)
        for d in self.deltas():
            groups[(d["tkd"], d["base"], d["period"])].append(d)
        return [
            {"tkd": t, "base": b, "period": p, "n_months": len(ds),
             "mean_delta": float(np.mean([d["delta"] for d in ds])),
             "mean_relative_pct": float(np.mean([d["relative_pct"] for d in ds]))}
            for (t, b, p), ds in sorted(groups.items(), key=lambda kv: (kv[0][2], kv[0][0], kv[0][1]))
        ]

    def timing_series(self) -> list[dict]:
        groups = defaultdict(list)
        for t in self.timing:
            groups[(t["candidate"], t["period"])].append(t)
        return [
            {"candidate": c, "period": p, "mean_seconds": float(np.mean([t["seconds"] for t in ts])),
             "train_rows": ts[0]["train_rows"], "n_runs": len(ts)}
            for (c, p), ts in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        ]

    def mean_auprc(self, candidate: str, periods=None, test_periods=None) -> float:
        vals = [r["auprc"] for r in self.rows if r["candidate"] == candidate
                and (periods is None or r["period"] in periods)
                and (test_periods is None or r["test_period"] in test_periods)]
        if not vals:
            raise HarnessError(f"no rows for {candidate}")
        return float(np.mean(vals))

    def to_json_body(self) -> dict:
        """Deterministic content only; wall-clock timings live in the CSV outputs."""
        rows = [{k: v for k, v in r.items()} for r in self.rows]
        return {
            "config": self.config,
            "schedule": self.schedule,
            "registry_periods": self.registry_periods,
            "rows": rows,
            "means": self.means(),
            "deltas": self.deltas(),
            "delta_summary": self.delta_summary(),
            "train_rows": [{"candidate": t["candidate"], "period": t["period"], "train_rows": t["train_rows"]}
                           for t in self.timing_series()],
        }

    def runs_csv(self) -> str:
        return _csv(self.rows_with_timing(), ["candidate", "period", "run", "seed", "test_period", "auprc",
                                              "auroc", "n_samples", "n_positive", "train_rows", "train_seconds"])

    def rows_with_timing(self) -> list[dict]:
        secs = {(t["candidate"], t["period"], t["run"]): t["seconds"] for t in self.timing}
        return [dict(r, train_seconds=secs.get((r["candidate"], r["period"], r["run"]))) for r in self.rows]

    def timing_csv(self) -> str:
        return _csv(self.timing_series(), ["candidate", "period", "mean_seconds", "train_rows", "n_runs"])

    def deltas_csv(self) -> str:
        return _csv(self.deltas(), ["tkd", "base", "period", "test_period", "base_auprc", "tkd_auprc",
                                    "delta", "relative_pct"])


def _csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _needs(cands):
    regimes = defaultdict(set)
    for c in cands:
        fam, regime = _family(c)
        regimes[regime].update(MEMBERS[fam])
    return regimes


def _run_one(cfg: ExperimentConfig, datasets, schedule, registry, run: int, build_registry: bool,
             sink=None):
    """One seeded run over every experiment period.

    ``sink``, if given, is a ``(rows, timing, accessed)`` triple of lists that
    receives results as they are produced.
    """
    seed = cfg.base_seed + run
    cands = cfg.all_candidates
    needs = _needs(cands)
    if build_registry and needs.get("tkd"):
        # the teacher chain needs both members at every period
        needs["tkd"] = {"mlp", "gbt"}
        needs["cumulative"] = needs["cumulative"] | {"mlp", "gbt"}
    rows, timing, accessed = sink if sink is not None else ([], [], [])
    for a in schedule:
        p = a.period
        view = view_for(datasets, a)
        trained = {}
        cum_kinds = set(needs.get("cumulative", set()))
        if p == 0:
            cum_kinds |= needs.get("tkd", set()) | needs.get("latest", set())
        if cum_kinds:
            trained["cumulative"] = run_baseline(cfg, view, p, seed, tuple(sorted(cum_kinds)))
        if needs.get("latest"):
            trained["latest"] = (trained["cumulative"] if p == 0
                                 else run_latest(cfg, view, p, seed, tuple(sorted(needs["latest"]))))
        if needs.get("tkd"):
            trained["tkd"] = (trained["cumulative"] if p == 0
                              else run_tkd(cfg, view, p, registry, seed, tuple(sorted(needs["tkd"]))))
            if build_registry:
                t = trained["tkd"]
                registry.add(p, EnsembleModel([t.models["mlp"], t.models["gbt"]]))
        for c in cands:
            fam, regime = _family(c)
            model, secs = trained[regime].candidate(fam)
            timing.append({"candidate": c, "period": p, "run": run, "seconds": secs,
                           "train_rows": trained[regime].train_rows})
            for tp in a.test:
                test = view.test(tp)
                scores = model.predict_proba_rows(test.X)[:, 1]
                ev = evaluate(scores, test.Y)
                rows.append({"candidate": c, "period": p, "run": run, "seed": seed, "test_period": tp,
                             "auprc": ev.auprc, "auroc": ev.auroc, "n_samples": ev.n_samples,
                             "n_positive": ev.n_positive, "train_rows": trained[regime].train_rows})
        accessed.append({"period": p, "accessed": sorted(set(view.accessed))})
        log.info("run %d period %d done", run, p)
    return rows, timing, accessed


def _run_worker(args):
    return _run_one(*args)


def run_experiment(cfg: ExperimentConfig, datasets=None, on_failure=None) -> ExperimentReport:
    """Every candidate x experiment period x run; seeds are ``base_seed + run``.

    If a run fails, ``on_failure`` (when given) receives the partial report
    before the exception propagates.
    """
    datasets = load_data(cfg) if datasets is None else datasets
    periods = [d.period for d in datasets]
    if periods != list(range(len(periods))):
        raise DataError(f"periods must be 0..N-1 without gaps, got {periods}")
    schedule = build_schedule(len(datasets))
    registry = TeacherRegistry()
    rows, timing, accessed = [], [], []

    def report():
        return ExperimentReport(
            config=cfg.to_dict(), schedule=schedule.to_dict(), rows=rows, timing=timing,
            registry_periods=registry.periods, accessed=accessed,
        )

    try:
        _run_one(cfg, datasets, schedule, registry, 0, True, sink=(rows, timing, accessed))
        rest = range(1, cfg.runs)
        if cfg.jobs > 1 and len(rest) > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
                jobs = [(cfg, datasets, schedule, registry, r, False) for r in rest]
                for r_rows, r_timing, _ in ex.map(_run_worker, jobs):
                    rows += r_rows
                    timing += r_timing
        else:
            for r in rest:
                _run_one(cfg, datasets, schedule, registry, r, False, sink=(rows, timing, []))
    except Exception:
        if on_failure is not None:
            on_failure(report())
        raise
    return report()


# -- training-time series over every period ------------------------------------------


@dataclass
class TimingReport:
    rows: list  # {strategy, period, run, seconds, train_rows, n_teachers}

    def series(self, strategy: str) -> list[float]:
        groups = defaultdict(list)
        for r in self.rows:
            if r["strategy"] == strategy:
                groups[r["period"]].append(r["seconds"])
        return [float(np.mean(groups[p])) for p in sorted(groups)]

    def train_rows(self, strategy: str) -> list[int]:
        seen = {}
        for r in self.rows:
            if r["strategy"] == strategy:
                seen[r["period"]] = r["train_rows"]
        return [seen[p] for p in sorted(seen)]

    def average_reduction_pct(self) -> float:
        b, t = np.array(self.series("cumulative")), np.array(self.series("tkd"))
        return float((1.0 - t.sum() / b.sum()) * 100.0)

    def csv(self) -> str:
        out = []
        b, t = self.series("cumulative"), self.series("tkd")
        br, tr = self.train_rows("cumulative"), self.train_rows("tkd")
        for p in range(len(b)):
            out.append({"period": p, "cumulative_seconds": b[p], "tkd_seconds": t[p],
                        "cumulative_rows": br[p], "tkd_rows": tr[p], "speedup": b[p] / t[p]})
        return _csv(out, ["period", "cumulative_seconds", "tkd_seconds", "cumulative_rows", "tkd_rows", "speedup"])


def run_timing(cfg: ExperimentConfig, datasets=None, runs: int | None = None) -> TimingReport:
    """MLP-XG cumulative vs MLP-XG distilled wall-clock over every period ``0..N-1``.

    Unlike the evaluation schedule this trains through the final period, since
    no testing month is needed.
    """
    datasets = load_data(cfg) if datasets is None else datasets
    N = len(datasets)
    runs = cfg.runs if runs is None else runs
    registry = TeacherRegistry()
    rows = []
    for run in range(runs):
        seed = cfg.base_seed + run
        for p in range(N):
            view = PeriodView(datasets, range(p + 1))
            base = run_baseline(cfg, view, p, seed)
            _, base_secs = base.candidate("MLP-XG")
            rows.append({"strategy": "cumulative", "period": p, "run": run, "seconds": base_secs,
                         "train_rows": base.train_rows, "n_teachers": 0})
            if p == 0:
                tkd = base
            else:
                tkd = run_tkd(cfg, view, p, registry, seed)
            _, tkd_secs = tkd.candidate("MLP-XG")
            rows.append({"strategy": "tkd", "period": p, "run": run, "seconds": tkd_secs,
                         "train_rows": tkd.train_rows, "n_teachers": tkd.n_teachers})
            if run == 0:
                registry.add(p, EnsembleModel([tkd.models["mlp"], tkd.models["gbt"]]))
    return TimingReport(rows)
