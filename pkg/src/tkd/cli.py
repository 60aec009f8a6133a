"""``tkd`` command line: synth, preprocess, train, distill, eval, experiment.

Parameters come from defaults, then the ``--config`` JSON file, then explicit
flags; later sources win. Machine-readable outputs go to ``--out`` only and a
short summary goes to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import data, gbt, harness, nn, persistence
from .distill import DistillError, generate_soft_labels
from .ensemble import EnsembleError
from .metrics import MetricError, Stopwatch, evaluate

log = logging.getLogger("tkd")

ERROR_MODULES = [
    (persistence.ArtifactError, "persistence"),
    (data.DataError, "data"),
    (nn.MlpError, "nn"),
    (gbt.GbtError, "gbt"),
    (DistillError, "distill"),
    (EnsembleError, "ensemble"),
    (MetricError, "metrics"),
    (harness.HarnessError, "harness"),
]


class UsageError(Exception):
    pass


def _read_config(path) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_datasets(path) -> list:
    p = Path(path)
    if p.suffix == ".bin":
        return [persistence.load_dataset(p)]
    return persistence.load_dataset_dir(p)


def _write_text(path, text: str):
    persistence.atomic_write(path, text.encode())


# -- synth ------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _read_config(args.config)
    cfg = cfg.get("synthetic", cfg)
    for flag, key in (("periods", "n_periods"), ("samples", "samples_per_period"),
                      ("fraud_rate", "fraud_rate"), ("n_features", "n_features"), ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            cfg[key] = v
    if cfg.get("n_periods", 1) < 1:
        raise UsageError("--periods must be >= 1")
    gen = data.DriftGeneratorConfig.from_dict(cfg)
    datasets = data.generate_drift(gen)
    out = _out_dir(args)
    persistence.save_dataset_dir(datasets, out, extra={"generator": gen.to_dict()})
    print(f"wrote {len(datasets)} periods to {out} "
          f"({', '.join(f'{d.n_rows} rows/{d.n_positive} pos' for d in datasets)})")
    return 0


# -- preprocess -------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    cfg = _read_config(args.config)
    for flag in ("csv", "schema", "preprocessor"):
        if getattr(args, flag):
            cfg[flag] = getattr(args, flag)
    if args.train_periods:
        cfg["train_periods"] = [int(x) for x in args.train_periods.split(",")]
    if args.unlabeled_periods is not None:
        cfg["unlabeled_periods"] = [int(x) for x in args.unlabeled_periods.split(",") if x]
    for key in ("csv", "schema"):
        if key not in cfg:
            raise UsageError(f"preprocess needs --{key}")
    schema = data.load_schema(cfg["schema"])
    table = data.read_csv(cfg["csv"], schema)
    if cfg.get("preprocessor"):
        prep = persistence.load_preprocessor(cfg["preprocessor"])
    else:
        if not cfg.get("train_periods"):
            raise UsageError("preprocess needs --train-periods (or --preprocessor)")
        preset = cfg.get("rules_preset", "fraud_table" if "rules" not in cfg else None)
        spec = data.fraud_table_spec() if preset == "fraud_table" else data.PreprocessSpec()
        if preset == "fraud_table":
            names = {n for n, _ in table.columns}
            spec = data.PreprocessSpec({k: v for k, v in spec.rules.items() if k in names})
        spec.rules.update(data.PreprocessSpec.from_dict(cfg.get("rules")).rules)
        prep = data.fit_preprocessor(table, spec, cfg["train_periods"])
    by_period = data.transform(table, prep)
    unlabeled = set(cfg.get("unlabeled_periods", []))
    for p, ds in by_period.items():
        if ds.Y is None and p not in unlabeled:
            raise data.DataError(f"period {p} has no label values but is not declared unlabeled")
        if p in unlabeled and ds.Y is not None:
            by_period[p] = ds.without_labels()
    out = _out_dir(args)
    datasets = [by_period[p] for p in sorted(by_period)]
    persistence.save_dataset_dir(datasets, out)
    persistence.save_preprocessor(prep, out / "preprocessor.json")
    print(f"wrote {len(datasets)} periods x {len(prep.feature_names)} features to {out}")
    return 0


# -- train / distill ------------------------------------------------------------------


def _experiment_cfg(args, cfg: dict | None = None) -> harness.ExperimentConfig:
    cfg = dict(_read_config(args.config) if cfg is None else cfg)
    if getattr(args, "seed", None) is not None:
        cfg["base_seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg["jobs"] = args.jobs
    return harness.ExperimentConfig.from_dict(cfg)


def _kinds(kind: str) -> tuple:
    return {"mlp": ("mlp",), "gbt": ("gbt",), "ensemble": ("mlp", "gbt")}[kind]


def _assemble(trained: harness.Trained, kind: str):
    return trained.candidate({"mlp": "MLP", "gbt": "XG", "ensemble": "MLP-XG"}[kind])


def cmd_train(args) -> int:
    cfg = _experiment_cfg(args)
    datasets = _load_datasets(args.data)
    if args.periods:
        wanted = {int(x) for x in args.periods.split(",")}
        datasets = [d for d in datasets if d.period in wanted]
    datasets = [d for d in datasets if d.labeled]
    if not datasets:
        raise data.DataError("no labeled periods selected for training")
    view = harness.PeriodView(datasets, [d.period for d in datasets])
    train_ds = harness.training_slice(cfg, view, [d.period for d in datasets], cfg.base_seed)
    trained = harness.fit_members(cfg, train_ds, cfg.base_seed, kinds=_kinds(args.kind))
    model, secs = _assemble(trained, args.kind)
    out = _out_dir(args)
    persistence.save_model(model, out / "model.json")
    if args.registry is not None:
        _register(args.registry, args.register_period if args.register_period is not None
                  else max(d.period for d in datasets), model)
    print(f"trained {args.kind} on {train_ds.n_rows} rows in {secs:.2f}s -> {out / 'model.json'}")
    return 0


def _register(directory, period: int, model):
    reg = persistence.load_registry(directory)
    reg.add(period, model)
    persistence.save_registry(reg, directory)


def cmd_distill(args) -> int:
    cfg = _experiment_cfg(args)
    registry = persistence.load_registry(args.registry)
    t = args.period
    if not registry.eligible(t, cfg.loss.K):
        raise DistillError(f"no eligible teachers for period {t} in registry {args.registry}")
    candidates = [d for d in _load_datasets(args.data) if d.period == t]
    if not candidates:
        raise data.DataError(f"data has no period {t}")
    view = harness.PeriodView(candidates, [t])
    trained = harness.run_tkd(cfg, view, t, registry, cfg.base_seed, kinds=_kinds(args.kind))
    model, secs = _assemble(trained, args.kind)
    out = _out_dir(args)
    persistence.save_model(model, out / "model.json")
    train_ds = harness.training_slice(cfg, view, [t], cfg.base_seed)
    for s in generate_soft_labels(registry, train_ds.X, t, cfg.loss.K):
        persistence.save_soft_labels(s, out / "soft_labels" / f"teacher_{s.teacher_period}_target_{t}.bin")
    if args.register:
        _register(args.registry, t, model)
    print(f"distilled {args.kind} for period {t} from {trained.n_teachers} teachers "
          f"on {trained.train_rows} rows in {secs:.2f}s -> {out / 'model.json'}")
    return 0


# -- eval ------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    model = persistence.load_model(args.model)
    datasets = [d for d in _load_datasets(args.data) if d.labeled]
    if not datasets:
        raise data.DataError("evaluation data has no labels")
    out = _out_dir(args)
    reports = {}
    for ds in datasets:
        ev = evaluate(model.predict_proba_rows(ds.X)[:, 1], ds.Y, seed=args.seed)
        reports[str(ds.period)] = ev.to_dict()
        print(f"period {ds.period}: AUPRC {ev.auprc:.4f} AUROC {ev.auroc:.4f} "
              f"({ev.n_positive}/{ev.n_samples} positive)")
    persistence.save_json("eval_report", {"model": str(args.model), "periods": reports}, out / "eval.json")
    return 0


# -- experiment ------------------------------------------------------------------------


def cmd_experiment(args) -> int:
    raw = _read_config(args.config)
    timing_opt = raw.pop("timing", False)
    cfg = _experiment_cfg(args, raw)
    if args.runs is not None:
        cfg.runs = args.runs
    out = _out_dir(args)
    datasets = harness.load_data(cfg)

    def flush_partial(partial):
        _write_text(out / "runs.partial.csv", partial.runs_csv())
        log.warning("experiment failed; %d partial rows written to %s", len(partial.rows),
                    out / "runs.partial.csv")

    with Stopwatch() as sw:
        report = harness.run_experiment(cfg, datasets, on_failure=flush_partial)
    persistence.save_json("report", report.to_json_body(), out / "report.json", config=cfg.to_dict())
    _write_text(out / "runs.csv", report.runs_csv())
    _write_text(out / "timing.csv", report.timing_csv())
    _write_text(out / "deltas.csv", report.deltas_csv())
    timing = None
    if timing_opt or args.timing:
        timing = harness.run_timing(cfg, datasets)
        _write_text(out / "timing_all_periods.csv", timing.csv())
    if not args.no_figures:
        from . import plotting
        plotting.render_experiment(report, out, timing)
    print(f"experiment: {len(cfg.all_candidates)} candidates x {len(report.schedule['assignments'])} "
          f"periods x {cfg.runs} runs in {sw.seconds:.1f}s -> {out}")
    for d in report.delta_summary():
        if d["period"] == 0:
            continue
        print(f"  period {d['period']}: {d['tkd']:<11} vs {d['base']:<14} "
              f"delta {d['mean_delta']:+.4f} ({d['mean_relative_pct']:+.1f}%)")
    if timing is not None:
        print(f"  training time reduced by {timing.average_reduction_pct():.1f}% on average")
    return 0


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its fields")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=None, help="parallel worker processes (default 1)")
    common.add_argument("--verbose", "-v", action="count", default=0)

    parser = argparse.ArgumentParser(prog="tkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic drift periods")
    p.add_argument("--periods", type=int)
    p.add_argument("--samples", type=int, help="samples per period")
    p.add_argument("--fraud-rate", type=float)
    p.add_argument("--n-features", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="encode a raw CSV into period files")
    p.add_argument("--csv")
    p.add_argument("--schema")
    p.add_argument("--train-periods", help="comma-separated periods to fit vocabularies on")
    p.add_argument("--unlabeled-periods", help="comma-separated periods whose labels are withheld")
    p.add_argument("--preprocessor", help="reuse a saved preprocessor.json instead of fitting")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train a model on the union of labeled periods")
    p.add_argument("--data", required=True, help="dataset directory, manifest.json or period .bin")
    p.add_argument("--periods", help="comma-separated subset of periods")
    p.add_argument("--kind", choices=("mlp", "gbt", "ensemble"), default="ensemble")
    p.add_argument("--registry", help="also register the model as a teacher in this registry")
    p.add_argument("--register-period", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", parents=[common], help="train a student on one period with registry teachers")
    p.add_argument("--period", type=int, required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("mlp", "gbt", "ensemble"), default="ensemble")
    p.add_argument("--register", action="store_true", help="add the student to the registry as M_period")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="AUPRC/AUROC of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", parents=[common], help="rolling-period baseline vs distillation study")
    p.add_argument("--runs", type=int)
    p.add_argument("--timing", action="store_true", help="also time cumulative vs distilled over every period")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"tkd {args.command}: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"tkd {args.command}: error [io]: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        for cls, module in ERROR_MODULES:
            if isinstance(e, cls):
                print(f"tkd {args.command}: error [{module}]: {e}", file=sys.stderr)
                return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
