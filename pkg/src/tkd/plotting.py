"""Report figures written next to the delimited outputs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
# PNG metadata otherwise embeds the matplotlib version string
PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def auprc_bars(means, period: int, path) -> Path:
    """Mean AUPRC per candidate for one experiment period, averaged over its test months."""
    acc = defaultdict(list)
    for m in means:
        if m["period"] == period:
            acc[m["candidate"]].append(m["auprc_mean"])
    names = list(acc)
    vals = [sum(v) / len(v) for v in acc.values()]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = ["tab:red" if n.endswith("-TKD") else "tab:gray" if n.endswith("-LATEST") else "tab:blue"
                  for n in names]
        ax.bar(range(len(names)), vals, color=colors)
        ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
        ax.set_ylabel("AUPRC")
        ax.set_title(f"Mean AUPRC, experiment period {period}")
        for i, v in enumerate(vals):
            ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
        return _save(fig, path)


def delta_by_month(deltas, period: int, path, base_suffix: str = "") -> Path:
    """AUPRC delta of each distilled candidate over its counterpart per testing month."""
    series = defaultdict(list)
    for d in deltas:
        if d["period"] != period:
            continue
        if base_suffix and not d["base"].endswith(base_suffix):
            continue
        if not base_suffix and d["base"].endswith("-LATEST"):
            continue
        series[(d["tkd"], d["base"])].append((d["test_period"], d["delta"]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        width = 0.8 / max(1, len(series))
        for k, ((tkd, base), pts) in enumerate(sorted(series.items())):
            pts.sort()
            xs = [p + (k - (len(series) - 1) / 2) * width for p, _ in pts]
            ax.bar(xs, [v for _, v in pts], width=width, label=f"{tkd} vs {base}")
        ax.axhline(0.0, color="black", lw=0.8)
        ax.set_xlabel("testing period")
        ax.set_ylabel("AUPRC delta")
        ax.set_title(f"AUPRC delta per testing period, experiment period {period}")
        if series:
            ax.legend()
        return _save(fig, path)


def training_time(periods, cumulative_seconds, tkd_seconds, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(periods, cumulative_seconds, "o-", color="tab:blue", label="MLP-XG (cumulative)")
        ax.plot(periods, tkd_seconds, "s-", color="tab:red", label="MLP-XG-TKD (latest slice)")
        ax.set_xlabel("training period")
        ax.set_ylabel("mean training time (s)")
        ax.set_ylim(bottom=0)
        ax.legend()
        return _save(fig, path)


def render_experiment(report, out_dir, timing=None) -> list[Path]:
    """All experiment figures under ``out_dir/figures``."""
    fig_dir = Path(out_dir) / "figures"
    means = report.means()
    deltas = report.deltas()
    periods = sorted({m["period"] for m in means})
    paths = [auprc_bars(means, periods[-1], fig_dir / f"auprc_period_{periods[-1]}.png")]
    for p in periods[1:]:
        paths.append(delta_by_month(deltas, p, fig_dir / f"delta_period_{p}.png"))
        if any(d["base"].endswith("-LATEST") for d in deltas):
            paths.append(delta_by_month(deltas, p, fig_dir / f"delta_latest_period_{p}.png", "-LATEST"))
    series = report.timing_series()
    cum = {s["period"]: s["mean_seconds"] for s in series if s["candidate"] == "MLP-XG"}
    tkd = {s["period"]: s["mean_seconds"] for s in series if s["candidate"] == "MLP-XG-TKD"}
    if timing is not None:
        b, t = timing.series("cumulative"), timing.series("tkd")
        paths.append(training_time(list(range(len(b))), b, t, fig_dir / "training_time.png"))
    elif cum and tkd:
        ps = sorted(set(cum) & set(tkd))
        paths.append(training_time(ps, [cum[p] for p in ps], [tkd[p] for p in ps], fig_dir / "training_time.png"))
    return paths
