"""Summaries, run comparison and plots built from metric logs."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .pipeline import read_metrics, window_means


class IncompleteRun(FileNotFoundError):
    pass


def convergence_time(t, h2, frac: float = 0.1) -> float:
    """First time the moving-average H2 comes within 10% of the total drop
    of its trailing level.

    The average is causal (window n/20, reported at its last sample).  A
    series that never drops converges at its first sample.
    """
    t = np.asarray(t, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    lead, trail = window_means(h2, frac)
    if lead <= trail:
        return float(t[0])
    w = max(1, h2.size // 20)
    smooth = np.convolve(h2, np.ones(w) / w, mode="valid")
    below = np.nonzero(smooth <= trail + 0.1 * (lead - trail))[0]
    k = below[0] + w - 1 if below.size else t.size - 1
    return float(t[k])


def summarize_h2(t, h2) -> dict:
    h2 = np.asarray(h2, dtype=float)
    lead, trail = window_means(h2, 0.1)
    q = max(1, h2.size // 4)
    return {
        "mean_h2": float(h2.mean()),
        "leading_mean_h2": lead,
        "trailing_mean_h2": trail,
        "final_quarter_mean_h2": float(h2[-q:].mean()),
        "convergence_time": convergence_time(t, h2),
    }


def load_run(run_dir) -> tuple[dict, list[dict]]:
    run_dir = Path(run_dir)
    for name in ("manifest.json", "metrics.csv"):
        if not (run_dir / name).is_file():
            raise IncompleteRun(f"{run_dir}: missing {name}")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    if manifest.get("status") != "ok":
        raise IncompleteRun(f"{run_dir}: run did not complete (status {manifest.get('status')!r})")
    return manifest, read_metrics(run_dir / "metrics.csv")


def _by_stage(rows) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out: dict[str, list] = {}
    for r in rows:
        out.setdefault(r["stage"], []).append((r["t"], r["h2"]))
    return {k: (np.array([a for a, _ in v]), np.array([b for _, b in v])) for k, v in out.items()}


COMPARE_COLUMNS = ["stage", "metric", "run_a", "run_b", "delta"]


def compare_runs(dir_a, dir_b) -> list[dict]:
    """Per-stage mean/trailing H2 and convergence time of two runs (delta = b - a)."""
    _, rows_a = load_run(dir_a)
    _, rows_b = load_run(dir_b)
    sa, sb = _by_stage(rows_a), _by_stage(rows_b)
    order = list(sa) + [k for k in sb if k not in sa]
    out = []
    for stage in order:
        ma = summarize_h2(*sa[stage]) if stage in sa else {}
        mb = summarize_h2(*sb[stage]) if stage in sb else {}
        for metric in ("mean_h2", "trailing_mean_h2", "convergence_time"):
            a, b = ma.get(metric), mb.get(metric)
            delta = b - a if a is not None and b is not None else None
            out.append({"stage": stage, "metric": metric, "run_a": a, "run_b": b, "delta": delta})
    return out


def comparison_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in COMPARE_COLUMNS])
    return buf.getvalue()


def comparison_table(rows) -> str:
    fmt = lambda v: "-" if v is None else f"{v:.6g}"  # noqa: E731
    lines = [f"{'stage':<12} {'metric':<18} {'run A':>12} {'run B':>12} {'B - A':>12}"]
    for r in rows:
        lines.append(f"{r['stage']:<12} {r['metric']:<18} {fmt(r['run_a']):>12} {fmt(r['run_b']):>12} {fmt(r['delta']):>12}")
    return "\n".join(lines)


def downsample(n: int, max_points: int) -> np.ndarray:
    if max_points < 1:
        raise ValueError("max_points must be at least 1")
    if n <= max_points:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, max_points).round().astype(int))


def plot_run(run_dir, max_points: int = 1000) -> list[Path]:
    """Write H2 and per-channel error plots (SVG) and the downsampled data CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    path = run_dir / "metrics.csv"
    if not path.is_file():
        raise IncompleteRun(f"{run_dir}: missing metrics.csv")
    rows = read_metrics(path)
    if not rows:
        raise ValueError(f"{path}: metric log is empty")

    stages: dict[str, list] = {}
    for r in rows:
        stages.setdefault(r["stage"], []).append(r)
    budget = max(1, max_points // len(stages))
    written = []
    kept = []
    for stage, srows in stages.items():
        idx = downsample(len(srows), budget)
        sel = [srows[i] for i in idx]
        kept.extend(sel)
        t = np.array([r["t"] for r in sel])
        h2 = np.array([r["h2"] for r in sel])
        err = np.array([r["err"] for r in sel])

        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(t, h2, marker="." if len(t) == 1 else None, lw=0.8)
        ax.set_xlabel("t [s]")
        ax.set_ylabel("H2 norm")
        ax.set_title(stage)
        fig.tight_layout()
        p = run_dir / f"h2_{stage}.svg"
        fig.savefig(p)
        plt.close(fig)
        written.append(p)

        fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
        for c, (ax, name) in enumerate(zip(axes, ("x", "y", "theta/z"))):
            ax.plot(t, err[:, c], marker="." if len(t) == 1 else None, lw=0.8)
            ax.set_ylabel(f"err {name}")
        axes[-1].set_xlabel("t [s]")
        axes[0].set_title(stage)
        fig.tight_layout()
        p = run_dir / f"channels_{stage}.svg"
        fig.savefig(p)
        plt.close(fig)
        written.append(p)

    p = run_dir / "plot_data.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "stage", "h2", "err_x", "err_y", "err_theta_or_z"])
        for r in kept:
            w.writerow([repr(r["t"]), r["stage"], repr(r["h2"]), *map(repr, r["err"])])
    written.append(p)
    return written
