"""Result tables and static plots (score gaps, ablations, schedules)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import storage
from .diffusion import DiffusionConfig, guidance_weights


def score_gap_histogram(gaps_by_model: Dict[str, Sequence[float]], path,
                        bins: int = 30) -> dict:
    """Overlaid histograms of positive-negative similarity gaps.

    Returns {"bin_counts": {...}, "bin_edges": [...]} for verification;
    each model's counts sum to its sample count.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for name, gaps in gaps_by_model.items():
        if len(gaps) == 0:
            raise ValueError(f"empty gap sample for {name!r}")
    lo = min(min(g) for g in gaps_by_model.values())
    hi = max(max(g) for g in gaps_by_model.values())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    summary = {"bin_edges": edges.tolist(), "bin_counts": {}}
    for name, gaps in gaps_by_model.items():
        counts, _ = np.histogram(gaps, bins=edges)
        summary["bin_counts"][name] = counts.tolist()
        ax.stairs(counts, edges, label=f"{name} (mean {np.mean(gaps):.3f})", fill=True,
                  alpha=0.45)
    ax.set_xlabel("similarity(image, positive) - similarity(image, negative)")
    ax.set_ylabel("items")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    import matplotlib.pyplot as plt2
    plt2.close(fig)
    return summary


def weight_schedule_plot(config: DiffusionConfig, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = np.arange(0, config.total_steps + 1)
    locals_, globals_ = zip(*(guidance_weights(t, config) for t in ts))
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(ts, locals_, label="local weight")
    ax.plot(ts, globals_, label="global weight")
    ax.axvline(config.threshold_step, color="gray", linestyle=":", label="threshold step")
    ax.set_xlabel("completed reverse steps")
    ax.set_ylabel("weight")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def ablation_table_csv(rows: Sequence[dict], path) -> None:
    """Flat CSV of ablation rows: one line per cell with mean/std columns."""
    if not rows:
        raise ValueError("no ablation rows to write")
    keys: List[str] = []
    for row in rows:
        for key in row:
            if key not in keys and key != "config_echo":
                keys.append(key)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in keys})


def ablation_bar_plot(rows: Sequence[dict], metric: str, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r["name"] for r in rows]
    means = [r.get(f"{metric}_mean", 0.0) for r in rows]
    stds = [r.get(f"{metric}_std", 0.0) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, len(names)), 4))
    ax.bar(range(len(names)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def emit_report(results: dict, out_dir, diffusion_config: Optional[DiffusionConfig] = None) -> dict:
    """Persist a results table plus standard plots; returns written paths.

    `results` may carry "gaps_by_model" ({name: [floats]}), "ablation"
    (rows from run_ablation), and arbitrary JSON-safe entries; everything
    lands in report.json, which re-ingests losslessly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}

    gaps = results.get("gaps_by_model")
    if gaps is not None:
        summary = score_gap_histogram(gaps, out_dir / "score_gaps.png")
        results = dict(results)
        results["gap_histogram"] = summary
        written["score_gaps"] = str(out_dir / "score_gaps.png")

    ablation = results.get("ablation")
    if ablation:
        ablation_table_csv(ablation, out_dir / "ablation.csv")
        ablation_bar_plot(ablation, "mean_binary", out_dir / "ablation.png")
        written["ablation_csv"] = str(out_dir / "ablation.csv")
        written["ablation_png"] = str(out_dir / "ablation.png")

    if diffusion_config is not None:
        weight_schedule_plot(diffusion_config, out_dir / "weight_schedule.png")
        written["weight_schedule"] = str(out_dir / "weight_schedule.png")

    storage.write_json(out_dir / "report.json", results)
    written["report_json"] = str(out_dir / "report.json")
    return written
