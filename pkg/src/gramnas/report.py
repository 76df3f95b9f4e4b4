"""Run summaries and figures rendered next to the delimited output."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .engine import LOG_NAME
from .stats import MannWhitneyResult, mann_whitney_u

FIGURE_DPI = 150


def read_generation_log(run_dir) -> list:
    """Rows of a run's generation log as dicts with numeric fields parsed."""
    path = Path(run_dir) / LOG_NAME
    if not path.exists():
        raise FileNotFoundError(f"no generation log at {path}")
    rows = []
    with path.open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            rows.append(
                {
                    "generation": int(row["generation"]),
                    "best_fitness": float(row["best_fitness"]),
                    "best_test_accuracy": float(row["best_test_accuracy"]),
                    "best_budget_seconds": float(row["best_budget_seconds"]),
                    "evaluations": int(row["evaluations"]),
                    "wall_seconds": float(row["wall_seconds"]) if row["wall_seconds"] else None,
                }
            )
    return rows


def summarize_run(run_dir) -> dict:
    rows = read_generation_log(run_dir)
    last = rows[-1]
    return {
        "run": Path(run_dir).name,
        "generations": len(rows),
        "final_best_fitness": last["best_fitness"],
        "final_test_accuracy": last["best_test_accuracy"],
        "final_budget": last["best_budget_seconds"],
        "max_budget": max(r["best_budget_seconds"] for r in rows),
        "total_evaluations": sum(r["evaluations"] for r in rows),
    }


def write_summary_csv(summaries: list, path) -> None:
    fields = [
        "run",
        "generations",
        "final_best_fitness",
        "final_test_accuracy",
        "final_budget",
        "max_budget",
        "total_evaluations",
    ]
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        writer.writerows(summaries)


def write_fitness_figure(run_rows: dict, path) -> None:
    """One fitness-over-generations line per run, budgets on a twin axis."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    budget_ax = ax.twinx()
    for label, rows in run_rows.items():
        generations = [r["generation"] for r in rows]
        ax.plot(generations, [r["best_fitness"] for r in rows], label=label)
        budget_ax.plot(
            generations,
            [r["best_budget_seconds"] for r in rows],
            linestyle=":",
            alpha=0.5,
        )
    ax.set_xlabel("generation")
    ax.set_ylabel("best fitness (validation accuracy)")
    budget_ax.set_ylabel("budget (dotted)")
    if len(run_rows) > 1:
        ax.legend(loc="lower right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def export_stats(run_dirs: list, output_dir) -> Path:
    """Summarise one or more runs: summary.csv plus fitness_curves.png."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    summaries = [summarize_run(d) for d in run_dirs]
    write_summary_csv(summaries, output_dir / "summary.csv")
    rows_by_run = {Path(d).name: read_generation_log(d) for d in run_dirs}
    write_fitness_figure(rows_by_run, output_dir / "fitness_curves.png")
    return output_dir / "summary.csv"


def write_boxplot(samples: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    labels = list(samples)
    ax.boxplot([samples[label] for label in labels], tick_labels=labels)
    ax.set_ylabel("accuracy")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def compare_samples(
    sample_a: list,
    sample_b: list,
    label_a: str,
    label_b: str,
    output_dir,
) -> MannWhitneyResult:
    """Rank comparison of two outcome samples: compare.csv + boxplot.png."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    result = mann_whitney_u(sample_a, sample_b)
    with (output_dir / "compare.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["label_a", "label_b", "n_a", "n_b", "u_a", "u_b", "z", "p_value",
             "effect_size_r", "effect_label", "median_a", "median_b"]
        )
        writer.writerow(
            [
                label_a,
                label_b,
                result.n_a,
                result.n_b,
                result.u_a,
                result.u_b,
                result.z,
                result.p_value,
                result.effect_size_r,
                result.effect_label,
                _median(sample_a),
                _median(sample_b),
            ]
        )
    write_boxplot({label_a: list(sample_a), label_b: list(sample_b)}, output_dir / "boxplot.png")
    return result


def _median(values) -> float:
    ordered = sorted(values)
    n = len(ordered)
    middle = n // 2
    if n % 2:
        return float(ordered[middle])
    return (ordered[middle - 1] + ordered[middle]) / 2.0
