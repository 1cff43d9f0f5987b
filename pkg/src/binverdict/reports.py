"""Report writers: delimited data, JSON evidence chains, and rendered figures.

Every writer is deterministic for a fixed input: stable key order, fixed float
formatting, LF newlines.  Figures are rendered with the Agg backend so report
generation works headless.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import (
    ConfidenceMarginReport,
    DiagnosticsReport,
    LatencyRow,
    OutcomeRecord,
    ScenarioResult,
    TradeoffRow,
    CalibrationRow,
    outcome_of,
)
from .pipeline import BuildKbReport, ClassifyOutput, FunctionResult
from .verdict import BinaryVerdict

_OUTCOME_COLORS = {
    "TP": "tab:green",
    "TN": "tab:blue",
    "FP": "tab:orange",
    "FN": "tab:red",
    "rejected": "tab:gray",
}
_VERDICT_COLORS = {"malicious": "tab:red", "benign": "tab:green", "uncertain": "tab:gray"}


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(obj, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _csv_writer(handle):
    return csv.writer(handle, lineterminator="\n")


def function_result_to_json(fr: FunctionResult) -> dict:
    return {
        "binary_id": fr.binary_id,
        "function_id": fr.function_id,
        "verdict": fr.tuple.verdict,
        "fes": round(fr.tuple.fes, 6),
        "ecs": round(fr.tuple.ecs, 6),
        "p_hat": round(fr.tuple.p_hat, 6),
        "context_w": round(fr.tuple.context_w, 6),
        "reason": fr.tuple.reason,
        "agent_votes": fr.agent_votes,
        "neighbor_ids": fr.neighbor_ids,
        "knn_confidence": None if fr.knn_confidence is None else round(fr.knn_confidence, 6),
    }


def write_verdicts_jsonl(functions: list[FunctionResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for fr in functions:
            handle.write(json.dumps(function_result_to_json(fr), sort_keys=True) + "\n")


def write_binary_verdicts_csv(binaries: list[BinaryVerdict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(["binary_id", "verdict", "n_functions", "max_fes", "max_ecs"])
        for bv in binaries:
            writer.writerow(
                [bv.binary_id, bv.verdict, len(bv.per_function),
                 f"{bv.max_fes:.6f}", f"{bv.max_ecs:.6f}"]
            )


def write_metrics_csv(metrics: dict[str, float], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        keys = sorted(metrics)
        writer.writerow(keys)
        writer.writerow([f"{metrics[k]:.6f}" for k in keys])


def write_diagnostics_csv(report: DiagnosticsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(["outcome", "mean_fes", "mean_ecs", "count"])
        for outcome in ("TP", "TN", "FP", "FN"):
            stats = report.by_outcome.get(outcome)
            if stats is None:
                continue
            writer.writerow(
                [outcome, f"{stats.mean_fes:.6f}", f"{stats.mean_ecs:.6f}", stats.count]
            )


def write_tradeoff_csv(rows: list[TradeoffRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(["tau", "fpr", "fnr", "rejection_rate"])
        for row in rows:
            writer.writerow(
                [f"{row.tau:.4f}", f"{row.fpr:.6f}", f"{row.fnr:.6f}",
                 f"{row.rejection_rate:.6f}"]
            )


def write_margins_csv(report: ConfidenceMarginReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        if not report.applicable:
            writer.writerow(["not_applicable"])
            return
        writer.writerow(["outcome", "mean_confidence", "mean_margin", "count"])
        for row in report.rows:
            writer.writerow(
                [row.outcome, f"{row.mean_confidence:.6f}", f"{row.mean_margin:.6f}", row.count]
            )
        writer.writerow(["error_flag_rate", f"{report.error_flag_rate:.6f}", "", ""])
        writer.writerow(["correct_flag_rate", f"{report.correct_flag_rate:.6f}", "", ""])


def write_latency_csv(rows: list[LatencyRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(["stage", "mean_s", "p50_s", "p95_s", "share_pct"])
        for row in rows:
            writer.writerow(
                [row.stage, f"{row.mean_s:.6f}", f"{row.p50_s:.6f}",
                 f"{row.p95_s:.6f}", f"{row.share_pct:.2f}"]
            )


def write_fes_ecs_csv(records: list[OutcomeRecord], path) -> None:
    """Plot-ready scatter data: one row per record with its confusion outcome."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(["fes", "ecs", "outcome"])
        for record in records:
            writer.writerow(
                [f"{record.tuple.fes:.6f}", f"{record.tuple.ecs:.6f}",
                 outcome_of(record.truth, record.tuple.verdict)]
            )


def write_calibration_csv(rows: list[CalibrationRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(
            ["rank", "k", "sigma_min", "n_agents", "temperature", "delta_high",
             "delta_low", "tau_stable", "objective_value", "feasible",
             "accuracy", "f1", "fpr", "fnr", "rejection_rate"]
        )
        for rank, row in enumerate(rows, start=1):
            writer.writerow(
                [rank, row.k, f"{row.sigma_min:.2f}", row.n_agents,
                 f"{row.temperature:.2f}", f"{row.delta_high:.2f}",
                 f"{row.delta_low:.2f}", f"{row.tau_stable:.2f}",
                 f"{row.objective_value:.6f}", int(row.feasible),
                 f"{row.metrics['accuracy']:.6f}", f"{row.metrics['f1']:.6f}",
                 f"{row.metrics['fpr']:.6f}", f"{row.metrics['fnr']:.6f}",
                 f"{row.metrics['rejection_rate']:.6f}"]
            )


def write_scenarios_csv(results: list[ScenarioResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(
            ["p_malicious", "context_w", "repetitions", "mean_fes", "mean_ecs",
             "n_malicious", "n_benign", "n_uncertain"]
        )
        for result in results:
            writer.writerow(
                [f"{result.p_malicious:.4f}", f"{result.context_w:.4f}",
                 result.repetitions, f"{result.mean_fes:.6f}", f"{result.mean_ecs:.6f}",
                 result.verdict_counts["malicious"], result.verdict_counts["benign"],
                 result.verdict_counts["uncertain"]]
            )


def build_report_to_json(report: BuildKbReport) -> dict:
    return {
        "parsed": report.parsed,
        "parse_errors": report.parse_errors,
        "dcf_retained": report.dcf_retained,
        "dcf_excluded": report.dcf_excluded,
        "selected_top_m": report.selected,
        "embedded": report.embedded,
        "skipped": report.skipped,
        "kb_malicious": report.n_malicious,
        "kb_benign": report.n_benign,
    }


def classify_summary(output: ClassifyOutput) -> dict:
    verdict_counts: dict[str, int] = {}
    for bv in output.binaries:
        verdict_counts[bv.verdict] = verdict_counts.get(bv.verdict, 0) + 1
    return {
        "functions_classified": len(output.functions),
        "binaries": len(output.binaries),
        "binary_verdicts": dict(sorted(verdict_counts.items())),
    }


def _save_figure(fig, path) -> None:
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tradeoff(rows: list[TradeoffRow], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), tight_layout=True)
    taus = [row.tau for row in rows]
    ax.plot(taus, [row.fnr for row in rows], marker="o", label="FNR")
    ax.plot(taus, [row.fpr for row in rows], marker="s", label="FPR")
    ax.plot(taus, [row.rejection_rate for row in rows], marker="^", label="rejection rate")
    ax.set_xlabel("entropy rejection ceiling tau")
    ax.set_ylabel("rate")
    ax.set_title("Rejection trade-off")
    ax.legend()
    _save_figure(fig, path)


def plot_fes_ecs_by_outcome(records: list[OutcomeRecord], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), tight_layout=True)
    groups: dict[str, list[tuple[float, float]]] = {}
    for record in records:
        outcome = outcome_of(record.truth, record.tuple.verdict)
        groups.setdefault(outcome, []).append((record.tuple.fes, record.tuple.ecs))
    for outcome in ("TP", "TN", "FP", "FN", "rejected"):
        points = groups.get(outcome)
        if not points:
            continue
        ax.scatter(
            [p[0] for p in points], [p[1] for p in points],
            s=14, alpha=0.6, label=outcome, color=_OUTCOME_COLORS[outcome],
        )
    ax.set_xlabel("evidence strength (FES)")
    ax.set_ylabel("conflict score (ECS)")
    ax.set_title("FES vs ECS by outcome")
    ax.legend(loc="center right", fontsize=8)
    _save_figure(fig, path)


def plot_fes_ecs_by_verdict(functions: list[FunctionResult], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), tight_layout=True)
    groups: dict[str, list[tuple[float, float]]] = {}
    for fr in functions:
        groups.setdefault(fr.tuple.verdict, []).append((fr.tuple.fes, fr.tuple.ecs))
    for verdict in ("malicious", "benign", "uncertain"):
        points = groups.get(verdict)
        if not points:
            continue
        ax.scatter(
            [p[0] for p in points], [p[1] for p in points],
            s=14, alpha=0.6, label=verdict, color=_VERDICT_COLORS[verdict],
        )
    ax.set_xlabel("evidence strength (FES)")
    ax.set_ylabel("conflict score (ECS)")
    ax.set_title("FES vs ECS by verdict")
    ax.legend(loc="center right", fontsize=8)
    _save_figure(fig, path)


def plot_scenarios(results: list[ScenarioResult], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4), tight_layout=True)
    labels = [f"p={r.p_malicious:.2f}\nW={r.context_w:.2f}" for r in results]
    x = range(len(results))
    ax1.bar(x, [r.mean_ecs for r in results], color="tab:purple")
    ax1.set_xticks(list(x), labels, fontsize=7)
    ax1.set_ylabel("mean ECS")
    ax1.set_title("Conflict by scenario")
    bottoms = [0.0] * len(results)
    for verdict in ("malicious", "benign", "uncertain"):
        shares = [r.verdict_counts[verdict] / r.repetitions for r in results]
        ax2.bar(x, shares, bottom=bottoms, label=verdict, color=_VERDICT_COLORS[verdict])
        bottoms = [b + s for b, s in zip(bottoms, shares)]
    ax2.set_xticks(list(x), labels, fontsize=7)
    ax2.set_ylabel("verdict share")
    ax2.set_title("Verdict mix")
    ax2.legend(fontsize=8)
    _save_figure(fig, path)


def plot_calibration(rows: list[CalibrationRow], path) -> None:
    """Tau response at the best row's FES bounds (one point per tau value)."""
    if not rows:
        return
    best = rows[0]
    slice_rows = sorted(
        {
            row.tau_stable: row
            for row in rows
            if row.k == best.k and row.sigma_min == best.sigma_min
            and row.n_agents == best.n_agents and row.temperature == best.temperature
            and row.delta_high == best.delta_high and row.delta_low == best.delta_low
        }.values(),
        key=lambda row: row.tau_stable,
    )
    fig, ax = plt.subplots(figsize=(6, 4), tight_layout=True)
    taus = [row.tau_stable for row in slice_rows]
    ax.plot(taus, [row.metrics["fnr"] for row in slice_rows], marker="o", label="FNR")
    ax.plot(taus, [row.metrics["fpr"] for row in slice_rows], marker="s", label="FPR")
    ax.plot(
        taus, [row.metrics["rejection_rate"] for row in slice_rows],
        marker="^", label="rejection rate",
    )
    ax.set_xlabel("tau_stable")
    ax.set_ylabel("rate")
    ax.set_title(
        f"Calibration at delta_high={best.delta_high:.2f}, delta_low={best.delta_low:.2f}"
    )
    ax.legend()
    _save_figure(fig, path)


def ensure_report_dir(report_dir) -> Path:
    path = Path(report_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path
