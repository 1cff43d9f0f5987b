"""Command-line front end wiring the pipeline end to end.

Commands: build-kb, classify, calibrate, evaluate, simulate, export-embeddings.
Exit codes: 0 success, 2 configuration error, 3 data/integrity error,
4 transport error, 1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import reports
from .corpus import (
    LABEL_UNKNOWN,
    parse_function_records_file,
    write_function_records,
)
from .errors import ConfigError, DataFormatError, VerdictError
from .evaluation import (
    OutcomeRecord,
    SweepGrid,
    SyntheticCorpusConfig,
    calibrate_thresholds,
    compute_metrics,
    confidence_margin_report,
    diagnostics_by_outcome,
    generate_synthetic_corpus,
    latency_report,
    latency_table,
    rejection_tradeoff,
    simulate_scenarios,
)
from .knowledge_base import export_embeddings_csv, load_index
from .pipeline import (
    ClassifyOutput,
    PipelineConfig,
    apply_env_overrides,
    build_kb,
    build_kb_from_file,
    check_no_binary_overlap,
    classify_corpus_file,
    classify_records,
    config_to_dict,
    embed_record,
    load_config,
)

DEFAULT_TRADEOFF_TAUS = [0.50, 0.60, 0.70, 0.80, 0.90, 0.95]


def _resolve_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.report_dir:
        overrides["report_dir"] = args.report_dir
    if overrides:
        if "seed" in overrides:
            overrides["ensemble"] = dataclasses.replace(
                config.ensemble, seed=overrides["seed"]
            )
            overrides["embedding"] = dataclasses.replace(
                config.embedding, corpus_seed=overrides["seed"]
            )
        config = dataclasses.replace(config, **overrides)
    return apply_env_overrides(config)


def _outcomes_from(output: ClassifyOutput) -> list[OutcomeRecord]:
    unlabeled = [
        f"{fr.binary_id}/{fr.function_id}"
        for fr in output.functions
        if fr.truth == LABEL_UNKNOWN
    ]
    if unlabeled:
        raise DataFormatError(
            "evaluation requires ground-truth labels; unlabeled: " + ", ".join(unlabeled[:20])
        )
    return [
        OutcomeRecord(
            truth=fr.truth,
            tuple=fr.tuple,
            knn_confidence=fr.knn_confidence,
            stage_latencies=fr.stage_latencies,
        )
        for fr in output.functions
    ]


def _write_classification_reports(output: ClassifyOutput, report_dir) -> None:
    out = reports.ensure_report_dir(report_dir)
    reports.write_verdicts_jsonl(output.functions, out / "verdicts.jsonl")
    reports.write_binary_verdicts_csv(output.binaries, out / "binary_verdicts.csv")
    reports.write_json(reports.classify_summary(output), out / "summary.json")
    reports.plot_fes_ecs_by_verdict(output.functions, out / "fes_ecs_by_verdict.png")
    latency_rows = latency_table([fr.stage_latencies for fr in output.functions])
    reports.write_latency_csv(latency_rows, out / "latency_breakdown.csv")


def _write_evaluation_reports(
    outcomes: list[OutcomeRecord], config: PipelineConfig, report_dir
) -> dict:
    out = reports.ensure_report_dir(report_dir)
    metrics = compute_metrics(outcomes)
    reports.write_json(metrics, out / "metrics.json")
    reports.write_metrics_csv(metrics, out / "metrics.csv")
    diagnostics = diagnostics_by_outcome(outcomes)
    reports.write_diagnostics_csv(diagnostics, out / "outcome_diagnostics.csv")
    tradeoff = rejection_tradeoff(outcomes, DEFAULT_TRADEOFF_TAUS, config.thresholds)
    reports.write_tradeoff_csv(tradeoff, out / "rejection_tradeoff.csv")
    reports.plot_tradeoff(tradeoff, out / "rejection_tradeoff.png")
    reports.write_fes_ecs_csv(outcomes, out / "fes_ecs_by_outcome.csv")
    reports.plot_fes_ecs_by_outcome(outcomes, out / "fes_ecs_by_outcome.png")
    reports.write_margins_csv(
        confidence_margin_report(outcomes), out / "confidence_margins.csv"
    )
    reports.write_latency_csv(latency_report(outcomes), out / "latency_breakdown.csv")
    return metrics


def cmd_build_kb(args) -> int:
    config = _resolve_config(args)
    out_path = args.out or config.kb_path
    index, report, parsed = build_kb_from_file(config, args.corpus, out_path)
    out = reports.ensure_report_dir(config.report_dir)
    payload = reports.build_report_to_json(report)
    payload["parse_issues"] = [
        {"line": issue.line_no, "reason": issue.reason} for issue in parsed.issues
    ]
    reports.write_json(payload, out / "build_report.json")
    print(
        f"built knowledge base: {len(index)} entries "
        f"({report.n_malicious} malicious / {report.n_benign} benign) -> {out_path}"
    )
    return 0


def cmd_classify(args) -> int:
    config = _resolve_config(args)
    index = None
    if config.mode != "zero_shot":
        index = load_index(args.kb or config.kb_path)
        if index.dim != 2 * config.embedding.dim:
            raise ConfigError(
                f"knowledge base dim {index.dim} does not match provider "
                f"composite dim {2 * config.embedding.dim}"
            )
    output = classify_corpus_file(args.corpus, index, config)
    _write_classification_reports(output, config.report_dir)
    summary = reports.classify_summary(output)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    config = _resolve_config(args)
    out = reports.ensure_report_dir(config.report_dir)
    if args.synthetic:
        with open(args.synthetic, "r", encoding="utf-8") as handle:
            synth_cfg = SyntheticCorpusConfig(**json.load(handle))
        config = dataclasses.replace(
            config,
            embedding=dataclasses.replace(
                config.embedding, dim=synth_cfg.dim, corpus_seed=synth_cfg.seed
            ),
        )
        kb_records, test_records = generate_synthetic_corpus(synth_cfg)
        write_function_records(kb_records, out / "synthetic_kb_corpus.jsonl")
        write_function_records(test_records, out / "synthetic_test_corpus.jsonl")
        index, _ = build_kb(config, kb_records, str(out / "synthetic_kb.bvkb"))
        output = classify_records(test_records, index, config)
    else:
        if not args.corpus:
            raise ConfigError("evaluate requires a corpus path or --synthetic")
        index = None
        if config.mode != "zero_shot":
            index = load_index(args.kb or config.kb_path)
        output = classify_corpus_file(args.corpus, index, config)
    outcomes = _outcomes_from(output)
    _write_classification_reports(output, config.report_dir)
    metrics = _write_evaluation_reports(outcomes, config, config.report_dir)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_calibrate(args) -> int:
    config = _resolve_config(args)
    index = load_index(args.kb or config.kb_path)
    parsed = parse_function_records_file(args.corpus)
    check_no_binary_overlap(index, parsed.records)
    output = classify_records(parsed.records, index, config)
    outcomes = _outcomes_from(output)
    if args.grid:
        with open(args.grid, "r", encoding="utf-8") as handle:
            grid_data = json.load(handle)
        grid = SweepGrid(**{key: tuple(value) for key, value in grid_data.items()})
    else:
        grid = SweepGrid()
    rows = calibrate_thresholds(
        outcomes, grid, objective=args.objective, rejection_cap=args.rejection_cap
    )
    out = reports.ensure_report_dir(config.report_dir)
    reports.write_calibration_csv(rows, out / "calibration.csv")
    reports.plot_calibration(rows, out / "calibration.png")
    best = rows[0]
    chosen = {
        "retrieval": {"k": best.k, "sigma_min": best.sigma_min, "balanced": True},
        "ensemble": {"n_agents": best.n_agents, "temperature": best.temperature},
        "thresholds": {
            "delta_high": best.delta_high,
            "delta_low": best.delta_low,
            "tau_stable": best.tau_stable,
        },
    }
    reports.write_json(chosen, out / "chosen_config.json")
    print(
        f"evaluated {len(rows)} configurations; best: "
        f"delta_high={best.delta_high} delta_low={best.delta_low} "
        f"tau_stable={best.tau_stable} objective={best.objective_value:.6f}"
    )
    return 0


def cmd_simulate(args) -> int:
    config = _resolve_config(args)
    with open(args.scenarios, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    scenarios = data.get("scenarios")
    if not scenarios:
        raise ConfigError("scenario file must contain a non-empty 'scenarios' list")
    n_agents = int(data.get("n_agents", config.ensemble.n_agents))
    results = simulate_scenarios(
        scenarios,
        n_agents=n_agents,
        thresholds=config.thresholds,
        seed=config.seed,
        abstain_p=float(data.get("abstain_p", 0.0)),
    )
    out = reports.ensure_report_dir(config.report_dir)
    reports.write_scenarios_csv(results, out / "simulation.csv")
    reports.plot_scenarios(results, out / "simulation.png")
    for result in results:
        print(
            f"p={result.p_malicious:.2f} W={result.context_w:.2f} reps={result.repetitions} "
            f"mean_fes={result.mean_fes:.4f} mean_ecs={result.mean_ecs:.4f} "
            f"verdicts={result.verdict_counts}"
        )
    return 0


def cmd_show_config(args) -> int:
    config = _resolve_config(args)
    print(json.dumps(config_to_dict(config), indent=2, sort_keys=True))
    return 0


def cmd_export_embeddings(args) -> int:
    config = _resolve_config(args)
    parsed = parse_function_records_file(args.corpus)
    rows = []
    for record in parsed.records:
        composite = embed_record(record, config.embedding)
        rows.append((record.binary_id, record.function_id, record.label, composite.vector))
    out = reports.ensure_report_dir(config.report_dir)
    out_path = args.out or (out / "embeddings.csv")
    count = export_embeddings_csv(rows, out_path)
    print(f"exported {count} embeddings -> {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="binverdict",
        description="Evidence-based malware verdicts over lifted function corpora.",
    )
    parser.add_argument("--config", help="pipeline config JSON file")
    parser.add_argument("--mode", choices=["full", "knn_only", "zero_shot"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--report-dir", dest="report_dir")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-kb", help="embed a labeled corpus into a knowledge base")
    p.add_argument("corpus", help="labeled JSONL corpus")
    p.add_argument("--out", help="index output path (default: config kb_path)")
    p.set_defaults(handler=cmd_build_kb)

    p = sub.add_parser("classify", help="classify a corpus against the knowledge base")
    p.add_argument("corpus", help="JSONL corpus to classify")
    p.add_argument("--kb", help="index path (default: config kb_path)")
    p.set_defaults(handler=cmd_classify)

    p = sub.add_parser("evaluate", help="classify a labeled corpus and report metrics")
    p.add_argument("corpus", nargs="?", help="labeled JSONL corpus")
    p.add_argument("--kb", help="index path (default: config kb_path)")
    p.add_argument("--synthetic", help="synthetic corpus config JSON (offline self-test)")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("calibrate", help="grid-sweep thresholds on a validation corpus")
    p.add_argument("corpus", help="labeled validation JSONL corpus")
    p.add_argument("--kb", help="index path (default: config kb_path)")
    p.add_argument("--grid", help="sweep grid JSON file (default: shipped sweep ranges)")
    p.add_argument("--objective", choices=["min_error", "max_f1"], default="min_error")
    p.add_argument("--rejection-cap", type=float, default=1.0)
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("simulate", help="Monte-Carlo FES/ECS study over synthetic agents")
    p.add_argument("scenarios", help="scenario JSON file")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("export-embeddings", help="dump composite vectors as CSV")
    p.add_argument("corpus", help="JSONL corpus")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(handler=cmd_export_embeddings)

    p = sub.add_parser("show-config", help="print the effective configuration")
    p.set_defaults(handler=cmd_show_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except VerdictError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataFormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
