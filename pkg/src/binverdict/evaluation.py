"""Metrics, threshold sweeps, diagnostics, and the offline synthetic corpus.

Uncertain verdicts are reject-option outputs: they are excluded from the
confusion matrix and surface as the rejection rate instead.
"""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import FunctionRecord, LABEL_BENIGN, LABEL_MALICIOUS
from .ensemble import synthetic_agent, aggregate_votes
from .errors import ConfigError
from .verdict import (
    DecisionThresholds,
    FORCED_UNCERTAIN_REASONS,
    VERDICT_BENIGN,
    VERDICT_MALICIOUS,
    VERDICT_UNCERTAIN,
    VerdictTuple,
    decide,
    ecs,
    fes,
)

STAGE_NAMES = ("lift-parse", "embed", "retrieve", "ensemble", "decide")

OUTCOME_TP = "TP"
OUTCOME_TN = "TN"
OUTCOME_FP = "FP"
OUTCOME_FN = "FN"
OUTCOME_REJECTED = "rejected"


@dataclass(frozen=True)
class OutcomeRecord:
    """Ground truth paired with the pipeline's output for one function."""

    truth: str
    tuple: VerdictTuple
    knn_confidence: float | None = None
    stage_latencies: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.truth not in (LABEL_MALICIOUS, LABEL_BENIGN):
            raise ConfigError(f"truth must be malicious or benign, got {self.truth!r}")
        unknown = set(self.stage_latencies) - set(STAGE_NAMES)
        if unknown:
            raise ConfigError(f"unknown latency stages: {sorted(unknown)}")


def outcome_of(truth: str, verdict: str) -> str:
    if verdict == VERDICT_UNCERTAIN:
        return OUTCOME_REJECTED
    if truth == LABEL_MALICIOUS:
        return OUTCOME_TP if verdict == VERDICT_MALICIOUS else OUTCOME_FN
    return OUTCOME_TN if verdict == VERDICT_BENIGN else OUTCOME_FP


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_metrics(records: list[OutcomeRecord], on: str = "accepted_only") -> dict[str, float]:
    """Confusion-matrix metrics with reject-option accounting.

    ``accepted_only`` computes accuracy over accepted verdicts; ``all`` puts
    every record in the accuracy denominator (a rejection is never correct).
    Precision/recall/F1/FPR/FNR always use the accepted confusion cells.
    """
    if not records:
        raise ConfigError("compute_metrics requires at least one record")
    if on not in ("accepted_only", "all"):
        raise ConfigError(f"on must be 'accepted_only' or 'all', got {on!r}")
    cells = {OUTCOME_TP: 0, OUTCOME_TN: 0, OUTCOME_FP: 0, OUTCOME_FN: 0, OUTCOME_REJECTED: 0}
    for record in records:
        cells[outcome_of(record.truth, record.tuple.verdict)] += 1
    tp, tn, fp, fn = cells[OUTCOME_TP], cells[OUTCOME_TN], cells[OUTCOME_FP], cells[OUTCOME_FN]
    accepted = tp + tn + fp + fn
    total = len(records)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    return {
        "accuracy": _safe_div(tp + tn, accepted if on == "accepted_only" else total),
        "precision": precision,
        "recall": recall,
        "f1": _safe_div(2 * precision * recall, precision + recall),
        "fpr": _safe_div(fp, fp + tn),
        "fnr": _safe_div(fn, fn + tp),
        "rejection_rate": _safe_div(cells[OUTCOME_REJECTED], total),
    }


@dataclass(frozen=True)
class OutcomeStats:
    mean_fes: float
    mean_ecs: float
    count: int


@dataclass(frozen=True)
class DiagnosticsReport:
    by_outcome: dict[str, OutcomeStats]
    separation_gap: float | None


def diagnostics_by_outcome(records: list[OutcomeRecord]) -> DiagnosticsReport:
    """Mean FES/ECS per confusion cell plus the error-vs-correct ECS gap.

    Cells without members are absent from the table, never reported as zero.
    """
    groups: dict[str, list[OutcomeRecord]] = {}
    for record in records:
        outcome = outcome_of(record.truth, record.tuple.verdict)
        if outcome == OUTCOME_REJECTED:
            continue
        groups.setdefault(outcome, []).append(record)
    by_outcome = {
        outcome: OutcomeStats(
            mean_fes=float(np.mean([r.tuple.fes for r in members])),
            mean_ecs=float(np.mean([r.tuple.ecs for r in members])),
            count=len(members),
        )
        for outcome, members in groups.items()
    }
    correct = [r.tuple.ecs for o in (OUTCOME_TP, OUTCOME_TN) for r in groups.get(o, [])]
    errors = [r.tuple.ecs for o in (OUTCOME_FP, OUTCOME_FN) for r in groups.get(o, [])]
    gap = float(np.mean(errors) - np.mean(correct)) if correct and errors else None
    return DiagnosticsReport(by_outcome=by_outcome, separation_gap=gap)


def _redecide(record: OutcomeRecord, th: DecisionThresholds) -> str:
    """Re-apply the decision policy to stored scores; forced rejections stay rejected."""
    if record.tuple.reason in FORCED_UNCERTAIN_REASONS:
        return VERDICT_UNCERTAIN
    verdict, _ = decide(record.tuple.fes, record.tuple.ecs, th)
    return verdict


@dataclass(frozen=True)
class TradeoffRow:
    tau: float
    fpr: float
    fnr: float
    rejection_rate: float


def rejection_tradeoff(
    records: list[OutcomeRecord],
    tau_values: list[float],
    thresholds: DecisionThresholds | None = None,
) -> list[TradeoffRow]:
    """Error/rejection profile as the entropy ceiling moves, FES bounds fixed."""
    base = thresholds or DecisionThresholds()
    rows = []
    for tau in sorted(tau_values):
        if tau > 1.0:
            th = None  # entropy rejection disabled; ECS can never reach tau
        else:
            th = DecisionThresholds(base.delta_high, base.delta_low, tau)
        cells = {OUTCOME_TP: 0, OUTCOME_TN: 0, OUTCOME_FP: 0, OUTCOME_FN: 0, OUTCOME_REJECTED: 0}
        for record in records:
            if th is None:
                if record.tuple.reason in FORCED_UNCERTAIN_REASONS:
                    verdict = VERDICT_UNCERTAIN
                elif record.tuple.fes > base.delta_high:
                    verdict = VERDICT_MALICIOUS
                elif record.tuple.fes < base.delta_low:
                    verdict = VERDICT_BENIGN
                else:
                    verdict = VERDICT_UNCERTAIN
            else:
                verdict = _redecide(record, th)
            cells[outcome_of(record.truth, verdict)] += 1
        rows.append(
            TradeoffRow(
                tau=tau,
                fpr=_safe_div(cells[OUTCOME_FP], cells[OUTCOME_FP] + cells[OUTCOME_TN]),
                fnr=_safe_div(cells[OUTCOME_FN], cells[OUTCOME_FN] + cells[OUTCOME_TP]),
                rejection_rate=_safe_div(cells[OUTCOME_REJECTED], len(records)),
            )
        )
    return rows


@dataclass(frozen=True)
class SweepGrid:
    """Hyperparameter grid; defaults mirror the shipped sensitivity sweep ranges."""

    k_values: tuple = (5, 10, 20, 30)
    sigma_values: tuple = (0.5, 0.6, 0.7, 0.8)
    n_values: tuple = (1, 2, 5, 7, 10)
    t_values: tuple = (0.3, 0.5, 0.7, 0.9, 1.0)
    delta_high_values: tuple = (0.55, 0.60, 0.65, 0.70)
    delta_low_values: tuple = (0.30, 0.35, 0.40, 0.45)
    tau_values: tuple = (0.50, 0.70, 0.80, 0.90)

    def __post_init__(self) -> None:
        for name in (
            "k_values", "sigma_values", "n_values", "t_values",
            "delta_high_values", "delta_low_values", "tau_values",
        ):
            if not getattr(self, name):
                raise ConfigError(f"SweepGrid.{name} must be non-empty")

    def size(self) -> int:
        return (
            len(self.k_values) * len(self.sigma_values) * len(self.n_values)
            * len(self.t_values) * len(self.delta_high_values)
            * len(self.delta_low_values) * len(self.tau_values)
        )


@dataclass(frozen=True)
class CalibrationRow:
    k: int
    sigma_min: float
    n_agents: int
    temperature: float
    delta_high: float
    delta_low: float
    tau_stable: float
    objective_value: float
    feasible: bool
    metrics: dict[str, float]


def calibrate_thresholds(
    records: list[OutcomeRecord],
    grid: SweepGrid,
    objective: str = "min_error",
    rejection_cap: float = 1.0,
) -> list[CalibrationRow]:
    """Exhaustive grid evaluation with a deterministic ranking.

    Threshold dimensions re-decide the stored scores; retrieval and ensemble
    dimensions label the rows but cannot change recorded outcomes offline, so
    rows differing only there carry identical metrics.  Ties rank the lower
    rejection rate first.
    """
    if objective not in ("min_error", "max_f1"):
        raise ConfigError(f"objective must be 'min_error' or 'max_f1', got {objective!r}")
    if not records:
        raise ConfigError("calibration requires validation records")

    threshold_metrics: dict[tuple[float, float, float], dict[str, float]] = {}
    for dh, dl, tau in itertools.product(
        grid.delta_high_values, grid.delta_low_values, grid.tau_values
    ):
        th = DecisionThresholds(dh, dl, tau)
        reshaped = [
            OutcomeRecord(
                truth=r.truth,
                tuple=VerdictTuple(
                    verdict=_redecide(r, th),
                    fes=r.tuple.fes,
                    ecs=r.tuple.ecs,
                    p_hat=r.tuple.p_hat,
                    context_w=r.tuple.context_w,
                    reason=r.tuple.reason,
                ),
            )
            for r in records
        ]
        threshold_metrics[(dh, dl, tau)] = compute_metrics(reshaped)

    rows: list[CalibrationRow] = []
    for k, sigma, n, t, dh, dl, tau in itertools.product(
        grid.k_values, grid.sigma_values, grid.n_values, grid.t_values,
        grid.delta_high_values, grid.delta_low_values, grid.tau_values,
    ):
        metrics = threshold_metrics[(dh, dl, tau)]
        if objective == "min_error":
            value = metrics["fpr"] + metrics["fnr"]
            feasible = metrics["rejection_rate"] <= rejection_cap
        else:
            value = -metrics["f1"]
            feasible = True
        rows.append(
            CalibrationRow(
                k=k, sigma_min=sigma, n_agents=n, temperature=t,
                delta_high=dh, delta_low=dl, tau_stable=tau,
                objective_value=value, feasible=feasible, metrics=metrics,
            )
        )
    rows.sort(
        key=lambda row: (
            not row.feasible,
            row.objective_value,
            row.metrics["rejection_rate"],
            (row.k, row.sigma_min, row.n_agents, row.temperature,
             row.delta_high, row.delta_low, row.tau_stable),
        )
    )
    return rows


@dataclass(frozen=True)
class MarginRow:
    outcome: str
    mean_confidence: float
    mean_margin: float
    count: int


@dataclass(frozen=True)
class ConfidenceMarginReport:
    applicable: bool
    rows: list[MarginRow]
    error_flag_rate: float
    correct_flag_rate: float
    c_min: float


def confidence_margin_report(
    records: list[OutcomeRecord], c_min: float = 0.52
) -> ConfidenceMarginReport:
    """Nearest-neighbor vote confidence by outcome, plus flag rates at c_min.

    Flag rates compare how many misclassified vs. correct accepted records
    would be routed to re-evaluation by a confidence floor at c_min.
    """
    scored = [r for r in records if r.knn_confidence is not None]
    if not scored:
        return ConfidenceMarginReport(False, [], 0.0, 0.0, c_min)
    groups: dict[str, list[float]] = {}
    errors: list[float] = []
    correct: list[float] = []
    for record in scored:
        outcome = outcome_of(record.truth, record.tuple.verdict)
        groups.setdefault(outcome, []).append(record.knn_confidence)
        if outcome in (OUTCOME_FP, OUTCOME_FN):
            errors.append(record.knn_confidence)
        elif outcome in (OUTCOME_TP, OUTCOME_TN):
            correct.append(record.knn_confidence)
    rows = [
        MarginRow(
            outcome=outcome,
            mean_confidence=float(np.mean(values)),
            mean_margin=float(np.mean(values)) - 0.50,
            count=len(values),
        )
        for outcome, values in sorted(groups.items())
    ]
    return ConfidenceMarginReport(
        applicable=True,
        rows=rows,
        error_flag_rate=_safe_div(sum(1 for c in errors if c < c_min), len(errors)),
        correct_flag_rate=_safe_div(sum(1 for c in correct if c < c_min), len(correct)),
        c_min=c_min,
    )


@dataclass(frozen=True)
class LatencyRow:
    stage: str
    mean_s: float
    p50_s: float
    p95_s: float
    share_pct: float


def latency_table(latencies: list[dict[str, float]]) -> list[LatencyRow]:
    """Per-stage latency table; stages nobody recorded are absent entirely."""
    totals: dict[str, list[float]] = {}
    for stage_latencies in latencies:
        for stage, seconds in stage_latencies.items():
            totals.setdefault(stage, []).append(seconds)
    grand_total = sum(sum(values) for values in totals.values())
    rows = []
    for stage in STAGE_NAMES:
        if stage not in totals:
            continue
        values = np.asarray(totals[stage])
        rows.append(
            LatencyRow(
                stage=stage,
                mean_s=float(values.mean()),
                p50_s=float(np.percentile(values, 50)),
                p95_s=float(np.percentile(values, 95)),
                share_pct=_safe_div(float(values.sum()) * 100.0, grand_total),
            )
        )
    return rows


def latency_report(records: list[OutcomeRecord]) -> list[LatencyRow]:
    return latency_table([record.stage_latencies for record in records])


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    """Two labeled clusters of token-built functions, plus midway ambiguous points.

    cluster_separation controls how many base tokens the clusters share
    (1.0 = disjoint pools, orthogonal cluster means under the mock embedder);
    ambiguous test points mix both clusters' exclusive tokens evenly.
    """

    kb_size: int = 200
    test_size: int = 200
    dim: int = 64
    cluster_separation: float = 1.0
    ambiguous_fraction: float = 0.0
    seed: int = 0
    base_tokens: int = 48
    unique_tokens: int = 8

    def __post_init__(self) -> None:
        if self.kb_size < 10 or self.test_size < 10:
            raise ConfigError("kb_size and test_size must each be >= 10")
        if not 0.0 <= self.ambiguous_fraction <= 1.0:
            raise ConfigError(f"ambiguous_fraction must be in [0, 1], got {self.ambiguous_fraction}")
        if not 0.0 <= self.cluster_separation <= 1.0:
            raise ConfigError(f"cluster_separation must be in [0, 1], got {self.cluster_separation}")


def _cluster_pools(cfg: SyntheticCorpusConfig, stream: str) -> tuple[list[str], list[str], list[str]]:
    shared_count = round((1.0 - cfg.cluster_separation) * cfg.base_tokens)
    exclusive = cfg.base_tokens - shared_count
    shared = [f"lib_{stream}_{i}" for i in range(shared_count)]
    mal = [f"mal_{stream}_{i}" for i in range(exclusive)]
    ben = [f"ben_{stream}_{i}" for i in range(exclusive)]
    return shared, mal, ben


def _record_text(
    cfg: SyntheticCorpusConfig,
    stream: str,
    label: str,
    ambiguous: bool,
    uid: str,
    rng: np.random.Generator,
) -> str:
    shared, mal, ben = _cluster_pools(cfg, stream)
    if ambiguous:
        half = len(mal) // 2
        tokens = shared + mal[: len(mal) - half] + ben[:half]
    elif label == LABEL_MALICIOUS:
        tokens = shared + mal
    else:
        tokens = shared + ben
    tokens = tokens + [f"u{uid}_{stream}_{i}" for i in range(cfg.unique_tokens)]
    order = rng.permutation(len(tokens))
    return " ".join(tokens[i] for i in order)


def _make_record(
    cfg: SyntheticCorpusConfig,
    binary_id: str,
    label: str,
    ambiguous: bool,
    rng: np.random.Generator,
) -> FunctionRecord:
    return FunctionRecord(
        binary_id=binary_id,
        function_id="f0",
        asm_text=_record_text(cfg, "asm", label, ambiguous, binary_id, rng),
        pseudo_text=_record_text(cfg, "code", label, ambiguous, binary_id, rng),
        instr_count=20 + int(rng.integers(0, 41)),
        cyclomatic_complexity=5 + int(rng.integers(0, 26)),
        label=label,
    )


def generate_synthetic_corpus(
    cfg: SyntheticCorpusConfig,
    kb_prefix: str = "kb",
    test_prefix: str = "query",
) -> tuple[list[FunctionRecord], list[FunctionRecord]]:
    """Deterministic labeled KB corpus plus a held-out test corpus.

    Every emitted record passes the default DCF filter, and its text embeds
    (under the mock provider with the same seed) into the intended cluster
    geometry, so the whole pipeline can run on the output.
    """
    rng = np.random.default_rng(cfg.seed)
    kb_records = [
        _make_record(
            cfg,
            f"{kb_prefix}-{i:05d}",
            LABEL_MALICIOUS if i % 2 == 0 else LABEL_BENIGN,
            ambiguous=False,
            rng=rng,
        )
        for i in range(cfg.kb_size)
    ]
    n_ambiguous = round(cfg.ambiguous_fraction * cfg.test_size)
    test_records = []
    for i in range(cfg.test_size):
        test_records.append(
            _make_record(
                cfg,
                f"{test_prefix}-{i:05d}",
                LABEL_MALICIOUS if i % 2 == 0 else LABEL_BENIGN,
                ambiguous=i < n_ambiguous,
                rng=rng,
            )
        )
    return kb_records, test_records


@dataclass(frozen=True)
class ScenarioResult:
    p_malicious: float
    context_w: float
    repetitions: int
    mean_fes: float
    mean_ecs: float
    verdict_counts: dict[str, int]


def simulate_scenarios(
    scenarios: list[dict],
    n_agents: int,
    thresholds: DecisionThresholds,
    seed: int = 0,
    abstain_p: float = 0.0,
) -> list[ScenarioResult]:
    """Monte-Carlo over synthetic agents for (p_malicious, W, repetitions) triples."""
    results = []
    for scenario_index, scenario in enumerate(scenarios):
        p = float(scenario["p_malicious"])
        w = float(scenario["w"])
        reps = int(scenario["reps"])
        scenario_abstain = float(scenario.get("abstain_p", abstain_p))
        if reps < 1:
            raise ConfigError(f"scenario {scenario_index}: reps must be >= 1")
        fes_values = np.empty(reps)
        ecs_values = np.empty(reps)
        counts = {VERDICT_MALICIOUS: 0, VERDICT_BENIGN: 0, VERDICT_UNCERTAIN: 0}
        for rep in range(reps):
            digest = hashlib.blake2b(
                f"{seed}|{scenario_index}|{rep}".encode(), digest_size=8
            ).digest()
            rep_seed = int.from_bytes(digest, "little") % 2**63
            responses = [
                synthetic_agent(p, rep_seed, i, abstain_p=scenario_abstain)
                for i in range(n_agents)
            ]
            votes = aggregate_votes(responses)
            fes_value = fes(votes.malicious_votes, votes.counted_votes, w)
            if votes.counted_votes == 0:
                ecs_value = 0.0
                verdict = VERDICT_UNCERTAIN
            else:
                ecs_value = ecs(votes.malicious_votes, votes.counted_votes)
                if votes.quorum_failed:
                    verdict = VERDICT_UNCERTAIN
                else:
                    verdict, _ = decide(fes_value, ecs_value, thresholds)
            fes_values[rep] = fes_value
            ecs_values[rep] = ecs_value
            counts[verdict] += 1
        results.append(
            ScenarioResult(
                p_malicious=p,
                context_w=w,
                repetitions=reps,
                mean_fes=float(fes_values.mean()),
                mean_ecs=float(ecs_values.mean()),
                verdict_counts=counts,
            )
        )
    return results


def expected_ecs(n_agents: int, p: float) -> float:
    """Closed-form E[ECS] for a seeded Bernoulli ensemble with no abstentions."""
    total = 0.0
    for k in range(n_agents + 1):
        weight = math.comb(n_agents, k) * p**k * (1 - p) ** (n_agents - k)
        share = k / n_agents
        if 0.0 < share < 1.0:
            total += weight * -(share * math.log2(share) + (1 - share) * math.log2(1 - share))
    return total
