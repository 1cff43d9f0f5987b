import json

import numpy as np
import pytest

from binverdict.corpus import DcfFilterConfig, filter_dcfs
from binverdict.errors import ConfigError
from binverdict.evaluation import (
    OutcomeRecord,
    SweepGrid,
    SyntheticCorpusConfig,
    calibrate_thresholds,
    compute_metrics,
    confidence_margin_report,
    diagnostics_by_outcome,
    expected_ecs,
    generate_synthetic_corpus,
    latency_table,
    rejection_tradeoff,
    simulate_scenarios,
)
from binverdict.verdict import DecisionThresholds, VerdictTuple


def outcome(truth, verdict, fes=0.5, ecs=0.1, reason="consensus", knn_confidence=None,
            latencies=None):
    return OutcomeRecord(
        truth=truth,
        tuple=VerdictTuple(
            verdict=verdict, fes=fes, ecs=ecs, p_hat=fes, context_w=1.0, reason=reason
        ),
        knn_confidence=knn_confidence,
        stage_latencies=latencies or {},
    )


class TestComputeMetrics:
    def test_all_correct_no_rejections(self):
        records = [outcome("malicious", "malicious"), outcome("benign", "benign")] * 5
        metrics = compute_metrics(records)
        assert metrics["accuracy"] == 1.0
        assert metrics["fpr"] == 0.0
        assert metrics["fnr"] == 0.0
        assert metrics["rejection_rate"] == 0.0

    def test_hand_confusion_arithmetic(self):
        records = (
            [outcome("malicious", "malicious")] * 49
            + [outcome("benign", "benign")] * 49
            + [outcome("benign", "malicious")]
            + [outcome("malicious", "benign")]
        )
        metrics = compute_metrics(records)
        assert metrics["accuracy"] == pytest.approx(0.98)
        assert metrics["fpr"] == pytest.approx(0.02)
        assert metrics["fnr"] == pytest.approx(0.02)

    def test_rejections_excluded_from_confusion(self):
        records = [outcome("malicious", "uncertain", reason="entropy_reject")] * 10 + [
            outcome("malicious", "malicious")
        ] * 45 + [outcome("benign", "benign")] * 45
        metrics = compute_metrics(records)
        assert metrics["rejection_rate"] == pytest.approx(0.10)
        assert metrics["accuracy"] == 1.0

    def test_all_mode_counts_rejections_in_denominator(self):
        records = [outcome("malicious", "uncertain", reason="gray_zone")] * 5 + [
            outcome("malicious", "malicious")
        ] * 5
        assert compute_metrics(records, on="accepted_only")["accuracy"] == 1.0
        assert compute_metrics(records, on="all")["accuracy"] == pytest.approx(0.5)

    def test_f1_identity(self):
        rng = np.random.default_rng(4)
        records = [
            outcome(
                "malicious" if rng.random() < 0.5 else "benign",
                ["malicious", "benign", "uncertain"][rng.integers(0, 3)],
                reason="gray_zone",
            )
            for _ in range(300)
        ]
        metrics = compute_metrics(records)
        p, r = metrics["precision"], metrics["recall"]
        expected_f1 = 2 * p * r / (p + r) if p + r else 0.0
        assert metrics["f1"] == pytest.approx(expected_f1)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            compute_metrics([])


class TestDiagnostics:
    def test_single_record_per_cell_means_equal_inputs(self):
        records = [
            outcome("malicious", "malicious", fes=0.87, ecs=0.12),
            outcome("benign", "benign", fes=0.14, ecs=0.14),
            outcome("benign", "malicious", fes=0.68, ecs=0.82),
            outcome("malicious", "benign", fes=0.32, ecs=0.86),
        ]
        report = diagnostics_by_outcome(records)
        assert report.by_outcome["TP"].mean_fes == pytest.approx(0.87)
        assert report.by_outcome["TN"].mean_ecs == pytest.approx(0.14)
        assert report.by_outcome["FP"].mean_fes == pytest.approx(0.68)
        assert report.by_outcome["FN"].mean_ecs == pytest.approx(0.86)
        assert report.separation_gap == pytest.approx(0.84 - 0.13)

    def test_all_correct_run_has_no_error_rows(self):
        records = [outcome("malicious", "malicious"), outcome("benign", "benign")]
        report = diagnostics_by_outcome(records)
        assert "FP" not in report.by_outcome
        assert "FN" not in report.by_outcome
        assert report.separation_gap is None

    def test_rejected_records_not_counted(self):
        records = [
            outcome("malicious", "malicious", ecs=0.1),
            outcome("malicious", "uncertain", ecs=0.99, reason="entropy_reject"),
        ]
        report = diagnostics_by_outcome(records)
        assert report.by_outcome["TP"].count == 1


class TestRejectionTradeoff:
    def test_tau_above_one_disables_entropy_rejection(self):
        records = [
            outcome("malicious", "malicious", fes=0.9, ecs=0.99),
            outcome("malicious", "uncertain", fes=0.5, ecs=0.1, reason="gray_zone"),
            outcome("benign", "uncertain", fes=0.0, ecs=0.0, reason="no_evidence"),
        ]
        rows = rejection_tradeoff(records, [1.01])
        # Only the gray-zone and no-evidence records stay rejected.
        assert rows[0].rejection_rate == pytest.approx(2 / 3)

    def test_rejection_monotone_nonincreasing_in_tau(self):
        rng = np.random.default_rng(11)
        records = [
            outcome(
                "malicious" if rng.random() < 0.5 else "benign",
                "malicious",
                fes=float(rng.random()),
                ecs=float(rng.random()),
            )
            for _ in range(400)
        ]
        rows = rejection_tradeoff(records, [0.2, 0.4, 0.6, 0.8, 1.0])
        rates = [row.rejection_rate for row in rows]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_forced_uncertain_stays_rejected_at_every_tau(self):
        records = [outcome("malicious", "uncertain", fes=0.0, ecs=0.0, reason="quorum_failed")]
        rows = rejection_tradeoff(records, [0.1, 0.5, 0.9, 1.01])
        assert all(row.rejection_rate == 1.0 for row in rows)


class TestCalibration:
    def make_records(self):
        rng = np.random.default_rng(13)
        records = []
        for _ in range(200):
            truth = "malicious" if rng.random() < 0.5 else "benign"
            if truth == "malicious":
                fes, ecs = float(rng.uniform(0.5, 1.0)), float(rng.uniform(0, 0.6))
            else:
                fes, ecs = float(rng.uniform(0.0, 0.5)), float(rng.uniform(0, 0.6))
            records.append(outcome(truth, "malicious", fes=fes, ecs=ecs))
        return records

    def test_singleton_grid(self):
        grid = SweepGrid(
            k_values=(10,), sigma_values=(0.7,), n_values=(5,), t_values=(0.7,),
            delta_high_values=(0.6,), delta_low_values=(0.4,), tau_values=(0.8,),
        )
        rows = calibrate_thresholds(self.make_records(), grid)
        assert len(rows) == 1
        assert rows[0].tau_stable == 0.8

    def test_default_grid_row_count(self):
        rows = calibrate_thresholds(self.make_records(), SweepGrid(), objective="max_f1")
        assert len(rows) == 4 * 4 * 5 * 5 * 4 * 4 * 4

    def test_tie_break_prefers_lower_rejection(self):
        records = [
            outcome("malicious", "malicious", fes=0.9, ecs=0.75),
            outcome("benign", "benign", fes=0.1, ecs=0.05),
        ]
        grid = SweepGrid(
            k_values=(10,), sigma_values=(0.7,), n_values=(5,), t_values=(0.7,),
            delta_high_values=(0.6,), delta_low_values=(0.4,),
            tau_values=(0.7, 0.8),  # tau=0.7 rejects the first record; tau=0.8 accepts it
        )
        rows = calibrate_thresholds(records, grid, objective="min_error")
        assert rows[0].tau_stable == 0.8
        assert rows[0].metrics["rejection_rate"] < rows[1].metrics["rejection_rate"]

    def test_rejection_cap_marks_infeasible(self):
        records = [outcome("malicious", "malicious", fes=0.9, ecs=0.9)]
        grid = SweepGrid(
            k_values=(10,), sigma_values=(0.7,), n_values=(5,), t_values=(0.7,),
            delta_high_values=(0.6,), delta_low_values=(0.4,), tau_values=(0.8, 0.95),
        )
        rows = calibrate_thresholds(records, grid, objective="min_error", rejection_cap=0.0)
        assert rows[0].feasible and rows[0].tau_stable == 0.95
        assert not rows[1].feasible

    def test_empty_grid_rejected(self):
        with pytest.raises(ConfigError):
            SweepGrid(k_values=())


class TestConfidenceMargins:
    def test_perfect_confidence(self):
        records = [
            outcome("malicious", "malicious", knn_confidence=1.0),
            outcome("benign", "benign", knn_confidence=1.0),
        ]
        report = confidence_margin_report(records)
        assert report.applicable
        assert all(row.mean_margin == pytest.approx(0.5) for row in report.rows)
        assert report.error_flag_rate == 0.0
        assert report.correct_flag_rate == 0.0

    def test_low_confidence_errors_flagged(self):
        records = (
            [outcome("benign", "malicious", knn_confidence=0.51)] * 4
            + [outcome("malicious", "benign", knn_confidence=0.51)] * 4
            + [outcome("malicious", "malicious", knn_confidence=0.60)] * 20
            + [outcome("benign", "benign", knn_confidence=0.60)] * 20
        )
        report = confidence_margin_report(records, c_min=0.52)
        assert report.error_flag_rate == 1.0
        assert report.correct_flag_rate == 0.0
        by_outcome = {row.outcome: row for row in report.rows}
        assert by_outcome["FP"].mean_confidence == pytest.approx(0.51)
        assert by_outcome["TP"].mean_margin == pytest.approx(0.10)

    def test_not_applicable_without_confidences(self):
        report = confidence_margin_report([outcome("malicious", "malicious")])
        assert not report.applicable


class TestLatencyTable:
    def test_share_accounting(self):
        rows = latency_table([{"lift-parse": 1.0, "ensemble": 3.0}])
        shares = {row.stage: row.share_pct for row in rows}
        assert shares == {"lift-parse": 25.0, "ensemble": 75.0}

    def test_absent_stage_has_no_row(self):
        rows = latency_table([{"embed": 0.5, "retrieve": 0.5}])
        assert {row.stage for row in rows} == {"embed", "retrieve"}

    def test_shares_sum_to_one_hundred(self):
        rng = np.random.default_rng(14)
        latencies = [
            {stage: float(rng.uniform(0.01, 2.0)) for stage in ("lift-parse", "embed", "ensemble")}
            for _ in range(30)
        ]
        rows = latency_table(latencies)
        assert sum(row.share_pct for row in rows) == pytest.approx(100.0, abs=1e-6)


class TestSyntheticCorpus:
    def test_same_seed_identical_dump(self):
        cfg = SyntheticCorpusConfig(kb_size=20, test_size=10, dim=16, seed=5)
        first = generate_synthetic_corpus(cfg)
        second = generate_synthetic_corpus(cfg)
        dump = lambda pair: json.dumps(
            [r.to_json() for r in pair[0] + pair[1]], sort_keys=True
        )
        assert dump(first) == dump(second)

    def test_sizes_and_labels(self):
        cfg = SyntheticCorpusConfig(kb_size=30, test_size=20, dim=16, seed=6,
                                    ambiguous_fraction=0.5)
        kb, test = generate_synthetic_corpus(cfg)
        assert len(kb) == 30
        assert len(test) == 20
        assert {r.label for r in kb} == {"malicious", "benign"}
        assert {r.label for r in test} == {"malicious", "benign"}

    def test_all_records_pass_default_dcf_filter(self):
        cfg = SyntheticCorpusConfig(kb_size=20, test_size=10, dim=16, seed=7)
        kb, test = generate_synthetic_corpus(cfg)
        result = filter_dcfs(kb + test, DcfFilterConfig())
        assert len(result.retained) == 30

    def test_validation(self):
        with pytest.raises(ConfigError):
            SyntheticCorpusConfig(kb_size=5)
        with pytest.raises(ConfigError):
            SyntheticCorpusConfig(ambiguous_fraction=1.5)


class TestSimulate:
    def test_unanimous_scenario(self):
        results = simulate_scenarios(
            [{"p_malicious": 1.0, "w": 0.9, "reps": 1000}],
            n_agents=5, thresholds=DecisionThresholds(), seed=3,
        )
        assert results[0].mean_ecs == 0.0
        assert results[0].verdict_counts == {"malicious": 1000, "benign": 0, "uncertain": 0}
        assert results[0].mean_fes == pytest.approx(0.9)

    def test_low_weight_forbids_malicious(self):
        # FES is bounded by W, so W=0.5 can never clear the 0.6 bar.
        results = simulate_scenarios(
            [{"p_malicious": 0.9, "w": 0.5, "reps": 500}],
            n_agents=5, thresholds=DecisionThresholds(), seed=4,
        )
        assert results[0].verdict_counts["malicious"] == 0

    def test_split_scenario_dominated_by_rejection(self):
        # Closed form: E[ECS] = sum_k C(5,k) 2^-5 H(k/5) = 0.83245 for p = 0.5.
        results = simulate_scenarios(
            [{"p_malicious": 0.5, "w": 0.9, "reps": 1000}],
            n_agents=5, thresholds=DecisionThresholds(), seed=5,
        )
        assert results[0].mean_ecs == pytest.approx(0.8324466511864687, abs=0.03)
        assert results[0].verdict_counts["uncertain"] > 500

    def test_expected_ecs_closed_form(self):
        # Independent frozen constant: sum over C(5,k) 2^-5 H(k/5).
        assert expected_ecs(5, 0.5) == pytest.approx(0.8324466511864687, abs=1e-12)


class TestOutcomeRecordValidation:
    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigError):
            outcome("malicious", "malicious", latencies={"warp": 1.0})

    def test_unknown_truth_rejected(self):
        with pytest.raises(ConfigError):
            outcome("unknown", "malicious")
