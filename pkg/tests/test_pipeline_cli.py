import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from binverdict.cli import main
from binverdict.corpus import FunctionRecord, write_function_records
from binverdict.embedding import EmbeddingProviderConfig
from binverdict.ensemble import EnsembleConfig
from binverdict.errors import ConfigError, DataFormatError
from binverdict.evaluation import SyntheticCorpusConfig, generate_synthetic_corpus
from binverdict.pipeline import (
    PipelineConfig,
    RetrievalConfig,
    apply_env_overrides,
    build_kb,
    classify_records,
    config_from_dict,
    load_config,
)

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


def offline_config(seed=11, dim=32, **overrides):
    base = dict(
        mode="full",
        seed=seed,
        embedding=EmbeddingProviderConfig(dim=dim, corpus_seed=seed),
        ensemble=EnsembleConfig(generator="synthetic", seed=seed),
        retrieval=RetrievalConfig(k=10, sigma_min=0.7, balanced=True),
    )
    base.update(overrides)
    return PipelineConfig(**base)


def synthetic_setup(tmp_path, seed=11, dim=32, separation=1.0, ambiguous=0.0,
                    kb_size=60, test_size=20, **config_overrides):
    synth = SyntheticCorpusConfig(
        kb_size=kb_size, test_size=test_size, dim=dim,
        cluster_separation=separation, ambiguous_fraction=ambiguous, seed=seed,
    )
    kb_records, test_records = generate_synthetic_corpus(synth)
    config = offline_config(seed=seed, dim=dim, kb_path=str(tmp_path / "kb.bvkb"),
                            report_dir=str(tmp_path / "reports"), **config_overrides)
    index, report = build_kb(config, kb_records)
    return config, index, kb_records, test_records


class TestConfig:
    def test_round_trip_and_unknown_keys(self, tmp_path):
        assert config_from_dict({"mode": "knn_only"}).mode == "knn_only"
        with pytest.raises(ConfigError):
            config_from_dict({"mode": "full", "bogus": 1})
        with pytest.raises(ConfigError):
            config_from_dict({"retrieval": {"k": 10, "bogus": 1}})

    def test_load_example_config(self):
        config = load_config(FIXTURES / "config.example.json")
        assert config.retrieval.sigma_min == 0.7
        assert config.ensemble.n_agents == 5

    def test_missing_config_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/config.json")

    def test_env_overrides_endpoints_only(self):
        config = offline_config()
        overridden = apply_env_overrides(
            config,
            env={
                "BINVERDICT_EMBED_URL": "http://embed.local/api",
                "BINVERDICT_GENERATE_URL": "http://gen.local/api",
            },
        )
        assert overridden.embedding.endpoint_url == "http://embed.local/api"
        assert overridden.ensemble.endpoint_url == "http://gen.local/api"
        assert overridden.mode == config.mode

    def test_invalid_mode_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig(mode="turbo")

    def test_simulated_latency_auto(self):
        assert offline_config().simulated_latencies()
        wall = dataclasses.replace(offline_config(), latency_mode="wall")
        assert not wall.simulated_latencies()


class TestClassifyModes:
    def test_full_mode_clean_malicious_binary(self, tmp_path):
        config, index, _, test_records = synthetic_setup(
            tmp_path, ensemble=EnsembleConfig(generator="synthetic", seed=11, synthetic_p=1.0),
        )
        target = [r for r in test_records if r.label == "malicious"][:3]
        output = classify_records(target, index, config)
        for fr in output.functions:
            assert fr.tuple.verdict == "malicious"
            assert fr.tuple.ecs == 0.0
            assert fr.agent_votes == ["malicious"] * 5
            assert fr.neighbor_ids
        assert all(bv.verdict == "malicious" for bv in output.binaries)

    def test_knn_only_mode_has_no_ensemble_stage(self, tmp_path):
        config, index, _, test_records = synthetic_setup(tmp_path, mode="knn_only")
        output = classify_records(test_records[:5], index, config)
        for fr in output.functions:
            assert fr.agent_votes == []
            assert "ensemble" not in fr.stage_latencies
            assert fr.knn_confidence is not None
            assert fr.tuple.verdict in ("malicious", "benign")
            assert fr.tuple.fes <= fr.tuple.context_w + 1e-12

    def test_knn_only_accuracy_on_separated_clusters(self, tmp_path):
        config, index, _, test_records = synthetic_setup(tmp_path, mode="knn_only")
        output = classify_records(test_records, index, config)
        correct = sum(1 for fr in output.functions if fr.tuple.verdict == fr.truth)
        assert correct / len(output.functions) >= 0.95

    def test_zero_shot_ignores_kb_and_sets_unit_weight(self, tmp_path):
        config = offline_config(mode="zero_shot")
        records = generate_synthetic_corpus(
            SyntheticCorpusConfig(kb_size=10, test_size=10, dim=32, seed=11)
        )[1]
        output = classify_records(records[:4], None, config)
        for fr in output.functions:
            assert fr.tuple.context_w == 1.0
            assert "retrieve" not in fr.stage_latencies
            assert fr.neighbor_ids == []

    def test_empty_retrieval_full_mode_is_no_evidence(self, tmp_path):
        config, index, _, _ = synthetic_setup(tmp_path)
        alien = FunctionRecord(
            binary_id="alien", function_id="f0",
            asm_text=" ".join(f"zz{i}" for i in range(40)),
            pseudo_text=" ".join(f"qq{i}" for i in range(40)),
            instr_count=40, cyclomatic_complexity=9,
        )
        output = classify_records([alien], index, config)
        assert output.functions[0].tuple.verdict == "uncertain"
        assert output.functions[0].tuple.reason == "no_evidence"

    def test_ambiguous_records_entropy_reject_under_defaults(self, tmp_path):
        config, index, _, test_records = synthetic_setup(
            tmp_path, separation=0.75, ambiguous=1.0, dim=64, kb_size=80, test_size=20,
            retrieval=RetrievalConfig(k=10, sigma_min=0.45, balanced=True),
        )
        output = classify_records(test_records, index, config)
        reasons = [fr.tuple.reason for fr in output.functions]
        assert reasons.count("entropy_reject") >= len(reasons) // 3
        rejected = [fr for fr in output.functions if fr.tuple.reason == "entropy_reject"]
        assert all(fr.tuple.ecs >= 0.80 for fr in rejected)

    def test_binary_with_no_dcfs_is_uncertain(self, tmp_path):
        config, index, _, _ = synthetic_setup(tmp_path)
        tiny = FunctionRecord(
            binary_id="tiny", function_id="f0", asm_text="ret", pseudo_text="",
            instr_count=1, cyclomatic_complexity=1,
        )
        output = classify_records([tiny], index, config)
        assert output.functions == []
        assert output.binaries[0].binary_id == "tiny"
        assert output.binaries[0].verdict == "uncertain"

    def test_quorum_failure_forces_uncertain(self, tmp_path):
        config, index, _, test_records = synthetic_setup(
            tmp_path,
            ensemble=EnsembleConfig(
                generator="synthetic", seed=11, synthetic_p=1.0, synthetic_abstain_p=1.0
            ),
        )
        output = classify_records(test_records[:2], index, config)
        for fr in output.functions:
            assert fr.tuple.verdict == "uncertain"
            assert fr.tuple.reason == "quorum_failed"

    def test_workers_do_not_change_results(self, tmp_path):
        config, index, _, test_records = synthetic_setup(tmp_path)
        serial = classify_records(test_records, index, config)
        parallel_cfg = dataclasses.replace(config, workers=4)
        parallel = classify_records(test_records, index, parallel_cfg)
        assert [fr.tuple for fr in serial.functions] == [fr.tuple for fr in parallel.functions]

    def test_context_weight_regime_on_separated_clusters(self, tmp_path):
        # Every retained neighbor clears sigma_min, and the mean retrieval
        # similarity lands in the high-consistency band the corpus is built for.
        config, index, _, test_records = synthetic_setup(tmp_path)
        output = classify_records(test_records, index, config)
        weights = [fr.tuple.context_w for fr in output.functions if fr.neighbor_ids]
        assert weights
        assert all(config.retrieval.sigma_min <= w <= 1.0 for w in weights)
        assert 0.75 <= float(np.mean(weights)) <= 0.95

    def test_simulated_latency_accounting_ensemble_dominates(self, tmp_path):
        from binverdict.evaluation import latency_table
        from binverdict.pipeline import SIMULATED_STAGE_COSTS

        config, index, _, test_records = synthetic_setup(tmp_path)
        output = classify_records(test_records[:6], index, config)
        rows = latency_table([fr.stage_latencies for fr in output.functions])
        shares = {row.stage: row.share_pct for row in rows}
        assert sum(shares.values()) == pytest.approx(100.0, abs=1e-6)
        assert max(shares, key=shares.get) == "ensemble"
        total = sum(SIMULATED_STAGE_COSTS.values())
        assert shares["ensemble"] == pytest.approx(
            100.0 * SIMULATED_STAGE_COSTS["ensemble"] / total, abs=1e-6
        )


class TestBuildKb:
    def test_unlabeled_corpus_aborts(self, tmp_path):
        config = offline_config(kb_path=str(tmp_path / "kb.bvkb"))
        records = [
            FunctionRecord(
                binary_id="b", function_id="f", asm_text="a b c", instr_count=20,
                cyclomatic_complexity=8, label="unknown",
            )
        ]
        with pytest.raises(DataFormatError, match="unlabeled"):
            build_kb(config, records)
        assert not (tmp_path / "kb.bvkb").exists()

    def test_counts_match_hand_filter(self, tmp_path):
        synth = SyntheticCorpusConfig(kb_size=40, test_size=10, dim=32, seed=3)
        kb_records, _ = generate_synthetic_corpus(synth)
        config = offline_config(seed=3, kb_path=str(tmp_path / "kb.bvkb"))
        index, report = build_kb(config, kb_records)
        expected = [
            r for r in kb_records
            if r.instr_count >= 10 and r.cyclomatic_complexity >= 5
        ]
        assert report.dcf_retained == len(expected)
        assert len(index) == report.embedded
        assert report.n_malicious + report.n_benign == len(index)


class TestCliCommands:
    def run_cli(self, *argv):
        return main([str(a) for a in argv])

    def write_corpus(self, records, path):
        write_function_records(records, path)
        return path

    def make_config_file(self, tmp_path, seed=11, dim=32, **extra):
        config = {
            "mode": "full",
            "seed": seed,
            "report_dir": str(tmp_path / "reports"),
            "kb_path": str(tmp_path / "kb.bvkb"),
            "embedding": {"mode": "mock", "dim": dim, "corpus_seed": seed},
            "ensemble": {"generator": "synthetic", "seed": seed},
            "retrieval": {"k": 10, "sigma_min": 0.70, "balanced": True},
        }
        config.update(extra)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        return path

    def test_build_kb_and_classify_end_to_end(self, tmp_path):
        synth = SyntheticCorpusConfig(kb_size=40, test_size=12, dim=32, seed=11)
        kb_records, test_records = generate_synthetic_corpus(synth)
        kb_corpus = self.write_corpus(kb_records, tmp_path / "kb.jsonl")
        test_corpus = self.write_corpus(test_records, tmp_path / "test.jsonl")
        config_path = self.make_config_file(tmp_path)

        assert self.run_cli("--config", config_path, "build-kb", kb_corpus) == 0
        assert (tmp_path / "kb.bvkb").exists()
        build_report = json.loads((tmp_path / "reports" / "build_report.json").read_text())
        assert build_report["kb_malicious"] + build_report["kb_benign"] > 0

        assert self.run_cli("--config", config_path, "classify", test_corpus) == 0
        reports_dir = tmp_path / "reports"
        verdict_lines = (reports_dir / "verdicts.jsonl").read_text().strip().splitlines()
        assert len(verdict_lines) == len(test_records)
        for line in verdict_lines:
            row = json.loads(line)
            # Every verdict ships its full evidence chain.
            assert {"verdict", "fes", "ecs", "p_hat", "context_w", "reason",
                    "agent_votes", "neighbor_ids"} <= set(row)
        assert (reports_dir / "binary_verdicts.csv").exists()
        assert (reports_dir / "fes_ecs_by_verdict.png").exists()
        assert (reports_dir / "latency_breakdown.csv").exists()

    def test_build_kb_rerun_byte_identical(self, tmp_path):
        synth = SyntheticCorpusConfig(kb_size=30, test_size=10, dim=32, seed=5)
        kb_records, _ = generate_synthetic_corpus(synth)
        corpus = self.write_corpus(kb_records, tmp_path / "kb.jsonl")
        config_path = self.make_config_file(tmp_path, seed=5)
        assert self.run_cli("--config", config_path, "build-kb", corpus,
                            "--out", tmp_path / "a.bvkb") == 0
        assert self.run_cli("--config", config_path, "build-kb", corpus,
                            "--out", tmp_path / "b.bvkb") == 0
        assert (tmp_path / "a.bvkb").read_bytes() == (tmp_path / "b.bvkb").read_bytes()

    def test_classify_knn_only_latency_has_no_ensemble_row(self, tmp_path):
        synth = SyntheticCorpusConfig(kb_size=30, test_size=10, dim=32, seed=11)
        kb_records, test_records = generate_synthetic_corpus(synth)
        kb_corpus = self.write_corpus(kb_records, tmp_path / "kb.jsonl")
        test_corpus = self.write_corpus(test_records, tmp_path / "test.jsonl")
        config_path = self.make_config_file(tmp_path)
        assert self.run_cli("--config", config_path, "build-kb", kb_corpus) == 0
        assert self.run_cli("--config", config_path, "--mode", "knn_only",
                            "classify", test_corpus) == 0
        latency = (tmp_path / "reports" / "latency_breakdown.csv").read_text()
        assert "ensemble" not in latency
        assert "retrieve" in latency

    def test_calibrate_rejects_overlapping_binaries(self, tmp_path, capsys):
        synth = SyntheticCorpusConfig(kb_size=30, test_size=10, dim=32, seed=11)
        kb_records, _ = generate_synthetic_corpus(synth)
        kb_corpus = self.write_corpus(kb_records, tmp_path / "kb.jsonl")
        config_path = self.make_config_file(tmp_path)
        assert self.run_cli("--config", config_path, "build-kb", kb_corpus) == 0
        # Validating on the KB corpus itself must fail loudly with the ids.
        code = self.run_cli("--config", config_path, "calibrate", kb_corpus)
        assert code == 3
        err = capsys.readouterr().err
        assert "overlap" in err
        assert "kb-00000" in err

    def test_calibrate_singleton_grid(self, tmp_path):
        synth = SyntheticCorpusConfig(kb_size=40, test_size=14, dim=32, seed=11)
        kb_records, test_records = generate_synthetic_corpus(synth)
        kb_corpus = self.write_corpus(kb_records, tmp_path / "kb.jsonl")
        val_corpus = self.write_corpus(test_records, tmp_path / "val.jsonl")
        config_path = self.make_config_file(tmp_path)
        grid_path = tmp_path / "grid.json"
        grid_path.write_text(json.dumps({
            "k_values": [10], "sigma_values": [0.7], "n_values": [5], "t_values": [0.7],
            "delta_high_values": [0.6], "delta_low_values": [0.4], "tau_values": [0.8],
        }))
        assert self.run_cli("--config", config_path, "build-kb", kb_corpus) == 0
        assert self.run_cli("--config", config_path, "calibrate", val_corpus,
                            "--grid", grid_path) == 0
        rows = (tmp_path / "reports" / "calibration.csv").read_text().strip().splitlines()
        assert len(rows) == 2  # header + one configuration
        chosen = json.loads((tmp_path / "reports" / "chosen_config.json").read_text())
        assert chosen["thresholds"]["tau_stable"] == 0.8

    def test_simulate_cli(self, tmp_path):
        config_path = self.make_config_file(tmp_path)
        scenarios = tmp_path / "scenarios.json"
        scenarios.write_text(json.dumps({
            "n_agents": 5,
            "scenarios": [{"p_malicious": 1.0, "w": 0.9, "reps": 1000}],
        }))
        assert self.run_cli("--config", config_path, "simulate", scenarios) == 0
        body = (tmp_path / "reports" / "simulation.csv").read_text()
        row = body.strip().splitlines()[1].split(",")
        assert float(row[4]) == 0.0  # mean ECS
        assert int(row[5]) == 1000  # all malicious
        assert (tmp_path / "reports" / "simulation.png").exists()

    def test_export_embeddings_rows_and_determinism(self, tmp_path):
        synth = SyntheticCorpusConfig(kb_size=10, test_size=10, dim=32, seed=11)
        _, test_records = generate_synthetic_corpus(synth)
        corpus = self.write_corpus(test_records[:3], tmp_path / "dump.jsonl")
        config_path = self.make_config_file(tmp_path)
        out_a = tmp_path / "a.csv"
        out_b = tmp_path / "b.csv"
        assert self.run_cli("--config", config_path, "export-embeddings", corpus,
                            "--out", out_a) == 0
        assert self.run_cli("--config", config_path, "export-embeddings", corpus,
                            "--out", out_b) == 0
        lines = out_a.read_text().strip().splitlines()
        assert len(lines) == 4
        assert len(lines[0].split(",")) == 64 + 3  # composite dim + id/label columns
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_evaluate_synthetic_writes_full_report_set(self, tmp_path):
        config_path = self.make_config_file(
            tmp_path, seed=11,
            retrieval={"k": 10, "sigma_min": 0.45, "balanced": True},
        )
        synth_path = tmp_path / "synth.json"
        synth_path.write_text(json.dumps({
            "kb_size": 40, "test_size": 20, "dim": 32, "cluster_separation": 0.75,
            "ambiguous_fraction": 0.2, "seed": 11,
        }))
        assert self.run_cli("--config", config_path, "evaluate",
                            "--synthetic", synth_path) == 0
        reports_dir = tmp_path / "reports"
        for name in (
            "metrics.json", "metrics.csv", "outcome_diagnostics.csv",
            "rejection_tradeoff.csv", "rejection_tradeoff.png",
            "fes_ecs_by_outcome.csv", "fes_ecs_by_outcome.png",
            "confidence_margins.csv", "latency_breakdown.csv",
            "verdicts.jsonl", "summary.json", "synthetic_kb_corpus.jsonl",
        ):
            assert (reports_dir / name).exists(), name
        metrics = json.loads((reports_dir / "metrics.json").read_text())
        assert set(metrics) == {
            "accuracy", "precision", "recall", "f1", "fpr", "fnr", "rejection_rate"
        }

    def test_evaluate_requires_corpus_or_synthetic(self, tmp_path):
        config_path = self.make_config_file(tmp_path)
        assert self.run_cli("--config", config_path, "evaluate") == 2

    def test_exit_codes(self, tmp_path):
        config_path = self.make_config_file(tmp_path)
        # data error: corpus file missing
        assert self.run_cli("--config", config_path, "classify",
                            tmp_path / "nope.jsonl") == 3
        # config error: malformed config file
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert self.run_cli("--config", bad, "show-config") == 2
        # config error: unknown config key
        unknown = tmp_path / "unknown.json"
        unknown.write_text(json.dumps({"bogus": 1}))
        assert self.run_cli("--config", unknown, "show-config") == 2

    def test_seed_flag_overrides_section_seeds(self, tmp_path, capsys):
        config_path = self.make_config_file(tmp_path, seed=11)
        assert self.run_cli("--config", config_path, "--seed", "99", "show-config") == 0
        shown = json.loads(capsys.readouterr().out)
        assert shown["seed"] == 99
        assert shown["ensemble"]["seed"] == 99
        assert shown["embedding"]["corpus_seed"] == 99

    def test_mode_flag_overrides_config(self, tmp_path, capsys):
        config_path = self.make_config_file(tmp_path)
        assert self.run_cli("--config", config_path, "--mode", "knn_only", "show-config") == 0
        assert json.loads(capsys.readouterr().out)["mode"] == "knn_only"

    def test_unlabeled_kb_corpus_aborts_via_cli(self, tmp_path):
        records = [
            FunctionRecord(
                binary_id="b", function_id="f", asm_text="a b", instr_count=20,
                cyclomatic_complexity=9, label="unknown",
            )
        ]
        corpus = self.write_corpus(records, tmp_path / "c.jsonl")
        config_path = self.make_config_file(tmp_path)
        assert self.run_cli("--config", config_path, "build-kb", corpus) == 3
        assert not (tmp_path / "kb.bvkb").exists()
