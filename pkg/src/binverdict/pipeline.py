"""End-to-end orchestration: config, KB construction, and corpus classification."""
from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

from .corpus import (
    DcfFilterConfig,
    FilterResult,
    FunctionRecord,
    LABEL_MALICIOUS,
    LABEL_UNKNOWN,
    ParseResult,
    filter_dcfs,
    parse_function_records_file,
    select_top_m,
)
from .embedding import (
    CompositeEmbedding,
    EmbeddingProviderConfig,
    compose_query,
    embed_streams,
)
from .ensemble import EnsembleConfig, run_ensemble
from .errors import ConfigError, DataFormatError, NoSignalError
from .knowledge_base import (
    KbEntry,
    KbIndex,
    RetrievalSet,
    build_index,
    context_weight,
    knn_vote,
    retrieve,
    save_index,
)
from .verdict import (
    BinaryVerdict,
    DecisionThresholds,
    REASON_CONSENSUS,
    REASON_NO_EVIDENCE,
    REASON_QUORUM_FAILED,
    VERDICT_MALICIOUS,
    VERDICT_UNCERTAIN,
    VerdictTuple,
    aggregate_binary,
    decide,
    ecs,
    fes,
    vote_fraction,
)

MODE_FULL = "full"
MODE_KNN_ONLY = "knn_only"
MODE_ZERO_SHOT = "zero_shot"
MODES = (MODE_FULL, MODE_KNN_ONLY, MODE_ZERO_SHOT)

ENV_EMBED_URL = "BINVERDICT_EMBED_URL"
ENV_GENERATE_URL = "BINVERDICT_GENERATE_URL"

# Logical per-DCF stage costs used when latencies are simulated.
SIMULATED_STAGE_COSTS = {
    "lift-parse": 1.06,
    "embed": 0.24,
    "retrieve": 0.005,
    "ensemble": 6.3,
    "decide": 0.001,
}


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 10
    sigma_min: float = 0.70
    balanced: bool = True

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"retrieval k must be >= 1, got {self.k}")
        if not 0.0 <= self.sigma_min <= 1.0:
            raise ConfigError(f"sigma_min must be in [0, 1], got {self.sigma_min}")


@dataclass(frozen=True)
class PipelineConfig:
    """Single configuration object covering every pipeline stage.

    Precedence when assembling one of these: CLI flags > config file > defaults.
    Environment variables override the two endpoint URLs only.
    """

    mode: str = MODE_FULL
    seed: int = 0
    workers: int = 1
    report_dir: str = "reports"
    kb_path: str = "kb.bvkb"
    snippet_cap: int = 480
    latency_mode: str = "auto"  # auto | wall | simulated
    dcf: DcfFilterConfig = field(default_factory=DcfFilterConfig)
    embedding: EmbeddingProviderConfig = field(default_factory=EmbeddingProviderConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    thresholds: DecisionThresholds = field(default_factory=DecisionThresholds)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.latency_mode not in ("auto", "wall", "simulated"):
            raise ConfigError(f"latency_mode must be auto, wall, or simulated")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def simulated_latencies(self) -> bool:
        if self.latency_mode == "simulated":
            return True
        if self.latency_mode == "wall":
            return False
        return self.embedding.mode == "mock" and self.ensemble.generator == "synthetic"


_SECTION_TYPES = {
    "dcf": DcfFilterConfig,
    "embedding": EmbeddingProviderConfig,
    "retrieval": RetrievalConfig,
    "ensemble": EnsembleConfig,
    "thresholds": DecisionThresholds,
}


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a PipelineConfig from decoded JSON, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    kwargs: dict = {}
    top_level = {f.name for f in dataclasses.fields(PipelineConfig)}
    for key, value in data.items():
        if key not in top_level:
            raise ConfigError(f"unknown config key '{key}'")
        if key in _SECTION_TYPES:
            section_type = _SECTION_TYPES[key]
            known = {f.name for f in dataclasses.fields(section_type)}
            unknown = set(value) - known
            if unknown:
                raise ConfigError(f"unknown keys in config section '{key}': {sorted(unknown)}")
            try:
                kwargs[key] = section_type(**value)
            except TypeError as exc:
                raise ConfigError(f"bad config section '{key}': {exc}") from exc
        else:
            kwargs[key] = value
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def config_to_dict(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return config_from_dict(data)


def apply_env_overrides(config: PipelineConfig, env=os.environ) -> PipelineConfig:
    """Endpoint URLs are the only environment-overridable settings."""
    embed_url = env.get(ENV_EMBED_URL)
    generate_url = env.get(ENV_GENERATE_URL)
    if not embed_url and not generate_url:
        return config
    embedding = config.embedding
    ensemble = config.ensemble
    if embed_url:
        embedding = dataclasses.replace(embedding, endpoint_url=embed_url)
    if generate_url:
        ensemble = dataclasses.replace(ensemble, endpoint_url=generate_url)
    return dataclasses.replace(config, embedding=embedding, ensemble=ensemble)


@dataclass
class BuildKbReport:
    parsed: int
    parse_errors: int
    dcf_retained: int
    dcf_excluded: int
    selected: int
    embedded: int
    skipped: list[str]
    n_malicious: int
    n_benign: int


def snippet_for(record: FunctionRecord, cap: int) -> str:
    text = record.pseudo_text or record.asm_text
    return text[:cap]


def embed_record(
    record: FunctionRecord, provider: EmbeddingProviderConfig
) -> CompositeEmbedding:
    e_asm, e_dec = embed_streams(record, provider)
    return compose_query(e_asm, e_dec, source=record.key)


def build_kb_entries(
    records: list[FunctionRecord], config: PipelineConfig
) -> tuple[list[KbEntry], list[str]]:
    """Embed labeled records into KB entries; unembeddable ones are reported."""
    entries: list[KbEntry] = []
    skipped: list[str] = []
    for record in records:
        try:
            composite = embed_record(record, config.embedding)
        except NoSignalError as exc:
            skipped.append(str(exc))
            continue
        entries.append(
            KbEntry(
                composite=composite,
                label=record.label,
                binary_id=record.binary_id,
                function_id=record.function_id,
                snippet=snippet_for(record, config.snippet_cap),
            )
        )
    return entries, skipped


def build_kb(
    config: PipelineConfig,
    records: list[FunctionRecord],
    out_path: str | None = None,
) -> tuple[KbIndex, BuildKbReport]:
    """Filter, sample, embed, index, and atomically persist a knowledge base.

    Aborts before writing anything if any input record lacks a verified label.
    """
    unlabeled = [
        f"{r.binary_id}/{r.function_id}" for r in records if r.label == LABEL_UNKNOWN
    ]
    if unlabeled:
        raise DataFormatError(
            "KB corpus contains unlabeled records: " + ", ".join(unlabeled[:20])
        )
    filtered = filter_dcfs(records, config.dcf)
    selected = select_top_m(filtered.retained, config.dcf.top_m)
    entries, skipped = build_kb_entries(selected, config)
    index = build_index(entries, corpus_seed=config.seed)
    path = out_path or config.kb_path
    tmp_path = f"{path}.tmp"
    save_index(index, tmp_path)
    os.replace(tmp_path, path)
    report = BuildKbReport(
        parsed=len(records),
        parse_errors=0,
        dcf_retained=len(filtered.retained),
        dcf_excluded=len(filtered.excluded),
        selected=len(selected),
        embedded=len(entries),
        skipped=skipped,
        n_malicious=index.build_meta.n_malicious,
        n_benign=index.build_meta.n_benign,
    )
    return index, report


def build_kb_from_file(
    config: PipelineConfig, corpus_path, out_path: str | None = None
) -> tuple[KbIndex, BuildKbReport, ParseResult]:
    parsed = parse_function_records_file(corpus_path)
    index, report = build_kb(config, parsed.records, out_path)
    report.parsed = len(parsed.records)
    report.parse_errors = len(parsed.issues)
    return index, report, parsed


@dataclass
class FunctionResult:
    """Evidence chain for one classified function."""

    binary_id: str
    function_id: str
    tuple: VerdictTuple
    neighbor_ids: list[str]
    agent_votes: list[str]
    knn_confidence: float | None
    stage_latencies: dict[str, float]
    truth: str = LABEL_UNKNOWN


@dataclass
class ClassifyOutput:
    functions: list[FunctionResult]
    binaries: list[BinaryVerdict]
    parse: ParseResult | None = None
    filtered: FilterResult | None = None


class _StageClock:
    """Wall-clock or deterministic per-stage timing, one instance per function."""

    def __init__(self, simulated: bool):
        self.simulated = simulated
        self.latencies: dict[str, float] = {}

    def record(self, stage: str, start: float) -> None:
        if self.simulated:
            self.latencies[stage] = SIMULATED_STAGE_COSTS[stage]
        else:
            self.latencies[stage] = time.perf_counter() - start


def _evidence_vote_probability(rs: RetrievalSet, cfg: EnsembleConfig) -> float | None:
    """Couple synthetic agent conviction to the retrieved evidence balance.

    Mixed evidence pins the vote probability near 0.5; one-sided evidence is
    sharpened toward certainty.  Explicit synthetic_p in the config wins.
    """
    if cfg.generator != "synthetic" or cfg.synthetic_p is not None:
        return None
    if rs.is_empty():
        return 0.5
    mal = sum(sim for entry, sim in rs.neighbors if entry.label == LABEL_MALICIOUS)
    total = sum(sim for _, sim in rs.neighbors)
    frac = mal / total if total > 0 else 0.5
    return float(min(max(0.5 + cfg.synthetic_sharpen * (frac - 0.5), 0.02), 0.98))


def _uncertain_result(
    record: FunctionRecord, reason: str, latencies: dict[str, float]
) -> FunctionResult:
    tup = VerdictTuple(
        verdict=VERDICT_UNCERTAIN, fes=0.0, ecs=0.0, p_hat=0.0, context_w=0.0, reason=reason
    )
    return FunctionResult(
        binary_id=record.binary_id,
        function_id=record.function_id,
        tuple=tup,
        neighbor_ids=[],
        agent_votes=[],
        knn_confidence=None,
        stage_latencies=latencies,
        truth=record.label,
    )


def classify_record(
    record: FunctionRecord,
    index: KbIndex | None,
    config: PipelineConfig,
    lift_parse_s: float = 0.0,
) -> FunctionResult:
    """Run one function through embed, retrieve, reason, and decide."""
    clock = _StageClock(config.simulated_latencies())
    if clock.simulated:
        clock.latencies["lift-parse"] = SIMULATED_STAGE_COSTS["lift-parse"]
    else:
        clock.latencies["lift-parse"] = lift_parse_s

    start = time.perf_counter()
    try:
        composite = embed_record(record, config.embedding)
    except NoSignalError:
        clock.record("embed", start)
        return _uncertain_result(record, REASON_NO_EVIDENCE, clock.latencies)
    clock.record("embed", start)

    rs = RetrievalSet((), record.key, config.retrieval.sigma_min, config.retrieval.balanced)
    if config.mode != MODE_ZERO_SHOT:
        if index is None:
            raise ConfigError("classification outside zero_shot mode requires a knowledge base")
        start = time.perf_counter()
        rs = retrieve(
            index,
            composite,
            k=config.retrieval.k,
            sigma_min=config.retrieval.sigma_min,
            balance=config.retrieval.balanced,
        )
        clock.record("retrieve", start)

    knn_confidence: float | None = None
    knn_label: str | None = None
    if not rs.is_empty():
        knn_label, knn_confidence = knn_vote(rs)

    if config.mode == MODE_KNN_ONLY:
        start = time.perf_counter()
        if rs.is_empty():
            clock.record("decide", start)
            return _uncertain_result(record, REASON_NO_EVIDENCE, clock.latencies)
        w = context_weight(rs)
        p_mal_share = knn_confidence if knn_label == VERDICT_MALICIOUS else 1.0 - knn_confidence
        tup = VerdictTuple(
            verdict=knn_label,
            fes=p_mal_share * w,
            ecs=0.0,
            p_hat=p_mal_share,
            context_w=w,
            reason=REASON_CONSENSUS,
        )
        clock.record("decide", start)
        return FunctionResult(
            binary_id=record.binary_id,
            function_id=record.function_id,
            tuple=tup,
            neighbor_ids=rs.neighbor_ids(),
            agent_votes=[],
            knn_confidence=knn_confidence,
            stage_latencies=clock.latencies,
            truth=record.label,
        )

    if config.mode == MODE_FULL and rs.is_empty():
        return _uncertain_result(record, REASON_NO_EVIDENCE, clock.latencies)

    start = time.perf_counter()
    votes = run_ensemble(
        record, rs, config.ensemble, p_malicious=_evidence_vote_probability(rs, config.ensemble)
    )
    clock.record("ensemble", start)

    start = time.perf_counter()
    w = 1.0 if config.mode == MODE_ZERO_SHOT else context_weight(rs)
    fes_value = fes(votes.malicious_votes, votes.counted_votes, w)
    if votes.counted_votes == 0:
        ecs_value = 0.0
    else:
        ecs_value = ecs(votes.malicious_votes, votes.counted_votes)
    if votes.quorum_failed:
        verdict, reason = VERDICT_UNCERTAIN, REASON_QUORUM_FAILED
    else:
        verdict, reason = decide(fes_value, ecs_value, config.thresholds)
    clock.record("decide", start)

    tup = VerdictTuple(
        verdict=verdict,
        fes=fes_value,
        ecs=ecs_value,
        p_hat=vote_fraction(votes.malicious_votes, votes.counted_votes),
        context_w=w,
        reason=reason,
    )
    return FunctionResult(
        binary_id=record.binary_id,
        function_id=record.function_id,
        tuple=tup,
        neighbor_ids=rs.neighbor_ids(),
        agent_votes=[r.vote for r in votes.responses],
        knn_confidence=knn_confidence,
        stage_latencies=clock.latencies,
        truth=record.label,
    )


def classify_records(
    records: list[FunctionRecord],
    index: KbIndex | None,
    config: PipelineConfig,
    lift_parse_s: float = 0.0,
) -> ClassifyOutput:
    """Classify pre-parsed records: DCF filter, top-M sample, per-function verdicts,
    then a fail-safe binary roll-up.  Binaries whose functions all fell to the
    DCF filter are emitted as uncertain with no evidence."""
    filtered = filter_dcfs(records, config.dcf)
    selected = select_top_m(filtered.retained, config.dcf.top_m)
    per_record_parse = lift_parse_s / len(selected) if selected else 0.0

    results: list[FunctionResult] = []
    if config.workers > 1 and len(selected) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(
                pool.map(
                    lambda r: classify_record(r, index, config, per_record_parse), selected
                )
            )
    else:
        results = [classify_record(r, index, config, per_record_parse) for r in selected]

    by_binary: dict[str, list[FunctionResult]] = {}
    for result in results:
        by_binary.setdefault(result.binary_id, []).append(result)

    binaries: list[BinaryVerdict] = []
    seen_binaries = set()
    for record in records:
        if record.binary_id in seen_binaries:
            continue
        seen_binaries.add(record.binary_id)
        group = by_binary.get(record.binary_id)
        if group:
            binaries.append(
                aggregate_binary(
                    record.binary_id, [(fr.function_id, fr.tuple) for fr in group]
                )
            )
        else:
            binaries.append(
                BinaryVerdict(
                    binary_id=record.binary_id,
                    verdict=VERDICT_UNCERTAIN,
                    per_function=(),
                    max_fes=0.0,
                    max_ecs=0.0,
                )
            )
    return ClassifyOutput(functions=results, binaries=binaries, filtered=filtered)


def classify_corpus_file(
    corpus_path, index: KbIndex | None, config: PipelineConfig
) -> ClassifyOutput:
    start = time.perf_counter()
    parsed = parse_function_records_file(corpus_path)
    lift_parse_s = time.perf_counter() - start
    output = classify_records(parsed.records, index, config, lift_parse_s=lift_parse_s)
    output.parse = parsed
    return output


def check_no_binary_overlap(index: KbIndex, records: list[FunctionRecord]) -> None:
    """Validation corpora must not share binaries with the knowledge base."""
    overlap = sorted(index.binary_ids() & {r.binary_id for r in records})
    if overlap:
        raise DataFormatError(
            "validation corpus overlaps the knowledge base on binary ids: "
            + ", ".join(overlap[:20])
        )
