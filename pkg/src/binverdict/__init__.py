"""Evidence-based malware verdicts over lifted binary-function corpora.

Classifies functions by retrieving the nearest verified neighbors from a
vector knowledge base, running a stochastic vote ensemble over the evidence,
and applying a tri-state (malicious / benign / uncertain) decision policy
with quantified evidence strength and conflict.
"""
from .corpus import (
    DcfFilterConfig,
    FunctionRecord,
    cyclomatic_complexity,
    filter_dcfs,
    parse_function_records,
    select_top_m,
)
from .embedding import (
    CompositeEmbedding,
    EmbeddingProviderConfig,
    StreamEmbedding,
    compose_query,
    cosine_similarity,
    embed_streams,
    mock_embed,
)
from .ensemble import (
    AgentResponse,
    EnsembleConfig,
    VoteSet,
    build_prompt,
    parse_verdict,
    run_ensemble,
    synthetic_agent,
)
from .errors import (
    ConfigError,
    ContractViolation,
    DataFormatError,
    IntegrityError,
    NoEvidenceError,
    NoSignalError,
    TransportError,
    VerdictError,
    VersionMismatchError,
)
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
    rejection_tradeoff,
    simulate_scenarios,
)
from .knowledge_base import (
    KbEntry,
    KbIndex,
    RetrievalSet,
    build_index,
    context_weight,
    knn_vote,
    load_index,
    retrieve,
    save_index,
)
from .pipeline import (
    PipelineConfig,
    RetrievalConfig,
    build_kb,
    classify_records,
    load_config,
)
from .verdict import (
    BinaryVerdict,
    DecisionThresholds,
    VerdictTuple,
    aggregate_binary,
    decide,
    ecs,
    fes,
)

__version__ = "0.1.0"
