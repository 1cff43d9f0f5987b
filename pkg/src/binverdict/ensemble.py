"""Stochastic agent ensemble: N independent generate-and-parse cycles per function.

Every agent receives the exact same prompt and no other agent's output.  A
remote generator speaks a minimal JSON POST protocol compatible with common
local model servers; the synthetic generator is a seeded stand-in whose vote
probability can be supplied directly or coupled to the retrieval evidence.
"""
from __future__ import annotations

import hashlib
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .corpus import FunctionRecord
from .errors import ConfigError, TransportError
from .knowledge_base import RetrievalSet
from .verdict import VERDICT_BENIGN, VERDICT_MALICIOUS

VOTE_ABSTAIN = "abstain"

_VERDICT_RE = re.compile(r"verdict\s*:\s*(malicious|suspicious|benign)", re.IGNORECASE)


@dataclass(frozen=True)
class PromptTemplate:
    """Layout and byte budgets for the analyst prompt."""

    template_id: str
    stream_budget: int = 2048
    total_budget: int = 16384
    truncation_marker: str = " ...[truncated]"


_TEMPLATES: dict[str, PromptTemplate] = {
    "default": PromptTemplate("default"),
    "compact": PromptTemplate("compact", stream_budget=512, total_budget=4096),
}


def register_template(template: PromptTemplate) -> None:
    _TEMPLATES[template.template_id] = template


def get_template(template_id: str) -> PromptTemplate:
    if template_id not in _TEMPLATES:
        raise ConfigError(f"unknown prompt template '{template_id}'")
    return _TEMPLATES[template_id]


@dataclass(frozen=True)
class EnsembleConfig:
    n_agents: int = 5
    temperature: float = 0.7
    generator: str = "synthetic"
    endpoint_url: str | None = None
    model_name: str = ""
    prompt_template_id: str = "default"
    seed: int = 0
    per_agent_timeout_s: float = 60.0
    field_path: str = "response"
    max_parallel: int = 4
    synthetic_p: float | None = None
    synthetic_sharpen: float = 3.0
    synthetic_abstain_p: float = 0.0

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise ConfigError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.temperature < 0.0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.generator not in ("remote", "synthetic"):
            raise ConfigError(f"generator must be 'remote' or 'synthetic', got {self.generator!r}")
        if self.generator == "remote" and not self.endpoint_url:
            raise ConfigError("remote generator requires endpoint_url")
        if self.synthetic_p is not None and not 0.0 <= self.synthetic_p <= 1.0:
            raise ConfigError(f"synthetic_p must be in [0, 1], got {self.synthetic_p}")


@dataclass(frozen=True)
class AgentResponse:
    agent_index: int
    raw_text: str
    vote: str
    latency_s: float = 0.0


@dataclass(frozen=True)
class VoteSet:
    responses: tuple[AgentResponse, ...]
    counted_votes: int
    malicious_votes: int
    quorum_failed: bool

    @property
    def abstentions(self) -> int:
        return len(self.responses) - self.counted_votes


def _truncate_bytes(text: str, budget: int, marker: str) -> str:
    data = text.encode("utf-8")
    if len(data) <= budget:
        return text
    marker_bytes = marker.encode("utf-8")
    keep = max(0, budget - len(marker_bytes))
    return data[:keep].decode("utf-8", errors="ignore") + marker


def build_prompt(record: FunctionRecord, rs: RetrievalSet, template_id: str = "default") -> str:
    """Deterministic analyst prompt: target streams, ranked evidence, output rule.

    Evidence blocks appear in similarity-descending order.  The assembled
    prompt never exceeds the template's total byte budget.
    """
    template = get_template(template_id)
    lines: list[str] = [
        "You are a malware analyst. Decide whether the target function is malicious",
        "or benign using ONLY the reference evidence below.",
        "",
        f"Target function {record.binary_id}/{record.function_id}",
        "--- assembly ---",
        _truncate_bytes(record.asm_text, template.stream_budget, template.truncation_marker)
        or "(not available)",
        "--- pseudo-code ---",
        _truncate_bytes(record.pseudo_text, template.stream_budget, template.truncation_marker)
        or "(not available)",
        "",
    ]
    if rs.is_empty():
        lines.append("No reference evidence is available; reason from the function alone.")
    else:
        lines.append(f"Reference evidence ({len(rs)} verified functions, most similar first):")
        for rank, (entry, sim) in enumerate(rs.neighbors, start=1):
            lines.append(
                f"[{rank}] label={entry.label} similarity={sim:.4f} "
                f"source={entry.binary_id}/{entry.function_id}"
            )
            lines.append(entry.snippet or "(no snippet)")
    lines.extend(
        [
            "",
            "Answer with your reasoning, then end with a final line of exactly",
            "VERDICT: MALICIOUS or VERDICT: BENIGN",
        ]
    )
    prompt = "\n".join(lines)
    return _truncate_bytes(prompt, template.total_budget, template.truncation_marker)


def parse_verdict(raw_text: str) -> str:
    """Last 'VERDICT:' marker wins; 'suspicious' counts as malicious; anything
    else (including no marker at all) abstains."""
    matches = _VERDICT_RE.findall(raw_text or "")
    if not matches:
        return VOTE_ABSTAIN
    final = matches[-1].lower()
    if final in ("malicious", "suspicious"):
        return VERDICT_MALICIOUS
    return VERDICT_BENIGN


def _unit_draw(*key_parts) -> float:
    digest = hashlib.blake2b(
        "|".join(str(part) for part in key_parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") / 2**64


def synthetic_agent(
    p_malicious: float, seed: int, agent_index: int, abstain_p: float = 0.0
) -> AgentResponse:
    """Deterministic pseudo-random agent keyed by (seed, agent_index).

    Emits a templated completion that parse_verdict always understands, except
    when the abstain draw fires, which models an unparseable response.
    """
    if not 0.0 <= p_malicious <= 1.0:
        raise ConfigError(f"p_malicious must be in [0, 1], got {p_malicious}")
    if abstain_p > 0.0 and _unit_draw(seed, agent_index, "abstain") < abstain_p:
        return AgentResponse(
            agent_index=agent_index,
            raw_text="The evidence is inconclusive and no verdict can be stated.",
            vote=VOTE_ABSTAIN,
        )
    vote_malicious = _unit_draw(seed, agent_index, "vote") < p_malicious
    if vote_malicious:
        raw = (
            "The target shares control flow and constants with the retrieved "
            "malicious references.\nVERDICT: MALICIOUS"
        )
        vote = VERDICT_MALICIOUS
    else:
        raw = (
            "The target most closely resembles the retrieved benign references "
            "and shows no malicious indicators.\nVERDICT: BENIGN"
        )
        vote = VERDICT_BENIGN
    return AgentResponse(agent_index=agent_index, raw_text=raw, vote=vote)


def remote_generate(prompt: str, cfg: EnsembleConfig) -> str:
    """POST the prompt with temperature and read the completion text back."""
    import requests

    body = {
        "model": cfg.model_name,
        "prompt": prompt,
        "stream": False,
        "options": {"temperature": cfg.temperature},
    }
    try:
        response = requests.post(cfg.endpoint_url, json=body, timeout=cfg.per_agent_timeout_s)
        response.raise_for_status()
        payload = response.json()
    except (requests.RequestException, json.JSONDecodeError) as exc:
        raise TransportError(f"generation endpoint failed: {exc}", attempts=1) from exc
    node = payload
    for part in cfg.field_path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise TransportError(f"generation response missing field path '{cfg.field_path}'")
        node = node[part]
    if not isinstance(node, str):
        raise TransportError(f"generation response field '{cfg.field_path}' is not text")
    return node


def generate(
    prompt: str, cfg: EnsembleConfig, agent_index: int, p_malicious: float | None = None
) -> str:
    """One agent completion; synthetic mode embeds its sampled vote in the text."""
    if cfg.generator == "remote":
        return remote_generate(prompt, cfg)
    if p_malicious is None:
        p_malicious = cfg.synthetic_p if cfg.synthetic_p is not None else 0.5
    return synthetic_agent(
        p_malicious, cfg.seed, agent_index, abstain_p=cfg.synthetic_abstain_p
    ).raw_text


def _run_agent(prompt: str, cfg: EnsembleConfig, agent_index: int, seed: int,
               p_malicious: float | None) -> AgentResponse:
    start = time.perf_counter()
    if cfg.generator == "synthetic":
        p = p_malicious if p_malicious is not None else (
            cfg.synthetic_p if cfg.synthetic_p is not None else 0.5
        )
        response = synthetic_agent(p, seed, agent_index, abstain_p=cfg.synthetic_abstain_p)
        return AgentResponse(
            agent_index=agent_index,
            raw_text=response.raw_text,
            vote=response.vote,
            latency_s=time.perf_counter() - start,
        )
    try:
        raw = remote_generate(prompt, cfg)
        vote = parse_verdict(raw)
    except TransportError as exc:
        return AgentResponse(
            agent_index=agent_index,
            raw_text=f"[transport failure: {exc}]",
            vote=VOTE_ABSTAIN,
            latency_s=time.perf_counter() - start,
        )
    return AgentResponse(
        agent_index=agent_index, raw_text=raw, vote=vote, latency_s=time.perf_counter() - start
    )


def aggregate_votes(responses: list[AgentResponse]) -> VoteSet:
    """Order-insensitive tally; quorum fails when abstentions exceed half."""
    ordered = tuple(sorted(responses, key=lambda r: r.agent_index))
    counted = sum(1 for r in ordered if r.vote != VOTE_ABSTAIN)
    malicious = sum(1 for r in ordered if r.vote == VERDICT_MALICIOUS)
    quorum_failed = (len(ordered) - counted) > len(ordered) / 2
    return VoteSet(
        responses=ordered,
        counted_votes=counted,
        malicious_votes=malicious,
        quorum_failed=quorum_failed,
    )


def derive_record_seed(base_seed: int, record: FunctionRecord) -> int:
    """Stable per-record seed so synthetic agents vary across functions."""
    digest = hashlib.blake2b(
        f"{base_seed}|{record.binary_id}|{record.function_id}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little", signed=False) % 2**63


def run_ensemble(
    record: FunctionRecord,
    rs: RetrievalSet,
    cfg: EnsembleConfig,
    p_malicious: float | None = None,
) -> VoteSet:
    """Run all N agents over one shared prompt and tally their votes.

    Agents never see each other's output; remote agents may run concurrently
    up to max_parallel.  Individual failures become abstentions, never an
    ensemble abort.
    """
    prompt = build_prompt(record, rs, cfg.prompt_template_id)
    seed = derive_record_seed(cfg.seed, record)
    indices = range(cfg.n_agents)
    if cfg.generator == "remote" and cfg.max_parallel > 1 and cfg.n_agents > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.max_parallel, cfg.n_agents)) as pool:
            responses = list(
                pool.map(lambda i: _run_agent(prompt, cfg, i, seed, p_malicious), indices)
            )
    else:
        responses = [_run_agent(prompt, cfg, i, seed, p_malicious) for i in indices]
    return aggregate_votes(responses)
