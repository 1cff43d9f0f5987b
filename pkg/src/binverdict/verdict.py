"""Evidence strength, conflict scoring, and the tri-state decision policy."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, NoEvidenceError

VERDICT_MALICIOUS = "malicious"
VERDICT_BENIGN = "benign"
VERDICT_UNCERTAIN = "uncertain"

REASON_CONSENSUS = "consensus"
REASON_ENTROPY_REJECT = "entropy_reject"
REASON_GRAY_ZONE = "gray_zone"
REASON_NO_EVIDENCE = "no_evidence"
REASON_QUORUM_FAILED = "quorum_failed"

FORCED_UNCERTAIN_REASONS = (REASON_NO_EVIDENCE, REASON_QUORUM_FAILED)


@dataclass(frozen=True)
class DecisionThresholds:
    """FES bounds for automated action plus the entropy rejection ceiling."""

    delta_high: float = 0.60
    delta_low: float = 0.40
    tau_stable: float = 0.80

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta_low < self.delta_high <= 1.0:
            raise ConfigError(
                f"need 0 <= delta_low < delta_high <= 1, got "
                f"low={self.delta_low} high={self.delta_high}"
            )
        if not 0.0 < self.tau_stable <= 1.0:
            raise ConfigError(f"tau_stable must be in (0, 1], got {self.tau_stable}")


@dataclass(frozen=True)
class VerdictTuple:
    """The auditable output unit for one function."""

    verdict: str
    fes: float
    ecs: float
    p_hat: float
    context_w: float
    reason: str


@dataclass(frozen=True)
class BinaryVerdict:
    binary_id: str
    verdict: str
    per_function: tuple[tuple[str, VerdictTuple], ...]
    max_fes: float
    max_ecs: float


def vote_fraction(malicious_votes: int, counted_votes: int) -> float:
    """Empirical malicious probability over the counted (non-abstain) votes."""
    if counted_votes <= 0:
        return 0.0
    return malicious_votes / counted_votes


def fes(malicious_votes: int, counted_votes: int, context_w: float) -> float:
    """Malicious vote fraction scaled by the retrieval context weight.

    A unanimous ensemble with weak retrieved evidence still scores low: the
    context weight caps how much confidence the votes can express.
    """
    if not 0.0 <= context_w <= 1.0:
        raise ConfigError(f"context weight must be in [0, 1], got {context_w}")
    if counted_votes <= 0:
        return 0.0
    return vote_fraction(malicious_votes, counted_votes) * context_w


def ecs(malicious_votes: int, counted_votes: int) -> float:
    """Binary Shannon entropy (log2) of the vote distribution, in [0, 1].

    Exactly 0 at unanimous votes and exactly 1 only at an even split.
    """
    if counted_votes < 1:
        raise NoEvidenceError("conflict score needs at least one counted vote")
    p = malicious_votes / counted_votes
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * math.log2(p) + (1.0 - p) * math.log2(1.0 - p))


def decide(fes_value: float, ecs_value: float, th: DecisionThresholds) -> tuple[str, str]:
    """Tri-state policy: entropy rejection first, then strict FES bounds.

    ECS at or above tau_stable rejects regardless of FES; FES exactly at a
    delta bound is never enough to cross it.
    """
    if ecs_value >= th.tau_stable:
        return VERDICT_UNCERTAIN, REASON_ENTROPY_REJECT
    if fes_value > th.delta_high:
        return VERDICT_MALICIOUS, REASON_CONSENSUS
    if fes_value < th.delta_low:
        return VERDICT_BENIGN, REASON_CONSENSUS
    return VERDICT_UNCERTAIN, REASON_GRAY_ZONE


def aggregate_binary(
    binary_id: str, per_function: list[tuple[str, VerdictTuple]]
) -> BinaryVerdict:
    """Fail-safe roll-up: any malicious function condemns the binary, any
    uncertain function (absent malicious ones) defers it."""
    if not per_function:
        raise NoEvidenceError(f"binary {binary_id} has no function verdicts to aggregate")
    verdicts = {tup.verdict for _, tup in per_function}
    if VERDICT_MALICIOUS in verdicts:
        verdict = VERDICT_MALICIOUS
    elif VERDICT_UNCERTAIN in verdicts:
        verdict = VERDICT_UNCERTAIN
    else:
        verdict = VERDICT_BENIGN
    return BinaryVerdict(
        binary_id=binary_id,
        verdict=verdict,
        per_function=tuple(per_function),
        max_fes=max(tup.fes for _, tup in per_function),
        max_ecs=max(tup.ecs for _, tup in per_function),
    )
