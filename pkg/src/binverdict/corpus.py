"""Ingestion, validation, and complexity filtering of lifted function records.

Records arrive as JSONL exported by external disassembler/decompiler tooling.
This module validates them, resolves cyclomatic complexity, keeps only the
decision-critical functions (DCFs), and samples the top-M most complex
functions per binary.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

from .errors import ConfigError, DataFormatError, InvalidGraphError

log = logging.getLogger(__name__)

LABEL_MALICIOUS = "malicious"
LABEL_BENIGN = "benign"
LABEL_UNKNOWN = "unknown"
VALID_LABELS = (LABEL_MALICIOUS, LABEL_BENIGN, LABEL_UNKNOWN)

_KNOWN_FIELDS = {
    "binary_id",
    "function_id",
    "asm_text",
    "pseudo_text",
    "instr_count",
    "cyclomatic_complexity",
    "cfg_nodes",
    "cfg_edges",
    "label",
}


@dataclass(frozen=True)
class FunctionRecord:
    """One lifted function: both text streams plus complexity metadata."""

    binary_id: str
    function_id: str
    asm_text: str = ""
    pseudo_text: str = ""
    instr_count: int = 0
    cyclomatic_complexity: int | None = None
    cfg_nodes: int | None = None
    cfg_edges: int | None = None
    label: str = LABEL_UNKNOWN

    @property
    def key(self) -> tuple[str, str]:
        return (self.binary_id, self.function_id)

    def resolved_cc(self) -> int:
        """Cyclomatic complexity: precomputed value wins, else derived from CFG counts."""
        if self.cyclomatic_complexity is not None:
            return self.cyclomatic_complexity
        if self.cfg_nodes is None or self.cfg_edges is None:
            raise InvalidGraphError(
                f"{self.binary_id}/{self.function_id}: no complexity value and no CFG counts"
            )
        return cyclomatic_complexity(self.cfg_nodes, self.cfg_edges)

    def to_json(self) -> dict:
        out: dict = {
            "binary_id": self.binary_id,
            "function_id": self.function_id,
            "asm_text": self.asm_text,
            "pseudo_text": self.pseudo_text,
            "instr_count": self.instr_count,
            "label": self.label,
        }
        if self.cyclomatic_complexity is not None:
            out["cyclomatic_complexity"] = self.cyclomatic_complexity
        if self.cfg_nodes is not None:
            out["cfg_nodes"] = self.cfg_nodes
        if self.cfg_edges is not None:
            out["cfg_edges"] = self.cfg_edges
        return out


@dataclass(frozen=True)
class DcfFilterConfig:
    """Complexity floor and per-binary sampling width for DCF selection."""

    min_instr: int = 10
    min_cc: int = 5
    top_m: int = 5

    def __post_init__(self) -> None:
        for name in ("min_instr", "min_cc", "top_m"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"DcfFilterConfig.{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class ParseIssue:
    line_no: int
    reason: str


@dataclass
class ParseResult:
    records: list[FunctionRecord] = field(default_factory=list)
    issues: list[ParseIssue] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


@dataclass
class FilterResult:
    retained: list[FunctionRecord] = field(default_factory=list)
    excluded: list[tuple[FunctionRecord, str]] = field(default_factory=list)


def cyclomatic_complexity(nodes: int, edges: int, components: int = 1) -> int:
    """McCabe complexity E - N + 2P over a function CFG, clamped to a floor of 1."""
    if nodes < 1:
        raise InvalidGraphError(f"CFG must have at least one node, got nodes={nodes}")
    if components < 1:
        raise InvalidGraphError(f"CFG must have at least one component, got components={components}")
    if edges < 0:
        raise InvalidGraphError(f"CFG edge count cannot be negative, got edges={edges}")
    return max(1, edges - nodes + 2 * components)


def _require_str(obj: dict, name: str, default: str | None = None) -> str:
    if name not in obj:
        if default is not None:
            return default
        raise DataFormatError(f"missing required field '{name}'")
    value = obj[name]
    if not isinstance(value, str):
        raise DataFormatError(f"field '{name}' must be a string, got {type(value).__name__}")
    return value


def _optional_int(obj: dict, name: str, minimum: int) -> int | None:
    if name not in obj or obj[name] is None:
        return None
    value = obj[name]
    if not isinstance(value, int) or isinstance(value, bool):
        raise DataFormatError(f"field '{name}' must be an integer, got {value!r}")
    if value < minimum:
        raise DataFormatError(f"field '{name}' must be >= {minimum}, got {value}")
    return value


def record_from_json(obj: dict) -> tuple[FunctionRecord, list[str]]:
    """Validate one decoded JSONL object; returns the record and unknown-field warnings."""
    if not isinstance(obj, dict):
        raise DataFormatError(f"record must be a JSON object, got {type(obj).__name__}")

    unknown = sorted(set(obj) - _KNOWN_FIELDS)
    warnings = [f"ignoring unknown field '{name}'" for name in unknown]

    binary_id = _require_str(obj, "binary_id")
    function_id = _require_str(obj, "function_id")
    if not binary_id or not function_id:
        raise DataFormatError("binary_id and function_id must be non-empty")

    asm_text = _require_str(obj, "asm_text", default="")
    pseudo_text = _require_str(obj, "pseudo_text", default="")
    if not asm_text and not pseudo_text:
        raise DataFormatError("at least one of asm_text, pseudo_text must be non-empty")

    instr_count = _optional_int(obj, "instr_count", minimum=0)
    if instr_count is None:
        raise DataFormatError("missing required field 'instr_count'")

    cc = _optional_int(obj, "cyclomatic_complexity", minimum=1)
    cfg_nodes = _optional_int(obj, "cfg_nodes", minimum=0)
    cfg_edges = _optional_int(obj, "cfg_edges", minimum=0)
    if cc is None and (cfg_nodes is None or cfg_edges is None):
        raise DataFormatError(
            "cyclomatic_complexity absent: both cfg_nodes and cfg_edges are required"
        )

    label = _require_str(obj, "label", default=LABEL_UNKNOWN)
    if label not in VALID_LABELS:
        raise DataFormatError(f"label must be one of {VALID_LABELS}, got {label!r}")

    record = FunctionRecord(
        binary_id=binary_id,
        function_id=function_id,
        asm_text=asm_text,
        pseudo_text=pseudo_text,
        instr_count=instr_count,
        cyclomatic_complexity=cc,
        cfg_nodes=cfg_nodes,
        cfg_edges=cfg_edges,
        label=label,
    )
    return record, warnings


def parse_function_records(lines: Iterable[str]) -> ParseResult:
    """Parse JSONL lines into validated records.

    Lines that fail to decode or violate record invariants are reported in
    ``issues`` with their 1-based line number and never returned as records.
    Duplicate (binary_id, function_id) pairs reject the later occurrence.
    Blank lines are skipped.
    """
    result = ParseResult()
    seen: set[tuple[str, str]] = set()
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            result.issues.append(ParseIssue(line_no, f"invalid JSON: {exc.msg}"))
            continue
        try:
            record, warnings = record_from_json(obj)
        except DataFormatError as exc:
            result.issues.append(ParseIssue(line_no, str(exc)))
            continue
        for warning in warnings:
            message = f"line {line_no}: {warning}"
            result.warnings.append(message)
            log.warning(message)
        if record.key in seen:
            result.issues.append(
                ParseIssue(line_no, f"duplicate record for {record.binary_id}/{record.function_id}")
            )
            continue
        seen.add(record.key)
        result.records.append(record)
    return result


def parse_function_records_file(path) -> ParseResult:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_function_records(handle)


def write_function_records(records: Iterable[FunctionRecord], path) -> int:
    """Dump records as JSONL; returns the number of lines written."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            count += 1
    return count


def filter_dcfs(records: list[FunctionRecord], cfg: DcfFilterConfig) -> FilterResult:
    """Keep only decision-critical functions: instr_count and complexity at or above the floors.

    Input order is preserved.  Every dropped record carries an exclusion
    reason so the build report can account for all inputs.
    """
    result = FilterResult()
    for record in records:
        try:
            cc = record.resolved_cc()
        except InvalidGraphError as exc:
            result.excluded.append((record, f"unresolvable complexity: {exc}"))
            continue
        if record.instr_count < cfg.min_instr:
            result.excluded.append(
                (record, f"instr_count {record.instr_count} < min_instr {cfg.min_instr}")
            )
            continue
        if cc < cfg.min_cc:
            result.excluded.append((record, f"cyclomatic_complexity {cc} < min_cc {cfg.min_cc}"))
            continue
        result.retained.append(record)
    return result


def _top_m_sort_key(record: FunctionRecord) -> tuple[int, int, str]:
    return (-record.resolved_cc(), -record.instr_count, record.function_id)


def select_top_m(records: list[FunctionRecord], m: int) -> list[FunctionRecord]:
    """Per binary, the m most complex records.

    Comparator: complexity desc, then instr_count desc, then function_id asc.
    Binaries are emitted in binary_id order, so any permutation of the same
    record multiset yields an identical output sequence.
    """
    if m <= 0:
        raise ConfigError(f"top-M must be positive, got {m}")
    by_binary: dict[str, list[FunctionRecord]] = {}
    for record in records:
        by_binary.setdefault(record.binary_id, []).append(record)
    selected: list[FunctionRecord] = []
    for binary_id in sorted(by_binary):
        selected.extend(sorted(by_binary[binary_id], key=_top_m_sort_key)[:m])
    return selected
