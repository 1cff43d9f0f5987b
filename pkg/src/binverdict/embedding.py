"""Per-stream embeddings and the composite query vector.

Two text streams (normalized assembly, decompiled pseudo-code) are embedded
separately, unit-normalized, concatenated in a fixed order, and renormalized.
A deterministic bag-of-token-hashes mock provider makes the whole pipeline
runnable offline; the remote provider speaks a minimal JSON POST protocol.
"""
from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .corpus import FunctionRecord
from .errors import ConfigError, ContractViolation, NoSignalError, TransportError

STREAM_ASM = "asm"
STREAM_CODE = "code"

NORM_TOL = 1e-6


@dataclass(frozen=True)
class StreamEmbedding:
    """Unit vector for one text stream; the zero vector marks a missing stream."""

    vector: np.ndarray
    stream: str
    dim: int
    degraded: bool = False

    def is_zero(self) -> bool:
        return not np.any(self.vector)


@dataclass(frozen=True)
class CompositeEmbedding:
    """Normalized concatenation of the two stream vectors (asm first, code second)."""

    vector: np.ndarray
    source: tuple[str, str]

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True)
class EmbeddingProviderConfig:
    model_name: str = "token-hash-mock"
    dim: int = 128
    mode: str = "mock"
    endpoint_url: str | None = None
    timeout_s: float = 30.0
    retries: int = 2
    field_path: str = "embedding"
    corpus_seed: int = 0
    max_parallel: int = 4

    def __post_init__(self) -> None:
        if self.mode not in ("mock", "remote"):
            raise ConfigError(f"embedding mode must be 'mock' or 'remote', got {self.mode!r}")
        if self.mode == "remote" and not self.endpoint_url:
            raise ConfigError("remote embedding mode requires endpoint_url")
        if self.dim < 8:
            raise ConfigError(f"embedding dim must be >= 8, got {self.dim}")


def _normalize(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        return vector
    return vector / norm


@lru_cache(maxsize=131072)
def _token_vector(token: str, stream: str, dim: int, corpus_seed: int) -> np.ndarray:
    digest = hashlib.blake2b(
        f"{corpus_seed}|{stream}|{token}".encode("utf-8"), digest_size=16
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vector = rng.standard_normal(dim)
    vector.setflags(write=False)
    return vector


def mock_embed(text: str, stream: str, dim: int, corpus_seed: int) -> StreamEmbedding:
    """Deterministic unit embedding from the token multiset of ``text``.

    Each token contributes a pseudo-random dense vector keyed by
    (token, stream, corpus_seed), so texts sharing tokens land closer in the
    space than disjoint ones.  Empty text yields the zero vector.
    """
    if dim < 8:
        raise ConfigError(f"mock embedding dim must be >= 8, got {dim}")
    tokens = text.split()
    if not tokens:
        return StreamEmbedding(np.zeros(dim), stream, dim, degraded=True)
    acc = np.zeros(dim)
    for token in tokens:
        acc += _token_vector(token, stream, dim, corpus_seed)
    if float(np.linalg.norm(acc)) < 1e-12:
        # Pathological full cancellation: fall back to a single hash bucket.
        bucket = int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")
        acc = np.zeros(dim)
        acc[bucket % dim] = 1.0
    vector = _normalize(acc)
    vector.setflags(write=False)
    return StreamEmbedding(vector, stream, dim)


def _extract_field(payload: dict, field_path: str):
    node = payload
    for part in field_path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise TransportError(f"response is missing field path '{field_path}'")
        node = node[part]
    return node


_PARALLEL_GATES: dict[tuple[str, int], threading.BoundedSemaphore] = {}
_GATES_LOCK = threading.Lock()


def _parallel_gate(provider: EmbeddingProviderConfig) -> threading.BoundedSemaphore:
    key = (provider.endpoint_url or "", provider.max_parallel)
    with _GATES_LOCK:
        gate = _PARALLEL_GATES.get(key)
        if gate is None:
            gate = threading.BoundedSemaphore(max(1, provider.max_parallel))
            _PARALLEL_GATES[key] = gate
        return gate


def remote_embed(text: str, provider: EmbeddingProviderConfig) -> np.ndarray:
    """POST {"model", "input"} to the endpoint and read a numeric array back.

    In-flight requests per endpoint are capped at the provider's max_parallel.
    """
    import requests

    body = {"model": provider.model_name, "input": text}
    last_error: Exception | None = None
    attempts = 0
    gate = _parallel_gate(provider)
    for attempt in range(provider.retries + 1):
        attempts = attempt + 1
        try:
            with gate:
                response = requests.post(
                    provider.endpoint_url, json=body, timeout=provider.timeout_s
                )
            response.raise_for_status()
            values = _extract_field(response.json(), provider.field_path)
            vector = np.asarray(values, dtype=float)
            if vector.ndim != 1 or vector.shape[0] != provider.dim:
                raise ContractViolation(
                    f"provider returned dim {vector.shape} but config expects {provider.dim}"
                )
            if not np.all(np.isfinite(vector)):
                raise ContractViolation("provider returned non-finite components")
            return vector
        except ContractViolation:
            raise
        except (requests.RequestException, TransportError, json.JSONDecodeError, ValueError) as exc:
            last_error = exc
            if attempt < provider.retries:
                time.sleep(min(0.2 * 2**attempt, 2.0))
    raise TransportError(
        f"embedding endpoint unreachable after {attempts} attempts: {last_error}",
        attempts=attempts,
    )


def _embed_stream(text: str, stream: str, provider: EmbeddingProviderConfig) -> StreamEmbedding:
    if not text.split():
        return StreamEmbedding(np.zeros(provider.dim), stream, provider.dim, degraded=True)
    if provider.mode == "mock":
        return mock_embed(text, stream, provider.dim, provider.corpus_seed)
    vector = _normalize(remote_embed(text, provider))
    return StreamEmbedding(vector, stream, provider.dim)


def embed_streams(
    record: FunctionRecord, provider: EmbeddingProviderConfig
) -> tuple[StreamEmbedding, StreamEmbedding]:
    """Embed both streams of a record; a missing stream degrades to the zero vector."""
    asm = _embed_stream(record.asm_text, STREAM_ASM, provider)
    code = _embed_stream(record.pseudo_text, STREAM_CODE, provider)
    return asm, code


def compose_query(
    e_asm: StreamEmbedding,
    e_dec: StreamEmbedding,
    source: tuple[str, str] = ("", ""),
) -> CompositeEmbedding:
    """Normalize each non-zero stream, concatenate asm-then-code, renormalize.

    Per-stream normalization keeps either stream from dominating by raw
    magnitude; a single live stream therefore carries the whole signal.
    """
    if e_asm.is_zero() and e_dec.is_zero():
        raise NoSignalError(f"both streams empty for {source[0]}/{source[1]}")
    parts = [_normalize(e_asm.vector), _normalize(e_dec.vector)]
    vector = _normalize(np.concatenate(parts))
    vector.setflags(write=False)
    return CompositeEmbedding(vector, source)


def cosine_similarity(a, b) -> float:
    """dot(a, b) / (|a| |b|); zero vectors have similarity 0 by definition."""
    va = np.asarray(a, dtype=float)
    vb = np.asarray(b, dtype=float)
    if va.shape != vb.shape:
        raise ContractViolation(f"vector length mismatch: {va.shape} vs {vb.shape}")
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return float(np.clip(np.dot(va, vb) / (norm_a * norm_b), -1.0, 1.0))
