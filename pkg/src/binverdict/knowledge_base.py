"""Persisted vector knowledge base of verified functions and exact k-NN retrieval.

The index is an immutable brute-force cosine scan over unit vectors stored as
float32; that scan is the contractual reference, so any future accelerated
structure must reproduce its result sets.  The on-disk format is a versioned
little-endian container with a SHA-256 footer.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import LABEL_BENIGN, LABEL_MALICIOUS
from .embedding import CompositeEmbedding
from .errors import ContractViolation, DataFormatError, IntegrityError, NoEvidenceError, VersionMismatchError

MAGIC = b"BVKB"
FORMAT_VERSION = 1

_LABEL_TO_BYTE = {LABEL_BENIGN: 0, LABEL_MALICIOUS: 1}
_BYTE_TO_LABEL = {0: LABEL_BENIGN, 1: LABEL_MALICIOUS}


@dataclass(frozen=True)
class KbEntry:
    """One verified function in the knowledge base."""

    composite: CompositeEmbedding
    label: str
    binary_id: str
    function_id: str
    snippet: str = ""
    family: str = ""

    def __post_init__(self) -> None:
        if self.label not in _LABEL_TO_BYTE:
            raise DataFormatError(
                f"KB entries must be labeled malicious or benign, got {self.label!r}"
            )
        vector = np.asarray(self.composite.vector, dtype=np.float32)
        vector.setflags(write=False)
        object.__setattr__(self, "composite", replace(self.composite, vector=vector))


@dataclass(frozen=True)
class RetrievalSet:
    """Ordered neighbor list for one query, all at or above sigma_min."""

    neighbors: tuple[tuple[KbEntry, float], ...]
    query_ref: tuple[str, str]
    sigma_min: float
    balanced: bool

    def __len__(self) -> int:
        return len(self.neighbors)

    def is_empty(self) -> bool:
        return not self.neighbors

    def neighbor_ids(self) -> list[str]:
        return [f"{e.binary_id}/{e.function_id}" for e, _ in self.neighbors]


@dataclass(frozen=True)
class BuildMeta:
    corpus_seed: int = 0
    created_at: str = ""
    n_malicious: int = 0
    n_benign: int = 0


@dataclass
class KbIndex:
    """Immutable-after-build collection of entries plus a dense float32 matrix."""

    entries: list[KbEntry]
    dim: int
    build_meta: BuildMeta
    matrix: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]
    labels: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    def __len__(self) -> int:
        return len(self.entries)

    def binary_ids(self) -> set[str]:
        return {entry.binary_id for entry in self.entries}


def build_index(
    entries: list[KbEntry], corpus_seed: int = 0, created_at: str = ""
) -> KbIndex:
    """Assemble the scan matrix and label counts for a set of entries."""
    if not entries:
        raise DataFormatError("cannot build an index from zero entries")
    dim = entries[0].composite.dim
    offenders = [
        f"{e.binary_id}/{e.function_id} (dim {e.composite.dim})"
        for e in entries
        if e.composite.dim != dim
    ]
    if offenders:
        raise ContractViolation(f"mixed embedding dims in KB build: {', '.join(offenders)}")
    matrix = np.stack([e.composite.vector for e in entries]).astype(np.float32)
    labels = np.array([_LABEL_TO_BYTE[e.label] for e in entries], dtype=np.uint8)
    meta = BuildMeta(
        corpus_seed=corpus_seed,
        created_at=created_at,
        n_malicious=int(np.sum(labels == 1)),
        n_benign=int(np.sum(labels == 0)),
    )
    return KbIndex(entries=list(entries), dim=dim, build_meta=meta, matrix=matrix, labels=labels)


def _top_by_similarity(sims: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best candidates, similarity desc, insertion order on ties."""
    if candidates.size == 0:
        return candidates
    order = np.lexsort((candidates, -sims[candidates]))
    return candidates[order][:k]


def retrieve(
    index: KbIndex,
    q: CompositeEmbedding,
    k: int,
    sigma_min: float,
    balance: bool = True,
) -> RetrievalSet:
    """Exact top-k cosine retrieval above the sigma_min relevance floor.

    Balanced mode takes the top ceil(k/2) malicious and floor(k/2) benign
    neighbors independently; a label with too few qualifying entries is NOT
    backfilled from the other label.  An empty result is a valid outcome.
    """
    if q.dim != index.dim:
        raise ContractViolation(f"query dim {q.dim} != index dim {index.dim}")
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    if not 0.0 <= sigma_min <= 1.0:
        raise ContractViolation(f"sigma_min must be in [0, 1], got {sigma_min}")

    query = np.asarray(q.vector, dtype=np.float32)
    sims = index.matrix @ query
    norms = np.linalg.norm(index.matrix, axis=1) * float(np.linalg.norm(query))
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = np.where(norms > 0, sims / np.where(norms > 0, norms, 1.0), 0.0)
    sims = np.clip(sims, -1.0, 1.0)
    qualifying = np.flatnonzero(sims >= sigma_min)

    if balance:
        mal = qualifying[index.labels[qualifying] == 1]
        ben = qualifying[index.labels[qualifying] == 0]
        picked = np.concatenate(
            [
                _top_by_similarity(sims, mal, (k + 1) // 2),
                _top_by_similarity(sims, ben, k // 2),
            ]
        ).astype(int)
        picked = _top_by_similarity(sims, picked, picked.size)
    else:
        picked = _top_by_similarity(sims, qualifying, k)

    neighbors = tuple((index.entries[i], float(sims[i])) for i in picked)
    return RetrievalSet(
        neighbors=neighbors, query_ref=q.source, sigma_min=sigma_min, balanced=balance
    )


def context_weight(rs: RetrievalSet) -> float:
    """Mean neighbor similarity; 0 for an empty retrieval set."""
    if rs.is_empty():
        return 0.0
    return float(np.mean([sim for _, sim in rs.neighbors]))


def knn_vote(rs: RetrievalSet) -> tuple[str, float]:
    """Similarity-weighted label vote over the neighbors.

    Returns (label, confidence) where confidence is the winning label's share
    of the total similarity mass.  An exact tie resolves to malicious at 0.5,
    biasing toward detection.
    """
    if rs.is_empty():
        raise NoEvidenceError("knn_vote requires at least one neighbor")
    mal = sum(sim for entry, sim in rs.neighbors if entry.label == LABEL_MALICIOUS)
    ben = sum(sim for entry, sim in rs.neighbors if entry.label == LABEL_BENIGN)
    total = mal + ben
    if total <= 0.0:
        return LABEL_MALICIOUS, 0.5
    if mal == ben:
        return LABEL_MALICIOUS, 0.5
    if mal > ben:
        return LABEL_MALICIOUS, mal / total
    return LABEL_BENIGN, ben / total


def _pack_str(value: str, width: str) -> bytes:
    data = value.encode("utf-8")
    return struct.pack(f"<{width}", len(data)) + data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise IntegrityError("index file truncated")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def take_str(self, width: str) -> str:
        (length,) = self.unpack(f"<{width}")
        return self.take(length).decode("utf-8")


def save_index(index: KbIndex, path) -> None:
    """Write the versioned binary container with a SHA-256 footer."""
    parts = [
        MAGIC,
        struct.pack(
            "<HIIIIq",
            FORMAT_VERSION,
            index.dim,
            len(index.entries),
            index.build_meta.n_malicious,
            index.build_meta.n_benign,
            index.build_meta.corpus_seed,
        ),
        _pack_str(index.build_meta.created_at, "H"),
    ]
    for entry in index.entries:
        parts.append(struct.pack("<B", _LABEL_TO_BYTE[entry.label]))
        parts.append(_pack_str(entry.binary_id, "H"))
        parts.append(_pack_str(entry.function_id, "H"))
        parts.append(_pack_str(entry.family, "H"))
        parts.append(_pack_str(entry.snippet, "I"))
        parts.append(
            np.asarray(entry.composite.vector, dtype="<f4").tobytes()
        )
    body = b"".join(parts)
    with open(path, "wb") as handle:
        handle.write(body)
        handle.write(hashlib.sha256(body).digest())


def load_index(path) -> KbIndex:
    """Read and verify an index file; refuses corrupt or version-mismatched files."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 32 + len(MAGIC):
        raise IntegrityError("index file too short to be valid")
    body, footer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != footer:
        raise IntegrityError("index file checksum mismatch (corrupt or truncated)")

    reader = _Reader(body)
    if reader.take(len(MAGIC)) != MAGIC:
        raise IntegrityError("not a knowledge-base index file (bad magic)")
    version, dim, n_entries, n_malicious, n_benign, corpus_seed = reader.unpack("<HIIIIq")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"index format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    created_at = reader.take_str("H")

    entries: list[KbEntry] = []
    for _ in range(n_entries):
        (label_byte,) = reader.unpack("<B")
        if label_byte not in _BYTE_TO_LABEL:
            raise IntegrityError(f"unknown label byte {label_byte}")
        binary_id = reader.take_str("H")
        function_id = reader.take_str("H")
        family = reader.take_str("H")
        snippet = reader.take_str("I")
        vector = np.frombuffer(reader.take(4 * dim), dtype="<f4").copy()
        entries.append(
            KbEntry(
                composite=CompositeEmbedding(vector=vector, source=(binary_id, function_id)),
                label=_BYTE_TO_LABEL[label_byte],
                binary_id=binary_id,
                function_id=function_id,
                snippet=snippet,
                family=family,
            )
        )
    if reader.offset != len(body):
        raise IntegrityError("trailing bytes after final entry")

    index = build_index(entries, corpus_seed=corpus_seed, created_at=created_at)
    if index.build_meta.n_malicious != n_malicious or index.build_meta.n_benign != n_benign:
        raise IntegrityError("header label counts disagree with entries")
    return index


def export_embeddings_csv(rows: list[tuple[str, str, str, np.ndarray]], path) -> int:
    """CSV dump (ids, label, vector components) for external projection tools."""
    count = 0
    dim = rows[0][3].shape[0] if rows else 0
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["binary_id", "function_id", "label"] + [f"v{i}" for i in range(dim)])
        for binary_id, function_id, label, vector in rows:
            writer.writerow(
                [binary_id, function_id, label] + [f"{float(x):.8g}" for x in vector]
            )
            count += 1
    return count
