"""Tokenization, set similarity, hashed TF-IDF embeddings and vector similarity."""

from __future__ import annotations

import csv
import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np

from .model import EmptyRecord, ERError, Record

_WORD_RE = re.compile(r"\w+")


class ZeroVector(ERError):
    pass


class DimMismatch(ERError):
    pass


class MissingRecord(ERError):
    pass


class EmbeddingParseError(ERError):
    pass


@dataclass
class SimilarityConfig:
    measure: str = "cosine"  # "jaccard" or "cosine"
    embedder: str = "hashed_tfidf"  # or "external_file"
    dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.measure not in ("jaccard", "cosine"):
            raise ValueError(f"unknown measure: {self.measure!r}")
        if self.embedder not in ("hashed_tfidf", "external_file"):
            raise ValueError(f"unknown embedder: {self.embedder!r}")


def serialize(record: Record) -> str:
    """Flatten a record to comparable text: "name: value" pairs in attribute order."""
    if not record.attributes:
        raise EmptyRecord(f"record {record.id} has no attributes")
    return " ".join(f"{a.name}: {a.value}" for a in record.attributes if a.value)


def tokenize(record: Record, scheme: str = "word", n: int = 3) -> list[str]:
    """Tokenize a record; scheme is "word" or "char_ngram" (n-grams within words).

    Words shorter than n are kept whole under the char_ngram scheme.
    """
    words = _WORD_RE.findall(serialize(record).lower())
    if scheme == "word":
        return words
    if scheme == "char_ngram":
        out: list[str] = []
        for w in words:
            if len(w) < n:
                out.append(w)
            else:
                out.extend(w[i : i + n] for i in range(len(w) - n + 1))
        return out
    raise ValueError(f"unknown tokenization scheme: {scheme!r}")


def jaccard(a, b) -> float:
    """Jaccard similarity on de-duplicated token sets; 1.0 when both are empty."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise DimMismatch(f"dims differ: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


def _signed_hash(token: str, seed: int) -> int:
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=str(seed).encode("utf-8")
    ).digest()
    return int.from_bytes(digest, "little")


class HashedTfidfEmbedder:
    """Signed feature-hashing TF-IDF embedder, L2-normalized.

    Deterministic for a fixed (dataset, dim, seed); the df table is frozen at
    fit time, after which embed() is a pure function of the record.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._df: dict[str, int] = {}
        self._n_docs = 0

    def fit(self, records) -> "HashedTfidfEmbedder":
        self._df = {}
        self._n_docs = 0
        for record in records:
            self._n_docs += 1
            for token in set(tokenize(record)):
                self._df[token] = self._df.get(token, 0) + 1
        return self

    def _weight(self, token: str, count: int) -> float:
        df = self._df.get(token, 1)
        return count * math.log(1.0 + self._n_docs / df)

    def embed(self, record: Record) -> np.ndarray:
        tokens = tokenize(record)
        if not tokens:
            raise EmptyRecord(f"record {record.id} produced no tokens")
        counts: dict[str, int] = {}
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
        vec = np.zeros(self.dim)
        for token, count in counts.items():
            h = _signed_hash(token, self.seed)
            bucket = h % self.dim
            sign = 1.0 if (h >> 63) & 1 else -1.0
            vec[bucket] += sign * self._weight(token, count)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise ZeroVector(f"record {record.id} hashed to the zero vector")
        return vec / norm


def load_embeddings(path, record_ids) -> dict[str, np.ndarray]:
    """Load a CSV of precomputed embeddings: header "id,d0,...,d{dim-1}"."""
    out: dict[str, np.ndarray] = {}
    dim: int | None = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0] != "id":
            raise EmbeddingParseError(f"{path}: missing 'id,d0,...' header row")
        for row in reader:
            if not row:
                continue
            rid = row[0]
            try:
                values = np.array([float(x) for x in row[1:]])
            except ValueError as exc:
                raise EmbeddingParseError(f"{path}: bad row for id {rid!r}") from exc
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise DimMismatch(
                    f"{path}: id {rid!r} has dim {len(values)}, expected {dim}"
                )
            out[rid] = values
    missing = [rid for rid in record_ids if rid not in out]
    if missing:
        raise MissingRecord(f"{path}: no embedding for record id {missing[0]!r}")
    return out


def save_embeddings(path, embeddings: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        first = next(iter(embeddings.values()))
        writer.writerow(["id"] + [f"d{i}" for i in range(len(first))])
        for rid in sorted(embeddings):
            writer.writerow([rid] + [repr(float(x)) for x in embeddings[rid]])


class SimilarityIndex:
    """Per-record token sets and embeddings with a uniform pair-similarity API."""

    def __init__(
        self,
        records: dict[str, Record],
        config: SimilarityConfig | None = None,
        embeddings: dict[str, np.ndarray] | None = None,
    ):
        self.config = config or SimilarityConfig()
        self.records = records
        self.token_sets = {rid: set(tokenize(r)) for rid, r in records.items()}
        if embeddings is not None:
            self.embeddings = embeddings
        else:
            embedder = HashedTfidfEmbedder(self.config.dim, self.config.seed)
            embedder.fit(records.values())
            self.embeddings = {rid: embedder.embed(r) for rid, r in records.items()}

    def sim(self, a: str, b: str) -> float:
        if self.config.measure == "jaccard":
            return jaccard(self.token_sets[a], self.token_sets[b])
        return cosine(self.embeddings[a], self.embeddings[b])

    def mean_embedding(self, record_ids) -> np.ndarray:
        return np.mean([self.embeddings[rid] for rid in record_ids], axis=0)
