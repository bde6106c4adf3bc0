"""Concept embeddings from corpus statistics.

Pipeline: tokenise, count symmetric co-occurrences inside a window, apply
positive PMI, then take a rank-d factorisation by power iteration with
Gram-Schmidt deflation. Rows are L2-normalised.

An external HTTP provider can stand in for the corpus pipeline; its output is
wrapped in the same :class:`EmbeddingTable`.
"""

from __future__ import annotations

import json
import logging
import os
import time
import unicodedata
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tokenizer",
    "Corpus",
    "EmbeddingTable",
    "EmbeddingError",
    "build_embeddings",
    "cooccurrence",
    "ppmi",
    "power_factorize",
    "cosine_similarity",
    "top_k",
    "RemoteEmbeddingProvider",
]

logger = logging.getLogger(__name__)

POWER_ITERATIONS = 100


class EmbeddingError(ValueError):
    pass


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF
        or 0xF900 <= cp <= 0xFAFF
    )


@dataclass(frozen=True)
class Tokenizer:
    """Whitespace tokens for Latin text, one token per CJK character.

    ``merges`` lists multi-character CJK terms (e.g. ``"肝火"``) that are
    kept whole; longest match wins.
    """

    merges: tuple[str, ...] = ()
    lowercase: bool = True

    def __call__(self, text: str) -> list[str]:
        text = unicodedata.normalize("NFKC", text)
        merges = sorted(set(self.merges), key=len, reverse=True)
        out: list[str] = []
        for chunk in text.split():
            i = 0
            latin = []
            while i < len(chunk):
                ch = chunk[i]
                if _is_cjk(ch):
                    if latin:
                        out.append(self._latin("".join(latin)))
                        latin = []
                    for term in merges:
                        if chunk.startswith(term, i):
                            out.append(term)
                            i += len(term)
                            break
                    else:
                        out.append(ch)
                        i += 1
                else:
                    latin.append(ch)
                    i += 1
            if latin:
                out.append(self._latin("".join(latin)))
        return [t for t in out if t]

    def _latin(self, token: str) -> str:
        token = token.strip(".,;:!?\"'()[]{}")
        return token.lower() if self.lowercase else token


@dataclass(frozen=True)
class Corpus:
    documents: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        docs = tuple(tuple(d) for d in self.documents)
        if not docs or not any(docs):
            raise EmbeddingError("corpus is empty")
        for d in docs:
            for tok in d:
                if not isinstance(tok, str) or not tok:
                    raise EmbeddingError(f"invalid token {tok!r}")
        object.__setattr__(self, "documents", docs)

    @classmethod
    def from_texts(cls, texts: Iterable[str], tokenizer: Tokenizer | None = None) -> "Corpus":
        tokenizer = tokenizer or Tokenizer()
        return cls(tuple(tuple(tokenizer(t)) for t in texts))


@dataclass(frozen=True)
class EmbeddingTable:
    vocab: Mapping[str, int]
    vectors: np.ndarray = field(compare=False)
    provenance: str = "corpus_stats"

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.vocab):
            raise EmbeddingError("vector matrix must have one row per vocabulary entry")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])

    def __contains__(self, token: str) -> bool:
        return token in self.vocab

    def vector(self, token: str) -> np.ndarray:
        try:
            return self.vectors[self.vocab[token]]
        except KeyError:
            raise EmbeddingError(f"unknown token {token!r}") from None

    def tokens(self) -> list[str]:
        return sorted(self.vocab, key=self.vocab.__getitem__)

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "provenance": self.provenance,
            "vectors": {t: self.vectors[i].tolist() for t, i in sorted(self.vocab.items(), key=lambda kv: kv[1])},
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "EmbeddingTable":
        tokens = list(data["vectors"])
        vectors = np.array([data["vectors"][t] for t in tokens], dtype=float).reshape(len(tokens), int(data["d"]))
        return cls({t: i for i, t in enumerate(tokens)}, vectors, data.get("provenance", "corpus_stats"))


def cooccurrence(corpus: Corpus, window: int) -> tuple[dict[str, int], np.ndarray]:
    """Symmetric co-occurrence counts; vocab sorted for determinism."""
    vocab = {t: i for i, t in enumerate(sorted({t for d in corpus.documents for t in d}))}
    counts = np.zeros((len(vocab), len(vocab)))
    for doc in corpus.documents:
        ids = [vocab[t] for t in doc]
        for i, a in enumerate(ids):
            for b in ids[i + 1:i + 1 + window]:
                counts[a, b] += 1.0
                counts[b, a] += 1.0
    return vocab, counts


def ppmi(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    if total == 0:
        return np.zeros_like(counts)
    row = counts.sum(axis=1, keepdims=True)
    col = counts.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * col))
    pmi[~np.isfinite(pmi)] = 0.0
    return np.maximum(pmi, 0.0)


def power_factorize(matrix: np.ndarray, d: int, seed: int, iterations: int = POWER_ITERATIONS) -> tuple[np.ndarray, np.ndarray]:
    """Top-|eigenvalue| eigenpairs of a symmetric matrix, one component at a time.

    Returns (eigenvectors as columns, eigenvalues).
    """
    n = matrix.shape[0]
    rng = np.random.default_rng(seed)
    basis = np.zeros((n, d))
    values = np.zeros(d)
    for k in range(d):
        v = rng.standard_normal(n)
        for _ in range(iterations):
            v = matrix @ v
            v -= basis[:, :k] @ (basis[:, :k].T @ v)
            norm = np.linalg.norm(v)
            if norm == 0.0:
                break
            v /= norm
        else:
            values[k] = float(v @ matrix @ v)
            basis[:, k] = v
            continue
        # matrix restricted to the complement is zero; any orthogonal direction will do
        v = rng.standard_normal(n)
        v -= basis[:, :k] @ (basis[:, :k].T @ v)
        basis[:, k] = v / np.linalg.norm(v)
    return basis, values


def build_embeddings(corpus: Corpus, d: int = 64, window: int = 2, seed: int = 0) -> EmbeddingTable:
    if d < 2:
        raise EmbeddingError("d must be at least 2")
    if window < 1:
        raise EmbeddingError("window must be at least 1")
    vocab, counts = cooccurrence(corpus, window)
    isolated = [t for t, i in vocab.items() if counts[i].sum() == 0]
    if isolated:
        logger.warning("dropping %d token(s) with no co-occurrences: %s", len(isolated), isolated[:10])
        keep = [i for t, i in sorted(vocab.items(), key=lambda kv: kv[1]) if t not in isolated]
        counts = counts[np.ix_(keep, keep)]
        vocab = {t: j for j, t in enumerate(t for t in sorted(vocab, key=vocab.__getitem__) if t not in isolated)}
    if len(vocab) < d:
        raise EmbeddingError(f"vocabulary has {len(vocab)} tokens, fewer than d={d}; choose a smaller d")
    m = ppmi(counts)
    basis, values = power_factorize(m, d, seed)
    vectors = basis * np.sqrt(np.abs(values))[None, :]
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    # rows with no mass on the leading components fall back to the raw basis row
    weak = norms[:, 0] < 1e-12
    if weak.any():
        vectors[weak] = basis[weak]
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if (norms[:, 0] < 1e-12).any():
            raise EmbeddingError("some tokens have no projection on the leading components; increase d")
    return EmbeddingTable(vocab, vectors / norms, "corpus_stats")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def top_k(table: EmbeddingTable, query: str, k: int = 5) -> list[tuple[str, float]]:
    """Nearest neighbours of ``query`` by cosine, excluding itself; ties by id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    q = table.vector(query)
    scored = [(tok, cosine_similarity(q, table.vectors[i])) for tok, i in table.vocab.items() if tok != query]
    scored.sort(key=lambda ts: (-ts[1], ts[0]))
    return scored[:k]


class RemoteEmbeddingProvider:
    """POSTs token batches to an external service.

    Request body ``{"tokens": [...], "model": ...}``; the reply must be
    ``{"vectors": [[...], ...]}`` with one row of length ``d`` per token.
    Endpoint and bearer token default to ``METABRIDGE_EMBED_ENDPOINT`` and
    ``METABRIDGE_EMBED_TOKEN``.
    """

    def __init__(self, d: int, endpoint: str | None = None, token: str | None = None, model: str = "",
                 timeout: float = 30.0, retries: int = 2, batch_size: int = 64):
        self.d = d
        self.endpoint = endpoint or os.environ.get("METABRIDGE_EMBED_ENDPOINT", "")
        self.token = token if token is not None else os.environ.get("METABRIDGE_EMBED_TOKEN")
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.batch_size = batch_size
        if not self.endpoint:
            raise EmbeddingError("no embedding endpoint configured (set METABRIDGE_EMBED_ENDPOINT)")

    def _post(self, tokens: Sequence[str]) -> list[list[float]]:
        body = json.dumps({"tokens": list(tokens), "model": self.model}, ensure_ascii=False).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))["vectors"]
            except (urllib.error.URLError, TimeoutError, OSError, KeyError, json.JSONDecodeError) as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
                time.sleep(min(0.1 * 2 ** attempt, 1.0))
        raise EmbeddingError(f"embedding provider unavailable: {last}")

    def embed(self, tokens: Sequence[str]) -> EmbeddingTable:
        tokens = list(dict.fromkeys(tokens))
        rows: list[list[float]] = []
        for start in range(0, len(tokens), self.batch_size):
            batch = tokens[start:start + self.batch_size]
            vectors = self._post(batch)
            if len(vectors) != len(batch):
                raise EmbeddingError(f"provider returned {len(vectors)} vectors for {len(batch)} tokens")
            for tok, vec in zip(batch, vectors):
                if len(vec) != self.d:
                    raise EmbeddingError(f"provider vector for {tok!r} has dimension {len(vec)}, expected {self.d}")
            rows.extend(vectors)
        arr = np.asarray(rows, dtype=float).reshape(len(tokens), self.d)
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if (norms == 0).any():
            raise EmbeddingError("provider returned a zero vector")
        return EmbeddingTable({t: i for i, t in enumerate(tokens)}, arr / norms, "external_provider")
