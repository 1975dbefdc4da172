"""Embedding-based sequence deduplication.

Each sequence is mean-pooled into one vector from the encoder's
per-token representations; a greedy scan in dataset order removes every
later sequence whose cosine similarity to an earlier retained one
strictly exceeds the threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import BehaviorSequence, ContractError, Dataset
from .seqmodel import SeqAutoencoder, tokenize

SAVED_TOKENS_PER_BEHAVIOR = 4  # rough prompt-token cost of one behavior line
BLOCK_SIZE = 256  # similarity row chunk, keeps the O(n^2) scan cache-friendly


def sequence_embedding(m: SeqAutoencoder, s: BehaviorSequence) -> np.ndarray:
    """Mean over the per-token representation rows."""
    toks = tokenize(s, m.vocab, m.config.max_len)
    z = m.encode(toks.ids, toks.hours)
    return z.mean(axis=0)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ContractError("cosine similarity of a zero-norm vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


@dataclass(frozen=True)
class CompressionStats:
    input_count: int
    retained_count: int
    removed_count: int
    reduction_rate: float
    saved_token_estimate: int


@dataclass(frozen=True)
class CompressionResult:
    retained: Dataset
    removed_ids: frozenset[str]
    similarity_threshold: float
    stats: CompressionStats

    def to_report_json(self) -> str:
        return json.dumps(
            {
                "similarity_threshold": self.similarity_threshold,
                "retained_ids": sorted(self.retained.ids()),
                "removed_ids": sorted(self.removed_ids),
                "retained_count": self.stats.retained_count,
                "removed_count": self.stats.removed_count,
                "reduction_rate": self.stats.reduction_rate,
                "saved_token_estimate": self.stats.saved_token_estimate,
            },
            sort_keys=True,
            indent=2,
        )


def embedding_matrix(ds: Dataset, m: SeqAutoencoder) -> np.ndarray:
    return np.stack([sequence_embedding(m, s) for s in ds.sequences])


def normalized_rows(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ContractError("zero-norm embedding encountered")
    return emb / norms


def greedy_removed_flags(normalized: np.ndarray, alpha: float) -> np.ndarray:
    """The greedy threshold scan on pre-normalized embeddings.

    For each surviving row i, every later row j with similarity
    strictly above alpha is removed. Earlier-removed rows never remove
    anything themselves.
    """
    n = len(normalized)
    removed = np.zeros(n, dtype=bool)
    for i in range(n):
        if removed[i]:
            continue
        for start in range(i + 1, n, BLOCK_SIZE):
            stop = min(start + BLOCK_SIZE, n)
            # rounding can push a true cosine of 1 to 1+eps; clip so the
            # strict > threshold keeps exact duplicates at alpha = 1.0
            sims = np.minimum(normalized[start:stop] @ normalized[i], 1.0)
            removed[start:stop] |= sims > alpha
    return removed


def compress(ds: Dataset, m: SeqAutoencoder, alpha: float) -> CompressionResult:
    """Deduplicate `ds` at threshold alpha; higher alpha keeps more."""
    if not 0.0 < alpha <= 1.0:
        raise ContractError("alpha must lie in (0, 1]")
    if len(ds) == 0:
        raise ContractError("cannot compress an empty dataset")

    removed = greedy_removed_flags(normalized_rows(embedding_matrix(ds, m)), alpha)
    retained_seqs = tuple(s for s, r in zip(ds.sequences, removed) if not r)
    removed_ids = frozenset(s.id for s, r in zip(ds.sequences, removed) if r)
    removed_behaviors = sum(len(s) for s, r in zip(ds.sequences, removed) if r)
    stats = CompressionStats(
        input_count=len(ds),
        retained_count=len(retained_seqs),
        removed_count=len(removed_ids),
        reduction_rate=1.0 - len(retained_seqs) / len(ds),
        saved_token_estimate=SAVED_TOKENS_PER_BEHAVIOR * removed_behaviors,
    )
    return CompressionResult(
        retained=Dataset(sequences=retained_seqs, catalog_id=ds.catalog_id),
        removed_ids=removed_ids,
        similarity_threshold=alpha,
        stats=stats,
    )
