"""Downstream evaluation: anomaly detection, next-action ranking, and
the compression method comparison.

The next-action predictor is deliberately simple (first-order
transition counts with a frequency backfill); its job is to exercise
the ranking metrics, not to compete with sequence models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ContractError, Dataset, DeviceCatalog, BehaviorSequence
from .compress import embedding_matrix, normalized_rows
from .filtering import InsufficientDataError, percentile
from .graph import TransitionMatrix, build_graph, transition_matrix
from .seqmodel import ModelConfig, Vocab, train_autoencoder

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"
_HOLDOUT_STREAM_TAG = 0x7D


class MetricsError(ValueError):
    """A requested metric is undefined for the given inputs."""


@dataclass(frozen=True)
class AdMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    recall: float
    precision: float
    f1: float


def confusion_metrics(tp: int, fp: int, tn: int, fn: int) -> AdMetrics:
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return AdMetrics(tp=tp, fp=fp, tn=tn, fn=fn, recall=recall, precision=precision, f1=f1)


def iqr_threshold(values: Sequence[float]) -> float:
    q1 = percentile(values, 25.0)
    q3 = percentile(values, 75.0)
    return q3 + 1.5 * (q3 - q1)


def ad_evaluate(
    train: Dataset,
    test: Sequence[tuple[BehaviorSequence, str]],
    cfg: ModelConfig,
    *,
    catalog: DeviceCatalog | None = None,
) -> AdMetrics:
    """Train on normals, score the labeled test set, threshold at the
    training-loss IQR whisker (same rule the outlier filter uses)."""
    labels = {label for _, label in test}
    if labels != {LABEL_NORMAL, LABEL_ANOMALOUS}:
        raise MetricsError(f"test set must contain both labels, got {sorted(labels)}")
    model = train_autoencoder(train, cfg, catalog=catalog)
    threshold = iqr_threshold([model.sequence_loss(s) for s in train.sequences])
    tp = fp = tn = fn = 0
    for seq, label in test:
        predicted_anomalous = model.sequence_loss(seq) > threshold
        if label == LABEL_ANOMALOUS:
            tp += predicted_anomalous
            fn += not predicted_anomalous
        else:
            fp += predicted_anomalous
            tn += not predicted_anomalous
    return confusion_metrics(tp, fp, tn, fn)


@dataclass(frozen=True)
class RankMetrics:
    ndcg_at_10: float
    hr_at_10: float


def rank_metrics(ranked: Sequence[Sequence[str]], truths: Sequence[str]) -> RankMetrics:
    """NDCG@10 and HR@10 with a single relevant item per event.

    DCG puts gain (2^rel - 1)/log2(pos + 1) at the 1-based hit
    position; the ideal DCG is 1, so per-event NDCG is 1/log2(pos + 1).
    """
    if len(ranked) == 0:
        raise ContractError("rank metrics need at least one event")
    if len(ranked) != len(truths):
        raise ContractError("ranked lists and truths must align")
    ndcg_sum = 0.0
    hits = 0
    for predictions, truth in zip(ranked, truths):
        if len(predictions) > 10:
            raise ContractError("ranked lists are capped at 10 entries")
        if len(set(predictions)) != len(predictions):
            raise ContractError("ranked lists must not repeat actions")
        for pos, action in enumerate(predictions, start=1):
            if action == truth:
                ndcg_sum += 1.0 / np.log2(pos + 1)
                hits += 1
                break
    n = len(ranked)
    return RankMetrics(ndcg_at_10=ndcg_sum / n, hr_at_10=hits / n)


class NextActionPredictor:
    """First-order transition ranking with a global-frequency backfill."""

    TOP_K = 10

    def __init__(self, matrix: TransitionMatrix, global_order: tuple[str, ...]) -> None:
        self.matrix = matrix
        self.global_order = global_order
        self._row = {token: i for i, token in enumerate(matrix.index)}

    def predict(self, current: str) -> list[str]:
        ranked: list[str] = []
        row_idx = self._row.get(current)
        if row_idx is not None:
            row = self.matrix.counts[row_idx]
            nonzero = [(self.matrix.index[j], int(row[j])) for j in np.nonzero(row)[0]]
            nonzero.sort(key=lambda pair: (-pair[1], pair[0]))
            ranked = [token for token, _ in nonzero[: self.TOP_K]]
        for token in self.global_order:
            if len(ranked) >= self.TOP_K:
                break
            if token not in ranked:
                ranked.append(token)
        return ranked


def next_action_predictor(train: Dataset) -> NextActionPredictor:
    if len(train) == 0:
        raise ContractError("predictor needs a non-empty training dataset")
    matrix = transition_matrix(build_graph(train))
    freq: dict[str, int] = {}
    for seq in train.sequences:
        for token in seq.tokens():
            freq[token] = freq.get(token, 0) + 1
    global_order = tuple(sorted(freq, key=lambda token: (-freq[token], token)))
    return NextActionPredictor(matrix=matrix, global_order=global_order)


def prediction_events(ds: Dataset) -> list[tuple[str, str]]:
    """(current action, actual next action) pairs from consecutive behaviors."""
    events: list[tuple[str, str]] = []
    for seq in ds.sequences:
        tokens = seq.tokens()
        events.extend(zip(tokens, tokens[1:]))
    return events


def bp_evaluate(train: Dataset, test: Dataset) -> RankMetrics:
    """Rank metrics of the transition predictor over the test events."""
    events = prediction_events(test)
    if not events:
        raise ContractError("test dataset yields no prediction events")
    predictor = next_action_predictor(train)
    ranked = [predictor.predict(current) for current, _ in events]
    return rank_metrics(ranked, [truth for _, truth in events])


# -- compression method comparison ------------------------------------


@dataclass(frozen=True)
class ComparisonConfig:
    model: ModelConfig
    holdout_fraction: float = 0.2
    rate_tolerance: float = 0.02


@dataclass(frozen=True)
class ComparisonRow:
    rate: float
    method: str  # "embedding" | "jaccard"
    attained: bool
    achieved_rate: float
    threshold: float
    mean_loss: float
    var_loss: float


@dataclass(frozen=True)
class ComparisonReport:
    full_mean_loss: float
    full_var_loss: float
    rows: tuple[ComparisonRow, ...]

    def to_json(self) -> str:
        return json.dumps(
            {
                "full": {"mean_loss": self.full_mean_loss, "var_loss": self.full_var_loss},
                "rows": [
                    {
                        "rate": r.rate,
                        "method": r.method,
                        "attained": r.attained,
                        "achieved_rate": r.achieved_rate,
                        "threshold": r.threshold,
                        "mean_loss": r.mean_loss,
                        "var_loss": r.var_loss,
                    }
                    for r in self.rows
                ],
            },
            sort_keys=True,
            indent=2,
        )

    def to_csv(self) -> str:
        lines = ["rate,method,attained,achieved_rate,threshold,mean_loss,var_loss"]
        lines.append(f"1.0,full,True,1.0,,{self.full_mean_loss},{self.full_var_loss}")
        for r in self.rows:
            lines.append(
                f"{r.rate},{r.method},{r.attained},{r.achieved_rate},"
                f"{r.threshold},{r.mean_loss},{r.var_loss}"
            )
        return "\n".join(lines) + "\n"


def _greedy_removed_from_matrix(sims: np.ndarray, threshold: float) -> np.ndarray:
    n = sims.shape[0]
    removed = np.zeros(n, dtype=bool)
    for i in range(n):
        if removed[i]:
            continue
        removed[i + 1 :] |= sims[i, i + 1 :] > threshold
    return removed


def _sweep_threshold(
    sims: np.ndarray, target_rate: float, tolerance: float
) -> tuple[float, float, np.ndarray, bool]:
    """Bisect over observed similarity values for a retention rate near target.

    Retention is a non-decreasing step function of the threshold, so
    candidate thresholds only need to come from the observed pairwise
    values (plus 1.0 for the retain-everything end).
    """
    n = sims.shape[0]
    upper = sims[np.triu_indices(n, k=1)]
    candidates = np.unique(np.concatenate([upper, [1.0]]))
    best: tuple[float, float, np.ndarray] | None = None
    lo, hi = 0, len(candidates) - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        threshold = float(candidates[mid])
        removed = _greedy_removed_from_matrix(sims, threshold)
        rate = 1.0 - float(removed.sum()) / n
        if best is None or abs(rate - target_rate) < abs(best[1] - target_rate):
            best = (threshold, rate, removed)
        if rate < target_rate:
            lo = mid + 1
        else:
            hi = mid - 1
    assert best is not None
    threshold, rate, removed = best
    return threshold, rate, removed, bool(abs(rate - target_rate) <= tolerance)


def _jaccard_matrix(ds: Dataset) -> np.ndarray:
    token_sets = [frozenset(s.tokens()) for s in ds.sequences]
    n = len(token_sets)
    sims = np.zeros((n, n))
    for i in range(n):
        sims[i, i] = 1.0
        for j in range(i + 1, n):
            union = len(token_sets[i] | token_sets[j])
            sims[i, j] = sims[j, i] = len(token_sets[i] & token_sets[j]) / union if union else 1.0
    return sims


def compression_comparison(
    full: Dataset, rates: Sequence[float], cfg: ComparisonConfig
) -> ComparisonReport:
    """Train on full / embedding-compressed / token-Jaccard-compressed data
    at each retention rate and report held-out reconstruction losses."""
    if len(full) < 50:
        raise InsufficientDataError("comparison needs at least 50 sequences")
    mcfg = cfg.model
    rng = np.random.default_rng([mcfg.seed, _HOLDOUT_STREAM_TAG])
    perm = rng.permutation(len(full))
    n_test = max(1, int(round(cfg.holdout_fraction * len(full))))
    test_idx = set(perm[:n_test].tolist())
    pool_seqs = tuple(s for i, s in enumerate(full.sequences) if i not in test_idx)
    test_seqs = tuple(s for i, s in enumerate(full.sequences) if i in test_idx)
    pool = Dataset(sequences=pool_seqs, catalog_id=full.catalog_id)

    vocab = Vocab.build(full.sequences)
    full_model = train_autoencoder(pool, mcfg, vocab=vocab)
    full_losses = [full_model.sequence_loss(s) for s in test_seqs]

    cosine = normalized_rows(embedding_matrix(pool, full_model))
    cosine_sims = np.minimum(cosine @ cosine.T, 1.0)
    jaccard_sims = _jaccard_matrix(pool)

    rows: list[ComparisonRow] = []
    for rate in rates:
        if not 0.0 < rate <= 1.0:
            raise ContractError("retention rates must lie in (0, 1]")
        for method, sims in (("embedding", cosine_sims), ("jaccard", jaccard_sims)):
            threshold, achieved, removed, attained = _sweep_threshold(
                sims, rate, cfg.rate_tolerance
            )
            subset = Dataset(
                sequences=tuple(s for s, r in zip(pool_seqs, removed) if not r),
                catalog_id=full.catalog_id,
            )
            model = train_autoencoder(subset, mcfg, vocab=vocab)
            losses = [model.sequence_loss(s) for s in test_seqs]
            rows.append(
                ComparisonRow(
                    rate=rate,
                    method=method,
                    attained=attained,
                    achieved_rate=achieved,
                    threshold=threshold,
                    mean_loss=float(np.mean(losses)),
                    var_loss=float(np.var(losses)),
                )
            )
    return ComparisonReport(
        full_mean_loss=float(np.mean(full_losses)),
        full_var_loss=float(np.var(full_losses)),
        rows=tuple(rows),
    )
