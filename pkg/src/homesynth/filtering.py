"""Two-stage outlier filtering of synthetic sequences.

Stage 1 trains a fresh autoencoder on the whole synthetic set and flags
every sequence whose reconstruction loss exceeds Q3 + 1.5*IQR. Stage 2
gives each flagged sequence a utility trial: retrain from the same
initialization with the sequence appended to the training split and
keep it only if the held-out test loss does not rise above the
baseline. Low-frequency but legitimate behavior survives; junk does
not.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import BehaviorSequence, ContractError, Dataset, DeviceCatalog, Origin
from .seqmodel import (
    ModelConfig,
    Vocab,
    mean_reconstruction_loss,
    train_autoencoder,
)

_SPLIT_STREAM_TAG = 0x8E
TRAIN_FRACTION = 0.8


class InsufficientDataError(ValueError):
    """Too few sequences for quartiles or for the 8:2 utility split."""


def percentile(values: Sequence[float], p: float) -> float:
    """Linear interpolation on (n-1)-scaled ranks over the sorted values."""
    if len(values) == 0:
        raise ContractError("percentile of an empty list is undefined")
    if not 0.0 <= p <= 100.0:
        raise ContractError("p must lie in [0, 100]")
    ordered = sorted(values)
    rank = p / 100.0 * (len(ordered) - 1)
    lo = int(np.floor(rank))
    hi = int(np.ceil(rank))
    if lo == hi:
        return float(ordered[lo])
    frac = rank - lo
    return float(ordered[lo] * (1.0 - frac) + ordered[hi] * frac)


@dataclass(frozen=True)
class OutlierPartition:
    non_outliers: Dataset
    outliers: Dataset
    losses: Mapping[str, float]
    q1: float
    q3: float
    iqr: float
    threshold: float


@dataclass(frozen=True)
class RetentionVerdict:
    outlier_id: str
    baseline_loss: float
    with_outlier_loss: float
    decision: str  # "retain" | "delete"


@dataclass(frozen=True)
class FilterResult:
    filtered: Dataset
    partition: OutlierPartition
    baseline_loss: float | None
    verdicts: tuple[RetentionVerdict, ...]

    def to_report_json(self) -> str:
        return json.dumps(
            {
                "losses": {k: self.partition.losses[k] for k in sorted(self.partition.losses)},
                "q1": self.partition.q1,
                "q3": self.partition.q3,
                "iqr": self.partition.iqr,
                "threshold": self.partition.threshold,
                "non_outlier_ids": sorted(self.partition.non_outliers.ids()),
                "outlier_ids": sorted(self.partition.outliers.ids()),
                "baseline_loss": self.baseline_loss,
                "verdicts": [
                    {
                        "outlier_id": v.outlier_id,
                        "baseline_loss": v.baseline_loss,
                        "with_outlier_loss": v.with_outlier_loss,
                        "decision": v.decision,
                    }
                    for v in self.verdicts
                ],
                "retained_count": len(self.filtered),
            },
            sort_keys=True,
            indent=2,
        )


def detect_outliers(
    synthetic: Dataset,
    cfg: ModelConfig,
    *,
    catalog: DeviceCatalog | None = None,
    vocab: Vocab | None = None,
) -> OutlierPartition:
    """Stage 1: IQR flagging on reconstruction losses.

    The model is trained on the full synthetic set, outliers included;
    sequences with loss strictly above Q3 + 1.5*IQR are flagged.
    """
    if len(synthetic) < 4:
        raise InsufficientDataError("need at least 4 sequences for meaningful quartiles")
    model = train_autoencoder(synthetic, cfg, catalog=catalog, vocab=vocab)
    losses = {s.id: model.sequence_loss(s) for s in synthetic.sequences}
    values = list(losses.values())
    q1 = percentile(values, 25.0)
    q3 = percentile(values, 75.0)
    iqr = q3 - q1
    threshold = q3 + 1.5 * iqr
    non_out = tuple(s for s in synthetic.sequences if losses[s.id] <= threshold)
    out = tuple(s for s in synthetic.sequences if losses[s.id] > threshold)
    return OutlierPartition(
        non_outliers=Dataset(sequences=non_out, catalog_id=synthetic.catalog_id),
        outliers=Dataset(sequences=out, catalog_id=synthetic.catalog_id),
        losses=losses,
        q1=q1,
        q3=q3,
        iqr=iqr,
        threshold=threshold,
    )


def _train_test_split(
    sequences: tuple[BehaviorSequence, ...], seed: int
) -> tuple[tuple[BehaviorSequence, ...], tuple[BehaviorSequence, ...]]:
    rng = np.random.default_rng([seed, _SPLIT_STREAM_TAG])
    perm = rng.permutation(len(sequences))
    n_train = int(round(TRAIN_FRACTION * len(sequences)))
    n_train = min(max(n_train, 1), len(sequences) - 1)
    train_idx = sorted(perm[:n_train])
    test_idx = sorted(perm[n_train:])
    return (
        tuple(sequences[i] for i in train_idx),
        tuple(sequences[i] for i in test_idx),
    )


def evaluate_outliers(
    p: OutlierPartition,
    cfg: ModelConfig,
    *,
    catalog: DeviceCatalog | None = None,
    max_evaluated_outliers: int | None = None,
) -> FilterResult:
    """Stage 2: utility-based retention of the flagged outliers.

    Every candidate gets a full retraining from the same seed and
    schedule as the baseline, with the candidate appended to the
    training split; retention requires test loss <= baseline. Retrained
    runs share one vocab so weight shapes match across trials. The
    retraining count can be capped for large runs via
    `max_evaluated_outliers` (excess outliers are deleted unjudged).
    """
    if len(p.outliers) == 0:
        final = tuple(s.with_origin(Origin.FILTERED) for s in p.non_outliers.sequences)
        return FilterResult(
            filtered=Dataset(sequences=final, catalog_id=p.non_outliers.catalog_id),
            partition=p,
            baseline_loss=None,
            verdicts=(),
        )
    if len(p.non_outliers) < 5:
        raise InsufficientDataError("need at least 5 non-outliers for the 8:2 split")

    vocab = Vocab.build(
        list(p.non_outliers.sequences) + list(p.outliers.sequences), catalog
    )
    train_seqs, test_seqs = _train_test_split(p.non_outliers.sequences, cfg.seed)
    train_ds = Dataset(sequences=train_seqs, catalog_id=p.non_outliers.catalog_id)
    baseline = train_autoencoder(train_ds, cfg, vocab=vocab)
    baseline_loss = mean_reconstruction_loss(baseline, test_seqs)

    verdicts: list[RetentionVerdict] = []
    retained: list[BehaviorSequence] = []
    budget = len(p.outliers) if max_evaluated_outliers is None else max_evaluated_outliers
    for i, outlier in enumerate(p.outliers.sequences):
        if i >= budget:
            verdicts.append(
                RetentionVerdict(outlier.id, baseline_loss, float("inf"), "delete")
            )
            continue
        trial_ds = Dataset(
            sequences=train_seqs + (outlier,), catalog_id=p.non_outliers.catalog_id
        )
        trial = train_autoencoder(trial_ds, cfg, vocab=vocab)
        loss = mean_reconstruction_loss(trial, test_seqs)
        decision = "retain" if loss <= baseline_loss else "delete"
        verdicts.append(RetentionVerdict(outlier.id, baseline_loss, loss, decision))
        if decision == "retain":
            retained.append(outlier)

    final = tuple(
        s.with_origin(Origin.FILTERED) for s in p.non_outliers.sequences + tuple(retained)
    )
    return FilterResult(
        filtered=Dataset(sequences=final, catalog_id=p.non_outliers.catalog_id),
        partition=p,
        baseline_loss=baseline_loss,
        verdicts=tuple(verdicts),
    )


def run_filter(
    synthetic: Dataset,
    cfg: ModelConfig,
    *,
    catalog: DeviceCatalog | None = None,
    max_evaluated_outliers: int | None = None,
) -> FilterResult:
    """Both stages back to back."""
    partition = detect_outliers(synthetic, cfg, catalog=catalog)
    return evaluate_outliers(
        partition, cfg, catalog=catalog, max_evaluated_outliers=max_evaluated_outliers
    )
