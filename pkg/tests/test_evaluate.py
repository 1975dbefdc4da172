import itertools
import math

import pytest

from homesynth.core import ContractError, Dataset
from homesynth.evaluate import (
    ComparisonConfig,
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    MetricsError,
    ad_evaluate,
    bp_evaluate,
    compression_comparison,
    confusion_metrics,
    next_action_predictor,
    prediction_events,
    rank_metrics,
)
from homesynth.filtering import InsufficientDataError
from homesynth.seqmodel import ModelConfig
from homesynth.simulate import default_profile, generate_corpus, junk_dataset, simulator_catalog

from conftest import token_seq


def test_confusion_example():
    m = confusion_metrics(tp=1, fp=1, tn=0, fn=0)
    assert m.precision == pytest.approx(0.5)
    assert m.recall == pytest.approx(1.0)
    assert m.f1 == pytest.approx(2 / 3)


def test_all_correct_gives_perfect_f1():
    m = confusion_metrics(tp=3, fp=0, tn=3, fn=0)
    assert m.f1 == 1.0


def oracle_metrics(tp, fp, tn, fn):
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return recall, precision, f1


def test_confusion_exhaustive_against_oracle():
    for tp, fp, tn, fn in itertools.product(range(7), repeat=4):
        if tp + fp + tn + fn > 6:
            continue
        m = confusion_metrics(tp, fp, tn, fn)
        recall, precision, f1 = oracle_metrics(tp, fp, tn, fn)
        assert m.recall == pytest.approx(recall)
        assert m.precision == pytest.approx(precision)
        assert m.f1 == pytest.approx(f1)


def test_rank_metrics_truth_first():
    m = rank_metrics([["A", "B"]], ["A"])
    assert m.ndcg_at_10 == 1.0
    assert m.hr_at_10 == 1.0


def test_rank_metrics_truth_second():
    m = rank_metrics([["B", "A"]], ["A"])
    assert m.ndcg_at_10 == pytest.approx(1 / math.log2(3), abs=1e-9)
    assert m.hr_at_10 == 1.0


def test_rank_metrics_truth_absent():
    m = rank_metrics([["B", "C"]], ["A"])
    assert m.ndcg_at_10 == 0.0
    assert m.hr_at_10 == 0.0


def test_rank_metrics_rank_improvement_never_hurts():
    fillers = [f"a{i}" for i in range(10)]
    values = []
    for pos in range(10):
        ranked = fillers[:pos] + ["T"] + fillers[pos:9]
        values.append(rank_metrics([ranked], ["T"]).ndcg_at_10)
    assert values == sorted(values, reverse=True)
    assert len(set(values)) == 10  # strictly better rank, strictly higher gain


def test_rank_metrics_contracts():
    with pytest.raises(ContractError):
        rank_metrics([], [])
    with pytest.raises(ContractError):
        rank_metrics([["A"] * 11], ["A"])
    with pytest.raises(ContractError):
        rank_metrics([["A", "A"]], ["A"])


def train_ds():
    return Dataset(sequences=(token_seq(["A:x", "B:x", "A:x", "B:x", "C:x"], sid="t"),))


def test_predictor_counts_dominate():
    predictor = next_action_predictor(train_ds())
    assert predictor.predict("A:x")[0] == "B:x"


def test_predictor_backfills_with_global_frequency():
    predictor = next_action_predictor(train_ds())
    ranked = predictor.predict("C:x")  # no outgoing transitions
    # global frequencies: A:x and B:x twice, C:x once
    assert ranked[:3] == ["A:x", "B:x", "C:x"]


def test_predictor_unseen_context_uses_global_order():
    predictor = next_action_predictor(train_ds())
    assert predictor.predict("Z:z") == predictor.predict("C:x")


def test_predictor_deterministic():
    p1 = next_action_predictor(train_ds())
    p2 = next_action_predictor(train_ds())
    assert p1.predict("A:x") == p2.predict("A:x")


def test_prediction_events():
    events = prediction_events(train_ds())
    assert events[0] == ("A:x", "B:x")
    assert len(events) == 4


def test_bp_evaluate_self_prediction_is_strong():
    ds = generate_corpus(default_profile(seed=71, noise_rate=0.0), 15)
    metrics = bp_evaluate(ds, ds)
    assert metrics.hr_at_10 > 0.5
    assert 0.0 <= metrics.ndcg_at_10 <= 1.0


AD_CFG = ModelConfig(
    embed_dim=32, heads=2, layers=1, ffn_dim=64, max_len=64,
    epochs=8, batch_size=32, learning_rate=3e-3, seed=81,
)


def test_ad_evaluate_rejects_single_label():
    ds = generate_corpus(default_profile(seed=82, noise_rate=0.0), 10)
    test = [(s, LABEL_NORMAL) for s in ds.sequences]
    with pytest.raises(MetricsError):
        ad_evaluate(ds, test, AD_CFG)


def test_ad_evaluate_separates_junk():
    cat = simulator_catalog()
    train = generate_corpus(default_profile(seed=83, noise_rate=0.0), 60)
    normals = generate_corpus(default_profile(seed=84, noise_rate=0.0), 15)
    junk = junk_dataset(cat, 15, seed=85)
    test = [(s, LABEL_NORMAL) for s in normals.sequences] + [
        (s, LABEL_ANOMALOUS) for s in junk.sequences
    ]
    metrics = ad_evaluate(train, test, AD_CFG, catalog=cat)
    assert metrics.f1 >= 0.8


def test_ad_false_positive_rate_on_normals_is_iqr_tail():
    cat = simulator_catalog()
    train = generate_corpus(default_profile(seed=86, noise_rate=0.0), 60)
    # score the training normals themselves plus one token anomaly
    junk = junk_dataset(cat, 1, seed=87)
    test = [(s, LABEL_NORMAL) for s in train.sequences] + [
        (s, LABEL_ANOMALOUS) for s in junk.sequences
    ]
    metrics = ad_evaluate(train, test, AD_CFG, catalog=cat)
    assert metrics.fp / (metrics.fp + metrics.tn) <= 0.10


COMPARE_CFG = ComparisonConfig(
    model=ModelConfig(
        embed_dim=32, heads=2, layers=1, ffn_dim=64, max_len=64,
        epochs=10, batch_size=32, learning_rate=3e-3, seed=505,
    )
)


def test_comparison_requires_fifty_sequences():
    ds = generate_corpus(default_profile(seed=88), 10)
    with pytest.raises(InsufficientDataError):
        compression_comparison(ds, [0.5], COMPARE_CFG)


def test_comparison_rate_one_equals_full():
    full = generate_corpus(default_profile(seed=89, noise_rate=0.05), 60)
    report = compression_comparison(full, [1.0], COMPARE_CFG)
    for row in report.rows:
        assert row.attained
        assert row.achieved_rate == 1.0
        assert row.mean_loss == pytest.approx(report.full_mean_loss, abs=1e-12)
        assert row.var_loss == pytest.approx(report.full_var_loss, abs=1e-12)


def test_comparison_reports_unreachable_rate_as_unattained():
    # 60 copies of one sequence: the greedy scan can only keep 1 or all,
    # so a mid-range retention target is unreachable
    full = Dataset(
        sequences=tuple(token_seq(["Light:switch_on", "Fan:switch_on"], sid=f"c{i}") for i in range(60))
    )
    report = compression_comparison(full, [0.5], COMPARE_CFG)
    for row in report.rows:
        assert not row.attained
        assert row.achieved_rate in (pytest.approx(1.0),) or row.achieved_rate < 0.1


def test_comparison_csv_has_all_rows():
    full = generate_corpus(default_profile(seed=90, noise_rate=0.05), 55)
    report = compression_comparison(full, [1.0], COMPARE_CFG)
    lines = report.to_csv().strip().splitlines()
    assert lines[0].startswith("rate,method")
    assert len(lines) == 1 + 1 + 2  # header, full, two methods


def test_comparison_report_is_json_serializable():
    import json

    full = generate_corpus(default_profile(seed=91, noise_rate=0.05), 55)
    report = compression_comparison(full, [0.5], COMPARE_CFG)
    obj = json.loads(report.to_json())
    assert {row["method"] for row in obj["rows"]} == {"embedding", "jaccard"}
    assert all(isinstance(row["attained"], bool) for row in obj["rows"])
