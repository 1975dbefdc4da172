import json
import random

import numpy as np

from homesynth.core import Dataset
from homesynth.graph import (
    build_graph,
    hint_lines,
    hints_to_json,
    top_k_hints,
    transition_matrix,
    HintSet,
    TransitionMatrix,
)

from conftest import token_seq


def dataset_of(*token_lists):
    return Dataset(
        sequences=tuple(
            token_seq(tokens, sid=f"g{i}") for i, tokens in enumerate(token_lists)
        )
    )


def test_build_graph_counts_consecutive_pairs():
    g = build_graph(dataset_of(["A:x", "B:x", "A:x", "B:x", "C:x"]))
    assert g.edges == {("A:x", "B:x"): 2, ("B:x", "A:x"): 1, ("B:x", "C:x"): 1}


def test_no_cross_sequence_edges():
    g = build_graph(dataset_of(["A:x", "B:x"], ["B:x", "C:x"]))
    assert g.edges == {("A:x", "B:x"): 1, ("B:x", "C:x"): 1}


def test_self_loop_counted():
    g = build_graph(dataset_of(["A:x", "A:x"]))
    assert g.edges == {("A:x", "A:x"): 1}


def test_total_weight_matches_pair_count():
    ds = dataset_of(["A:x", "B:x", "C:x"], ["A:x"], ["B:x", "B:x"])
    g = build_graph(ds)
    assert g.total_weight == sum(max(0, len(s) - 1) for s in ds.sequences)


def test_empty_dataset_empty_graph():
    g = build_graph(Dataset(sequences=()))
    assert not g.nodes and not g.edges
    assert transition_matrix(g).counts.shape == (0, 0)


def test_matrix_transcription():
    m = transition_matrix(build_graph(dataset_of(["A:x", "B:x", "A:x", "B:x", "C:x"])))
    assert m.index == ("A:x", "B:x", "C:x")
    assert m.counts.tolist() == [[0, 2, 0], [1, 0, 1], [0, 0, 0]]


def test_matrix_row_sums_are_out_degrees():
    ds = dataset_of(["A:x", "B:x", "A:x", "C:x"], ["C:x", "A:x"])
    g = build_graph(ds)
    m = transition_matrix(g)
    out_degree = {token: 0 for token in m.index}
    for (src, _), w in g.edges.items():
        out_degree[src] += w
    assert m.counts.sum(axis=1).tolist() == [out_degree[t] for t in m.index]


def test_top_k_truncates_and_ranks():
    m = TransitionMatrix(
        index=("A", "B", "C", "D"),
        counts=np.array([[0, 5, 2, 1], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]),
    )
    h = top_k_hints(m, 2)
    assert h.hints == (("A", (("B", 5), ("C", 2))),)


def test_top_k_larger_than_nonzero_count():
    m = TransitionMatrix(index=("A", "B"), counts=np.array([[0, 3], [0, 0]]))
    h = top_k_hints(m, 10)
    assert h.hints == (("A", (("B", 3),)),)


def test_top_k_tie_breaks_lexicographically():
    m = TransitionMatrix(
        index=("A", "B", "C"), counts=np.array([[0, 3, 3], [0, 0, 0], [0, 0, 0]])
    )
    h = top_k_hints(m, 1)
    assert h.hints == (("A", (("B", 3),)),)


def test_hints_json_empty():
    assert json.loads(hints_to_json(HintSet(k=3, hints=()))) == {"hints": []}


def test_hints_json_schema_and_determinism():
    h = top_k_hints(
        transition_matrix(build_graph(dataset_of(["A:x", "B:x", "B:x"]))), 5
    )
    text = hints_to_json(h)
    assert text == hints_to_json(h)
    obj = json.loads(text)
    assert obj["hints"][0]["current"] == "A:x"
    assert obj["hints"][0]["next"] == [{"action": "B:x", "count": 1}]


def test_hint_lines_budget():
    ds = dataset_of(*[[f"D{i}:x", f"E{i}:x"] for i in range(10)])
    h = top_k_hints(transition_matrix(build_graph(ds)), 3)
    assert len(hint_lines(h, budget=4)) == 4


def test_hints_invariant_under_sequence_reordering():
    lists = [["A:x", "B:x", "C:x"], ["B:x", "A:x"], ["C:x", "C:x"]]
    h1 = top_k_hints(transition_matrix(build_graph(dataset_of(*lists))), 5)
    h2 = top_k_hints(transition_matrix(build_graph(dataset_of(*reversed(lists)))), 5)
    assert h1 == h2


def brute_force_pair_counts(ds):
    counts = {}
    for s in ds.sequences:
        toks = s.tokens()
        for i in range(len(toks) - 1):
            key = (toks[i], toks[i + 1])
            counts[key] = counts.get(key, 0) + 1
    return counts


def test_matrix_matches_brute_force_oracle():
    rng = random.Random(321)
    alphabet = [f"D{i}:a" for i in range(6)]
    for _ in range(100):
        lists = [
            [rng.choice(alphabet) for _ in range(rng.randint(1, 12))]
            for _ in range(rng.randint(1, 8))
        ]
        ds = dataset_of(*lists)
        m = transition_matrix(build_graph(ds))
        oracle = brute_force_pair_counts(ds)
        for i, src in enumerate(m.index):
            for j, dst in enumerate(m.index):
                assert m.counts[i, j] == oracle.get((src, dst), 0)
