"""Action transition graph, count matrix and top-k successor hints.

Transitions are counted within each sequence independently (no edge
between the last action of one sequence and the first of the next), so
segmentation decisions directly shape the graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import ContractError, Dataset


@dataclass(frozen=True)
class BehaviorGraph:
    nodes: frozenset[str]
    edges: Mapping[tuple[str, str], int]

    def __post_init__(self) -> None:
        for (src, dst), weight in self.edges.items():
            if src not in self.nodes or dst not in self.nodes:
                raise ContractError(f"edge ({src}, {dst}) references an unknown node")
            if weight < 1:
                raise ContractError("edge weights must be positive")

    @property
    def total_weight(self) -> int:
        return sum(self.edges.values())


@dataclass(frozen=True)
class TransitionMatrix:
    index: tuple[str, ...]
    counts: np.ndarray  # |V| x |V| non-negative ints


@dataclass(frozen=True)
class HintSet:
    """Per-action ranked successor lists, count-descending, at most k long."""

    k: int
    hints: tuple[tuple[str, tuple[tuple[str, int], ...]], ...]


def build_graph(ds: Dataset) -> BehaviorGraph:
    nodes: set[str] = set()
    edges: dict[tuple[str, str], int] = {}
    for seq in ds.sequences:
        tokens = seq.tokens()
        nodes.update(tokens)
        for src, dst in zip(tokens, tokens[1:]):
            edges[(src, dst)] = edges.get((src, dst), 0) + 1
    return BehaviorGraph(nodes=frozenset(nodes), edges=edges)


def transition_matrix(g: BehaviorGraph) -> TransitionMatrix:
    index = tuple(sorted(g.nodes))
    pos = {token: i for i, token in enumerate(index)}
    counts = np.zeros((len(index), len(index)), dtype=np.int64)
    for (src, dst), weight in g.edges.items():
        counts[pos[src], pos[dst]] = weight
    return TransitionMatrix(index=index, counts=counts)


def top_k_hints(m: TransitionMatrix, k: int) -> HintSet:
    """Keep the k most frequent successors per action; ties break toward
    the lexicographically smaller token. Actions with no outgoing
    transitions are omitted."""
    if k < 1:
        raise ContractError("k must be >= 1")
    hints: list[tuple[str, tuple[tuple[str, int], ...]]] = []
    for i, current in enumerate(m.index):
        row = m.counts[i]
        nonzero = [(m.index[j], int(row[j])) for j in np.nonzero(row)[0]]
        if not nonzero:
            continue
        nonzero.sort(key=lambda pair: (-pair[1], pair[0]))
        hints.append((current, tuple(nonzero[:k])))
    return HintSet(k=k, hints=tuple(hints))


def hints_to_json(h: HintSet) -> str:
    obj = {
        "hints": [
            {
                "current": current,
                "next": [{"action": action, "count": count} for action, count in successors],
            }
            for current, successors in h.hints
        ]
    }
    return json.dumps(obj, sort_keys=True, indent=2)


def hint_lines(h: HintSet, budget: int = 60) -> list[str]:
    """Natural-language habit lines for the prompt, capped at `budget`."""
    lines: list[str] = []
    for current, successors in h.hints:
        if len(lines) >= budget:
            break
        rendered = ", ".join(f"{action} ({count} times)" for action, count in successors)
        lines.append(f"After {current}, the user most often does: {rendered}.")
    return lines
