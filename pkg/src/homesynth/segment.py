"""Split raw behavior streams into coherent subsequences.

Two time constraints bound every output: consecutive behaviors may be at
most `dt_max` apart and a whole subsequence may span at most `t_max`.
Configured opener/closer pairs (e.g. a water valve being opened and
later closed) override both checks so that semantically paired behaviors
are never separated.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import timedelta

from .core import Behavior, BehaviorSequence, ContractError, Origin


@dataclass(frozen=True)
class PairRule:
    """opener/closer actions on one device that must stay in one subsequence."""

    device: str
    opener: str
    closer: str

    def __post_init__(self) -> None:
        if self.opener == self.closer:
            raise ContractError("opener and closer must differ")


@dataclass(frozen=True)
class SplitConfig:
    dt_max: timedelta = timedelta(hours=9)
    t_max: timedelta = timedelta(hours=24)
    pairing: tuple[PairRule, ...] = ()
    grace: timedelta | None = None  # defaults to 2 * dt_max

    def __post_init__(self) -> None:
        if not timedelta(0) < self.dt_max <= self.t_max:
            raise ContractError("need 0 < dt_max <= t_max")
        if self.grace is not None and self.grace < self.dt_max:
            raise ContractError("grace must be >= dt_max")

    @property
    def effective_grace(self) -> timedelta:
        return self.grace if self.grace is not None else 2 * self.dt_max


@dataclass(frozen=True)
class SplitStats:
    input_len: int
    output_count: int
    force_appends: int


def semantic_check(current: list[Behavior], nxt: Behavior, cfg: SplitConfig) -> bool:
    """True iff `nxt` closes a still-open pair within the grace window.

    An opener counts only when no matching closer follows it inside
    `current`; the most recent opener is the one checked against grace.
    """
    if not current:
        raise ContractError("semantic_check needs a non-empty current subsequence")
    grace = cfg.effective_grace
    for rule in cfg.pairing:
        if rule.device != nxt.device or rule.closer != nxt.action:
            continue
        open_since = None
        for b in current:
            if b.device != rule.device:
                continue
            if b.action == rule.opener:
                open_since = b.timestamp
            elif b.action == rule.closer:
                open_since = None
        if open_since is not None and nxt.timestamp - open_since <= grace:
            return True
    return False


def split_with_stats(raw: BehaviorSequence, cfg: SplitConfig) -> tuple[list[BehaviorSequence], SplitStats]:
    """Split `raw` and report how often the semantic override fired.

    The concatenation of the outputs always equals `raw`. A behavior
    admitted by `semantic_check` is appended even when it violates the
    gap or duration limit, so those bounds hold everywhere except at
    force-append points.
    """
    for prev, cur in zip(raw.behaviors, raw.behaviors[1:]):
        if cur.timestamp < prev.timestamp:
            raise ContractError("split requires a timestamp-sorted input sequence")

    pieces: list[list[Behavior]] = []
    current: list[Behavior] = [raw.behaviors[0]]
    t_start = raw.behaviors[0].timestamp
    force_appends = 0

    for b in raw.behaviors[1:]:
        prev = current[-1]
        if semantic_check(current, b, cfg):
            current.append(b)
            force_appends += 1
        elif b.timestamp - prev.timestamp > cfg.dt_max:
            pieces.append(current)
            current = [b]
            t_start = b.timestamp
        elif b.timestamp - t_start > cfg.t_max:
            pieces.append(current)
            current = [b]
            t_start = b.timestamp
        else:
            current.append(b)
    pieces.append(current)

    outputs = [
        BehaviorSequence(behaviors=tuple(piece), id=f"{raw.id}-s{k:04d}", origin=Origin.SEGMENTED)
        for k, piece in enumerate(pieces)
    ]
    stats = SplitStats(input_len=len(raw), output_count=len(outputs), force_appends=force_appends)
    return outputs, stats


def split(raw: BehaviorSequence, cfg: SplitConfig) -> list[BehaviorSequence]:
    return split_with_stats(raw, cfg)[0]
