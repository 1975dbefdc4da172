"""Scripted household simulator and deterministic mock endpoint.

The simulator produces oracle-grade corpora for tests and offline runs:
template-driven routines, seeded noise, and context knobs (season,
schedule, occupancy) that mirror the transition kinds the pipeline must
handle. The mock client applies the declared environment change to the
sequences embedded in a prompt and answers in the exact wire format the
parser expects, so end-to-end runs are reproducible without a network.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from datetime import date, datetime, timedelta

import numpy as np

from .core import (
    Behavior,
    BehaviorSequence,
    ContractError,
    Dataset,
    DeviceCatalog,
    Origin,
    format_timestamp,
    load_catalog,
    parse_timestamp,
)
from .synth import PromptBundle

SEASON_WORDS = {
    "winter": "winter",
    "summer": "summer",
    "spring": "summer",  # warm-season devices
    "autumn": "winter",
    "fall": "winter",
    "cold": "winter",
    "hot": "summer",
    "warm": "summer",
}
NIGHT_WORDS = ("night", "nighttime", "nocturnal")
DAY_WORDS = ("day", "daytime", "diurnal")
MULTI_WORDS = ("multiple", "multi", "two", "2+", "family", "several")
SINGLE_WORDS = ("single", "one", "alone", "solo")

WINTER_DEVICE = "Heater"
SUMMER_DEVICES = ("AirConditioner", "Fan")


@dataclass(frozen=True)
class Routine:
    """A daily time window with weighted behavior templates."""

    start_hour: int
    end_hour: int  # exclusive; must be > start_hour and <= 24
    templates: tuple[tuple[str, str, float], ...]  # (device, action, weight)
    events: int = 3

    def __post_init__(self) -> None:
        if not 0 <= self.start_hour < self.end_hour <= 24:
            raise ContractError("routine window must satisfy 0 <= start < end <= 24")
        if not self.templates:
            raise ContractError("routine needs at least one template")
        if any(w <= 0 for _, _, w in self.templates):
            raise ContractError("template weights must be positive")
        if self.events < 1:
            raise ContractError("routine must emit at least one event")


@dataclass(frozen=True)
class HouseholdContext:
    season: str = "winter"  # winter | summer
    schedule: str = "day"  # day | night
    occupants: str = "1"  # 1 | 2+


@dataclass(frozen=True)
class HouseholdProfile:
    catalog: DeviceCatalog
    routines: tuple[Routine, ...]
    context: HouseholdContext = HouseholdContext()
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_rate <= 0.5:
            raise ContractError("noise_rate must lie in [0, 0.5]")


def simulator_catalog() -> DeviceCatalog:
    return load_catalog("simhome")


def default_profile(
    season: str = "winter",
    schedule: str = "day",
    occupants: str = "1",
    noise_rate: float = 0.0,
    seed: int = 0,
) -> HouseholdProfile:
    """A plausible household: morning, daytime, evening and a climate block."""
    climate: tuple[tuple[str, str, float], ...]
    if season == "winter":
        climate = (("Heater", "switch_on", 2.0), ("Heater", "switch_off", 2.0))
    else:
        climate = (
            ("AirConditioner", "switch_on", 1.0),
            ("AirConditioner", "switch_off", 1.0),
            ("Fan", "switch_on", 1.0),
            ("Fan", "switch_off", 1.0),
        )
    routines = (
        Routine(6, 9, (("Light", "switch_on", 2.0), ("CoffeeMachine", "brew", 1.5),
                       ("Blind", "open", 1.0)), events=3),
        Routine(9, 12, climate, events=2),
        Routine(12, 17, (("Washer", "start", 1.0), ("Washer", "stop", 1.0),
                         ("RobotCleaner", "start", 1.0), ("RobotCleaner", "dock", 1.0)), events=2),
        Routine(17, 22, (("Light", "switch_on", 1.0), ("Television", "switch_on", 1.5),
                         ("Television", "switch_off", 1.5), ("Microwave", "start", 1.0)), events=3),
        Routine(22, 24, (("Light", "switch_off", 2.0), ("SmartLock", "lock", 2.0),
                         ("Blind", "close", 1.0)), events=2),
    )
    return HouseholdProfile(
        catalog=simulator_catalog(),
        routines=routines,
        context=HouseholdContext(season=season, schedule=schedule, occupants=occupants),
        noise_rate=noise_rate,
        seed=seed,
    )


def _catalog_tokens(cat: DeviceCatalog) -> list[tuple[str, str]]:
    out: list[tuple[str, str]] = []
    for device in sorted(cat.entries):
        actions = cat.entries[device]
        if actions is None:
            continue
        out.extend((device, a) for a in sorted(actions))
    return out


def generate_corpus(p: HouseholdProfile, days: int, base_date: date = date(2022, 1, 3)) -> Dataset:
    """One behavior sequence per simulated day, deterministic per seed.

    Event counts per window are drawn before any event details, so the
    2+ occupancy doubling changes density without shifting the rest of
    the random stream.
    """
    if days < 1:
        raise ContractError("days must be >= 1")
    if not p.routines:
        raise ContractError("profile has no routines")

    count_rng = np.random.default_rng([p.seed, 0x11])
    detail_rng = np.random.default_rng([p.seed, 0x22])
    occupancy_factor = 2 if p.context.occupants == "2+" else 1
    night = p.context.schedule == "night"
    junk_pool = _catalog_tokens(p.catalog)

    sequences: list[BehaviorSequence] = []
    for day in range(days):
        day_date = base_date + timedelta(days=day)
        counts = [int(count_rng.integers(max(1, r.events - 1), r.events + 2)) for r in p.routines]
        behaviors: list[Behavior] = []
        for routine, count in zip(p.routines, counts):
            weights = np.array([w for _, _, w in routine.templates], dtype=np.float64)
            weights /= weights.sum()
            for _ in range(count * occupancy_factor):
                t_idx = int(detail_rng.choice(len(routine.templates), p=weights))
                device, action, _ = routine.templates[t_idx]
                hour = int(detail_rng.integers(routine.start_hour, routine.end_hour))
                minute = int(detail_rng.integers(0, 60))
                if night:
                    hour = (hour + 12) % 24
                if p.noise_rate > 0.0 and detail_rng.random() < p.noise_rate:
                    device, action = junk_pool[int(detail_rng.integers(0, len(junk_pool)))]
                ts = datetime(day_date.year, day_date.month, day_date.day, hour, minute)
                behaviors.append(Behavior(timestamp=ts, device=device, action=action))
        behaviors.sort(key=lambda b: b.timestamp)
        sequences.append(
            BehaviorSequence(behaviors=tuple(behaviors), id=f"day-{day:04d}", origin=Origin.RAW)
        )
    return Dataset(sequences=tuple(sequences), catalog_id=p.catalog.name)


def junk_dataset(
    cat: DeviceCatalog,
    count: int,
    seed: int,
    *,
    length_range: tuple[int, int] = (6, 14),
    base_date: date = date(2022, 6, 1),
    id_prefix: str = "junk",
) -> Dataset:
    """Catalog-valid but patternless sequences (uniform devices, times)."""
    rng = np.random.default_rng([seed, 0x33])
    pool = _catalog_tokens(cat)
    if not pool:
        raise ContractError("junk generation needs a catalog with explicit actions")
    sequences = []
    for i in range(count):
        n = int(rng.integers(length_range[0], length_range[1] + 1))
        day = base_date + timedelta(days=int(rng.integers(0, 30)))
        stamps = sorted(
            datetime(day.year, day.month, day.day, int(rng.integers(0, 24)), int(rng.integers(0, 60)))
            for _ in range(n)
        )
        behaviors = []
        for ts in stamps:
            device, action = pool[int(rng.integers(0, len(pool)))]
            behaviors.append(Behavior(timestamp=ts, device=device, action=action))
        sequences.append(
            BehaviorSequence(behaviors=tuple(behaviors), id=f"{id_prefix}-{i:04d}", origin=Origin.RAW)
        )
    return Dataset(sequences=tuple(sequences), catalog_id=cat.name)


def corrupt_dataset(
    ds: Dataset, fraction: float, cat: DeviceCatalog, seed: int
) -> tuple[Dataset, frozenset[str]]:
    """Replace a seeded fraction of sequences with same-length junk.

    Corrupted sequences keep their ids and timestamps but every
    (device, action) is redrawn uniformly from the catalog; returns the
    new dataset plus the corrupted id set.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ContractError("fraction must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0x44])
    pool = _catalog_tokens(cat)
    n_corrupt = int(round(fraction * len(ds)))
    chosen = set(rng.choice(len(ds), size=n_corrupt, replace=False).tolist())
    sequences = []
    corrupted_ids = set()
    for i, seq in enumerate(ds.sequences):
        if i in chosen:
            behaviors = tuple(
                Behavior(
                    timestamp=b.timestamp,
                    device=(pick := pool[int(rng.integers(0, len(pool)))])[0],
                    action=pick[1],
                )
                for b in seq.behaviors
            )
            sequences.append(BehaviorSequence(behaviors=behaviors, id=seq.id, origin=seq.origin))
            corrupted_ids.add(seq.id)
        else:
            sequences.append(seq)
    return Dataset(sequences=tuple(sequences), catalog_id=ds.catalog_id), frozenset(corrupted_ids)


_ENV_ORI = re.compile(r"The original environment is (.+?)\.\n")
_ENV_NEW = re.compile(r"The new environment is (.+?)\.\n")
_SEQ_LINE = re.compile(r"^\[(\d{4}-\d{2}-\d{2} \d{2}:\d{2}), ([^:\]]+):([^\]]+)\]$")
_SEQ_HEADER = re.compile(r"^Sequence \d+:$")


def _words(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9+]+", text.lower()))


def _season_of(text: str) -> str | None:
    words = _words(text)
    for word, season in SEASON_WORDS.items():
        if word in words:
            return season
    return None


def _schedule_of(text: str) -> str | None:
    words = _words(text)
    if words & set(NIGHT_WORDS):
        return "night"
    if words & set(DAY_WORDS):
        return "day"
    return None


def _occupancy_of(text: str) -> str | None:
    words = _words(text)
    if words & set(MULTI_WORDS):
        return "2+"
    if words & set(SINGLE_WORDS):
        return "1"
    return None


def _extract_sequences(user_text: str) -> list[list[tuple[datetime, str, str]]]:
    sequences: list[list[tuple[datetime, str, str]]] = []
    current: list[tuple[datetime, str, str]] | None = None
    for line in user_text.splitlines():
        line = line.strip()
        if _SEQ_HEADER.match(line):
            if current:
                sequences.append(current)
            current = []
            continue
        m = _SEQ_LINE.match(line)
        if m and current is not None:
            current.append((parse_timestamp(m.group(1)), m.group(2), m.group(3)))
    if current:
        sequences.append(current)
    return sequences


def _substitute_season(
    events: list[tuple[datetime, str, str]],
    to_season: str,
    cat: DeviceCatalog,
) -> list[tuple[datetime, str, str]]:
    out: list[tuple[datetime, str, str]] = []
    swap_index = 0
    for ts, device, action in events:
        if to_season == "summer" and device == WINTER_DEVICE:
            device = SUMMER_DEVICES[swap_index % len(SUMMER_DEVICES)]
            swap_index += 1
        elif to_season == "winter" and device in SUMMER_DEVICES:
            device = WINTER_DEVICE
        if not cat.allows(device, action):
            actions = cat.entries.get(device)
            if not actions:
                continue  # device unknown to the target catalog: drop the event
            action = sorted(actions)[0]
        out.append((ts, device, action))
    return out


def mock_llm(bundle: PromptBundle, p_new: HouseholdProfile) -> str:
    """Deterministic endpoint stand-in.

    Reads the environment strings and the rendered sequences out of the
    user message, applies the matching transformation (season: swap
    heating for cooling devices or back; schedule: shift all timestamps
    by 12 hours; occupancy: duplicate events with small jitter or thin
    them out), and re-emits catalog-valid sequences in the
    `<seq [[...]] seq>` wire format.
    """
    ori_m = _ENV_ORI.search(bundle.user_text)
    new_m = _ENV_NEW.search(bundle.user_text)
    if not ori_m or not new_m:
        raise ContractError("mock client needs both environment strings in the prompt")
    e_ori, e_new = ori_m.group(1), new_m.group(1)
    sequences = _extract_sequences(bundle.user_text)

    cat = p_new.catalog
    sched_ori, sched_new = _schedule_of(e_ori), _schedule_of(e_new)
    season_ori, season_new = _season_of(e_ori), _season_of(e_new)
    occ_ori, occ_new = _occupancy_of(e_ori), _occupancy_of(e_new)

    digest = hashlib.sha256(bundle.user_text.encode("utf-8")).digest()
    jitter_rng = np.random.default_rng([p_new.seed, int.from_bytes(digest[:8], "big")])

    out_groups: list[list[str]] = []
    for events in sequences:
        if sched_ori and sched_new and sched_ori != sched_new:
            events = [(ts + timedelta(hours=12), d, a) for ts, d, a in events]
        elif season_ori and season_new and season_ori != season_new:
            events = _substitute_season(events, season_new, cat)
        elif occ_ori and occ_new and occ_ori != occ_new:
            if occ_new == "2+":
                extra = [
                    (ts + timedelta(minutes=int(jitter_rng.integers(1, 16))), d, a)
                    for ts, d, a in events
                ]
                events = sorted(events + extra, key=lambda e: e[0])
            else:
                events = events[::2]
        events = [(ts, d, a) for ts, d, a in events if cat.allows(d, a)]
        if not events:
            continue
        out_groups.append(
            [f"{format_timestamp(ts)}, {d}, {d}:{a}" for ts, d, a in sorted(events, key=lambda e: e[0])]
        )

    return f"<seq {out_groups!r} seq>"


class MockLlmClient:
    """Drop-in replacement for `LlmClient` backed by `mock_llm`."""

    def __init__(self, profile: HouseholdProfile) -> None:
        self.profile = profile

    def complete(self, bundle: PromptBundle) -> str:
        return mock_llm(bundle, self.profile)
