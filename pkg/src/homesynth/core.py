"""Domain types, catalog handling, ingestion and validation.

Everything downstream (segmentation, embedding, synthesis, filtering)
works on the immutable types defined here. All types are frozen
dataclasses and safe to share across threads.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping

TS_FORMAT = "%Y-%m-%d %H:%M"

BUNDLED_CATALOGS = ("fr", "sp", "us", "simhome")


class ContractError(ValueError):
    """A precondition or invariant of the data model was violated."""


class LogFormatError(ValueError):
    """The behavior log is structurally unusable (bad header, no valid rows)."""


def parse_timestamp(text: str) -> datetime:
    """Parse a minute-precision `YYYY-MM-DD HH:MM` timestamp."""
    return datetime.strptime(text.strip(), TS_FORMAT)


def format_timestamp(ts: datetime) -> str:
    return ts.strftime(TS_FORMAT)


class Origin(str, Enum):
    RAW = "raw"
    SEGMENTED = "segmented"
    SYNTHETIC = "synthetic"
    FILTERED = "filtered"


class TransitionKind(str, Enum):
    ST = "ST"  # seasonal
    TT = "TT"  # time schedule
    NT = "NT"  # occupant number


@dataclass(frozen=True)
class Behavior:
    """One timestamped device action.

    `action` is stored unqualified; the qualified wire form
    `Device:action` is available as `token`.
    """

    timestamp: datetime
    device: str
    action: str

    def __post_init__(self) -> None:
        if not self.device or not self.action:
            raise ContractError("behavior needs a non-empty device and action")

    @property
    def token(self) -> str:
        return f"{self.device}:{self.action}"

    def to_wire(self) -> dict[str, str]:
        return {"t": format_timestamp(self.timestamp), "d": self.device, "a": self.token}

    @classmethod
    def from_wire(cls, obj: Mapping[str, str]) -> "Behavior":
        action = obj["a"]
        device = obj["d"]
        if ":" in action:
            prefix, _, rest = action.partition(":")
            if prefix != device:
                raise ContractError(f"action prefix {prefix!r} does not match device {device!r}")
            action = rest
        return cls(timestamp=parse_timestamp(obj["t"]), device=device, action=action)


@dataclass(frozen=True)
class BehaviorSequence:
    """Timestamp-ordered, non-empty list of behaviors."""

    behaviors: tuple[Behavior, ...]
    id: str
    origin: Origin

    def __post_init__(self) -> None:
        if not self.behaviors:
            raise ContractError(f"sequence {self.id!r} is empty")
        for prev, cur in zip(self.behaviors, self.behaviors[1:]):
            if cur.timestamp < prev.timestamp:
                raise ContractError(f"sequence {self.id!r} has decreasing timestamps")

    def __len__(self) -> int:
        return len(self.behaviors)

    def tokens(self) -> list[str]:
        return [b.token for b in self.behaviors]

    def with_origin(self, origin: Origin) -> "BehaviorSequence":
        return BehaviorSequence(behaviors=self.behaviors, id=self.id, origin=origin)


@dataclass(frozen=True)
class Dataset:
    """A collection of behavior sequences under one named catalog.

    Sequence ids must be unique; several operations (compression,
    outlier filtering) treat them as set keys.
    """

    sequences: tuple[BehaviorSequence, ...]
    catalog_id: str = ""

    def __post_init__(self) -> None:
        ids = [s.id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise ContractError("dataset has duplicate sequence ids")

    def __len__(self) -> int:
        return len(self.sequences)

    def ids(self) -> list[str]:
        return [s.id for s in self.sequences]

    def total_behaviors(self) -> int:
        return sum(len(s) for s in self.sequences)


@dataclass(frozen=True)
class ContextTransition:
    """A declared environment change the synthetic data must adapt to."""

    kind: TransitionKind
    e_ori: str
    e_new: str

    def __post_init__(self) -> None:
        if self.e_ori == self.e_new:
            raise ContractError("original and new environments must differ")


@dataclass(frozen=True)
class DeviceCatalog:
    """Allowed device -> action mapping.

    An entry of `None` means the device's action set is unconstrained
    (bundled device lists ship without action vocabularies and are meant
    to be user-extended). Explicit action sets must be non-empty.
    """

    name: str
    entries: Mapping[str, frozenset[str] | None]

    def __post_init__(self) -> None:
        for device, actions in self.entries.items():
            if actions is not None and not actions:
                raise ContractError(f"device {device!r} has an empty action set")

    def has_device(self, device: str) -> bool:
        return device in self.entries

    def allows(self, device: str, action: str) -> bool:
        if device not in self.entries:
            return False
        actions = self.entries[device]
        return actions is None or action in actions

    def tokens(self) -> list[str]:
        """All qualified `Device:action` tokens with explicit action sets, sorted."""
        out: list[str] = []
        for device, actions in self.entries.items():
            if actions is not None:
                out.extend(f"{device}:{a}" for a in actions)
        return sorted(out)

    def to_json(self) -> str:
        devices = {
            device: sorted(actions) if actions is not None else []
            for device, actions in self.entries.items()
        }
        return json.dumps({"name": self.name, "devices": devices}, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DeviceCatalog":
        obj = json.loads(text)
        entries: dict[str, frozenset[str] | None] = {}
        for device, actions in obj["devices"].items():
            entries[device] = frozenset(actions) if actions else None
        return cls(name=obj["name"], entries=entries)


def load_catalog(name_or_path: str) -> DeviceCatalog:
    """Load a bundled catalog by name (fr, sp, us, simhome) or any JSON file by path."""
    key = name_or_path.lower()
    if key in BUNDLED_CATALOGS:
        ref = resources.files("homesynth.data.catalogs").joinpath(f"{key}.json")
        return DeviceCatalog.from_json(ref.read_text(encoding="utf-8"))
    path = Path(name_or_path)
    if not path.exists():
        raise ContractError(
            f"catalog {name_or_path!r} is neither a bundled name {BUNDLED_CATALOGS} nor a file"
        )
    return DeviceCatalog.from_json(path.read_text(encoding="utf-8"))


@dataclass(frozen=True)
class RowIssue:
    line_no: int
    raw: str
    reason: str


@dataclass(frozen=True)
class IngestResult:
    dataset: Dataset
    issues: tuple[RowIssue, ...]


def parse_behavior_log(
    text: str,
    *,
    sequence_id: str = "raw-000",
    catalog_id: str = "",
) -> IngestResult:
    """Parse CSV content with header `timestamp,device,action` into a raw dataset.

    Produces a single raw sequence sorted ascending by timestamp (stable
    on ties). Malformed rows are skipped and reported with line numbers;
    a missing header or zero valid rows raises `LogFormatError`.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise LogFormatError("empty input: expected header `timestamp,device,action`") from None
    if [h.strip().lower() for h in header] != ["timestamp", "device", "action"]:
        raise LogFormatError(f"bad header {header!r}: expected `timestamp,device,action`")

    issues: list[RowIssue] = []
    rows: list[tuple[datetime, Behavior]] = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            issues.append(RowIssue(line_no, ",".join(row), "expected 3 columns"))
            continue
        ts_text, device, action = (cell.strip() for cell in row)
        try:
            ts = parse_timestamp(ts_text)
        except ValueError:
            issues.append(RowIssue(line_no, ",".join(row), "unparseable timestamp"))
            continue
        if ":" in action:
            prefix, _, rest = action.partition(":")
            if prefix != device:
                issues.append(RowIssue(line_no, ",".join(row), "action prefix does not match device"))
                continue
            action = rest
        try:
            rows.append((ts, Behavior(timestamp=ts, device=device, action=action)))
        except ContractError as exc:
            issues.append(RowIssue(line_no, ",".join(row), str(exc)))

    if not rows:
        raise LogFormatError("no valid rows: a sequence must be non-empty")
    rows.sort(key=lambda pair: pair[0])  # stable, preserves input order on ties
    seq = BehaviorSequence(
        behaviors=tuple(b for _, b in rows), id=sequence_id, origin=Origin.RAW
    )
    return IngestResult(dataset=Dataset(sequences=(seq,), catalog_id=catalog_id), issues=tuple(issues))


def dataset_to_csv(ds: Dataset) -> str:
    """Serialize all behaviors back to the CSV wire format (qualified actions)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["timestamp", "device", "action"])
    for seq in ds.sequences:
        for b in seq.behaviors:
            writer.writerow([format_timestamp(b.timestamp), b.device, b.token])
    return out.getvalue()


def dataset_to_json(ds: Dataset) -> str:
    obj = {
        "catalog_id": ds.catalog_id,
        "sequences": [
            {"id": s.id, "origin": s.origin.value, "behaviors": [b.to_wire() for b in s.behaviors]}
            for s in ds.sequences
        ],
    }
    return json.dumps(obj, sort_keys=True, indent=2)


def dataset_from_json(text: str) -> Dataset:
    obj = json.loads(text)
    sequences = tuple(
        BehaviorSequence(
            behaviors=tuple(Behavior.from_wire(b) for b in s["behaviors"]),
            id=s["id"],
            origin=Origin(s["origin"]),
        )
        for s in obj["sequences"]
    )
    return Dataset(sequences=sequences, catalog_id=obj.get("catalog_id", ""))


@dataclass(frozen=True)
class Violation:
    sequence_id: str
    index: int
    device: str
    action: str
    reason: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> str:
        return json.dumps(
            {
                "ok": self.ok,
                "violations": [
                    {
                        "sequence_id": v.sequence_id,
                        "index": v.index,
                        "device": v.device,
                        "action": v.action,
                        "reason": v.reason,
                    }
                    for v in self.violations
                ],
            },
            sort_keys=True,
            indent=2,
        )


def validate_against_catalog(ds: Dataset, cat: DeviceCatalog) -> ValidationReport:
    """Report every behavior whose device or action falls outside the catalog.

    Pure reporting: the dataset is never modified and repeated calls
    return the same result.
    """
    violations: list[Violation] = []
    for seq in ds.sequences:
        for index, b in enumerate(seq.behaviors):
            if not cat.has_device(b.device):
                violations.append(Violation(seq.id, index, b.device, b.action, "unknown device"))
            elif not cat.allows(b.device, b.action):
                violations.append(
                    Violation(seq.id, index, b.device, b.action, "action not allowed for device")
                )
    return ValidationReport(violations=tuple(violations))
