from datetime import datetime

import pytest

from homesynth.core import (
    Behavior,
    BehaviorSequence,
    ContractError,
    Dataset,
    DeviceCatalog,
    ContextTransition,
    LogFormatError,
    Origin,
    TransitionKind,
    dataset_from_json,
    dataset_to_csv,
    dataset_to_json,
    load_catalog,
    parse_behavior_log,
    validate_against_catalog,
)

CSV = "timestamp,device,action\n"


def test_parse_single_row_example():
    result = parse_behavior_log(CSV + "2022-08-04 18:30,AirConditioner,AirConditioner:switch_on\n")
    (seq,) = result.dataset.sequences
    (b,) = seq.behaviors
    assert b.timestamp == datetime(2022, 8, 4, 18, 30)
    assert b.device == "AirConditioner"
    assert b.action == "switch_on"
    assert b.token == "AirConditioner:switch_on"
    assert seq.origin is Origin.RAW


def test_parse_header_only_rejected():
    with pytest.raises(LogFormatError):
        parse_behavior_log(CSV)


def test_parse_missing_header_rejected():
    with pytest.raises(LogFormatError):
        parse_behavior_log("2022-08-04 18:30,Light,Light:switch_on\n")


def test_parse_sorts_out_of_order_rows():
    text = CSV + (
        "2022-08-04 19:00,Light,Light:switch_off\n"
        "2022-08-04 18:30,Light,Light:switch_on\n"
    )
    (seq,) = parse_behavior_log(text).dataset.sequences
    assert [b.timestamp.minute for b in seq.behaviors] == [30, 0]
    assert [b.action for b in seq.behaviors] == ["switch_on", "switch_off"]


def test_parse_bad_rows_reported_with_line_numbers():
    text = CSV + (
        "2022-08-04 18:30,Light,Light:switch_on\n"
        "not-a-time,Light,Light:switch_on\n"
        "2022-08-04 19:00,Light,Heater:switch_on\n"
        "2022-08-04 19:30,Light\n"
    )
    result = parse_behavior_log(text)
    assert len(result.dataset.sequences[0]) == 1
    assert [(i.line_no, i.reason) for i in result.issues] == [
        (3, "unparseable timestamp"),
        (4, "action prefix does not match device"),
        (5, "expected 3 columns"),
    ]


def test_csv_round_trip_up_to_ordering():
    text = CSV + (
        "2022-08-04 19:00,Light,Light:switch_off\n"
        "2022-08-04 18:30,Heater,Heater:switch_on\n"
    )
    ds = parse_behavior_log(text).dataset
    out = dataset_to_csv(ds)
    assert sorted(out.splitlines()) == sorted(text.splitlines())


def test_json_round_trip_exact():
    ds = parse_behavior_log(
        CSV + "2022-08-04 18:30,AirConditioner,AirConditioner:switch_on\n",
        sequence_id="log-1",
        catalog_id="simhome",
    ).dataset
    again = dataset_from_json(dataset_to_json(ds))
    assert again == ds
    assert dataset_to_json(again) == dataset_to_json(ds)


def test_sequence_invariants():
    b1 = Behavior(datetime(2022, 1, 1, 10, 0), "Light", "switch_on")
    b0 = Behavior(datetime(2022, 1, 1, 9, 0), "Light", "switch_off")
    with pytest.raises(ContractError):
        BehaviorSequence(behaviors=(), id="empty", origin=Origin.RAW)
    with pytest.raises(ContractError):
        BehaviorSequence(behaviors=(b1, b0), id="bad", origin=Origin.RAW)
    # equal timestamps are fine (non-decreasing)
    BehaviorSequence(behaviors=(b0, b0), id="tie", origin=Origin.RAW)


def test_dataset_rejects_duplicate_ids():
    s = BehaviorSequence(
        behaviors=(Behavior(datetime(2022, 1, 1, 9, 0), "Light", "switch_on"),),
        id="dup",
        origin=Origin.RAW,
    )
    with pytest.raises(ContractError):
        Dataset(sequences=(s, s))


def test_context_transition_requires_change():
    with pytest.raises(ContractError):
        ContextTransition(kind=TransitionKind.ST, e_ori="winter", e_new="winter")


def test_bundled_catalog_sizes():
    assert len(load_catalog("fr").entries) == 33
    assert len(load_catalog("sp").entries) == 34
    assert len(load_catalog("us").entries) == 40


def test_validate_heater_valid_under_fr():
    fr = load_catalog("fr")
    ds = Dataset(
        sequences=(
            BehaviorSequence(
                behaviors=(Behavior(datetime(2022, 1, 1, 8, 0), "Heater", "switch_on"),),
                id="s",
                origin=Origin.RAW,
            ),
        ),
        catalog_id="FR",
    )
    assert validate_against_catalog(ds, fr).ok


def test_validate_unknown_device_flagged():
    fr = load_catalog("fr")
    ds = Dataset(
        sequences=(
            BehaviorSequence(
                behaviors=(Behavior(datetime(2022, 1, 1, 8, 0), "Teleporter", "engage"),),
                id="s",
                origin=Origin.RAW,
            ),
        )
    )
    report = validate_against_catalog(ds, fr)
    assert [v.reason for v in report.violations] == ["unknown device"]
    assert report.violations[0].sequence_id == "s"
    assert report.violations[0].index == 0


def test_validate_action_outside_explicit_set():
    cat = DeviceCatalog(name="t", entries={"Light": frozenset({"switch_on"})})
    ds = Dataset(
        sequences=(
            BehaviorSequence(
                behaviors=(Behavior(datetime(2022, 1, 1, 8, 0), "Light", "explode"),),
                id="s",
                origin=Origin.RAW,
            ),
        )
    )
    assert [v.reason for v in validate_against_catalog(ds, cat).violations] == [
        "action not allowed for device"
    ]


def test_validate_is_idempotent(sim_corpus):
    cat = load_catalog("simhome")
    first = validate_against_catalog(sim_corpus, cat)
    second = validate_against_catalog(sim_corpus, cat)
    assert first == second
    assert first.ok


def test_catalog_rejects_explicit_empty_action_set():
    with pytest.raises(ContractError):
        DeviceCatalog(name="t", entries={"Light": frozenset()})


def test_catalog_json_round_trip():
    cat = load_catalog("simhome")
    again = DeviceCatalog.from_json(cat.to_json())
    assert again == cat
