import json
from datetime import date, datetime

import pytest

from homesynth.core import (
    ContextTransition,
    ContractError,
    Dataset,
    Origin,
    TransitionKind,
    load_catalog,
    validate_against_catalog,
)
from homesynth.graph import HintSet
from homesynth.synth import (
    EmptyOutputError,
    EndpointError,
    LlmClient,
    LlmClientConfig,
    PromptConfig,
    ResponseParseError,
    TransportError,
    assemble_prompt,
    build_prompt_batches,
    parse_response,
    synthesize,
)

from conftest import token_seq

CAT = load_catalog("simhome")
HINTS = HintSet(k=2, hints=(("Heater:switch_on", (("Light:switch_off", 4),)),))
ST = ContextTransition(kind=TransitionKind.ST, e_ori="winter", e_new="summer")
PCFG = PromptConfig()


def compressed():
    return Dataset(
        sequences=(token_seq(["Heater:switch_on", "Light:switch_off"], sid="c0"),),
        catalog_id="simhome",
    )


def test_prompt_contains_environments_and_format_rule():
    bundle = assemble_prompt(ST, compressed(), CAT, HINTS, PCFG)
    assert "The original environment is winter." in bundle.user_text
    assert "The new environment is summer." in bundle.user_text
    assert "<seq [['...'], ['...'], ['...']] seq>" in bundle.system_text
    assert "Do not generate device states that do not match the device." in bundle.system_text
    assert "[2022-01-03 00:00, Heater:switch_on]" in bundle.user_text
    assert "AirConditioner: switch_off, switch_on" in bundle.user_text
    assert "Light:switch_off (4 times)" in bundle.user_text


def test_prompt_deterministic_bytes():
    a = assemble_prompt(ST, compressed(), CAT, HINTS, PCFG)
    b = assemble_prompt(ST, compressed(), CAT, HINTS, PCFG)
    assert a == b


def test_prompt_changes_with_environment():
    other = ContextTransition(kind=TransitionKind.ST, e_ori="winter", e_new="spring")
    a = assemble_prompt(ST, compressed(), CAT, HINTS, PCFG)
    b = assemble_prompt(other, compressed(), CAT, HINTS, PCFG)
    assert a.user_text != b.user_text


def test_prompt_rejects_empty_dataset():
    with pytest.raises(ContractError):
        assemble_prompt(ST, Dataset(sequences=()), CAT, HINTS, PCFG)


def test_batches_chunk_by_configured_size():
    ds = Dataset(
        sequences=tuple(token_seq(["Light:switch_on"], sid=f"c{i}") for i in range(45)),
        catalog_id="simhome",
    )
    bundles = build_prompt_batches(ST, ds, CAT, HINTS, PromptConfig(batch_sequences=20))
    assert len(bundles) == 3


# -- client ------------------------------------------------------------------


def ok_body(content):
    return json.dumps({"choices": [{"message": {"content": content}}]})


def test_payload_has_two_messages_and_no_key(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "super-secret")
    client = LlmClient(LlmClientConfig())
    bundle = assemble_prompt(ST, compressed(), CAT, HINTS, PCFG)
    payload = client.build_payload(bundle)
    assert [m["role"] for m in payload["messages"]] == ["system", "user"]
    assert "super-secret" not in json.dumps(payload)


def test_retry_then_success(tmp_path):
    calls = []

    def transport(url, headers, payload, timeout):
        calls.append(url)
        if len(calls) < 3:
            raise ConnectionError("flaky network")
        return 200, ok_body("<seq [] seq>")

    client = LlmClient(
        LlmClientConfig(max_retries=3), transport=transport, log_dir=tmp_path, backoff_s=0.0
    )
    bundle = assemble_prompt(ST, compressed(), CAT, HINTS, PCFG)
    assert synthesize(client, bundle) == "<seq [] seq>"
    assert len(calls) == 3
    record = json.loads((tmp_path / "000.json").read_text())
    assert len(record["attempts"]) == 3
    assert "Authorization" not in json.dumps(record)


def test_no_retry_when_max_retries_zero():
    def transport(url, headers, payload, timeout):
        raise ConnectionError("down")

    client = LlmClient(LlmClientConfig(max_retries=0), transport=transport, backoff_s=0.0)
    with pytest.raises(TransportError):
        client.complete(assemble_prompt(ST, compressed(), CAT, HINTS, PCFG))


def test_server_errors_retried_then_transport_error():
    statuses = []

    def transport(url, headers, payload, timeout):
        statuses.append(503)
        return 503, "overloaded"

    client = LlmClient(LlmClientConfig(max_retries=2), transport=transport, backoff_s=0.0)
    with pytest.raises(TransportError):
        client.complete(assemble_prompt(ST, compressed(), CAT, HINTS, PCFG))
    assert len(statuses) == 3


def test_client_error_is_terminal():
    calls = []

    def transport(url, headers, payload, timeout):
        calls.append(1)
        return 401, "bad key"

    client = LlmClient(LlmClientConfig(max_retries=5), transport=transport, backoff_s=0.0)
    with pytest.raises(EndpointError) as err:
        client.complete(assemble_prompt(ST, compressed(), CAT, HINTS, PCFG))
    assert err.value.status == 401
    assert len(calls) == 1


def test_api_key_sent_as_bearer_header_only(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "super-secret")
    seen = {}

    def transport(url, headers, payload, timeout):
        seen.update(headers=headers, payload=payload)
        return 200, ok_body("x")

    client = LlmClient(LlmClientConfig(), transport=transport)
    client.complete(assemble_prompt(ST, compressed(), CAT, HINTS, PCFG))
    assert seen["headers"]["Authorization"] == "Bearer super-secret"
    assert "super-secret" not in json.dumps(seen["payload"])


# -- response parsing -------------------------------------------------------


def test_parse_single_valid_sequence():
    raw = "<seq [['2022-08-04 18:30, AirConditioner, AirConditioner:switch_on']] seq>"
    ds, report = parse_response(raw, CAT)
    assert report.parsed_sequences == 1
    assert not report.dropped_behaviors
    (seq,) = ds.sequences
    assert seq.origin is Origin.SYNTHETIC
    (b,) = seq.behaviors
    assert (b.timestamp, b.device, b.action) == (
        datetime(2022, 8, 4, 18, 30),
        "AirConditioner",
        "switch_on",
    )


def test_parse_unknown_device_drops_then_empty_error():
    raw = "<seq [['2022-08-04 18:30, Teleporter, Teleporter:engage']] seq>"
    with pytest.raises(EmptyOutputError) as err:
        parse_response(raw, CAT)
    assert err.value.report.dropped_behaviors == (
        ("2022-08-04 18:30, Teleporter, Teleporter:engage", "unknown device"),
    )


def test_parse_requires_markers():
    with pytest.raises(ResponseParseError):
        parse_response("no markers here", CAT)


def test_parse_drop_reasons():
    raw = (
        "<seq ["
        "['2022-08-04 18:30, Light, Light:switch_on', "
        "'whenever, Light, Light:switch_on', "
        "'2022-08-04 18:31, Light, Heater:switch_on', "
        "'2022-08-04 18:32, Light, Light:levitate', "
        "'garbage entry']"
        "] seq>"
    )
    ds, report = parse_response(raw, CAT)
    assert len(ds.sequences[0]) == 1
    assert [reason for _, reason in report.dropped_behaviors] == [
        "bad timestamp",
        "action/device mismatch",
        "action/device mismatch",
        "malformed entry",
    ]


def test_parse_hh_mm_uses_default_date():
    raw = "<seq [['07:45, Light, Light:switch_on']] seq>"
    ds, _ = parse_response(raw, CAT, default_date=date(2023, 2, 1))
    assert ds.sequences[0].behaviors[0].timestamp == datetime(2023, 2, 1, 7, 45)


def test_parse_sorts_behaviors_and_survives_prose():
    raw = (
        "Sure! Here are the sequences you asked for:\n"
        "<seq [['2022-08-04 19:00, Light, Light:switch_off', "
        "'2022-08-04 18:00, Light, Light:switch_on']] seq>\nHope this helps."
    )
    ds, _ = parse_response(raw, CAT)
    hours = [b.timestamp.hour for b in ds.sequences[0].behaviors]
    assert hours == [18, 19]


def test_parse_salvages_sloppy_brackets():
    raw = (
        "<seq [['2022-08-04 18:00, Light, Light:switch_on'], "
        "['2022-08-04 19:00, Fan, Fan:switch_on'],,] seq>"
    )
    ds, report = parse_response(raw, CAT)
    assert report.parsed_sequences == 2


def test_parse_output_is_catalog_valid():
    raw = (
        "<seq [['2022-08-04 18:00, Light, Light:switch_on', "
        "'2022-08-04 19:00, Fan, Fan:switch_on']] seq>"
    )
    ds, _ = parse_response(raw, CAT)
    assert validate_against_catalog(ds, CAT).ok


def test_parse_fresh_unique_ids():
    raw = (
        "<seq [['2022-08-04 18:00, Light, Light:switch_on'], "
        "['2022-08-04 19:00, Fan, Fan:switch_on']] seq>"
    )
    ds, _ = parse_response(raw, CAT, id_prefix="batch7")
    assert ds.ids() == ["batch7-0000", "batch7-0001"]
