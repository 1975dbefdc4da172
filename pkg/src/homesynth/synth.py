"""Prompt assembly, chat-completions client, and response parsing.

The endpoint speaks the OpenAI-compatible chat-completions protocol
(the de facto standard also served by local inference servers). The
request always carries exactly two messages: the fixed system
instructions and a user message with the scene, the sequences, the
device states and the habit hints.
"""

from __future__ import annotations

import ast
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path
from typing import Callable, Sequence

from .core import (
    Behavior,
    BehaviorSequence,
    ContextTransition,
    ContractError,
    Dataset,
    DeviceCatalog,
    Origin,
    format_timestamp,
)
from .graph import HintSet, hint_lines

SEQ_OPEN = "<seq"
SEQ_CLOSE = "seq>"

SYSTEM_ROLE = (
    "You're an IoT expert. You are very knowledgeable about user behavior and habits in "
    "smart homes. The user would like to ask you about the possible changes in user "
    "behavior sequence after the change of smart home user habits and env."
)
SYSTEM_BACKGROUND = (
    "The user will provide you with the user's previous life environment and the changed "
    "environment, the user's previous behavior sequence, and a devices set and device "
    "states. And the user hope that you can use these devices and states to generate "
    "possible user behavior sequences after the env changes based on the original user "
    "behavior sequence."
)
SYSTEM_TASK = (
    "Your task: First, select the possible new device states from the set of devices and "
    "device states which are also possible new user behaviors. The second step is to "
    "reasonably add possible new user behaviors to the original user behavior sequences. "
    "The third step is to reasonably continue and expand the sequence based on user "
    "behavior habits."
)
SYSTEM_REQUIREMENTS = (
    "Please consider the devices that will be used in the new environment as widely as "
    "possible based on the set of devices.",
    "Please strictly follow the correspondence between the devices and device states to "
    "generate. Do not generate device states that do not match the device.",
    "Please add as many new devices and device behaviors as possible to better adapt to "
    "changes in the environment.",
    "Please make sure that the generated sequence is not a single behavior, but a sequence "
    "of consecutive behaviors.",
    "Please also generate reasonable behavior time when generating, not just a single "
    "behavior.",
    "The final generated behavior sequences set is in the format of "
    "<seq [['...'], ['...'], ['...']] seq>. Each entry is "
    "'timestamp, Device, Device:state' with a YYYY-MM-DD HH:MM timestamp.",
)

DROP_UNKNOWN_DEVICE = "unknown device"
DROP_MISMATCH = "action/device mismatch"
DROP_BAD_TIMESTAMP = "bad timestamp"
DROP_MALFORMED = "malformed entry"


class TransportError(RuntimeError):
    """All attempts failed at the transport level."""


class EndpointError(RuntimeError):
    """The endpoint answered with a terminal non-2xx status."""

    def __init__(self, status: int, body: str) -> None:
        super().__init__(f"endpoint returned status {status}")
        self.status = status
        self.body = body


class ResponseParseError(ValueError):
    """The response carries no usable `<seq ... seq>` block."""


class EmptyOutputError(ValueError):
    """Every generated entry was dropped during validation."""

    def __init__(self, message: str, report: "ParseReport") -> None:
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    temperature: float
    max_output_tokens: int


@dataclass(frozen=True)
class LlmClientConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "gpt-4o"
    api_key_env: str = "LLM_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 3
    parallel_requests: int = 1

    def __post_init__(self) -> None:
        if self.parallel_requests < 1:
            raise ContractError("parallel_requests must be >= 1")
        if self.max_retries < 0:
            raise ContractError("max_retries must be >= 0")


@dataclass(frozen=True)
class ParseReport:
    parsed_sequences: int
    dropped_behaviors: tuple[tuple[str, str], ...]
    marker_found: bool

    def to_json_obj(self) -> dict:
        return {
            "parsed_sequences": self.parsed_sequences,
            "dropped_behaviors": [list(pair) for pair in self.dropped_behaviors],
            "marker_found": self.marker_found,
        }


@dataclass(frozen=True)
class PromptConfig:
    temperature: float = 0.7
    max_output_tokens: int = 2048
    hint_budget: int = 60
    batch_sequences: int = 20


def render_sequences(ds: Dataset) -> str:
    blocks: list[str] = []
    for idx, seq in enumerate(ds.sequences, start=1):
        lines = [f"Sequence {idx}:"]
        lines.extend(f"[{format_timestamp(b.timestamp)}, {b.token}]" for b in seq.behaviors)
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


def render_catalog(cat: DeviceCatalog) -> str:
    lines: list[str] = []
    for device in sorted(cat.entries):
        actions = cat.entries[device]
        if actions is None:
            lines.append(f"{device}: (any state)")
        else:
            lines.append(f"{device}: " + ", ".join(sorted(actions)))
    return "\n".join(lines)


def assemble_prompt(
    ct: ContextTransition,
    compressed: Dataset,
    cat: DeviceCatalog,
    hints: HintSet,
    cfg: PromptConfig,
) -> PromptBundle:
    """Build the deterministic prompt pair for one batch of sequences."""
    if len(compressed) == 0:
        raise ContractError("cannot assemble a prompt from zero sequences")
    system_text = "\n\n".join(
        [SYSTEM_ROLE, SYSTEM_BACKGROUND, SYSTEM_TASK, "Requirements:"]
        + [f"- {req}" for req in SYSTEM_REQUIREMENTS]
    )
    habit_block = "\n".join(hint_lines(hints, cfg.hint_budget)) or "(no habit statistics available)"
    user_text = (
        f"The original environment is {ct.e_ori}.\n"
        f"The new environment is {ct.e_new}.\n\n"
        "The user's previous sequence of behavior:\n"
        f"{render_sequences(compressed)}\n\n"
        "The set of the possible device and device states:\n"
        f"{render_catalog(cat)}\n\n"
        "Frequent user habits observed in the original data:\n"
        f"{habit_block}\n"
    )
    return PromptBundle(
        system_text=system_text,
        user_text=user_text,
        temperature=cfg.temperature,
        max_output_tokens=cfg.max_output_tokens,
    )


def build_prompt_batches(
    ct: ContextTransition,
    compressed: Dataset,
    cat: DeviceCatalog,
    hints: HintSet,
    cfg: PromptConfig,
) -> list[PromptBundle]:
    """Chunk the compressed dataset into prompts of at most batch_sequences."""
    bundles: list[PromptBundle] = []
    seqs = compressed.sequences
    for start in range(0, len(seqs), cfg.batch_sequences):
        chunk = Dataset(
            sequences=seqs[start : start + cfg.batch_sequences], catalog_id=compressed.catalog_id
        )
        bundles.append(assemble_prompt(ct, chunk, cat, hints, cfg))
    return bundles


# transport(url, headers, payload, timeout_s) -> (status_code, body_text)
Transport = Callable[[str, dict, dict, float], tuple[int, str]]


def _requests_transport(url: str, headers: dict, payload: dict, timeout_s: float) -> tuple[int, str]:
    import requests

    resp = requests.post(url, headers=headers, json=payload, timeout=timeout_s)
    return resp.status_code, resp.text


class LlmClient:
    """Chat-completions client with retry/backoff and transcript logging.

    Transient failures (transport errors and 5xx statuses) are retried
    with exponential backoff up to max_retries additional attempts;
    other non-2xx statuses fail immediately. The API key is read from
    the configured environment variable at call time and never appears
    in payloads or transcripts.
    """

    def __init__(
        self,
        config: LlmClientConfig,
        transport: Transport | None = None,
        log_dir: str | Path | None = None,
        backoff_s: float = 0.5,
    ) -> None:
        self.config = config
        self.transport = transport or _requests_transport
        self.log_dir = Path(log_dir) if log_dir else None
        self.backoff_s = backoff_s
        self._log_counter = 0

    def build_payload(self, bundle: PromptBundle) -> dict:
        return {
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.user_text},
            ],
            "temperature": bundle.temperature,
            "max_tokens": bundle.max_output_tokens,
        }

    def complete(self, bundle: PromptBundle) -> str:
        import os

        url = self.config.base_url.rstrip("/") + "/chat/completions"
        payload = self.build_payload(bundle)
        api_key = os.environ.get(self.config.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        attempts: list[dict] = []
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                status, body = self.transport(url, headers, payload, self.config.timeout_s)
            except Exception as exc:  # transport-level failure, retryable
                attempts.append({"attempt": attempt + 1, "error": repr(exc)})
                last_error = exc
                continue
            attempts.append({"attempt": attempt + 1, "status": status})
            if 200 <= status < 300:
                content = self._extract_content(body)
                self._log(payload, attempts, content)
                return content
            if status >= 500:
                last_error = EndpointError(status, body)
                continue
            self._log(payload, attempts, None)
            raise EndpointError(status, body)

        self._log(payload, attempts, None)
        raise TransportError(f"all {self.config.max_retries + 1} attempts failed: {last_error!r}")

    @staticmethod
    def _extract_content(body: str) -> str:
        try:
            obj = json.loads(body)
            return obj["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise EndpointError(200, f"unexpected response shape: {exc}") from exc

    def _log(self, payload: dict, attempts: list[dict], content: str | None) -> None:
        if self.log_dir is None:
            return
        self.log_dir.mkdir(parents=True, exist_ok=True)
        record = {"request": payload, "attempts": attempts, "response_text": content}
        path = self.log_dir / f"{self._log_counter:03d}.json"
        path.write_text(json.dumps(record, sort_keys=True, indent=2), encoding="utf-8")
        self._log_counter += 1


def synthesize(client, bundle: PromptBundle) -> str:
    """Fetch the raw assistant message for one prompt bundle."""
    return client.complete(bundle)


def synthesize_batches(client, bundles: Sequence[PromptBundle], parallel: int = 1) -> list[str]:
    """Run one request per bundle; results come back in bundle order."""
    if parallel <= 1 or len(bundles) <= 1:
        return [synthesize(client, b) for b in bundles]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(lambda b: synthesize(client, b), bundles))


_QUOTED = re.compile(r"'([^']*)'|\"([^\"]*)\"")
_LEAF_LIST = re.compile(r"\[([^\[\]]+)\]")


def _entry_groups(inner: str) -> list[list[str]]:
    """Sequence groups of entry strings from the bracketed payload."""
    try:
        parsed = ast.literal_eval(inner.strip())
    except (ValueError, SyntaxError):
        parsed = None
    if isinstance(parsed, list) and all(isinstance(group, (list, tuple)) for group in parsed):
        return [[str(entry) for entry in group] for group in parsed]
    # salvage path: pull quoted strings out of each innermost bracket group
    groups: list[list[str]] = []
    for m in _LEAF_LIST.finditer(inner):
        entries = ["".join(pair) for pair in _QUOTED.findall(m.group(1))]
        if entries:
            groups.append(entries)
    return groups


def _parse_entry(
    entry: str, cat: DeviceCatalog, default_date: date
) -> tuple[Behavior | None, str | None]:
    parts = [p.strip() for p in entry.split(",")]
    if len(parts) != 3:
        return None, DROP_MALFORMED
    ts_text, device, qualified = parts
    ts: datetime | None = None
    for fmt in ("%Y-%m-%d %H:%M", "%H:%M"):
        try:
            parsed = datetime.strptime(ts_text, fmt)
            ts = parsed if fmt != "%H:%M" else parsed.replace(
                year=default_date.year, month=default_date.month, day=default_date.day
            )
            break
        except ValueError:
            continue
    if ts is None:
        return None, DROP_BAD_TIMESTAMP
    if not cat.has_device(device):
        return None, DROP_UNKNOWN_DEVICE
    action = qualified
    if ":" in qualified:
        prefix, _, rest = qualified.partition(":")
        if prefix != device:
            return None, DROP_MISMATCH
        action = rest
    if not action or not cat.allows(device, action):
        return None, DROP_MISMATCH
    return Behavior(timestamp=ts, device=device, action=action), None


def parse_response(
    raw: str,
    cat: DeviceCatalog,
    *,
    id_prefix: str = "synth",
    default_date: date = date(2022, 8, 4),
) -> tuple[Dataset, ParseReport]:
    """Parse the text between the first `<seq` and last `seq>` markers.

    Invalid entries are dropped and reported rather than failing the
    batch; behaviors inside a sequence are sorted by timestamp. Raises
    `ResponseParseError` when the markers are absent and
    `EmptyOutputError` when nothing valid survives.
    """
    start = raw.find(SEQ_OPEN)
    end = raw.rfind(SEQ_CLOSE)
    if start == -1 or end == -1 or end <= start:
        raise ResponseParseError("response has no <seq ... seq> block")
    inner = raw[start + len(SEQ_OPEN) : end]

    dropped: list[tuple[str, str]] = []
    sequences: list[BehaviorSequence] = []
    for group in _entry_groups(inner):
        behaviors: list[Behavior] = []
        for entry in group:
            behavior, reason = _parse_entry(entry, cat, default_date)
            if behavior is None:
                dropped.append((entry, reason or DROP_MALFORMED))
            else:
                behaviors.append(behavior)
        if not behaviors:
            continue
        behaviors.sort(key=lambda b: b.timestamp)
        sequences.append(
            BehaviorSequence(
                behaviors=tuple(behaviors),
                id=f"{id_prefix}-{len(sequences):04d}",
                origin=Origin.SYNTHETIC,
            )
        )

    report = ParseReport(
        parsed_sequences=len(sequences), dropped_behaviors=tuple(dropped), marker_found=True
    )
    if not sequences:
        raise EmptyOutputError("no valid sequences in response", report)
    return Dataset(sequences=tuple(sequences), catalog_id=cat.name), report
