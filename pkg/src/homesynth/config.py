"""Run configuration: a single INI file drives the whole pipeline.

Every paper-tunable knob (split windows, compression threshold, hint
depth, sampling temperature) lives here; subcommand flags override
individual fields. Per-stage seeds are derived from the master seed by
hashing the stage name, so stages are independently reproducible.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

from .core import ContractError, TransitionKind
from .segment import PairRule, SplitConfig
from .seqmodel import ModelConfig
from .synth import LlmClientConfig, PromptConfig


class ConfigError(ValueError):
    """The run configuration is unusable (missing files, bad values)."""


def stage_seed(master_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class SimulateConfig:
    season: str = "winter"
    schedule: str = "day"
    occupants: str = "1"
    days: int = 40
    noise_rate: float = 0.02


@dataclass(frozen=True)
class TofSettings:
    max_evaluated_outliers: int | None = None


@dataclass(frozen=True)
class EvalSettings:
    enabled: bool = False
    rates: tuple[float, ...] = (0.2, 0.5)
    anomaly_detection: bool = True
    behavior_prediction: bool = True
    target_days: int = 20


@dataclass(frozen=True)
class RunConfig:
    output_dir: Path
    master_seed: int = 7
    input_log: Path | None = None  # None means: simulate the corpus
    catalog: str = "simhome"
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    context_kind: TransitionKind = TransitionKind.ST
    e_ori: str = "winter"
    e_new: str = "summer"
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    alpha: float = 0.9
    hints_k: int = 5
    hint_budget: int = 60
    llm: LlmClientConfig = field(default_factory=LlmClientConfig)
    temperature: float = 0.7
    max_output_tokens: int = 2048
    batch_sequences: int = 20
    synthetic_date: date = date(2022, 8, 4)
    tof: TofSettings = field(default_factory=TofSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def prompt_config(self) -> PromptConfig:
        return PromptConfig(
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            hint_budget=self.hint_budget,
            batch_sequences=self.batch_sequences,
        )

    def model_for_stage(self, stage: str) -> ModelConfig:
        m = self.model
        return ModelConfig(
            embed_dim=m.embed_dim,
            heads=m.heads,
            layers=m.layers,
            ffn_dim=m.ffn_dim,
            max_len=m.max_len,
            mask_ratio=m.mask_ratio,
            epochs=m.epochs,
            batch_size=m.batch_size,
            learning_rate=m.learning_rate,
            seed=stage_seed(self.master_seed, stage),
        )


def _parse_pair_rules(raw: str) -> tuple[PairRule, ...]:
    rules: list[PairRule] = []
    for line in raw.splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split(":")
        if len(parts) != 3:
            raise ConfigError(f"pair rule {line!r} must be Device:opener:closer")
        rules.append(PairRule(device=parts[0], opener=parts[1], closer=parts[2]))
    return tuple(rules)


def _hours(value: str) -> timedelta:
    return timedelta(hours=float(value))


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate the INI run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    def get(section: str, option: str, default: str) -> str:
        return parser.get(section, option, fallback=default)

    try:
        run_sec = "run"
        output_dir = Path(get(run_sec, "output_dir", "runs/out"))
        master_seed = parser.getint(run_sec, "master_seed", fallback=7)

        input_log_raw = get("input", "log", "").strip()
        input_log = Path(input_log_raw) if input_log_raw else None
        catalog = get("input", "catalog", "simhome")

        simulate = SimulateConfig(
            season=get("simulate", "season", "winter"),
            schedule=get("simulate", "schedule", "day"),
            occupants=get("simulate", "occupants", "1"),
            days=parser.getint("simulate", "days", fallback=40),
            noise_rate=parser.getfloat("simulate", "noise_rate", fallback=0.02),
        )

        context_kind = TransitionKind(get("context", "kind", "ST").upper())
        e_ori = get("context", "original", "winter")
        e_new = get("context", "new", "summer")

        dt_max = _hours(get("split", "dt_max_hours", "9"))
        grace_raw = get("split", "grace_hours", "").strip()
        split = SplitConfig(
            dt_max=dt_max,
            t_max=_hours(get("split", "t_max_hours", "24")),
            pairing=_parse_pair_rules(get("split", "pair_rules", "")),
            grace=_hours(grace_raw) if grace_raw else None,
        )

        model = ModelConfig(
            embed_dim=parser.getint("model", "embed_dim", fallback=64),
            heads=parser.getint("model", "heads", fallback=2),
            layers=parser.getint("model", "layers", fallback=2),
            ffn_dim=parser.getint("model", "ffn_dim", fallback=128),
            max_len=parser.getint("model", "max_len", fallback=128),
            mask_ratio=parser.getfloat("model", "mask_ratio", fallback=0.25),
            epochs=parser.getint("model", "epochs", fallback=30),
            batch_size=parser.getint("model", "batch_size", fallback=16),
            learning_rate=parser.getfloat("model", "learning_rate", fallback=1e-3),
            seed=0,  # replaced per stage
        )

        alpha = parser.getfloat("compress", "alpha", fallback=0.9)
        hints_k = parser.getint("hints", "k", fallback=5)
        hint_budget = parser.getint("hints", "budget", fallback=60)

        llm = LlmClientConfig(
            base_url=get("llm", "base_url", "http://localhost:8000/v1"),
            model_name=get("llm", "model_name", "gpt-4o"),
            api_key_env=get("llm", "api_key_env", "LLM_API_KEY"),
            timeout_s=parser.getfloat("llm", "timeout_s", fallback=60.0),
            max_retries=parser.getint("llm", "max_retries", fallback=3),
            parallel_requests=parser.getint("llm", "parallel_requests", fallback=1),
        )
        temperature = parser.getfloat("llm", "temperature", fallback=0.7)
        max_output_tokens = parser.getint("llm", "max_output_tokens", fallback=2048)
        batch_sequences = parser.getint("llm", "batch_sequences", fallback=20)
        synthetic_date = date.fromisoformat(get("llm", "synthetic_date", "2022-08-04"))

        max_out_raw = get("tof", "max_evaluated_outliers", "").strip()
        tof = TofSettings(max_evaluated_outliers=int(max_out_raw) if max_out_raw else None)

        rates_raw = get("eval", "rates", "0.2, 0.5")
        rates = tuple(float(r) for r in rates_raw.split(",") if r.strip())
        eval_settings = EvalSettings(
            enabled=parser.getboolean("eval", "enabled", fallback=False),
            rates=rates,
            anomaly_detection=parser.getboolean("eval", "ad", fallback=True),
            behavior_prediction=parser.getboolean("eval", "bp", fallback=True),
            target_days=parser.getint("eval", "target_days", fallback=20),
        )
    except (ValueError, ContractError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    if input_log is not None and not input_log.exists():
        raise ConfigError(f"input log {input_log} does not exist")

    return RunConfig(
        output_dir=output_dir,
        master_seed=master_seed,
        input_log=input_log,
        catalog=catalog,
        simulate=simulate,
        context_kind=context_kind,
        e_ori=e_ori,
        e_new=e_new,
        split=split,
        model=model,
        alpha=alpha,
        hints_k=hints_k,
        hint_budget=hint_budget,
        llm=llm,
        temperature=temperature,
        max_output_tokens=max_output_tokens,
        batch_sequences=batch_sequences,
        synthetic_date=synthetic_date,
        tof=tof,
        eval=eval_settings,
    )


def config_snapshot(cfg: RunConfig) -> dict:
    """JSON-safe dump of the effective configuration for the manifest."""
    return {
        "output_dir": str(cfg.output_dir),
        "master_seed": cfg.master_seed,
        "input_log": str(cfg.input_log) if cfg.input_log else None,
        "catalog": cfg.catalog,
        "simulate": {
            "season": cfg.simulate.season,
            "schedule": cfg.simulate.schedule,
            "occupants": cfg.simulate.occupants,
            "days": cfg.simulate.days,
            "noise_rate": cfg.simulate.noise_rate,
        },
        "context": {"kind": cfg.context_kind.value, "original": cfg.e_ori, "new": cfg.e_new},
        "split": {
            "dt_max_hours": cfg.split.dt_max.total_seconds() / 3600,
            "t_max_hours": cfg.split.t_max.total_seconds() / 3600,
            "grace_hours": cfg.split.effective_grace.total_seconds() / 3600,
            "pair_rules": [f"{r.device}:{r.opener}:{r.closer}" for r in cfg.split.pairing],
        },
        "model": {
            "embed_dim": cfg.model.embed_dim,
            "heads": cfg.model.heads,
            "layers": cfg.model.layers,
            "ffn_dim": cfg.model.ffn_dim,
            "max_len": cfg.model.max_len,
            "mask_ratio": cfg.model.mask_ratio,
            "epochs": cfg.model.epochs,
            "batch_size": cfg.model.batch_size,
            "learning_rate": cfg.model.learning_rate,
        },
        "compress": {"alpha": cfg.alpha},
        "hints": {"k": cfg.hints_k, "budget": cfg.hint_budget},
        "llm": {
            "base_url": cfg.llm.base_url,
            "model_name": cfg.llm.model_name,
            "api_key_env": cfg.llm.api_key_env,
            "timeout_s": cfg.llm.timeout_s,
            "max_retries": cfg.llm.max_retries,
            "parallel_requests": cfg.llm.parallel_requests,
            "temperature": cfg.temperature,
            "max_output_tokens": cfg.max_output_tokens,
            "batch_sequences": cfg.batch_sequences,
            "synthetic_date": cfg.synthetic_date.isoformat(),
        },
        "tof": {"max_evaluated_outliers": cfg.tof.max_evaluated_outliers},
        "eval": {
            "enabled": cfg.eval.enabled,
            "rates": list(cfg.eval.rates),
            "ad": cfg.eval.anomaly_detection,
            "bp": cfg.eval.behavior_prediction,
            "target_days": cfg.eval.target_days,
        },
    }
