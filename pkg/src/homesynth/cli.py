"""Command-line interface.

One subcommand per pipeline step plus `run` for the whole chain. Every
step reads and writes artifacts in the run directory, so steps can be
re-run individually. Exit codes: 0 success, 2 configuration error,
3 stage failure, 4 endpoint failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import timedelta
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .core import ContractError, dataset_from_json, dataset_to_csv, load_catalog
from .pipeline import Pipeline, StageFailure, run_pipeline
from .synth import EndpointError, TransportError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_ENDPOINT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="homesynth",
        description="Context-aware smart-home behavior sequence synthesis pipeline",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="INI run configuration file")
        p.add_argument("--out", help="run directory (overrides config)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--catalog", help="catalog name (fr/sp/us/simhome) or JSON path")

    p = sub.add_parser("ingest", help="parse a CSV behavior log into the run directory")
    common(p)
    p.add_argument("--input", help="CSV log with header timestamp,device,action")

    p = sub.add_parser("simulate", help="generate a simulator corpus as the run input")
    common(p)
    p.add_argument("--season", choices=["winter", "summer"])
    p.add_argument("--schedule", choices=["day", "night"])
    p.add_argument("--occupants", choices=["1", "2+"])
    p.add_argument("--days", type=int)
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--csv", help="also export the corpus as CSV to this path")

    p = sub.add_parser("split", help="segment raw sequences")
    common(p)
    p.add_argument("--dt-max-hours", type=float)
    p.add_argument("--t-max-hours", type=float)
    p.add_argument("--grace-hours", type=float)

    p = sub.add_parser("compress", help="train the embedder (if needed) and deduplicate")
    common(p)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("hints", help="build the transition graph hint file")
    common(p)
    p.add_argument("--k", type=int)

    p = sub.add_parser("synthesize", help="assemble prompts, call the endpoint, parse output")
    common(p)
    p.add_argument("--mock-llm", action="store_true", help="use the offline mock endpoint")
    p.add_argument("--temperature", type=float)
    p.add_argument("--batch-sequences", type=int)

    p = sub.add_parser("filter", help="two-stage outlier filtering of the synthetic data")
    common(p)
    p.add_argument("--max-outliers", type=int, help="cap on per-outlier retrainings")

    p = sub.add_parser("eval", help="evaluation reports and figures")
    common(p)
    p.add_argument("--rates", help="comma-separated retention rates for the comparison")

    p = sub.add_parser("run", help="execute the full pipeline")
    common(p)
    p.add_argument("--mock-llm", action="store_true", help="use the offline mock endpoint")
    p.add_argument("--resume", action="store_true", help="skip stages with fresh outputs")

    return parser


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates: dict = {}
    if args.out:
        updates["output_dir"] = Path(args.out)
    if args.seed is not None:
        updates["master_seed"] = args.seed
    if args.catalog:
        updates["catalog"] = args.catalog
    if getattr(args, "input", None):
        updates["input_log"] = Path(args.input)
    if getattr(args, "alpha", None) is not None:
        updates["alpha"] = args.alpha
    if getattr(args, "k", None) is not None:
        updates["hints_k"] = args.k
    if getattr(args, "temperature", None) is not None:
        updates["temperature"] = args.temperature
    if getattr(args, "batch_sequences", None) is not None:
        updates["batch_sequences"] = args.batch_sequences
    if getattr(args, "rates", None):
        updates["eval"] = dataclasses.replace(
            cfg.eval, enabled=True, rates=tuple(float(r) for r in args.rates.split(","))
        )
    if getattr(args, "max_outliers", None) is not None:
        updates["tof"] = dataclasses.replace(cfg.tof, max_evaluated_outliers=args.max_outliers)

    split_updates: dict = {}
    if getattr(args, "dt_max_hours", None) is not None:
        split_updates["dt_max"] = timedelta(hours=args.dt_max_hours)
    if getattr(args, "t_max_hours", None) is not None:
        split_updates["t_max"] = timedelta(hours=args.t_max_hours)
    if getattr(args, "grace_hours", None) is not None:
        split_updates["grace"] = timedelta(hours=args.grace_hours)
    if split_updates:
        updates["split"] = dataclasses.replace(cfg.split, **split_updates)

    sim_updates: dict = {}
    for name in ("season", "schedule", "occupants", "days"):
        value = getattr(args, name, None)
        if value is not None:
            sim_updates[name] = value
    if getattr(args, "noise_rate", None) is not None:
        sim_updates["noise_rate"] = args.noise_rate
    if sim_updates:
        updates["simulate"] = dataclasses.replace(cfg.simulate, **sim_updates)

    return dataclasses.replace(cfg, **updates) if updates else cfg


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig(output_dir=Path(args.out) if args.out else Path("runs/out"))
    if args.command == "simulate":
        cfg = dataclasses.replace(cfg, input_log=None)
    cfg = _apply_overrides(cfg, args)
    load_catalog(cfg.catalog)  # fail fast: a bad catalog is a config error
    return cfg


# subcommand -> pipeline stages it executes
COMMAND_STAGES: dict[str, tuple[str, ...]] = {
    "ingest": ("ingest",),
    "simulate": ("ingest",),
    "split": ("split",),
    "compress": ("train", "compress"),
    "hints": ("hints",),
    "synthesize": ("prompt", "synthesize", "parse"),
    "filter": ("tof",),
    "eval": ("eval",),
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except (ConfigError, ContractError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    mock = bool(getattr(args, "mock_llm", False))
    try:
        if args.command == "run":
            manifest = run_pipeline(cfg, mock_llm=mock, resume=args.resume)
            print(json.dumps({"status": manifest["status"], "out": str(cfg.output_dir)}))
            return EXIT_OK

        pipeline = Pipeline(cfg, mock_llm=mock)
        pipeline.out.mkdir(parents=True, exist_ok=True)
        if args.command == "eval":
            cfg = dataclasses.replace(
                cfg, eval=dataclasses.replace(cfg.eval, enabled=True)
            )
            pipeline = Pipeline(cfg, mock_llm=mock)
        for stage in COMMAND_STAGES[args.command]:
            record = pipeline.run_stage(stage)
            print(json.dumps({"stage": record["name"], "info": record["info"]}))
        if args.command == "simulate" and getattr(args, "csv", None):
            ds = dataset_from_json(pipeline.path("raw").read_text(encoding="utf-8"))
            Path(args.csv).write_text(dataset_to_csv(ds), encoding="utf-8")
            print(json.dumps({"csv": args.csv}))
        return EXIT_OK
    except (TransportError, EndpointError) as exc:
        print(f"endpoint failure: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except StageFailure as exc:
        root = exc.__cause__
        if isinstance(root, (TransportError, EndpointError)):
            print(f"endpoint failure: {root}", file=sys.stderr)
            return EXIT_ENDPOINT
        print(f"{exc}", file=sys.stderr)
        return EXIT_STAGE
    except ContractError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
