"""Pipeline orchestration: stages, artifacts, manifest, resume.

Each stage is a file transform: it reads persisted artifacts from the
run directory and writes its own outputs plus a manifest record with
content hashes. A run can therefore resume from the first stage whose
recorded outputs are missing or stale, and every subcommand can execute
a single stage in isolation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from pathlib import Path

from . import report as report_mod
from .compress import compress
from .config import RunConfig, config_snapshot, stage_seed
from .core import (
    Dataset,
    DeviceCatalog,
    dataset_from_json,
    dataset_to_json,
    load_catalog,
    parse_behavior_log,
    validate_against_catalog,
    ContextTransition,
)
from .evaluate import (
    ComparisonConfig,
    ad_evaluate,
    bp_evaluate,
    compression_comparison,
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
)
from .filtering import run_filter
from .graph import build_graph, hints_to_json, top_k_hints, transition_matrix, HintSet
from .segment import split_with_stats
from .seqmodel import SeqAutoencoder, train_autoencoder
from .simulate import (
    HouseholdContext,
    MockLlmClient,
    default_profile,
    generate_corpus,
    junk_dataset,
    _occupancy_of,
    _schedule_of,
    _season_of,
)
from .synth import (
    LlmClient,
    ParseReport,
    PromptBundle,
    build_prompt_batches,
    parse_response,
    synthesize_batches,
)

MANIFEST_VERSION = 1
STAGE_ORDER = (
    "ingest",
    "split",
    "train",
    "compress",
    "hints",
    "prompt",
    "synthesize",
    "parse",
    "tof",
    "eval",
)

ARTIFACTS = {
    "raw": "01_raw.json",
    "ingest_report": "ingest_report.json",
    "segmented": "02_segmented.json",
    "split_report": "split_report.json",
    "model": "model.npz",
    "compressed": "03_compressed.json",
    "compression_report": "compression_report.json",
    "hints": "hints.json",
    "synthetic": "04_synthetic.json",
    "parse_report": "parse_report.json",
    "filtered": "05_filtered.json",
    "tof_report": "tof_report.json",
    "eval_report": "eval_report.json",
    "manifest": "run_manifest.json",
}

# which subcommand produces each artifact, for actionable errors
PRODUCED_BY = {
    "01_raw.json": "ingest (or simulate)",
    "02_segmented.json": "split",
    "model.npz": "compress",
    "03_compressed.json": "compress",
    "hints.json": "hints",
    "04_synthetic.json": "synthesize",
    "05_filtered.json": "filter",
}


class StageFailure(RuntimeError):
    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class MissingArtifactError(StageFailure):
    def __init__(self, stage: str, path: Path) -> None:
        producer = PRODUCED_BY.get(path.name, "an earlier stage")
        super().__init__(stage, f"missing input {path}; run the `{producer}` subcommand first")
        self.path = path


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Pipeline:
    def __init__(self, cfg: RunConfig, mock_llm: bool = False) -> None:
        self.cfg = cfg
        self.mock_llm = mock_llm
        self.out = Path(cfg.output_dir)
        self.catalog: DeviceCatalog = load_catalog(cfg.catalog)
        self.records: list[dict] = []

    # -- helpers --------------------------------------------------------

    def path(self, key: str) -> Path:
        return self.out / ARTIFACTS[key]

    def _require(self, stage: str, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise MissingArtifactError(stage, p)

    def _load_dataset(self, stage: str, key: str) -> Dataset:
        path = self.path(key)
        self._require(stage, path)
        return dataset_from_json(path.read_text(encoding="utf-8"))

    def _write(self, path: Path, text: str) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    def _context(self) -> ContextTransition:
        return ContextTransition(
            kind=self.cfg.context_kind, e_ori=self.cfg.e_ori, e_new=self.cfg.e_new
        )

    # -- stages ----------------------------------------------------------

    def stage_ingest(self) -> tuple[list[Path], list[Path], dict]:
        cfg = self.cfg
        issues: list[dict] = []
        inputs: list[Path] = []
        if cfg.input_log is not None:
            inputs.append(cfg.input_log)
            result = parse_behavior_log(
                cfg.input_log.read_text(encoding="utf-8"),
                sequence_id=cfg.input_log.stem,
                catalog_id=self.catalog.name,
            )
            ds = result.dataset
            issues = [
                {"line": i.line_no, "raw": i.raw, "reason": i.reason} for i in result.issues
            ]
        else:
            profile = default_profile(
                season=cfg.simulate.season,
                schedule=cfg.simulate.schedule,
                occupants=cfg.simulate.occupants,
                noise_rate=cfg.simulate.noise_rate,
                seed=stage_seed(cfg.master_seed, "simulate"),
            )
            profile = dataclasses.replace(profile, catalog=self.catalog)
            ds = generate_corpus(profile, cfg.simulate.days)
        validation = validate_against_catalog(ds, self.catalog)
        outputs = [
            self._write(self.path("raw"), dataset_to_json(ds)),
            self._write(
                self.path("ingest_report"),
                json.dumps(
                    {
                        "row_issues": issues,
                        "catalog_violations": json.loads(validation.to_json())["violations"],
                        "sequences": len(ds),
                        "behaviors": ds.total_behaviors(),
                    },
                    sort_keys=True,
                    indent=2,
                ),
            ),
        ]
        return inputs, outputs, {"sequences": len(ds), "row_issues": len(issues)}

    def stage_split(self) -> tuple[list[Path], list[Path], dict]:
        raw = self._load_dataset("split", "raw")
        pieces = []
        force_appends = 0
        for seq in raw.sequences:
            outs, stats = split_with_stats(seq, self.cfg.split)
            pieces.extend(outs)
            force_appends += stats.force_appends
        ds = Dataset(sequences=tuple(pieces), catalog_id=raw.catalog_id)
        outputs = [
            self._write(self.path("segmented"), dataset_to_json(ds)),
            self._write(
                self.path("split_report"),
                json.dumps(
                    {
                        "input_sequences": len(raw),
                        "output_sequences": len(ds),
                        "force_appends": force_appends,
                    },
                    sort_keys=True,
                    indent=2,
                ),
            ),
        ]
        return [self.path("raw")], outputs, {"output_sequences": len(ds), "force_appends": force_appends}

    def stage_train(self) -> tuple[list[Path], list[Path], dict]:
        ds = self._load_dataset("train", "segmented")
        model = train_autoencoder(
            ds, self.cfg.model_for_stage("train"), catalog=self.catalog
        )
        model.save(self.path("model"))
        info = {
            "epochs": model.config.epochs,
            "first_epoch_loss": model.loss_trace[0],
            "final_epoch_loss": model.loss_trace[-1],
            "vocab_size": model.vocab.size,
        }
        return [self.path("segmented")], [self.path("model")], info

    def stage_compress(self) -> tuple[list[Path], list[Path], dict]:
        ds = self._load_dataset("compress", "segmented")
        self._require("compress", self.path("model"))
        model = SeqAutoencoder.load(self.path("model"))
        result = compress(ds, model, self.cfg.alpha)
        outputs = [
            self._write(self.path("compressed"), dataset_to_json(result.retained)),
            self._write(self.path("compression_report"), result.to_report_json()),
        ]
        info = {
            "alpha": self.cfg.alpha,
            "retained": result.stats.retained_count,
            "removed": result.stats.removed_count,
            "reduction_rate": result.stats.reduction_rate,
        }
        return [self.path("segmented"), self.path("model")], outputs, info

    def stage_hints(self) -> tuple[list[Path], list[Path], dict]:
        ds = self._load_dataset("hints", "segmented")
        hints = top_k_hints(transition_matrix(build_graph(ds)), self.cfg.hints_k)
        outputs = [self._write(self.path("hints"), hints_to_json(hints))]
        return [self.path("segmented")], outputs, {"k": self.cfg.hints_k, "actions": len(hints.hints)}

    def _load_hints(self, stage: str) -> HintSet:
        path = self.path("hints")
        self._require(stage, path)
        obj = json.loads(path.read_text(encoding="utf-8"))
        hints = tuple(
            (
                entry["current"],
                tuple((nxt["action"], nxt["count"]) for nxt in entry["next"]),
            )
            for entry in obj["hints"]
        )
        return HintSet(k=self.cfg.hints_k, hints=hints)

    def stage_prompt(self) -> tuple[list[Path], list[Path], dict]:
        compressed = self._load_dataset("prompt", "compressed")
        hints = self._load_hints("prompt")
        bundles = build_prompt_batches(
            self._context(), compressed, self.catalog, hints, self.cfg.prompt_config()
        )
        outputs = []
        for i, b in enumerate(bundles):
            outputs.append(
                self._write(
                    self.out / "prompts" / f"{i:03d}.json",
                    json.dumps(
                        {
                            "system_text": b.system_text,
                            "user_text": b.user_text,
                            "temperature": b.temperature,
                            "max_output_tokens": b.max_output_tokens,
                        },
                        sort_keys=True,
                        indent=2,
                    ),
                )
            )
        inputs = [self.path("compressed"), self.path("hints")]
        return inputs, outputs, {"prompt_batches": len(bundles)}

    def _load_bundles(self, stage: str) -> list[PromptBundle]:
        prompt_dir = self.out / "prompts"
        if not prompt_dir.exists():
            raise MissingArtifactError(stage, prompt_dir / "000.json")
        bundles = []
        for path in sorted(prompt_dir.glob("*.json")):
            obj = json.loads(path.read_text(encoding="utf-8"))
            bundles.append(
                PromptBundle(
                    system_text=obj["system_text"],
                    user_text=obj["user_text"],
                    temperature=obj["temperature"],
                    max_output_tokens=obj["max_output_tokens"],
                )
            )
        if not bundles:
            raise MissingArtifactError(stage, prompt_dir / "000.json")
        return bundles

    def _client(self):
        if self.mock_llm:
            profile = default_profile(seed=stage_seed(self.cfg.master_seed, "mock"))
            profile = dataclasses.replace(profile, catalog=self.catalog)
            return MockLlmClient(profile)
        return LlmClient(self.cfg.llm, log_dir=self.out / "transcripts")

    def stage_synthesize(self) -> tuple[list[Path], list[Path], dict]:
        bundles = self._load_bundles("synthesize")
        client = self._client()
        texts = synthesize_batches(client, bundles, parallel=self.cfg.llm.parallel_requests)
        outputs = []
        for i, text in enumerate(texts):
            outputs.append(
                self._write(
                    self.out / "responses" / f"{i:03d}.json",
                    json.dumps({"response_text": text}, sort_keys=True, indent=2),
                )
            )
        inputs = sorted((self.out / "prompts").glob("*.json"))
        return inputs, outputs, {"responses": len(texts), "mock": self.mock_llm}

    def stage_parse(self) -> tuple[list[Path], list[Path], dict]:
        response_dir = self.out / "responses"
        paths = sorted(response_dir.glob("*.json")) if response_dir.exists() else []
        if not paths:
            raise MissingArtifactError("parse", response_dir / "000.json")
        sequences = []
        reports: list[ParseReport] = []
        for i, path in enumerate(paths):
            text = json.loads(path.read_text(encoding="utf-8"))["response_text"]
            ds, rep = parse_response(
                text,
                self.catalog,
                id_prefix=f"synth{i:03d}",
                default_date=self.cfg.synthetic_date,
            )
            sequences.extend(ds.sequences)
            reports.append(rep)
        merged = Dataset(sequences=tuple(sequences), catalog_id=self.catalog.name)
        validation = validate_against_catalog(merged, self.catalog)
        outputs = [
            self._write(self.path("synthetic"), dataset_to_json(merged)),
            self._write(
                self.path("parse_report"),
                json.dumps(
                    {
                        "chunks": [r.to_json_obj() for r in reports],
                        "catalog_violations": json.loads(validation.to_json())["violations"],
                        "sequences": len(merged),
                    },
                    sort_keys=True,
                    indent=2,
                ),
            ),
        ]
        dropped = sum(len(r.dropped_behaviors) for r in reports)
        return paths, outputs, {"sequences": len(merged), "dropped_entries": dropped}

    def stage_tof(self) -> tuple[list[Path], list[Path], dict]:
        synthetic = self._load_dataset("tof", "synthetic")
        result = run_filter(
            synthetic,
            self.cfg.model_for_stage("tof"),
            catalog=self.catalog,
            max_evaluated_outliers=self.cfg.tof.max_evaluated_outliers,
        )
        outputs = [
            self._write(self.path("filtered"), dataset_to_json(result.filtered)),
            self._write(self.path("tof_report"), result.to_report_json()),
        ]
        outputs.extend(
            report_mod.save_loss_histogram(
                result.partition.losses, result.partition.threshold, self.out / "figures"
            )
        )
        info = {
            "outliers_flagged": len(result.partition.outliers),
            "retained": len(result.filtered),
            "threshold": result.partition.threshold,
        }
        return [self.path("synthetic")], outputs, info

    def _target_context(self) -> HouseholdContext:
        sim = self.cfg.simulate
        season = _season_of(self.cfg.e_new) or sim.season
        schedule = _schedule_of(self.cfg.e_new) or sim.schedule
        occupants = _occupancy_of(self.cfg.e_new) or sim.occupants
        kind = self.cfg.context_kind.value
        if kind == "ST" and season == sim.season:
            season = "summer" if sim.season == "winter" else "winter"
        if kind == "TT" and schedule == sim.schedule:
            schedule = "night" if sim.schedule == "day" else "day"
        if kind == "NT" and occupants == sim.occupants:
            occupants = "2+" if sim.occupants == "1" else "1"
        return HouseholdContext(season=season, schedule=schedule, occupants=occupants)

    def stage_eval(self) -> tuple[list[Path], list[Path], dict]:
        cfg = self.cfg
        original = self._load_dataset("eval", "segmented")
        filtered = self._load_dataset("eval", "filtered")
        figures_dir = self.out / "figures"
        outputs: list[Path] = []
        outputs.extend(report_mod.save_action_distribution(original, filtered, figures_dir))
        outputs.extend(report_mod.save_hour_distribution(original, filtered, figures_dir))
        payload: dict = {"distribution_figures": [str(p) for p in outputs]}

        target = self._target_context()
        target_profile = default_profile(
            season=target.season,
            schedule=target.schedule,
            occupants=target.occupants,
            noise_rate=cfg.simulate.noise_rate,
            seed=stage_seed(cfg.master_seed, "eval-target"),
        )
        target_profile = dataclasses.replace(target_profile, catalog=self.catalog)
        target_corpus = generate_corpus(target_profile, cfg.eval.target_days)

        if cfg.eval.anomaly_detection:
            junk = junk_dataset(
                self.catalog,
                max(4, cfg.eval.target_days // 2),
                stage_seed(cfg.master_seed, "eval-junk"),
            )
            test = [(s, LABEL_NORMAL) for s in target_corpus.sequences] + [
                (s, LABEL_ANOMALOUS) for s in junk.sequences
            ]
            metrics = ad_evaluate(
                filtered, test, cfg.model_for_stage("eval-ad"), catalog=self.catalog
            )
            payload["anomaly_detection"] = {
                "tp": metrics.tp, "fp": metrics.fp, "tn": metrics.tn, "fn": metrics.fn,
                "recall": metrics.recall, "precision": metrics.precision, "f1": metrics.f1,
            }
        if cfg.eval.behavior_prediction:
            rank = bp_evaluate(filtered, target_corpus)
            payload["behavior_prediction"] = {
                "ndcg_at_10": rank.ndcg_at_10, "hr_at_10": rank.hr_at_10,
            }
        if cfg.eval.rates and len(original) >= 50:
            comparison = compression_comparison(
                original,
                cfg.eval.rates,
                ComparisonConfig(model=cfg.model_for_stage("eval-compare")),
            )
            payload["compression_comparison"] = json.loads(comparison.to_json())
            outputs.extend(report_mod.save_compression_comparison(comparison, figures_dir))
        elif cfg.eval.rates:
            payload["compression_comparison"] = "skipped: fewer than 50 segmented sequences"

        outputs.insert(
            0,
            self._write(self.path("eval_report"), json.dumps(payload, sort_keys=True, indent=2)),
        )
        return [self.path("segmented"), self.path("filtered")], outputs, {
            "components": sorted(k for k in payload if k != "distribution_figures")
        }

    # -- orchestration -----------------------------------------------------

    def _stage_fn(self, name: str):
        return {
            "ingest": self.stage_ingest,
            "split": self.stage_split,
            "train": self.stage_train,
            "compress": self.stage_compress,
            "hints": self.stage_hints,
            "prompt": self.stage_prompt,
            "synthesize": self.stage_synthesize,
            "parse": self.stage_parse,
            "tof": self.stage_tof,
            "eval": self.stage_eval,
        }[name]

    def _previous_records(self) -> dict[str, dict]:
        manifest_path = self.path("manifest")
        if not manifest_path.exists():
            return {}
        try:
            obj = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            return {}
        return {rec["name"]: rec for rec in obj.get("stages", [])}

    def _record_is_fresh(self, record: dict) -> bool:
        if record.get("status") != "ok":
            return False
        for rel, digest in record.get("outputs", {}).items():
            path = self.out / rel
            if not path.exists() or sha256_file(path) != digest:
                return False
        return True

    def run_stage(self, name: str) -> dict:
        started = time.time()
        inputs, outputs, info = self._stage_fn(name)()
        record = {
            "name": name,
            "status": "ok",
            "inputs": {
                str(p.relative_to(self.out)) if p.is_relative_to(self.out) else str(p): sha256_file(p)
                for p in inputs
                if p.exists()
            },
            "outputs": {str(p.relative_to(self.out)): sha256_file(p) for p in outputs},
            "elapsed_s": round(time.time() - started, 3),
            "info": info,
        }
        self.records.append(record)
        return record

    def _write_manifest(self, status: str, failed_stage: str | None = None) -> dict:
        from . import __version__

        manifest = {
            "version": MANIFEST_VERSION,
            "homesynth_version": __version__,
            "status": status,
            "failed_stage": failed_stage,
            "mock_llm": self.mock_llm,
            "config": config_snapshot(self.cfg),
            "stages": self.records,
        }
        self._write(self.path("manifest"), json.dumps(manifest, sort_keys=True, indent=2))
        return manifest

    def run(self, stages: tuple[str, ...] = STAGE_ORDER, resume: bool = False) -> dict:
        """Execute the requested stages in order, writing the manifest.

        With `resume`, stages whose recorded outputs still hash-match on
        disk are skipped; the first stale stage and everything after it
        re-run.
        """
        self.out.mkdir(parents=True, exist_ok=True)
        previous = self._previous_records() if resume else {}
        resumable = True
        for name in stages:
            if name == "eval" and not self.cfg.eval.enabled:
                continue
            if resume and resumable and name in previous and self._record_is_fresh(previous[name]):
                record = dict(previous[name])
                record["status"] = "skipped (fresh)"
                self.records.append(record)
                continue
            resumable = False
            try:
                self.run_stage(name)
            except Exception as exc:
                self.records.append({"name": name, "status": "failed", "error": str(exc)})
                self._write_manifest("failed", failed_stage=name)
                if isinstance(exc, StageFailure):
                    raise
                raise StageFailure(name, str(exc)) from exc
        return self._write_manifest("ok")


def run_pipeline(cfg: RunConfig, *, mock_llm: bool = False, resume: bool = False) -> dict:
    return Pipeline(cfg, mock_llm=mock_llm).run(resume=resume)
