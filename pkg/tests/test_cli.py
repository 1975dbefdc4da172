import json
import socket

from homesynth.cli import main
from homesynth.core import dataset_from_json, load_catalog, validate_against_catalog
from homesynth.pipeline import sha256_file

BASE_CONFIG = """
[run]
output_dir = {out}
master_seed = {seed}

[input]
catalog = simhome

[simulate]
days = 45
noise_rate = 0.05

[context]
kind = ST
original = winter
new = summer

[model]
embed_dim = 32
heads = 2
layers = 1
ffn_dim = 64
max_len = 64
epochs = 6
batch_size = 16
learning_rate = 0.003

[compress]
alpha = 0.997

[llm]
base_url = {base_url}
max_retries = 0
timeout_s = 2

[eval]
enabled = {eval_enabled}
rates =
target_days = 8
"""


def write_config(tmp_path, out_name="run", seed=7, eval_enabled="false",
                 base_url="http://127.0.0.1:9/v1"):
    path = tmp_path / f"{out_name}.ini"
    path.write_text(
        BASE_CONFIG.format(
            out=tmp_path / out_name, seed=seed, eval_enabled=eval_enabled, base_url=base_url
        )
    )
    return path, tmp_path / out_name


def test_full_mock_run_and_stage_records(tmp_path):
    config, out = write_config(tmp_path, eval_enabled="true")
    assert main(["run", "--config", str(config), "--mock-llm"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert [s["name"] for s in manifest["stages"]] == [
        "ingest", "split", "train", "compress", "hints",
        "prompt", "synthesize", "parse", "tof", "eval",
    ]
    ds = dataset_from_json((out / "05_filtered.json").read_text())
    assert validate_against_catalog(ds, load_catalog("simhome")).ok
    report = json.loads((out / "eval_report.json").read_text())
    assert "anomaly_detection" in report and "behavior_prediction" in report
    assert (out / "figures" / "action_distribution.png").exists()
    assert (out / "figures" / "action_distribution.csv").exists()
    assert (out / "figures" / "hour_distribution.png").exists()
    assert (out / "figures" / "reconstruction_losses.png").exists()


def test_manifest_hashes_match_disk(tmp_path):
    config, out = write_config(tmp_path)
    assert main(["run", "--config", str(config), "--mock-llm"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    for record in manifest["stages"]:
        for rel, digest in record["outputs"].items():
            assert sha256_file(out / rel) == digest, rel


def test_mock_run_is_deterministic(tmp_path):
    c1, out1 = write_config(tmp_path, out_name="run1", seed=21)
    c2, out2 = write_config(tmp_path, out_name="run2", seed=21)
    assert main(["run", "--config", str(c1), "--mock-llm"]) == 0
    assert main(["run", "--config", str(c2), "--mock-llm"]) == 0
    assert (out1 / "05_filtered.json").read_bytes() == (out2 / "05_filtered.json").read_bytes()


def test_mock_run_never_touches_network(tmp_path, monkeypatch):
    def refuse(*args, **kwargs):
        raise AssertionError("network access attempted during mock run")

    monkeypatch.setattr(socket, "socket", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    config, _ = write_config(tmp_path)
    assert main(["run", "--config", str(config), "--mock-llm"]) == 0


def test_resume_reruns_only_stale_stages(tmp_path):
    config, out = write_config(tmp_path)
    assert main(["run", "--config", str(config), "--mock-llm"]) == 0
    (out / "05_filtered.json").unlink()  # invalidate the tof stage
    assert main(["run", "--config", str(config), "--mock-llm", "--resume"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    statuses = {s["name"]: s["status"] for s in manifest["stages"]}
    for name in ("ingest", "split", "train", "compress", "hints", "prompt", "synthesize", "parse"):
        assert statuses[name] == "skipped (fresh)", name
    assert statuses["tof"] == "ok"


def test_resume_skips_everything_when_fresh(tmp_path):
    config, out = write_config(tmp_path)
    assert main(["run", "--config", str(config), "--mock-llm"]) == 0
    assert main(["run", "--config", str(config), "--mock-llm", "--resume"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert all(s["status"] == "skipped (fresh)" for s in manifest["stages"])


def test_subcommands_run_single_stages(tmp_path):
    config, out = write_config(tmp_path)
    assert main(["simulate", "--config", str(config)]) == 0
    raw_hash = sha256_file(out / "01_raw.json")
    assert main(["split", "--config", str(config), "--dt-max-hours", "6"]) == 0
    assert (out / "02_segmented.json").exists()
    assert sha256_file(out / "01_raw.json") == raw_hash  # upstream untouched
    assert main(["compress", "--config", str(config)]) == 0
    assert main(["hints", "--config", str(config), "--k", "3"]) == 0
    hints = json.loads((out / "hints.json").read_text())
    assert all(len(h["next"]) <= 3 for h in hints["hints"])
    assert main(["synthesize", "--config", str(config), "--mock-llm"]) == 0
    assert main(["filter", "--config", str(config)]) == 0
    assert (out / "05_filtered.json").exists()
    assert main(["eval", "--config", str(config)]) == 0
    assert (out / "eval_report.json").exists()


def test_split_override_changes_segmentation(tmp_path):
    config, out = write_config(tmp_path)
    assert main(["simulate", "--config", str(config)]) == 0
    assert main(["split", "--config", str(config), "--dt-max-hours", "24",
                 "--t-max-hours", "24"]) == 0
    coarse = len(dataset_from_json((out / "02_segmented.json").read_text()))
    assert main(["split", "--config", str(config), "--dt-max-hours", "1",
                 "--t-max-hours", "24"]) == 0
    fine = len(dataset_from_json((out / "02_segmented.json").read_text()))
    assert fine > coarse


def test_simulate_exports_csv(tmp_path):
    config, out = write_config(tmp_path)
    csv_path = tmp_path / "corpus.csv"
    assert main(["simulate", "--config", str(config), "--csv", str(csv_path)]) == 0
    text = csv_path.read_text()
    assert text.startswith("timestamp,device,action\n")
    assert main(["ingest", "--config", str(config), "--input", str(csv_path),
                 "--out", str(tmp_path / "run-b")]) == 0


def test_missing_config_file_is_config_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.ini"), "--mock-llm"]) == 2


def test_bad_catalog_is_config_error(tmp_path):
    config, _ = write_config(tmp_path)
    assert main(["run", "--config", str(config), "--catalog", "missing-catalog"]) == 2


def test_missing_artifact_is_stage_failure(tmp_path, capsys):
    config, _ = write_config(tmp_path)
    assert main(["split", "--config", str(config)]) == 3
    err = capsys.readouterr().err
    assert "01_raw.json" in err
    assert "ingest" in err  # names the producing subcommand


def test_unreachable_endpoint_is_endpoint_failure(tmp_path):
    config, _ = write_config(tmp_path)
    assert main(["simulate", "--config", str(config)]) == 0
    assert main(["split", "--config", str(config)]) == 0
    assert main(["compress", "--config", str(config)]) == 0
    assert main(["hints", "--config", str(config)]) == 0
    assert main(["synthesize", "--config", str(config)]) == 4  # real client, closed port


def test_insufficient_synthetic_data_is_stage_failure(tmp_path):
    config, out = write_config(tmp_path)
    config.write_text(config.read_text().replace("alpha = 0.997", "alpha = 0.9"))
    # aggressive dedup leaves too few synthetic sequences for quartiles
    assert main(["run", "--config", str(config), "--mock-llm"]) == 3
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["failed_stage"] == "tof"
