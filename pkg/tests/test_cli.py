import csv
import io
import json
import sys
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from fundustrack.cli import main
from fundustrack.config import load_config
from fundustrack.errors import BadParams
from fundustrack.imaging import encode_ppm

from conftest import solid_rgb, synthetic_fundus


@pytest.fixture
def runner():
    return CliRunner()  # click >= 8.2 separates stdout and stderr


def write_fixture(path: Path, image=None):
    path.write_bytes(encode_ppm(image or synthetic_fundus()))
    return path


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

CONFIG_TOML = """
[service]
port = 8123
store_dir = "scans-data"
token_ttl_seconds = 60

[pipeline]
scales = [1.0, 2.0]
beta = 0.6
min_arc_px = 4.0

[adapters.stub]
builtin = "stub"

[adapters.model-a]
command = ["python3", "grade.py", "{image}"]
timeout = 45
kinds = ["grading"]

[changes]
baseline_window = 2

[changes.thresholds]
avg_tortuosity = 0.25

[interpretation]
url = "https://interp.example/v1/chat"
model = "deepseek-chat"
credential_env = "TEST_INTERP_KEY"
"""


def test_load_config_full(tmp_path):
    cfg_file = tmp_path / "fundustrack.toml"
    cfg_file.write_text(CONFIG_TOML)
    config = load_config(cfg_file, env={"TEST_INTERP_KEY": "sk-abc"})
    assert config.port == 8123
    assert config.store_dir == "scans-data"
    assert config.pipeline.scales == (1.0, 2.0)
    assert config.pipeline.beta == 0.6
    assert [a.id for a in config.adapters] == ["stub", "model-a"]
    assert config.adapters[1].timeout == 45
    assert config.change_policy.baseline_window == 2
    assert config.change_policy.thresholds == {"avg_tortuosity": 0.25}
    assert config.interpretation.credential == "sk-abc"
    assert config.adapter_by_id("model-a").command[0] == "python3"
    with pytest.raises(BadParams):
        config.adapter_by_id("ghost")


def test_load_config_defaults():
    config = load_config(None)
    assert config.port == 8000
    assert [a.id for a in config.adapters] == ["stub"]
    assert config.interpretation is None


def test_load_config_rejects_bad_toml(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[pipeline\nscales=nope")
    with pytest.raises(BadParams):
        load_config(bad)
    unknown = tmp_path / "unknown.toml"
    unknown.write_text("[pipeline]\nwat = 1\n")
    with pytest.raises(BadParams):
        load_config(unknown)


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def test_analyze_success_and_determinism(tmp_path, runner):
    fixture = write_fixture(tmp_path / "scan.ppm")
    first = runner.invoke(main, ["analyze", str(fixture)])
    assert first.exit_code == 0, first.stderr
    doc = json.loads(first.stdout)
    assert doc["metrics"]["produced_by"] == "stub"
    assert set(doc["severities"]) >= {"retinopathy_grade", "avg_tortuosity"}
    assert doc["tortuosity"]["segments_used"] >= 1

    second = runner.invoke(main, ["analyze", str(fixture)])
    assert second.stdout == first.stdout  # byte-identical


def test_analyze_missing_file(tmp_path, runner):
    result = runner.invoke(main, ["analyze", str(tmp_path / "nope.ppm")])
    assert result.exit_code == 1
    assert "cannot read" in result.stderr


def test_analyze_undecodable_file(tmp_path, runner):
    junk = tmp_path / "junk.ppm"
    junk.write_bytes(b"hello world")
    result = runner.invoke(main, ["analyze", str(junk)])
    assert result.exit_code == 1
    assert "cannot decode" in result.stderr


def test_analyze_adapter_failure_exit_2(tmp_path, runner):
    fixture = write_fixture(tmp_path / "scan.ppm")
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(
        "[adapters.broken]\n"
        f"command = [{json.dumps(sys.executable)}, \"-c\", \"import sys; sys.exit(7)\"]\n"
        "timeout = 30\n"
    )
    result = runner.invoke(main, ["--config", str(cfg), "analyze", str(fixture)])
    assert result.exit_code == 2
    assert "adapter failure" in result.stderr


# ---------------------------------------------------------------------------
# batch
# ---------------------------------------------------------------------------

def test_batch_mixed_directory(tmp_path, runner):
    d = tmp_path / "corpus"
    d.mkdir()
    write_fixture(d / "b.ppm")
    write_fixture(d / "a.ppm", image=solid_rgb(64, 64, (200, 160, 130)))
    (d / "broken.ppm").write_bytes(b"P6 not really")

    result = runner.invoke(main, ["batch", str(d)])
    assert result.exit_code == 0, result.stderr
    rows = list(csv.reader(io.StringIO(result.stdout)))
    assert rows[0][0] == "filename"
    assert [r[0] for r in rows[1:]] == ["a.ppm", "b.ppm"]  # sorted by filename
    assert len(rows[0]) == 1 + 12
    assert "broken.ppm" in result.stderr


def test_batch_empty_directory_exit_1(tmp_path, runner):
    d = tmp_path / "empty"
    d.mkdir()
    result = runner.invoke(main, ["batch", str(d)])
    assert result.exit_code == 1


def test_batch_invariant_to_worker_count(tmp_path, runner):
    d = tmp_path / "corpus"
    d.mkdir()
    for i in range(4):
        write_fixture(d / f"img{i}.ppm", image=solid_rgb(64, 64, (60 + i, 160, 130)))
    serial = runner.invoke(main, ["--workers", "1", "batch", str(d)])
    parallel = runner.invoke(main, ["--workers", "8", "batch", str(d)])
    assert serial.stdout == parallel.stdout


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

ECHO_ADAPTER = """
import json, os, sys
labels_path = sys.argv[1]
image_path = sys.argv[2]
name = os.path.basename(image_path)
with open(labels_path) as f:
    next(f)
    for line in f:
        fname, r, e = line.strip().split(",")
        if fname == name:
            print(json.dumps({"retinopathy_grade": int(r), "edema_risk": int(e),
                              "glaucoma_score": 0}))
            sys.exit(0)
sys.exit(1)
"""


def seed_eval_dir(tmp_path, labels):
    d = tmp_path / "eval"
    d.mkdir()
    lines = ["filename,retinopathy_grade,edema_risk"]
    for i, (r, e) in enumerate(labels):
        name = f"img{i:02}.ppm"
        write_fixture(d / name, image=solid_rgb(64, 64, (40 + i * 7, 150, 120)))
        lines.append(f"{name},{r},{e}")
    labels_csv = d / "labels.csv"
    labels_csv.write_text("\n".join(lines) + "\n")
    adapter_py = d / "echo_adapter.py"
    adapter_py.write_text(ECHO_ADAPTER)
    cfg = d / "cfg.toml"
    cfg.write_text(
        "[adapters.labelecho]\n"
        f"command = [{json.dumps(sys.executable)}, {json.dumps(str(adapter_py))}, "
        f"{json.dumps(str(labels_csv))}, \"{{image}}\"]\n"
        "timeout = 30\n"
    )
    return d, labels_csv, cfg


def test_evaluate_label_echo_adapter_is_perfect(tmp_path, runner):
    labels = [(0, 0), (1, 2), (3, 1), (2, 2), (0, 1), (3, 0)]
    d, labels_csv, cfg = seed_eval_dir(tmp_path, labels)
    result = runner.invoke(
        main,
        ["--config", str(cfg), "--adapter", "labelecho", "evaluate", str(labels_csv)],
    )
    assert result.exit_code == 0, result.stderr
    report = json.loads(result.stdout)
    assert report["retinopathy"]["accuracy"] == 1.0
    assert report["edema"]["accuracy"] == 1.0
    counts = np.array(report["retinopathy"]["counts"])
    assert (counts == np.diag(np.diag(counts))).all()
    assert report["failed"] == 0


def test_evaluate_constant_stub_like_adapter_prevalence(tmp_path, runner):
    # 40% of labels are grade 0; a constant grade-0 adapter scores exactly that
    labels = [(0, 0), (0, 1), (1, 0), (2, 2), (3, 1)]
    d, labels_csv, _ = seed_eval_dir(tmp_path, labels)
    cfg = d / "const.toml"
    code = "import json; print(json.dumps({'retinopathy_grade': 0, 'edema_risk': 0, 'glaucoma_score': 0}))"
    cfg.write_text(
        "[adapters.const0]\n"
        f"command = [{json.dumps(sys.executable)}, \"-c\", {json.dumps(code)}]\n"
        "timeout = 30\n"
    )
    result = runner.invoke(
        main, ["--config", str(cfg), "--adapter", "const0", "evaluate", str(labels_csv)]
    )
    assert result.exit_code == 0, result.stderr
    report = json.loads(result.stdout)
    assert report["retinopathy"]["accuracy"] == pytest.approx(0.4, abs=1e-12)


def test_evaluate_malformed_labels_exit_1(tmp_path, runner):
    bad = tmp_path / "bad.csv"
    bad.write_text("filename,retinopathy_grade,edema_risk\na.ppm,9,0\n")
    result = runner.invoke(main, ["evaluate", str(bad)])
    assert result.exit_code == 1
    assert "malformed labels" in result.stderr


def test_evaluate_missing_images_exit_1(tmp_path, runner):
    labels = tmp_path / "labels.csv"
    labels.write_text("filename,retinopathy_grade,edema_risk\nghost.ppm,0,0\n")
    result = runner.invoke(main, ["evaluate", str(labels)])
    assert result.exit_code == 1
    assert "missing images" in result.stderr


def test_evaluate_csv_format(tmp_path, runner):
    labels = [(1, 1), (0, 0)]
    d, labels_csv, cfg = seed_eval_dir(tmp_path, labels)
    result = runner.invoke(
        main,
        ["--config", str(cfg), "--adapter", "labelecho", "--format", "csv",
         "evaluate", str(labels_csv)],
    )
    assert result.exit_code == 0, result.stderr
    rows = list(csv.reader(io.StringIO(result.stdout)))
    assert rows[0] == ["task", "true_label", "predicted_label", "count"]
    assert len(rows) == 1 + 16 + 9  # header + 4x4 retinopathy + 3x3 edema
    assert "accuracy" in result.stderr


def test_evaluate_with_stub_adapter(tmp_path, runner):
    labels = [(0, 0), (1, 1)]
    d, labels_csv, _ = seed_eval_dir(tmp_path, labels)
    result = runner.invoke(main, ["evaluate", str(labels_csv)])
    assert result.exit_code == 0, result.stderr
    report = json.loads(result.stdout)
    assert report["evaluated"] == 2
