import csv
import hashlib
from pathlib import Path

import pytest

from nsarm.cli import main

MICRO_INI = """
[schedule]
preset = 32

[data]
n_images = 10
n_train = 6
degradation = medium

[tokenizer]
width = 8
epochs = 1
batch_size = 4

[ar]
model_dim = 16
depth = 1
heads = 2

[tnet]
width = 8

[pretrain_ar]
iterations = 2
batch_size = 4

[stage1]
iterations = 2
batch_size = 4

[stage2]
iterations = 2
batch_size = 4
"""


def write_cfg(root: Path) -> Path:
    cfg = root / "run.ini"
    text = MICRO_INI + f"\n[paths]\ndata_dir = {root}/data\ncheckpoint_dir = {root}/ckpt\noutput_dir = {root}/out\n"
    cfg.write_text(text)
    return cfg


PIPELINE = [
    ["make-data"],
    ["train-tokenizer"],
    ["pretrain-ar"],
    ["train-stage1"],
    ["train-stage2"],
    ["train-stage2", "--from-scratch"],
    ["infer"],
    ["pathway", "--ref", "{root}/data/gt/0007.ppm", "--k", "0..K"],
    ["decompose", "--input", "{root}/data/gt/0008.ppm"],
    ["eval-images"],
    ["eval-scores", "--scores", "{root}/out/image_scores.csv", "--metrics", "psnr", "--svg"],
    ["report-robustness", "--scores", "{root}/out/image_scores.csv", "--metrics", "ssim"],
]


def run_pipeline(root: Path) -> dict[str, str]:
    cfg = write_cfg(root)
    for cmd in PIPELINE:
        argv = [a.format(root=root) for a in cmd] + ["--config", str(cfg), "--seed", "5"]
        assert main(argv) == 0, cmd
    digests = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix != ".ini":
            digests[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return digests


@pytest.fixture(scope="module")
def roots(tmp_path_factory):
    return tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")


@pytest.fixture(scope="module")
def two_runs(roots):
    return run_pipeline(roots[0]), run_pipeline(roots[1])


def test_pipeline_artifacts_present(two_runs):
    a, _ = two_runs
    for name in [
        "data/manifest.csv",
        "ckpt/tokenizer.nsrm",
        "ckpt/ar_pretrained.nsrm",
        "ckpt/tnet_stage1.nsrm",
        "ckpt/nsarm.nsrm",
        "ckpt/nsarm_scratch.nsrm",
        "out/sr/0006.ppm",
        "out/pathway/0007_k00.ppm",
        "out/pathway/0007_k04.ppm",
        "out/pathway/0007_distances.csv",
        "out/0008.nstk",
        "out/image_scores.csv",
        "out/variance_report.csv",
        "out/curve_toy.csv",
        "out/curves.svg",
        "out/failure_report.csv",
        "out/stage1_log.csv",
    ]:
        assert name in a, name
    # determinism mode skips wall-clock timings
    assert "out/infer_timings.csv" not in a


def test_every_artifact_byte_identical(two_runs):
    a, b = two_runs
    assert a.keys() == b.keys()
    diff = [k for k in a if a[k] != b[k]]
    assert diff == []


def test_pathway_csv_lists_every_k(roots, two_runs):
    with open(roots[0] / "out/pathway/0007_distances.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["k_replace"]) for r in rows] == [0, 1, 2, 3, 4]
    # full replacement reproduces the tokenizer round trip exactly
    assert float(rows[-1]["latent_distance"]) < float(rows[0]["latent_distance"])


def test_dry_run_writes_nothing(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["make-data", "--config", str(cfg), "--dry-run"]) == 0
    assert not (tmp_path / "data").exists()
    assert '"scales": "1x1,2x2,4x4,8x8"' in capsys.readouterr().out


def test_bad_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["make-data", "--no-such-flag"])
    assert e.value.code == 2


def test_bad_config_exits_2(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["make-data", "--config", str(cfg), "--set", "stage1.learning_rate=-1"]) == 2
    assert main(["make-data", "--config", str(cfg), "--set", "schedule.preset=48"]) == 2
    assert main(["make-data", "--config", str(cfg), "--set", "bogus"]) == 2
    assert main(["make-data", "--config", str(tmp_path / "missing.ini")]) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["train-tokenizer", "--config", str(cfg)]) == 1
    assert "make-data" in capsys.readouterr().err


def test_report_robustness_from_score_file(tmp_path):
    scores = tmp_path / "s.csv"
    rows = [["image_id", "dataset", "metric", "score"]]
    for i, (m1, m2) in enumerate([(1.0, 100.0), (0.9, 90.0), (0.8, 80.0), (0.7, 70.0)]):
        rows += [[f"i{i}", "toy", "m1", m1], [f"i{i}", "toy", "m2", m2]]
    with open(scores, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    argv = ["report-robustness", "--scores", str(scores), "--metrics", "m1,m2", "--set", f"paths.output_dir={tmp_path}/o"]
    assert main(argv) == 0
    lines = (tmp_path / "o" / "failure_report.csv").read_text().splitlines()
    assert lines[0] == "dataset,metric_set,mu_g,n,deficient,poor,collapse"
    assert lines[1].startswith("toy,m1+m2,")
    assert lines[1].split(",")[3:] == ["4", "2", "1", "0"]
