import csv
import time

import numpy as np
import pytest

from gsdmae import config as config_mod
from gsdmae.cli import dispatch
from gsdmae.eval import FeatureSet, KnnReport
from gsdmae.model import build_model, param_count


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_help_lists_override_keys(capsys):
    code, text, _ = run(capsys, "--help")
    assert code == 0
    for key in ("encoder.use_gsd_posenc", "loss.target_mode", "mask_ratio"):
        assert key in text


def test_unknown_key_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "param-report", "--set", "encoder.bogus=1", "--output-dir", tmp_path)
    assert code == 2
    assert "encoder.bogus" in err and "encoder.use_gsd_posenc" in err


def test_missing_file_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "pretrain", "--manifest", tmp_path / "none.csv", "--output-dir", tmp_path)
    assert code == 2 and "does not exist" in err


def test_bad_arguments_exit_2(capsys):
    assert dispatch(["pretrain"]) == 2
    assert dispatch(["no-such-command"]) == 2


def test_param_report_matches_param_count(capsys, tmp_path):
    code, out, _ = run(capsys, "param-report", "--config", "toy", "--output-dir", tmp_path)
    assert code == 0
    expected = param_count(build_model(config_mod.preset("toy"), device="meta"))["total"]
    assert f"{expected:,}" in out
    with open(tmp_path / "param-report" / "param_report.csv") as fh:
        rows = {r["module"]: int(r["params"]) for r in csv.DictReader(fh)}
    assert rows["total"] == expected


def test_knn_eval_on_feature_files(capsys, tmp_path):
    rng = np.random.default_rng(0)
    unit = lambda x: x / np.linalg.norm(x, axis=1, keepdims=True)  # noqa: E731
    train = FeatureSet(unit(rng.normal(size=(30, 4))), rng.integers(0, 2, 30), 100.0, "fs")
    train.save(tmp_path / "train.npz")
    vals = []
    for s in (25.0, 50.0):
        FeatureSet(unit(rng.normal(size=(10, 4))), rng.integers(0, 2, 10), s, "fs").save(tmp_path / f"v{s}.npz")
        vals.append(tmp_path / f"v{s}.npz")
    code, _, _ = run(capsys, "knn-eval", "--train", tmp_path / "train.npz", "--val", *vals,
                     "--k", 1, 5, 20, "--output-dir", tmp_path)
    assert code == 0
    report = KnnReport.read_csv(tmp_path / "knn-eval" / "knn_report.csv")
    assert len(report.rows) == 2 * 3


def test_posenc_dump(capsys, tmp_path):
    code, _, _ = run(capsys, "posenc-dump", "--grid-side", 3, "--gsd", 2.0, "--embed-dim", 8,
                     "--output-dir", tmp_path)
    assert code == 0
    files = list((tmp_path / "posenc-dump").glob("*.csv"))
    with open(files[0]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9 and float(rows[0]["f1"]) == 1.0


@pytest.mark.slow
def test_end_to_end_smoke(capsys, tmp_path):
    start = time.perf_counter()
    out = tmp_path / "runs"
    assert run(capsys, "synth-data", "--n-scenes", 40, "--output-dir", out)[0] == 0
    manifest = out / "synth-data" / "manifest.csv"
    assert run(capsys, "pretrain", "--manifest", manifest, "--steps", 200, "--output-dir", out)[0] == 0
    ckpt = out / "pretrain" / "final.ckpt"
    assert run(capsys, "extract", "--checkpoint", ckpt, "--manifest", manifest, "--scales", 50, 100,
               "--output-dir", out)[0] == 0
    assert sorted(p.name for p in (out / "extract").glob("*.npz")) == ["manifest_100.npz", "manifest_50.npz"]
    code, text, _ = run(capsys, "knn-eval", "--checkpoint", ckpt, "--train-manifest", manifest,
                        "--val-manifest", manifest, "--k", 5, "--output-dir", out)
    assert code == 0
    assert len(KnnReport.read_csv(out / "knn-eval" / "knn_report.csv").rows) == 4
    code, _, _ = run(capsys, "targets-preview", "--image", out / "synth-data" / "images" / "scene_00000.png",
                     "--gsd", 0.5, "--checkpoint", ckpt, "--output-dir", out)
    assert code == 0 and (out / "targets-preview" / "pred_high.png").exists()
    assert time.perf_counter() - start < 600
