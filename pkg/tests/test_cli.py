import json

import numpy as np
import pytest

from gcnnseg import cli
from gcnnseg import data as D
from gcnnseg import groups as G
from gcnnseg.model import ArchitectureConfig, build, save_model
from gcnnseg.tensor import read_checkpoint


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({
        "architecture": {"depth": 2, "base_width": 2},
        "train": {"epochs": 1, "batches_per_epoch": 2, "batch_size": 2},
        "data": {"image_size": 13, "cell_size": 1, "shapes_per_image": 2, "model_depth": 2},
    }))
    return path


@pytest.fixture
def dataset(tmp_path, config_file):
    out = tmp_path / "data"
    assert cli.main(["prepare", "--config", str(config_file), "--num-images", "10", "--out", str(out)]) == 0
    return out


def test_prepare_writes_manifest_and_is_reproducible(tmp_path, config_file, dataset):
    lines = (dataset / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 10
    again = tmp_path / "again"
    cli.main(["prepare", "--config", str(config_file), "--num-images", "10", "--out", str(again)])
    for rec in map(json.loads, lines):
        for key in ("image_path", "mask_path"):
            assert (dataset / rec[key]).read_bytes() == (again / rec[key]).read_bytes()


def test_prepare_bad_split_ratio(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"data": {"split_ratio": [1, 1], "image_size": 13, "model_depth": 2}}))
    assert cli.main(["prepare", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_keys_rejected(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"learning_rat": 0.1}}))
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp_path)]) == 1
    cfg.write_text("{not json")
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp_path)]) == 1


def test_train_smoke(tmp_path, config_file, dataset):
    run = tmp_path / "run"
    code = cli.main(["train", "--config", str(config_file), "--data", str(dataset), "--group", "p4",
                     "--out", str(run)])
    assert code == 0
    assert (run / "best.gunt").exists()
    resolved = json.loads((run / "config.json").read_text())
    assert resolved["architecture"]["group"] == "p4" and resolved["train"]["epochs"] == 1
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 2


def test_train_regime_half(tmp_path, config_file, dataset):
    run = tmp_path / "half"
    assert cli.main(["train", "--config", str(config_file), "--data", str(dataset), "--regime", "0.5",
                     "--out", str(run)]) == 0
    summary = json.loads((run / "summary.json").read_text())
    assert summary["n_train_used"] == summary["n_train_available"] // 2


def test_train_missing_dataset(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nowhere")]) == 1
    assert "prepare" in capsys.readouterr().err


def test_output_root_from_environment(tmp_path, config_file, dataset, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    assert cli.main(["train", "--config", str(config_file), "--data", str(dataset), "--group", "p1"]) == 0
    assert (tmp_path / "root" / "train-p1-seed0" / "best.gunt").exists()


def _checkpoint(tmp_path, group="p4m", dtype=np.float32, name="m.gunt"):
    model = build(ArchitectureConfig(group=group, depth=2, base_width=2), seed=0, dtype=dtype)
    path = tmp_path / name
    save_model(path, model)
    return path


def test_eval_reports(tmp_path, dataset, capsys):
    ckpt = _checkpoint(tmp_path)
    out = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset), "--split", "train",
                     "--out", str(out)]) == 0
    report = json.loads((out / "eval_train.json").read_text())
    assert {"dsc", "dsc_per_image", "per_image", "loss"} <= set(report)
    assert "micro DSC" in capsys.readouterr().out


def test_eval_oracle_predictions(tmp_path, dataset):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(_checkpoint(tmp_path)), "--data", str(dataset),
                     "--split", "train", "--oracle-predictions", "--out", str(out)]) == 0
    report = json.loads((out / "eval_train.json").read_text())
    assert report["dsc"] == 1.0 and report["dsc_per_image"] == 1.0


def test_eval_errors(tmp_path, config_file):
    ckpt = _checkpoint(tmp_path)
    # a dataset whose val split is empty
    data = D.generate_synthetic(D.SyntheticTaskConfig(num_images=3, image_size=13, cell_size=1, model_depth=2,
                                                      split_ratio=(1, 0, 0)))
    D.write_dataset(tmp_path / "d", data)
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "d"), "--split", "val"]) == 1
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "d"), "--group", "p1"]) == 1
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.gunt"), "--data", str(tmp_path / "d")]) == 1
    (tmp_path / "junk.gunt").write_bytes(b"junk")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "junk.gunt"), "--data", str(tmp_path / "d")]) == 1


@pytest.mark.parametrize("group", ["p4m", "p1"])
def test_equivcheck_fresh_model_passes(tmp_path, group, capsys):
    out = tmp_path / "eq"
    code = cli.main(["equivcheck", "--group", group, "--depth", "2", "--base-width", "2", "--f64",
                     "--skip-gradients", "--out", str(out)])
    text = capsys.readouterr().out
    assert code == 0, text
    report = json.loads((out / "equivcheck.json").read_text())
    assert report["passed"] and "FAIL" not in text
    if group == "p1":
        assert any(c["name"].endswith("/translation") for c in report["checks"])


def test_equivcheck_corrupted_table_fails(monkeypatch, capsys):
    real = G.build_index_table

    def corrupted(group, k):
        table = real(group, k)
        entries = table.entries.copy()
        if group.stabilizer_size > 1 and k > 1:
            # swap two taps of the quarter-turn copy
            entries[1, :, 0, 0], entries[1, :, 0, 1] = table.entries[1, :, 0, 1], table.entries[1, :, 0, 0]
        return G.IndexTable(group, k, entries)

    monkeypatch.setattr(G, "index_table", corrupted)
    code = cli.main(["equivcheck", "--group", "p4m", "--depth", "2", "--base-width", "2", "--f64",
                     "--skip-gradients"])
    lines = capsys.readouterr().out.splitlines()
    assert code == 2
    assert any(line.startswith("FAIL") and "equivariance/p4m/lift" in line for line in lines)


def test_stability_command(tmp_path):
    ckpt = _checkpoint(tmp_path, "p4m")
    img = np.random.default_rng(0).integers(0, 256, (13, 13, 3), dtype=np.uint8)
    D.save_image(tmp_path / "x.png", img)
    out = tmp_path / "st"
    assert cli.main(["stability", "--checkpoint", str(ckpt), "--image", str(tmp_path / "x.png"),
                     "--out", str(out)]) == 0
    summary = json.loads((out / "stability.json").read_text())
    assert summary["max_std"] < 1e-4
    maps = read_checkpoint(out / "stability.gunt")
    assert maps["mean"].shape == maps["std"].shape == (13, 13)
    assert D.load_image(out / "std.png").shape == (13, 13)

    p1 = _checkpoint(tmp_path, "p1", name="p1.gunt")
    assert cli.main(["stability", "--checkpoint", str(p1), "--image", str(tmp_path / "x.png"),
                     "--out", str(tmp_path / "st1")]) == 0
    assert (tmp_path / "st1" / "mean.png").exists()


def test_stability_bad_size(tmp_path):
    D.save_image(tmp_path / "x.png", np.zeros((12, 12, 3), np.uint8))
    assert cli.main(["stability", "--checkpoint", str(_checkpoint(tmp_path)), "--image",
                     str(tmp_path / "x.png"), "--out", str(tmp_path / "o")]) == 1


def test_identical_f64_runs_are_bit_identical(tmp_path, config_file, dataset):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", "--config", str(config_file), "--data", str(dataset), "--f64",
                         "--out", str(out)]) == 0
        runs.append(out)
    for f in ("metrics.jsonl", "best.gunt", "config.json"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
