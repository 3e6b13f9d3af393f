import json
import subprocess
import sys

import pytest

from idal.cli import main
from idal.data import load_csv
from idal.trainer import Trainer


def _json_blocks(text):
    """Top-level JSON objects printed to stdout, in order."""
    dec, out, i = json.JSONDecoder(), [], 0
    while i < len(text):
        if text[i] == "{":
            obj, i = dec.raw_decode(text, i)
            out.append(obj)
        else:
            i += 1
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--n-source", "160", "--n-target", "120", "--seed", "7",
                 "--out", str(out)]) == 0
    return out


def _train(data_dir, out, *extra):
    return main(["train", "--source", str(data_dir / "source.csv"),
                 "--target", str(data_dir / "target.csv"), "--out", str(out),
                 "--batch-size", "32", *extra])


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--k", "4", "--d", "8", "--seed", "7", "--n-source", "50",
                     "--n-target", "40", "--out", str(tmp_path / name)]) == 0
    for f in ("source.csv", "target.csv", "spec.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_data_defaults_round_trip(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path)]) == 0
    src, tgt = load_csv(tmp_path / "source.csv"), load_csv(tmp_path / "target.csv")
    assert len(src) == 2000 and len(tgt) == 2000 and src.dim == 8 and src.num_classes == 4
    assert json.loads((tmp_path / "spec.json").read_text())["spec"]["k"] == 4


def test_gen_data_rejects_single_class(tmp_path, capsys):
    assert main(["gen-data", "--k", "1", "--out", str(tmp_path)]) == 1
    assert "k" in capsys.readouterr().err
    assert not (tmp_path / "source.csv").exists()


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 1


def test_bad_batch_size_names_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--batch-size", "0", "--dry-run"])
    assert exc.value.code == 1 and "--batch-size" in capsys.readouterr().err


@pytest.mark.parametrize("preset,expected", [
    ("office31", (0.05, 0.1, 0.15, 0.15)), ("officehome", (0.05, 0.21, 0.25, 0.25)),
    ("visda", (0.05, 0.3, 0.25, 0.25)), ("domainnet", (0.05, 0.01, 0.2, 0.25))])
def test_preset_dry_run(preset, expected, capsys):
    assert main(["train", "--preset", preset, "--dry-run"]) == 0
    cfg = json.loads(capsys.readouterr().out)["config"]
    w = cfg["loss_weights"]
    assert (w["beta"], w["gamma"], w["delta"], w["eta"]) == expected
    assert (cfg["learning_rate"], cfg["batch_size"], cfg["weight_decay"]) == (1e-5, 32, 0.001)


def test_config_precedence(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"loss_weights": {"beta": 0.7}, "epochs": 3}))
    assert main(["train", "--preset", "office31", "--config", str(tmp_path / "c.json"),
                 "--epochs", "5", "--dry-run"]) == 0
    cfg = json.loads(capsys.readouterr().out)["config"]
    assert cfg["loss_weights"]["beta"] == 0.7 and cfg["epochs"] == 5
    assert cfg["loss_weights"]["gamma"] == 0.1


def test_invalid_config_value_is_usage_error(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"learning_rate": -1}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--dry-run"]) == 1


def test_missing_dataset_is_io_error(tmp_path):
    assert main(["train", "--source", str(tmp_path / "nope.csv"), "--target",
                 str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 3


def test_train_then_eval_matches_final_metrics(data_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(data_dir, out, "--epochs", "2") == 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    final = json.loads(lines[-1])
    assert json.loads((out / "config.json").read_text())["config"]["epochs"] == 2
    emb = (out / "embeddings.csv").read_text().splitlines()
    assert emb[0].endswith("eval_label,domain") and len(emb) == 1 + 160 + 120

    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint"),
                 "--target", str(data_dir / "target.csv"),
                 "--source", str(data_dir / "source.csv"), "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["target_accuracy"] == final["target_accuracy"]
    assert report["per_class_target_accuracy"] == final["per_class_target_accuracy"]
    assert report["source_accuracy"] == final["source_accuracy"]
    assert report["proxy_a_distance"] == final["proxy_a_distance"]

    assert main(["eval", "--checkpoint", str(out / "checkpoint"),
                 "--target", str(data_dir / "source.csv")]) == 0
    assert _json_blocks(capsys.readouterr().out)[-1]["source_accuracy"] == final["source_accuracy"]


def test_train_is_byte_deterministic(data_dir, tmp_path):
    for name in ("a", "b"):
        assert _train(data_dir, tmp_path / name, "--epochs", "1", "--seed", "4") == 0
    for f in ("metrics.jsonl", "embeddings.csv", "checkpoint/params.bin", "checkpoint/manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resume_after_interruption(data_dir, tmp_path, monkeypatch):
    assert _train(data_dir, tmp_path / "full", "--epochs", "3") == 0

    real = Trainer.run_epoch

    def crash_after_one(self):
        if self.epochs_completed >= 1:
            raise KeyboardInterrupt
        return real(self)

    monkeypatch.setattr(Trainer, "run_epoch", crash_after_one)
    with pytest.raises(KeyboardInterrupt):
        _train(data_dir, tmp_path / "part", "--epochs", "3")
    monkeypatch.setattr(Trainer, "run_epoch", real)
    assert _train(data_dir, tmp_path / "part", "--epochs", "3",
                  "--resume", str(tmp_path / "part" / "checkpoint")) == 0
    for f in ("metrics.jsonl", "checkpoint/params.bin", "embeddings.csv"):
        assert (tmp_path / "full" / f).read_bytes() == (tmp_path / "part" / f).read_bytes()


def test_zero_epoch_run(data_dir, tmp_path):
    out = tmp_path / "z"
    assert _train(data_dir, out, "--epochs", "0") == 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["format"] == "idal-metrics"
    manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert manifest["seed_state"]["epochs_completed"] == 0 and manifest["optimizer"]["step"] == 0


def test_nan_loss_exits_2_with_dump(data_dir, tmp_path, capsys):
    out = tmp_path / "nan"
    assert _train(data_dir, out, "--epochs", "2", "--lr", "1e200") == 2
    assert "failure.json" in capsys.readouterr().err
    assert "error" in json.loads((out / "failure.json").read_text())


def test_eval_missing_checkpoint(data_dir, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none"),
                 "--target", str(data_dir / "target.csv")]) == 3


def test_eval_shape_mismatch(data_dir, tmp_path):
    assert _train(data_dir, tmp_path / "r", "--epochs", "0") == 0
    assert main(["gen-data", "--d", "5", "--n-source", "8", "--n-target", "8",
                 "--out", str(tmp_path / "d5")]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint"),
                 "--target", str(tmp_path / "d5" / "target.csv")]) == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcheck_all_losses(seed, capsys):
    assert main(["gradcheck", "--seed", str(seed)]) == 0
    rows = [l for l in capsys.readouterr().out.splitlines() if l.endswith(("PASS", "FAIL"))]
    assert len(rows) == 6 and all(r.endswith("PASS") for r in rows)


def test_gradcheck_single_loss(capsys):
    assert main(["gradcheck", "--loss", "mmd"]) == 0
    rows = [l for l in capsys.readouterr().out.splitlines() if l.endswith("PASS")]
    assert len(rows) == 1 and rows[0].startswith("mmd")


def test_ablate_dry_run_lists_ladder(capsys):
    assert main(["ablate", "--dry-run", "--seeds", "2"]) == 0
    echo = json.loads(capsys.readouterr().out)
    assert [r["row"] for r in echo["rows"]] == ["clc+dis", "+MMD", "+MCC", "+PLMMD"]
    assert echo["seeds"] == [0, 1]
    first = echo["rows"][0]["loss_weights"]
    assert (first["gamma"], first["delta"], first["eta"]) == (0.0, 0.0, 0.0)


def test_ablate_small_run_and_row1_matches_train(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("IDAL_NUM_THREADS", "1")
    out = tmp_path / "abl"
    assert main(["ablate", "--source", str(data_dir / "source.csv"),
                 "--target", str(data_dir / "target.csv"), "--out", str(out),
                 "--epochs", "1", "--batch-size", "32", "--seeds", "1"]) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert [r["row"] for r in table] == ["clc+dis", "+MMD", "+MCC", "+PLMMD"]
    assert len((out / "ablation.txt").read_text().splitlines()) == 5

    assert _train(data_dir, tmp_path / "row1", "--epochs", "1", "--gamma", "0",
                  "--delta", "0", "--eta", "0") == 0
    final = json.loads((tmp_path / "row1" / "metrics.jsonl").read_text().splitlines()[-1])
    assert table[0]["target_accuracy"] == [final["target_accuracy"]]
    full = json.loads((tmp_path / "row1" / "config.json").read_text())
    assert full["config"]["loss_weights"]["beta"] > 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "idal", "gradcheck", "--loss", "im"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "PASS" in r.stdout
