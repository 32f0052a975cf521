import json
import subprocess
import sys

import pytest

from rnada.cli import main

TINY = {"n_kitchens": 3, "n_verbs": 3, "n_nouns": 3, "n_frames": 3, "frame_dim": 4,
        "latent_dim": 4, "samples_per_kitchen": 5, "eval_per_kitchen": 3}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data_dir(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(TINY))
    code, _, _ = run(["gen-data", "--spec", spec, "--out", tmp_path / "d", "--seed", 1], capsys)
    assert code == 0
    return tmp_path / "d"


def _config(tmp_path, **extra):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"feat_dim": 4, "epochs": 2, "batch_size": 5, **extra}))
    return path


def test_gen_data_writes_four_identical_files(tmp_path, capsys, data_dir):
    assert sorted(p.name for p in data_dir.iterdir()) == [
        "meta.json", "source_train.ndjson", "target_eval.ndjson", "target_train.ndjson"]
    spec = tmp_path / "spec.json"
    run(["gen-data", "--spec", spec, "--out", tmp_path / "again", "--seed", 1], capsys)
    for f in data_dir.iterdir():
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_missing_out_is_usage_error():
    proc = subprocess.run([sys.executable, "-m", "rnada", "gen-data"], capture_output=True, text=True)
    assert proc.returncode == 2 and "--out" in proc.stderr


def test_bad_spec_is_usage_error(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps({"n_kitchens": 0}))
    code, _, err = run(["gen-data", "--spec", spec, "--out", tmp_path / "x"], capsys)
    assert code == 2 and "n_kitchens" in err


def test_train_source_only(tmp_path, capsys, data_dir):
    code, out, _ = run(["train", "--config", _config(tmp_path), "--data", data_dir,
                        "--out", tmp_path / "run", "--preset", "source-only"], capsys)
    assert code == 0
    assert json.loads(out)["losses"] == []
    log = [json.loads(line) for line in (tmp_path / "run" / "loss_log.ndjson").read_text().splitlines()]
    assert len(log) == 2 and all(set(e["components"]) == {"cls"} for e in log)
    assert set(log[0]) >= {"epoch", "lr", "components", "total"}


def test_train_mstaa_logs_seven_adversarial_components(tmp_path, capsys, data_dir):
    code, _, _ = run(["train", "--config", _config(tmp_path), "--data", data_dir,
                      "--out", tmp_path / "run", "--preset", "mstaa"], capsys)
    assert code == 0
    entry = json.loads((tmp_path / "run" / "loss_log.ndjson").read_text().splitlines()[0])
    assert len([k for k in entry["components"] if k.startswith("adv_")]) == 7


def test_train_is_byte_deterministic(tmp_path, capsys, data_dir):
    cfg = _config(tmp_path, ensemble_size=2, losses=["rna", "mec", "cent"])
    for name in ("a", "b"):
        assert run(["train", "--config", cfg, "--data", data_dir, "--out", tmp_path / name], capsys)[0] == 0
    for f in ("checkpoint.json", "loss_log.ndjson"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_invalid_json_config_reports_location(tmp_path, capsys, data_dir):
    cfg = tmp_path / "broken.json"
    cfg.write_text('{\n  "epochs": 2,\n  "seed": \n}')
    code, _, err = run(["train", "--config", cfg, "--data", data_dir, "--out", tmp_path / "r"], capsys)
    assert code == 2 and "line 4" in err


def test_unknown_config_key(tmp_path, capsys, data_dir):
    code, _, err = run(["train", "--config", _config(tmp_path, dropout=0.7), "--data", data_dir,
                        "--out", tmp_path / "r"], capsys)
    assert code == 2 and "dropout" in err


def test_train_without_data_is_usage_error(tmp_path, capsys):
    code, _, _ = run(["train", "--config", _config(tmp_path), "--out", tmp_path / "r"], capsys)
    assert code == 2


def test_train_with_inline_genspec(tmp_path, capsys):
    code, _, _ = run(["train", "--config", _config(tmp_path, data=TINY), "--out", tmp_path / "r"], capsys)
    assert code == 0 and (tmp_path / "r" / "checkpoint.json").is_file()


def test_eval_report_and_per_kitchen(tmp_path, capsys, data_dir):
    run(["train", "--config", _config(tmp_path, ensemble_size=2), "--data", data_dir,
         "--out", tmp_path / "run"], capsys)
    ck = tmp_path / "run" / "checkpoint.json"
    code, out, _ = run(["eval", "--checkpoint", ck, "--data", data_dir], capsys)
    report = json.loads(out)
    assert code == 0
    assert set(report) >= {"verb", "noun", "action", "disagreement"}
    assert set(report["verb"]) == {"top1", "top5"}
    code, out, _ = run(["eval", "--checkpoint", ck, "--data", data_dir, "--per-kitchen",
                        "--csv", tmp_path / "t.csv"], capsys)
    assert sorted(json.loads(out)["per_kitchen"]) == ["0", "1", "2"]
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 5


def test_eval_dim_mismatch(tmp_path, capsys, data_dir):
    run(["train", "--config", _config(tmp_path), "--data", data_dir, "--out", tmp_path / "run"], capsys)
    spec = tmp_path / "wide.json"
    spec.write_text(json.dumps({**TINY, "frame_dim": 6}))
    run(["gen-data", "--spec", spec, "--out", tmp_path / "wide"], capsys)
    code, _, err = run(["eval", "--checkpoint", tmp_path / "run" / "checkpoint.json",
                        "--data", tmp_path / "wide"], capsys)
    assert code == 2 and "frame_dim" in err


def test_gradcheck_single_and_all(capsys):
    code, out, _ = run(["gradcheck", "--loss", "rna", "--seed", 0], capsys)
    res = json.loads(out)
    assert code == 0 and res["checks"]["rna"]["max_error"] < 1e-4
    code, out, _ = run(["gradcheck", "all", "--n-seeds", 2], capsys)
    res = json.loads(out)
    assert code == 0 and res["passed"] and "grl" in res["checks"] and len(res["checks"]) == 9


def test_gradcheck_unknown_loss(capsys):
    code, _, err = run(["gradcheck", "--loss", "dropout"], capsys)
    assert code == 2 and "dropout" in err
