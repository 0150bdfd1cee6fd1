import json
import subprocess
import sys

import jsonschema
import pytest

from cmfusion import cli
from cmfusion import tensor as T
from cmfusion.metrics import REPORT_SCHEMA

SPEC = {"n_dialogues": 0, "d_a": 5, "d_t": 4, "n_classes": 3, "min_utterances": 2, "max_utterances": 3,
        "class_mean_scale": 5.0, "seed": 1, "splits": {"train": 8, "val": 3, "test": 3}}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    assert cli.main(["synth", "--config", str(tmp_path / "spec.json"), "--out", str(tmp_path / "data")]) == 0
    run = {"model": {"d_model": 8}, "train": {"max_epochs": 3, "patience": 3, "batch_size": 4},
           "data": {"train": "data/train.jsonl", "val": "data/val.jsonl", "test": "data/test.jsonl"},
           "seeds": [0, 1]}
    (tmp_path / "run.json").write_text(json.dumps(run))
    return tmp_path


def test_synth_writes_three_splits_and_is_reproducible(workdir, capsys):
    for name, n in SPEC["splits"].items():
        lines = (workdir / "data" / f"{name}.jsonl").read_text().splitlines()
        assert len({json.loads(x)["dialogue_id"] for x in lines[1:]}) == n
    first = {p.name: p.read_bytes() for p in (workdir / "data").iterdir()}
    cli.main(["synth", "--config", str(workdir / "spec.json"), "--out", str(workdir / "again")])
    assert {p.name: p.read_bytes() for p in (workdir / "again").iterdir()} == first
    assert "train: 8 dialogues" in capsys.readouterr().out


def test_synth_rejects_single_class(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"n_classes": 1}))
    assert cli.main(["synth", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path)]) == 2


def test_synth_unwritable_output(tmp_path):
    (tmp_path / "file").write_text("")
    (tmp_path / "s.json").write_text(json.dumps({"splits": {"train": 1}}))
    assert cli.main(["synth", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "file" / "x")]) == 3


def test_train_then_eval_reproduces_test_metrics(workdir, capsys):
    out = workdir / "run"
    assert cli.main(["train", "--config", str(workdir / "run.json"), "--out", str(out)]) == 0
    report = json.loads((out / "train_report.json").read_text())
    assert report["train"]["epochs"] <= 3
    capsys.readouterr()
    assert cli.main(["eval", "--config", str(workdir / "run.json"), "--checkpoint", str(out / "checkpoint.cmf"),
                     "--format", "json", "--out", str(out)]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev == report["test"]
    jsonschema.validate(json.loads((out / "eval_report.json").read_text()), REPORT_SCHEMA)


def test_train_twice_gives_identical_checkpoints(workdir):
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(workdir / "run.json"), "--out", str(workdir / name)]) == 0
    assert (workdir / "a" / "checkpoint.cmf").read_bytes() == (workdir / "b" / "checkpoint.cmf").read_bytes()


def test_missing_train_file_names_path(workdir, capsys):
    bad = workdir / "nowhere.jsonl"
    code = cli.main(["train", "--config", str(workdir / "run.json"), "--data", str(bad)])
    assert code == 3 and str(bad) in capsys.readouterr().err


def test_bad_configs_exit_2(workdir):
    (workdir / "bad.json").write_text("{nope")
    assert cli.main(["train", "--config", str(workdir / "bad.json")]) == 2
    (workdir / "bad.json").write_text(json.dumps({"train": {"learning_rate": -1}}))
    assert cli.main(["train", "--config", str(workdir / "bad.json")]) == 2
    assert cli.main(["train", "--config", str(workdir / "missing.json")]) == 2
    assert cli.main(["frobnicate"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_exits_4(workdir, capsys):
    run = json.loads((workdir / "run.json").read_text())
    run["train"]["learning_rate"] = 1e300
    (workdir / "hot.json").write_text(json.dumps(run))
    assert cli.main(["train", "--config", str(workdir / "hot.json"), "--out", str(workdir / "hot")]) == 4
    assert "epoch" in capsys.readouterr().err


def test_eval_dimension_mismatch_names_both(workdir, capsys):
    out = workdir / "run"
    cli.main(["train", "--config", str(workdir / "run.json"), "--out", str(out)])
    (workdir / "s2.json").write_text(json.dumps({**SPEC, "d_t": 6}))
    cli.main(["synth", "--config", str(workdir / "s2.json"), "--out", str(workdir / "d2")])
    capsys.readouterr()
    code = cli.main(["eval", "--checkpoint", str(out / "checkpoint.cmf"), "--data", str(workdir / "d2" / "test.jsonl")])
    err = capsys.readouterr().err
    assert code == 3 and "d_text_in = 4" in err and "d_text_in = 6" in err


def test_eval_tampered_checkpoint_exits_4(workdir):
    out = workdir / "run"
    cli.main(["train", "--config", str(workdir / "run.json"), "--out", str(out)])
    ck = out / "checkpoint.cmf"
    ck.write_bytes(b"NOTACKPT" + ck.read_bytes()[8:])
    assert cli.main(["eval", "--config", str(workdir / "run.json"), "--checkpoint", str(ck)]) == 4


def test_ablate_unknown_variant_exits_2(workdir):
    assert cli.main(["ablate", "--config", str(workdir / "run.json"), "--variants", "full,nope"]) == 2


def test_ablate_writes_each_variant(workdir, capsys):
    code = cli.main(["ablate", "--config", str(workdir / "run.json"), "--variants", "text-only,full",
                     "--out", str(workdir / "abl"), "--format", "json"])
    assert code == 0
    payload = json.loads((workdir / "abl" / "ablation.json").read_text())
    assert [v["id"] for v in payload["variants"]] == ["full", "text-only"]
    assert all(len(v["scores"]) == 2 for v in payload["variants"])


def test_gradcheck_flags_a_corrupted_backward_rule(monkeypatch, tmp_path, capsys):
    original = T.relu

    def bad_relu(x):
        out = original(x)
        rule = out._backward

        def skewed(g):
            return rule(1.1 * g)

        out._backward = skewed
        return out

    monkeypatch.setattr(T, "relu", bad_relu)
    (tmp_path / "c.json").write_text(json.dumps({"model": {"n_sca_layers": 1}}))
    assert cli.main(["gradcheck", "--config", str(tmp_path / "c.json")]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "cmfusion.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
