"""Command-line surface: exit codes, config parsing with override flags,
and the on-disk artifacts every subcommand leaves behind."""
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from fingerspell.cli import load_run_config, main
from fingerspell.datamodel import (DataError, load_checkpoint,
                                   read_annotations)

TINY_TOML = """
[synth]
seed = 5
n_strong = 6
n_weak = 8
n_heldout = 3
n_signers = 2
slack_max = 6
rest_min = 2
rest_max = 4
word_min_len = 3
word_max_len = 4
p_abbrev = 0.0
defect_empty_frac = 0.125
defect_double_frac = 0.0

[model]
embed = 16
branch_layers = 1
fusion_layers = 1
heads = 2
ffn_dim = 32
head_hidden = 16
dropout = 0.1

[train]
epochs = 2
lr = 1e-3
virtual_batch = 4

[detector]
layer_units = [16, 8]
dropout = 0.1

[detector_train]
epochs = 2
lr = 1e-2

[pipeline]
iterations = 1
seed = 11
"""


@pytest.fixture(scope="module")
def config_path(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("cfg") / "run.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def corpus_dir(config_path, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--config", str(config_path), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def detector_ckpt(config_path, corpus_dir, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("det")
    assert main(["train-detector", "--config", str(config_path),
                 "--data", str(corpus_dir), "--out", str(out)]) == 0
    return out / "detector.fsckpt"


@pytest.fixture(scope="module")
def recognizer_ckpt(config_path, corpus_dir, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("recog")
    assert main(["train-recognizer", "--config", str(config_path),
                 "--data", str(corpus_dir), "--out", str(out)]) == 0
    return out / "recognizer.fsckpt"


# ---------------------------------------------------------------------------
# exit codes and usage

def test_no_command_exits_1(capsys):
    assert main([]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_command_exits_1(capsys):
    assert main(["transmogrify"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_unknown_flag_exits_1(corpus_dir):
    assert main(["synth", "--out", "x", "--bogus"]) == 1


def test_missing_required_flag_exits_1():
    assert main(["synth"]) == 1  # --out is required


def test_missing_data_dir_exits_1(tmp_path, capsys):
    assert main(["train-detector", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[synth\n", encoding="utf-8")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_unknown_config_key_exits_1(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[synth]\nwibble = 3\n", encoding="utf-8")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_runtime_failure_exits_2(monkeypatch, tmp_path, capsys):
    import fingerspell.cli as cli_mod

    def boom(cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli_mod, "make_corpus", boom)
    assert main(["synth", "--out", str(tmp_path / "o")]) == 2
    assert "failure" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config file semantics

def test_load_run_config_sections(config_path):
    rc = load_run_config(config_path)
    assert rc.synth.n_strong == 6
    assert rc.model.embed == 16
    assert rc.train.epochs == 2
    assert rc.detector.layer_units == (16, 8)
    assert rc.detector_train.epochs == 2
    assert rc.pipeline.iterations == 1
    assert rc.pipeline.seed == 11


def test_load_run_config_rejects_unknown_section(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[nonsense]\nx = 1\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_run_config(p)


def test_load_run_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[train]\nlearning_rate = 0.1\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_run_config(p)


def test_load_run_config_loss_weights_table(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[train]\nloss_weights = { lambda_f = 0.5, lambda_ctc = 0.5 }\n",
                 encoding="utf-8")
    rc = load_run_config(p)
    assert rc.train.loss_weights.lambda_f == 0.5
    p.write_text("[train]\nloss_weights = { lambda_x = 1.0 }\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_run_config(p)


def test_load_run_config_type_checks(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[train]\naugment = 3\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_run_config(p)
    p.write_text("[train]\nepochs = true\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_run_config(p)


# ---------------------------------------------------------------------------
# subcommand artifacts

def test_synth_writes_corpus(corpus_dir):
    for name in ("clips.jsonl", "strong.jsonl", "weak.jsonl", "heldout.jsonl",
                 "masks.json", "manifest.json"):
        assert (corpus_dir / name).exists(), name
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    assert manifest["config"]["n_strong"] == 6
    assert len(read_annotations(corpus_dir / "weak.jsonl")) == 8


def test_train_detector_checkpoint(detector_ckpt):
    ckpt = load_checkpoint(detector_ckpt)
    assert ckpt.model_kind == "detector"
    assert tuple(ckpt.arch_config["layer_units"]) == (16, 8)


def test_refilter_reports_stage_counts(config_path, corpus_dir, detector_ckpt,
                                       tmp_path, capsys):
    out = tmp_path / "refilter"
    assert main(["refilter", "--config", str(config_path),
                 "--data", str(corpus_dir), "--detector", str(detector_ckpt),
                 "--out", str(out)]) == 0
    lines = (out / "refilter_report.csv").read_text().strip().splitlines()
    assert lines[0] == "stage,count"
    counts = {row.split(",")[0]: int(row.split(",")[1]) for row in lines[1:]}
    assert set(counts) == {"input", "no_fingerspelling", "multiple_events", "kept"}
    assert counts["input"] == 8
    assert (counts["kept"] + counts["no_fingerspelling"]
            + counts["multiple_events"]) == 8
    kept = read_annotations(out / "weak_refiltered.jsonl")
    assert len(kept) == counts["kept"]


def test_train_frame_clf_checkpoint(config_path, corpus_dir, tmp_path):
    out = tmp_path / "fc"
    assert main(["train-frame-clf", "--config", str(config_path),
                 "--data", str(corpus_dir), "--out", str(out)]) == 0
    ckpt = load_checkpoint(out / "frame_clf.fsckpt")
    assert ckpt.model_kind == "frame_classifier"


def test_train_recognizer_checkpoint(recognizer_ckpt):
    ckpt = load_checkpoint(recognizer_ckpt)
    assert ckpt.model_kind == "recognizer"
    assert ckpt.arch_config["embed"] == 16


def test_no_lip_flag_changes_architecture(config_path, corpus_dir, tmp_path):
    out = tmp_path / "nolip"
    assert main(["train-recognizer", "--config", str(config_path),
                 "--data", str(corpus_dir), "--out", str(out), "--no-lip"]) == 0
    ckpt = load_checkpoint(out / "recognizer.fsckpt")
    assert ckpt.arch_config["use_lip"] is False


def test_annotate_round(config_path, corpus_dir, tmp_path, capsys):
    out = tmp_path / "ann"
    assert main(["annotate", "--config", str(config_path),
                 "--data", str(corpus_dir), "--out", str(out),
                 "--threshold", "0.4"]) == 0
    assert (out / "accepted.jsonl").exists()
    assert (out / "recognizer.fsckpt").exists()
    assert (out / "frame_clf.fsckpt").exists()
    assert "held-out CER" in capsys.readouterr().out


def test_pipeline_runs_and_is_deterministic(config_path, tmp_path, capsys):
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    assert main(["pipeline", "--config", str(config_path),
                 "--out", str(out1)]) == 0
    assert main(["pipeline", "--config", str(config_path),
                 "--out", str(out2)]) == 0
    rows = json.loads((out1 / "metrics.json").read_text())
    assert [r["iteration"] for r in rows] == [0, 1]
    assert ((out1 / "metrics.json").read_bytes()
            == (out2 / "metrics.json").read_bytes())
    for name in ("recognizer_iter0.fsckpt", "recognizer_iter1.fsckpt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    ET.fromstring((out1 / "cer_curve.svg").read_text())


def test_pipeline_iterations_flag_overrides_config(config_path, tmp_path):
    out = tmp_path / "p3"
    assert main(["pipeline", "--config", str(config_path), "--out", str(out),
                 "--iterations", "2"]) == 0
    rows = json.loads((out / "metrics.json").read_text())
    assert [r["iteration"] for r in rows] == [0, 1, 2]


def test_pipeline_seed_flag_changes_output(config_path, tmp_path):
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert main(["pipeline", "--config", str(config_path), "--out", str(out1),
                 "--seed", "1"]) == 0
    assert main(["pipeline", "--config", str(config_path), "--out", str(out2),
                 "--seed", "2"]) == 0
    a = (out1 / "recognizer_iter0.fsckpt").read_bytes()
    b = (out2 / "recognizer_iter0.fsckpt").read_bytes()
    assert a != b


def test_eval_reports(config_path, corpus_dir, recognizer_ckpt, detector_ckpt,
                      tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(config_path), "--data", str(corpus_dir),
                 "--recognizer", str(recognizer_ckpt),
                 "--detector", str(detector_ckpt), "--out", str(out)]) == 0
    lines = (out / "report.csv").read_text().strip().splitlines()
    assert lines[0] == "letter,support,recall"
    assert len(lines) == 27
    summary = json.loads((out / "eval_summary.json").read_text())
    assert {"cer", "avg_class_accuracy", "n_items", "detector_auc"} <= set(summary)
    assert 0.0 <= summary["cer"]
    ET.fromstring((out / "confusion.svg").read_text())
    ET.fromstring((out / "roc.svg").read_text())
    assert "CER" in capsys.readouterr().out


def test_viz_outputs(config_path, corpus_dir, recognizer_ckpt, detector_ckpt,
                     tmp_path):
    run = tmp_path / "run"
    assert main(["pipeline", "--config", str(config_path),
                 "--out", str(run)]) == 0
    out = tmp_path / "viz"
    assert main(["viz", "--config", str(config_path), "--data", str(corpus_dir),
                 "--metrics", str(run / "metrics.json"),
                 "--detector", str(detector_ckpt),
                 "--recognizer", str(recognizer_ckpt),
                 "--clips", "2", "--out", str(out)]) == 0
    svgs = sorted(p.name for p in out.glob("*.svg"))
    assert "cer_curve.svg" in svgs
    assert any(n.startswith("timeline_") for n in svgs)
    assert any(n.startswith("letters_") for n in svgs)
    for p in out.glob("*.svg"):
        ET.fromstring(p.read_text())


def test_viz_with_no_inputs_exits_1(corpus_dir, tmp_path, capsys):
    assert main(["viz", "--data", str(corpus_dir),
                 "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err
