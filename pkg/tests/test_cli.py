import json
import os

import numpy as np
import pytest

from solider.cli import main

SPEC_TEXT = """
height = 16
width = 16
identities = 3
images_per_identity = 8
"""

CONFIG_TEXT = """
seed = 5
image_height = 16
image_width = 16
patch_size = 2
embed_dim = 8
depths = 1,1
heads = 2,2
window_size = 2
proj_hidden = 16
proj_bottleneck = 8
prototypes = 12
parts = 2
head_hidden = 8
head_blocks = 1
batch_size = 8
epochs_dino = 1
epochs_solider = 1
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole command chain once; tests inspect the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.txt"
    spec.write_text(SPEC_TEXT)
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG_TEXT)
    corpus = root / "corpus"
    p1 = root / "phase1.ckpt"
    p2 = root / "phase2.ckpt"

    assert main(["gen-data", "--spec", str(spec), "--seed", "11",
                 "--out", str(corpus), "--downsample", "4"]) == 0
    assert main(["pretrain", "--config", str(cfg), "--data", str(corpus),
                 "--out", str(p1), "--metrics", str(root / "m1.csv")]) == 0
    assert main(["finetune", "--from", str(p1), "--data", str(corpus),
                 "--out", str(p2), "--metrics", str(root / "m2.csv")]) == 0
    assert main(["extract", "--ckpt", str(p2), "--lambda", "1.0",
                 "--images", str(corpus), "--out", str(root / "feats.npz"),
                 "--labels-out", str(root / "labels")]) == 0
    assert main(["analyze", "--ckpt", str(p2), "--data", str(corpus),
                 "--lambdas", "0,1", "--labels", "truth",
                 "--out", str(root / "sweep.csv")]) == 0
    return root


def test_help_exits_zero():
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0


def test_no_command_prints_help(capsys):
    assert main([]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", "x", "--bogus"])
    assert e.value.code == 2


def test_missing_required_flag_exits_3():
    with pytest.raises(SystemExit) as e:
        main(["pretrain", "--out", "x.ckpt"])
    assert e.value.code == 3
    with pytest.raises(SystemExit) as e:
        main(["extract", "--ckpt", "x", "--images", "d", "--out", "f"])
    assert e.value.code == 3


def test_config_parse_error_exits_4(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("this is not key value\n")
    assert main(["pretrain", "--config", str(bad), "--data", "d", "--out", "o"]) == 4
    assert "config error" in capsys.readouterr().err


def test_unknown_config_key_exits_4(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = 0.1\n")
    assert main(["pretrain", "--config", str(bad), "--data", "d", "--out", "o"]) == 4


def test_extract_lambda_out_of_range_exits_2(capsys):
    # validated before the checkpoint is touched, so a bogus path is fine
    assert main(["extract", "--ckpt", "/nope.ckpt", "--lambda", "1.5",
                 "--images", "d", "--out", "f"]) == 2
    assert "lambda must be in [0,1]" in capsys.readouterr().err


def test_missing_checkpoint_exits_1(tmp_path):
    assert main(["analyze", "--ckpt", str(tmp_path / "absent.ckpt"),
                 "--data", "d", "--out", str(tmp_path / "r.csv")]) == 1


def test_analyze_rejects_bad_lambda_list(pipeline):
    ckpt = str(pipeline / "phase2.ckpt")
    data = str(pipeline / "corpus")
    out = str(pipeline / "never.csv")
    assert main(["analyze", "--ckpt", ckpt, "--data", data,
                 "--lambdas", "0,2", "--out", out]) == 2
    assert main(["analyze", "--ckpt", ckpt, "--data", data,
                 "--lambdas", "abc", "--out", out]) == 2
    with pytest.raises(SystemExit) as e:
        main(["analyze", "--ckpt", ckpt, "--data", data,
              "--labels", "junk", "--out", out])
    assert e.value.code == 2


def test_bad_spec_exits_2(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("band_upper = 0.9\n")
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "c")]) == 2


def test_gen_data_artifacts(pipeline):
    corpus = pipeline / "corpus"
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["seed"] == 11
    assert manifest["downsample"] == 4
    assert len(manifest["images"]) == 24
    assert len(list(corpus.glob("img_*.png"))) == 24
    assert (corpus / "resolved.config").exists()


def test_pretrain_artifacts(pipeline):
    assert (pipeline / "phase1.ckpt").exists()
    prov = (pipeline / "phase1.ckpt.config").read_text()
    assert "seed=5" in prov
    lines = (pipeline / "m1.csv").read_text().splitlines()
    assert lines[0] == "step,lambda,l_dino,l_sm,total,lr,degenerate_count"
    assert len(lines) == 1 + 3  # 24 images / batch 8, one epoch


def test_finetune_artifacts(pipeline):
    lines = (pipeline / "m2.csv").read_text().splitlines()
    assert lines[0] == "step,lambda,l_dino,l_sm,total,lr,degenerate_count"
    assert len(lines) == 1 + 3
    assert (pipeline / "phase2.ckpt.config").exists()


def test_extract_artifacts(pipeline):
    with np.load(pipeline / "feats.npz") as data:
        feats = data["features"]
        files = data["files"]
    assert feats.shape == (24, 16)
    assert np.isfinite(feats).all()
    assert len(files) == 24
    labels = pipeline / "labels"
    assert (labels / "labels.bin").exists()
    assert len(list(labels.glob("*.png"))) == 24


def test_analyze_artifacts(pipeline):
    lines = (pipeline / "sweep.csv").read_text().splitlines()
    assert lines[0] == ("lambda,intra_image_distance,inter_image_distance,"
                        "part_probe_acc,identity_probe_acc")
    assert len(lines) == 3
    assert lines[1].startswith("0.0,")
    assert lines[2].startswith("1.0,")


def test_env_seed_used_when_no_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("SOLIDER_SEED", "77")
    spec = tmp_path / "spec.txt"
    spec.write_text(SPEC_TEXT)
    out = tmp_path / "corpus"
    assert main(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 77


def test_cli_seed_beats_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SOLIDER_SEED", "77")
    spec = tmp_path / "spec.txt"
    spec.write_text(SPEC_TEXT)
    out = tmp_path / "corpus"
    assert main(["gen-data", "--spec", str(spec), "--seed", "4",
                 "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 4


def test_env_seed_flows_into_run_config(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("SOLIDER_SEED", "123")
    cfg = tmp_path / "run.cfg"
    # same shape as the pipeline config but without a seed line
    cfg.write_text("\n".join(l for l in CONFIG_TEXT.splitlines()
                             if not l.startswith("seed")))
    out = tmp_path / "env.ckpt"
    assert main(["pretrain", "--config", str(cfg), "--data",
                 str(pipeline / "corpus"), "--out", str(out)]) == 0
    assert "seed=123" in (tmp_path / "env.ckpt.config").read_text()


def test_config_file_seed_beats_env(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("SOLIDER_SEED", "123")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CONFIG_TEXT)
    out = tmp_path / "file.ckpt"
    assert main(["pretrain", "--config", str(cfg), "--data",
                 str(pipeline / "corpus"), "--out", str(out)]) == 0
    assert "seed=5" in (tmp_path / "file.ckpt.config").read_text()


def test_finetune_rejects_architecture_change(pipeline, tmp_path, capsys):
    cfg = tmp_path / "wider.cfg"
    cfg.write_text(CONFIG_TEXT.replace("embed_dim = 8", "embed_dim = 16"))
    assert main(["finetune", "--from", str(pipeline / "phase1.ckpt"),
                 "--config", str(cfg), "--data", str(pipeline / "corpus"),
                 "--out", str(tmp_path / "x.ckpt")]) == 4
    assert "embed_dim" in capsys.readouterr().err


def test_extract_empty_image_dir(pipeline, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    out = tmp_path / "feats.npz"
    assert main(["extract", "--ckpt", str(pipeline / "phase2.ckpt"),
                 "--lambda", "0.5", "--images", str(empty),
                 "--out", str(out)]) == 0
    assert "no images found" in capsys.readouterr().out
    with np.load(out) as data:
        assert data["features"].shape[0] == 0


def test_version_flag():
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
