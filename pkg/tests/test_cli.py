import json

import pytest

from radnet.cli import main
from radnet.config import DEFAULTS, load_config
from radnet.errors import ConfigError
from radnet.io import read_csv, read_volume

TINY = {
    "phantom.n_volumes": 2, "phantom.slices": 8, "phantom.size": 32,
    "train.epochs": 2, "train.seq_len": 4,
    "model.growth_rate": 2, "model.init_channels": 4, "model.layers_per_block": 2, "model.lstm_hidden": 4,
    "model.input_size": 32,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.json").write_text(json.dumps(TINY))
    assert main(["phantom-gen", "--config", str(root / "c.json"), "--out", str(root / "data"), "--seed", "3"]) == 0
    return root


def run(root, *argv):
    return main([a.replace("@", str(root)) for a in argv])


def test_unknown_subcommand(capsys):
    assert main(["bogus"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_missing_flag_is_usage_error(capsys):
    assert main(["train"]) == 1
    assert "--data" in capsys.readouterr().err


def test_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "c.json").write_text('{"train.epochz": 3}')
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
    assert main(["selftest", "--config", str(tmp_path / "c.json")]) == 1


def test_every_key_has_a_default():
    cfg = load_config()
    assert cfg == DEFAULTS
    assert cfg["train.epochs"] == 60 and cfg["eval.min_run"] == 3 and cfg["model.growth_rate"] == 12


def test_phantom_gen_layout(workdir):
    assert len(read_csv(workdir / "data" / "manifest.csv", ("volume_id", "image", "mask", "n_slices", "ct_label"))) == 2
    assert len(read_csv(workdir / "data" / "labels.csv", ("volume_id", "slice_index", "label"))) == 16


def test_train_twice_identical(workdir):
    for name in ("a.ckpt", "b.ckpt"):
        assert run(workdir, "train", "--config", "@/c.json", "--data", "@/data", "--out", f"@/{name}") == 0
    assert (workdir / "a.ckpt").read_bytes() == (workdir / "b.ckpt").read_bytes()
    log = read_csv(str(workdir / "a.ckpt") + ".log.csv",
                   ("epoch", "lr", "total_loss", "cls_loss", "aux1_loss", "aux2_loss", "aux3_loss", "train_acc", "val_acc"))
    assert len(log) == 2


def test_train_seed_flag_changes_checkpoint(workdir):
    assert run(workdir, "train", "--config", "@/c.json", "--data", "@/data", "--out", "@/s.ckpt", "--seed", "9") == 0
    assert run(workdir, "train", "--config", "@/c.json", "--data", "@/data", "--out", "@/t.ckpt") == 0
    assert (workdir / "s.ckpt").read_bytes() != (workdir / "t.ckpt").read_bytes()


def test_predict_and_evaluate(workdir, capsys):
    assert run(workdir, "train", "--config", "@/c.json", "--data", "@/data", "--out", "@/m.ckpt") == 0
    before = (workdir / "data" / "truth.csv").read_bytes()
    assert run(workdir, "predict", "--ckpt", "@/m.ckpt", "--data", "@/data", "--out", "@/p.csv",
               "--seg-out", "@/seg") == 0
    rows = read_csv(workdir / "p.csv", ("volume_id", "slice_index", "prob", "pred"))
    assert len(rows) == 16
    seg = read_volume(workdir / "seg" / "phantom_000.aux3.rvol")
    assert seg.kind == "mask" and seg.dims == (8, 32, 32)
    capsys.readouterr()
    assert run(workdir, "evaluate", "--pred", "@/p.csv", "--truth", "@/data/truth.csv",
               "--radiologist", "@/data/truth.csv", "--out", "@/report.csv") == 0
    out = capsys.readouterr().out
    assert "Accuracy" in out and "100.00%" in out
    report = read_csv(workdir / "report.csv", ("rater", "accuracy", "recall", "precision", "f1", "n"))
    assert [r["rater"] for r in report] == ["truth", "RADnet"]
    assert (workdir / "report.csv.config.json").is_file()
    assert (workdir / "data" / "truth.csv").read_bytes() == before


def test_evaluate_ct_level_predictions(workdir, capsys):
    assert run(workdir, "evaluate", "--pred", "@/data/truth.csv", "--truth", "@/data/truth.csv") == 0
    assert capsys.readouterr().out.count("100.00%") == 4


def test_evaluate_missing_truth(workdir):
    assert run(workdir, "evaluate", "--pred", "@/data/truth.csv", "--truth", "@/nope.csv") == 2


def test_corrupt_checkpoint_exit_code(workdir):
    (workdir / "bad.ckpt").write_bytes(b"NOTACKPT" + bytes(32))
    assert run(workdir, "predict", "--ckpt", "@/bad.ckpt", "--data", "@/data", "--out", "@/x.csv") == 2


def test_preprocess(workdir):
    assert run(workdir, "preprocess", "--data", "@/data", "--out", "@/prep") == 0
    vol = read_volume(workdir / "prep" / "volumes" / "phantom_000.rvol")
    assert vol.kind == "normalized" and vol.dims == (8, 250, 250)
    assert run(workdir, "preprocess", "--data", "@/prep", "--out", "@/prep2") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(workdir, tmp_path):
    cfg = dict(TINY, **{"train.lr0": 1e30, "train.epochs": 3})
    (tmp_path / "d.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "d.json"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path / "d.ckpt")]) == 4


def test_gradcheck_and_selftest(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "conv_transpose2d_x8" in out and "bilstm" in out and "FAIL" not in out
    assert main(["selftest"]) == 0
    assert "aggregation_oracle" in capsys.readouterr().out
