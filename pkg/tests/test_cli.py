import hashlib

import numpy as np
import pytest

from mhitnet.cli import ABLATION_ORDER, main
from mhitnet.config import MODULES, RunConfig, ablation_label
from mhitnet.data import read_pgm

TINY = """\
width = 0.125
blocks = 1,1,1,1
image_size = 16
n_train = 8
n_val = 4
batch_size = 4
epochs = 1
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_eval_without_checkpoint_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_unknown_command_and_flag(capsys):
    for argv in (["fly"], ["bench", "--speed", "3"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_missing_checkpoint_file_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt")])
    assert exc.value.code == 2


def test_invalid_config_is_validation_failure(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("heads = 3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert "heads" in capsys.readouterr().err


def test_train_eval_predict_and_determinism(tmp_path, cfg_file, capsys):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
        runs.append(out)
    for f in ("model.ckpt", "train_log.csv", "config.txt"):
        assert _digest(runs[0] / f) == _digest(runs[1] / f)
    header = (runs[0] / "train_log.csv").read_text().splitlines()[0]
    assert header == "epoch,step,lr,loss,val_dice"

    ckpt = str(runs[0] / "model.ckpt")
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_file), "--checkpoint", ckpt, "--csv", str(tmp_path / "m.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split()[:5] == ["Method", "AC", "SE", "AUC", "DS"]
    assert out[2].startswith("Backbone+RAPP+PAA+HCA")

    pred_dir = tmp_path / "pred"
    assert main(["predict", "--config", str(cfg_file), "--checkpoint", ckpt, "--out", str(pred_dir)]) == 0
    masks = sorted(pred_dir.glob("*_mask.pgm"))
    assert len(masks) == 4
    assert set(np.unique(read_pgm(masks[0]))) <= {0, 255}
    attn = read_pgm(pred_dir / "0000_attn_skip1.pgm")
    assert attn.shape == (8, 8) and attn.max() == 255 and attn.min() == 0


def test_predict_on_explicit_images(tmp_path, cfg_file):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(data)]) == 0
    assert len(list((data / "train").glob("image_*.pgm"))) == 8
    assert main(["train", "--config", str(cfg_file), "--set", f"data_dir={data}", "--out", str(tmp_path / "r")]) == 0
    img = str(data / "val" / "image_0001.pgm")
    out = tmp_path / "p"
    assert main(["predict", "--config", str(cfg_file), "--checkpoint", str(tmp_path / "r" / "model.ckpt"),
                 "--input", img, "--out", str(out)]) == 0
    assert (out / "image_0001_mask.pgm").exists()


def test_bench_prints_verdicts(capsys):
    assert main(["bench", "--size", "32", "--width", "0.125", "--iters", "2", "--set", "blocks=1,1,1,1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert "FPS" in lines[0]
    assert lines[1].startswith("FPS >= 30") and lines[2].startswith("FPS >= 60")


def test_ablation_configs_are_consistent():
    assert len(set(ABLATION_ORDER)) == 8
    base = RunConfig()
    for flags in ABLATION_ORDER:
        cfg = base.with_modules(*flags)
        on = {m for k in (1, 2, 3) for m in MODULES if getattr(cfg, f"skip{k}_{m}")}
        # the row label and the generated config agree, so a superset row
        # can never lose a module that a subset row has
        assert on == {m for m in MODULES if m.upper() in ablation_label(flags).split("+")}


def test_ablate_emits_eight_rows(tmp_path, cfg_file, capsys):
    csv_path = tmp_path / "ablate.csv"
    assert main(["ablate", "--config", str(cfg_file), "--csv", str(csv_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    table = out[out.index(next(l for l in out if l.startswith("Method"))):]
    rows = table[2:]
    assert len(rows) == 8
    assert rows[0].startswith("Backbone ") and rows[-1].startswith("Backbone+RAPP+PAA+HCA")
    assert len(csv_path.read_text().splitlines()) == 9
