import csv
import json
import subprocess
import sys

import pytest

from cerfusion.cli import build_parser, list_frames, main, natural_key
from cerfusion.config import ENV_PREFIX, resolve
from cerfusion.errors import ConfigError


def test_config_precedence_three_way(tmp_path, monkeypatch):
    monkeypatch.delenv(ENV_PREFIX + "BATCH_SIZE", raising=False)
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("# run config\nbatch_size = 64\nepochs=3\n")
    assert resolve()["batch_size"] == 128
    assert resolve(cfg_file)["batch_size"] == 64
    assert resolve(cfg_file, {"batch_size": 32})["batch_size"] == 32
    assert resolve(cfg_file, {"batch_size": None})["batch_size"] == 64
    env = {"CER_BATCH_SIZE": "16"}
    assert resolve(cfg_file, environ=env)["batch_size"] == 16
    assert resolve(cfg_file, {"batch_size": 8}, environ=env)["batch_size"] == 8


def test_config_types_and_lists(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("mean=0.5,0.5,0.5\nfreeze_encoders=false\nhidden_dims=64,32\ngrad_clip=none\n")
    cfg = resolve(f, environ={})
    assert cfg["mean"] == (0.5, 0.5, 0.5)
    assert cfg["freeze_encoders"] is False
    assert cfg["hidden_dims"] == (64, 32)
    assert cfg["grad_clip"] is None


def test_config_errors_reported_together(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("batch_size=lots\nmystery=1\nflip_prob=2\n")
    with pytest.raises(ConfigError) as info:
        resolve(f, environ={})
    assert len(info.value.problems) == 3


def test_every_command_accepts_seed():
    parser = build_parser()
    for argv in (
        ["merge-datasets", "a.csv"],
        ["train", "--model", "vit", "--train", "t.csv"],
        ["evaluate", "--checkpoint", "c", "--manifest", "m"],
        ["predict", "--checkpoint", "c", "--frames", "d"],
    ):
        args = parser.parse_args(argv + ["--seed", "7"])
        assert args.seed == 7


def test_natural_frame_order(tmp_path):
    for name in ["frame10.png", "frame2.png", "frame1.png", "notes.txt"]:
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in list_frames(tmp_path)] == ["frame1.png", "frame2.png", "frame10.png"]
    assert sorted(["b2", "a10", "a9"], key=natural_key) == ["a9", "a10", "b2"]


def test_merge_datasets_outputs_and_rerun(tmp_path, single_sets):
    out = tmp_path / "m"
    argv = ["merge-datasets", *map(str, single_sets), "--val-fraction", "0.25", "--seed", "4", "--out", str(out)]
    assert main(argv) == 0
    assert sorted(p.name for p in out.iterdir()) == ["merge.json", "train.csv", "val.csv"]
    first = {n: (out / n).read_bytes() for n in ("train.csv", "val.csv", "merge.json")}
    prov = json.loads(first["merge.json"])
    assert prov["counts"] == {"train": 30, "val": 10}
    assert prov["seed"] == 4 and len(prov["inputs"]) == 2
    assert main(argv) == 1  # refuses to overwrite
    assert main(argv + ["--force"]) == 0
    assert {n: (out / n).read_bytes() for n in first} == first


def test_merge_reference_proportion_large(tmp_path):
    big = tmp_path / "big.csv"
    names = ["Anger", "Contempt", "Disgust", "Fear", "Happiness", "Neutral", "Sadness", "Surprise"]
    big.write_text("".join(f"i/{i}.jpg,{names[i % 8]}\n" for i in range(306989)))
    out = tmp_path / "o"
    assert main(["merge-datasets", str(big), "--val-fraction", "0.023", "--out", str(out)]) == 0
    counts = json.loads((out / "merge.json").read_text())["counts"]
    assert counts["val"] == round(306989 * 0.023) == 7061
    assert counts["train"] + counts["val"] == 306989


def test_merge_rejects_compound_manifest(tmp_path, compound_set):
    assert main(["merge-datasets", str(compound_set), "--out", str(tmp_path / "x")]) == 1


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--model", "cnn", "--train", "x.csv"]) == 2
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs=zero\n")
    assert main(["train", "--model", "vit", "--train", "x.csv", "--config", str(bad)]) == 2
    assert "epochs" in capsys.readouterr().err


def test_missing_manifest_is_runtime_failure(tmp_path):
    assert main(["train", "--model", "vit", "--preset", "toy", "--train", str(tmp_path / "none.csv")]) == 1


def test_module_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "cerfusion", "train", "--model", "cnn"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "invalid choice" in proc.stderr


@pytest.fixture(scope="module")
def trained_vit(tmp_path_factory, compound_set):
    out = tmp_path_factory.mktemp("vit_run")
    rc = main([
        "train", "--model", "vit", "--preset", "toy", "--train", str(compound_set),
        "--epochs", "1", "--batch-size", "56", "--lr", "1e-3", "--seed", "0", "--out", str(out),
    ])
    assert rc == 0
    return out


def test_train_single_model_writes_outputs(trained_vit):
    assert {"best.npz", "last.npz", "history.csv"} <= {p.name for p in trained_vit.iterdir()}
    with open(trained_vit / "history.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "loss", "val_acc", "val_f1", "lr"]


def test_evaluate_taxonomy_mismatch(trained_vit, single_sets, tmp_path, capsys):
    rc = main(["evaluate", "--checkpoint", str(trained_vit / "best.npz"), "--manifest", str(single_sets[0]), "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "compound" in err and "single" in err


def test_evaluate_writes_three_files(trained_vit, compound_val, tmp_path, capsys):
    out = tmp_path / "ev"
    assert main(["evaluate", "--checkpoint", str(trained_vit / "best.npz"), "--manifest", str(compound_val), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["confusion.csv", "confusion.png", "metrics.csv"]
    printed = capsys.readouterr().out
    assert "acc," in printed and "F1," in printed


def test_predict_rows_and_errors(trained_vit, frames_dir, tmp_path):
    out_csv = tmp_path / "p.csv"
    ck = str(trained_vit / "best.npz")
    assert main(["predict", "--checkpoint", ck, "--frames", str(frames_dir), "--out-csv", str(out_csv)]) == 0
    rows = list(csv.reader(open(out_csv)))
    assert rows[0] == ["frame", "pred_label", "confidence"] + [f"p_{i}" for i in range(7)]
    assert len(rows) == 11
    for r in rows[1:]:
        assert abs(sum(float(v) for v in r[3:]) - 1) < 1e-5

    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["predict", "--checkpoint", ck, "--frames", str(empty), "--out-csv", str(tmp_path / "e.csv")]) == 2

    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "f_1.png").write_bytes((frames_dir / "frame_00000.png").read_bytes())
    (broken / "f_2.png").write_bytes(b"corrupt")
    assert main(["predict", "--checkpoint", ck, "--frames", str(broken), "--out-csv", str(tmp_path / "b.csv"), "--strict"]) == 1
    assert main(["predict", "--checkpoint", ck, "--frames", str(broken), "--out-csv", str(tmp_path / "b.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert [r[0] for r in rows[1:]] == ["f_1.png", "f_2.png"]
    assert rows[2][1] == "ERROR"


def test_pretrained_flag_loads_encoder(trained_vit, compound_set, tmp_path, capsys):
    rc = main([
        "train", "--model", "vit", "--preset", "toy", "--train", str(compound_set), "--epochs", "1",
        "--batch-size", "112", "--out", str(tmp_path / "r"), "--pretrained", f"vit={trained_vit / 'best.npz'}",
    ])
    assert rc == 0
    assert "vit: loaded" in capsys.readouterr().out
    assert main(["train", "--model", "vit", "--train", str(compound_set), "--pretrained", "resnet=x"]) == 2
