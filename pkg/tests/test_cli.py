import csv
import json

import numpy as np
import pytest

from dsffnet.cli import build_parser, main
from dsffnet.mesh import load_obj, save_obj
from dsffnet.synthetic import gen_identity, gen_pose, skin

SMALL = ["--enc-widths", "4,8", "--code-dim", "16", "--dec-widths", "4,8,4"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(d), "--identities", "2", "--poses", "4",
                 "--resolution", "5,3", "--bones", "2", "--seed", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ck") / "model.ckpt"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "2",
                 "--batch-size", "4"] + SMALL) == 0
    return out


def test_gen_data_counts_and_reproducible(data_dir, tmp_path, capsys):
    man = json.loads((data_dir / "manifest.json").read_text())
    assert len(man["variants"]) == 2 * 4
    assert len(man["seen_poses"]) == 2 and len(man["unseen_poses"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--identities", "2", "--poses", "4",
                 "--resolution", "5,3", "--bones", "2", "--seed", "1"]) == 0
    assert (tmp_path / "manifest.json").read_bytes() == (data_dir / "manifest.json").read_bytes()
    assert "resolved config" in capsys.readouterr().out


def test_gen_data_rejects_bad_fraction(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--unseen-frac", "1.5"]) == 2
    assert "unseen-frac" in capsys.readouterr().err


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--out", str(blocker / "sub"), "--identities", "1", "--poses", "2",
                 "--resolution", "4,2", "--bones", "2"]) == 2


def test_train_writes_checkpoint_and_log(ckpt, capsys):
    log = ckpt.with_suffix(".csv")
    rows = list(csv.reader(log.open()))
    assert rows[0] == ["epoch", "lr", "train_loss", "val_pmd", "val_cd"]
    assert len(rows) == 3


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "c")]) == 2


def test_train_config_resolution_order(data_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lambda": 0.25, "epochs": 1, "seed": 4}))
    out = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--config", str(cfg),
                 "--ablate", "spadain", "--seed", "9", "--batch-size", "8"] + SMALL) == 0
    text = capsys.readouterr().out
    resolved = json.loads(text.split("resolved config: ", 1)[1].splitlines()[0])
    assert resolved["lam"] == 0.25 and resolved["seed"] == 9 and resolved["epochs"] == 1
    assert resolved["variant"] == "spadain"
    assert "final val PMD" in text


def test_train_no_edge_ablation_sets_lambda_zero(data_dir, tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--ablate", "no-edge",
                 "--epochs", "1"] + SMALL) == 0
    resolved = json.loads(capsys.readouterr().out.split("resolved config: ", 1)[1].splitlines()[0])
    assert resolved["lam"] == 0.0


def test_train_unknown_config_key(data_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 1}))
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "m"),
                 "--config", str(cfg)]) == 2


def test_train_resume_continues(data_dir, ckpt, tmp_path):
    out = tmp_path / "r.ckpt"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--resume", str(ckpt),
                 "--epochs", "3", "--batch-size", "4"] + SMALL) == 0
    rows = list(csv.reader(out.with_suffix(".csv").open()))
    assert [r[0] for r in rows[1:]] == ["2"]


def test_transfer_cross_vertex_count(ckpt, tmp_path):
    src = skin(gen_identity(0, 2, (12, 12)), gen_pose(0, 2))
    tgt = skin(gen_identity(1, 2, (20, 12)), gen_pose(1, 2))
    save_obj(src, tmp_path / "s.obj")
    save_obj(tgt, tmp_path / "t.obj")
    assert main(["transfer", "--ckpt", str(ckpt), "--source", str(tmp_path / "s.obj"),
                 "--target", str(tmp_path / "t.obj"), "--out", str(tmp_path / "o.obj")]) == 0
    out = load_obj(tmp_path / "o.obj")
    assert out.n_vertices == 500
    np.testing.assert_array_equal(out.faces, tgt.faces)
    assert main(["transfer", "--ckpt", str(ckpt), "--source", str(tmp_path / "s.obj"),
                 "--target", str(tmp_path / "t.obj"), "--out", str(tmp_path / "n.obj"),
                 "--noise-sigma", "0.05"]) == 0
    assert not np.array_equal(load_obj(tmp_path / "n.obj").vertices, out.vertices)


def test_transfer_missing_checkpoint(tmp_path, capsys):
    assert main(["transfer", "--ckpt", str(tmp_path / "none"), "--source", "a", "--target", "b",
                 "--out", "c"]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_eval_oracle_is_zero(data_dir, tmp_path):
    out = tmp_path / "e.csv"
    assert main(["eval", "--data", str(data_dir), "--oracle-gt", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["split", "pmd", "cd", "emd"]
    assert [r[0] for r in rows[1:]] == ["seen", "unseen"]
    assert all(float(x) == 0.0 for r in rows[1:] for x in r[1:])


def test_eval_scaling_matches_csv(data_dir, ckpt, tmp_path, capsys):
    out = tmp_path / "e.csv"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir), "--split", "seen",
                 "--out", str(out)]) == 0
    text = capsys.readouterr().out
    row = list(csv.reader(out.open()))[1]
    printed = [l for l in text.splitlines() if l.startswith("seen")][0].split()
    assert float(printed[1]) == pytest.approx(float(row[1]) / 1e-4, abs=1e-4)
    assert float(printed[3]) == pytest.approx(float(row[3]) / 1e-3, abs=1e-4)


def test_eval_empty_split(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--identities", "1", "--poses", "2",
                 "--resolution", "4,2", "--bones", "2", "--unseen-frac", "0"]) == 0
    assert main(["eval", "--data", str(tmp_path), "--oracle-gt", "--split", "unseen"]) == 2


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck", "--max-entries", "4"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "alpha" in out


def test_gradcheck_corrupted_adjoint_fails(capsys):
    assert main(["gradcheck", "--max-entries", "4", "--corrupt-adjoint", "instance_norm"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_bad_vertices():
    assert main(["gradcheck", "--vertices", "0"]) == 2


def test_unknown_flag_exit_2():
    assert main(["train", "--bogus"]) == 2


@pytest.mark.parametrize("cmd", ["gen-data", "train", "transfer", "eval", "gradcheck"])
def test_subcommand_help(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        build_parser().parse_args([cmd, "--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out
