"""Exit codes, output routing, and file formats of the command-line interface."""

import numpy as np
import pytest

from obbdet.cli import main, write_pgm
from obbdet.head import HeadConfig
from obbdet.train import RunConfig


def tiny_run_config(tmp_path, **kw):
    head = HeadConfig(d_model=8, heads=2, conv_counts=(1, 1, 1))
    base = dict(head=head, train_data=str(tmp_path / "train.json"),
                val_data=str(tmp_path / "val.json"),
                out_dir=str(tmp_path / "run"), epochs=1, batch_size=4)
    base.update(kw)
    return RunConfig(**base)


def gen(tmp_path, name, scenes, seed):
    assert main(["gen-data", "--seed", str(seed), "--out",
                 str(tmp_path / name), "--scenes", str(scenes)]) == 0


# ---------------------------------------------------------------------------
# small utilities


def test_iou_of_identical_boxes(capsys):
    assert main(["iou", "--a", "0,0,2,2,0", "--b", "0,0,2,2,0"]) == 0
    assert capsys.readouterr().out == "1.000000000\n"


def test_iou_of_disjoint_boxes(capsys):
    assert main(["iou", "--a", "0,0,2,2,0", "--b", "50,50,2,2,0.5"]) == 0
    assert capsys.readouterr().out == "0.000000000\n"


def test_iou_malformed_box_is_usage_error(capsys):
    assert main(["iou", "--a", "1,2,3", "--b", "0,0,2,2,0"]) == 1
    err = capsys.readouterr().err
    assert "usage error" in err and "comma-separated" in err


def test_unknown_command_exits_one(capsys):
    assert main(["frobnicate"]) == 1
    assert capsys.readouterr().err != ""


def test_missing_required_flag_exits_one(capsys):
    assert main(["iou", "--a", "0,0,2,2,0"]) == 1


def test_affine_check_random_pairs(capsys):
    assert main(["affine-check", "--n", "200"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("max abs diff")
    value = float(out.split()[3])
    assert value < 1e-9


def test_affine_check_single_pair(capsys):
    assert main(["affine-check", "--proposal", "10,20,8,4",
                 "--delta", "0.1,-0.2,0.3,0.1,0.7"]) == 0
    assert "over 1 pair" in capsys.readouterr().out


def test_affine_check_needs_both_pair_flags(capsys):
    assert main(["affine-check", "--proposal", "10,20,8,4"]) == 1


def test_mask_dump_zero_delta_is_all_white(tmp_path, capsys):
    out = tmp_path / "mask.pgm"
    assert main(["mask-dump", "--proposal", "50,50,20,10",
                 "--delta", "0,0,0,0,0", "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "P2"
    assert lines[1] == "7 7"
    assert lines[2] == "255"
    cells = " ".join(lines[3:]).split()
    assert len(cells) == 49
    assert set(cells) == {"255"}


def test_mask_dump_shifted_delta_has_dark_cells(tmp_path):
    out = tmp_path / "mask.pgm"
    assert main(["mask-dump", "--proposal", "50,50,20,10",
                 "--delta", "0.4,0,0,0,0", "--grid", "9",
                 "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[1] == "9 9"
    cells = " ".join(lines[3:]).split()
    assert "0" in cells and "255" in cells


def test_write_pgm_layout(tmp_path):
    path = tmp_path / "t.pgm"
    write_pgm(path, np.array([[1, 0], [0, 1]]))
    assert path.read_text() == "P2\n2 2\n255\n255 0\n0 255\n"


# ---------------------------------------------------------------------------
# data / train / eval / ablate


def test_gen_data_deterministic_and_quiet_stdout(tmp_path, capsys):
    gen(tmp_path, "a.json", scenes=3, seed=7)
    captured = capsys.readouterr()
    assert captured.out == ""  # results are the file; stderr carries the note
    assert "3 scenes" in captured.err
    gen(tmp_path, "b.json", scenes=3, seed=7)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    gen(tmp_path, "c.json", scenes=3, seed=8)
    assert (tmp_path / "a.json").read_bytes() != (tmp_path / "c.json").read_bytes()


def test_train_and_eval_round_trip(tmp_path, capsys):
    gen(tmp_path, "train.json", scenes=3, seed=1)
    gen(tmp_path, "val.json", scenes=2, seed=2)
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(tiny_run_config(tmp_path).to_text())
    assert main(["train", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "final_total_loss=" in out and "final_val_mAP=" in out
    ckpt = tmp_path / "run" / "checkpoint.json"
    assert ckpt.exists()
    assert (tmp_path / "run" / "metrics.csv").exists()

    assert main(["eval", "--ckpt", str(ckpt),
                 "--data", str(tmp_path / "val.json")]) == 0
    eval_out = capsys.readouterr().out
    assert "mAP@0.50" in eval_out
    assert main(["eval", "--ckpt", str(ckpt),
                 "--data", str(tmp_path / "val.json")]) == 0
    assert capsys.readouterr().out == eval_out  # byte-identical rerun


def test_train_out_flag_overrides_config(tmp_path, capsys):
    gen(tmp_path, "train.json", scenes=2, seed=1)
    gen(tmp_path, "val.json", scenes=2, seed=2)
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(tiny_run_config(tmp_path).to_text())
    assert main(["train", "--config", str(cfg_path),
                 "--out", str(tmp_path / "elsewhere")]) == 0
    capsys.readouterr()
    assert (tmp_path / "elsewhere" / "checkpoint.json").exists()


def test_eval_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    gen(tmp_path, "val.json", scenes=2, seed=2)
    assert main(["eval", "--ckpt", str(tmp_path / "nope.json"),
                 "--data", str(tmp_path / "val.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_train_with_broken_config_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("obbdet-config 1\nmystery=1\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_ablate_headline_micro(tmp_path, capsys):
    gen(tmp_path, "train.json", scenes=3, seed=1)
    gen(tmp_path, "val.json", scenes=2, seed=2)
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(tiny_run_config(tmp_path).to_text())
    assert main(["ablate", "--grid", "headline", "--config", str(cfg_path),
                 "--seeds", "0,1,2"]) == 0
    captured = capsys.readouterr()
    assert captured.out.startswith("cell,coupled_stage,cam_enabled")
    assert len(captured.out.strip().splitlines()) == 3
    assert (tmp_path / "run" / "ablation-headline.csv").exists()


def test_ablate_rejects_unknown_grid(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(tiny_run_config(tmp_path).to_text())
    assert main(["ablate", "--grid", "mystery", "--config", str(cfg_path)]) == 1
