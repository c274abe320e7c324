"""Run configs, the training loop, and the ablation runner."""

import numpy as np
import pytest

from obbdet.head import HeadConfig, HeadParams
from obbdet.scenes import build_dataset, save_dataset
from obbdet.train import (
    ABLATION_GRIDS,
    METRICS_HEADER,
    RunConfig,
    run_ablation,
    train,
)


def tiny_head(**kw):
    # the data pipeline always emits 7x7 token grids, so only width shrinks
    base = dict(d_model=8, heads=2, conv_counts=(1, 1, 1))
    base.update(kw)
    return HeadConfig(**base)


# ---------------------------------------------------------------------------
# config files


def test_config_text_roundtrip():
    cfg = RunConfig(
        head=HeadConfig(decoupling_order=("wh", "xy", "alpha"), coupled_stage=None,
                        cam_enabled=False, conv_counts=(2, 2, 2)),
        train_data="train.json", val_data="val.json", out_dir="out",
        lr=3e-4, weight_decay=0.01, epochs=7, batch_size=4, seed=9,
        eleven_point=True)
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg


def test_config_text_has_version_line_and_sorted_keys():
    text = RunConfig().to_text()
    lines = text.strip().splitlines()
    assert lines[0] == "obbdet-config 1"
    keys = [ln.split("=", 1)[0] for ln in lines[1:]]
    assert keys == sorted(keys)
    assert "head.coupled_stage=none" in lines
    assert "head.conv_counts=3,2,1" in lines


def test_config_parse_errors():
    with pytest.raises(ValueError, match="empty config"):
        RunConfig.from_text("")
    with pytest.raises(ValueError, match="must start with"):
        RunConfig.from_text("something-else 1\nlr=0.1\n")
    with pytest.raises(ValueError, match="unsupported config version"):
        RunConfig.from_text("obbdet-config 9\n")
    with pytest.raises(ValueError, match="unknown config key"):
        RunConfig.from_text("obbdet-config 1\nnot_a_key=3\n")
    with pytest.raises(ValueError, match="unknown config key"):
        RunConfig.from_text("obbdet-config 1\nhead.bogus=3\n")
    with pytest.raises(ValueError, match="malformed config line"):
        RunConfig.from_text("obbdet-config 1\nno equals sign\n")
    with pytest.raises(ValueError, match="true/false"):
        RunConfig.from_text("obbdet-config 1\nhead.cam_enabled=yes\n")


def test_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        RunConfig(epochs=0)
    with pytest.raises(ValueError, match="lr"):
        RunConfig(lr=-1e-4)
    with pytest.raises(ValueError, match="batch_size"):
        RunConfig(batch_size=0)


# ---------------------------------------------------------------------------
# training loop


def test_lr_zero_keeps_parameters_and_loss_constant():
    ds = build_dataset(seed=1, n_scenes=4)
    cfg = RunConfig(head=HeadConfig(), lr=0.0, epochs=3, batch_size=4, seed=5)
    result = train(cfg, ds, write_outputs=False)
    reference = HeadParams.init(np.random.default_rng(5), cfg.head)
    for name, t in result.params.named().items():
        assert np.array_equal(t.data, reference.named()[name].data), name
    totals = [row["total"] for row in result.history]
    assert np.allclose(totals, totals[0], atol=1e-12)


def test_training_reduces_loss_on_smoke_run():
    ds = build_dataset(seed=2, n_scenes=50)
    cfg = RunConfig(epochs=5, seed=0)
    result = train(cfg, ds, write_outputs=False)
    assert result.history[-1]["total"] < result.history[0]["total"]


def test_same_seed_reproduces_outputs_byte_for_byte(tmp_path):
    data_path = tmp_path / "train.json"
    save_dataset(data_path, build_dataset(seed=3, n_scenes=3))
    val_path = tmp_path / "val.json"
    save_dataset(val_path, build_dataset(seed=4, n_scenes=2))

    def run(out):
        cfg = RunConfig(head=tiny_head(), train_data=str(data_path),
                        val_data=str(val_path), out_dir=str(tmp_path / out),
                        epochs=2, batch_size=4, seed=11)
        return train(cfg)

    a, b = run("a"), run("b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()

    cfg = RunConfig(head=tiny_head(), train_data=str(data_path),
                    val_data=str(val_path), out_dir=str(tmp_path / "c"),
                    epochs=2, batch_size=4, seed=12)
    c = train(cfg)
    assert a.metrics_path.read_bytes() != c.metrics_path.read_bytes()


def test_metrics_csv_layout(tmp_path):
    ds = build_dataset(seed=5, n_scenes=3)
    val = build_dataset(seed=6, n_scenes=2)
    cfg = RunConfig(head=tiny_head(), out_dir=str(tmp_path / "run"),
                    epochs=3, seed=0)
    result = train(cfg, ds, val)
    lines = result.metrics_path.read_text().strip().splitlines()
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 4
    for ln in lines[1:]:
        fields = ln.split(",")
        assert len(fields) == 7
        assert all(f != "" for f in fields)  # val column filled
    # without a validation set the last column is empty
    result2 = train(RunConfig(head=tiny_head(), out_dir=str(tmp_path / "noval"),
                              epochs=1, seed=0), ds)
    row = result2.metrics_path.read_text().strip().splitlines()[1]
    assert row.endswith(",")
    assert result2.final_val_map is None


def test_unreadable_dataset_errors(tmp_path):
    cfg = RunConfig(train_data=str(tmp_path / "missing.json"))
    with pytest.raises(FileNotFoundError):
        train(cfg, write_outputs=False)
    bad = tmp_path / "bad.json"
    bad.write_text("not json at all {")
    with pytest.raises(ValueError, match="not valid JSON"):
        train(RunConfig(train_data=str(bad)), write_outputs=False)


def test_class_count_mismatch_rejected():
    ds = build_dataset(seed=1, n_scenes=2)
    cfg = RunConfig(head=tiny_head(num_classes=7), epochs=1)
    with pytest.raises(ValueError, match="class-count mismatch"):
        train(cfg, ds, write_outputs=False)


def test_non_finite_loss_aborts(monkeypatch):
    from obbdet import autodiff as ad
    from obbdet import train as train_mod

    def poisoned_loss(out, target, class_target, weights=None, beta=1.0):
        return ad.constant(float("nan")), {t: float("nan") for t in
                                           ("xy", "alpha", "wh", "cls")}

    monkeypatch.setattr(train_mod, "head_loss", poisoned_loss)
    ds = build_dataset(seed=1, n_scenes=2)
    cfg = RunConfig(head=tiny_head(), epochs=1)
    with pytest.raises(RuntimeError, match="non-finite loss at epoch 1"):
        train(cfg, ds, write_outputs=False)


# ---------------------------------------------------------------------------
# ablation runner


def test_builtin_grids_have_expected_cells():
    assert len(ABLATION_GRIDS["stage-grid"]) == 10
    assert len(ABLATION_GRIDS["orders"]) == 6
    orders = {g["decoupling_order"] for g in ABLATION_GRIDS["orders"]}
    assert len(orders) == 6
    assert len(ABLATION_GRIDS["mask-targets"]) == 5
    cells = [g["conv_counts"] for g in ABLATION_GRIDS["conv-counts"]]
    assert len(cells) == 13
    assert (3, 2, 1) in cells
    assert len(ABLATION_GRIDS["headline"]) == 2


def test_run_ablation_headline_micro(tmp_path):
    train_ds = build_dataset(seed=1, n_scenes=5)
    val_ds = build_dataset(seed=2, n_scenes=3)
    base = RunConfig(head=tiny_head(), out_dir=str(tmp_path), epochs=1,
                     batch_size=4)
    rows, csv_path = run_ablation(base, "headline", seeds=[0, 1, 2],
                                  train_ds=train_ds, val_ds=val_ds)
    assert len(rows) == 2
    for row in rows:
        assert len(row.maps) == 3
        assert all(0.0 <= m <= 1.0 for m in row.maps)
        assert row.sd >= 0.0
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("cell,coupled_stage,cam_enabled")
    assert len(lines) == 3
    assert rows[0].head.coupled_stage == 4
    assert rows[1].head.coupled_stage is None


def test_run_ablation_custom_cells_and_determinism(tmp_path):
    train_ds = build_dataset(seed=1, n_scenes=4)
    val_ds = build_dataset(seed=2, n_scenes=2)
    base = RunConfig(head=tiny_head(), out_dir=str(tmp_path), epochs=1)
    cells = [{"cam_enabled": False}]
    rows1, _ = run_ablation(base, cells, seeds=[0, 1, 2],
                            train_ds=train_ds, val_ds=val_ds)
    rows2, _ = run_ablation(base, cells, seeds=[0, 1, 2],
                            train_ds=train_ds, val_ds=val_ds)
    assert rows1[0].maps == rows2[0].maps
    assert rows1[0].head.cam_enabled is False


def test_run_ablation_validates_inputs(tmp_path):
    ds = build_dataset(seed=1, n_scenes=2)
    base = RunConfig(head=tiny_head(), out_dir=str(tmp_path), epochs=1)
    with pytest.raises(ValueError, match="at least 3 seeds"):
        run_ablation(base, "headline", seeds=[0, 1], train_ds=ds, val_ds=ds)
    with pytest.raises(ValueError, match="unknown ablation grid"):
        run_ablation(base, "nope", seeds=[0, 1, 2], train_ds=ds, val_ds=ds)
    with pytest.raises(ValueError, match="validation dataset"):
        run_ablation(base, "headline", seeds=[0, 1, 2], train_ds=ds)
