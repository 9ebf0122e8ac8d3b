"""Config files, checkpoints and the command-line harness on a tiny task."""
import json

import numpy as np
import pytest

from loupe import checkpoint
from loupe import config as config_mod
from loupe.backbone import build
from loupe.cli import (
    DEFAULT_LAMBDAS,
    SweepRow,
    eval_checkpoint,
    format_sweep,
    load_config,
    main,
    model_gradcheck,
    run_sweep,
)
from loupe.config import RunConfig
from loupe.errors import CompatibilityError, ConfigError

TINY = """\
# a small task that trains in seconds
data.n_train = 40
data.n_val = 20
data.n_test = 20
data.image_size = 32
data.patch_size = 8
augment.crop_size = 28
augment.eval_resize = 34
augment.eval_crop = 32
backbone.input_size = 32
backbone.base_channels = 8
schedule.epochs = 3
schedule.batch_size = 10
loss.lambda = 0.05
loss.l1_mode = mean_per_element
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY, encoding="utf-8")
    return p


# ---------------------------------------------------------------- config


def test_defaults():
    cfg = RunConfig()
    assert cfg.optim.lr == 3e-4 and cfg.schedule.base_lr == 3e-4
    assert cfg.optim.weight_decay == 0.02
    assert (cfg.optim.beta1, cfg.optim.beta2) == (0.9, 0.99)
    assert cfg.schedule.total_epochs == 50 and cfg.schedule.patience == 5 and cfg.schedule.batch_size == 32
    assert cfg.loss.lam == 0.05
    cfg.validate()


def test_full_scale_recipe_values():
    cfg = config_mod.full_scale_recipe()
    assert cfg.optim.lr == 1e-5 and cfg.schedule.base_lr == 1e-5
    assert cfg.backbone.input_size == 224 and cfg.backbone.base_channels == 128


def test_parse_and_dump_roundtrip():
    cfg = config_mod.parse_text(TINY)
    assert cfg.data.n_train == 40 and cfg.loss.l1_mode == "mean_per_element"
    assert cfg.schedule.total_epochs == 3
    again = config_mod.parse_text(config_mod.dump_text(cfg))
    assert config_mod.to_dict(again) == config_mod.to_dict(cfg)


def test_seed_ties_model_seed():
    cfg = config_mod.parse_text("run.seed = 5\n")
    assert cfg.backbone.seed == 5


@pytest.mark.parametrize(
    "text, field",
    [
        ("loss.lamda = 0.1\n", "loss.lamda"),
        ("nosuch.key = 1\n", "nosuch.key"),
        ("schedule.epochs = many\n", "schedule.epochs"),
        ("backbone.seed = 3\n", "backbone.seed"),
        ("loss.lambda = -1\n", "loss"),
        ("backbone.num_classes = 5\n", "num_classes"),
        ("just some words\n", "line 1"),
    ],
)
def test_config_errors_name_field(text, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_mod.parse_text(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config_mod.load(tmp_path / "absent.cfg")


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip(tmp_path):
    cfg = RunConfig()
    state = build(cfg.backbone)
    state.step = 17
    checkpoint.save(tmp_path / "ck", state, cfg)
    loaded, cfg2 = checkpoint.load(tmp_path / "ck")
    assert loaded.step == 17
    for k in state.params:
        np.testing.assert_array_equal(loaded.params[k], state.params[k])
    assert config_mod.to_dict(cfg2) == config_mod.to_dict(cfg)
    step, entries = checkpoint.read_manifest(tmp_path / "ck")
    blob = (tmp_path / "ck" / "params.bin").read_bytes()
    assert len(blob) == 4 * sum(v.size for v in state.params.values())
    assert entries["embed.w"] == ((16, 3, 4, 4), 0)


def test_checkpoint_overwrite_leaves_no_temp(tmp_path):
    cfg = RunConfig()
    state = build(cfg.backbone)
    checkpoint.save(tmp_path / "ck", state, cfg)
    checkpoint.save(tmp_path / "ck", state, cfg)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]


def test_checkpoint_shape_mismatch(tmp_path):
    cfg = RunConfig()
    checkpoint.save(tmp_path / "ck", build(cfg.backbone), cfg)
    text = (tmp_path / "ck" / "config.txt").read_text()
    (tmp_path / "ck" / "config.txt").write_text(text.replace("backbone.base_channels = 16", "backbone.base_channels = 8"))
    with pytest.raises(CompatibilityError, match=r"embed\.w"):
        checkpoint.load(tmp_path / "ck")


# ---------------------------------------------------------------- commands


def test_train_eval_viz_roundtrip(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_cfg), "--out", str(out), "--quiet"]) == 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    echo = json.loads(lines[0])
    assert echo["config"]["loss.lambda"] == 0.05
    recs = [json.loads(l) for l in lines[1:]]
    assert [r["epoch"] for r in recs] == [1, 2, 3]
    fields = {
        "epoch", "train_loss", "train_ce", "train_sparsity", "val_accuracy", "test_accuracy",
        "mean_attention_mass", "pointing_hit_rate", "iou_mean", "lr", "wall_seconds",
    }
    assert all(set(r) == fields for r in recs)
    assert recs[-1]["test_accuracy"] is not None and all(r["test_accuracy"] is None for r in recs[:-1])
    best = max(r["val_accuracy"] for r in recs)
    capsys.readouterr()

    # eval reproduces the recorded best validation accuracy exactly
    assert main(["eval", "--checkpoint", str(out / "best"), "--split", "val"]) == 0
    got = json.loads(capsys.readouterr().out)
    assert got["accuracy"] == best
    assert got["mean_attention_mass"] is not None

    viz = tmp_path / "viz"
    assert main(["viz", "--checkpoint", str(out / "best"), "--n", "3", "--out", str(viz)]) == 0
    names = sorted(p.name for p in viz.glob("*.ppm"))
    assert names == ["sample_0000.ppm", "sample_0001.ppm", "sample_0002.ppm"]
    side = [json.loads(l) for l in (viz / "viz_metrics.jsonl").read_text().splitlines()]
    assert all(r["highlighted"] == 52 for r in side)  # ceil(0.05 * 32 * 32)
    first = (viz / "sample_0000.ppm").read_bytes()
    assert first.startswith(b"P6\n32 32\n255\n")
    main(["viz", "--checkpoint", str(out / "best"), "--n", "3", "--out", str(viz)])
    assert (viz / "sample_0000.ppm").read_bytes() == first


def test_train_is_deterministic(tiny_cfg, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / name), "--quiet"]) == 0
    for f in ("metrics.jsonl", "best/params.bin", "best/manifest.txt", "best/config.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_flag_changes_run(tiny_cfg, tmp_path):
    main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "a"), "--quiet"])
    main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "b"), "--quiet", "--seed", "1"])
    assert (tmp_path / "a" / "best" / "params.bin").read_bytes() != (tmp_path / "b" / "best" / "params.bin").read_bytes()


def test_early_stop_record_count(tiny_cfg, tmp_path):
    # zero learning rate: validation accuracy never improves after epoch 1
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_cfg), "--out", str(out), "--quiet",
                 "--set", "optim.lr=0", "--set", "schedule.epochs=20", "--set", "schedule.patience=2"]) == 0
    recs = (out / "metrics.jsonl").read_text().splitlines()[1:]
    assert len(recs) == 3


def test_baseline_eval_reports_absent_localization(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(tiny_cfg), "--out", str(out), "--quiet",
          "--set", "backbone.loupe_enabled=false", "--set", "schedule.epochs=1"])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "best")]) == 0
    got = json.loads(capsys.readouterr().out)
    for k in ("mean_attention_mass", "pointing_hit_rate", "iou_mean"):
        assert got[k] is None
    # viz refuses a model without a map
    assert main(["viz", "--checkpoint", str(out / "best"), "--out", str(tmp_path / "v")]) == 3


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("loss.nope = 1\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "nowhere")]) == 4
    assert main(["gen-data", "--out", str(tmp_path / "no" / "dir" / "d.lfg1"), "--set", "data.n_train=10",
                 "--set", "data.n_val=10", "--set", "data.n_test=10"]) == 4


def test_gen_data_then_eval_with_file(tiny_cfg, tmp_path, capsys):
    data = tmp_path / "d.lfg1"
    assert main(["gen-data", "--config", str(tiny_cfg), "--out", str(data)]) == 0
    assert data.read_bytes()[:4] == b"LFG1"
    out = tmp_path / "run"
    main(["train", "--config", str(tiny_cfg), "--out", str(out), "--quiet", "--set", f"run.data_path={data}",
          "--set", "schedule.epochs=1"])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "best"), "--data", str(data)]) == 0


def test_eval_incompatible_dataset(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    main(["train", "--config", str(tiny_cfg), "--out", str(out), "--quiet", "--set", "schedule.epochs=1"])
    other = tmp_path / "big.lfg1"
    main(["gen-data", "--out", str(other), "--set", "data.n_train=10", "--set", "data.n_val=10",
          "--set", "data.n_test=10"])
    with pytest.raises(CompatibilityError, match="64"):
        eval_checkpoint(str(out / "best"), data_path=str(other))


def test_gradcheck_command(capsys):
    # desk defaults; the tiny model's 8 embed biases all straddle relu kinks at eps=1e-4
    assert main(["gradcheck"]) == 0
    text = capsys.readouterr().out
    assert "PASS" in text and "loupe.w1" in text and "loupe.b2" in text


def test_gradcheck_without_loupe():
    cfg = load_config(None, overrides=["backbone.loupe_enabled=false"])
    rep = model_gradcheck(cfg)
    assert rep.passed(1e-4)
    assert not any(k.startswith("loupe.") for k in rep.per_param)


def test_loupe_gradients_nonzero_at_lambda_zero(tiny_cfg):
    from loupe.cli import analytic_grads

    g = analytic_grads(load_config(str(tiny_cfg), overrides=["loss.lambda=0"]))
    for k in ("loupe.w1", "loupe.b1", "loupe.w2", "loupe.b2"):
        assert np.any(g[k] != 0), k


def test_sweep_order_and_fields(tiny_cfg, tmp_path):
    cfg = load_config(str(tiny_cfg))
    calls = []

    def fake(c, d):
        calls.append((c.loss.lam, c.seed))
        return {"accuracy": 0.5 + c.seed / 10, "mean_attention_mass": 1 / (1 + c.loss.lam), "pointing_hit_rate": 0.2}

    rows = run_sweep(cfg, [0.5, 0.0, 5.0], [0, 1, 2], tmp_path, runner=fake)
    assert [r.lam for r in rows] == [0.5, 0.0, 5.0]
    assert calls[:3] == [(0.5, 0), (0.5, 1), (0.5, 2)]
    assert rows[0].acc_mean == pytest.approx(0.6) and rows[0].acc_sd == pytest.approx(0.1)
    assert all(v is not None for r in rows for v in r.__dict__.values())
    assert cfg.loss.lam == 0.05 and cfg.seed == 0  # caller's config untouched
    table = format_sweep(rows)
    assert table.splitlines()[1].split()[0] == "0.5"
    with pytest.raises(ConfigError):
        run_sweep(cfg, [], [0], tmp_path, runner=fake)


def test_default_grid():
    assert DEFAULT_LAMBDAS == (0.0, 0.01, 0.05, 0.1, 0.5, 5.0)
    assert 0.05 in DEFAULT_LAMBDAS and 5.0 in DEFAULT_LAMBDAS


def test_sweep_command(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(tiny_cfg), "--out", str(out), "--lambdas", "0,0.5",
                 "--seeds", "0,1", "--set", "schedule.epochs=1"]) == 0
    rows = [json.loads(l) for l in (out / "sweep.jsonl").read_text().splitlines()]
    assert [r["lam"] for r in rows] == [0.0, 0.5]
    assert (out / "sweep.txt").exists()


def test_shuffled_labels_eval_near_chance(tmp_path, capsys):
    # one desk epoch is enough: permuted labels are independent of any model
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--quiet", "--set", "schedule.epochs=1"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "best"), "--shuffle-labels", "0"]) == 0
    got = json.loads(capsys.readouterr().out)
    assert abs(got["accuracy"] - 0.1) <= 0.03
