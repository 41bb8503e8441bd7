"""Training loop, schedule, checkpointing, and failure handling."""

import numpy as np
import pytest

from gfr.config import RunConfig, parse_config, serialize_config
from gfr.model import Detector
from gfr.synth import generate_dataset
from gfr.tensor import Tensor
from gfr.training import (
    NanLossError,
    load_checkpoint,
    loss_curve_csv,
    lr_at,
    save_checkpoint,
    train,
)

from helpers import tiny_config


def tiny_scenes(cfg, count=4, seed=0):
    return generate_dataset(
        seed=seed, count=count, input_size=cfg.input_size, num_classes=cfg.num_classes, min_objects=1, max_objects=2
    )


def test_lr_schedule_single_drop():
    cfg = tiny_config(lr=0.01, iterations=100, lr_drop_frac=0.8, lr_drop_factor=0.1)
    assert lr_at(0, cfg) == 0.01
    assert lr_at(79, cfg) == 0.01
    assert lr_at(80, cfg) == pytest.approx(0.001)
    assert lr_at(99, cfg) == pytest.approx(0.001)


def test_zero_lr_leaves_parameters_bitwise_identical():
    cfg = tiny_config(lr=0.0, weight_decay=0.0, iterations=2)
    before = Detector.create(cfg, np.random.default_rng(cfg.seed))
    snapshot = {p.name: p.data.copy() for p in before.parameters()}
    result = train(cfg, tiny_scenes(cfg))
    for p in result.model.parameters():
        np.testing.assert_array_equal(p.data, snapshot[p.name])


def test_training_is_deterministic():
    cfg = tiny_config(iterations=4)
    scenes = tiny_scenes(cfg)
    a = train(cfg, scenes)
    b = train(cfg, scenes)
    assert a.curve == b.curve
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_training_curve_shape_and_lr_column():
    cfg = tiny_config(iterations=5, lr_drop_frac=0.6)
    result = train(cfg, tiny_scenes(cfg))
    assert [it for it, _, _ in result.curve] == list(range(5))
    assert [lr for _, _, lr in result.curve] == [lr_at(i, cfg) for i in range(5)]
    assert all(np.isfinite(loss) for _, loss, _ in result.curve)
    assert result.final_loss() == result.curve[-1][1]


def test_training_decreases_loss():
    cfg = tiny_config(iterations=30, lr=0.05)
    result = train(cfg, tiny_scenes(cfg))
    first = np.mean([l for _, l, _ in result.curve[:5]])
    last = np.mean([l for _, l, _ in result.curve[-5:]])
    assert last < first


def test_progress_callback_sees_every_iteration():
    cfg = tiny_config(iterations=3)
    seen = []
    train(cfg, tiny_scenes(cfg), progress=lambda it, loss, lr: seen.append((it, loss, lr)))
    assert [s[0] for s in seen] == [0, 1, 2]


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(tiny_config(), [])


def test_loss_curve_csv_roundtrip_exact():
    curve = [(0, 1.23456789012345678, 0.01), (1, 0.5, 0.001)]
    text = loss_curve_csv(curve)
    lines = text.splitlines()
    assert lines[0] == "iteration,loss,lr"
    for (it, loss, lr), line in zip(curve, lines[1:]):
        f = line.split(",")
        assert int(f[0]) == it
        assert float(f[1]) == loss  # repr round-trips float64 exactly
        assert float(f[2]) == lr


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = tiny_config(iterations=2)
    result = train(cfg, tiny_scenes(cfg))
    path = tmp_path / "model.bin"
    save_checkpoint(path, result.model)
    loaded = load_checkpoint(path)
    assert loaded.config == result.model.config
    orig = {p.name: p.data for p in result.model.parameters()}
    back = {p.name: p.data for p in loaded.parameters()}
    assert set(orig) == set(back)
    for name in orig:
        np.testing.assert_array_equal(orig[name], back[name], err_msg=name)


def test_checkpoint_forward_equality(tmp_path):
    cfg = tiny_config(iterations=2)
    result = train(cfg, tiny_scenes(cfg))
    path = tmp_path / "model.bin"
    save_checkpoint(path, result.model)
    loaded = load_checkpoint(path)
    x = Tensor(np.random.default_rng(3).random((1, 3, cfg.input_size, cfg.input_size)))
    la, da, _ = result.model.forward(x)
    lb, db, _ = loaded.forward(x)
    np.testing.assert_array_equal(la.data, lb.data)
    np.testing.assert_array_equal(da.data, db.data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_checkpoint_preserves_ablation_flags(tmp_path):
    cfg = tiny_config(use_gates=False, iterations=1)
    result = train(cfg, tiny_scenes(cfg))
    path = tmp_path / "nogate.bin"
    save_checkpoint(path, result.model)
    loaded = load_checkpoint(path)
    assert loaded.config.use_gates is False
    assert loaded.gates is None


def test_nan_loss_raises_with_dump():
    cfg = tiny_config(lr=1e6, iterations=50, weight_decay=0.0)
    with pytest.raises(NanLossError) as exc_info, np.errstate(all="ignore"):
        train(cfg, tiny_scenes(cfg))
    err = exc_info.value
    assert err.iteration >= 1
    assert "non-finite loss" in err.dump
    assert "grad_absmax" in err.dump
    # one row per parameter follows the header lines
    cfg2 = tiny_config()
    n_params = len(Detector.create(cfg2, np.random.default_rng(0)).parameters())
    assert len(err.dump.strip().splitlines()) == 2 + n_params


def test_config_text_embedded_in_checkpoint(tmp_path):
    cfg = tiny_config(iterations=1, lr=0.0125)
    result = train(cfg, tiny_scenes(cfg))
    path = tmp_path / "model.bin"
    save_checkpoint(path, result.model)
    raw = path.read_bytes()
    text = serialize_config(cfg)
    assert text.encode() in raw
    assert parse_config(text) == cfg
