import numpy as np
import pytest

from malvis import nncore
from malvis.corpus import TRAIN, ingest
from malvis.models import build_sequential, build_vgg
from malvis.train import (
    EpochRecord,
    InputCache,
    TrainConfig,
    TrainCurve,
    batch_indices,
    batch_iterator,
    curve_csv,
    emit_curve_csv,
    load_split,
    read_curve_csv,
    steps_per_epoch,
    train_model,
)


def tiny(k=3, head_units=8, freeze=0.0, seed=0):
    return build_sequential("tiny", [[4], [4]], k, freeze, input_side=8, input_channels=1,
                            head_units=head_units, seed=seed)


def test_default_config():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.batch_size) == (1e-4, 0.9, 32)
    assert cfg.loss == "categorical_crossentropy"
    assert cfg.shuffle_each_epoch and cfg.epochs == 50
    assert "lr=0.0001 momentum=0.9 batch=32" in cfg.describe()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")


def test_batch_sizes_with_remainder():
    assert [len(b) for b in batch_indices(10, 3, seed=1, epoch=1)] == [3, 3, 3, 1]
    assert steps_per_epoch(10, 3) == 4


@pytest.mark.parametrize("n", [3, 10, 37])
def test_epoch_orders_are_permutations(n):
    e1 = np.concatenate(batch_indices(n, 4, seed=5, epoch=1))
    e2 = np.concatenate(batch_indices(n, 4, seed=5, epoch=2))
    assert sorted(e1) == sorted(e2) == list(range(n))
    assert np.array_equal(e1, np.concatenate(batch_indices(n, 4, seed=5, epoch=1)))
    if n >= 10:
        assert not np.array_equal(e1, e2)


def test_batch_iterator_covers_split(toy_split):
    side, ch = 8, 1
    x_all, y_all = load_split(toy_split, TRAIN, side, ch)
    batches = list(batch_iterator(toy_split, TRAIN, 4, 7, 1, side, ch))
    xs = np.concatenate([b[0] for b in batches])
    ys = np.concatenate([b[1] for b in batches])
    assert len(ys) == len(y_all) == 27
    assert sorted(ys.tolist()) == sorted(y_all.tolist())
    assert sorted(map(bytes, xs)) == sorted(map(bytes, x_all))


def test_curve_csv_round_trip(tmp_path):
    curve = TrainCurve([EpochRecord(1, 0.5, 1.25, 1 / 3, 0.1 + 0.2), EpochRecord(2, 0.75, 0.5)])
    p = tmp_path / "c.csv"
    emit_curve_csv(curve, p)
    lines = p.read_text().splitlines()
    assert len(lines) == 3 and lines[0] == "epoch,acc,loss,val_acc,val_loss"
    assert lines[2] == "2,0.75,0.5,,"
    back = read_curve_csv(p)
    assert back.records == curve.records


def test_read_curve_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("epoch,acc\n1,0.5\n")
    with pytest.raises(ValueError, match="header"):
        read_curve_csv(p)
    p.write_text("epoch,acc,loss,val_acc,val_loss\n1,x,0.5,,\n")
    with pytest.raises(ValueError, match=":2:"):
        read_curve_csv(p)


def test_train_errors(toy_split, toy_tree):
    with pytest.raises(ValueError, match="classes"):
        train_model(tiny(k=4), toy_split, TrainConfig(epochs=1))
    with pytest.raises(ValueError, match="empty train split"):
        train_model(tiny(), ingest(toy_tree), TrainConfig(epochs=1))


def test_single_step_matches_manual_update(toy_split):
    cfg = TrainConfig(learning_rate=0.05, momentum=0.9, batch_size=64, epochs=1, seed=3)
    model = tiny(head_units=0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    x, y = load_split(toy_split, TRAIN, 8, 1)
    logits, caches = nncore.forward_cached(model.layers, x, training=True)
    _, dz = nncore.softmax_cross_entropy(logits, y)
    grads = nncore.backward(model.layers, caches, dz)
    train_model(model, toy_split, cfg)
    after = model.state_dict()
    for i, g in enumerate(grads):
        for name, gv in (g or {}).items():
            key = f"layer{i}.{name}"
            np.testing.assert_allclose(after[key], before[key] - 0.05 * gv, rtol=1e-5, atol=1e-7)


def test_loss_decreases(toy_split):
    _, curve = train_model(tiny(seed=1), toy_split, TrainConfig(learning_rate=0.02, epochs=40, batch_size=8))
    assert len(curve) == 40 and [r.epoch for r in curve.records] == list(range(1, 41))
    assert curve.records[-1].loss < curve.records[0].loss
    assert all(0 <= r.acc <= 1 and 0 <= r.val_acc <= 1 for r in curve.records)


def test_determinism_and_checkpoints(toy_split, tmp_path):
    cfg = TrainConfig(learning_rate=0.01, epochs=2, batch_size=8, seed=9)
    cache = InputCache()
    m1, c1 = train_model(tiny(seed=2), toy_split, cfg, cache, checkpoint_dir=tmp_path / "a", run_id="r")
    m2, c2 = train_model(tiny(seed=2), toy_split, cfg, cache, checkpoint_dir=tmp_path / "b", run_id="r")
    assert curve_csv(c1) == curve_csv(c2)
    for n in ("r.epoch1.mvw", "r.epoch2.mvw"):
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    _, c3 = train_model(tiny(seed=2), toy_split, TrainConfig(learning_rate=0.01, epochs=2, batch_size=8, seed=10))
    assert curve_csv(c3) != curve_csv(c1)


def test_frozen_layers_untouched_end_to_end(toy_split):
    model = build_vgg("vgg16", 3, 0.6, input_side=32, input_channels=1, head_units=8, width_divisor=16)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    train_model(model, toy_split, TrainConfig(learning_rate=0.01, epochs=2, batch_size=8))
    after = model.state_dict()
    for name, layer, _, _ in model.named_params():
        same = after[name].tobytes() == before[name].tobytes()
        assert same == layer.frozen, name
