import dataclasses
from fractions import Fraction

import numpy as np
import pytest

from malvis.corpus import ingest
from malvis.evalmetrics import SUMMARY_COLUMNS, ConfusionMatrix, EvalReport
from malvis.strategy import (
    ModelOptions,
    Stage1Entry,
    Stage2Cell,
    StrategyConfig,
    rank_cells,
    rank_stage1,
    render_report,
    run_strategy,
    select_best,
    stage1_screen,
    stage2_grid,
    summary_text,
)
from malvis.train import EpochRecord, TrainConfig, TrainCurve

FAST = dict(train_cfg=TrainConfig(learning_rate=0.01, epochs=1, batch_size=8),
            model_options=ModelOptions(input_side=32, input_channels=1, head_units=8, width_divisor=16))


def curve(*val_accs, loss0=2.0, slope=-0.1):
    return TrainCurve([EpochRecord(i + 1, 0.5, 1.0, a, loss0 + slope * i) for i, a in enumerate(val_accs)])


def fake_report(acc, rec_macro, prec_macro):
    m = ConfusionMatrix(np.eye(2, dtype=int))
    return EvalReport(Fraction(acc), Fraction(acc), Fraction(prec_macro), Fraction(acc), Fraction(rec_macro), (), m)


def cell(name, cap, freeze, acc, rec, prec):
    return Stage2Cell(name, cap, freeze, fake_report(acc, rec, prec), curve(0.5))


def test_defaults_fidelity():
    cfg = StrategyConfig()
    assert (cfg.stage1_cap, cfg.stage1_freeze) == (80, 0.8)
    assert cfg.stage2_caps == (240, 320)
    assert cfg.stage2_freezes == (0.2, 0.4, 0.6, 0.8)
    assert cfg.shortlist_size == 2 and cfg.stage2_scope == "all"
    assert cfg.train_cfg == TrainConfig()
    assert set(cfg.stage1_candidates) == {"NasNet", "DenseNet201", "Xception", "ResNet50", "VGG19", "VGG16"}


def test_stage1_dominance_and_order_invariance():
    a = Stage1Entry("VGG16", curve(0.1, 0.15, 0.2), "imported")
    b = Stage1Entry("VGG19", curve(0.3, 0.9), "imported")
    assert [e.name for e in rank_stage1([a, b])] == ["VGG19", "VGG16"]
    assert [e.name for e in rank_stage1([b, a])] == ["VGG19", "VGG16"]


def test_stage1_loss_tiebreak():
    a = Stage1Entry("A", curve(0.8, loss0=0.5), "imported")
    b = Stage1Entry("B", curve(0.8, loss0=0.4), "imported")
    assert [e.name for e in rank_stage1([a, b])] == ["B", "A"]


def test_stage1_imported_pattern_shortlists_vgg(toy_split):
    flat = {n: curve(0.2, 0.21, 0.19, slope=0.05) for n in ("NasNet", "DenseNet201", "Xception", "ResNet50")}
    rising = {"VGG16": curve(0.4, 0.7, 0.95), "VGG19": curve(0.4, 0.65, 0.93)}
    res = stage1_screen(StrategyConfig(**FAST), toy_split, {**flat, **rising})
    assert set(res.shortlist) == {"VGG16", "VGG19"}
    assert res.shortlist[0] == "VGG16"
    assert all(e.source == "imported" for e in res.entries)


def test_stage1_exhaustive_shortlist(toy_split):
    cfg = StrategyConfig(stage1_candidates=("VGG19", "VGG16"), **FAST)
    res = stage1_screen(cfg, toy_split)
    assert set(res.shortlist) == {"VGG16", "VGG19"}
    assert all(e.source == "trained" and len(e.curve) == 1 for e in res.entries)


def test_stage1_errors(toy_split):
    with pytest.raises(ValueError, match="unknown candidate"):
        stage1_screen(StrategyConfig(stage1_candidates=("LeNet",), **FAST), toy_split)
    with pytest.raises(ValueError, match="no trainable or imported candidate"):
        stage1_screen(StrategyConfig(stage1_candidates=("ResNet50", "Xception"), **FAST), toy_split)
    res = stage1_screen(StrategyConfig(stage1_candidates=("ResNet50", "VGG16"), **FAST), toy_split)
    assert res.skipped == ["ResNet50"]


def test_best_tiebreaks():
    first = cell("VGG19", 320, 0.6, Fraction(9972, 10000), Fraction(9976, 10000), Fraction(99, 100))
    second = cell("VGG16", 320, 0.6, Fraction(9972, 10000), Fraction(9974, 10000), Fraction(1))
    assert select_best([second, first]) is first
    x = cell("VGG16", 240, 0.2, 1, 1, Fraction(1, 2))
    y = cell("VGG16", 240, 0.4, 1, 1, Fraction(3, 4))
    assert select_best([x, y]) is y
    p = cell("VGG16", 240, 0.2, 1, 1, 1)
    q = cell("VGG19", 240, 0.2, 1, 1, 1)
    assert rank_cells([q, p]) == [p, q]
    with pytest.raises(ValueError):
        select_best([])


def test_stage2_singleton_and_missing_cap(toy_split):
    cfg = StrategyConfig(stage2_caps=(240,), stage2_freezes=(0.6,), **FAST)
    cells, best = stage2_grid(cfg, ["VGG19"], {240: toy_split}, toy_split)
    assert cells == [best] and best.key == "vgg19_max240_fz60"
    assert best.label == "VGG19 Frozen60% trained by Max240"
    assert best.report.matrix.total == 30
    with pytest.raises(ValueError, match="missing corpus for cap 320"):
        stage2_grid(StrategyConfig(**FAST), ["VGG19"], {240: toy_split})
    with pytest.raises(ValueError, match="in-core"):
        stage2_grid(cfg, ["ResNet50"], {240: toy_split})


@pytest.fixture(scope="module")
def default_report(toy_tree):
    return run_strategy(StrategyConfig(**FAST), ingest(toy_tree))


def test_default_grid_has_16_cells(default_report):
    r = default_report
    assert len(r.stage2) == 16
    assert {c.key for c in r.stage2} == {f"{m}_max{cap}_fz{f}" for m in ("vgg16", "vgg19")
                                        for cap in (240, 320) for f in (20, 40, 60, 80)}
    assert set(r.shortlist) <= {e.name for e in r.stage1.entries}
    assert r.best in r.stage2
    assert r.stage1.skipped == ["NasNet", "DenseNet201", "Xception", "ResNet50"]
    assert all(c.report.matrix.total == 36 for c in r.stage2)


def test_more_data_never_removed(default_report):
    smallest = min(c.cap for c in default_report.stage2)
    best_small = max(c.report.accuracy for c in default_report.stage2 if c.cap == smallest)
    assert default_report.best.report.accuracy >= best_small


def test_summary_shape(default_report):
    text = summary_text(default_report)
    header = next(l for l in text.splitlines() if "Accuracy" in l)
    assert header.split()[1:] == list(SUMMARY_COLUMNS)
    rows = [l for l in text.splitlines() if "trained by Max" in l and not l.startswith("Best")]
    assert len(rows) == 16
    for row in rows:
        nums = row.split()[-5:]
        assert all(len(n.split(".")[1]) == 2 for n in nums)


def test_render_layout_and_determinism(default_report, tmp_path):
    render_report(default_report, tmp_path / "a")
    render_report(default_report, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert (tmp_path / "a" / "summary.txt").exists()
    assert sum(1 for f in files if f.parts[0] == "stage1") == 2
    for c in default_report.stage2:
        for name in ("metrics.csv", "confusion.csv", "curve.csv", "weights.mvw"):
            assert (tmp_path / "a" / "stage2" / c.key / name).exists()
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    counts = (tmp_path / "a" / "family_counts.csv").read_text().splitlines()
    assert counts[0] == "family,Original,Max320,Max240,Max80"


def test_single_cell_summary(default_report, tmp_path):
    one = dataclasses.replace(default_report, stage2=[default_report.best])
    rows = [l for l in summary_text(one).splitlines() if l.startswith("  ") and "trained by Max" in l]
    assert len(rows) == 1 and len(rows[0].split()[-5:]) == 5


def test_rerun_is_bit_identical(toy_tree, default_report, tmp_path):
    again = run_strategy(StrategyConfig(**FAST), ingest(toy_tree), cell_dir=tmp_path / "cells")
    render_report(default_report, tmp_path / "a")
    render_report(again, tmp_path / "b")
    for p in (tmp_path / "a").rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes(), p
