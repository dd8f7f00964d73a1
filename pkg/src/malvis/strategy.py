"""
Two-stage model selection.

Stage 1 fine-tunes every candidate at one freeze fraction on the most
aggressively undersampled corpus and ranks them by final validation
accuracy. Stage 2 trains the shortlisted models over a grid of
undersampling caps x freeze fractions and picks the best cell.
"""

from __future__ import annotations

import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .corpus import CorpusManifest, family_counts_csv, split, undersample
from .evalmetrics import SUMMARY_COLUMNS, EvalReport, confusion_csv, evaluate, metrics_csv, pct
from .models import VGG_BLOCKS, ModelSpec, build_vgg, catalog_lookup, normalize_name, save_weights
from .train import InputCache, TrainConfig, TrainCurve, curve_csv, read_curve_csv, train_model

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATES = ("NasNet", "DenseNet201", "Xception", "ResNet50", "VGG19", "VGG16")


@dataclass(frozen=True)
class ModelOptions:
    """Architecture settings shared by every network the strategy trains."""

    input_side: int = 224
    input_channels: int = 3
    head_units: int = 256
    dropout: float = 0.5
    width_divisor: int = 1
    init_seed: int = 0


@dataclass(frozen=True)
class StrategyConfig:
    stage1_candidates: Tuple[str, ...] = DEFAULT_CANDIDATES
    stage1_cap: int = 80
    stage1_freeze: float = 0.8
    stage2_caps: Tuple[int, ...] = (240, 320)
    stage2_freezes: Tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    shortlist_size: int = 2
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    model_options: ModelOptions = field(default_factory=ModelOptions)
    stage2_scope: str = "all"
    seed: int = 42
    train_fraction: float = 0.9


def buildable(name: str) -> bool:
    return normalize_name(name) in VGG_BLOCKS


def build_candidate(name: str, class_count: int, freeze: float, opts: ModelOptions) -> ModelSpec:
    return build_vgg(normalize_name(name), class_count, freeze, opts.input_side, opts.input_channels,
                     opts.head_units, opts.dropout, opts.width_divisor, opts.init_seed)


# ---------------------------------------------------------------- stage 1

@dataclass
class Stage1Entry:
    name: str
    curve: TrainCurve
    source: str  # "trained" or "imported"

    @property
    def val_acc(self) -> float:
        return self.curve.final.val_acc

    @property
    def val_loss(self) -> float:
        return self.curve.final.val_loss


@dataclass
class Stage1Result:
    entries: List[Stage1Entry]  # ranked best first
    shortlist: List[str]
    skipped: List[str] = field(default_factory=list)


def rank_stage1(entries: Sequence[Stage1Entry]) -> List[Stage1Entry]:
    """Final val accuracy descending, then val loss ascending, then name."""
    return sorted(entries, key=lambda e: (-e.val_acc, e.val_loss, normalize_name(e.name)))


def load_imported_curves(directory: Union[str, os.PathLike]) -> Dict[str, TrainCurve]:
    """Curve CSVs named ``<model>.csv`` produced by any external trainer."""
    return {p.stem: read_curve_csv(p) for p in sorted(Path(directory).glob("*.csv"))}


def stage1_screen(cfg: StrategyConfig, corpus: CorpusManifest,
                  imported: Optional[Mapping[str, TrainCurve]] = None,
                  cache: Optional[InputCache] = None) -> Stage1Result:
    """Screen candidates on a split, capped corpus.

    Imported curves take precedence over in-core training; catalog-only
    candidates without an imported curve are skipped.
    """
    imported = {normalize_name(k): v for k, v in (imported or {}).items()}
    cache = cache or InputCache()
    entries, skipped = [], []
    for name in cfg.stage1_candidates:
        key = normalize_name(name)
        if not buildable(name):
            try:
                catalog_lookup(name)
            except KeyError:
                raise ValueError(f"unknown candidate {name!r}: neither buildable nor in the catalog") from None
        if key in imported:
            curve, source = imported[key], "imported"
        elif buildable(name):
            logger.info("stage 1: training %s", name)
            model = build_candidate(name, len(corpus.family_table), cfg.stage1_freeze, cfg.model_options)
            _, curve = train_model(model, corpus, cfg.train_cfg, cache)
            source = "trained"
        else:
            skipped.append(name)
            continue
        if not curve.records or curve.final.val_acc is None or curve.final.val_loss is None:
            raise ValueError(f"candidate {name!r} has no validation results")
        entries.append(Stage1Entry(name, curve, source))
    if not entries:
        raise ValueError("no trainable or imported candidate")
    ranked = rank_stage1(entries)
    return Stage1Result(ranked, [e.name for e in ranked[:cfg.shortlist_size]], skipped)


# ---------------------------------------------------------------- stage 2

@dataclass
class Stage2Cell:
    model_name: str
    cap: int
    freeze: float
    report: EvalReport
    curve: TrainCurve
    model: Optional[ModelSpec] = None
    weights_path: Optional[str] = None

    @property
    def key(self) -> str:
        return f"{normalize_name(self.model_name)}_max{self.cap}_fz{round(self.freeze * 100)}"

    @property
    def label(self) -> str:
        return f"{self.model_name} Frozen{round(self.freeze * 100)}% trained by Max{self.cap}"


def rank_cells(cells: Sequence[Stage2Cell]) -> List[Stage2Cell]:
    """Accuracy, then macro recall, then macro precision (all descending), then cell key."""
    return sorted(cells, key=lambda c: (-c.report.accuracy, -c.report.recall_macro,
                                        -c.report.precision_macro, c.key))


def select_best(cells: Sequence[Stage2Cell]) -> Stage2Cell:
    if not cells:
        raise ValueError("empty stage-2 grid")
    return rank_cells(cells)[0]


def stage2_grid(cfg: StrategyConfig, shortlist: Sequence[str], corpora: Mapping[int, CorpusManifest],
                eval_corpus: Optional[CorpusManifest] = None, cache: Optional[InputCache] = None,
                cell_dir: Optional[Union[str, os.PathLike]] = None) -> Tuple[List[Stage2Cell], Stage2Cell]:
    """Train and evaluate every (model, cap, freeze) cell.

    With ``stage2_scope == "all"`` each cell is scored on every record of
    ``eval_corpus`` (the full, uncapped corpus). When ``cell_dir`` is given,
    weights go straight to ``<cell_dir>/<cell>/weights.mvw`` and the trained
    network is not kept in memory.
    """
    for cap in cfg.stage2_caps:
        if cap not in corpora:
            raise ValueError(f"missing corpus for cap {cap}")
    for name in shortlist:
        if not buildable(name):
            raise ValueError(f"shortlisted model {name!r} cannot be trained in-core")
    cache = cache or InputCache()
    cells = []
    for name in shortlist:
        for cap in cfg.stage2_caps:
            corpus = corpora[cap]
            for freeze in cfg.stage2_freezes:
                logger.info("stage 2: %s cap=%d freeze=%.2f", name, cap, freeze)
                model = build_candidate(name, len(corpus.family_table), freeze, cfg.model_options)
                _, curve = train_model(model, corpus, cfg.train_cfg, cache)
                if cfg.stage2_scope == "all":
                    target = eval_corpus if eval_corpus is not None else corpus
                else:
                    target = corpus
                report = evaluate(model, target, cfg.stage2_scope, cache)
                cell = Stage2Cell(name, cap, freeze, report, curve, model)
                if cell_dir is not None:
                    d = Path(cell_dir) / cell.key
                    d.mkdir(parents=True, exist_ok=True)
                    cell.weights_path = str(d / "weights.mvw")
                    save_weights(model, cell.weights_path)
                    cell.model = None
                cells.append(cell)
    return cells, select_best(cells)


# ---------------------------------------------------------------- whole procedure

@dataclass
class StrategyReport:
    config: StrategyConfig
    stage1: Stage1Result
    stage2: List[Stage2Cell]
    best: Stage2Cell
    corpora: Dict[str, CorpusManifest] = field(default_factory=dict)

    @property
    def shortlist(self) -> List[str]:
        return self.stage1.shortlist


def prepare_corpora(cfg: StrategyConfig, full: CorpusManifest) -> Dict[int, CorpusManifest]:
    caps = sorted({cfg.stage1_cap, *cfg.stage2_caps})
    return {cap: split(undersample(full, cap, cfg.seed), cfg.train_fraction, cfg.seed) for cap in caps}


def run_strategy(cfg: StrategyConfig, full: CorpusManifest,
                 imported: Optional[Mapping[str, TrainCurve]] = None,
                 cache: Optional[InputCache] = None,
                 cell_dir: Optional[Union[str, os.PathLike]] = None) -> StrategyReport:
    """Undersample ``full`` (unsplit) per cap, screen, grid-search, and collect everything."""
    cache = cache or InputCache()
    corpora = prepare_corpora(cfg, full)
    stage1 = stage1_screen(cfg, corpora[cfg.stage1_cap], imported, cache)
    cells, best = stage2_grid(cfg, stage1.shortlist, corpora, full, cache, cell_dir)
    named = {"Original": full}
    named.update({f"Max{cap}": corpora[cap] for cap in sorted(corpora, reverse=True)})
    return StrategyReport(cfg, stage1, cells, best, named)


# ---------------------------------------------------------------- rendering

def _file_stem(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def summary_text(report: StrategyReport) -> str:
    lines = ["Stage 1: screening"]
    cfg = report.config
    lines.append(f"  cap {cfg.stage1_cap}, freeze {round(cfg.stage1_freeze * 100)}%, "
                 f"ranked by final val_acc (val_loss tiebreak)")
    width = max([5] + [len(e.name) for e in report.stage1.entries])
    lines.append(f"  {'Model':<{width}}  source    val_acc  val_loss")
    for e in report.stage1.entries:
        lines.append(f"  {e.name:<{width}}  {e.source:<8}  {pct(e.val_acc):>7}  {e.val_loss:.4f}")
    for name in report.stage1.skipped:
        lines.append(f"  {name:<{width}}  skipped (no curve supplied, not buildable)")
    lines.append(f"  shortlist: {', '.join(report.shortlist)}")
    lines.append("")
    lines.append(f"Stage 2: grid (evaluation scope: {cfg.stage2_scope})")
    ranked = rank_cells(report.stage2)
    width = max([5] + [len(c.label) for c in ranked])
    lines.append(f"  {'Model':<{width}}  " + "  ".join(SUMMARY_COLUMNS))
    for c in ranked:
        vals = "  ".join(f"{pct(v):>{len(col)}}" for col, v in zip(SUMMARY_COLUMNS, c.report.summary()))
        lines.append(f"  {c.label:<{width}}  {vals}")
    lines.append("")
    b = report.best
    lines.append(f"Best: {b.label} (accuracy {pct(b.report.accuracy)}%, "
                 f"{b.report.matrix.total} samples)")
    return "\n".join(lines) + "\n"


def render_report(report: StrategyReport, path: Union[str, os.PathLike]) -> None:
    """Write ``summary.txt``, stage-1 curves and per-cell metrics/confusion/curve/weights under ``path``."""
    root = Path(path)
    (root / "stage1").mkdir(parents=True, exist_ok=True)
    (root / "stage2").mkdir(parents=True, exist_ok=True)
    (root / "summary.txt").write_text(summary_text(report), encoding="utf-8")
    for e in report.stage1.entries:
        (root / "stage1" / f"{_file_stem(e.name)}.csv").write_text(curve_csv(e.curve), encoding="utf-8")
    for c in report.stage2:
        d = root / "stage2" / c.key
        d.mkdir(parents=True, exist_ok=True)
        labels = [m.label for m in c.report.per_class]
        (d / "metrics.csv").write_text(metrics_csv(c.report), encoding="utf-8")
        (d / "confusion.csv").write_text(confusion_csv(c.report.matrix, labels), encoding="utf-8")
        (d / "curve.csv").write_text(curve_csv(c.curve), encoding="utf-8")
        target = d / "weights.mvw"
        if c.model is not None:
            save_weights(c.model, target)
        elif c.weights_path and Path(c.weights_path).resolve() != target.resolve():
            shutil.copyfile(c.weights_path, target)
    if report.corpora:
        family_counts_csv(report.corpora, root / "family_counts.csv")
