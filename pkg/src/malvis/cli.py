"""Command-line entry point: ``malvis <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or runtime error. Every run
writes a JSON ``run.meta`` next to its output recording argv, resolved
flags, library versions and the exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import PIL

from . import __version__
from .corpus import dumps_manifest, ingest, load_manifest, split, undersample
from .evalmetrics import SCOPES, evaluate, render_text, write_report
from .models import VGG_BLOCKS, build_vgg, catalog, catalog_lookup, comparison_table, load_weights, save_weights
from .strategy import DEFAULT_CANDIDATES, ModelOptions, StrategyConfig, load_imported_curves, render_report, run_strategy
from .train import InputCache, TrainConfig, emit_curve_csv, train_model
from .visualize import convert_file

logger = logging.getLogger("malvis")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
_DEFAULTS = TrainConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _names(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=_DEFAULTS.epochs)
    p.add_argument("--lr", type=float, default=_DEFAULTS.learning_rate)
    p.add_argument("--momentum", type=float, default=_DEFAULTS.momentum)
    p.add_argument("--batch", type=int, default=_DEFAULTS.batch_size)


def _add_model_flags(p):
    p.add_argument("--side", type=int, default=224, help="network input side (default 224)")
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p.add_argument("--head-units", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--width-divisor", type=int, default=1, help="shrink every conv width by this factor")
    p.add_argument("--init-seed", type=int, default=0, help="seed for fresh weight initialisation")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (default 42)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="malvis", description="Malware image classification toolkit.")
    parser.add_argument("--seed", type=int, default=42, help="global seed (default 42)")
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    parser.add_argument("--version", action="version", version=f"malvis {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("convert", parents=[common], help="raw binaries -> grayscale PNGs")
    p.add_argument("--in", dest="inp", required=True, help="binary file or directory (walked recursively)")
    p.add_argument("--out", required=True, help="output directory (or .png path for a single file)")
    p.add_argument("--width", type=int, default=None, help="fixed image width instead of the size table")

    p = sub.add_parser("ingest", parents=[common], help="image tree -> manifest TSV")
    p.add_argument("--in", dest="inp", required=True, help="root with one sub-directory per family")
    p.add_argument("--out", required=True)

    p = sub.add_parser("balance", parents=[common], help="undersample every family to a cap")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cap", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", parents=[common], help="stratified train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="fine-tune a VGG on a split manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, choices=sorted(VGG_BLOCKS))
    p.add_argument("--freeze", type=float, default=0.8)
    p.add_argument("--weights", default=None, help="MVW1 file to initialise from (partial loads allowed)")
    p.add_argument("--out", required=True, help="run directory for weights.mvw, curve.csv, model.json")
    _add_train_flags(p)
    _add_model_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score trained weights on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="model.json written by train, or a VGG variant name")
    p.add_argument("--weights", required=True)
    p.add_argument("--scope", choices=SCOPES, default="test_split")
    p.add_argument("--report-dir", required=True)
    _add_model_flags(p)

    p = sub.add_parser("select", parents=[common], help="two-stage model selection")
    p.add_argument("--manifest", required=True, help="full, unsplit manifest")
    p.add_argument("--report-dir", required=True)
    p.add_argument("--candidates", type=_names, default=list(DEFAULT_CANDIDATES))
    p.add_argument("--imported-curves", default=None, help="directory of <model>.csv curves")
    p.add_argument("--cap", type=int, default=80, help="stage-1 cap")
    p.add_argument("--freeze", type=float, default=0.8, help="stage-1 freeze fraction")
    p.add_argument("--caps", type=_ints, default=[240, 320], help="stage-2 caps, comma separated")
    p.add_argument("--freezes", type=_floats, default=[0.2, 0.4, 0.6, 0.8])
    p.add_argument("--shortlist", type=int, default=2)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--scope", choices=SCOPES, default="all")
    _add_train_flags(p)
    _add_model_flags(p)

    p = sub.add_parser("catalog", parents=[common], help="reference architecture table")
    p.add_argument("--model", default=None, help="print one row")
    p.add_argument("--comparison", action="store_true", help="print the literature comparison table")
    p.add_argument("--out", default=None, help="also write the text to this file")
    return parser


# ---------------------------------------------------------------- handlers

def _train_cfg(a) -> TrainConfig:
    return TrainConfig(learning_rate=a.lr, momentum=a.momentum, batch_size=a.batch, epochs=a.epochs, seed=a.seed)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_convert(a) -> str:
    src, dst = Path(a.inp), Path(a.out)
    if src.is_file():
        target = dst if dst.suffix.lower() == ".png" else dst / (src.stem + ".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        convert_file(src, target, a.width)
        return f"1 image written to {target.parent}"
    if not src.is_dir():
        raise FileNotFoundError(f"no such file or directory: {src}")
    files = sorted(p for p in src.rglob("*") if p.is_file())
    for f in files:
        target = dst / f.relative_to(src).with_suffix(".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        convert_file(f, target, a.width)
    return f"{len(files)} images written to {dst}"


def cmd_ingest(a) -> str:
    m = ingest(a.inp)
    _write_text(Path(a.out), dumps_manifest(m))
    return f"{len(m.records)} records in {len(m.family_table)} families"


def cmd_balance(a) -> str:
    m = undersample(load_manifest(a.manifest), a.cap, a.seed)
    _write_text(Path(a.out), dumps_manifest(m))
    return f"{len(m.records)} records after cap {a.cap}"


def cmd_split(a) -> str:
    m = split(load_manifest(a.manifest), a.train_fraction, a.seed)
    _write_text(Path(a.out), dumps_manifest(m))
    for w in m.warnings:
        print(f"warning: {w}", file=sys.stderr)
    n_train = sum(1 for r in m.records if r.split == "train")
    return f"{n_train} train / {len(m.records) - n_train} test"


def _model_options(a) -> ModelOptions:
    return ModelOptions(a.side, a.channels, a.head_units, a.dropout, a.width_divisor, a.init_seed)


def cmd_train(a) -> str:
    corpus = load_manifest(a.manifest)
    opts = _model_options(a)
    model = build_vgg(a.model, len(corpus.family_table), a.freeze, opts.input_side, opts.input_channels,
                      opts.head_units, opts.dropout, opts.width_divisor, opts.init_seed)
    if a.weights:
        loaded = load_weights(model, a.weights, allow_partial=True)
        logger.info("initialised %d tensors from %s", len(loaded), a.weights)
    cfg = _train_cfg(a)
    _, curve = train_model(model, corpus, cfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(model, out / "weights.mvw")
    emit_curve_csv(curve, out / "curve.csv")
    spec = {
        "architecture": model.name,
        "class_count": model.class_count,
        "freeze_fraction": a.freeze,
        "families": [f.name for f in corpus.family_table],
        "input_side": opts.input_side,
        "input_channels": opts.input_channels,
        "head_units": opts.head_units,
        "dropout": opts.dropout,
        "width_divisor": opts.width_divisor,
        "init_seed": opts.init_seed,
        "train_config": cfg.to_dict(),
    }
    _write_text(out / "model.json", json.dumps(spec, indent=2, sort_keys=True) + "\n")
    last = curve.final
    return f"trained {len(curve)} epochs: acc={last.acc:.4f} val_acc={last.val_acc}"


def cmd_eval(a) -> str:
    corpus = load_manifest(a.manifest)
    if a.model.endswith(".json"):
        spec = json.loads(Path(a.model).read_text(encoding="utf-8"))
        model = build_vgg(spec["architecture"], spec["class_count"], spec["freeze_fraction"],
                          spec["input_side"], spec["input_channels"], spec["head_units"],
                          spec["dropout"], spec["width_divisor"], spec["init_seed"])
    else:
        opts = _model_options(a)
        model = build_vgg(a.model, len(corpus.family_table), 0.0, opts.input_side, opts.input_channels,
                          opts.head_units, opts.dropout, opts.width_divisor, opts.init_seed)
    load_weights(model, a.weights)
    report = evaluate(model, corpus, a.scope)
    write_report(report, a.report_dir, title=f"{model.name} on {Path(a.manifest).name}")
    return render_text(report, title=f"{model.name} on {Path(a.manifest).name}").rstrip("\n")


def cmd_select(a) -> str:
    full = load_manifest(a.manifest)
    cfg = StrategyConfig(
        stage1_candidates=tuple(a.candidates), stage1_cap=a.cap, stage1_freeze=a.freeze,
        stage2_caps=tuple(a.caps), stage2_freezes=tuple(a.freezes), shortlist_size=a.shortlist,
        train_cfg=_train_cfg(a), model_options=_model_options(a), stage2_scope=a.scope,
        seed=a.seed, train_fraction=a.train_fraction)
    imported = load_imported_curves(a.imported_curves) if a.imported_curves else None
    report_dir = Path(a.report_dir)
    report = run_strategy(cfg, full, imported, InputCache(), cell_dir=report_dir / "stage2")
    render_report(report, report_dir)
    return (report_dir / "summary.txt").read_text(encoding="utf-8").rstrip("\n")


def cmd_catalog(a) -> str:
    if a.comparison:
        text = comparison_table()
    elif a.model:
        e = catalog_lookup(a.model)
        text = "\n".join(f"{k}: {v}" for k, v in e.as_row().items())
    else:
        rows = catalog()
        header = list(rows[0].as_row())
        text = "\n".join(["\t".join(header)] + ["\t".join(str(v) for v in e.as_row().values()) for e in rows])
    if a.out:
        _write_text(Path(a.out), text.rstrip("\n") + "\n")
    return text.rstrip("\n")


HANDLERS = {
    "convert": cmd_convert, "ingest": cmd_ingest, "balance": cmd_balance, "split": cmd_split,
    "train": cmd_train, "eval": cmd_eval, "select": cmd_select, "catalog": cmd_catalog,
}


# ---------------------------------------------------------------- run.meta

def meta_path(a) -> Optional[Path]:
    """``run.meta`` sits in the output directory, or beside a single output file as ``<file>.run.meta``."""
    if a.command in ("train",):
        return Path(a.out) / "run.meta"
    if a.command in ("eval", "select"):
        return Path(a.report_dir) / "run.meta"
    if a.command == "convert":
        out = Path(a.out)
        return out.parent / (out.name + ".run.meta") if out.suffix.lower() == ".png" else out / "run.meta"
    out = getattr(a, "out", None)
    if out:
        return Path(out).parent / (Path(out).name + ".run.meta")
    return None


def _versions() -> dict:
    return {"malvis": __version__, "numpy": np.__version__, "Pillow": PIL.__version__,
            "python": platform.python_version()}


def write_meta(path: Path, argv: List[str], a, exit_code: int, error: Optional[str]) -> None:
    flags = {k: v for k, v in sorted(vars(a).items())}
    meta = {"argv": list(argv), "command": a.command, "flags": flags, "versions": _versions(),
            "exit_code": exit_code, "error": error}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def run(argv: List[str]) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if a.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    code, error = EXIT_OK, None
    try:
        message = HANDLERS[a.command](a)
        if message:
            print(message)
    except (ValueError, KeyError, OSError) as exc:
        code, error = EXIT_DATA, f"{type(exc).__name__}: {exc}"
        print(f"malvis {a.command}: error: {exc}", file=sys.stderr)
    path = meta_path(a)
    if path is not None:
        try:
            write_meta(path, argv, a, code, error)
        except OSError as exc:
            print(f"malvis: could not write {path}: {exc}", file=sys.stderr)
            code = EXIT_DATA
    return code


def main(argv: Optional[List[str]] = None) -> int:
    return run(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
