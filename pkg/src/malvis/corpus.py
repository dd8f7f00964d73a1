"""
Labeled image corpus: ingestion, cap-based undersampling, stratified split
and the tab-separated manifest format.

Manifest layout::

    # cap=80
    # balance_seed=7
    # seed=42
    # train_fraction=0.9
    # family.0=Adialer.C
    # family.1=Agent.FYI
    <path>\t<family_name>\t<family_index>\t<train|test|->\t<sha256>
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from collections import Counter
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

IMAGE_SUFFIXES = (".png",)
TRAIN, TEST = "train", "test"
UNSPLIT = "-"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class FamilyLabel:
    name: str
    index: int


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    family: FamilyLabel
    split: Optional[str]
    content_hash: str


@dataclass(frozen=True)
class CorpusManifest:
    records: Tuple[SampleRecord, ...]
    family_table: Tuple[FamilyLabel, ...]
    cap: Optional[int] = None
    seed: Optional[int] = None
    train_fraction: Optional[float] = None
    balance_seed: Optional[int] = None
    warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "family_table", tuple(self.family_table))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        validate(self)

    @property
    def is_split(self) -> bool:
        return any(r.split is not None for r in self.records)

    def family_counts(self) -> List[int]:
        counts = Counter(r.family.index for r in self.records)
        return [counts.get(f.index, 0) for f in self.family_table]

    def by_family(self) -> Dict[int, List[SampleRecord]]:
        groups: Dict[int, List[SampleRecord]] = {f.index: [] for f in self.family_table}
        for r in self.records:
            groups[r.family.index].append(r)
        return groups

    def select(self, split: Optional[str]) -> List[SampleRecord]:
        """Records of one split; ``None`` means every record."""
        if split is None:
            return list(self.records)
        return [r for r in self.records if r.split == split]


def validate(m: CorpusManifest) -> None:
    for i, fam in enumerate(m.family_table):
        if fam.index != i:
            raise ManifestError(f"family indices must be contiguous from 0, got {fam.index} at {i}")
    names = [f.name for f in m.family_table]
    if len(set(names)) != len(names):
        raise ManifestError("duplicate family name")
    seen = set()
    for r in m.records:
        if r.image_path in seen:
            raise ManifestError(f"duplicate image path {r.image_path!r}")
        seen.add(r.image_path)
        if not (0 <= r.family.index < len(m.family_table)) or m.family_table[r.family.index] != r.family:
            raise ManifestError(f"unknown family {r.family.name!r} (index {r.family.index})")
        if r.split not in (None, TRAIN, TEST):
            raise ManifestError(f"invalid split {r.split!r}")
    if m.cap is not None:
        for fam, n in zip(m.family_table, m.family_counts()):
            if n > m.cap:
                raise ManifestError(f"family {fam.name!r} has {n} records, above cap {m.cap}")


def file_digest(path: Union[str, os.PathLike]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ingest(root: Union[str, os.PathLike]) -> CorpusManifest:
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"no families found (not a directory: {root})")
    family_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not family_dirs:
        raise ManifestError("no families found")
    families = tuple(FamilyLabel(d.name, i) for i, d in enumerate(family_dirs))
    records = []
    for fam, d in zip(families, family_dirs):
        images = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not images:
            raise ManifestError(f"empty family {fam.name}")
        for p in images:
            records.append(SampleRecord(str(p), fam, None, file_digest(p)))
    records.sort(key=lambda r: r.image_path)
    return CorpusManifest(tuple(records), families)


def _family_rng(seed: int, family_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(family_index)])


def undersample(m: CorpusManifest, cap: int, seed: int) -> CorpusManifest:
    """Keep at most ``cap`` records per family, chosen uniformly without replacement.

    Each family draws from its own generator keyed by ``(seed, family index)``;
    kept records stay in their original order.
    """
    if cap is None or cap <= 0:
        raise ValueError(f"cap must be a positive integer, got {cap}")
    if m.is_split:
        raise ManifestError("undersample expects an unsplit manifest")
    groups = m.by_family()
    keep = set()
    for idx, recs in groups.items():
        if len(recs) <= cap:
            keep.update(r.image_path for r in recs)
            continue
        chosen = _family_rng(seed, idx).choice(len(recs), size=cap, replace=False)
        keep.update(recs[i].image_path for i in chosen)
    records = tuple(r for r in m.records if r.image_path in keep)
    cap = cap if m.cap is None else min(cap, m.cap)
    return dataclasses.replace(m, records=records, cap=cap, balance_seed=seed)


def split(m: CorpusManifest, train_fraction: float = 0.9, seed: int = 42) -> CorpusManifest:
    """Stratified train/test assignment: floor(fraction * n) train per family."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if m.is_split:
        raise ManifestError("split expects an unsplit manifest")
    assignment: Dict[str, str] = {}
    warnings = list(m.warnings)
    for idx, recs in m.by_family().items():
        n = len(recs)
        if n < 2:
            warnings.append(f"family {m.family_table[idx].name} has {n} record(s); all assigned to train")
            assignment.update((r.image_path, TRAIN) for r in recs)
            continue
        n_train = math.floor(Fraction(repr(train_fraction)) * n)
        order = _family_rng(seed, idx).permutation(n)
        for rank, i in enumerate(order):
            assignment[recs[i].image_path] = TRAIN if rank < n_train else TEST
    records = tuple(dataclasses.replace(r, split=assignment[r.image_path]) for r in m.records)
    return dataclasses.replace(m, records=records, seed=seed, train_fraction=train_fraction,
                               warnings=tuple(warnings))


def _fmt_opt(value) -> str:
    return "none" if value is None else repr(value) if isinstance(value, float) else str(value)


def dumps_manifest(m: CorpusManifest) -> str:
    lines = [
        f"# cap={_fmt_opt(m.cap)}",
        f"# balance_seed={_fmt_opt(m.balance_seed)}",
        f"# seed={_fmt_opt(m.seed)}",
        f"# train_fraction={_fmt_opt(m.train_fraction)}",
    ]
    lines += [f"# family.{f.index}={f.name}" for f in m.family_table]
    lines += [f"# warning={w}" for w in m.warnings]
    for r in m.records:
        lines.append("\t".join((r.image_path, r.family.name, str(r.family.index),
                                r.split or UNSPLIT, r.content_hash)))
    return "\n".join(lines) + "\n"


def save_manifest(m: CorpusManifest, path: Union[str, os.PathLike]) -> None:
    Path(path).write_text(dumps_manifest(m), encoding="utf-8", newline="\n")


def _parse_opt(value: str, kind):
    return None if value == "none" else kind(value)


def loads_manifest(text: str) -> CorpusManifest:
    header = {}
    families: Dict[int, str] = {}
    warnings = []
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if not sep:
                raise ManifestError(f"line {lineno}: malformed header {line!r}")
            if key.startswith("family."):
                try:
                    families[int(key[len("family."):])] = value
                except ValueError:
                    raise ManifestError(f"line {lineno}: malformed family header {line!r}") from None
            elif key == "warning":
                warnings.append(value)
            else:
                header[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"line {lineno}: expected 5 tab-separated fields, got {len(parts)}")
        path, name, index, split_field, digest = parts
        try:
            index = int(index)
        except ValueError:
            raise ManifestError(f"line {lineno}: family index {index!r} is not an integer") from None
        if split_field not in (TRAIN, TEST, UNSPLIT):
            raise ManifestError(f"line {lineno}: invalid split {split_field!r}")
        if index not in families or families[index] != name:
            raise ManifestError(f"line {lineno}: unknown family index {index} ({name!r})")
        rows.append((path, name, index, None if split_field == UNSPLIT else split_field, digest))
    if sorted(families) != list(range(len(families))):
        raise ManifestError("family indices are not contiguous from 0")
    table = tuple(FamilyLabel(families[i], i) for i in range(len(families)))
    records = tuple(SampleRecord(p, table[i], s, h) for p, _, i, s, h in rows)
    try:
        return CorpusManifest(
            records, table,
            cap=_parse_opt(header.get("cap", "none"), int),
            seed=_parse_opt(header.get("seed", "none"), int),
            train_fraction=_parse_opt(header.get("train_fraction", "none"), float),
            balance_seed=_parse_opt(header.get("balance_seed", "none"), int),
            warnings=tuple(warnings),
        )
    except ValueError as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"malformed header value: {exc}") from None


def load_manifest(path: Union[str, os.PathLike]) -> CorpusManifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"))


def synthetic_manifest(counts: Sequence[int], names: Optional[Sequence[str]] = None) -> CorpusManifest:
    """File-less manifest with the given per-family counts (for count-level experiments)."""
    names = list(names) if names is not None else [f"family{i:02d}" for i in range(len(counts))]
    table = tuple(FamilyLabel(n, i) for i, n in enumerate(names))
    records = []
    for fam, n in zip(table, counts):
        for j in range(n):
            path = f"{fam.name}/{j:05d}.png"
            records.append(SampleRecord(path, fam, None, hashlib.sha256(path.encode()).hexdigest()))
    return CorpusManifest(tuple(records), table)


def family_counts_csv(columns: Dict[str, CorpusManifest], path: Union[str, os.PathLike]) -> None:
    """Write a family x column count table (the data behind a per-family bar chart)."""
    names = list(columns)
    first = columns[names[0]]
    lines = ["family," + ",".join(names)]
    per_col = [m.family_counts() for m in columns.values()]
    for i, fam in enumerate(first.family_table):
        lines.append(fam.name + "," + ",".join(str(c[i]) for c in per_col))
    lines.append("Total," + ",".join(str(sum(c)) for c in per_col))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
