"""Count tables, sample outcomes and taxonomy assignments read from TSV files.

Everything downstream works on samples x features; files may be stored
either way round and are transposed on load.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "RANKS",
    "CatWarning",
    "IngestError",
    "CountTable",
    "Outcome",
    "TaxonomyAssignment",
    "read_text",
    "load_count_table",
    "write_count_table",
    "load_outcome",
    "load_taxonomy",
    "match_taxonomy",
    "parse_lineage",
]

RANKS = ("kingdom", "phylum", "class", "order", "family", "genus", "species")
_PREFIXES = {r[0] + "__": r for r in RANKS}
_PREFIXES["d__"] = "kingdom"  # SILVA writes domain instead of kingdom
_MISSING = {"", "na", "nan", "none", "null"}
_ID_HEADERS = {"feature id", "feature_id", "featureid", "#otu id", "#otuid", "otu_id", "otu id", "id", "#id"}


class IngestError(ValueError):
    """Malformed or inconsistent input file."""


class CatWarning(UserWarning):
    """Recoverable data problem (gaps in a lineage, dropped features, ...)."""


def read_text(path: str | Path) -> str:
    """Read a UTF-8 file, reporting the byte offset of any invalid sequence."""
    raw = Path(path).read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IngestError(f"{path}: invalid UTF-8 at byte offset {exc.start}") from None


def _rows(path: str | Path) -> list[list[str]]:
    lines = read_text(path).splitlines()
    return [line.split("\t") for line in lines if line.strip() and not line.startswith("##")]


def _duplicates(ids: Iterable[str]) -> list[str]:
    seen: set[str] = set()
    dup: list[str] = []
    for i in ids:
        if i in seen and i not in dup:
            dup.append(i)
        seen.add(i)
    return dup


@dataclass(frozen=True)
class CountTable:
    """Non-negative integer counts, one row per sample and one column per feature."""

    sample_ids: tuple[str, ...]
    feature_ids: tuple[str, ...]
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        object.__setattr__(self, "feature_ids", tuple(str(f) for f in self.feature_ids))
        counts = np.array(self.counts, copy=True)
        if counts.ndim != 2 or counts.shape != (len(self.sample_ids), len(self.feature_ids)):
            raise IngestError(
                f"counts shape {counts.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.feature_ids)} features"
            )
        if counts.dtype.kind == "f":
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise IngestError("counts must be integers")
        elif counts.dtype.kind not in "iub":
            raise IngestError(f"counts must be integers, got dtype {counts.dtype}")
        counts = counts.astype(np.int64)
        if counts.size and counts.min() < 0:
            i, j = np.argwhere(counts < 0)[0]
            raise IngestError(
                f"negative count {counts[i, j]} at sample {self.sample_ids[i]!r}, "
                f"feature {self.feature_ids[j]!r}"
            )
        if len(self.sample_ids) < 2:
            raise IngestError("a count table needs at least 2 samples")
        if len(self.feature_ids) < 1:
            raise IngestError("a count table needs at least 1 feature")
        for kind, ids in (("sample", self.sample_ids), ("feature", self.feature_ids)):
            dup = _duplicates(ids)
            if dup:
                raise IngestError(f"duplicate {kind} ids: {', '.join(dup)}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    def feature_indices(self, ids: Iterable[str]) -> np.ndarray:
        """Column positions of ``ids``; unknown ids raise."""
        lookup = {f: j for j, f in enumerate(self.feature_ids)}
        ids = list(ids)
        missing = sorted(i for i in set(ids) if i not in lookup)
        if missing:
            raise IngestError(f"unknown feature ids: {', '.join(missing)}")
        return np.array(sorted(lookup[i] for i in set(ids)), dtype=np.intp)

    def select_samples(self, sample_ids: Sequence[str]) -> "CountTable":
        """Rows reordered (or subset) to match ``sample_ids``."""
        lookup = {s: i for i, s in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in lookup]
        if missing:
            raise IngestError(f"samples not in count table: {', '.join(missing)}")
        rows = [lookup[s] for s in sample_ids]
        return CountTable(tuple(sample_ids), self.feature_ids, self.counts[rows])

    def with_counts(self, counts: np.ndarray) -> "CountTable":
        return CountTable(self.sample_ids, self.feature_ids, counts)


def load_count_table(path: str | Path, orientation: str = "features-as-rows") -> CountTable:
    """Load a tab-delimited count table.

    Parameters
    ----------
    path : str or Path
        TSV file. The first row holds column identifiers (its first cell is
        ignored) and the first column holds row identifiers.
    orientation : {"features-as-rows", "samples-as-rows"}
        How the file is laid out. The returned table is always samples x
        features.
    """
    if orientation not in ("features-as-rows", "samples-as-rows"):
        raise IngestError(f"unknown orientation {orientation!r}")
    rows = _rows(path)
    if len(rows) < 2:
        raise IngestError(f"{path}: need a header row and at least one data row")
    header = [c.strip() for c in rows[0][1:]]
    ncol = len(header)
    row_ids: list[str] = []
    values = np.zeros((len(rows) - 1, ncol), dtype=np.int64)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != ncol + 1:
            raise IngestError(f"{path}: line {r} has {len(row) - 1} values, expected {ncol}")
        row_ids.append(row[0].strip())
        for c, cell in enumerate(row[1:]):
            values[r - 2, c] = _parse_count(cell, path, r, c + 2, row[0], header[c])
    if orientation == "features-as-rows":
        feature_ids, sample_ids, counts = row_ids, header, values.T
    else:
        feature_ids, sample_ids, counts = header, row_ids, values
    for kind, ids in (("sample", sample_ids), ("feature", feature_ids)):
        dup = _duplicates(ids)
        if dup:
            raise IngestError(f"{path}: duplicate {kind} ids: {', '.join(dup)}")
    return CountTable(tuple(sample_ids), tuple(feature_ids), counts)


def _parse_count(cell: str, path, line: int, col: int, row_id: str, col_id: str) -> int:
    where = f"{path}: line {line}, column {col} ({row_id!r}, {col_id!r})"
    text = cell.strip()
    try:
        value = int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise IngestError(f"{where}: not a number: {text!r}") from None
        if not math.isfinite(f) or f != int(f):
            raise IngestError(f"{where}: non-integer count {text!r}") from None
        value = int(f)
    if value < 0:
        raise IngestError(f"{where}: negative count {text!r}")
    return value


def write_count_table(table: CountTable, path: str | Path, orientation: str = "features-as-rows") -> None:
    if orientation == "features-as-rows":
        cols, rows, mat = table.sample_ids, table.feature_ids, table.counts.T
    elif orientation == "samples-as-rows":
        cols, rows, mat = table.feature_ids, table.sample_ids, table.counts
    else:
        raise IngestError(f"unknown orientation {orientation!r}")
    lines = ["\t".join(("#id",) + tuple(cols))]
    for rid, vals in zip(rows, mat):
        lines.append("\t".join([rid] + [str(int(v)) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Outcome:
    """Per-sample outcome: continuous values or categorical labels.

    Binary outcomes are categorical with exactly two levels. ``levels`` is
    sorted lexicographically; the first level is the reference category.
    """

    sample_ids: tuple[str, ...]
    kind: str
    values: tuple

    def __post_init__(self):
        if self.kind not in ("continuous", "binary", "categorical"):
            raise IngestError(f"unknown outcome kind {self.kind!r}")
        if len(self.sample_ids) != len(self.values):
            raise IngestError("outcome needs exactly one value per sample")
        dup = _duplicates(self.sample_ids)
        if dup:
            raise IngestError(f"duplicate sample ids in outcome: {', '.join(dup)}")
        if self.kind == "continuous":
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        else:
            object.__setattr__(self, "values", tuple(str(v) for v in self.values))
            n = len(self.levels)
            if n < 2:
                raise IngestError(f"{self.kind} outcome has a single level: {self.levels}")
            if self.kind == "binary" and n != 2:
                raise IngestError(f"binary outcome must have exactly 2 levels, found {n}: {self.levels}")

    @property
    def is_categorical(self) -> bool:
        return self.kind != "continuous"

    @property
    def levels(self) -> tuple[str, ...]:
        if not self.is_categorical:
            return ()
        return tuple(sorted(set(self.values)))

    def as_array(self) -> np.ndarray:
        """Float values, or integer level codes for categorical outcomes."""
        if not self.is_categorical:
            return np.asarray(self.values, dtype=float)
        code = {lv: i for i, lv in enumerate(self.levels)}
        return np.array([code[v] for v in self.values], dtype=np.intp)

    def align(self, sample_ids: Sequence[str]) -> "Outcome":
        """Outcome reordered to ``sample_ids``; extra metadata samples are dropped."""
        lookup = dict(zip(self.sample_ids, self.values))
        missing = [s for s in sample_ids if s not in lookup]
        if missing:
            raise IngestError(f"samples missing from outcome: {', '.join(missing)}")
        return Outcome(tuple(sample_ids), self.kind, tuple(lookup[s] for s in sample_ids))


def load_outcome(path: str | Path, column: str, kind: str, id_column: str | None = None) -> Outcome:
    """Read one outcome column from a tab-delimited metadata file.

    The sample identifier column is ``id_column`` if given, otherwise the
    first column.
    """
    rows = _rows(path)
    if not rows:
        raise IngestError(f"{path}: empty metadata file")
    header = [h.strip() for h in rows[0]]
    if column not in header:
        raise IngestError(f"{path}: no column {column!r} (have {', '.join(header)})")
    col = header.index(column)
    if id_column is None:
        id_col = 0
    elif id_column in header:
        id_col = header.index(id_column)
    else:
        raise IngestError(f"{path}: no sample id column {id_column!r}")
    ids, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise IngestError(f"{path}: line {r} has {len(row)} fields, expected {len(header)}")
        sid, raw = row[id_col].strip(), row[col].strip()
        if raw.lower() in _MISSING:
            raise IngestError(f"{path}: missing {column!r} value for sample {sid!r}")
        if kind == "continuous":
            try:
                val = float(raw)
            except ValueError:
                raise IngestError(f"{path}: non-numeric {column!r} value {raw!r} for sample {sid!r}") from None
            if not math.isfinite(val):
                raise IngestError(f"{path}: non-finite {column!r} value for sample {sid!r}")
            values.append(val)
        else:
            values.append(raw)
        ids.append(sid)
    return Outcome(tuple(ids), kind, tuple(values))


@dataclass(frozen=True)
class TaxonomyAssignment:
    feature_id: str
    lineage: tuple[tuple[str, str], ...]


def parse_lineage(text: str, feature_id: str = "") -> tuple[tuple[str, str], ...]:
    """Parse ``"k__Bacteria;p__Firmicutes;..."`` into (rank, name) pairs.

    Empty segments such as ``"g__"`` are unassigned and omitted; a gap before
    a later assigned rank triggers a :class:`CatWarning`.
    """
    lineage: list[tuple[str, str]] = []
    last = -1
    gap = False
    for seg in text.split(";"):
        seg = seg.strip()
        if not seg:
            continue
        prefix, name = seg[:3].lower(), seg[3:].strip()
        if prefix not in _PREFIXES:
            raise IngestError(f"feature {feature_id!r}: unknown rank prefix {seg[:3]!r}")
        rank = _PREFIXES[prefix]
        pos = RANKS.index(rank)
        if pos <= last:
            raise IngestError(f"feature {feature_id!r}: rank {rank!r} out of order in {text!r}")
        last = pos
        if not name:
            gap = True
            continue
        if gap or (lineage and RANKS.index(lineage[-1][0]) < pos - 1):
            warnings.warn(f"feature {feature_id!r}: unassigned rank before {rank} in {text!r}", CatWarning, stacklevel=3)
        gap = False
        lineage.append((rank, name))
    return tuple(lineage)


def _lineage_from_columns(header: list[str], row: list[str], feature_id: str) -> tuple[tuple[str, str], ...]:
    parts = []
    for rank, cell in zip(header, row):
        name = cell.strip()
        if len(name) > 3 and name[:3].lower() in _PREFIXES:
            name = name[3:]
        if name and name.lower() not in _MISSING and not name.endswith("__"):
            parts.append(f"{rank[0]}__{name}")
        else:
            parts.append(f"{rank[0]}__")
    return parse_lineage(";".join(parts), feature_id)


def load_taxonomy(path: str | Path) -> list[TaxonomyAssignment]:
    """Read taxonomy assignments.

    Two layouts are accepted: ``feature_id<TAB>lineage`` with Greengenes-style
    rank prefixes (extra columns such as a confidence score are ignored), or
    a header row naming ranks followed by one column per rank.
    """
    rows = _rows(path)
    if not rows:
        raise IngestError(f"{path}: empty taxonomy file")
    first = [c.strip().lower() for c in rows[0]]
    out: list[TaxonomyAssignment] = []
    if len(first) > 1 and all(c in RANKS for c in first[1:]):
        ranks = first[1:]
        if list(ranks) != sorted(ranks, key=RANKS.index):
            raise IngestError(f"{path}: rank columns out of order: {ranks}")
        for r, row in enumerate(rows[1:], start=2):
            fid = row[0].strip()
            try:
                out.append(TaxonomyAssignment(fid, _lineage_from_columns(ranks, row[1:], fid)))
            except IngestError as exc:
                raise IngestError(f"{path}: line {r}: {exc}") from None
    else:
        body = rows[1:] if first[0] in _ID_HEADERS else rows
        start = 2 if body is not rows else 1
        for r, row in enumerate(body, start=start):
            fid = row[0].strip()
            text = row[1] if len(row) > 1 else ""
            try:
                out.append(TaxonomyAssignment(fid, parse_lineage(text, fid)))
            except IngestError as exc:
                raise IngestError(f"{path}: line {r}: {exc}") from None
    dup = _duplicates(a.feature_id for a in out)
    if dup:
        raise IngestError(f"{path}: duplicate feature ids: {', '.join(dup)}")
    return out


def match_taxonomy(
    assignments: Sequence[TaxonomyAssignment], table: CountTable, strict: bool = True
) -> list[TaxonomyAssignment]:
    """Check assignments against a count table's features.

    Assignments for features absent from the table raise in strict mode and
    are dropped with a warning otherwise.
    """
    known = set(table.feature_ids)
    extra = [a.feature_id for a in assignments if a.feature_id not in known]
    if extra and strict:
        raise IngestError(f"taxonomy features not in count table: {', '.join(extra)}")
    if extra:
        warnings.warn(f"dropping {len(extra)} taxonomy features not in count table: {', '.join(extra)}", CatWarning, stacklevel=2)
    return [a for a in assignments if a.feature_id in known]
