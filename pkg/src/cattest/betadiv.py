"""Beta-diversity distances, distance-to-kernel conversion and PCoA."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ingest import CatWarning, CountTable, IngestError, read_text
from .phylo import PhyloTree

__all__ = [
    "METRICS",
    "PHYLO_METRICS",
    "DistanceError",
    "DistanceMatrix",
    "Kernel",
    "PCoAResult",
    "bray_curtis",
    "jaccard",
    "euclidean",
    "weighted_unifrac",
    "unweighted_unifrac",
    "compute_distance",
    "double_center",
    "distance_to_kernel",
    "pcoa",
    "read_distance_matrix",
    "write_distance_matrix",
]

METRICS = ("bray-curtis", "jaccard", "weighted-unifrac", "unweighted-unifrac", "euclidean", "precomputed")
PHYLO_METRICS = ("weighted-unifrac", "unweighted-unifrac")


class DistanceError(ValueError):
    pass


@dataclass(frozen=True)
class DistanceMatrix:
    sample_ids: tuple[str, ...]
    values: np.ndarray = field(repr=False)
    metric: str = "precomputed"

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        v = np.array(self.values, dtype=float, copy=True)
        n = len(self.sample_ids)
        if v.shape != (n, n):
            raise DistanceError(f"distance matrix shape {v.shape} does not match {n} sample ids")
        if self.metric not in METRICS:
            raise DistanceError(f"unknown metric {self.metric!r}")
        if not np.all(np.isfinite(v)):
            raise DistanceError("distance matrix has non-finite entries")
        if np.any(v < 0):
            raise DistanceError("distance matrix has negative entries")
        if np.any(np.diag(v) != 0):
            raise DistanceError("distance matrix diagonal must be zero")
        if not np.array_equal(v, v.T):
            raise DistanceError("distance matrix is not symmetric")
        if len(set(self.sample_ids)) != n:
            raise DistanceError("duplicate sample ids in distance matrix")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def select(self, sample_ids: Sequence[str]) -> "DistanceMatrix":
        lookup = {s: i for i, s in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in lookup]
        if missing:
            raise DistanceError(f"samples not in distance matrix: {', '.join(missing)}")
        idx = [lookup[s] for s in sample_ids]
        return DistanceMatrix(tuple(sample_ids), self.values[np.ix_(idx, idx)], self.metric)


@dataclass(frozen=True)
class Kernel:
    sample_ids: tuple[str, ...]
    values: np.ndarray = field(repr=False)
    psd_corrected: bool = False


def _pairwise(n: int, row: Callable[[int], np.ndarray], threads: int = 1) -> np.ndarray:
    # row(i) returns distances from i to samples i+1..n-1; every pair is
    # computed independently so the thread count cannot change any value.
    out = np.zeros((n, n))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(row, range(n - 1)))
    else:
        rows = [row(i) for i in range(n - 1)]
    for i, r in enumerate(rows):
        out[i, i + 1 :] = r
    return out + out.T


def _ratio(num: np.ndarray, den: np.ndarray, what: str) -> np.ndarray:
    empty = den == 0
    if np.any(empty):
        warnings.warn(f"{what}: {int(empty.sum())} pair(s) of empty samples given distance 0", CatWarning, stacklevel=3)
    return np.divide(num, den, out=np.zeros(num.shape, dtype=float), where=~empty)


def bray_curtis(table: CountTable, proportions: bool = False, threads: int = 1) -> DistanceMatrix:
    """Bray-Curtis dissimilarity sum|x - y| / sum(x + y), on raw counts by default."""
    x = table.counts
    if proportions:
        x = _proportions(table, "bray-curtis")

    def row(i):
        rest = x[i + 1 :]
        num = np.abs(rest - x[i]).sum(axis=1)
        den = (rest + x[i]).sum(axis=1)
        return _ratio(num.astype(float), den.astype(float), "bray-curtis")

    return DistanceMatrix(table.sample_ids, _pairwise(table.n_samples, row, threads), "bray-curtis")


def jaccard(table: CountTable, threads: int = 1) -> DistanceMatrix:
    """Presence/absence Jaccard distance 1 - |A & B| / |A | B|."""
    p = table.counts > 0

    def row(i):
        rest = p[i + 1 :]
        inter = (rest & p[i]).sum(axis=1)
        union = (rest | p[i]).sum(axis=1)
        return _ratio((union - inter).astype(float), union.astype(float), "jaccard")

    return DistanceMatrix(table.sample_ids, _pairwise(table.n_samples, row, threads), "jaccard")


def euclidean(table: CountTable, threads: int = 1) -> DistanceMatrix:
    x = table.counts

    def row(i):
        diff = x[i + 1 :] - x[i]
        return np.sqrt((diff * diff).sum(axis=1).astype(float))

    return DistanceMatrix(table.sample_ids, _pairwise(table.n_samples, row, threads), "euclidean")


def _proportions(table: CountTable, what: str) -> np.ndarray:
    totals = table.counts.sum(axis=1)
    if np.any(totals == 0):
        empty = [s for s, t in zip(table.sample_ids, totals) if t == 0]
        raise DistanceError(f"{what}: samples with zero total count: {', '.join(empty)}")
    return table.counts / totals[:, None]


def _branch_abundance(table: CountTable, tree: PhyloTree, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-branch descendant proportions (samples x branches) and branch lengths."""
    leaf_of = tree.leaf_index
    totals = table.counts.sum(axis=0)
    missing = [f for f, t in zip(table.feature_ids, totals) if t > 0 and f not in leaf_of]
    if missing:
        raise DistanceError(f"{what}: features missing from tree: {', '.join(missing)}")
    p = _proportions(table, what)
    acc = np.zeros((len(tree), table.n_samples))
    for j, f in enumerate(table.feature_ids):
        if f in leaf_of:
            acc[leaf_of[f]] = p[:, j]
    for node in tree.postorder():
        parent = tree.parent[node]
        if parent >= 0:
            acc[parent] += acc[node]
    branches = np.array([n for n in range(len(tree)) if n != 0 and tree.length[n] > 0], dtype=np.intp)
    lengths = np.array([tree.length[n] for n in branches], dtype=float)
    return np.ascontiguousarray(acc[branches].T), lengths


def weighted_unifrac(table: CountTable, tree: PhyloTree, normalized: bool = True, threads: int = 1) -> DistanceMatrix:
    """Weighted UniFrac on per-sample proportions.

    The raw distance is sum_b l_b |p_A(b) - p_B(b)| over branches b with
    length l_b, where p_S(b) is the fraction of sample S below b. The
    normalized form divides by sum_b l_b (p_A(b) + p_B(b)).
    """
    w, lengths = _branch_abundance(table, tree, "weighted-unifrac")

    def row(i):
        rest = w[i + 1 :]
        num = (np.abs(rest - w[i]) * lengths).sum(axis=1)
        if not normalized:
            return num
        den = ((rest + w[i]) * lengths).sum(axis=1)
        return _ratio(num, den, "weighted-unifrac")

    return DistanceMatrix(table.sample_ids, _pairwise(table.n_samples, row, threads), "weighted-unifrac")


def unweighted_unifrac(table: CountTable, tree: PhyloTree, threads: int = 1) -> DistanceMatrix:
    """Fraction of observed branch length leading to exactly one of the two samples."""
    w, lengths = _branch_abundance(table, tree, "unweighted-unifrac")
    present = w > 0

    def row(i):
        rest = present[i + 1 :]
        unique = ((rest ^ present[i]) * lengths).sum(axis=1)
        union = ((rest | present[i]) * lengths).sum(axis=1)
        return _ratio(unique, union, "unweighted-unifrac")

    return DistanceMatrix(table.sample_ids, _pairwise(table.n_samples, row, threads), "unweighted-unifrac")


def compute_distance(
    table: CountTable,
    metric: str,
    tree: PhyloTree | None = None,
    *,
    normalized: bool = True,
    proportions: bool = False,
    threads: int = 1,
) -> DistanceMatrix:
    """Dispatch on a metric tag."""
    if metric in PHYLO_METRICS and tree is None:
        raise DistanceError(f"{metric} needs a phylogenetic tree")
    if metric == "bray-curtis":
        return bray_curtis(table, proportions=proportions, threads=threads)
    if metric == "jaccard":
        return jaccard(table, threads=threads)
    if metric == "euclidean":
        return euclidean(table, threads=threads)
    if metric == "weighted-unifrac":
        return weighted_unifrac(table, tree, normalized=normalized, threads=threads)
    if metric == "unweighted-unifrac":
        return unweighted_unifrac(table, tree, threads=threads)
    raise DistanceError(f"cannot compute metric {metric!r} from counts")


def double_center(a: np.ndarray) -> np.ndarray:
    """(I - 11'/n) a (I - 11'/n), symmetrized; works on stacks of matrices."""
    row = a.mean(axis=-1, keepdims=True)
    col = a.mean(axis=-2, keepdims=True)
    grand = row.mean(axis=-2, keepdims=True)
    g = a - row - col + grand
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def _eig_tol(eigvals: np.ndarray) -> float:
    return 1e-10 * max(float(np.abs(eigvals).max(initial=0.0)), 1e-300)


def distance_to_kernel(dist: DistanceMatrix) -> Kernel:
    """Centered kernel J(-d^2/2)J, with negative eigenvalues clipped to zero when needed.

    Clipping is followed by re-centering so row sums stay zero.
    """
    d = np.asarray(dist.values, dtype=float)
    if not np.all(np.isfinite(d)):
        raise DistanceError("distance matrix has non-finite entries")
    k = double_center(-0.5 * d * d)
    vals, vecs = np.linalg.eigh(k)
    corrected = bool(vals.min(initial=0.0) < -_eig_tol(vals))
    if corrected:
        k = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        k = double_center(k)
    return Kernel(dist.sample_ids, k, corrected)


@dataclass(frozen=True)
class PCoAResult:
    sample_ids: tuple[str, ...]
    coordinates: np.ndarray
    eigenvalues: np.ndarray
    proportion_explained: np.ndarray
    negative_eigenvalues: np.ndarray


def pcoa(dist: DistanceMatrix, k: int = 2) -> PCoAResult:
    """Principal coordinates: eigenvectors of the Gower matrix scaled by sqrt(eigenvalue).

    Axes are sorted by decreasing eigenvalue and each eigenvector's sign is
    fixed so its largest-magnitude entry is positive. Axes with negative
    eigenvalues are never returned; they are reported in
    ``negative_eigenvalues``. When fewer than ``k`` positive eigenvalues
    exist, fewer axes are returned with a warning (a single all-zero axis if
    there are none, e.g. all samples identical).
    """
    n = len(dist)
    if not 1 <= k <= n:
        raise DistanceError(f"need 1 <= k <= n ({n}), got k={k}")
    g = double_center(-0.5 * dist.values**2)
    vals, vecs = np.linalg.eigh(g)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    tol = _eig_tol(vals)
    positive = vals > tol
    negative = vals[vals < -tol]
    n_pos = int(positive.sum())
    if n_pos < k:
        warnings.warn(f"only {n_pos} positive eigenvalue(s); returning {max(n_pos, 1)} of {k} requested axes", CatWarning, stacklevel=2)
    if n_pos == 0:
        return PCoAResult(dist.sample_ids, np.zeros((n, 1)), np.zeros(1), np.zeros(1), negative)
    m = min(k, n_pos)
    vecs = vecs[:, :m].copy()
    for j in range(m):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] = -vecs[:, j]
    coords = vecs * np.sqrt(vals[:m])
    explained = vals[:m] / vals[positive].sum()
    return PCoAResult(dist.sample_ids, coords, vals[:m].copy(), explained, negative)


def write_distance_matrix(dist: DistanceMatrix, path) -> None:
    """Square TSV with a sample-id header row and column; 17 significant digits."""
    lines = ["\t".join(("",) + dist.sample_ids)]
    for sid, row in zip(dist.sample_ids, dist.values):
        lines.append("\t".join([sid] + [format(v, ".17g") for v in row]))
    text = "\n".join(lines) + "\n"
    if path == "-":
        import sys

        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_distance_matrix(path, metric: str = "precomputed") -> DistanceMatrix:
    rows = [line.split("\t") for line in read_text(path).splitlines() if line.strip()]
    if len(rows) < 2:
        raise IngestError(f"{path}: empty distance matrix")
    ids = [c.strip() for c in rows[0][1:]]
    if len(rows) - 1 != len(ids):
        raise IngestError(f"{path}: {len(rows) - 1} rows for {len(ids)} columns")
    vals = np.zeros((len(ids), len(ids)))
    for r, row in enumerate(rows[1:]):
        if len(row) != len(ids) + 1:
            raise IngestError(f"{path}: line {r + 2} has {len(row) - 1} values, expected {len(ids)}")
        if row[0].strip() != ids[r]:
            raise IngestError(f"{path}: row id {row[0].strip()!r} does not match column id {ids[r]!r}")
        try:
            vals[r] = [float(c) for c in row[1:]]
        except ValueError:
            raise IngestError(f"{path}: line {r + 2}: non-numeric distance") from None
    try:
        return DistanceMatrix(tuple(ids), vals, metric)
    except DistanceError as exc:
        raise IngestError(f"{path}: {exc}") from None
