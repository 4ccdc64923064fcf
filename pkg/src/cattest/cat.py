"""Conditional association test by leaving a taxon out.

For a taxon t, counts of every leaf feature below t are set to zero, the
sample distances are recomputed, and the drop in distance-based R^2 is
bootstrapped. Each bootstrap replicate takes the same resampled indices
from the original distances, the leave-out distances and the outcome; the
p-value is the share of replicates in which removing t *raised* R^2.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import streams
from .betadiv import PHYLO_METRICS, DistanceMatrix, compute_distance, distance_to_kernel
from .ingest import CountTable, IngestError, Outcome
from .permanova import design_from_outcome, dumps_json, orthonormal_basis, r_squared_terms
from .phylo import PhyloTree, TaxonomyTree, leaf_set, resolve_taxon

__all__ = [
    "CatError",
    "CatRequest",
    "CatResult",
    "zero_out_taxon",
    "cat_test",
    "cat_test_multi",
    "mann_whitney",
    "results_to_tsv",
    "results_to_json",
]

MAX_METRICS = "max-over-metrics"


class CatError(ValueError):
    pass


@dataclass
class CatRequest:
    """Inputs for one CAT run.

    ``taxa`` entries are single references (node handle, ``(rank, name)``,
    ``"rank:name"`` or a label) or a list/set of references, which are left
    out together. ``taxon_tree`` picks the tree defining each taxon's leaf
    set; it may be omitted when only one tree is supplied.
    """

    table: CountTable
    outcome: Outcome
    taxa: Sequence
    metrics: Sequence[str] = ("weighted-unifrac",)
    n_bootstrap: int = 1000
    seed: int = 0
    tree: PhyloTree | None = None
    taxonomy: TaxonomyTree | None = None
    taxon_tree: str | None = None
    kernel: bool = False
    normalized: bool = True
    proportions: bool = False
    covariates: Mapping[str, Sequence[float]] | None = None
    threads: int = 1


@dataclass
class CatResult:
    taxon: str
    level: str
    r2_original: float
    r2_leaveout: float
    r2_difference: float
    bootstrap_differences: np.ndarray = field(repr=False)
    p_value: float
    degenerate: bool
    metric_used: str
    n_bootstrap: int
    n_leaves: int = 0

    @property
    def p_display(self) -> str:
        if self.p_value == 0:
            return f"< {1 / self.n_bootstrap:g}"
        return format(self.p_value, "g")

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "taxon": self.taxon,
            "r2_original": self.r2_original,
            "r2_leaveout": self.r2_leaveout,
            "r2_difference": self.r2_difference,
            "p_value": self.p_value,
            "p_display": self.p_display,
            "degenerate": self.degenerate,
            "metric_used": self.metric_used,
            "n_bootstrap": self.n_bootstrap,
            "n_leaves": self.n_leaves,
            "bootstrap_differences": [float(x) for x in self.bootstrap_differences],
        }


def zero_out_taxon(table: CountTable, leaves) -> CountTable:
    """Copy of ``table`` with every column in ``leaves`` set to zero."""
    idx = table.feature_indices(leaves)
    counts = table.counts.copy()
    counts[:, idx] = 0
    return table.with_counts(counts)


def _is_taxon_set(ref) -> bool:
    return isinstance(ref, (list, set, frozenset))


def _describe(tree, refs) -> tuple[str, str]:
    levels, names = [], []
    for ref in refs:
        node = resolve_taxon(tree, ref)
        rank = tree.rank[node] if isinstance(tree, TaxonomyTree) else None
        if rank is None:
            rank = "leaf" if tree.is_leaf(node) else "node" if node else "root"
        levels.append(rank)
        names.append(tree.label[node] if tree.label[node] is not None else str(node))
    return "+".join(levels), "+".join(names)


def _leaf_tree(req: CatRequest):
    choice = req.taxon_tree
    if choice is None:
        if req.taxonomy is not None and req.tree is not None:
            raise CatError("both a taxonomy and a phylogeny were given; set taxon_tree to 'taxonomy' or 'phylogeny'")
        choice = "taxonomy" if req.taxonomy is not None else "phylogeny"
    tree = req.taxonomy if choice == "taxonomy" else req.tree if choice == "phylogeny" else None
    if tree is None:
        raise CatError(f"no {choice} tree supplied to resolve taxa")
    return tree


class _Engine:
    """Shared state of one request: sorted samples, design, bootstrap draws, original R^2."""

    def __init__(self, req: CatRequest):
        if req.n_bootstrap < 1:
            raise CatError("n_bootstrap must be >= 1")
        if not req.metrics:
            raise CatError("at least one metric is required")
        for m in req.metrics:
            if m in PHYLO_METRICS and req.tree is None:
                raise CatError(f"{m} needs a phylogenetic tree")
            if m == "precomputed":
                raise CatError("CAT needs count data; precomputed distances are not supported")
        self.req = req
        order = sorted(req.table.sample_ids)
        try:
            self.table = req.table.select_samples(order)
            outcome = req.outcome.align(order)
        except IngestError as exc:
            raise CatError(str(exc)) from None
        covs = None
        if req.covariates:
            pos = {s: i for i, s in enumerate(req.table.sample_ids)}
            covs = {k: np.asarray(v, dtype=float)[[pos[s] for s in order]] for k, v in req.covariates.items()}
        self.design = design_from_outcome(outcome, covs).values
        self.q_full, _ = orthonormal_basis(self.design)
        self.n = len(order)
        self.B = int(req.n_bootstrap)
        self.dists = self.distances(self.table)
        self.sims = [self._similarity(d) for d in self.dists]
        totals = [float(r_squared_terms(s, self.q_full)[0]) for s in self.sims]
        if min(totals) <= 0:
            raise CatError("degenerate distance matrix (total sum of squares is zero)")
        # resampled totals at or below this are treated as zero
        self.eps = [1e-12 * t for t in totals]
        self._draw()
        self.r2 = max(self._r2_full(s) for s in self.sims)
        self.r2_boot = np.max(np.stack([self._r2_boot(s, e) for s, e in zip(self.sims, self.eps)]), axis=0)

    def distances(self, table: CountTable) -> list[DistanceMatrix]:
        r = self.req
        return [
            compute_distance(table, m, r.tree, normalized=r.normalized, proportions=r.proportions, threads=r.threads)
            for m in r.metrics
        ]

    def _similarity(self, dist: DistanceMatrix) -> np.ndarray:
        if self.req.kernel:
            return distance_to_kernel(dist).values
        return -0.5 * dist.values * dist.values

    def _draw(self) -> None:
        # replicate i keeps drawing from its own substream until its design is
        # full rank and none of the resampled original distances is all zero
        n, B = self.n, self.B

        def chunk(start, stop):
            idx = np.empty((stop - start, n), dtype=np.intp)
            redraws = 0
            for i in range(start, stop):
                rng = streams.substream(self.req.seed, streams.BOOTSTRAP, i)
                draw = rng.integers(0, n, size=n)
                while not self._usable(draw) and redraws <= 10 * B:
                    redraws += 1
                    draw = rng.integers(0, n, size=n)
                idx[i - start] = draw
            return idx, redraws

        parts = streams.run_chunked(B, chunk, self.req.threads)
        self.redraws = sum(r for _, r in parts)
        if self.redraws > 10 * B:
            raise CatError(f"more than {10 * B} bootstrap redraws needed; outcome or distances are nearly degenerate")
        self.idx = np.concatenate([p for p, _ in parts])
        self.q, _ = orthonormal_basis(self.design[self.idx])

    def _usable(self, draw: np.ndarray) -> bool:
        q, deficient = orthonormal_basis(self.design[draw])
        if deficient:
            return False
        sub = np.ix_(draw, draw)
        return all(r_squared_terms(s[sub], q)[0] > e for s, e in zip(self.sims, self.eps))

    def _r2_full(self, s: np.ndarray) -> float:
        total, among = r_squared_terms(s, self.q_full)
        return float(among / total) if total > 0 else 0.0

    def _r2_boot(self, s: np.ndarray, eps: float) -> np.ndarray:
        # a leave-out matrix with no variation left explains nothing: R^2 = 0
        def chunk(start, stop):
            idx = self.idx[start:stop]
            sub = s[idx[:, :, None], idx[:, None, :]]
            total, among = r_squared_terms(sub, self.q[start:stop])
            out = np.zeros(stop - start)
            ok = total > eps
            out[ok] = among[ok] / total[ok]
            return out

        return np.concatenate(streams.run_chunked(self.B, chunk, self.req.threads))

    def test(self, leaves: set[str], level: str, name: str) -> CatResult:
        metric_used = self.req.metrics[0] if len(self.req.metrics) == 1 else MAX_METRICS
        reduced = zero_out_taxon(self.table, leaves)
        if not reduced.counts.any():
            raise CatError(f"removing {name} leaves an all-zero table")
        dists = self.distances(reduced)
        if all(np.array_equal(a.values, b.values) for a, b in zip(dists, self.dists)):
            return CatResult(name, level, self.r2, self.r2, 0.0, np.zeros(self.B), 1.0, True, metric_used, self.B, len(leaves))
        sims = [self._similarity(d) for d in dists]
        r2_star = max(self._r2_full(s) for s in sims)
        boot_star = np.max(np.stack([self._r2_boot(s, e) for s, e in zip(sims, self.eps)]), axis=0)
        diffs = self.r2_boot - boot_star
        p = (np.count_nonzero(diffs < 0) + 0.5 * np.count_nonzero(diffs == 0)) / self.B
        return CatResult(name, level, self.r2, r2_star, self.r2 - r2_star, diffs, float(p), False, metric_used, self.B, len(leaves))


def cat_test(request: CatRequest) -> list[CatResult]:
    """Run CAT for every taxon in the request.

    With several metrics each R^2 (full data, leave-out and every bootstrap
    replicate) is the maximum over metrics before differencing. When the
    leave-out distances equal the original ones exactly for every metric the
    result is flagged degenerate with p = 1; otherwise a zero difference
    counts one half toward the p-value.
    """
    if not request.taxa:
        raise CatError("no taxa to test")
    tree = _leaf_tree(request)
    resolved = []
    for ref in request.taxa:
        refs = list(ref) if _is_taxon_set(ref) else [ref]
        if not refs:
            raise CatError("empty taxon set")
        leaves: set[str] = set()
        for r in refs:
            leaves |= leaf_set(tree, r)
        resolved.append((leaves, *_describe(tree, refs)))
    engine = _Engine(request)
    features = set(engine.table.feature_ids)
    return [engine.test(leaves & features, level, name) for leaves, level, name in resolved]


def cat_test_multi(request: CatRequest) -> list[CatResult]:
    """Leave-multiple-out: each ``taxa`` entry is a set whose leaf sets are removed together."""
    sets = [list(t) if _is_taxon_set(t) else [t] for t in request.taxa]
    return cat_test(CatRequest(**{**request.__dict__, "taxa": sets}))


def mann_whitney(table: CountTable, outcome: Outcome, leaves) -> float:
    """Two-sided rank-sum p-value for a taxon's per-sample relative abundance.

    Exact when scipy's automatic choice allows it (small samples, no ties),
    otherwise the normal approximation with tie correction. Identical values
    everywhere give p = 1.
    """
    if outcome.kind == "continuous" or len(outcome.levels) != 2:
        raise CatError("Mann-Whitney needs a binary outcome")
    outcome = outcome.align(table.sample_ids)
    totals = table.counts.sum(axis=1)
    if np.any(totals == 0):
        raise CatError("Mann-Whitney: samples with zero total count")
    idx = table.feature_indices(leaves)
    share = table.counts[:, idx].sum(axis=1) / totals
    codes = outcome.as_array()
    x, y = share[codes == 0], share[codes == 1]
    if len(x) == 0 or len(y) == 0:
        raise CatError("Mann-Whitney: one group is empty")
    if np.all(share == share[0]):
        return 1.0
    return float(stats.mannwhitneyu(x, y, alternative="two-sided", method="auto").pvalue)


_TSV_COLUMNS = ("level", "taxon", "r2_original", "r2_leaveout", "r2_difference", "p_value", "degenerate", "p_display")


def results_to_tsv(results: Sequence[CatResult]) -> str:
    """One row per taxon, laid out like a results table (level, taxon, R^2s, p)."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(_TSV_COLUMNS)
    for r in results:
        w.writerow([
            r.level, r.taxon, repr(r.r2_original), repr(r.r2_leaveout), repr(r.r2_difference),
            repr(r.p_value), str(r.degenerate).lower(), r.p_display,
        ])
    return buf.getvalue()


def results_to_json(results: Sequence[CatResult], **meta) -> str:
    return dumps_json({**meta, "generator": streams.GENERATOR, "results": [r.to_dict() for r in results]})
