"""Spike-in simulation: Dirichlet-multinomial counts with a Poisson signal on one taxon.

Both groups draw counts from a Dirichlet-multinomial centred on a template's
marginal feature proportions; group 1 then gets Poisson(lambda) extra reads
on every leaf feature of the spiked taxon. The scenario runner tests the
spiked taxon and its neighbours in the taxonomy and tallies how often each
method rejects at 0.05.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import streams
from .cat import CatRequest, cat_test, mann_whitney
from .ingest import CountTable, Outcome, TaxonomyAssignment, load_count_table, load_taxonomy, match_taxonomy, write_count_table
from .phylo import PhyloTree, TaxonomyTree, build_taxonomy_tree, leaf_set, parse_newick, read_newick, resolve_taxon

__all__ = [
    "ConfigError",
    "SimScenario",
    "SimReplicate",
    "ScenarioResult",
    "fit_template_proportions",
    "sample_dirichlet_multinomial",
    "spike_in",
    "simulate_replicate",
    "default_tested_taxa",
    "run_scenario",
    "run_sweep",
    "load_scenario_config",
    "synthetic_template",
    "write_synthetic_template",
]

ALPHA = 0.05


class ConfigError(ValueError):
    pass


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def fit_template_proportions(template: CountTable) -> np.ndarray:
    """Marginal feature proportions: column sums over the grand total."""
    col = template.counts.sum(axis=0)
    total = col.sum()
    if total == 0:
        raise ValueError("template has no counts")
    return col / total


def sample_dirichlet_multinomial(proportions, alpha_sum: float, depth: int, seed=None) -> np.ndarray:
    """One Dirichlet-multinomial count vector summing to ``depth``.

    Dirichlet parameters are ``alpha_sum * proportions``; the draw goes
    Gamma -> normalize -> multinomial. Zero-proportion features get zero
    counts. ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    p = np.asarray(proportions, dtype=float)
    if alpha_sum <= 0 or depth < 0:
        raise ValueError("alpha_sum must be > 0 and depth >= 0")
    active = np.flatnonzero(p > 0)
    if active.size == 0:
        raise ValueError("all proportions are zero")
    rng = _rng(seed)
    alpha = alpha_sum * p[active] / p[active].sum()
    g = rng.standard_gamma(alpha)
    while g.sum() == 0:  # every gamma underflowed (tiny alpha)
        g = rng.standard_gamma(alpha)
    out = np.zeros(p.size, dtype=np.int64)
    out[active] = rng.multinomial(depth, g / g.sum())
    return out


def spike_in(counts, leaves, lam: float, seed=None) -> np.ndarray:
    """Add an independent Poisson(lam) draw to each position in ``leaves``."""
    out = np.array(counts, dtype=np.int64, copy=True)
    idx = np.asarray(sorted(leaves), dtype=np.intp)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if idx.size:
        out[idx] += _rng(seed).poisson(lam, size=idx.size)
    return out


@dataclass
class SimScenario:
    template: CountTable
    taxonomy: TaxonomyTree
    spike_taxon: object
    lam: float = 0.0
    tree: PhyloTree | None = None
    n_per_group: int = 31
    depth: int = 48765
    alpha_sum: float = 62.0
    n_replicates: int = 200
    n_bootstrap: int = 1000
    seed: int = 0
    metrics: Sequence[str] = ("weighted-unifrac",)
    tested_taxa: Sequence | None = None
    threads: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.alpha_sum <= 0 or self.lam < 0 or self.n_per_group < 2:
            raise ValueError("need depth >= 1, alpha_sum > 0, lambda >= 0, n_per_group >= 2")


@dataclass
class SimReplicate:
    table: CountTable
    outcome: Outcome
    truth: frozenset[str]


def simulate_replicate(scenario: SimScenario, index: int, proportions: np.ndarray | None = None) -> SimReplicate:
    """Replicate ``index``: group 0 from the Dirichlet-multinomial, group 1 with the spike added."""
    if proportions is None:
        proportions = fit_template_proportions(scenario.template)
    features = scenario.template.feature_ids
    truth = leaf_set(scenario.taxonomy, scenario.spike_taxon) & set(features)
    spiked = [j for j, f in enumerate(features) if f in truth]
    rng = streams.substream(scenario.seed, streams.SIMULATION, index)
    rows, ids, labels = [], [], []
    for group in (0, 1):
        for k in range(scenario.n_per_group):
            x = sample_dirichlet_multinomial(proportions, scenario.alpha_sum, scenario.depth, rng)
            if group == 1:
                x = spike_in(x, spiked, scenario.lam, rng)
            rows.append(x)
            ids.append(f"g{group}_s{k:03d}")
            labels.append(f"group{group}")
    table = CountTable(tuple(ids), features, np.vstack(rows))
    return SimReplicate(table, Outcome(tuple(ids), "binary", tuple(labels)), frozenset(truth))


def default_tested_taxa(taxonomy: TaxonomyTree, spike_taxon) -> list[int]:
    """The spiked taxon, its parent rank (unless the root) and its non-leaf children."""
    node = resolve_taxon(taxonomy, spike_taxon)
    out = [node]
    parent = taxonomy.parent[node]
    if parent > 0:
        out.append(parent)
    out.extend(c for c in taxonomy.children[node] if taxonomy.children[c])
    return out


@dataclass
class ScenarioResult:
    lam: float
    taxa: list[tuple[str, str]]
    # method -> per-taxon list of p-values, one per replicate
    p_values: dict[str, np.ndarray] = field(default_factory=dict)
    r2_pairs: list[tuple[int, str, str, float, float]] = field(default_factory=list)

    def rejection_rates(self, alpha: float = ALPHA) -> dict[str, np.ndarray]:
        return {m: np.mean(p < alpha, axis=0) for m, p in self.p_values.items()}

    def rejection_rows(self, alpha: float = ALPHA) -> list[dict]:
        rows = []
        rates = self.rejection_rates(alpha)
        for method, r in rates.items():
            for (level, name), rate in zip(self.taxa, r):
                rows.append({"lambda": self.lam, "method": method, "level": level, "taxon": name,
                             "rejection_rate": float(rate), "n_replicates": self.p_values[method].shape[0]})
        return rows


def run_scenario(scenario: SimScenario, methods: Sequence[str] = ("cat", "mann-whitney")) -> ScenarioResult:
    """Simulate ``n_replicates`` datasets and test each default (or given) taxon."""
    unknown = set(methods) - {"cat", "mann-whitney"}
    if unknown:
        raise ValueError(f"unknown methods: {', '.join(sorted(unknown))}")
    tax = scenario.taxonomy
    tested = list(scenario.tested_taxa) if scenario.tested_taxa else default_tested_taxa(tax, scenario.spike_taxon)
    nodes = [resolve_taxon(tax, t) for t in tested]
    labels = [(tax.rank[n] or "leaf", tax.label[n]) for n in nodes]
    proportions = fit_template_proportions(scenario.template)
    features = set(scenario.template.feature_ids)
    leaves = [leaf_set(tax, n) & features for n in nodes]

    def one(i):
        rep = simulate_replicate(scenario, i, proportions)
        out = {}
        pairs = []
        if "cat" in methods:
            cat_seed = int(streams.substream(scenario.seed, streams.SIMULATION, i, 1).integers(2**62))
            req = CatRequest(rep.table, rep.outcome, nodes, metrics=tuple(scenario.metrics),
                             n_bootstrap=scenario.n_bootstrap, seed=cat_seed, tree=scenario.tree,
                             taxonomy=tax, taxon_tree="taxonomy")
            res = cat_test(req)
            out["cat"] = [r.p_value for r in res]
            pairs = [(i, lv, nm, r.r2_original, r.r2_leaveout) for (lv, nm), r in zip(labels, res)]
        if "mann-whitney" in methods:
            out["mann-whitney"] = [mann_whitney(rep.table, rep.outcome, lv) for lv in leaves]
        return out, pairs

    per_rep = streams.run_chunked(scenario.n_replicates, lambda s, e: [one(i) for i in range(s, e)],
                                  scenario.threads, chunk=1)
    flat = [r for chunk in per_rep for r in chunk]
    result = ScenarioResult(scenario.lam, labels)
    for m in methods:
        result.p_values[m] = np.array([o[m] for o, _ in flat])
    result.r2_pairs = [p for _, pairs in flat for p in pairs]
    return result


def run_sweep(scenario: SimScenario, lambdas: Sequence[float], methods=("cat", "mann-whitney")) -> list[ScenarioResult]:
    return [run_scenario(replace(scenario, lam=float(lam)), methods) for lam in lambdas]


def rejection_tsv(results: Sequence[ScenarioResult], alpha: float = ALPHA) -> str:
    buf = io.StringIO()
    cols = ["lambda", "method", "level", "taxon", "rejection_rate", "n_replicates"]
    w = csv.DictWriter(buf, cols, delimiter="\t", lineterminator="\n")
    w.writeheader()
    for r in results:
        for row in r.rejection_rows(alpha):
            w.writerow({**row, "lambda": repr(row["lambda"]), "rejection_rate": repr(row["rejection_rate"])})
    return buf.getvalue()


def r2_pairs_tsv(results: Sequence[ScenarioResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["lambda", "replicate", "level", "taxon", "r2_original", "r2_leaveout"])
    for r in results:
        for rep, level, name, a, b in r.r2_pairs:
            w.writerow([repr(r.lam), rep, level, name, repr(a), repr(b)])
    return buf.getvalue()


# -- scenario config files --------------------------------------------------

_INT_KEYS = {"n_per_group", "depth", "replicates", "B", "seed", "threads"}
_FLOAT_KEYS = {"alpha_sum"}
_KEYS = _INT_KEYS | _FLOAT_KEYS | {"template", "tree", "taxonomy", "taxon", "lambda", "metric", "methods",
                                   "orientation", "tested"}
_REQUIRED = ("template", "taxonomy", "taxon", "lambda")


def parse_config(text: str) -> dict[str, tuple[str, int]]:
    """``key = value`` lines with ``#`` comments -> {key: (value, line number)}."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def load_scenario_config(path) -> tuple[SimScenario, list[float], list[str]]:
    """Build a scenario, lambda list and method list from a config file.

    Relative paths are resolved against the config file's directory.
    """
    from .ingest import read_text

    path = Path(path)
    cfg = parse_config(read_text(path))
    for key in _REQUIRED:
        if key not in cfg or not cfg[key][0]:
            raise ConfigError(f"missing required key {key!r}")

    def get(key, conv, default):
        if key not in cfg:
            return default
        value, lineno = cfg[key]
        try:
            return conv(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None

    def resolve(key):
        value, lineno = cfg[key]
        p = Path(value)
        p = p if p.is_absolute() else path.parent / p
        if not p.exists():
            raise ConfigError(f"line {lineno}: {key} file not found: {value}")
        return p

    orientation = get("orientation", str, "features-as-rows")
    template = load_count_table(resolve("template"), orientation)
    assignments = match_taxonomy(load_taxonomy(resolve("taxonomy")), template, strict=True)
    taxonomy = build_taxonomy_tree(assignments)
    tree = read_newick(resolve("tree")) if "tree" in cfg else None
    lambdas = get("lambda", lambda v: [float(x) for x in v.split(",") if x.strip()], [])
    metrics = get("metric", lambda v: [m.strip() for m in v.split(",") if m.strip()], ["weighted-unifrac"])
    methods = get("methods", lambda v: [m.strip() for m in v.split(",") if m.strip()], ["cat", "mann-whitney"])
    tested = get("tested", lambda v: [t.strip() for t in v.split(",") if t.strip()], None)
    scenario = SimScenario(
        template=template,
        taxonomy=taxonomy,
        spike_taxon=cfg["taxon"][0],
        lam=lambdas[0] if lambdas else 0.0,
        tree=tree,
        n_per_group=get("n_per_group", int, 31),
        depth=get("depth", int, 2000),
        alpha_sum=get("alpha_sum", float, 62.0),
        n_replicates=get("replicates", int, 200),
        n_bootstrap=get("B", int, 1000),
        seed=get("seed", int, 0),
        metrics=metrics,
        tested_taxa=tested,
        threads=get("threads", int, 1),
    )
    return scenario, lambdas, methods


# -- synthetic template -----------------------------------------------------

# order -> family -> genera, with each family's share of reads
_LAYOUT = {
    ("Firmicutes", "Clostridia", "Clostridiales"): {
        "Lachnospiraceae": (0.25, ["Blautia", "Roseburia", "Coprococcus"]),
        "Ruminococcaceae": (0.15, ["Faecalibacterium", "Ruminococcus", "Oscillospira"]),
    },
    ("Bacteroidetes", "Bacteroidia", "Bacteroidales"): {
        "Bacteroidaceae": (0.35, ["Bacteroides"]),
        "Porphyromonadaceae": (0.10, ["Parabacteroides", "Odoribacter"]),
        "Prevotellaceae": (0.15, ["Prevotella", "Alloprevotella"]),
    },
}


def synthetic_template(n_features: int = 50, n_samples: int = 20, depth: int = 5000, seed: int = 2024):
    """A small template dataset with matching taxonomy and phylogeny.

    Returns ``(table, assignments, tree)``. ASVs are spread round-robin over
    the genera in ``_LAYOUT``; the phylogeny follows the taxonomy with random
    branch lengths.
    """
    rng = np.random.default_rng(seed)
    genera = [(o, fam, gen, share / len(gens))
              for o, fams in _LAYOUT.items() for fam, (share, gens) in fams.items() for gen in gens]
    members: list[list[str]] = [[] for _ in genera]
    for j in range(n_features):
        members[j % len(genera)].append(f"ASV{j + 1:03d}")
    props = np.zeros(n_features)
    assignments = []
    feature_ids = []
    for (o, fam, gen, share), asvs in zip(genera, members):
        w = rng.dirichlet(np.full(len(asvs), 2.0)) * share
        for asv, p in zip(asvs, w):
            feature_ids.append(asv)
            props[len(feature_ids) - 1] = p
            phylum, cls, order = o
            assignments.append(TaxonomyAssignment(asv, (
                ("kingdom", "Bacteria"), ("phylum", phylum), ("class", cls), ("order", order),
                ("family", fam), ("genus", gen))))
    props /= props.sum()
    counts = np.vstack([sample_dirichlet_multinomial(props, 200.0, depth, rng) for _ in range(n_samples)])
    table = CountTable(tuple(f"T{i:02d}" for i in range(n_samples)), tuple(feature_ids), counts)
    tree = parse_newick(_taxonomy_newick(build_taxonomy_tree(assignments), rng))
    return table, assignments, tree


def _taxonomy_newick(tax: TaxonomyTree, rng: np.random.Generator) -> str:
    def walk(node):
        kids = tax.children[node]
        if not kids:
            return f"{tax.label[node]}:{rng.uniform(0.02, 0.2):.4f}"
        if len(kids) == 1:
            return walk(kids[0])
        inner = ",".join(walk(c) for c in kids)
        return f"({inner}):{rng.uniform(0.05, 0.5):.4f}" if node else f"({inner})"

    return walk(0) + ";"


def write_synthetic_template(directory, **kwargs) -> None:
    """Write template.tsv, taxonomy.tsv and tree.nwk into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    table, assignments, tree = synthetic_template(**kwargs)
    write_count_table(table, d / "template.tsv")
    lines = ["Feature ID\tTaxon"]
    for a in assignments:
        lines.append(a.feature_id + "\t" + ";".join(f"{r[0]}__{n}" for r, n in a.lineage))
    (d / "taxonomy.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (d / "tree.nwk").write_text(tree.to_newick() + "\n", encoding="utf-8")
