"""Command-line entry point: ``cattest {dist,permanova,pcoa,cat,simulate}``.

Results are written as files under ``--out``; ``--out -`` streams a single
artifact to stdout. Errors exit with status 2 and one line on stderr;
warnings go to stderr prefixed ``WARN:``.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from importlib import resources
from pathlib import Path

from . import __version__
from .betadiv import (
    PHYLO_METRICS,
    DistanceMatrix,
    compute_distance,
    pcoa,
    read_distance_matrix,
    write_distance_matrix,
)
from .cat import CatRequest, cat_test, results_to_json, results_to_tsv
from .ingest import CountTable, load_count_table, load_outcome, load_taxonomy, match_taxonomy
from .permanova import design_from_outcome, permanova
from .phylo import build_taxonomy_tree, parse_taxon_ref, read_newick
from .simulate import load_scenario_config, r2_pairs_tsv, rejection_tsv, run_sweep

DEFAULT_SEED = 0
COUNT_METRICS = ("bray-curtis", "jaccard", "weighted-unifrac", "unweighted-unifrac", "euclidean")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, table_required: bool = False) -> None:
    p.add_argument("--table", required=table_required, help="count table TSV")
    p.add_argument("--orientation", default="features-as-rows", choices=("features-as-rows", "samples-as-rows"))
    p.add_argument("--tree", help="Newick phylogeny (needed for UniFrac)")
    p.add_argument("--strict-lengths", action="store_true", help="treat missing branch lengths as an error")
    p.add_argument("--metric", action="append", choices=COUNT_METRICS, help="distance metric (repeatable)")
    p.add_argument("--proportions", action="store_true", help="Bray-Curtis on per-sample proportions")
    p.add_argument("--unnormalized", action="store_true", help="raw (unnormalized) weighted UniFrac")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default=".", help="output directory, or - for stdout")


def _outcome_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--metadata", required=True, help="sample metadata TSV (first column: sample id)")
    p.add_argument("--outcome", required=True, help="metadata column holding the outcome")
    p.add_argument("--kind", default="binary", choices=("continuous", "binary", "categorical"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cattest", description="Conditional association testing for microbiome count data")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("dist", help="pairwise distance matrices")
    _common(p, table_required=True)

    p = sub.add_parser("permanova", help="PERMANOVA R^2, pseudo-F and permutation p-value")
    _common(p)
    p.add_argument("--distance", help="precomputed distance matrix TSV (instead of --table)")
    _outcome_args(p)
    p.add_argument("--perms", type=int, default=999)

    p = sub.add_parser("pcoa", help="principal coordinates")
    _common(p)
    p.add_argument("--distance", help="precomputed distance matrix TSV (instead of --table)")
    p.add_argument("-k", "--axes", type=int, default=2)

    p = sub.add_parser("cat", help="conditional association test for taxa")
    _common(p, table_required=True)
    _outcome_args(p)
    p.add_argument("--taxonomy", help="taxonomy assignments TSV")
    p.add_argument("--lenient", action="store_true", help="drop taxonomy features absent from the table")
    p.add_argument("--taxa-from", choices=("taxonomy", "phylogeny"),
                   help="tree defining each taxon's leaves (default: taxonomy if given)")
    p.add_argument("--taxon", action="append", default=[],
                   help="taxon as rank:name or a tree label; join several with '+' to leave them out together")
    p.add_argument("-B", "--bootstrap", type=int, default=1000)
    p.add_argument("--kernel", action="store_true", help="kernel (MiRKAT-style) R^2 with PSD correction")

    p = sub.add_parser("simulate", help="spike-in simulation study")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="scenario config file (key = value lines)")
    src.add_argument("--bundled", choices=("small",), help="use a scenario shipped with the package")
    p.add_argument("--lambda", dest="lambdas", help="override the lambda list (comma separated)")
    p.add_argument("--replicates", type=int, help="override the replicate count")
    p.add_argument("-B", "--bootstrap", type=int, help="override the bootstrap count")
    p.add_argument("--threads", type=int, help="override the thread count")
    p.add_argument("--out", default=".")
    return parser


def _write(out: str, name: str, text: str) -> None:
    if out == "-":
        sys.stdout.write(text)
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(text, encoding="utf-8")


def _table(args) -> CountTable:
    return load_count_table(args.table, args.orientation)


def _tree(args):
    return read_newick(args.tree, strict_lengths=args.strict_lengths) if args.tree else None


def _metrics(args, default=("bray-curtis",)) -> list[str]:
    metrics = list(dict.fromkeys(args.metric or default))
    for m in metrics:
        if m in PHYLO_METRICS and not args.tree:
            raise UsageError(f"metric {m} needs --tree")
    return metrics


def _distance(args, table: CountTable, metric: str, tree) -> DistanceMatrix:
    return compute_distance(table, metric, tree, normalized=not args.unnormalized,
                            proportions=args.proportions, threads=args.threads)


def _single_distance(args) -> DistanceMatrix:
    if bool(args.distance) == bool(args.table):
        raise UsageError("give exactly one of --table or --distance")
    if args.distance:
        return read_distance_matrix(args.distance)
    metrics = _metrics(args)
    if len(metrics) != 1:
        raise UsageError("this command takes a single --metric")
    return _distance(args, _table(args), metrics[0], _tree(args))


def cmd_dist(args) -> None:
    metrics = _metrics(args)
    if args.out == "-" and len(metrics) > 1:
        raise UsageError("--out - streams a single artifact; give one --metric")
    table, tree = _table(args), _tree(args)
    for m in metrics:
        dist = _distance(args, table, m, tree)
        if args.out == "-":
            write_distance_matrix(dist, "-")
        else:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_distance_matrix(dist, Path(args.out) / f"{m}.tsv")


def cmd_permanova(args) -> None:
    dist = _single_distance(args)
    outcome = load_outcome(args.metadata, args.outcome, args.kind).align(dist.sample_ids)
    result = permanova(dist, design_from_outcome(outcome), n_perms=args.perms, seed=args.seed, threads=args.threads)
    if result.negative_r_squared:
        warnings.warn(f"negative R^2 ({result.r_squared:.3g}) from a non-Euclidean distance")
    _write(args.out, "permanova.json", result.to_json())


def cmd_pcoa(args) -> None:
    if args.out == "-":
        raise UsageError("pcoa writes two files; give an output directory")
    dist = _single_distance(args)
    res = pcoa(dist, args.axes)
    m = res.coordinates.shape[1]
    lines = ["\t".join(["sample_id"] + [f"PC{j + 1}" for j in range(m)])]
    for sid, row in zip(res.sample_ids, res.coordinates):
        lines.append("\t".join([sid] + [repr(float(v)) for v in row]))
    _write(args.out, "pcoa_coordinates.tsv", "\n".join(lines) + "\n")
    lines = ["axis\teigenvalue\tproportion_explained"]
    for j in range(m):
        lines.append(f"PC{j + 1}\t{float(res.eigenvalues[j])!r}\t{float(res.proportion_explained[j])!r}")
    _write(args.out, "pcoa_eigenvalues.tsv", "\n".join(lines) + "\n")
    if len(res.negative_eigenvalues):
        warnings.warn(f"{len(res.negative_eigenvalues)} negative eigenvalue axes dropped")


def cmd_cat(args) -> None:
    if not args.taxon:
        raise UsageError("give at least one --taxon")
    if args.out == "-":
        raise UsageError("cat writes two files; give an output directory")
    table, tree = _table(args), _tree(args)
    metrics = _metrics(args, default=("weighted-unifrac",) if args.tree else ("bray-curtis",))
    taxonomy = None
    if args.taxonomy:
        taxonomy = build_taxonomy_tree(match_taxonomy(load_taxonomy(args.taxonomy), table, strict=not args.lenient))
    taxa_from = args.taxa_from or ("taxonomy" if taxonomy is not None else "phylogeny")
    if taxa_from == "taxonomy" and taxonomy is None:
        raise UsageError("taxa resolved from the taxonomy need --taxonomy")
    if taxa_from == "phylogeny" and tree is None:
        raise UsageError("taxa resolved from the phylogeny need --tree")
    outcome = load_outcome(args.metadata, args.outcome, args.kind).align(table.sample_ids)
    taxa = []
    for t in args.taxon:
        parts = [parse_taxon_ref(x.strip()) for x in t.split("+")]
        taxa.append(parts if len(parts) > 1 else parts[0])
    req = CatRequest(table, outcome, taxa, metrics=tuple(metrics), n_bootstrap=args.bootstrap, seed=args.seed,
                     tree=tree, taxonomy=taxonomy, taxon_tree=taxa_from, kernel=args.kernel,
                     normalized=not args.unnormalized, proportions=args.proportions, threads=args.threads)
    results = cat_test(req)
    _write(args.out, "cat_results.tsv", results_to_tsv(results))
    _write(args.out, "cat_results.json", results_to_json(results, seed=args.seed, metrics=metrics, kernel=args.kernel))


def cmd_simulate(args) -> None:
    if args.out == "-":
        raise UsageError("simulate writes two files; give an output directory")
    if args.bundled:
        config = resources.files("cattest") / "data" / args.bundled / "scenario.conf"
    else:
        config = args.config
    scenario, lambdas, methods = load_scenario_config(config)
    if args.lambdas:
        try:
            lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"bad --lambda list {args.lambdas!r}") from None
    for attr, value in (("n_replicates", args.replicates), ("n_bootstrap", args.bootstrap), ("threads", args.threads)):
        if value is not None:
            setattr(scenario, attr, value)
    results = run_sweep(scenario, lambdas or [scenario.lam], methods)
    _write(args.out, "rejection_rates.tsv", rejection_tsv(results))
    _write(args.out, "r2_pairs.tsv", r2_pairs_tsv(results))


COMMANDS = {
    "dist": cmd_dist,
    "permanova": cmd_permanova,
    "pcoa": cmd_pcoa,
    "cat": cmd_cat,
    "simulate": cmd_simulate,
}


def _show_warning(message, category, filename, lineno, file=None, line=None):
    sys.stderr.write(f"WARN: {message}\n")


def main(argv=None) -> int:
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        warnings.showwarning = _show_warning
        try:
            args = build_parser().parse_args(argv)
            COMMANDS[args.command](args)
        except UsageError as exc:
            sys.stderr.write(f"error: {exc}\n")
            return 2
        except (ValueError, LookupError, OSError) as exc:
            msg = " ".join(str(exc).split())
            sys.stderr.write(f"error: {msg}\n")
            return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
