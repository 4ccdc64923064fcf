"""Conditional association testing (CAT) for tree-structured microbiome counts."""

__version__ = "0.1.0"

from .betadiv import DistanceMatrix, Kernel, compute_distance, distance_to_kernel, pcoa
from .cat import CatRequest, CatResult, cat_test, cat_test_multi, mann_whitney, zero_out_taxon
from .ingest import CountTable, Outcome, TaxonomyAssignment, load_count_table, load_outcome, load_taxonomy
from .permanova import DesignMatrix, PermanovaResult, design_from_outcome, gower_center, hat_matrix, permanova
from .phylo import PhyloTree, TaxonomyTree, branch_table, build_taxonomy_tree, leaf_set, parse_newick

__all__ = [
    "CatRequest",
    "CatResult",
    "CountTable",
    "DesignMatrix",
    "DistanceMatrix",
    "Kernel",
    "Outcome",
    "PermanovaResult",
    "PhyloTree",
    "TaxonomyAssignment",
    "TaxonomyTree",
    "branch_table",
    "build_taxonomy_tree",
    "cat_test",
    "cat_test_multi",
    "compute_distance",
    "design_from_outcome",
    "distance_to_kernel",
    "gower_center",
    "hat_matrix",
    "leaf_set",
    "load_count_table",
    "load_outcome",
    "load_taxonomy",
    "mann_whitney",
    "parse_newick",
    "pcoa",
    "permanova",
    "zero_out_taxon",
]
