"""Newick phylogenies, taxonomy trees and descendant-leaf queries.

Both tree kinds store nodes in flat arrays indexed by an integer handle.
Node 0 is always the root.
"""

from __future__ import annotations

import warnings
from typing import Iterator, Sequence

from .ingest import RANKS, CatWarning, TaxonomyAssignment

__all__ = [
    "NewickError",
    "TaxonError",
    "PhyloTree",
    "TaxonomyTree",
    "parse_newick",
    "read_newick",
    "build_taxonomy_tree",
    "leaf_set",
    "resolve_taxon",
    "parse_taxon_ref",
    "branch_table",
]


class NewickError(ValueError):
    """Malformed Newick text; ``offset`` is the character position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class TaxonError(LookupError):
    """A taxon reference that matches no node, or more than one."""


class _Tree:
    def __init__(self):
        self.parent: list[int] = []
        self.children: list[list[int]] = []
        self.label: list[str | None] = []
        self.leaf_index: dict[str, int] = {}

    def _add(self, parent: int, label: str | None = None) -> int:
        node = len(self.parent)
        self.parent.append(parent)
        self.children.append([])
        self.label.append(label)
        if parent >= 0:
            self.children[parent].append(node)
        return node

    @property
    def root(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.parent)

    def is_leaf(self, node: int) -> bool:
        return not self.children[node]

    def preorder(self, node: int = 0) -> Iterator[int]:
        stack = [node]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(reversed(self.children[n]))

    def postorder(self, node: int = 0) -> list[int]:
        order = list(self.preorder(node))
        order.reverse()
        return order

    def leaves(self) -> list[int]:
        return [n for n in self.preorder() if not self.children[n]]

    @property
    def leaf_labels(self) -> list[str]:
        """Leaf labels in left-to-right (preorder) order."""
        return [self.label[n] for n in self.leaves()]

    def depth(self, node: int) -> int:
        d = 0
        while self.parent[node] >= 0:
            node = self.parent[node]
            d += 1
        return d

    def _index_leaves(self) -> None:
        self.leaf_index = {}
        for n in self.leaves():
            self.leaf_index[self.label[n]] = n


class PhyloTree(_Tree):
    """Rooted tree with non-negative branch lengths (length to parent)."""

    def __init__(self):
        super().__init__()
        self.length: list[float] = []

    def _add(self, parent: int, label: str | None = None, length: float = 0.0) -> int:
        self.length.append(length)
        return super()._add(parent, label)

    def find(self, label: str) -> list[int]:
        return [n for n, lab in enumerate(self.label) if lab == label]

    def to_newick(self) -> str:
        """Serialize with lengths written at full (round-trip) precision."""
        out: list[str] = []
        # iterative walk; ("open"/"close", node) events
        stack: list[tuple[str, int]] = [("visit", 0)]
        while stack:
            action, n = stack.pop()
            if action == "visit":
                kids = self.children[n]
                if kids:
                    out.append("(")
                    stack.append(("close", n))
                    for i, c in enumerate(reversed(kids)):
                        stack.append(("visit", c))
                        if i < len(kids) - 1:
                            stack.append(("comma", c))
                else:
                    out.append(self._node_text(n))
            elif action == "comma":
                out.append(",")
            else:
                out.append(")")
                out.append(self._node_text(n))
        return "".join(out) + ";"

    def _node_text(self, n: int) -> str:
        text = _quote(self.label[n]) if self.label[n] is not None else ""
        if n != 0:
            text += ":" + repr(float(self.length[n]))
        return text


_SPECIAL = set("()[]':;, \t\n\r")


def _quote(label: str) -> str:
    if label and not any(ch in _SPECIAL for ch in label):
        return label
    return "'" + label.replace("'", "''") + "'"


def parse_newick(text: str, strict_lengths: bool = False) -> PhyloTree:
    """Parse a single Newick statement.

    Quoted labels are taken verbatim and unquoted underscores are kept as
    is. Internal labels are kept as labels even when numeric (bootstrap
    support). A missing branch length is read as 0.0 with a warning, or
    raises when ``strict_lengths`` is set. Bracketed comments are skipped.
    """
    tree = PhyloTree()
    n = len(text)
    pos = 0
    stack: list[int] = []
    expecting = True
    last_comma = -1
    missing_lengths = 0

    def skip(p: int) -> int:
        while p < n:
            ch = text[p]
            if ch.isspace():
                p += 1
            elif ch == "[":
                end = text.find("]", p)
                if end < 0:
                    raise NewickError("unterminated comment", p)
                p = end + 1
            else:
                break
        return p

    def read_label(p: int) -> tuple[str | None, int]:
        p = skip(p)
        if p < n and text[p] == "'":
            start = p
            p += 1
            buf = []
            while True:
                if p >= n:
                    raise NewickError("unterminated quoted label", start)
                if text[p] == "'":
                    if p + 1 < n and text[p + 1] == "'":
                        buf.append("'")
                        p += 2
                        continue
                    p += 1
                    break
                buf.append(text[p])
                p += 1
            return "".join(buf), p
        start = p
        while p < n and text[p] not in _SPECIAL:
            p += 1
        return (text[start:p] or None), p

    def read_length(p: int, node: int) -> int:
        nonlocal missing_lengths
        p = skip(p)
        if p < n and text[p] == ":":
            p = skip(p + 1)
            start = p
            while p < n and text[p] not in _SPECIAL:
                p += 1
            token = text[start:p]
            try:
                value = float(token)
            except ValueError:
                raise NewickError(f"invalid branch length {token!r}", start) from None
            if not value >= 0 or value == float("inf"):
                raise NewickError(f"branch length must be finite and non-negative, got {token!r}", start)
            tree.length[node] = value
        elif node != 0:
            if strict_lengths:
                raise NewickError("missing branch length", p)
            missing_lengths += 1
        return p

    while True:
        pos = skip(pos)
        if expecting:
            if pos < n and text[pos] == "(":
                node = tree._add(stack[-1] if stack else -1)
                stack.append(node)
                pos += 1
                continue
            node = tree._add(stack[-1] if stack else -1)
            label_pos = pos
            label, pos = read_label(pos)
            if label is None:
                if pos < n and text[pos] == ")" and last_comma >= 0 and skip(last_comma + 1) == pos:
                    raise NewickError("dangling comma", last_comma)
                raise NewickError("unlabeled leaf", label_pos)
            if label in tree.leaf_index:
                raise NewickError(f"duplicate leaf label {label!r}", label_pos)
            tree.label[node] = label
            tree.leaf_index[label] = node
            pos = read_length(pos, node)
            expecting = False
            continue
        if pos >= n:
            if stack:
                raise NewickError('missing ")"', n)
            raise NewickError('missing terminating ";"', n)
        ch = text[pos]
        if ch == ",":
            if not stack:
                raise NewickError("unexpected ','", pos)
            last_comma = pos
            pos += 1
            expecting = True
        elif ch == ")":
            if not stack:
                raise NewickError('unbalanced ")"', pos)
            node = stack.pop()
            label, pos = read_label(pos + 1)
            tree.label[node] = label
            pos = read_length(pos, node)
        elif ch == ";":
            if stack:
                raise NewickError('missing ")"', pos)
            pos = skip(pos + 1)
            if pos < n:
                raise NewickError("trailing text after ';'", pos)
            break
        else:
            raise NewickError(f"unexpected character {ch!r}", pos)

    if missing_lengths:
        warnings.warn(f"{missing_lengths} branch length(s) missing; read as 0.0", CatWarning, stacklevel=2)
    return tree


def read_newick(path, strict_lengths: bool = False) -> PhyloTree:
    from .ingest import read_text

    return parse_newick(read_text(path).strip(), strict_lengths=strict_lengths)


class TaxonomyTree(_Tree):
    """Rank-labelled hierarchy; internal nodes carry (rank, name), leaves are feature ids."""

    def __init__(self):
        super().__init__()
        self.rank: list[str | None] = []
        self._add(-1, None, "root")

    def _add(self, parent: int, label: str | None = None, rank: str | None = None) -> int:
        self.rank.append(rank)
        return super()._add(parent, label)

    def find_taxon(self, rank: str, name: str) -> list[int]:
        return [n for n in range(len(self)) if self.rank[n] == rank and self.label[n] == name]

    def lineage(self, node: int) -> list[tuple[str, str]]:
        out = []
        while node > 0:
            if self.rank[node] is not None:
                out.append((self.rank[node], self.label[node]))
            node = self.parent[node]
        return out[::-1]


def build_taxonomy_tree(assignments: Sequence[TaxonomyAssignment]) -> TaxonomyTree:
    """Merge lineages into a tree whose leaves are the assigned features.

    Lineages sharing a prefix share internal nodes. A lineage with gaps
    hangs its next assigned rank directly below the last assigned one, and a
    feature with an empty lineage hangs off the root.
    """
    if not assignments:
        raise ValueError("no taxonomy assignments")
    tree = TaxonomyTree()
    index: dict[tuple[int, str, str], int] = {}
    for a in assignments:
        if a.feature_id in tree.leaf_index:
            raise ValueError(f"duplicate feature id {a.feature_id!r} in taxonomy")
        node = 0
        for rank, name in a.lineage:
            key = (node, rank, name)
            if key not in index:
                index[key] = tree._add(node, name, rank)
            node = index[key]
        tree.leaf_index[a.feature_id] = tree._add(node, a.feature_id, None)
    return tree


def parse_taxon_ref(ref: str) -> tuple[str, str] | str:
    """``"family:Ruminococcaceae"`` -> ``("family", "Ruminococcaceae")``; other text is a plain label."""
    rank, sep, name = ref.partition(":")
    if sep and rank.strip().lower() in RANKS and name.strip():
        return rank.strip().lower(), name.strip()
    return ref


def resolve_taxon(tree: _Tree, ref) -> int:
    """Node handle for a reference: a handle, a (rank, name) pair, "rank:name", or a label."""
    if isinstance(ref, int):
        if not 0 <= ref < len(tree):
            raise TaxonError(f"no node {ref}")
        return ref
    if isinstance(ref, str):
        ref = parse_taxon_ref(ref)
    if isinstance(ref, tuple):
        rank, name = ref
        if not isinstance(tree, TaxonomyTree):
            raise TaxonError(f"rank-qualified reference {rank}:{name} needs a taxonomy tree")
        matches = tree.find_taxon(rank, name)
        shown = f"{rank}:{name}"
    else:
        if ref in tree.leaf_index:
            return tree.leaf_index[ref]
        matches = [n for n, lab in enumerate(tree.label) if lab == ref]
        shown = ref
    if not matches:
        raise TaxonError(f"taxon {shown} not found")
    if len(matches) > 1:
        raise TaxonError(f"taxon {shown} is ambiguous ({len(matches)} nodes)")
    return matches[0]


def leaf_set(tree: _Tree, node) -> frozenset[str]:
    """Labels of all leaves descending from ``node`` (a leaf's set is itself)."""
    node = resolve_taxon(tree, node)
    return frozenset(tree.label[n] for n in tree.preorder(node) if not tree.children[n])


def branch_table(tree: PhyloTree) -> list[tuple[int, float, frozenset[int]]]:
    """(node, branch length, descendant leaf indices) for every non-root node.

    Leaf indices follow ``tree.leaf_labels`` order. Sets are built in one
    post-order pass, sharing the children's sets.
    """
    leaf_pos = {n: i for i, n in enumerate(tree.leaves())}
    sets: dict[int, frozenset[int]] = {}
    for n in tree.postorder():
        kids = tree.children[n]
        if not kids:
            sets[n] = frozenset((leaf_pos[n],))
        elif len(kids) == 1:
            sets[n] = sets[kids[0]]
        else:
            sets[n] = frozenset().union(*(sets[c] for c in kids))
    return [(n, tree.length[n], sets[n]) for n in tree.preorder() if n != 0]
