import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cattest.betadiv import (
    DistanceError,
    DistanceMatrix,
    bray_curtis,
    compute_distance,
    distance_to_kernel,
    euclidean,
    jaccard,
    pcoa,
    read_distance_matrix,
    unweighted_unifrac,
    weighted_unifrac,
    write_distance_matrix,
)
from cattest.ingest import CatWarning, CountTable
from cattest.phylo import parse_newick

from conftest import random_tree, unifrac_oracle


def table(rows, features=None):
    rows = np.asarray(rows)
    features = features or [chr(ord("A") + j) for j in range(rows.shape[1])]
    return CountTable([f"s{i}" for i in range(len(rows))], features, rows)


# -- hand-evaluated fixtures --------------------------------------------------

def test_bray_curtis_examples():
    d = bray_curtis(table([[2, 2], [1, 3], [2, 2], [1, 0], [0, 1]])).values
    assert d[0, 1] == pytest.approx(0.25, abs=1e-12)
    assert d[0, 2] == 0
    assert d[3, 4] == 1


def test_bray_curtis_zero_samples():
    with pytest.warns(CatWarning, match="empty"):
        d = bray_curtis(table([[0, 0], [0, 0], [1, 2]])).values
    assert d[0, 1] == 0
    assert d[0, 2] == 1


def test_jaccard_examples():
    d = jaccard(table([[1, 1, 0], [0, 1, 1], [5, 2, 0], [0, 0, 3]])).values
    assert d[0, 1] == pytest.approx(2 / 3, abs=1e-12)
    assert d[0, 2] == 0
    assert d[2, 3] == 1


def test_weighted_unifrac_examples():
    tree = parse_newick("(A:1,B:1);")
    d = weighted_unifrac(table([[1, 0], [0, 1], [2, 2], [1, 3]]), tree).values
    assert d[0, 1] == 1
    assert d[2, 3] == pytest.approx(0.25, abs=1e-12)
    d2 = weighted_unifrac(table([[2, 2], [4, 4]]), tree).values
    assert d2[0, 1] == 0


def test_weighted_unifrac_raw():
    tree = parse_newick("(A:1,B:1);")
    d = weighted_unifrac(table([[2, 2], [1, 3]]), tree, normalized=False).values
    assert d[0, 1] == pytest.approx(0.5, abs=1e-12)


def test_unweighted_unifrac_examples():
    tree = parse_newick("((A:1,B:1):1,C:1);")
    d = unweighted_unifrac(table([[1, 1, 0], [1, 0, 1], [3, 9, 0]]), tree).values
    assert d[0, 1] == pytest.approx(0.5, abs=1e-12)
    assert d[0, 2] == 0
    tree = parse_newick("(A:1,B:1);")
    assert unweighted_unifrac(table([[1, 0], [0, 1]]), tree).values[0, 1] == 1


def test_unifrac_errors():
    tree = parse_newick("(A:1,B:1);")
    with pytest.raises(DistanceError, match="missing from tree: C"):
        weighted_unifrac(table([[1, 0, 1], [0, 1, 1]]), tree)
    with pytest.raises(DistanceError, match="zero total"):
        unweighted_unifrac(table([[0, 0], [0, 1]]), tree)
    # absent features are fine when they carry no counts
    d = weighted_unifrac(table([[1, 0, 0], [0, 1, 0]]), tree)
    assert d.values[0, 1] == 1
    with pytest.raises(DistanceError, match="needs a phylogenetic tree"):
        compute_distance(table([[1, 0], [0, 1]]), "weighted-unifrac")


@pytest.mark.parametrize("seed", range(20))
def test_unifrac_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    text, names, branches = random_tree(rng, int(rng.integers(2, 9)))
    n = int(rng.integers(2, 6))
    counts = rng.poisson(rng.uniform(0.3, 5), size=(n, len(names)))
    counts[:, 0] += 1
    t = CountTable([f"s{i}" for i in range(n)], names, counts)
    tree = parse_newick(text)
    c = counts.tolist()
    np.testing.assert_allclose(weighted_unifrac(t, tree).values, unifrac_oracle(c, names, branches, True), rtol=0, atol=1e-12)
    np.testing.assert_allclose(unweighted_unifrac(t, tree).values, unifrac_oracle(c, names, branches, False), rtol=0, atol=1e-12)


# -- metric properties ----------------------------------------------------------

count_tables = st.integers(2, 6).flatmap(
    lambda n: st.integers(1, 5).flatmap(lambda m: arrays(np.int64, (n, m), elements=st.integers(0, 50)))
)


@settings(max_examples=60, deadline=None)
@given(count_tables)
def test_metric_axioms(counts):
    counts = counts.copy()
    counts[:, 0] += 1
    t = table(counts)
    tree = parse_newick("(" + ",".join(f"{f}:{0.5 + j}" for j, f in enumerate(t.feature_ids)) + ");")
    for dist in (bray_curtis(t), jaccard(t), weighted_unifrac(t, tree), unweighted_unifrac(t, tree)):
        v = dist.values
        assert np.all(np.diag(v) == 0)
        assert np.array_equal(v, v.T)
        assert v.min() >= 0 and v.max() <= 1 + 1e-15


def test_scaling_statements():
    t = table([[3, 1, 4], [1, 5, 9], [2, 6, 5]])
    all_scaled = t.with_counts(t.counts * 7)
    np.testing.assert_allclose(bray_curtis(all_scaled).values, bray_curtis(t).values, atol=1e-15)
    one_scaled = t.with_counts(t.counts * np.array([[7], [1], [1]]))
    assert not np.allclose(bray_curtis(one_scaled).values, bray_curtis(t).values)
    tree = parse_newick("((A:1,B:2):0.5,C:1);")
    np.testing.assert_allclose(weighted_unifrac(one_scaled, tree).values, weighted_unifrac(t, tree).values, atol=1e-15)


def test_bray_curtis_proportions():
    t = table([[2, 2], [10, 30]])
    assert bray_curtis(t, proportions=True).values[0, 1] == pytest.approx(0.25, abs=1e-12)


def test_threads_bit_identical(rng):
    t = table(rng.poisson(5, size=(17, 9)))
    text, names, _ = random_tree(rng, 9)
    t = CountTable(t.sample_ids, names, t.counts + 1)
    tree = parse_newick(text)
    for metric in ("bray-curtis", "jaccard", "euclidean", "weighted-unifrac", "unweighted-unifrac"):
        a = compute_distance(t, metric, tree, threads=1).values
        b = compute_distance(t, metric, tree, threads=4).values
        assert a.tobytes() == b.tobytes()


def test_distance_matrix_validation():
    with pytest.raises(DistanceError, match="symmetric"):
        DistanceMatrix(("a", "b"), [[0, 1], [2, 0]])
    with pytest.raises(DistanceError, match="diagonal"):
        DistanceMatrix(("a", "b"), [[1, 1], [1, 0]])
    with pytest.raises(DistanceError, match="non-finite"):
        DistanceMatrix(("a", "b"), [[0, np.nan], [np.nan, 0]])


def test_tsv_round_trip(tmp_path, rng):
    x = rng.normal(size=(5, 3))
    d = euclidean(table((x * 1000).round().astype(int) + 5000))
    write_distance_matrix(d, tmp_path / "d.tsv")
    back = read_distance_matrix(tmp_path / "d.tsv")
    assert back.sample_ids == d.sample_ids
    assert back.values.tobytes() == d.values.tobytes()


# -- kernel ---------------------------------------------------------------------

def test_kernel_examples():
    k = distance_to_kernel(DistanceMatrix(("a", "b"), np.zeros((2, 2))))
    assert np.all(k.values == 0) and not k.psd_corrected
    k = distance_to_kernel(DistanceMatrix(("a", "b"), [[0, 1], [1, 0]]))
    np.testing.assert_allclose(k.values, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-12)


def test_kernel_line_points():
    x = np.array([0.0, 1.0, 2.0])
    d = np.abs(x[:, None] - x[None, :])
    k = distance_to_kernel(DistanceMatrix(("a", "b", "c"), d)).values
    xc = x - x.mean()
    np.testing.assert_allclose(k, np.outer(xc, xc), atol=1e-12)
    assert np.linalg.matrix_rank(k, tol=1e-9) == 1
    np.testing.assert_allclose(k.sum(axis=1), 0, atol=1e-12)


def test_kernel_psd_correction():
    d = np.array([[0, 1, 3], [1, 0, 1], [3, 1, 0]], dtype=float)
    k = distance_to_kernel(DistanceMatrix(("a", "b", "c"), d))
    assert k.psd_corrected
    vals = np.linalg.eigvalsh(k.values)
    assert vals.min() >= -1e-10 * np.abs(vals).max()
    np.testing.assert_allclose(k.values.sum(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(k.values.sum(axis=1), 0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8).flatmap(lambda n: arrays(float, (n, n), elements=st.floats(0, 10))))
def test_kernel_centered_before_and_after(raw):
    d = np.triu(raw, 1)
    d = d + d.T
    k = distance_to_kernel(DistanceMatrix(tuple(f"s{i}" for i in range(len(d))), d))
    scale = max(1.0, float(np.abs(d).max()) ** 2)
    np.testing.assert_allclose(k.values.sum(axis=1), 0, atol=1e-10 * scale)
    np.testing.assert_allclose(k.values.sum(axis=0), 0, atol=1e-10 * scale)


# -- PCoA -----------------------------------------------------------------------

def test_pcoa_two_samples():
    res = pcoa(DistanceMatrix(("a", "b"), [[0, 3.0], [3.0, 0]]), k=1)
    assert res.coordinates.shape == (2, 1)
    np.testing.assert_allclose(sorted(res.coordinates[:, 0]), [-1.5, 1.5], atol=1e-12)


def test_pcoa_identical_samples():
    with pytest.warns(CatWarning):
        res = pcoa(DistanceMatrix(("a", "b", "c"), np.zeros((3, 3))), k=2)
    assert np.all(res.coordinates == 0)


def test_pcoa_too_many_axes(rng):
    x = rng.normal(size=(6, 2))
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    np.fill_diagonal(d, 0)
    with pytest.warns(CatWarning, match="2 positive"):
        res = pcoa(DistanceMatrix(tuple("abcdef"), d), k=4)
    assert res.coordinates.shape == (6, 2)
    assert res.proportion_explained.sum() == pytest.approx(1.0)


def test_pcoa_drops_negative_axes():
    d = np.array([[0, 1, 3], [1, 0, 1], [3, 1, 0]], dtype=float)
    with pytest.warns(CatWarning, match="1 positive"):
        res = pcoa(DistanceMatrix(("a", "b", "c"), d), k=2)
    assert len(res.negative_eigenvalues) == 1
    assert np.all(res.eigenvalues > 0)


@pytest.mark.parametrize("seed", range(10))
def test_pcoa_round_trip(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(3, 15)), 2))
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    d = np.triu(d, 1) + np.triu(d, 1).T
    res = pcoa(DistanceMatrix(tuple(f"s{i}" for i in range(len(x))), d), k=2)
    y = res.coordinates
    back = np.sqrt(((y[:, None] - y[None]) ** 2).sum(-1))
    np.testing.assert_allclose(back, d, atol=1e-9)
