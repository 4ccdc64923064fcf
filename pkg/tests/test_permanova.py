import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cattest.betadiv import DistanceMatrix
from cattest.ingest import Outcome
from cattest.permanova import (
    DegenerateError,
    DesignError,
    DesignMatrix,
    design_from_outcome,
    gower_center,
    hat_matrix,
    permanova,
)


def ids(n):
    return tuple(f"s{i:02d}" for i in range(n))


def euclid(points):
    y = np.asarray(points, dtype=float).reshape(len(points), -1)
    d = np.sqrt(((y[:, None] - y[None]) ** 2).sum(-1))
    d = np.triu(d, 1)
    return DistanceMatrix(ids(len(y)), d + d.T, "euclidean")


def group_design(labels):
    return design_from_outcome(Outcome(ids(len(labels)), "categorical", tuple(str(x) for x in labels)))


def anova_r2(points, labels):
    y = np.asarray(points, dtype=float).reshape(len(points), -1)
    labels = np.asarray(labels)
    grand = y.mean(axis=0)
    total = ((y - grand) ** 2).sum()
    between = sum((labels == g).sum() * ((y[labels == g].mean(axis=0) - grand) ** 2).sum() for g in np.unique(labels))
    return between / total


def test_gower_examples():
    assert np.all(gower_center(np.zeros((3, 3))) == 0)
    g = gower_center(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(g, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-12)
    assert np.trace(g) == pytest.approx(0.5, abs=1e-12)


def test_gower_gram_oracle(rng):
    y = rng.normal(size=(9, 3))
    yc = y - y.mean(axis=0)
    np.testing.assert_allclose(gower_center(euclid(y)), yc @ yc.T, atol=1e-9)


def test_hat_examples():
    np.testing.assert_allclose(hat_matrix(np.ones((3, 1))), np.full((3, 3), 1 / 3), atol=1e-12)
    x = np.column_stack([np.ones(3), [0, 1, 0], [0, 0, 1]])
    np.testing.assert_allclose(hat_matrix(x), np.eye(3), atol=1e-12)
    h = hat_matrix(group_design([0, 0, 1, 1]))
    block = np.kron(np.eye(2), np.full((2, 2), 0.5))
    np.testing.assert_allclose(h, block, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 10), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_hat_projection(n, extra, seed):
    extra = min(extra, n - 1)
    x = np.column_stack([np.ones(n), np.random.default_rng(seed).normal(size=(n, extra))])
    h = hat_matrix(x)
    np.testing.assert_allclose(h, h.T, atol=1e-12)
    assert np.abs(h @ h - h).max() < 1e-8
    assert np.trace(h) == pytest.approx(extra + 1, abs=1e-9)


def test_design_errors():
    with pytest.raises(DesignError, match="collinear columns: .*dup"):
        DesignMatrix(ids(4), ("intercept", "a", "dup"), np.column_stack([np.ones(4), [0, 1, 0, 1], [0, 1, 0, 1]]))
    with pytest.raises(DesignError, match="intercept"):
        DesignMatrix(ids(2), ("a",), np.array([[1.0], [2.0]]))


def test_dummy_coding_reference_level():
    d = design_from_outcome(Outcome(ids(4), "categorical", ("b", "a", "c", "a")))
    assert d.names == ("intercept", "outcome[b]", "outcome[c]")
    np.testing.assert_array_equal(d.values[:, 1], [1, 0, 0, 0])


def test_r2_anova_example():
    res = permanova(euclid([0, 1, 2, 3]), group_design([0, 0, 1, 1]), n_perms=0)
    assert res.r_squared == pytest.approx(0.8, abs=1e-12)
    assert res.ss_total == pytest.approx(res.ss_among + res.ss_residual, rel=1e-8)
    assert res.pseudo_f == pytest.approx((4 / 1) / (1 / 2))
    assert res.p_value is None


def test_intercept_only():
    res = permanova(euclid([0, 1, 5]), DesignMatrix(ids(3), ("intercept",), np.ones((3, 1))), n_perms=99)
    assert res.ss_among == pytest.approx(0, abs=1e-12)
    assert res.r_squared == pytest.approx(0, abs=1e-12)
    assert res.p_value is None


@pytest.mark.parametrize("seed", range(10))
def test_euclidean_equivalence(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13))
    y = rng.normal(size=(n, int(rng.integers(1, 7))))
    labels = np.arange(n) % int(rng.integers(2, min(4, n - 1) + 1))
    res = permanova(euclid(y), group_design(labels), n_perms=0)
    assert res.r_squared == pytest.approx(anova_r2(y, labels), abs=1e-9)


def test_separated_groups_min_p():
    # 10 vs 10 leaves 2 of C(20,10) labellings as extreme as the observed one
    y = [0.1 * i for i in range(10)] + [10 + 0.1 * i for i in range(10)]
    res = permanova(euclid(y), group_design([0] * 10 + [1] * 10), n_perms=999, seed=3)
    assert res.p_value == pytest.approx(0.001)


def test_relabeling_and_scaling(rng):
    y = rng.normal(size=(10, 2))
    labels = [0, 1] * 5
    base = permanova(euclid(y), group_design(labels), n_perms=0)
    perm = rng.permutation(10)
    d = euclid(y)
    relabeled = DistanceMatrix(d.sample_ids, d.values[np.ix_(perm, perm)])
    again = permanova(relabeled, group_design([labels[i] for i in perm]), n_perms=0)
    assert again.r_squared == pytest.approx(base.r_squared, rel=1e-12)
    scaled = DistanceMatrix(d.sample_ids, d.values * 3.7)
    assert permanova(scaled, group_design(labels), n_perms=0).r_squared == pytest.approx(base.r_squared, rel=1e-12)


def test_threads_and_seed_reproducible(rng):
    d = euclid(rng.normal(size=(12, 2)))
    design = group_design([0, 1, 2] * 4)
    a = permanova(d, design, n_perms=199, seed=11, threads=1)
    b = permanova(d, design, n_perms=199, seed=11, threads=4)
    assert a == b


def test_errors():
    with pytest.raises(DegenerateError, match="degenerate distance matrix"):
        permanova(DistanceMatrix(ids(3), np.zeros((3, 3))), group_design([0, 1, 1]))
    with pytest.raises(DesignError):
        permanova(euclid([0, 1, 2]), group_design([0, 1, 2]))


def test_json_fields():
    res = permanova(euclid([0, 1, 2, 3]), group_design([0, 0, 1, 1]), n_perms=0)
    d = json.loads(res.to_json())
    assert set(d) == {"ss_total", "ss_among", "ss_residual", "r_squared", "pseudo_f", "n_permutations", "seed", "generator"}
    res = permanova(euclid([0, 1, 2, 3]), group_design([0, 0, 1, 1]), n_perms=9)
    d = json.loads(res.to_json())
    assert d["p_value"] == res.p_value and d["r_squared"] == res.r_squared
