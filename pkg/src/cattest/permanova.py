"""Distance-based linear model: Gower centering, hat matrix, R^2 and PERMANOVA."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import streams
from .betadiv import DistanceMatrix, double_center
from .ingest import Outcome

__all__ = [
    "DesignError",
    "DegenerateError",
    "DesignMatrix",
    "PermanovaResult",
    "design_from_outcome",
    "gower_center",
    "hat_matrix",
    "orthonormal_basis",
    "r_squared_terms",
    "permanova",
]


class DesignError(ValueError):
    pass


class DegenerateError(ValueError):
    pass


@dataclass(frozen=True)
class DesignMatrix:
    """Intercept column followed by covariate columns; must have full column rank."""

    sample_ids: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = np.asarray(self.values, dtype=float)
        if x.ndim != 2 or x.shape != (len(self.sample_ids), len(self.names)):
            raise DesignError(f"design shape {x.shape} does not match ids/names")
        if not np.all(x[:, 0] == 1.0):
            raise DesignError("first design column must be the all-ones intercept")
        collinear = _collinear_columns(x)
        if collinear:
            raise DesignError(f"rank-deficient design; collinear columns: {', '.join(self.names[j] for j in collinear)}")
        object.__setattr__(self, "values", x)

    @property
    def rank(self) -> int:
        return self.values.shape[1]

    def select(self, sample_ids: Sequence[str]) -> "DesignMatrix":
        lookup = {s: i for i, s in enumerate(self.sample_ids)}
        idx = [lookup[s] for s in sample_ids]
        return DesignMatrix(tuple(sample_ids), self.names, self.values[idx])


def _collinear_columns(x: np.ndarray) -> list[int]:
    bad = []
    kept: list[int] = []
    for j in range(x.shape[1]):
        cols = kept + [j]
        if np.linalg.matrix_rank(x[:, cols]) < len(cols):
            bad.append(j)
        else:
            kept.append(j)
    return bad


def design_from_outcome(outcome: Outcome, covariates: Mapping[str, Sequence[float]] | None = None) -> DesignMatrix:
    """Intercept plus the outcome (dummy-coded against the first level if categorical)."""
    n = len(outcome.sample_ids)
    names = ["intercept"]
    cols = [np.ones(n)]
    if outcome.is_categorical:
        codes = outcome.as_array()
        for k, level in enumerate(outcome.levels[1:], start=1):
            names.append(f"outcome[{level}]")
            cols.append((codes == k).astype(float))
    else:
        names.append("outcome")
        cols.append(outcome.as_array())
    for name, vals in (covariates or {}).items():
        names.append(name)
        cols.append(np.asarray(vals, dtype=float))
    return DesignMatrix(outcome.sample_ids, tuple(names), np.column_stack(cols))


def gower_center(dist: DistanceMatrix | np.ndarray) -> np.ndarray:
    """Gower's centered matrix (I - 11'/n)[-d^2/2](I - 11'/n)."""
    d = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=float)
    return double_center(-0.5 * d * d)


def orthonormal_basis(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin-QR basis of the design column space, for a matrix or a stack of them.

    Returns ``(q, deficient)`` where ``deficient`` flags designs whose
    columns are (numerically) linearly dependent.
    """
    q, r = np.linalg.qr(x)
    diag = np.abs(np.diagonal(r, axis1=-2, axis2=-1))
    norms = np.linalg.norm(x, axis=-2)
    deficient = np.any(diag <= 1e-10 * np.maximum(norms, 1e-300), axis=-1)
    return q, deficient


def hat_matrix(design: DesignMatrix | np.ndarray) -> np.ndarray:
    """Projection X (X'X)^-1 X' onto the design's column space."""
    x = design.values if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)
    q, deficient = orthonormal_basis(x)
    if deficient:
        raise DesignError("rank-deficient design")
    return q @ q.T


def r_squared_terms(s: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(SS_total, SS_among) from an uncentered similarity matrix and a design basis.

    ``s`` is -d^2/2 or a kernel, ``q`` an orthonormal basis whose span
    contains the intercept. Centering is folded in: with H = qq' and
    J = I - 11'/n, tr(H JSJ) = tr(HS) - 1'S1/n and tr(JSJ) = tr(S) - 1'S1/n.
    Accepts stacks along a leading axis.
    """
    n = s.shape[-1]
    mean_part = s.sum(axis=(-2, -1)) / n
    total = np.trace(s, axis1=-2, axis2=-1) - mean_part
    among = (q * (s @ q)).sum(axis=(-2, -1)) - mean_part
    return total, among


@dataclass
class PermanovaResult:
    ss_total: float
    ss_among: float
    ss_residual: float
    r_squared: float
    pseudo_f: float
    p_value: float | None
    n_permutations: int
    seed: int | None = None
    generator: str = streams.GENERATOR
    negative_r_squared: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("negative_r_squared")
        if d["p_value"] is None:
            del d["p_value"]
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return dumps_json(d)


def dumps_json(obj, indent: int = 2) -> str:
    """JSON with shortest round-trip float text; non-finite floats become null."""
    return json.dumps(_round_trip(obj), indent=indent) + "\n"


def _round_trip(obj):
    if isinstance(obj, dict):
        return {k: _round_trip(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_trip(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def permanova(
    dist: DistanceMatrix,
    design: DesignMatrix,
    n_perms: int = 999,
    seed: int = 0,
    threads: int = 1,
) -> PermanovaResult:
    """PERMANOVA R^2, pseudo-F and permutation p-value.

    Permutation ``i`` shuffles the design rows with its own generator
    (Fisher-Yates via ``Generator.permutation``). The p-value is
    (1 + #{F_perm >= F_obs}) / (1 + n_perms); ``n_perms=0`` skips it.
    """
    if tuple(dist.sample_ids) != tuple(design.sample_ids):
        raise DesignError("distance matrix and design have different sample ids or order")
    if n_perms < 0:
        raise ValueError("n_perms must be >= 0")
    n = len(dist)
    g = design.rank
    if g >= n:
        raise DesignError(f"design has {g} columns for {n} samples")
    gm = gower_center(dist)
    ss_total = float(np.trace(gm))
    if ss_total <= 0:
        raise DegenerateError("degenerate distance matrix (total sum of squares is zero)")
    q, _ = orthonormal_basis(design.values)
    ss_among = float((q * (gm @ q)).sum())
    ss_resid = ss_total - ss_among
    r2 = ss_among / ss_total
    if g > 1:
        f_obs = (ss_among / (g - 1)) / (ss_resid / (n - g))
    else:
        f_obs = float("nan")

    p_value = None
    if n_perms > 0 and g > 1:

        def chunk(start, stop):
            perms = np.stack([streams.substream(seed, streams.PERMUTATION, i).permutation(n) for i in range(start, stop)])
            qp = q[perms]
            among = (qp * (gm @ qp)).sum(axis=(-2, -1))
            return (among / (g - 1)) / ((ss_total - among) / (n - g))

        f_perm = np.concatenate(streams.run_chunked(n_perms, chunk, threads))
        # relative slack absorbs rounding for permutations equivalent to the observed labelling
        hits = int(np.sum(f_perm >= f_obs * (1 - 1e-10)))
        p_value = (1 + hits) / (1 + n_perms)
    return PermanovaResult(
        ss_total=ss_total,
        ss_among=ss_among,
        ss_residual=ss_resid,
        r_squared=r2,
        pseudo_f=f_obs,
        p_value=p_value,
        n_permutations=n_perms if p_value is not None else 0,
        seed=seed,
        negative_r_squared=r2 < 0,
    )
