"""Absorbing high-dimensional fixed effects by alternating projections."""
import logging
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from app.core.errors import ConvergenceError, InputError
from app.schemas.estimation import FESpec

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000


def group_codes(frame: pd.DataFrame, fe: FESpec) -> List[np.ndarray]:
    """Integer group code per row for each FE dimension"""
    codes = []
    for dim in fe.dimensions:
        missing = [c for c in dim if c not in frame.columns]
        if missing:
            raise InputError(f"fixed-effect column(s) {', '.join(missing)} not in data")
        codes.append(frame.groupby(list(dim), sort=True, dropna=False).ngroup().to_numpy(dtype=np.int64))
    return codes


def _group_means(matrix: np.ndarray, codes: np.ndarray, counts: np.ndarray) -> np.ndarray:
    means = np.empty((counts.size, matrix.shape[1]))
    for j in range(matrix.shape[1]):
        means[:, j] = np.bincount(codes, weights=matrix[:, j], minlength=counts.size)
    return means / counts[:, None]


def within_transform(
    data: np.ndarray,
    codes: Sequence[np.ndarray],
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> Tuple[np.ndarray, int]:
    """Demean the columns of data by every FE dimension.

    Sweeps subtract group means dimension by dimension until the largest
    absolute change in a sweep drops below tol. A single dimension is exact
    after one sweep. Returns the demeaned copy and the number of sweeps.
    """
    if len(codes) == 0:
        raise InputError("within_transform needs at least one fixed-effect dimension")
    matrix = np.array(data, dtype=float, copy=True)
    squeeze = matrix.ndim == 1
    if squeeze:
        matrix = matrix[:, None]
    prepared = []
    for c in codes:
        c = np.asarray(c, dtype=np.int64)
        if c.shape[0] != matrix.shape[0]:
            raise InputError("fixed-effect codes and data differ in length")
        counts = np.bincount(c).astype(float)
        prepared.append((c, np.where(counts > 0, counts, 1.0)))

    if matrix.shape[0] == 0:
        return (matrix[:, 0] if squeeze else matrix), 0

    delta = np.inf
    for sweep in range(1, max_iter + 1):
        delta = 0.0
        for c, counts in prepared:
            shift = _group_means(matrix, c, counts)[c]
            matrix -= shift
            delta = max(delta, float(np.abs(shift).max()))
        if len(prepared) == 1 or delta < tol:
            logger.debug("within_transform converged after %d sweep(s), delta=%.3g", sweep, delta)
            return (matrix[:, 0] if squeeze else matrix), sweep
    raise ConvergenceError(
        f"alternating projections did not converge in {max_iter} sweeps (last delta {delta:.3g})",
        last_delta=delta,
        iterations=max_iter,
    )


def k_absorbed(codes: Sequence[np.ndarray]) -> int:
    """Degrees of freedom used up by the absorbed fixed effects.

    Two dimensions lose one redundant level per connected component of
    their bipartite group graph; beyond two, one level per extra dimension
    is subtracted.
    """
    sizes = [int(np.max(c)) + 1 if len(c) else 0 for c in codes]
    if len(codes) == 1:
        return sizes[0]
    if len(codes) == 2:
        a, b = (np.asarray(c, dtype=np.int64) for c in codes)
        if a.size == 0:
            return 0
        n_a, n_b = sizes
        graph = coo_matrix((np.ones(a.size), (a, n_a + b)), shape=(n_a + n_b, n_a + n_b))
        n_components, _ = connected_components(graph, directed=False)
        return n_a + n_b - n_components
    return sum(sizes) - (len(codes) - 1)
