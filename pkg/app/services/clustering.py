"""Cluster-robust sandwich variance estimators."""
import logging
from typing import Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from app.core.errors import NotEstimableError

logger = logging.getLogger(__name__)


def cluster_codes(ids) -> Tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(pd.Series(ids).astype(str), sort=True)
    return codes.astype(np.int64), len(uniques)


def intersect_ids(ids_a, ids_b) -> np.ndarray:
    return (pd.Series(ids_a).astype(str) + "\x1f" + pd.Series(ids_b).astype(str)).to_numpy()


def bread(X: np.ndarray) -> np.ndarray:
    return linalg.pinvh(X.T @ X)


def meat(X: np.ndarray, residuals: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    """Sum over clusters of the outer product of the cluster score sums"""
    scores = X * residuals[:, None]
    sums = np.empty((n_groups, X.shape[1]))
    for j in range(X.shape[1]):
        sums[:, j] = np.bincount(codes, weights=scores[:, j], minlength=n_groups)
    return sums.T @ sums


def cr1_scale(n_obs: int, n_params: int, n_groups: int) -> float:
    if n_obs - n_params <= 0:
        raise NotEstimableError(f"no residual degrees of freedom (N={n_obs}, K={n_params})")
    return n_groups / (n_groups - 1) * (n_obs - 1) / (n_obs - n_params)


def cluster_vcov(X: np.ndarray, residuals: np.ndarray, cluster_ids, k_absorbed: int = 0) -> np.ndarray:
    """One-way CR1 cluster-robust variance"""
    X = np.asarray(X, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    codes, n_groups = cluster_codes(cluster_ids)
    if n_groups < 2:
        raise NotEstimableError("cluster-robust variance needs at least two clusters")
    b = bread(X)
    scale = cr1_scale(X.shape[0], X.shape[1] + k_absorbed, n_groups)
    return scale * (b @ meat(X, residuals, codes, n_groups) @ b)


def psd_floor(vcov: np.ndarray) -> np.ndarray:
    """Zero out negative eigenvalues of a symmetric matrix"""
    sym = (vcov + vcov.T) / 2.0
    values, vectors = np.linalg.eigh(sym)
    if values.min() >= 0:
        return sym
    logger.debug("two-way vcov indefinite (min eigenvalue %.3g); flooring at 0", values.min())
    return (vectors * np.clip(values, 0.0, None)) @ vectors.T


def twoway_vcov(
    X: np.ndarray, residuals: np.ndarray, ids_a, ids_b, k_absorbed: int = 0, floor: bool = True
) -> np.ndarray:
    """Two-way clustering by inclusion-exclusion: V_A + V_B - V_(A and B).

    When one partition is nested in the other the intersection equals the
    finer partition and the coarser one-way matrix is returned unchanged.
    """
    _, g_a = cluster_codes(ids_a)
    _, g_b = cluster_codes(ids_b)
    both = intersect_ids(ids_a, ids_b)
    _, g_ab = cluster_codes(both)
    if g_a < 2 or g_b < 2:
        raise NotEstimableError("two-way clustering needs at least two clusters per dimension")
    if g_ab == g_b:
        return cluster_vcov(X, residuals, ids_a, k_absorbed)
    if g_ab == g_a:
        return cluster_vcov(X, residuals, ids_b, k_absorbed)
    v = (
        cluster_vcov(X, residuals, ids_a, k_absorbed)
        + cluster_vcov(X, residuals, ids_b, k_absorbed)
        - cluster_vcov(X, residuals, both, k_absorbed)
    )
    return psd_floor(v) if floor else v


def count_clusters(ids: Sequence) -> int:
    return cluster_codes(ids)[1]
