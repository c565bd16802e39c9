"""Neighbour map matching: consensus-refined soft correspondences.

Stages, for source point i and target point j:

    M[i, j]      feature distance ||phi_p[i] - phi_q[j]||
    P            row softmax of -M
    M'[i, a, :]  row of P for the a-th spatial neighbour of p_i
    T[i, a, j]   sum over the target neighbourhood of q_j of M'[i, a, .]
    d[i, j]      sum_a (1 - T[i, a, j])**2, the matching mass the source
                 neighbourhood leaks outside the target neighbourhood
    D            row-normalised (1 / d + beta)
    S            D * sum_a T[i, a, j] / k
    M_e          exp(gamma - S) * M
    M_r          row softmax of -M_e
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .diffmath import Tensor, as_tensor, gather_rows, matmul_const, pairwise_sqdist, softmax

D_EPS = 1e-12
ROW_SUM_TOL = 1e-6


def assert_row_stochastic(x: Tensor, name: str, axis: int = -1) -> None:
    if __debug__:
        err = np.abs(x.data.sum(axis=axis) - 1.0).max() if x.size else 0.0
        assert err <= ROW_SUM_TOL, f"{name} rows sum to 1 +- {err:.3g}"


def raw_distance_map(phi_p: Tensor, phi_q: Tensor) -> Tensor:
    return pairwise_sqdist(phi_p, phi_q).sqrt()


def matching_map_prime(m_raw: Tensor, src_idx: np.ndarray) -> tuple[Tensor, Tensor]:
    """Row softmax of -M, then rows re-gathered by source neighbourhoods.

    Returns (softmax map (N, M), gathered map (N, k, M)).
    """
    soft = softmax(-as_tensor(m_raw), axis=1)
    assert_row_stochastic(soft, "softmax(-M)")
    return soft, gather_rows(soft, src_idx)


def neighbourhood_operator(tgt_idx: np.ndarray, m: int) -> sp.csr_matrix:
    """A with (x @ A)[..., j] = sum_b x[..., tgt_idx[j, b]]."""
    tgt_idx = np.asarray(tgt_idx)
    k = tgt_idx.shape[1]
    rows = tgt_idx.reshape(-1)
    cols = np.repeat(np.arange(tgt_idx.shape[0]), k)
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(m, tgt_idx.shape[0]))


def target_neighbourhood_sums(m_prime: Tensor, tgt_idx: np.ndarray) -> Tensor:
    return matmul_const(m_prime, neighbourhood_operator(tgt_idx, m_prime.shape[-1]))


def weighted_distance(m_prime: Tensor, tgt_idx: np.ndarray, beta: float = 1e-6) -> tuple[Tensor, Tensor]:
    """(d, D) for the gathered map; D rows sum to 1."""
    return _distance_weights(target_neighbourhood_sums(m_prime, tgt_idx), beta)


def _distance_weights(T: Tensor, beta: float) -> tuple[Tensor, Tensor]:
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = ((1.0 - T) ** 2).sum(axis=1)
    inv = 1.0 / (d + D_EPS) + beta
    D = inv / inv.sum(axis=1, keepdims=True)
    assert_row_stochastic(D, "D")
    return d, D


def neighborhood_scores(m_prime: Tensor, D: Tensor, tgt_idx: np.ndarray, k: int | None = None) -> Tensor:
    """S[i, j] = D[i, j] / k * sum over both neighbourhoods of M'."""
    k = m_prime.shape[1] if k is None else k
    if m_prime.shape[1] != k or np.shape(tgt_idx)[1] != k:
        raise ValueError("neighbourhood sizes disagree with k")
    return D * target_neighbourhood_sums(m_prime, tgt_idx).sum(axis=1) * (1.0 / k)


def refined_map(m_raw: Tensor, S: Tensor, gamma: float = 1.0) -> tuple[Tensor, Tensor]:
    """(M_e, M_r): consensus-scaled distances and their row softmax."""
    m_e = (gamma - as_tensor(S)).exp() * m_raw
    m_r = softmax(-m_e, axis=1)
    assert_row_stochastic(m_r, "M_r")
    return m_e, m_r


@dataclass
class MatchingMap:
    m_raw: Tensor
    m_soft: Tensor
    m_prime: Tensor | None
    d: Tensor | None
    d_weights: Tensor | None
    s_scores: Tensor | None
    m_refined: Tensor


def neighbor_map_matching(
    phi_p: Tensor,
    phi_q: Tensor,
    src_idx: np.ndarray,
    tgt_idx: np.ndarray,
    gamma: float = 1.0,
    beta: float = 1e-6,
) -> MatchingMap:
    m_raw = raw_distance_map(phi_p, phi_q)
    soft, m_prime = matching_map_prime(m_raw, src_idx)
    T = target_neighbourhood_sums(m_prime, tgt_idx)
    d, D = _distance_weights(T, beta)
    S = D * T.sum(axis=1) * (1.0 / src_idx.shape[1])
    _, m_r = refined_map(m_raw, S, gamma)
    return MatchingMap(m_raw, soft, m_prime, d, D, S, m_r)


def plain_matching(phi_p: Tensor, phi_q: Tensor) -> MatchingMap:
    """Single-point matching only: M_r = softmax(-M)."""
    m_raw = raw_distance_map(phi_p, phi_q)
    soft = softmax(-m_raw, axis=1)
    assert_row_stochastic(soft, "softmax(-M)")
    return MatchingMap(m_raw, soft, None, None, None, None, soft)


@dataclass
class PseudoCorrespondence:
    pseudo_targets: Tensor  # (N, 3)
    confidences: Tensor  # (N,), mean 1
    best_match: np.ndarray  # argmax_j M_r[i, j]


def pseudo_correspondences(m_refined: Tensor, q_points, s_scores: Tensor | None = None) -> PseudoCorrespondence:
    """Q'_i = sum_j M_r[i, j] q_j and w_i = S[i, j*] / mean_i S[i, j*].

    Without scores every confidence is 1.
    """
    q = as_tensor(q_points)
    targets = m_refined @ q
    best = np.argmax(m_refined.data, axis=1)
    n = m_refined.shape[0]
    if s_scores is None:
        w = Tensor(np.ones(n))
    else:
        picked = s_scores[np.arange(n), best]
        w = picked / picked.mean()
    return PseudoCorrespondence(targets, w, best)
