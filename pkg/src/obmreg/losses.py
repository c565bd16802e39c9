"""Unsupervised training losses: global alignment, neighbourhood agreement, spatial consistency."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffmath import Tensor, as_tensor, huber, knn_indices, logsumexp, pairwise_sqdist

LOG_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    l_g: float
    l_n: float
    l_s: float
    total: float
    tensor: Tensor | None = None


def _soft_min(d: Tensor, axis: int, sharpness: float) -> Tensor:
    # -log(sum exp(-s d)) / s, never above the hard min; clamped at 0
    return (logsumexp(d * (-sharpness), axis=axis) * (-1.0 / sharpness)).clamp_min(0.0)


def global_alignment_loss(
    p_transformed,
    q,
    delta: float = 1.0,
    sharpness: float = 0.0,
    hard: bool = False,
) -> Tensor:
    """Bidirectional Huber chamfer on squared nearest-neighbour distances.

    The exact min is used (its gradient goes to the nearest point) unless
    ``sharpness`` > 0 and not ``hard``, which swaps in a log-sum-exp soft-min.
    The soft-min sits below the true min by up to log(M) / sharpness, so it
    needs sharpness well above log(M) / (typical squared spacing).
    """
    pt = as_tensor(p_transformed)
    qt = as_tensor(q)
    d = pairwise_sqdist(pt, qt)
    if hard or sharpness <= 0:
        fwd = d.min(axis=1).clamp_min(0.0)
        bwd = d.min(axis=0).clamp_min(0.0)
    else:
        fwd = _soft_min(d, 1, sharpness)
        bwd = _soft_min(d, 0, sharpness)
    return huber(fwd, delta).sum() + huber(bwd, delta).sum()


def select_top_pairs(weights, k: int) -> np.ndarray:
    """Indices of the k largest weights, ties broken by lower index."""
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights)
    k = min(k, len(w))
    return np.argsort(-w, kind="stable")[:k]


def neighborhood_agreement_loss(
    src_points: np.ndarray,
    tgt_points: np.ndarray,
    x_idx: np.ndarray,
    y_points: np.ndarray,
    R,
    t,
    k: int,
) -> Tensor:
    """sum_i sum_a ||R p_a + t - q_a|| over paired neighbourhoods.

    p_a is the a-th nearest source neighbour of x_i = src_points[x_idx[i]],
    q_a the a-th nearest target point of y_i; neighbours pair by rank.
    """
    src_points = np.asarray(src_points)
    tgt_points = np.asarray(tgt_points)
    if k > len(src_points) or k > len(tgt_points):
        raise ValueError("k exceeds cloud size")
    nx = knn_indices(src_points[x_idx], src_points, k)
    ny = knn_indices(np.asarray(y_points), tgt_points, k)
    p_nb = src_points[nx.reshape(-1)]
    q_nb = tgt_points[ny.reshape(-1)]
    R, t = as_tensor(R), as_tensor(t)
    resid = Tensor(p_nb) @ R.T + t - Tensor(q_nb)
    return (resid**2).sum(axis=1).sqrt().sum()


def spatial_consistency_loss(m_refined, x_idx) -> Tensor:
    """Mean negative log of each selected row's largest entry."""
    m = as_tensor(m_refined)
    x_idx = np.asarray(x_idx)
    if x_idx.size == 0:
        raise ValueError("no rows selected")
    rows = m[x_idx]
    best = np.argmax(rows.data, axis=1)
    top = rows[np.arange(len(x_idx)), best]
    return -(top.clamp_min(LOG_FLOOR).log().mean())


def total_loss(l_g=0.0, l_n=0.0, l_s=0.0) -> LossBreakdown:
    """Unweighted sum; accepts floats or scalar tensors."""
    parts = [as_tensor(x) if isinstance(x, Tensor) else float(x) for x in (l_g, l_n, l_s)]
    vals = [float(p.data) if isinstance(p, Tensor) else p for p in parts]
    if not all(math.isfinite(v) for v in vals):
        raise FloatingPointError(f"non-finite loss component {vals}")
    tot = None
    if any(isinstance(p, Tensor) for p in parts):
        tot = Tensor(0.0)
        for p in parts:
            tot = tot + p
    return LossBreakdown(vals[0], vals[1], vals[2], float(sum(vals)), tot)
