"""Weighted Kabsch estimation, bias reweighting, iterative registration and ICP."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .diffmath import Tensor, as_tensor, no_grad, svd3
from .geometry import RigidTransform, compose, rotation_angle_deg

log = logging.getLogger(__name__)

RANK_TOL = 1e-10


class DegenerateError(ArithmeticError):
    """Correspondences do not pin down a rotation."""


def _check_weights(w: np.ndarray, n: int) -> None:
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {w.shape}")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    if not w.sum() > 0:
        raise DegenerateError("all weights are zero")


def kabsch_tensors(src, dst, weights, stop_gradient: bool = False) -> tuple[Tensor, Tensor]:
    """Differentiable weighted Kabsch: (R, t) minimising sum_i u_i ||R s_i + t - d_i||^2.

    With ``stop_gradient`` the rotation is treated as a constant; the
    translation keeps its dependence on the centroids.
    """
    src, dst, weights = as_tensor(src), as_tensor(dst), as_tensor(weights)
    n = src.shape[0]
    _check_weights(weights.data, n)
    u = weights / weights.sum()
    mu_s = u @ src
    mu_d = u @ dst
    xs = src - mu_s
    xd = dst - mu_d
    H = (xs * u.reshape(n, 1)).T @ xd
    s = np.linalg.svd(H.data, compute_uv=False)
    if s[0] <= 0 or s[1] <= RANK_TOL * s[0]:
        raise DegenerateError(f"cross-covariance rank < 2 (singular values {s})")
    if stop_gradient:
        H = Tensor(H.data)
    dec = svd3(H)
    U, V = dec.U, dec.V
    sign = np.sign(np.linalg.det(V.data @ U.data.T)) or 1.0
    R = (V * np.array([1.0, 1.0, sign])) @ U.T
    t = mu_d - R @ mu_s
    return R, t


def weighted_kabsch(src, dst, weights) -> RigidTransform:
    with no_grad():
        R, t = kabsch_tensors(src, dst, weights)
    return RigidTransform(R.data, t.data)


def apply_bias(weights, overlap_mask, alpha) -> Tensor:
    """Multiply the weights of the overlap-sampled indices by alpha."""
    weights = as_tensor(weights)
    mask = np.asarray(overlap_mask, dtype=np.intp)
    alpha = as_tensor(alpha)
    if alpha.data <= 0:
        raise ValueError("alpha must be positive")
    if mask.size == 0:
        log.warning("empty overlap mask; weights left unbiased")
        return weights
    indicator = np.zeros(weights.shape[0])
    indicator[mask] = 1.0
    # 1 off the mask, alpha on it
    return weights * ((alpha - 1.0) * Tensor(indicator) + 1.0)


@dataclass
class IterationRecord:
    transform: RigidTransform
    alpha: float | None
    mean_confidence: float


@dataclass
class RegistrationResult:
    transform: RigidTransform
    per_iteration: list[IterationRecord] = field(default_factory=list)

    @property
    def iterations_used(self) -> int:
        return len(self.per_iteration)


def register_once(p, q, model, rng, tau: float | None = None):
    """One pass of the learned pipeline; returns (transform, diagnostics dict)."""
    p_pts = p.points if hasattr(p, "points") else np.asarray(p)
    q_pts = q.points if hasattr(q, "points") else np.asarray(q)
    with no_grad():
        out = model.forward(p_pts, q_pts, rng, tau=tau)
    xf = RigidTransform(out.R.data, out.t.data)
    m_r = out.matching.m_refined.data
    entropy = float(-(m_r * np.log(np.maximum(m_r, 1e-300))).sum(axis=1).mean())
    diag = {
        "alpha": None if out.alpha is None else float(out.alpha.data),
        "w_mean": float(out.confidences.data.mean()),
        "w_min": float(out.confidences.data.min()),
        "w_max": float(out.confidences.data.max()),
        "m_r_entropy": entropy,
        "forward": out,
    }
    return xf, diag


def register_iterative(
    p,
    q,
    model,
    n_iter: int,
    rng,
    tau: float | None = None,
    early_stop_rot_deg: float = 0.01,
    early_stop_trans: float = 1e-4,
) -> RegistrationResult:
    """Re-run the pipeline on the progressively aligned source.

    The result is the left-composition of the per-iteration estimates.
    Stops early when an update rotates by less than ``early_stop_rot_deg``
    and translates by less than ``early_stop_trans``.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    p_pts = p.points if hasattr(p, "points") else np.asarray(p)
    total = RigidTransform.identity()
    records: list[IterationRecord] = []
    cur = p_pts
    for _ in range(n_iter):
        step, diag = register_once(cur, q, model, rng, tau=tau)
        total = compose(step, total)
        records.append(IterationRecord(step, diag["alpha"], diag["w_mean"]))
        cur = total.apply(p_pts)
        if (
            rotation_angle_deg(step.rotation) < early_stop_rot_deg
            and np.linalg.norm(step.translation) < early_stop_trans
        ):
            break
    return RegistrationResult(total, records)


def icp_baseline(p, q, max_iter: int = 50, tol: float = 1e-8, init: RigidTransform | None = None) -> RigidTransform:
    """Point-to-point ICP with nearest-neighbour correspondences."""
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    p_pts = p.points if hasattr(p, "points") else np.asarray(p, dtype=np.float64)
    q_pts = q.points if hasattr(q, "points") else np.asarray(q, dtype=np.float64)
    tree = cKDTree(q_pts)
    total = init or RigidTransform.identity()
    ones = np.ones(len(p_pts))
    prev_err = np.inf
    for _ in range(max_iter):
        cur = total.apply(p_pts)
        dist, idx = tree.query(cur, k=1)
        err = float(np.mean(dist**2))
        if prev_err - err < tol:
            break
        prev_err = err
        step = weighted_kabsch(cur, q_pts[idx], ones)
        total = compose(step, total)
    return total
