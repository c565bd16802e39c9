"""Overlap sampling (relaxed Gumbel-Softmax draws over points) and bias prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import Tensor, as_tensor, concat, gather_rows, softmax, softplus
from .features import Params, glorot

PI_FLOOR = 1e-12


def init_obmm_params(
    rng: np.random.Generator, feat_dim: int = 64, mix_hidden: int = 64, bias_hidden: int = 64
) -> Params:
    d = feat_dim
    p: Params = {}

    def dense(name, fan_in, fan_out):
        p[f"{name}.W"] = Tensor(glorot(rng, fan_in, fan_out), requires_grad=True)
        p[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    dense("obmm.mix1", 2 * d, mix_hidden)
    dense("obmm.mix2", mix_hidden, 1)
    dense("obmm.up", d, d)
    # rows are [x, y, z, origin flag, sampled feature]
    dense("obmm.bias1", 4 + d, bias_hidden)
    dense("obmm.bias2", bias_hidden, bias_hidden)
    dense("obmm.bias3", bias_hidden, 1)
    return p


def _affine(x: Tensor, params: Params, name: str) -> Tensor:
    return x @ params[f"{name}.W"] + params[f"{name}.b"]


def _tile_row(v: Tensor, n: int) -> Tensor:
    return gather_rows(v.reshape(1, v.shape[-1]), np.zeros(n, dtype=np.intp))


def mixing_logits(phi_self: Tensor, phi_other: Tensor, params: Params) -> Tensor:
    """Per-point logits from [own feature, max-pooled feature of the other cloud]."""
    d = params["obmm.mix1.W"].shape[0] // 2
    if phi_self.shape[1] != d or phi_other.shape[1] != d:
        raise ValueError(f"feature dim mismatch: expected {d}")
    g = phi_other.max(axis=0)
    blended = concat([phi_self, _tile_row(g, phi_self.shape[0])], axis=1)
    h = _affine(blended, params, "obmm.mix1").relu()
    return _affine(h, params, "obmm.mix2").reshape(phi_self.shape[0])


def class_probabilities(phi_p: Tensor, phi_q: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    """Per-cloud categorical distributions over points (each sums to 1)."""
    pi_p = softmax(mixing_logits(phi_p, phi_q, params), axis=0)
    pi_q = softmax(mixing_logits(phi_q, phi_p, params), axis=0)
    return pi_p, pi_q


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(pi, tau: float, rng: np.random.Generator, n_samples: int | None = None) -> Tensor:
    """softmax((g + log pi) / tau) with g ~ Gumbel(0, 1).

    Returns one relaxed one-hot vector, or an (n_samples, n) matrix of
    independent draws.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pi = as_tensor(pi)
    shape = pi.shape if n_samples is None else (n_samples,) + pi.shape
    g = gumbel_noise(rng, shape)
    logits = (pi.clamp_min(PI_FLOOR).log() + g) * (1.0 / tau)
    return softmax(logits, axis=-1)


def gumbel_hard_sample(pi, rng: np.random.Generator, n_samples: int | None = None) -> np.ndarray:
    """Index of argmax_j (g_j + log pi_j); distributed as Categorical(pi)."""
    p = np.maximum(as_tensor(pi).data, PI_FLOOR)
    shape = p.shape if n_samples is None else (n_samples,) + p.shape
    return np.argmax(gumbel_noise(rng, shape) + np.log(p), axis=-1)


@dataclass
class OverlapSample:
    sample_weights: Tensor  # (K, n), each row on the simplex
    sampled_points: Tensor  # (K, 3)
    sampled_features: Tensor  # (K, D), after the up-projection
    tau: float

    @property
    def hard_indices(self) -> np.ndarray:
        """argmax of each relaxed row: the point each sample mostly selects."""
        return np.argmax(self.sample_weights.data, axis=1)

    def overlap_mask(self) -> np.ndarray:
        return np.unique(self.hard_indices)


def default_num_samples(n: int, m: int) -> int:
    return max(1, int(round(0.7 * min(n, m))))


def sample_cloud(points, phi: Tensor, pi: Tensor, params: Params, K: int, tau: float, rng) -> OverlapSample:
    weights = gumbel_softmax_sample(pi, tau, rng, n_samples=K)
    pts = weights @ as_tensor(points)
    feats = _affine(weights @ phi, params, "obmm.up")
    return OverlapSample(weights, pts, feats, tau)


def overlap_sampling(p, q, phi_p: Tensor, phi_q: Tensor, params: Params, K: int, tau: float, rng):
    """K independent relaxed samples from each cloud.

    Returns (sample of P, sample of Q, (pi_p, pi_q)).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    pi_p, pi_q = class_probabilities(phi_p, phi_q, params)
    sp = sample_cloud(p, phi_p, pi_p, params, K, tau, rng)
    sq = sample_cloud(q, phi_q, pi_q, params, K, tau, rng)
    return sp, sq, (pi_p, pi_q)


def bias_prediction(p_overlap: OverlapSample, q_overlap: OverlapSample, params: Params) -> Tensor:
    """Scalar alpha > 0 from the stacked samples.

    Rows from P carry origin flag 0 and rows from Q carry 1; each row is
    [x, y, z, flag, feature].  Shared per-row layers, max-pool over rows,
    then a scalar layer through softplus.
    """
    kp, kq = p_overlap.sampled_points.shape[0], q_overlap.sampled_points.shape[0]
    flag_p = Tensor(np.zeros((kp, 1)))
    flag_q = Tensor(np.ones((kq, 1)))
    rows_p = concat([p_overlap.sampled_points, flag_p, p_overlap.sampled_features], axis=1)
    rows_q = concat([q_overlap.sampled_points, flag_q, q_overlap.sampled_features], axis=1)
    x = concat([rows_p, rows_q], axis=0)
    h = _affine(x, params, "obmm.bias1").relu()
    h = _affine(h, params, "obmm.bias2").relu()
    pooled = h.max(axis=0)
    return softplus(_affine(pooled, params, "obmm.bias3").reshape(()))
