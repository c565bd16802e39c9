"""The full network: features -> overlap bias matching -> neighbour map matching -> weighted SVD."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .diffmath import Tensor, softmax
from .features import Params, extract_features, feature_graph, init_feature_params
from .losses import (
    LossBreakdown,
    global_alignment_loss,
    neighborhood_agreement_loss,
    select_top_pairs,
    spatial_consistency_loss,
    total_loss,
)
from .nmm import MatchingMap, neighbor_map_matching, plain_matching, pseudo_correspondences
from .obmm import (
    OverlapSample,
    bias_prediction,
    default_num_samples,
    init_obmm_params,
    mixing_logits,
    overlap_sampling,
)
from .solver import apply_bias, kabsch_tensors

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ForwardResult:
    R: Tensor
    t: Tensor
    matching: MatchingMap
    pseudo_targets: Tensor
    confidences: Tensor
    svd_weights: Tensor
    alpha: Tensor | None
    sample_p: OverlapSample | None
    sample_q: OverlapSample | None


class OBMNet:
    def __init__(self, cfg: RunConfig | None = None, params: Params | None = None, seed: int | None = None):
        self.cfg = cfg or RunConfig()
        if params is None:
            rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
            params = init_feature_params(rng, self.cfg.edge_widths, self.cfg.feat_dim, proj_gain=self.cfg.feat_init_gain)
            params.update(
                init_obmm_params(rng, self.cfg.feat_dim, self.cfg.mix_hidden_width, self.cfg.bias_hidden_width)
            )
        self.params = params

    @property
    def baseline_head(self) -> bool:
        """No OS, BP or NMM: an MLP over concatenated features weights the SVD directly."""
        c = self.cfg
        return not (c.use_os or c.use_bp or c.use_nmm)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def tau_at(self, epoch: int | None) -> float:
        c = self.cfg
        if epoch is None or c.epochs <= 1:
            return c.tau_end
        frac = min(max(epoch / (c.epochs - 1), 0.0), 1.0)
        return c.tau_start + (c.tau_end - c.tau_start) * frac

    def forward(self, src: np.ndarray, tgt: np.ndarray, rng: np.random.Generator, tau: float | None = None) -> ForwardResult:
        c = self.cfg
        tau = c.tau_end if tau is None else tau
        src = np.asarray(src, dtype=np.float64)
        tgt = np.asarray(tgt, dtype=np.float64)
        src_c = src - src.mean(axis=0)
        tgt_c = tgt - tgt.mean(axis=0)
        phi_p = extract_features(src_c, self.params, c.k_feat, feature_graph(src_c, min(c.k_feat, len(src))))
        phi_q = extract_features(tgt_c, self.params, c.k_feat, feature_graph(tgt_c, min(c.k_feat, len(tgt))))

        sample_p = sample_q = alpha = None
        if c.use_os:
            K = c.K or default_num_samples(len(src), len(tgt))
            sample_p, sample_q, _ = overlap_sampling(src_c, tgt_c, phi_p, phi_q, self.params, K, tau, rng)
            if c.use_bp:
                alpha = bias_prediction(sample_p, sample_q, self.params)

        if c.use_nmm:
            k = min(c.k_match, len(src), len(tgt))
            src_idx = feature_graph(src, k)
            tgt_idx = feature_graph(tgt, k)
            matching = neighbor_map_matching(phi_p, phi_q, src_idx, tgt_idx, c.gamma, c.beta)
        else:
            matching = plain_matching(phi_p, phi_q)
        corr = pseudo_correspondences(matching.m_refined, tgt, matching.s_scores)

        weights = corr.confidences
        if self.baseline_head:
            weights = softmax(mixing_logits(phi_p, phi_q, self.params), axis=0) * float(len(src))
        if alpha is not None:
            weights = apply_bias(weights, sample_p.overlap_mask(), alpha)
        R, t = kabsch_tensors(src, corr.pseudo_targets, weights, stop_gradient=c.svd_stop_gradient)
        return ForwardResult(R, t, matching, corr.pseudo_targets, corr.confidences, weights, alpha, sample_p, sample_q)

    def losses(self, src: np.ndarray, tgt: np.ndarray, out: ForwardResult, hard_min: bool = False) -> LossBreakdown:
        c = self.cfg
        l_g = l_n = l_s = 0.0
        src = np.asarray(src, dtype=np.float64)
        if c.loss_g:
            moved = Tensor(src) @ out.R.T + out.t
            l_g = global_alignment_loss(moved, tgt, c.huber_delta, c.softmin_sharpness, hard=hard_min)
        x_idx = select_top_pairs(out.svd_weights, c.topk_pairs)
        if c.loss_n:
            k = min(c.k_match, len(src), len(tgt))
            y = out.pseudo_targets.data[x_idx]
            l_n = neighborhood_agreement_loss(src, tgt, x_idx, y, out.R, out.t, k)
        if c.loss_s:
            l_s = spatial_consistency_loss(out.matching.m_refined, x_idx)
        return total_loss(l_g, l_n, l_s)

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"param/{k}": v.data for k, v in self.params.items()}

    def save(self, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        save_checkpoint(path, self.cfg, self.params, extra=extra, meta=meta)

    @classmethod
    def load(cls, path) -> "OBMNet":
        cfg, params, _, _ = load_checkpoint(path)
        return cls(cfg, params)


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def _decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path, cfg: RunConfig, params: Params, extra=None, meta=None) -> None:
    """Write a .npz container of named float64 arrays.

    Keys: ``format_version``, ``config`` (UTF-8 key=value text), ``meta``
    (UTF-8 JSON), ``param/<name>`` and any caller-supplied ``extra`` arrays
    such as optimiser moments.
    """
    arrays = {
        "format_version": np.array([CHECKPOINT_VERSION], dtype=np.int64),
        "config": _encode_text(cfg.dumps()),
        "meta": _encode_text(json.dumps(meta or {}, sort_keys=True)),
    }
    for k, v in params.items():
        arrays[f"param/{k}"] = np.asarray(v.data, dtype=np.float64)
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (config, params, extra arrays, meta dict)."""
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "format_version" not in data or int(data["format_version"][0]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")
    cfg = parse_config(_decode_text(data["config"]))
    meta = json.loads(_decode_text(data["meta"]))
    params = {k[len("param/"):]: Tensor(v, requires_grad=True) for k, v in data.items() if k.startswith("param/")}
    extra = {k: v for k, v in data.items() if not k.startswith("param/") and k not in ("format_version", "config", "meta")}
    return cfg, params, extra, meta
