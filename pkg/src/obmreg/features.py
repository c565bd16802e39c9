"""Densely connected EdgeConv feature extractor over a static k-NN graph."""
from __future__ import annotations

import numpy as np

from .diffmath import Tensor, concat, gather_rows, knn_indices
from .geometry import PointCloud

Params = dict[str, Tensor]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_feature_params(
    rng: np.random.Generator,
    widths=(32, 32, 64),
    out_dim: int = 64,
    in_dim: int = 3,
    proj_gain: float = 1.0,
) -> Params:
    """Layer ``l`` maps concat(x_i, x_j - x_i) of width 2*C_l to widths[l].

    C_l is the dense width: the input plus every earlier layer output.
    ``proj_gain`` scales the initial output projection, which sets how sharp
    the first softmax matchings over feature distances are.
    """
    params: Params = {}
    c = in_dim
    for l, w in enumerate(widths):
        params[f"feat.edge{l}.W"] = Tensor(glorot(rng, 2 * c, w), requires_grad=True)
        params[f"feat.edge{l}.b"] = Tensor(np.zeros(w), requires_grad=True)
        c += w
    params["feat.proj.W"] = Tensor(proj_gain * glorot(rng, c, out_dim), requires_grad=True)
    params["feat.proj.b"] = Tensor(np.zeros(out_dim), requires_grad=True)
    return params


def n_edge_layers(params: Params) -> int:
    return sum(1 for k in params if k.startswith("feat.edge") and k.endswith(".W"))


def edge_conv_layer(x: Tensor, W: Tensor, b: Tensor, neighbors: np.ndarray) -> Tensor:
    """max_j relu([x_i, x_j - x_i] @ W + b) over the neighbours j of i.

    The affine map is split as x_i @ (W_top - W_bot) + x_j @ W_bot so the
    (N, k, 2C) edge tensor is never materialised.
    """
    c = x.shape[1]
    if W.shape[0] != 2 * c:
        raise ValueError(f"layer expects {W.shape[0] // 2} input channels, got {c}")
    W_top, W_bot = W[:c], W[c:]
    centre = x @ (W_top - W_bot) + b  # (N, C_out)
    nbr = gather_rows(x @ W_bot, neighbors)  # (N, k, C_out)
    edges = (nbr + centre.reshape(centre.shape[0], 1, centre.shape[1])).relu()
    return edges.max(axis=1)


def feature_graph(points: np.ndarray, k_feat: int) -> np.ndarray:
    n = len(points)
    if k_feat > n:
        raise ValueError(f"k_feat={k_feat} exceeds cloud size {n}")
    return knn_indices(points, points, k_feat)


def extract_features(cloud, params: Params, k_feat: int = 16, neighbors: np.ndarray | None = None) -> Tensor:
    """(N, 3) coordinates -> (N, D) per-point features.

    The neighbour graph is built once from the input coordinates and shared
    by every layer.  Not rotation invariant.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    x0 = pts if isinstance(pts, Tensor) else Tensor(pts)
    if neighbors is None:
        neighbors = feature_graph(x0.data, k_feat)
    feats = [x0]
    for l in range(n_edge_layers(params)):
        inp = feats[0] if l == 0 else concat(feats, axis=1)
        feats.append(edge_conv_layer(inp, params[f"feat.edge{l}.W"], params[f"feat.edge{l}.b"], neighbors))
    return concat(feats, axis=1) @ params["feat.proj.W"] + params["feat.proj.b"]
