"""Brute-force reference implementations.

Written with explicit loops and no imports from the package, so they can
check the vectorised code independently.
"""
import math

import numpy as np


def sqdist_loop(a, b):
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            s = 0.0
            for c in range(len(a[i])):
                s += (a[i][c] - b[j][c]) ** 2
            out[i, j] = s
    return out


def knn_loop(query, base, k):
    rows = []
    for q in query:
        d = [(sum((q[c] - b[c]) ** 2 for c in range(len(q))), j) for j, b in enumerate(base)]
        d.sort()
        rows.append([j for _, j in d[:k]])
    return np.array(rows)


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def nmm_loop(phi_p, phi_q, src_idx, tgt_idx, gamma, beta, d_eps=1e-12):
    """Every stage of the neighbour consensus refinement, one entry at a time."""
    n, m = len(phi_p), len(phi_q)
    k = len(src_idx[0])
    M = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            M[i, j] = math.sqrt(sum((phi_p[i][c] - phi_q[j][c]) ** 2 for c in range(len(phi_p[i]))))
    P = np.array([softmax_row([-v for v in M[i]]) for i in range(n)])
    # M'[i, a, :] = P[src_idx[i, a], :]
    Mp = np.zeros((n, k, m))
    for i in range(n):
        for a in range(k):
            Mp[i, a] = P[src_idx[i][a]]
    T = np.zeros((n, k, m))
    for i in range(n):
        for a in range(k):
            for j in range(m):
                T[i, a, j] = sum(Mp[i, a, tgt_idx[j][b]] for b in range(len(tgt_idx[j])))
    d = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            d[i, j] = sum((1.0 - T[i, a, j]) ** 2 for a in range(k))
    D = np.zeros((n, m))
    for i in range(n):
        inv = [1.0 / (d[i, j] + d_eps) + beta for j in range(m)]
        tot = sum(inv)
        for j in range(m):
            D[i, j] = inv[j] / tot
    S = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            # p ranges over the source neighbourhood of p_i, q over the target neighbourhood of q_j
            for a in range(k):
                for b in range(len(tgt_idx[j])):
                    acc += P[src_idx[i][a], tgt_idx[j][b]]
            S[i, j] = D[i, j] * acc / k
    Me = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            Me[i, j] = math.exp(gamma - S[i, j]) * M[i, j]
    Mr = np.array([softmax_row([-v for v in Me[i]]) for i in range(n)])
    return {"M": M, "P": P, "Mp": Mp, "T": T, "d": d, "D": D, "S": S, "Me": Me, "Mr": Mr}


def huber_scalar(x, delta):
    return 0.5 * x * x if x <= delta else delta * (x - 0.5 * delta)


def chamfer_huber_loop(p, q, delta):
    tot = 0.0
    for a in p:
        tot += huber_scalar(min(sum((a[c] - b[c]) ** 2 for c in range(3)) for b in q), delta)
    for b in q:
        tot += huber_scalar(min(sum((a[c] - b[c]) ** 2 for c in range(3)) for a in p), delta)
    return tot


def neighbourhood_loss_loop(src, tgt, x_idx, y_pts, R, t, k):
    nx = knn_loop([src[i] for i in x_idx], src, k)
    ny = knn_loop(y_pts, tgt, k)
    tot = 0.0
    for i in range(len(x_idx)):
        for a in range(k):
            p = src[nx[i][a]]
            q = tgt[ny[i][a]]
            r = [sum(R[r_][c] * p[c] for c in range(3)) + t[r_] - q[r_] for r_ in range(3)]
            tot += math.sqrt(sum(v * v for v in r))
    return tot


def spatial_loss_loop(Mr, x_idx, floor=1e-12):
    tot = 0.0
    for i in x_idx:
        row = list(Mr[i])
        j = row.index(max(row))
        tot += -math.log(max(row[j], floor))
    return tot / len(x_idx)


def kabsch_reference(src, dst, w):
    """Weighted Procrustes written out directly from its definition."""
    w = np.asarray(w, dtype=float) / np.sum(w)
    ms = (w[:, None] * src).sum(0)
    md = (w[:, None] * dst).sum(0)
    H = np.zeros((3, 3))
    for i in range(len(src)):
        H += w[i] * np.outer(src[i] - ms, dst[i] - md)
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    d = np.linalg.det(V @ U.T)
    R = V @ np.diag([1, 1, d]) @ U.T
    return R, md - R @ ms


def euler_zyx_loop(R):
    yaw = math.atan2(R[1][0], R[0][0])
    pitch = math.asin(max(-1.0, min(1.0, -R[2][0])))
    roll = math.atan2(R[2][1], R[2][2])
    return [math.degrees(v) for v in (yaw, pitch, roll)]


def metrics_loop(Rp, tp, Rg, tg):
    tr = sum(sum(Rp[r][c] * Rg[r][c] for r in range(3)) for c in range(3))
    mie_r = math.degrees(math.acos(max(-1.0, min(1.0, (tr - 1) / 2))))
    dt = [tp[i] - tg[i] for i in range(3)]
    mie_t = math.sqrt(sum(v * v for v in dt))
    ep, eg = euler_zyx_loop(Rp), euler_zyx_loop(Rg)
    diffs = []
    for a, b in zip(ep, eg):
        x = a - b
        while x >= 180:
            x -= 360
        while x < -180:
            x += 360
        diffs.append(abs(x))
    return sum(diffs) / 3, sum(abs(v) for v in dt) / 3, mie_r, mie_t


def overlap_loop(a, b, thr):
    hit = 0
    for p in a:
        best = min(math.sqrt(sum((p[c] - q[c]) ** 2 for c in range(3))) for q in b)
        hit += best <= thr
    return hit / len(a)


def parse_ply_scratch(text):
    """Minimal independent ASCII PLY vertex reader."""
    lines = text.strip().split("\n")
    assert lines[0] == "ply"
    n = None
    props = []
    i = 1
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        if parts[0] == "property":
            props.append(parts[-1])
        i += 1
    rows = [list(map(float, l.split())) for l in lines[i + 1 : i + 1 + n]]
    xi, yi, zi = props.index("x"), props.index("y"), props.index("z")
    return np.array([[r[xi], r[yi], r[zi]] for r in rows])


def random_rotation(rng, max_deg=180.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    th = math.radians(rng.uniform(0, max_deg))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * K @ K
