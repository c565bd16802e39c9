import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obmreg import OBMNet, RunConfig
from obmreg.diffmath import Tensor, grad_check, parameters_grad_check, softmax
from obmreg.losses import (
    LossBreakdown,
    global_alignment_loss,
    neighborhood_agreement_loss,
    select_top_pairs,
    spatial_consistency_loss,
    total_loss,
)

from oracles import chamfer_huber_loop, neighbourhood_loss_loop, random_rotation, spatial_loss_loop

TINY = dict(edge_widths=(8, 8), feat_dim=8, mix_hidden_width=8, bias_hidden_width=8, k_feat=4, k_match=3, topk_pairs=6)


def test_alignment_examples():
    q = np.random.default_rng(0).normal(size=(10, 3))
    assert float(global_alignment_loss(q, q).data) == 0.0
    one = global_alignment_loss(np.zeros((1, 3)), np.array([[0.5, 0.0, 0.0]]), delta=1.0)
    assert abs(float(one.data) - 0.0625) < 1e-15
    far = global_alignment_loss(np.zeros((1, 3)), np.array([[2.0, 0.0, 0.0]]), delta=1.0)
    assert abs(float(far.data) - 2 * 3.5) < 1e-12  # linear branch: 4 - 0.5 per direction


def test_alignment_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p, q = rng.normal(size=(7, 3)), rng.normal(size=(8, 3))
        ref = chamfer_huber_loop(p.tolist(), q.tolist(), 0.5)
        assert abs(float(global_alignment_loss(p, q, 0.5).data) - ref) < 1e-10


def test_soft_min_agrees_with_hard_on_sparse_fixture():
    rng = np.random.default_rng(2)
    q = rng.uniform(-3, 3, size=(12, 3))
    p = q + rng.normal(scale=0.2, size=q.shape)
    hard = float(global_alignment_loss(p, q, hard=True).data)
    soft = float(global_alignment_loss(p, q, sharpness=100.0).data)
    assert abs(soft - chamfer_huber_loop(p.tolist(), q.tolist(), 1.0)) < 1e-12 + abs(hard - soft)
    assert abs(soft - hard) < 1e-3
    assert soft <= hard + 1e-15


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_alignment_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(9, 3)), rng.normal(size=(6, 3))
    a = float(global_alignment_loss(p, q).data)
    b = float(global_alignment_loss(p[rng.permutation(9)], q[rng.permutation(6)]).data)
    assert abs(a - b) < 1e-12 and a >= 0


def test_neighbourhood_examples():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(10, 3))
    R = random_rotation(rng)
    t = rng.normal(size=3)
    tgt = src @ R.T + t
    idx = np.arange(4)
    assert float(neighborhood_agreement_loss(src, tgt, idx, tgt[idx], R, t, 3).data) < 1e-12
    p = np.zeros((1, 3))
    one = neighborhood_agreement_loss(p, p, [0], p, np.eye(3), np.array([1.0, 0, 0]), 1)
    assert abs(float(one.data) - 1.0) < 1e-15
    with pytest.raises(ValueError):
        neighborhood_agreement_loss(src, tgt[:2], idx, tgt[idx], R, t, 3)


def test_neighbourhood_matches_oracle_10_pairs():
    rng = np.random.default_rng(4)
    for _ in range(10):
        src, tgt = rng.normal(size=(8, 3)), rng.normal(size=(7, 3))
        x_idx = rng.choice(8, size=5, replace=False)
        y = rng.normal(size=(5, 3))
        R, t = random_rotation(rng), rng.normal(size=3)
        ref = neighbourhood_loss_loop(src.tolist(), tgt.tolist(), x_idx.tolist(), y.tolist(), R.tolist(), t.tolist(), 3)
        got = float(neighborhood_agreement_loss(src, tgt, x_idx, y, R, t, 3).data)
        assert abs(got - ref) < 1e-10


def test_spatial_examples():
    assert float(spatial_consistency_loss(Tensor(np.eye(4)), [0, 2]).data) == 0.0
    uni = np.full((2, 7), 1 / 7)
    assert abs(float(spatial_consistency_loss(Tensor(uni), [1]).data) - math.log(7)) < 1e-12
    row = Tensor([[0.7, 0.2, 0.1]])
    assert abs(float(spatial_consistency_loss(row, [0]).data) - 0.356675) < 1e-6
    with pytest.raises(ValueError):
        spatial_consistency_loss(row, [])
    # floor keeps log finite
    assert np.isfinite(spatial_consistency_loss(Tensor([[0.0, 0.0]]), [0]).data)


def test_spatial_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n, m = rng.integers(2, 9, size=2)
        Mr = softmax(Tensor(rng.normal(scale=2, size=(n, m))), axis=1).data
        x_idx = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        assert abs(float(spatial_consistency_loss(Tensor(Mr), x_idx).data) - spatial_loss_loop(Mr, x_idx)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_spatial_decreases_as_rows_sharpen(seed):
    logits = np.random.default_rng(seed).normal(size=(4, 6))
    vals = [float(spatial_consistency_loss(softmax(Tensor(logits * s), axis=1), np.arange(4)).data) for s in (0.5, 1, 2, 4)]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


def test_select_top_pairs_ties():
    assert select_top_pairs(np.array([0.5, 2.0, 2.0, 1.0]), 2).tolist() == [1, 2]
    assert select_top_pairs(np.ones(3), 10).tolist() == [0, 1, 2]


def test_total_loss():
    b = total_loss(0.5, 0.25, 0.125)
    assert isinstance(b, LossBreakdown) and b.total == 0.875 and b.tensor is None
    t = total_loss(Tensor(1.0), 2.0, Tensor(3.0))
    assert abs(float(t.tensor.data) - 6.0) < 1e-15 and abs(t.total - (t.l_g + t.l_n + t.l_s)) < 1e-9
    with pytest.raises(FloatingPointError):
        total_loss(float("nan"))


def test_loss_gradients_20_instances():
    rng = np.random.default_rng(6)
    for i in range(20):
        q = rng.normal(size=(5, 3))
        x = rng.normal(size=15)
        src = rng.normal(size=(6, 3))
        assert grad_check(lambda v: global_alignment_loss(v.reshape(5, 3), q, 0.8), x, tol=1e-4).passed
        assert grad_check(lambda v: spatial_consistency_loss(softmax(v.reshape(5, 3), axis=1), [0, 2, 3]), x, tol=1e-4).passed
        y = rng.normal(size=(3, 3))
        rep = grad_check(lambda v: neighborhood_agreement_loss(src, q, [0, 1, 4], y, v[:9].reshape(3, 3), v[9:12], 2), x, tol=1e-4)
        assert rep.passed, (i, rep.max_rel_error)


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_parameter_gradient(seed):
    # gain 1 keeps the matching soft so the loss and its gradient are well above
    # round-off; eps 1e-4 keeps finite-difference cancellation below tol
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(16, 3))
    tgt = src @ random_rotation(rng, 30).T + 0.1 + rng.normal(scale=0.05, size=(16, 3))
    model = OBMNet(RunConfig(**TINY, feat_init_gain=1.0), seed=seed)

    def loss():
        out = model.forward(src, tgt, np.random.default_rng(0), tau=0.7)
        return model.losses(src, tgt, out).tensor

    rep = parameters_grad_check(loss, model.parameters(), eps=1e-4, tol=1e-4)
    assert rep.passed, rep.max_rel_error
