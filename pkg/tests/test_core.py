import numpy as np
import pytest

from conftest import displaced_buffer
from sdm.core import (
    TargetAssignment,
    assign_targets,
    build_adjustments,
    compute_kernels,
    forward,
    kernel_offsets,
    loss_and_grad,
)
from sdm.dataset import GenParams, generate_config
from sdm.evaluation import check_point
from sdm.geometry import DEFAULT_INTRINSICS as K
from sdm.geometry import DomainError, project, unproject_at_depth
from sdm.representation import FragmentBuffer, add_theta, binary_mask, is_proper, render


def single(cell, point, info=1.0):
    buf = FragmentBuffer.empty(K.shape)
    buf.info[cell] = info
    buf.coords[cell] = point
    return buf


def test_kernel_offsets_row_major():
    np.testing.assert_array_equal(kernel_offsets(3, 3)[:3], [[-1, -1], [-1, 0], [-1, 1]])
    assert kernel_offsets(5, 3).shape == (15, 2)
    with pytest.raises(DomainError):
        kernel_offsets(2, 3)


def test_adjustment_examples():
    buf = single((5, 7), unproject_at_depth(5.2, 7.9, 12.0, K))
    adj = build_adjustments(buf, K)
    np.testing.assert_allclose(project(adj[5, 7, 1, 1], K), (5.5, 7.5))
    for k in range(3):
        for l in range(3):
            np.testing.assert_allclose(project(adj[5, 7, k, l], K), (5 + k - 1 + 0.5, 7 + l - 1 + 0.5))
    assert np.all(adj[5, 7, ..., 2] == 12.0)
    assert not adj[4, 7].any()


def test_adjustments_at_coarse_level_use_block_centers():
    buf = single((2, 3), unproject_at_depth(40.0, 50.0, 10.0, K))
    adj = build_adjustments(buf, K, level=4)
    np.testing.assert_allclose(project(adj[2, 3, 1, 1], K), (2.5 * 16, 3.5 * 16))


def test_kernel_examples():
    p = unproject_at_depth(10.5, 20.5, 8.0, K)
    buf = single((10, 20), p)
    adj = build_adjustments(buf, K)
    D = compute_kernels(buf, adj, 1000.0)
    np.testing.assert_allclose(D[0, 0], 1 / 9)
    assert D[10, 20, 1, 1] > 1 - 1e-12
    np.testing.assert_allclose(D.sum(axis=(-1, -2)), 1.0, atol=1e-12)
    # nearer adjustments get larger weights
    q = unproject_at_depth(10.5, 21.2, 8.0, K)
    D2 = compute_kernels(single((10, 20), q), adj, 5.0)[10, 20]
    assert D2[1, 2] > D2[1, 1] > D2[1, 0]


def test_forward_proper_is_fixed_point(rng):
    buf, _ = displaced_buffer(rng, 300, reach=0)
    assert is_proper(buf, K)
    res = forward(buf, K)
    np.testing.assert_array_equal(res.rep, buf.info)
    np.testing.assert_array_equal(res.buffer.coords, buf.coords)
    assert np.all(res.proper == 4)


def test_forward_moves_to_neighbor():
    buf = single((2, 2), unproject_at_depth(2.5, 3.4, 6.0, K))
    res = forward(buf, K)
    assert np.argwhere(res.rep > 0).tolist() == [[2, 3]]
    assert is_proper(res.buffer, K)


def test_forward_matches_rerender(rng):
    for _ in range(100):
        buf, (pts, info) = displaced_buffer(rng, int(rng.integers(1, 400)))
        res = forward(buf, K)
        oracle = render((pts, info), K)
        np.testing.assert_array_equal(res.rep, oracle)
        assert is_proper(res.buffer, K)


def test_forward_ties_resolved_by_rmin():
    # two points move into the same cell; the nearer one survives
    buf = FragmentBuffer.empty(K.shape)
    buf.info[10, 10], buf.coords[10, 10] = 3.0, unproject_at_depth(10.5, 11.5, 9.0, K)
    buf.info[10, 12], buf.coords[10, 12] = 2.0, unproject_at_depth(10.5, 11.5, 7.0, K)
    res = forward(buf, K)
    assert res.rep[10, 11] == 2.0 and np.count_nonzero(res.rep) == 1


def test_soft_converges_to_hard(rng):
    worst = []
    for _ in range(20):
        buf, _ = displaced_buffer(rng, 200, margin=0.25, z=(20.0, 80.0))
        hard = forward(buf, K).rep
        gaps = [np.abs(forward(buf, K, c).rep - hard).max() for c in (10.0, 100.0, 1000.0)]
        assert gaps[0] >= gaps[1] >= gaps[2]
        worst.append(gaps[2])
    assert max(worst) < 1e-6


def test_soft_and_hard_share_assignment(rng):
    buf, _ = displaced_buffer(rng, 200)
    a, b = forward(buf, K), forward(buf, K, 3.0)
    np.testing.assert_array_equal(a.proper, b.proper)
    assert a.buffer.equals(b.buffer)


def _target_with(cells):
    L = np.zeros(K.shape)
    for c in cells:
        L[c] = 1.0
    return L


def test_assign_single_target():
    buf = single((20, 30), unproject_at_depth(20.5, 30.5, 10.0, K))
    fwd = forward(buf, K)
    a = assign_targets(buf, fwd, _target_with([(21, 31)]))
    assert a.designated[0] == 8 and not a.noise.any() and not a.matched[0]
    assert a.positions()[0].tolist() == [21, 31]


def test_assign_empty_window_gives_zero_gradient():
    buf = single((20, 30), unproject_at_depth(20.5, 30.5, 10.0, K))
    fwd = forward(buf, K)
    a = assign_targets(buf, fwd, _target_with([(40, 40)]))
    assert a.designated[0] == -1
    J, g = loss_and_grad(buf, build_adjustments(buf, K), a)
    assert J == 0 and not g.grad.any()


def test_assign_matched_excludes_self_term():
    buf = single((20, 30), unproject_at_depth(20.5, 30.5, 10.0, K))
    fwd = forward(buf, K)
    a = assign_targets(buf, fwd, _target_with([(20, 30), (19, 29)]))
    assert a.matched[0] and a.designated[0] == 4
    assert a.noise[0].tolist() == [True] + [False] * 8


def test_designated_tie_break_smallest_row_then_col():
    buf = single((20, 30), unproject_at_depth(20.5, 30.5, 10.0, K))
    fwd = forward(buf, K)
    a = assign_targets(buf, fwd, _target_with([(21, 30), (19, 30), (20, 29)]))
    assert a.positions()[0].tolist() == [19, 30]
    # ranking by the point itself picks the nearest adjustment instead
    buf2 = single((20, 30), unproject_at_depth(20.9, 30.5, 10.0, K))
    a2 = assign_targets(buf2, forward(buf2, K), _target_with([(21, 30), (19, 30)]), adj=build_adjustments(buf2, K))
    assert a2.positions()[0].tolist() == [21, 30]


def test_loss_example():
    buf = single((72, 147), (1.2, 0.4, 10.0))
    adj = np.zeros(K.shape + (3, 3, 3))
    adj[72, 147, 0, 0] = (1.0, 0.5, 10.0)
    a = TargetAssignment(np.array([[72, 147]]), np.array([4]), np.array([0]), np.zeros((1, 9), bool), np.array([False]))
    J, g = loss_and_grad(buf, adj, a)
    assert J == pytest.approx(0.3)
    np.testing.assert_array_equal(g.grad, (1.0, -1.0))
    adj[72, 147, 0, 0] = (1.2, 0.4, 10.0)
    J, g = loss_and_grad(buf, adj, a)
    assert J == 0 and not g.grad.any()


def test_l2_metric():
    buf = single((72, 147), (1.3, 0.9, 10.0))
    adj = np.zeros(K.shape + (3, 3, 3))
    adj[72, 147, 0, 0] = (1.0, 0.5, 10.0)
    a = TargetAssignment(np.array([[72, 147]]), np.array([4]), np.array([0]), np.zeros((1, 9), bool), np.array([False]))
    J, g = loss_and_grad(buf, adj, a, metric="l2")
    assert J == pytest.approx(0.5)
    np.testing.assert_allclose(g.grad, (0.6, 0.8))
    with pytest.raises(ValueError):
        loss_and_grad(buf, adj, a, metric="huber")


def test_alignment_fixed_point():
    cfg = generate_config(GenParams(seed=3, theta_star=(0.01, -0.004), z_lo=20.0))
    buf = add_theta(cfg.buffer(), cfg.theta_star)
    fwd = forward(buf, K)
    np.testing.assert_array_equal(binary_mask(fwd.rep), cfg.target)
    a = assign_targets(buf, fwd, cfg.target)
    assert a.matched.all()
    adj = build_adjustments(buf, K)
    J, g = loss_and_grad(buf, adj, TargetAssignment(a.cells, a.proper, a.designated, np.zeros_like(a.noise), a.matched))
    assert J == 0


def test_gradient_matches_central_differences():
    cfg = generate_config(GenParams(seed=8, theta_star=(0.02, 0.01), z_lo=20.0))
    base = cfg.buffer()

    def fn(theta):
        buf = add_theta(base, theta)
        fwd = forward(buf, K)
        adj = build_adjustments(buf, K)
        a = assign_targets(buf, fwd, cfg.target, adj=adj)
        J, g = loss_and_grad(buf, adj, a)
        return J, g.grad

    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(20):
        res = check_point(fn, rng.uniform(-0.02, 0.05, 2))
        if res is None:
            continue
        assert res[0] < 1e-5
        checked += 1
    assert checked >= 10


def test_grad_accumulation_order_independent(rng):
    buf, _ = displaced_buffer(rng, 300)
    fwd = forward(buf, K)
    adj = build_adjustments(buf, K)
    a = assign_targets(buf, fwd, binary_mask(rng.random(K.shape) < 0.3))
    _, g = loss_and_grad(buf, adj, a)
    perm = rng.permutation(g.per_point.shape[0])
    np.testing.assert_allclose(g.per_point[perm].sum(0), g.grad, atol=1e-12)


def test_nonpositive_depth_rejected():
    with pytest.raises(DomainError):
        forward(single((3, 3), (0.0, 0.0, -2.0)), K)
