import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdm.geometry import DEFAULT_INTRINSICS as K
from sdm.geometry import Intrinsics
from sdm.representation import (
    Fragment,
    FragmentBuffer,
    add_theta,
    binary_mask,
    is_proper,
    render,
    rmin,
)


def brute_render(frags, K):
    """Per-cell bucket of every fragment, then rmin; loops only."""
    out = np.zeros((K.H, K.W))
    for i in range(K.H):
        for j in range(K.W):
            bucket = []
            for (x, y, z), r in frags:
                if z <= 0:
                    continue
                if math.floor(K.fv * y / z + K.ov) == i and math.floor(K.fu * x / z + K.ou) == j:
                    bucket.append((z, r))
            if bucket:
                zmin = min(z for z, _ in bucket)
                out[i, j] = min(r for z, r in bucket if z == zmin)
    return out


def test_rmin_examples():
    assert rmin([]) == 0.0
    assert rmin([Fragment((0.0, 0.0, -1.0), 5.0)]) == 0.0
    assert rmin([Fragment((0, 0, 5), 3), Fragment((1, 1, 5), 2), Fragment((0, 0, 7), 1)]) == 2.0


def test_render_examples():
    assert not render([], K).any()
    one = render([Fragment((0.0, 0.0, 10.0), 1.0)], K)
    assert one[64, 128] == 1.0 and one.sum() == 1.0
    three = render([Fragment((0, 0, 5), 3), Fragment((0.001, 0, 5), 2), Fragment((0, 0, 7), 9)], K)
    assert three[64, 128] == 2.0 and np.count_nonzero(three) == 1


def test_render_matches_brute_force():
    small = Intrinsics(fu=20, fv=20, ou=8, ov=6, H=12, W=16)
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(0, 200))
        pts = np.column_stack([rng.uniform(-4, 4, n), rng.uniform(-3, 3, n), rng.choice([-1.0, 2.0, 3.0, 5.0, 8.0], n)])
        info = rng.choice([1.0, 2.0, 3.5], n)
        frags = [Fragment(tuple(p), r) for p, r in zip(pts, info)]
        np.testing.assert_array_equal(render(frags, small), brute_render(frags, small))


def test_render_values_come_from_inputs():
    rng = np.random.default_rng(2)
    pts = np.column_stack([rng.uniform(-10, 10, 300), rng.uniform(-5, 5, 300), rng.uniform(5, 40, 300)])
    info = rng.uniform(0.5, 9, 300)
    rep = render((pts, info), K)
    assert set(rep[rep > 0]).issubset(set(info))


def test_nonpositive_info_rejected():
    with pytest.raises(ValueError):
        render([Fragment((0, 0, 5), 0.0)], K)


def test_is_proper_examples():
    assert is_proper(FragmentBuffer.empty(K.shape), K)
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(-5, 5, 50), rng.uniform(-2, 2, 50), rng.uniform(5, 30, 50)])
    buf = FragmentBuffer.from_fragments((pts, pts[:, 2]), K)
    assert is_proper(buf, K)
    cells, coords, _ = buf.fragments()
    moved = buf.coords.copy()
    i, j = cells[0]
    moved[i, j, 0] += 2 * coords[0, 2] / K.fu
    assert not is_proper(FragmentBuffer(buf.info, moved), K)


def test_add_theta_examples():
    buf = FragmentBuffer.from_fragments(([[1.0, 2.0, 10.0]], [1.0]), K)
    assert add_theta(buf, (0, 0)).equals(buf)
    shifted = add_theta(buf, (0.5, -0.3))
    cells, coords, _ = shifted.fragments()
    np.testing.assert_allclose(coords[0], (1.5, 1.7, 10.0))
    assert shifted.fragments()[1][0, 2] == 10.0


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_add_theta_inverse(a, b):
    rng = np.random.default_rng(4)
    pts = np.column_stack([rng.uniform(-5, 5, 20), rng.uniform(-2, 2, 20), rng.uniform(5, 30, 20)])
    buf = FragmentBuffer.from_fragments((pts, pts[:, 2]), K)
    back = add_theta(add_theta(buf, (a, b)), (-a, -b))
    np.testing.assert_array_equal(back.info, buf.info)
    np.testing.assert_allclose(back.coords, buf.coords, atol=1e-12)
    np.testing.assert_array_equal(back.coords[..., 2], buf.coords[..., 2])


def test_binary_mask():
    assert not binary_mask(np.zeros((3, 3))).any()
    r = np.array([[0.0, 2.5], [7.0, 0.0]])
    np.testing.assert_array_equal(binary_mask(r), [[0, 1], [1, 0]])
    np.testing.assert_array_equal(binary_mask(binary_mask(r)), binary_mask(r))
