import numpy as np
import pytest

from sdm.geometry import DEFAULT_INTRINSICS, unproject_at_depth
from sdm.representation import FragmentBuffer


def displaced_buffer(rng, n, K=DEFAULT_INTRINSICS, reach=1, margin=0.0, z=(5.0, 80.0), info=None):
    """Buffer whose stored points sit up to ``reach`` cells away from their cells.

    Returns ``(buf, points)``.  ``margin`` keeps each point at least that
    many pixels away from its destination cell's edges.
    """
    cells = np.column_stack([rng.integers(reach, K.H - reach, n), rng.integers(reach, K.W - reach, n)])
    cells = np.unique(cells, axis=0)
    n = cells.shape[0]
    dest = cells + rng.integers(-reach, reach + 1, size=(n, 2))
    sub = rng.uniform(margin, 1 - margin, size=(n, 2))
    depth = rng.uniform(*z, size=n)
    pts = unproject_at_depth(dest[:, 0] + sub[:, 0], dest[:, 1] + sub[:, 1], depth, K)
    vals = depth if info is None else info(rng, n)
    buf_info = np.zeros(K.shape)
    buf_coords = np.zeros(K.shape + (3,))
    buf_info[cells[:, 0], cells[:, 1]] = vals
    buf_coords[cells[:, 0], cells[:, 1]] = pts
    return FragmentBuffer(buf_info, buf_coords), (pts, vals)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
