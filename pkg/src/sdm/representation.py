"""2D representations of fragment sets and the rmin aggregator.

A 2D representation is a plain ``(H, W)`` float array whose zero cells are
inactive.  A :class:`FragmentBuffer` additionally keeps, for every active
cell, the 3D coordinates it decodes to; storing the coordinates explicitly is
the identity decoder, so decoding is trivially differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import Intrinsics, floor_pos, on_screen


class Fragment(NamedTuple):
    coord: tuple[float, float, float]
    info: float


def _as_arrays(frags):
    """Accept an iterable of :class:`Fragment` or a ``(coords, info)`` pair."""
    if isinstance(frags, tuple) and len(frags) == 2 and not isinstance(frags, Fragment):
        coords, info = frags
    else:
        frags = list(frags)
        coords = [f[0] for f in frags]
        info = [f[1] for f in frags]
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    info = np.asarray(info, dtype=np.float64).reshape(-1)
    if np.any(info <= 0):
        raise ValueError("fragment rendering information must be positive")
    return coords, info


def rmin_winners(keys, z, info) -> np.ndarray:
    """Indices of the rmin survivor of every group of equal ``keys``.

    Within a group the survivor has the smallest depth and, among those, the
    smallest info; remaining ties go to the lowest input index.  Callers are
    responsible for discarding fragments with ``z <= 0`` beforehand.
    """
    keys = np.asarray(keys)
    if keys.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(keys.size), info, z, keys))
    sorted_keys = keys[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_keys[1:] != sorted_keys[:-1]
    return order[first]


def rmin(frags) -> float:
    """Minimum info among the closest visible fragments; 0 if none is visible."""
    coords, info = _as_arrays(frags)
    visible = coords[:, 2] > 0
    if not visible.any():
        return 0.0
    z = coords[visible, 2]
    zmin = z.min()
    return float(info[visible][z == zmin].min())


def _visible_cells(coords, K: Intrinsics):
    keep = coords[:, 2] > 0
    cells = np.zeros((coords.shape[0], 2), dtype=np.int64)
    if keep.any():
        p = coords[keep]
        rows = K.fv * p[:, 1] / p[:, 2] + K.ov
        cols = K.fu * p[:, 0] / p[:, 2] + K.ou
        cells[keep] = floor_pos(np.stack([rows, cols], axis=-1))
    keep &= on_screen(cells, K)
    return cells, keep


@dataclass(frozen=True, eq=False)
class FragmentBuffer:
    """Grid of rendering information with decoded coordinates per cell.

    ``info`` has shape ``(..., H, W)`` and ``coords`` shape ``(..., H, W, 3)``;
    leading axes index independent sub-representations.  Inactive cells hold
    ``info == 0`` and coordinates ``(0, 0, 0)``.
    """

    info: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        if self.coords.shape != self.info.shape + (3,):
            raise ValueError(
                f"coords shape {self.coords.shape} does not match info shape {self.info.shape}"
            )

    @property
    def active(self) -> np.ndarray:
        return self.info > 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.info.shape

    @classmethod
    def empty(cls, shape) -> "FragmentBuffer":
        shape = tuple(shape)
        return cls(np.zeros(shape), np.zeros(shape + (3,)))

    @classmethod
    def from_fragments(cls, frags, K: Intrinsics) -> "FragmentBuffer":
        """Scatter fragments to their floored projections, resolving by rmin."""
        coords, info = _as_arrays(frags)
        cells, keep = _visible_cells(coords, K)
        idx = np.flatnonzero(keep)
        flat = cells[idx, 0] * K.W + cells[idx, 1]
        win = idx[rmin_winners(flat, coords[idx, 2], info[idx])]
        buf_info = np.zeros((K.H, K.W))
        buf_coords = np.zeros((K.H, K.W, 3))
        buf_info[cells[win, 0], cells[win, 1]] = info[win]
        buf_coords[cells[win, 0], cells[win, 1]] = coords[win]
        return cls(buf_info, buf_coords)

    def fragments(self):
        """Active cells as ``(cells, coords, info)`` with ``cells`` of shape ``(N, ndim)``."""
        cells = np.argwhere(self.active)
        sel = tuple(cells.T)
        return cells, self.coords[sel], self.info[sel]

    def equals(self, other: "FragmentBuffer") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.info, other.info)
            and np.array_equal(self.coords, other.coords)
        )


def render(frags, K: Intrinsics) -> np.ndarray:
    """Representation of a fragment set on the ``H x W`` screen with rmin aggregation.

    Fragments behind the camera or projecting off-screen are dropped.
    """
    return FragmentBuffer.from_fragments(frags, K).info


def is_proper(buf: FragmentBuffer, K: Intrinsics) -> bool:
    """True iff every active cell decodes to a point projecting back into it."""
    cells, coords, _ = buf.fragments()
    if cells.shape[0] == 0:
        return True
    if np.any(coords[:, 2] <= 0):
        return False
    rows = K.fv * coords[:, 1] / coords[:, 2] + K.ov
    cols = K.fu * coords[:, 0] / coords[:, 2] + K.ou
    back = floor_pos(np.stack([rows, cols], axis=-1))
    return bool(np.array_equal(back, cells[:, -2:]))


def add_theta(buf: FragmentBuffer, theta) -> FragmentBuffer:
    """Shift the decoded coordinates of every active cell by ``(a, b, 0)``.

    Cell positions are untouched, so the result is generally not proper.
    """
    a, b = theta
    shift = np.array([a, b, 0.0])
    coords = np.where(buf.active[..., None], buf.coords + shift, buf.coords)
    return FragmentBuffer(buf.info.copy(), coords)


def binary_mask(rep) -> np.ndarray:
    """1 on active cells, 0 elsewhere."""
    return (np.asarray(rep) > 0).astype(np.float64)
