"""Pinhole projection without extrinsics.

Screen positions are ``(row, col)`` pairs: the row is driven by ``y`` and the
column by ``x``.  Cells are 0-based and cell ``(i, j)`` covers the half-open
square ``[i, i + 1) x [j, j + 1)`` of real screen coordinates, so the cell of
a real position is its componentwise floor.

All functions accept a single point of shape ``(3,)`` or a stack ``(..., 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a geometric map."""


@dataclass(frozen=True)
class Intrinsics:
    """Focal lengths and principal point in pixels, screen size in cells."""

    fu: float = 160.0
    fv: float = 160.0
    ou: float = 128.0
    ov: float = 64.0
    H: int = 128
    W: int = 256

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise DomainError(f"focal lengths must be positive, got {self.fu}, {self.fv}")
        if self.H < 1 or self.W < 1:
            raise DomainError(f"screen size must be at least 1x1, got {self.H}x{self.W}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)


DEFAULT_INTRINSICS = Intrinsics()


def project(p, K: Intrinsics) -> np.ndarray:
    """Project 3D point(s) to real screen position(s) ``(row, col)``."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise DomainError("projection requires strictly positive depth")
    row = K.fv * p[..., 1] / z + K.ov
    col = K.fu * p[..., 0] / z + K.ou
    return np.stack([row, col], axis=-1)


def floor_pos(rc) -> np.ndarray:
    """Componentwise floor of real screen position(s), as integers."""
    return np.floor(np.asarray(rc, dtype=np.float64)).astype(np.int64)


def unproject_at_depth(row, col, z, K: Intrinsics) -> np.ndarray:
    """Inverse of :func:`project` on the plane of constant depth ``z``."""
    row = np.asarray(row, dtype=np.float64)
    col = np.asarray(col, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise DomainError("unprojection requires strictly positive depth")
    row, col, z = np.broadcast_arrays(row, col, z)
    x = (col - K.ou) * z / K.fu
    y = (row - K.ov) * z / K.fv
    return np.stack([x, y, z], axis=-1)


def on_screen(cells, K: Intrinsics) -> np.ndarray:
    """Boolean mask of integer cells that lie on the ``H x W`` screen."""
    cells = np.asarray(cells)
    return (
        (cells[..., 0] >= 0) & (cells[..., 0] < K.H)
        & (cells[..., 1] >= 0) & (cells[..., 1] < K.W)
    )
