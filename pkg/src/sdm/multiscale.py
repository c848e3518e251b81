"""Coarse-to-fine SDM with 3x3 kernels on zoomed-out sub-representations.

One zoom-out splits every grid into four half-size grids by row/column
parity, so after ``L`` zoom-outs the screen is covered by ``4**L`` grids
whose cells each stand for a ``2**L``-pixel block of the original screen.
A 3x3 kernel on such a grid reaches a whole block away.

The pipeline tracks every point by an original-screen cell ``(R, C)``: at
level ``L`` the point sits in sub-grid ``(R, C) & (2**L - 1)`` at cell
``(R, C) >> L``.  Moving a point within its sub-grid rewrites the high bits,
and zooming back in is free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import _adjustments, _assign, _distances, _loss, _nearest, kernel_offsets
from .geometry import DomainError, Intrinsics
from .representation import FragmentBuffer, add_theta, rmin_winners


def reshape_down(grids) -> np.ndarray:
    """Split each ``(h, w, ...)`` grid into four ``(h/2, w/2, ...)`` parity grids.

    The output order per input grid is ``[even/even, even/odd, odd/even,
    odd/odd]`` (row parity major), matching a row-major reshape to
    ``(h/2, 2, w/2, 2)`` followed by moving the two parity axes first.
    """
    grids = np.asarray(grids)
    if grids.ndim < 3:
        raise DomainError("expected a stack of grids with shape (n, h, w, ...)")
    n, h, w = grids.shape[:3]
    if h % 2 or w % 2:
        raise DomainError(f"cannot zoom out a {h}x{w} grid with odd dimensions")
    rest = grids.shape[3:]
    x = grids.reshape((n, h // 2, 2, w // 2, 2) + rest)
    x = np.moveaxis(x, (2, 4), (1, 2))
    return x.reshape((n * 4, h // 2, w // 2) + rest)


def reshape_up(grids) -> np.ndarray:
    """Inverse of :func:`reshape_down`."""
    grids = np.asarray(grids)
    m, h, w = grids.shape[:3]
    if m % 4:
        raise DomainError(f"cannot zoom in {m} grids; need a multiple of four")
    rest = grids.shape[3:]
    x = grids.reshape((m // 4, 2, 2, h, w) + rest)
    x = np.moveaxis(x, (1, 2), (2, 4))
    return x.reshape((m // 4, h * 2, w * 2) + rest)


def zoomed_target(sub_targets) -> np.ndarray:
    """Cellwise OR of equally shaped binary masks."""
    sub_targets = np.asarray(sub_targets)
    return (sub_targets > 0).any(axis=0).astype(np.float64)


def pooled_target(target, level: int) -> np.ndarray:
    """Zoomed-out target at ``level``: OR over all ``4**level`` sub-targets."""
    grids = np.asarray(target, dtype=np.float64)[None]
    for _ in range(level):
        grids = reshape_down(grids)
    return zoomed_target(grids)


def subgrid_index(R, C, level: int) -> np.ndarray:
    """Index of the level-``level`` sub-grid holding original cell ``(R, C)``.

    Consistent with repeated :func:`reshape_down` of a single grid.
    """
    R = np.asarray(R)
    C = np.asarray(C)
    idx = np.zeros(np.broadcast(R, C).shape, dtype=np.int64)
    for k in range(level):
        idx = idx * 4 + ((R >> k) & 1) * 2 + ((C >> k) & 1)
    return idx


def to_subgrids(R, C, values, shape, level: int) -> np.ndarray:
    """Dense stack of level sub-grids holding ``values`` at their points."""
    H, W = shape
    values = np.asarray(values)
    out = np.zeros((4**level, H >> level, W >> level) + values.shape[1:])
    out[subgrid_index(R, C, level), np.asarray(R) >> level, np.asarray(C) >> level] = values
    return out


@dataclass
class PipelineResult:
    """Outcome of one pipeline pass on one configuration.

    ``output`` is the final proper representation placed back on the original
    screen; ``mismatch`` is True when an output cell falls outside the
    zoomed-out target at the final level.
    """

    loss: float
    grad: np.ndarray
    noise_grad: np.ndarray
    output: np.ndarray
    mismatch: bool
    level: int
    n_points: int
    n_matched: int


def _forward_level(R, C, coords, info, K, level, h, w):
    """Hard SDM at one level on tracked points; returns survivors and choices."""
    H, W = K.H >> level, K.W >> level
    mask = (1 << level) - 1
    rows, cols = R >> level, C >> level
    T = _adjustments(rows, cols, coords[:, 2], K, h, w, level)
    choice = _nearest(coords, T)
    off = kernel_offsets(h, w)
    dr = rows + off[choice, 0]
    dc = cols + off[choice, 1]
    ok = (dr >= 0) & (dr < H) & (dc >= 0) & (dc < W)
    idx = np.flatnonzero(ok)
    newR = (dr[idx] << level) | (R[idx] & mask)
    newC = (dc[idx] << level) | (C[idx] & mask)
    win = rmin_winners(newR * K.W + newC, coords[idx, 2], info[idx])
    keep = idx[win]
    return (newR[win], newC[win], keep), (rows, cols, T, choice)


def pipeline_points(R, C, coords, info, targets, K: Intrinsics, s: int, zoom: int,
                    theta=(0.0, 0.0), h: int = 3, w: int = 3, metric: str = "l1",
                    exclude_claimed: bool = True, rank_by_point: bool = True,
                    backward_on_output: bool = True) -> PipelineResult:
    """Sparse pipeline on points of a proper full-screen buffer.

    ``R, C`` are the points' cells, ``coords`` their untranslated
    coordinates.  ``targets`` maps each level to its zoomed-out target (a
    full-resolution target is pooled on demand when given as an array).
    Occupancy for ``exclude_claimed`` is pooled per block like the target.
    With ``backward_on_output`` the loss window of each surviving point is
    centred on the cell it was moved to; otherwise on its input cell.
    """
    if not 0 <= zoom <= s:
        raise DomainError(f"zoom must lie in [0, {s}], got {zoom}")
    if K.H % (1 << s) or K.W % (1 << s):
        raise DomainError(f"screen {K.H}x{K.W} is not divisible by 2**{s}")
    if isinstance(targets, np.ndarray):
        tgt = pooled_target(targets, zoom)
    else:
        tgt = targets[zoom]
    R = np.asarray(R, dtype=np.int64)
    C = np.asarray(C, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.float64) + np.array([theta[0], theta[1], 0.0])
    info = np.asarray(info, dtype=np.float64)

    for level in range(s, zoom, -1):
        (R, C, keep), _ = _forward_level(R, C, coords, info, K, level, h, w)
        coords, info = coords[keep], info[keep]

    n = R.shape[0]
    if n == 0:
        return PipelineResult(0.0, np.zeros(2), np.zeros(2), np.zeros(K.shape), False, zoom, 0, 0)
    (outR, outC, keep), (rows, cols, T, choice) = _forward_level(R, C, coords, info, K, zoom, h, w)
    info_out = info[keep]
    occupied = None
    if exclude_claimed:
        occupied = np.zeros(tgt.shape)
        occupied[outR >> zoom, outC >> zoom] = 1.0
    if backward_on_output:
        coords_b = coords[keep]
        rows, cols = outR >> zoom, outC >> zoom
        T = _adjustments(rows, cols, coords_b[:, 2], K, h, w, zoom)
        choice = np.full(rows.shape[0], (h * w) // 2)
        coords = coords_b
        n = rows.shape[0]
    keys = np.zeros(n, dtype=np.int64)
    designated, noise, matched = _assign(keys, rows, cols, choice, tgt, h, w, occupied,
                                         dist=_distances(coords, T) if rank_by_point else None)
    dl, dg, nl, ng = _loss(coords, T, designated, noise, matched, metric)

    output = np.zeros(K.shape)
    output[outR, outC] = info_out
    mismatch = bool(np.any(tgt[outR >> zoom, outC >> zoom] <= 0))
    grad = dg.sum(0) + ng.sum(0)
    return PipelineResult(float((dl + nl).sum()), grad, ng.sum(0), output, mismatch, zoom, n, int(matched.sum()))


def sdm_pipeline(buf: FragmentBuffer, target, K: Intrinsics, s: int, zoom: int, theta=(0.0, 0.0),
                 h: int = 3, w: int = 3, metric: str = "l1", exclude_claimed: bool = True,
                 rank_by_point: bool = True, backward_on_output: bool = True) -> PipelineResult:
    """Zoom ``buf`` out ``s`` times, run SDM, and zoom back in to level ``zoom``.

    ``buf`` is the proper full-screen buffer before translation; the
    estimate ``theta`` is added to its points first.  The loss and gradient
    are those of the final level against the zoomed-out target.
    """
    if buf.shape != K.shape:
        raise DomainError(f"buffer shape {buf.shape} does not match screen {K.shape}")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != K.shape:
        raise DomainError(f"target shape {target.shape} does not match screen {K.shape}")
    cells, coords, info = buf.fragments()
    return pipeline_points(cells[:, 0], cells[:, 1], coords, info, target, K, s, zoom, theta, h, w,
                           metric=metric, exclude_claimed=exclude_claimed, rank_by_point=rank_by_point,
                           backward_on_output=backward_on_output)


def sdm_pipeline_dense(buf: FragmentBuffer, target, K: Intrinsics, s: int, zoom: int, theta=(0.0, 0.0)):
    """Reference pipeline on dense sub-grid stacks; forward pass only.

    Returns the final full-screen representation.  Used to cross-check the
    sparse tracking in :func:`pipeline_points`.
    """
    from .core import forward

    cur = add_theta(buf, theta)
    info = cur.info[None]
    coords = cur.coords[None]
    for _ in range(s):
        info, coords = reshape_down(info), reshape_down(coords)
    for level in range(s, zoom - 1, -1):
        res = forward(FragmentBuffer(info, coords), K, "hard", 3, 3, level)
        info, coords = res.buffer.info, res.buffer.coords
        if level > zoom:
            info, coords = reshape_up(info), reshape_up(coords)
    for _ in range(zoom):
        info = reshape_up(info)
    return info[0]
