"""Spatial domain mapping: forward scatter and the dynamic-gradient-flow loss.

Every active cell of the input buffer owns an ``h x w`` window of candidate
positions.  For each candidate the XY-adjustment is the 3D point at the
cell's depth that projects onto the candidate's center; the kernel is a
softmax over negative distances to those adjustments.  In the hard limit
each point moves to its nearest adjustment and collisions are resolved with
rmin.

The loss pulls every point toward the adjustments of target cells inside its
window.  Its gradient bypasses the kernel entirely (straight-through), so it
only depends on which target cells were assigned to each point.

Internally everything runs on flat per-point arrays; the public functions
accept dense :class:`~sdm.representation.FragmentBuffer` grids and are used
for level ``L`` sub-representations, where a cell is ``2**L`` original pixels
wide and its center sits at ``(i + 0.5) * 2**L`` on the original screen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DomainError, Intrinsics, unproject_at_depth
from .representation import FragmentBuffer, rmin_winners


def _check_kernel(h: int, w: int):
    if h % 2 == 0 or w % 2 == 0 or h < 1 or w < 1:
        raise DomainError(f"kernel dimensions must be positive odd integers, got {h}x{w}")


def kernel_offsets(h: int = 3, w: int = 3) -> np.ndarray:
    """Cell offsets ``(dk, dl)`` of a kernel in row-major order, shape ``(h*w, 2)``."""
    _check_kernel(h, w)
    dk, dl = np.meshgrid(np.arange(h) - h // 2, np.arange(w) - w // 2, indexing="ij")
    return np.stack([dk.ravel(), dl.ravel()], axis=-1)


def block_centers(rows, cols, level: int = 0) -> np.ndarray:
    """Original-screen centers of level-``level`` cells, ``(..., 2)``."""
    scale = float(2**level)
    rows = (np.asarray(rows, dtype=np.float64) + 0.5) * scale
    cols = (np.asarray(cols, dtype=np.float64) + 0.5) * scale
    return np.stack(np.broadcast_arrays(rows, cols), axis=-1)


# ---------------------------------------------------------------------------
# per-point primitives


def _adjustments(rows, cols, z, K: Intrinsics, h: int, w: int, level: int) -> np.ndarray:
    """XY-adjustments for points at cells ``(rows, cols)``, shape ``(N, h*w, 3)``."""
    if np.any(z <= 0):
        raise DomainError("active cells must decode to points with positive depth")
    off = kernel_offsets(h, w)
    centers = block_centers(rows[:, None] + off[None, :, 0], cols[:, None] + off[None, :, 1], level)
    return unproject_at_depth(centers[..., 0], centers[..., 1], z[:, None], K)


def _distances(p, T) -> np.ndarray:
    return np.sqrt(((p[:, None, :2] - T[..., :2]) ** 2).sum(-1))


def _softmax_neg(dist, c: float) -> np.ndarray:
    logits = -c * dist
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def _nearest(p, T) -> np.ndarray:
    # argmin returns the first minimum, i.e. the smallest (k, l) in row-major order
    return np.argmin(_distances(p, T), axis=-1)


def _window_lookup(keys, wr, wc, grid):
    H, W = grid.shape[-2:]
    inside = (wr >= 0) & (wr < H) & (wc >= 0) & (wc < W)
    flat = grid.reshape(-1, H, W)
    out = np.zeros(wr.shape, dtype=bool)
    kk = np.broadcast_to(keys[:, None], wr.shape)
    out[inside] = flat[kk[inside], wr[inside], wc[inside]] > 0
    return out


def _assign(keys, rows, cols, choice, target, h: int, w: int, occupied=None, okeys=None, dist=None):
    """Designated target and noise-target mask per point.

    ``keys`` selects the target grid for each point (0 when the target is
    shared).  Cells marked in ``occupied`` (the forward output, indexed by
    ``okeys``) are already claimed by some point's proper position and never
    act as noise targets.  Returns ``(designated, noise, matched)`` where
    ``designated`` is a flat kernel index or -1.

    Candidates are ranked by ``dist`` (point-to-adjustment distances) when
    given, otherwise by cell distance to the proper position; remaining ties
    go to the smallest row, then column.
    """
    off = kernel_offsets(h, w)
    n = rows.shape[0]
    wr = rows[:, None] + off[None, :, 0]
    wc = cols[:, None] + off[None, :, 1]
    hit = _window_lookup(keys, wr, wc, target)

    if dist is None:
        d2 = ((off[None, :, :] - off[choice][:, None, :]) ** 2).sum(-1).astype(np.float64)
    else:
        d2 = np.asarray(dist, dtype=np.float64)
    d2 = np.where(hit, d2, np.inf)
    designated = np.argmin(d2, axis=-1)
    has = hit.any(axis=-1)
    designated = np.where(has, designated, -1)
    matched = has & (designated == choice)

    noise = hit.copy()
    if occupied is not None:
        noise &= ~_window_lookup(keys if okeys is None else okeys, wr, wc, occupied)
    idx = np.arange(n)
    noise[idx, choice] = False
    noise[idx[has], designated[has]] = False
    return designated, noise, matched


def _term_grad(diff, metric: str):
    if metric == "l1":
        return np.abs(diff).sum(-1), np.sign(diff)
    if metric == "l2":
        norm = np.sqrt((diff**2).sum(-1))
        safe = np.where(norm > 0, norm, 1.0)
        return norm, np.where(norm[..., None] > 0, diff / safe[..., None], 0.0)
    raise ValueError(f"unknown distance metric {metric!r}")


def _loss(p, T, designated, noise, matched, metric: str):
    """Per-point loss and gradient split into designated and noise parts."""
    diff = p[:, None, :2] - T[..., :2]
    dist, g = _term_grad(diff, metric)
    pull = (designated >= 0) & ~matched
    sel = np.where(pull, designated, 0)
    idx = np.arange(p.shape[0])
    des_loss = np.where(pull, dist[idx, sel], 0.0)
    des_grad = np.where(pull[:, None], g[idx, sel], 0.0)
    noise_loss = np.where(noise, dist, 0.0).sum(-1)
    noise_grad = np.where(noise[..., None], g, 0.0).sum(-2)
    return des_loss, des_grad, noise_loss, noise_grad


# ---------------------------------------------------------------------------
# public dense API


@dataclass
class TargetAssignment:
    """Per active input cell: proper position, designated target and noise targets.

    Positions are stored as flat kernel indices into :func:`kernel_offsets`;
    ``designated`` is -1 where the window holds no active target cell.
    """

    cells: np.ndarray
    proper: np.ndarray
    designated: np.ndarray
    noise: np.ndarray
    matched: np.ndarray
    h: int = 3
    w: int = 3

    def positions(self, which: str = "designated") -> np.ndarray:
        """Absolute level cells of ``proper`` or ``designated`` (rows with -1 are garbage)."""
        off = kernel_offsets(self.h, self.w)
        idx = getattr(self, which)
        return self.cells[:, -2:] + off[idx]

    def noise_positions(self, n: int) -> np.ndarray:
        off = kernel_offsets(self.h, self.w)
        return self.cells[n, -2:] + off[self.noise[n]]


@dataclass
class GradAccum:
    """Gradient of the summed loss with respect to ``(a, b)``.

    ``per_point`` holds each active cell's contribution; ``noise`` is the part
    coming from noise targets only.
    """

    grad: np.ndarray
    per_point: np.ndarray = field(repr=False)
    noise: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class ForwardResult:
    rep: np.ndarray
    buffer: FragmentBuffer
    proper: np.ndarray
    survived: np.ndarray

    def __iter__(self):
        yield self.rep
        yield self.buffer


def _split_cells(buf: FragmentBuffer):
    cells, coords, info = buf.fragments()
    lead = cells[:, :-2]
    batch_shape = buf.shape[:-2]
    keys = np.ravel_multi_index(lead.T, batch_shape) if lead.shape[1] else np.zeros(cells.shape[0], dtype=np.int64)
    return cells, keys, cells[:, -2], cells[:, -1], coords, info


def build_adjustments(buf: FragmentBuffer, K: Intrinsics, h: int = 3, w: int = 3, level: int = 0) -> np.ndarray:
    """Dense XY-adjustment field, shape ``(..., H, W, h, w, 3)``; inactive cells hold zeros."""
    _check_kernel(h, w)
    cells, _, rows, cols, coords, _ = _split_cells(buf)
    out = np.zeros(buf.shape + (h, w, 3))
    if cells.shape[0]:
        T = _adjustments(rows, cols, coords[:, 2], K, h, w, level)
        out[tuple(cells.T)] = T.reshape(-1, h, w, 3)
    return out


def compute_kernels(buf: FragmentBuffer, adj: np.ndarray, c: float) -> np.ndarray:
    """Softmax kernels ``(..., H, W, h, w)``; nearer adjustments get larger weights."""
    h, w = adj.shape[-3:-1]
    out = np.full(buf.shape + (h, w), 1.0 / (h * w))
    cells = np.argwhere(buf.active)
    if cells.shape[0]:
        sel = tuple(cells.T)
        T = adj[sel].reshape(-1, h * w, 3)
        out[sel] = _softmax_neg(_distances(buf.coords[sel], T), c).reshape(-1, h, w)
    return out


def _scatter_hard(keys, rows, cols, coords, info, choice, shape, h, w):
    """Move each point to its chosen cell; returns destinations and rmin survivors."""
    off = kernel_offsets(h, w)
    H, W = shape[-2:]
    dr = rows + off[choice, 0]
    dc = cols + off[choice, 1]
    ok = (dr >= 0) & (dr < H) & (dc >= 0) & (dc < W)
    idx = np.flatnonzero(ok)
    flat = (keys[idx] * H + dr[idx]) * W + dc[idx]
    win = idx[rmin_winners(flat, coords[idx, 2], info[idx])]
    return dr, dc, win


def forward(buf: FragmentBuffer, K: Intrinsics, mode="hard", h: int = 3, w: int = 3, level: int = 0) -> ForwardResult:
    """Map a (generally improper) buffer to a proper representation.

    ``mode`` is ``"hard"`` or a finite shape constant ``c`` for the soft
    output.  The returned buffer is always the hard-limit one; in soft mode
    ``rep`` holds the soft composite instead of the hard values.
    """
    _check_kernel(h, w)
    cells, keys, rows, cols, coords, info = _split_cells(buf)
    out_info = np.zeros(buf.shape)
    out_coords = np.zeros(buf.shape + (3,))
    if cells.shape[0] == 0:
        return ForwardResult(out_info, FragmentBuffer(out_info.copy(), out_coords), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    T = _adjustments(rows, cols, coords[:, 2], K, h, w, level)
    choice = _nearest(coords, T)
    dr, dc, win = _scatter_hard(keys, rows, cols, coords, info, choice, buf.shape, h, w)
    dest = np.concatenate([cells[win, :-2], dr[win, None], dc[win, None]], axis=1)
    out_info[tuple(dest.T)] = info[win]
    out_coords[tuple(dest.T)] = coords[win]
    hard = FragmentBuffer(out_info, out_coords)
    if isinstance(mode, str):
        if mode != "hard":
            raise ValueError(f"unknown forward mode {mode!r}")
        rep = out_info.copy()
    else:
        D = _softmax_neg(_distances(coords, T), float(mode))
        rep = _soft_composite(cells, keys, rows, cols, coords, info, D, buf.shape, h, w)
    return ForwardResult(rep, hard, choice, win)


def _soft_composite(cells, keys, rows, cols, coords, info, D, shape, h, w):
    """Soft rmin: front-to-back compositing of ``D * info`` with coverage ``D``.

    Contributions to a cell are ordered like rmin (depth, then info) and each
    one is attenuated by the coverage of those in front of it, so the result
    tends to the hard rmin value as the kernels saturate.
    """
    off = kernel_offsets(h, w)
    H, W = shape[-2:]
    n, m = D.shape
    dr = rows[:, None] + off[None, :, 0]
    dc = cols[:, None] + off[None, :, 1]
    ok = (dr >= 0) & (dr < H) & (dc >= 0) & (dc < W)
    kk = np.broadcast_to(keys[:, None], (n, m))[ok]
    flat = (kk * H + dr[ok]) * W + dc[ok]
    z = np.broadcast_to(coords[:, None, 2], (n, m))[ok]
    r = np.broadcast_to(info[:, None], (n, m))[ok]
    d = D[ok]
    order = np.lexsort((r, z, flat))
    flat, d, r = flat[order], d[order], r[order]
    out = np.zeros(int(np.prod(shape)))
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    for a, b in zip(starts, np.r_[starts[1:], flat.size]):
        transmit = np.cumprod(np.r_[1.0, 1.0 - d[a:b - 1]])
        out[flat[a]] = (transmit * d[a:b] * r[a:b]).sum()
    return out.reshape(shape)


def assign_targets(buf: FragmentBuffer, fwd: ForwardResult, target, h: int = 3, w: int = 3,
                   exclude_claimed: bool = True, adj: np.ndarray | None = None) -> TargetAssignment:
    """Designated and noise targets for every active cell of ``buf``.

    ``target`` is a binary grid broadcastable to ``buf.shape``.  The
    designated target is the active target cell in the window nearest to the
    proper position (ties: smallest row, then column); when the adjustment
    field ``adj`` is given it is instead the one whose adjustment lies
    nearest to the point itself.  The noise targets are the remaining active
    target cells except the proper position and, with ``exclude_claimed``,
    except cells occupied in the forward output.
    """
    cells, keys, rows, cols, _, _ = _split_cells(buf)
    target = np.asarray(target)
    if target.ndim == 2 or target.reshape(-1, *target.shape[-2:]).shape[0] == 1:
        tkeys = np.zeros_like(keys)
    else:
        tkeys = keys
    occupied = fwd.buffer.info if exclude_claimed else None
    dist = None
    if adj is not None and cells.shape[0]:
        sel = tuple(cells.T)
        dist = _distances(buf.coords[sel], adj[sel].reshape(-1, h * w, 3))
    designated, noise, matched = _assign(tkeys, rows, cols, fwd.proper, target, h, w, occupied, keys, dist)
    return TargetAssignment(cells, fwd.proper, designated, noise, matched, h, w)


def loss_and_grad(buf: FragmentBuffer, adj: np.ndarray, assign: TargetAssignment, metric: str = "l1"):
    """Summed loss and its straight-through gradient with respect to ``(a, b)``.

    Each active point contributes its distance to the designated target's
    adjustment (unless already matched) plus its distances to the noise
    targets' adjustments.  ``metric`` selects the L1 (default) or L2 norm.
    """
    h, w = adj.shape[-3:-1]
    n = assign.cells.shape[0]
    if n == 0:
        return 0.0, GradAccum(np.zeros(2), np.zeros((0, 2)))
    sel = tuple(assign.cells.T)
    p = buf.coords[sel]
    T = adj[sel].reshape(n, h * w, 3)
    dl, dg, nl, ng = _loss(p, T, assign.designated, assign.noise, assign.matched, metric)
    per_point = dg + ng
    J = float((dl + nl).sum())
    return J, GradAccum(per_point.sum(0), per_point, ng.sum(0))
