"""Render a few points, nudge them, and let the hard forward pass snap them back."""

import numpy as np

from sdm.core import build_adjustments, compute_kernels, forward
from sdm.geometry import DEFAULT_INTRINSICS as K
from sdm.geometry import project
from sdm.representation import FragmentBuffer, add_theta, is_proper

# three points, depth doubles as rendering information
pts = np.array([[0.0, 0.0, 10.0], [0.3, -0.2, 12.0], [0.31, -0.19, 12.0]])
buf = FragmentBuffer.from_fragments((pts, pts[:, 2]), K)
print("active cells:", np.argwhere(buf.active).tolist())  # the last two share a cell, rmin keeps one
print("proper?", is_proper(buf, K))

# shift every stored point by theta without moving the cells
theta = (0.05, 0.02)
moved = add_theta(buf, theta)
print("after add_theta proper?", is_proper(moved, K))
print("projections now:", project(moved.fragments()[1], K).round(2).tolist())

# kernels: softmax over negative distances to the 3x3 adjustments
adj = build_adjustments(moved, K)
D = compute_kernels(moved, adj, c=50.0)
i, j = np.argwhere(moved.active)[0]
print("kernel of the first cell:\n", D[i, j].round(3))

# the hard forward pass moves each point to its nearest adjustment
res = forward(moved, K)
print("output cells:", np.argwhere(res.rep > 0).tolist())
print("output proper?", is_proper(res.buffer, K))

# the soft pass approaches the hard one as c grows
for c in (10.0, 100.0, 1000.0):
    gap = np.abs(forward(moved, K, c).rep - res.rep).max()
    print(f"c={c:6.0f}  max |soft - hard| = {gap:.2e}")
