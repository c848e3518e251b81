"""Zooming out with parity reshapes, and the pipeline at each zoom level."""

import numpy as np

from sdm.dataset import GenParams, generate_config
from sdm.geometry import DEFAULT_INTRINSICS as K
from sdm.multiscale import pooled_target, reshape_down, reshape_up, sdm_pipeline

x = np.arange(16).reshape(1, 4, 4)
print(x[0])
sub = reshape_down(x)
print("four 2x2 parity grids:\n", sub)
assert np.array_equal(reshape_up(sub), x)

g = np.zeros((1, 128, 256))
for level in range(1, 5):
    g = reshape_down(g)
    print(f"level {level}: {g.shape[0]} grids of {g.shape[1]}x{g.shape[2]}")

cfg = generate_config(GenParams(seed=1))
print("\nconfig", cfg.id, "with", cfg.points.shape[0], "points")
for level in range(5):
    t = pooled_target(cfg.target, level)
    print(f"zoomed-out target at level {level}: {t.shape}, {int(t.sum())} active")

# loss and gradient at each zoom level, from theta = 0
print("\nzoom  loss        grad            matched")
for zoom in range(4, -1, -1):
    r = sdm_pipeline(cfg.buffer(), cfg.target, K, s=4, zoom=zoom, theta=(0.0, 0.0))
    print(f"{zoom:4d}  {r.loss:10.2f}  {np.array2string(r.grad, precision=1):14s}  {r.n_matched}/{r.n_points}")

# at the true translation every surviving point sits on its target
r = sdm_pipeline(cfg.buffer(), cfg.target, K, 4, 0, cfg.theta_star)
print("at theta*: matched", r.n_matched, "of", r.n_points, "mismatch", r.mismatch)
