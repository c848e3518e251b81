"""Estimate the Sky translation on 512 synthetic configurations."""

import numpy as np

from sdm.dataset import SKY_THETA, GenParams, add_noise, generate_corpus
from sdm.optimizer import HyperParams, train

corpus = generate_corpus(512, GenParams(seed=0))
print("points per config:", np.percentile([c.points.shape[0] for c in corpus], [10, 50, 90]))

hp = HyperParams()  # lr 3e-4, batches of 16, one epoch, s = 4
rep = train(corpus, hp, seed=0)
print("theta* =", SKY_THETA)
print("theta~ =", rep.theta.round(5), " error", f"{rep.error:.2e}")

# where the estimate was after each zoom level
zooms = np.array(rep.zooms)
for z in hp.schedule():
    last = np.flatnonzero(zooms == z)[-1] + 1
    print(f"  after zoom {z}: {rep.trajectory[last].round(4)}")

# the same run with noisy targets
for n in (1, 4):
    noisy = [c.with_target(add_noise(c.target, n, [0, n, k])) for k, c in enumerate(corpus)]
    r = train(noisy, hp, seed=0)
    print(f"noise {n}: error {r.error:.4f}")
