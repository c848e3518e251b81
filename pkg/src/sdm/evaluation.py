"""Noise sweeps, quartile statistics and gradient checks.

Every trial draws its own corpus, noise and shuffling seeds from a
``SeedSequence`` keyed by ``(seed, trial)``, so a trial's result does not
depend on which other trials or levels run alongside it.  A trial reuses the
same corpus at every noise level.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import _adjustments, _assign, _distances, _loss, _nearest, kernel_offsets
from .dataset import SKY_THETA, GenParams, SceneConfig, add_noise, generate_corpus, target_mask
from .geometry import DEFAULT_INTRINSICS, Intrinsics, unproject_at_depth
from .optimizer import HyperParams, NumericalError, _Prepared, train

log = logging.getLogger(__name__)

CSV_HEADER = ("noise_level", "avg_dist", "mean", "std", "q1", "q2", "q3")


@dataclass(frozen=True)
class ExperimentSpec:
    noise_levels: tuple[int, ...] = (0, 1, 2, 3, 4)
    trials: int = 10
    n_configs: int = 512
    seed: int = 0
    hp: HyperParams = field(default_factory=HyperParams)
    gen: GenParams = field(default_factory=GenParams)
    out: str | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.n_configs < 1:
            raise ValueError("n_configs must be at least 1")
        if any(int(n) < 0 for n in self.noise_levels):
            raise ValueError("noise levels must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_levels"] = list(self.noise_levels)
        d["gen"]["intrinsics"] = asdict(self.gen.intrinsics)
        return d


@dataclass(frozen=True)
class StatRow:
    noise_level: int
    avg_dist: float
    mean: float
    std: float
    q1: float
    q2: float
    q3: float

    def as_tuple(self):
        return (self.noise_level, self.avg_dist, self.mean, self.std, self.q1, self.q2, self.q3)


class TrialError(RuntimeError):
    """A training run inside a sweep failed; carries the trial coordinates."""

    def __init__(self, level, trial, cause):
        super().__init__(f"noise level {level}, trial {trial}: {cause}")
        self.level = level
        self.trial = trial


def summarize(errors) -> tuple[float, float, float, float, float]:
    """Mean, population std and linear-interpolation quartiles."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    q1, q2, q3 = np.percentile(e, [25, 50, 75], method="linear")
    return float(e.mean()), float(e.std()), float(q1), float(q2), float(q3)


def expected_shift_norm(n: int) -> float:
    """Mean Euclidean length of a uniform integer offset in ``[-n..n]^2``."""
    if n < 0:
        raise ValueError("noise level must be non-negative")
    d = np.arange(-n, n + 1, dtype=np.float64)
    return float(np.hypot(d[:, None], d[None, :]).mean())


def avg_deviation(n: int, configs) -> float:
    """Mean scene-space XY displacement of a level-``n`` pixel shift.

    For each point the shifted cell center is unprojected at the point's
    depth and compared with the original center; the average over the noise
    distribution is taken exactly over all ``(2n+1)^2`` offsets.
    """
    total, count = _deviation_sums(n, configs)
    return total / count if count else 0.0


def _deviation_sums(n: int, configs):
    if n < 0:
        raise ValueError("noise level must be non-negative")
    if n == 0:
        return 0.0, 0
    d = np.arange(-n, n + 1, dtype=np.float64)
    du, dv = (x.ravel() for x in np.meshgrid(d, d, indexing="ij"))
    total, count = 0.0, 0
    for cfg in configs:
        K = cfg.intrinsics
        pts = np.asarray(cfg.points)
        if pts.shape[0] == 0:
            continue
        z = pts[:, 2:3]
        # shift of the unprojection is linear in the pixel shift
        dx = dv[None, :] * z / K.fu
        dy = du[None, :] * z / K.fv
        total += np.hypot(dx, dy).mean(axis=1).sum()
        count += pts.shape[0]
    return float(total), count


def trial_seeds(seed: int, trial: int) -> tuple[int, int, int]:
    """Corpus, noise and training seeds of one trial."""
    ss = np.random.SeedSequence([seed, trial])
    a, b, c = ss.generate_state(3, dtype=np.uint32)
    return int(a), int(b), int(c)


def trial_corpus(spec: ExperimentSpec, trial: int) -> list[SceneConfig]:
    corpus_seed, _, _ = trial_seeds(spec.seed, trial)
    return generate_corpus(spec.n_configs, replace(spec.gen, seed=corpus_seed))


def noisy_corpus(corpus, n: int, noise_seed: int) -> list[SceneConfig]:
    return [c.with_target(add_noise(c.target, n, [noise_seed, n, k])) for k, c in enumerate(corpus)]


def run_trial(spec: ExperimentSpec, corpus, level: int, trial: int) -> float:
    _, noise_seed, train_seed = trial_seeds(spec.seed, trial)
    try:
        rep = train(noisy_corpus(corpus, level, noise_seed), spec.hp, seed=train_seed)
    except NumericalError as exc:
        raise TrialError(level, trial, exc) from exc
    return rep.error


def run_noise_sweep(spec: ExperimentSpec, progress=None):
    """Run every (level, trial) pair and return ``(rows, errors)``.

    ``errors[level]`` lists the per-trial final errors.  The CSV is written
    to ``spec.out`` when set.
    """
    levels = [int(n) for n in spec.noise_levels]
    errors = {n: [] for n in levels}
    dev = {n: [0.0, 0] for n in levels}
    for t in range(spec.trials):
        corpus = trial_corpus(spec, t)
        for n in levels:
            tot, cnt = _deviation_sums(n, corpus)
            dev[n][0] += tot
            dev[n][1] += cnt
            err = run_trial(spec, corpus, n, t)
            errors[n].append(err)
            log.info("level %d trial %d error %.6g", n, t, err)
            if progress is not None:
                progress(n, t, err)
    rows = [StatRow(n, dev[n][0] / dev[n][1] if dev[n][1] else 0.0, *summarize(errors[n])) for n in levels]
    if spec.out:
        Path(spec.out).write_text(rows_to_csv(rows))
    return rows, errors


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.noise_level] + [repr(float(v)) for v in r.as_tuple()[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# gradient checks


@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    tol: float
    samples: list = field(default_factory=list, repr=False)
    notes: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tol


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_point(fn, theta, eps: float = 1e-6):
    """Analytic vs central-difference gradient of ``fn(theta) -> (J, grad)``.

    Returns ``(rel_error, analytic, numeric)``, or ``None`` when ``theta``
    sits within ``eps`` of a kink: the loss is piecewise linear, so a
    non-vanishing second difference along either axis marks one.
    """
    theta = np.asarray(theta, dtype=np.float64)
    J0, g = fn(theta)
    num = np.zeros(2)
    for k in range(2):
        e = np.zeros(2)
        e[k] = eps
        Jp, _ = fn(theta + e)
        Jm, _ = fn(theta - e)
        if abs(Jp - 2 * J0 + Jm) > 1e-9 * (1.0 + abs(J0)):
            return None
        num[k] = (Jp - Jm) / (2 * eps)
    return rel_error(g, num), np.asarray(g, dtype=np.float64), num


def gradcheck(config: SceneConfig, n_samples: int = 64, seed: int = 0, s: int = 4, zoom=None,
              radius: float = 0.3, eps: float = 1e-6, tol: float = 1e-4, max_rejections: int = 20,
              metric: str = "l1") -> GradcheckReport:
    """Check pipeline gradients at random ``theta`` around the config's ``theta_star``.

    ``zoom`` fixes the level; by default each sample draws one from
    ``[0, s]``.  Samples landing on a kink are redrawn up to
    ``max_rejections`` times and then skipped with a note.
    """
    rng = np.random.default_rng(seed)
    prep = _Prepared(config, s)
    center = np.asarray(config.theta_star, dtype=np.float64)
    worst, checked, skipped = 0.0, 0, 0
    samples, notes = [], []
    for i in range(n_samples):
        lvl = int(rng.integers(0, s + 1)) if zoom is None else int(zoom)

        def fn(th, lvl=lvl):
            r = prep.run(th, s, lvl, metric)
            return r.loss, r.grad

        res = None
        for _ in range(max_rejections + 1):
            theta = center + rng.uniform(-radius, radius, size=2)
            res = check_point(fn, theta, eps)
            if res is not None:
                break
        if res is None:
            skipped += 1
            notes.append(f"sample {i}: kink after {max_rejections} rejections, skipped")
            continue
        err, g, num = res
        worst = max(worst, err)
        checked += 1
        samples.append((theta, lvl, g, num, err))
    return GradcheckReport(worst, checked, skipped, tol, samples, notes)


# ---------------------------------------------------------------------------
# noise-term statistics


def noise_term_samples(n_trials: int, seed: int = 0, density: float = 0.5, h: int = 3, w: int = 3,
                       K: Intrinsics = DEFAULT_INTRINSICS, z_range=(5.0, 80.0)) -> np.ndarray:
    """Gradient of the noise-target terms for one point against random targets.

    Each trial places a point uniformly inside a random interior cell at a
    random depth and activates every cell of its window independently with
    probability ``density``.  Returns an ``(n_trials, 2)`` array.
    """
    rng = np.random.default_rng(seed)
    rows = rng.integers(h, K.H - h, size=n_trials)
    cols = rng.integers(w, K.W - w, size=n_trials)
    sub = rng.uniform(0, 1, size=(n_trials, 2))
    z = rng.uniform(*z_range, size=n_trials)
    p = unproject_at_depth(rows + sub[:, 0], cols + sub[:, 1], z, K)
    T = _adjustments(rows, cols, z, K, h, w, 0)
    choice = _nearest(p, T)
    win = rng.random((n_trials, h * w)) < density
    # the lookup only needs window-local cells, so each trial gets an h x w grid
    grids = win.reshape(n_trials, h, w).astype(np.float64)
    lr = np.full(n_trials, h // 2)
    lc = np.full(n_trials, w // 2)
    off = kernel_offsets(h, w)
    occupied = np.zeros_like(grids)
    occupied[np.arange(n_trials), h // 2 + off[choice, 0], w // 2 + off[choice, 1]] = 1.0
    keys = np.arange(n_trials)
    designated, noise, matched = _assign(keys, lr, lc, choice, grids, h, w, occupied,
                                         dist=_distances(p, T))
    _, _, _, ng = _loss(p, T, designated, noise, matched, "l1")
    return ng


def noise_term_bound(h: int = 3, w: int = 3) -> float:
    """Per-axis variance bound: at most ``h*w - 2`` terms, each in ``[-1, 1]``."""
    return float((h * w - 2) ** 2)


def single_point_errors(depths=(20.0, 10.0, 5.0, 2.0), n_points: int = 8, seed: int = 0,
                        theta_star=SKY_THETA, hp: HyperParams | None = None,
                        K: Intrinsics = DEFAULT_INTRINSICS) -> np.ndarray:
    """Converged error of one-point configurations, ``(len(depths), n_points)``.

    Every point is trained on its own.  The same screen positions are reused
    at each depth and chosen so that the shifted point stays on screen.
    """
    if hp is None:
        # one point gives a unit-size gradient, so it needs a larger step and
        # a deeper pyramid than a full configuration
        hp = HyperParams(lr=0.1, batch_size=1, n_epoch=700, s=6)
    rng = np.random.default_rng(seed)
    pos = rng.uniform([16, 16], [96, 200], size=(n_points, 2))
    out = np.zeros((len(depths), n_points))
    for d, z in enumerate(depths):
        for k, (r, c) in enumerate(pos):
            p = unproject_at_depth(r, c, float(z), K)[None]
            cfg = SceneConfig(K, p, tuple(theta_star), target_mask(p, theta_star, K), f"point-{k}")
            out[d, k] = train([cfg], hp, seed=seed).error
    return out


__all__ = [
    "CSV_HEADER", "ExperimentSpec", "StatRow", "TrialError", "GradcheckReport", "summarize",
    "expected_shift_norm", "avg_deviation", "trial_seeds", "trial_corpus", "noisy_corpus",
    "run_trial", "run_noise_sweep", "rows_to_csv", "rel_error", "check_point", "gradcheck",
    "noise_term_samples", "noise_term_bound", "single_point_errors", "SKY_THETA",
]
