"""Mini-batch SGD over configurations for the global translation ``(a, b)``."""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dataset import SceneConfig
from .multiscale import pipeline_points, pooled_target

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class HyperParams:
    lr: float = 3e-4
    batch_size: int = 16
    n_epoch: int = 1
    s: int = 4
    zoom_schedule: tuple[int, ...] | None = None
    metric: str = "l1"
    monitor_window: int | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.n_epoch < 0 or self.s < 0:
            raise ValueError("batch_size >= 1, n_epoch >= 0 and s >= 0 required")
        sched = self.schedule()
        if any(not 0 <= z <= self.s for z in sched):
            raise ValueError(f"zoom schedule {sched} leaves [0, {self.s}]")

    def schedule(self) -> tuple[int, ...]:
        """Zoom levels visited in order; the default walks from ``s`` down to 0."""
        if self.zoom_schedule is None:
            return tuple(range(self.s, -1, -1))
        return tuple(self.zoom_schedule)


def zoom_plan(n_steps: int, schedule) -> np.ndarray:
    """Zoom level for each step, splitting the steps evenly across ``schedule``."""
    schedule = np.asarray(schedule, dtype=np.int64)
    if n_steps == 0:
        return np.zeros(0, dtype=np.int64)
    phase = (np.arange(n_steps) * len(schedule)) // n_steps
    return schedule[phase]


@dataclass
class SolverState:
    theta: np.ndarray
    lr: float
    batch_size: int
    epoch: int = 0
    step: int = 0
    zoom: int = 0
    seed: int = 0


class ConvergenceMonitor:
    """Stops once the last ``n`` batches all produced masks inside the target."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("window length must be at least 1")
        self.n = n
        self.window = deque(maxlen=n)

    def update(self, matched: bool) -> str:
        self.window.append(bool(matched))
        return "stop" if self.mismatch_rate() == 0.0 else "continue"

    def mismatch_rate(self) -> float:
        if len(self.window) < self.n:
            return float("nan")
        return 1.0 - sum(self.window) / self.n


def convergence_monitor(monitor: ConvergenceMonitor, matched: bool) -> str:
    return monitor.update(matched)


@dataclass
class TrainReport:
    losses: list[float]
    epoch_losses: list[float]
    theta: np.ndarray
    error: float | None
    seed: int
    trajectory: np.ndarray
    zooms: list[int]
    stopped_early: bool = False
    wall_clock: float = field(default=0.0, compare=False)

    def same_as(self, other: "TrainReport") -> bool:
        return (
            self.losses == other.losses
            and self.epoch_losses == other.epoch_losses
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.trajectory, other.trajectory)
            and self.zooms == other.zooms
        )


class _Prepared:
    """Sparse points and zoomed-out targets of one configuration."""

    __slots__ = ("R", "C", "coords", "info", "targets", "K")

    def __init__(self, cfg: SceneConfig, s: int):
        K = cfg.intrinsics
        buf = cfg.buffer()
        cells, coords, info = buf.fragments()
        self.R, self.C = cells[:, 0], cells[:, 1]
        self.coords, self.info = coords, info
        self.targets = [pooled_target(cfg.target, level) for level in range(s + 1)]
        self.K = K

    def run(self, theta, s, zoom, metric):
        return pipeline_points(self.R, self.C, self.coords, self.info, self.targets, self.K,
                               s, zoom, theta, metric=metric)


def batch_gradient(prepared, theta, s: int, zoom: int, metric: str = "l1"):
    """Summed loss and gradient of a batch, plus whether every config matched."""
    loss = 0.0
    grad = np.zeros(2)
    matched = True
    for p in prepared:
        res = p.run(theta, s, zoom, metric)
        loss += res.loss
        grad += res.grad
        matched &= not res.mismatch
    return loss, grad, matched


def train(configs, hp: HyperParams = HyperParams(), seed: int = 0, theta0=(0.0, 0.0)) -> TrainReport:
    """Estimate the shared translation of ``configs`` with plain SGD.

    Each epoch shuffles the configurations, walks them in mini-batches and
    applies ``theta -= lr * grad`` with the summed batch gradient.  The zoom
    level follows ``hp.schedule()`` over the whole run and the learning rate
    halves at every zoom-in.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("training needs at least one configuration")
    t0 = time.perf_counter()
    prepared = [_Prepared(c, hp.s) for c in configs]
    rng = np.random.default_rng(seed)
    n_batches = -(-len(configs) // hp.batch_size)
    plan = zoom_plan(n_batches * hp.n_epoch, hp.schedule())
    state = SolverState(np.array(theta0, dtype=np.float64), hp.lr, hp.batch_size, seed=seed)
    monitor = ConvergenceMonitor(hp.monitor_window) if hp.monitor_window else None

    losses, epoch_losses, traj, zooms = [], [], [state.theta.copy()], []
    stopped = False
    for epoch in range(hp.n_epoch):
        state.epoch = epoch
        order = rng.permutation(len(configs))
        ep = []
        for b in range(n_batches):
            zoom = int(plan[state.step])
            if state.step > 0 and zoom < state.zoom:
                state.lr *= 0.5 ** (state.zoom - zoom)
            state.zoom = zoom
            batch = [prepared[i] for i in order[b * hp.batch_size:(b + 1) * hp.batch_size]]
            loss, grad, matched = batch_gradient(batch, state.theta, hp.s, zoom, hp.metric)
            if not np.all(np.isfinite(grad)) or not np.isfinite(loss):
                raise NumericalError(f"non-finite gradient at epoch {epoch}, batch {b}: {grad}")
            state.theta = state.theta - state.lr * grad
            state.step += 1
            losses.append(loss)
            ep.append(loss)
            zooms.append(zoom)
            traj.append(state.theta.copy())
            log.debug("step %d zoom %d loss %.4f theta %s", state.step, zoom, loss, state.theta)
            if monitor is not None and monitor.update(matched) == "stop":
                stopped = True
                break
        epoch_losses.append(float(np.mean(ep)) if ep else 0.0)
        if stopped:
            break

    thetas = {tuple(c.theta_star) for c in configs}
    error = None
    if len(thetas) == 1:
        error = float(np.hypot(*(state.theta - np.array(thetas.pop()))))
    return TrainReport(losses, epoch_losses, state.theta, error, seed, np.array(traj), zooms,
                       stopped, time.perf_counter() - t0)
