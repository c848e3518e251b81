"""Synthetic Sky-style configurations.

A configuration is a point set ``Q``, the intrinsics, a hidden translation
``theta_star`` and the binary target mask rendered from ``Q + theta_star``.
Point sets are grown from a handful of object centers: each center is
rendered with its depth as rendering information, every active cell is
inflated into a disk, and one point per resulting cell is reconstructed at
the cell center.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DEFAULT_INTRINSICS, Intrinsics, unproject_at_depth
from .representation import FragmentBuffer, binary_mask, render

SKY_THETA = (0.517, 0.303)
MAGIC = "SKYCFG1"


class GenerationError(RuntimeError):
    pass


class ConfigParseError(ValueError):
    def __init__(self, msg, line=None, path=None):
        where = f"{path or '<config>'}:{line}" if line is not None else str(path or "<config>")
        super().__init__(f"{where}: {msg}")
        self.line = line


class ConfigValidationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GenParams:
    """Generator settings.  The object count is drawn uniformly from
    ``[min_objects, max_objects]`` for every configuration."""

    min_objects: int = 3
    max_objects: int = 12
    z_lo: float = 5.0
    z_hi: float = 80.0
    tau: float = 0.25
    sigma: float = 3.0
    seed: int = 0
    theta_star: tuple[float, float] = SKY_THETA
    intrinsics: Intrinsics = DEFAULT_INTRINSICS
    margin: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 < self.z_lo <= self.z_hi:
            raise ValueError("need 0 < z_lo <= z_hi")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass(eq=False)
class SceneConfig:
    intrinsics: Intrinsics
    points: np.ndarray
    theta_star: tuple[float, float]
    target: np.ndarray
    id: str = "config"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __eq__(self, other):
        if not isinstance(other, SceneConfig):
            return NotImplemented
        return (
            self.id == other.id
            and self.intrinsics == other.intrinsics
            and tuple(self.theta_star) == tuple(other.theta_star)
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.target, other.target)
        )

    def buffer(self) -> FragmentBuffer:
        """Proper buffer of ``Q`` with depth as rendering information."""
        return FragmentBuffer.from_fragments((self.points, self.points[:, 2]), self.intrinsics)

    def with_target(self, target) -> "SceneConfig":
        return SceneConfig(self.intrinsics, self.points, self.theta_star, np.asarray(target, dtype=np.float64), self.id)


def circle_offsets(tau: float = 0.25, sigma: float = 3.0) -> np.ndarray:
    """Integer offsets ``(du, dv)`` with ``exp(-|d| / sigma) >= tau``."""
    r = int(math.ceil(-sigma * math.log(tau))) + 1
    du, dv = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    keep = np.exp(-np.sqrt(du**2 + dv**2) / sigma) >= tau
    return np.stack([du[keep], dv[keep]], axis=-1)


def draw_circles(E, tau: float = 0.25, sigma: float = 3.0) -> np.ndarray:
    """Inflate every active cell of ``E`` into a disk; overlaps keep the smaller value."""
    E = np.asarray(E, dtype=np.float64)
    H, W = E.shape
    out = np.zeros_like(E)
    off = circle_offsets(tau, sigma)
    for u, v in np.argwhere(E > 0):
        rr, cc = u + off[:, 0], v + off[:, 1]
        ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        rr, cc = rr[ok], cc[ok]
        cur = out[rr, cc]
        val = E[u, v]
        out[rr, cc] = np.where((cur == 0) | (cur > val), val, cur)
    return out


def reconstruct_points(e_prime, K: Intrinsics) -> np.ndarray:
    """One point per active cell, unprojected at the cell center at its stored depth."""
    e_prime = np.asarray(e_prime, dtype=np.float64)
    cells = np.argwhere(e_prime > 0)
    if cells.shape[0] == 0:
        return np.zeros((0, 3))
    z = e_prime[cells[:, 0], cells[:, 1]]
    return unproject_at_depth(cells[:, 0] + 0.5, cells[:, 1] + 0.5, z, K)


def target_mask(points, theta, K: Intrinsics) -> np.ndarray:
    """Binary mask of the render of ``points + (a, b, 0)`` with unit info."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    shifted = points + np.array([theta[0], theta[1], 0.0])
    return binary_mask(render((shifted, np.ones(points.shape[0])), K))


def sample_centers(rng, m: int, params: GenParams) -> np.ndarray:
    K = params.intrinsics
    g = params.margin
    if K.H - 2 * g < 1 or K.W - 2 * g < 1:
        raise GenerationError(f"margin {g} leaves no room on a {K.H}x{K.W} screen")
    centers = []
    for _ in range(m):
        for _ in range(params.max_retries):
            row = rng.uniform(0, K.H)
            col = rng.uniform(0, K.W)
            if g <= row < K.H - g and g <= col < K.W - g:
                break
        else:
            raise GenerationError(f"could not place an object center in {params.max_retries} tries")
        z = rng.uniform(params.z_lo, params.z_hi)
        centers.append(unproject_at_depth(row, col, z, K))
    return np.array(centers).reshape(-1, 3)


def build_config(centers, params: GenParams, id: str = "config") -> SceneConfig:
    """Deterministic part of generation from explicit 3D object centers."""
    K = params.intrinsics
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    E = render((centers, centers[:, 2]), K)
    e_prime = draw_circles(E, params.tau, params.sigma)
    Q = reconstruct_points(e_prime, K)
    L = target_mask(Q, params.theta_star, K)
    return SceneConfig(K, Q, tuple(params.theta_star), L, id)


def generate_config(params: GenParams, index: int = 0) -> SceneConfig:
    """Configuration number ``index`` of the corpus seeded by ``params.seed``."""
    rng = np.random.default_rng([params.seed, index])
    m = int(rng.integers(params.min_objects, params.max_objects + 1))
    centers = sample_centers(rng, m, params)
    return build_config(centers, params, id=f"sky-{params.seed}-{index:05d}")


def generate_corpus(count: int, params: GenParams) -> list[SceneConfig]:
    return [generate_config(params, k) for k in range(count)]


def add_noise(target, n: int, seed) -> np.ndarray:
    """Move every active cell by an independent uniform offset in ``[-n..n]^2``.

    Offsets leaving the screen are clipped to the border; collisions merge.
    """
    if n < 0:
        raise ValueError("noise level must be non-negative")
    target = np.asarray(target, dtype=np.float64)
    if n == 0:
        return target.copy()
    rng = np.random.default_rng(seed)
    cells = np.argwhere(target > 0)
    shift = rng.integers(-n, n + 1, size=cells.shape)
    moved = cells + shift
    moved[:, 0] = np.clip(moved[:, 0], 0, target.shape[0] - 1)
    moved[:, 1] = np.clip(moved[:, 1], 0, target.shape[1] - 1)
    out = np.zeros_like(target)
    out[moved[:, 0], moved[:, 1]] = 1.0
    return out


# ---------------------------------------------------------------------------
# SKYCFG1 text format


def _rle(row) -> str:
    runs = []
    cur, count = 0, 0
    for v in row:
        v = 1 if v > 0 else 0
        if v == cur:
            count += 1
        else:
            runs.append(count)
            cur, count = v, 1
    runs.append(count)
    return " ".join(map(str, runs))


def dumps_config(cfg: SceneConfig) -> str:
    K = cfg.intrinsics
    lines = [
        MAGIC,
        f"id {cfg.id}",
        f"size {K.H} {K.W}",
        f"intrinsics {K.fu!r} {K.fv!r} {K.ou!r} {K.ov!r}",
        f"theta {float(cfg.theta_star[0])!r} {float(cfg.theta_star[1])!r}",
        f"points {cfg.points.shape[0]}",
    ]
    lines += [f"P {x!r} {y!r} {z!r}" for x, y, z in cfg.points.tolist()]
    lines.append(f"mask {K.H}")
    lines += ["R " + _rle(row) for row in cfg.target]
    return "\n".join(lines) + "\n"


def save_config(cfg: SceneConfig, path) -> Path:
    path = Path(path)
    path.write_text(dumps_config(cfg))
    return path


def _fields(line, lineno, key, n, path):
    parts = line.split()
    if not parts or parts[0] != key:
        raise ConfigParseError(f"expected '{key}' record, got {line[:40]!r}", lineno, path)
    if n is not None and len(parts) != n + 1:
        raise ConfigParseError(f"'{key}' record needs {n} fields, got {len(parts) - 1}", lineno, path)
    return parts[1:]


def loads_config(text: str, path=None, validate: bool = True) -> SceneConfig:
    lines = text.splitlines()
    it = iter(enumerate(lines, start=1))

    def nxt():
        try:
            return next(it)
        except StopIteration:
            raise ConfigParseError("unexpected end of file", len(lines), path) from None

    try:
        no, line = nxt()
        if line.strip() != MAGIC:
            raise ConfigParseError(f"bad magic {line[:16]!r}, expected {MAGIC}", no, path)
        no, line = nxt()
        (cid,) = _fields(line, no, "id", 1, path)
        no, line = nxt()
        H, W = map(int, _fields(line, no, "size", 2, path))
        no, line = nxt()
        fu, fv, ou, ov = map(float, _fields(line, no, "intrinsics", 4, path))
        K = Intrinsics(fu, fv, ou, ov, H, W)
        no, line = nxt()
        a, b = map(float, _fields(line, no, "theta", 2, path))
        no, line = nxt()
        (npts,) = map(int, _fields(line, no, "points", 1, path))
        pts = np.zeros((npts, 3))
        for k in range(npts):
            no, line = nxt()
            pts[k] = [float(v) for v in _fields(line, no, "P", 3, path)]
        no, line = nxt()
        (nrows,) = map(int, _fields(line, no, "mask", 1, path))
        if nrows != H:
            raise ConfigParseError(f"mask declares {nrows} rows but size is {H}x{W}", no, path)
        mask = np.zeros((H, W))
        for r in range(H):
            no, line = nxt()
            runs = [int(v) for v in _fields(line, no, "R", None, path)]
            if any(v < 0 for v in runs) or sum(runs) != W:
                raise ConfigParseError(f"mask row {r} covers {sum(runs)} cells, expected {W}", no, path)
            pos, val = 0, 0.0
            for v in runs:
                mask[r, pos:pos + v] = val
                pos += v
                val = 1.0 - val
    except ValueError as exc:
        if isinstance(exc, ConfigParseError):
            raise
        raise ConfigParseError(str(exc), no, path) from exc
    for extra_no, extra in it:
        if extra.strip():
            raise ConfigParseError("trailing data after mask", extra_no, path)

    cfg = SceneConfig(K, pts, (a, b), mask, cid)
    if validate:
        expected = target_mask(pts, (a, b), K) if npts else np.zeros((H, W))
        if not np.array_equal(expected, mask):
            n_bad = int((expected != mask).sum())
            warnings.warn(
                f"{path or cid}: target mask disagrees with the render of points + theta in {n_bad} cells",
                ConfigValidationWarning,
                stacklevel=2,
            )
    return cfg


def load_config(path, validate: bool = True) -> SceneConfig:
    path = Path(path)
    return loads_config(path.read_text(), path=path, validate=validate)
