"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-3 share a single noise sweep (10 trials of 512 configurations at
noise levels 0..4); it takes a few minutes.
"""

import json

import numpy as np
import pytest

from conftest import displaced_buffer
from sdm.cli import main as cli_main
from sdm.core import forward
from sdm.dataset import SKY_THETA, GenParams, generate_config
from sdm.evaluation import (
    ExperimentSpec,
    gradcheck,
    noise_term_bound,
    noise_term_samples,
    run_noise_sweep,
    single_point_errors,
)
from sdm.geometry import DEFAULT_INTRINSICS as K
from sdm.multiscale import reshape_down, reshape_up
from sdm.optimizer import HyperParams
from sdm.representation import binary_mask, render


def verdict(capsys, number, name, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


@pytest.fixture(scope="module")
def sweep():
    spec = ExperimentSpec(noise_levels=(0, 1, 2, 3, 4), trials=10, n_configs=512, seed=0,
                          hp=HyperParams(lr=3e-4, batch_size=16, n_epoch=1, s=4),
                          gen=GenParams(theta_star=SKY_THETA))
    rows, errors = run_noise_sweep(spec)
    return {r.noise_level: r for r in rows}, errors


def test_c01_noise_free_accuracy(sweep, capsys):
    rows, errors = sweep
    e = np.array(errors[0])
    ok = bool(np.all(e < 5e-3) and e.mean() < 2e-3)
    assert verdict(capsys, 1, "noise-free accuracy", ok,
                   f"max {e.max():.3e} (< 5e-3), mean {e.mean():.3e} (< 2e-3) over {e.size} runs")


def test_c02_robustness_ordering(sweep, capsys):
    rows, _ = sweep
    means = [rows[n].mean for n in range(5)]
    ok = all(a < b for a, b in zip(means, means[1:]))
    assert verdict(capsys, 2, "robustness ordering", ok, "means " + ", ".join(f"{m:.4e}" for m in means))


def test_c03_sixth_of_deviation(sweep, capsys):
    rows, errors = sweep
    bound = rows[1].avg_dist / 6
    e = np.array(errors[4])
    frac = float(np.mean(e < bound))
    ok = frac >= 0.75
    assert verdict(capsys, 3, "sixth-of-deviation bound", ok,
                   f"{frac:.0%} of level-4 errors below {bound:.5f} (avg dev level 1 = {rows[1].avg_dist:.4f})")


def test_c04_forward_oracle(capsys):
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(1000):
        buf, (pts, info) = displaced_buffer(rng, int(rng.integers(1, 300)))
        bad += not np.array_equal(binary_mask(forward(buf, K).rep), binary_mask(render((pts, info), K)))
    assert verdict(capsys, 4, "forward oracle equivalence", bad == 0, f"{bad} mismatching buffers of 1000")


def test_c05_soft_to_hard(capsys):
    rng = np.random.default_rng(5)
    gap = 0.0
    for _ in range(100):
        # points at least a quarter pixel inside their cells keep the argmax stable
        buf, _ = displaced_buffer(rng, int(rng.integers(1, 300)), margin=0.25, z=(20.0, 80.0))
        gap = max(gap, float(np.abs(forward(buf, K, 1000.0).rep - forward(buf, K).rep).max()))
    assert verdict(capsys, 5, "soft-to-hard convergence", gap < 1e-6, f"max gap {gap:.3e} at c=1000")


def test_c06_gradient_correctness(capsys):
    rep = gradcheck(generate_config(GenParams(seed=6)), n_samples=64, seed=6)
    ok = rep.passed and rep.n_checked == 64
    assert verdict(capsys, 6, "gradient correctness", ok,
                   f"max rel error {rep.max_rel_error:.3e} over {rep.n_checked} kink-free samples")


def test_c07_zero_expectation_noise(capsys):
    g = noise_term_samples(10_000, seed=7)
    mean = g.mean(axis=0)
    se = g.std(axis=0, ddof=1) / np.sqrt(g.shape[0])
    var = g.var(axis=0, ddof=1)
    ok = bool(np.all(np.abs(mean) < 3 * se) and np.all(var < noise_term_bound()))
    assert verdict(capsys, 7, "zero-expectation noise term", ok,
                   f"mean {np.round(mean, 4)} (3 SE {np.round(3 * se, 4)}), var {np.round(var, 3)} < {noise_term_bound()}")


def test_c08_reshape_round_trip(capsys):
    rng = np.random.default_rng(8)
    ok = True
    for _ in range(100):
        h, w = 2 * rng.integers(1, 65, size=2)
        X = rng.normal(size=(int(rng.integers(1, 4)), h, w))
        ok &= np.array_equal(reshape_up(reshape_down(X)), X)
    g = np.zeros((1, 128, 256))
    for _ in range(4):
        g = reshape_down(g)
    ok &= g.shape == (256, 8, 16)
    assert verdict(capsys, 8, "reshape round trip", bool(ok), f"100 grids bitwise, s=4 gives {g.shape}")


def test_c09_lemma_trend(capsys):
    depths = (20.0, 10.0, 5.0, 2.0)
    errs = single_point_errors(depths, n_points=8, seed=9).mean(axis=1)
    ok = all(b <= a for a, b in zip(errs, errs[1:]))
    assert verdict(capsys, 9, "depth trend of single-point error", ok,
                   ", ".join(f"z={z:g}: {e:.4f}" for z, e in zip(depths, errs)))


def test_c10_determinism(tmp_path, capsys):
    d = tmp_path
    spec = d / "spec.json"
    spec.write_text(json.dumps({"noise_levels": [0, 2], "trials": 2, "n_configs": 16, "seed": 3,
                                "out": str(d / "stats.csv")}))
    commands = [
        ["generate", "--count", "16", "--seed", "3", "--out", str(d / "data")],
        ["train", "--data", str(d / "data"), "--noise", "1", "--seed", "2", "--report", str(d / "train.txt")],
        ["eval", "--spec", str(spec)],
        ["gradcheck", "--data", str(d / "data"), "--samples", "8", "--report", str(d / "grad.txt")],
    ]

    def run_all():
        codes = [cli_main(c) for c in commands]
        files = {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}
        return codes, files

    codes_a, a = run_all()
    codes_b, b = run_all()
    ok = codes_a == codes_b == [0, 0, 0, 0] and a == b
    assert verdict(capsys, 10, "determinism", ok, f"{len(a)} output files compared bytewise after a re-run")
