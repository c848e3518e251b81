"""A small noise sweep; raise trials and n_configs for the full protocol."""

from sdm.evaluation import ExperimentSpec, rows_to_csv, run_noise_sweep

spec = ExperimentSpec(noise_levels=(0, 1, 2, 3, 4), trials=3, n_configs=256)
rows, errors = run_noise_sweep(spec, progress=lambda n, t, e: print(f"level {n} trial {t}: {e:.4f}"))
print()
print(rows_to_csv(rows))
bound = rows[1].avg_dist / 6
share = sum(e < bound for e in errors[4]) / len(errors[4])
print(f"level-4 errors below avg_dist(1)/6 = {bound:.4f}: {share:.0%}")
