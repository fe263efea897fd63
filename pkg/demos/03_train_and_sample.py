"""Train a small baseline diffusion model on checkerboard data and draw
samples from it.

This is a scaled-down version of the reference configuration (the full one
uses hidden width 256, 30k iterations, and full-batch training on 1000
points).  Expect a visibly checkerboard-like sample cloud with a nontrivial
infraction rate: the baseline alone does not know where the cell boundaries
are.
"""

import time

import numpy as np

from genneg.diffusion import NoiseSchedule, TrainConfig, elbo, train_baseline
from genneg.guidance import GuidedModel
from genneg.oracles import (Checkerboard, evaluate, infraction_rate,
                            make_checkerboard_dataset)
from genneg.plots import scatter_svg

board = Checkerboard()
train = make_checkerboard_dataset(1000, seed=0)
val = make_checkerboard_dataset(1000, seed=1)
schedule = NoiseSchedule()

config = TrainConfig(iterations=1500, batch_size=1000, learning_rate=3e-4,
                     val_cadence=500, val_draws=8, seed=0)
t0 = time.perf_counter()
model = train_baseline(train, val, schedule, config, hidden=128, t_dim=64,
                       on_log=lambda row: print("  ", row))
print(f"trained in {time.perf_counter() - t0:.0f}s")

sampler = GuidedModel(baseline=model)
samples = sampler.sample(20_000, seed=2, steps=100)
rate, stderr = infraction_rate(samples, board)
print(f"baseline infraction: {rate:.4f} +- {stderr:.4f}")

relbo, relbo_se = elbo(sampler.score_fn(), val, schedule, weighting="uniform",
                       mc_draws=32, seed=3)
print(f"validation bound (uniform weighting): {relbo:.3f} +- {relbo_se:.3f}")

bad = evaluate(board, samples[:2000]) == 0
scatter_svg("baseline_samples.svg", samples[:2000], bad,
            title="baseline samples (violations in brown)")
print("wrote baseline_samples.svg")
