"""Train the toy model briefly and roll it out past one window.

A short run (default 300 steps, about a minute) is enough to see the
validation loss fall and the drift table fill in. Use --steps 2000 for the
full default schedule.

    python3 demos/train_and_roll.py --steps 300 --frames 64
"""

import argparse

import numpy as np

from lff.config import ExperimentConfig, apply_override
from lff.dit import Model
from lff.data import decode
from lff.metrics import sync_proxy
from lff.pipeline import rollout
from lff.train import train_loop

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=300)
ap.add_argument("--frames", type=int, default=64)
ap.add_argument("--sample-steps", type=int, default=20)
args = ap.parse_args()

cfg = ExperimentConfig()
for kv in (f"train.steps={args.steps}", f"train.val_every={max(args.steps // 3, 1)}",
           f"window.total={args.frames}", f"sampler.steps={args.sample_steps}"):
    apply_override(cfg, kv)

res = train_loop(cfg)
print(f"trained {res.state.step} steps in {res.seconds:.0f}s")
for step, mse in res.validation:
    print(f"  step {step:5d}  val mse {mse:.4f}")

model = Model(res.state.params, cfg.model_config())
for mode in ("off", "native"):
    r = rollout(model, cfg, seed=0, guidance=mode)
    sync = sync_proxy(r.scene.amplitude, decode(r.latents), r.scene.lip_mask)
    print(f"\nguidance {mode}: sync proxy {sync:+.3f}")
    print("clip  mean_shift  ciede")
    for c in r.report.records:
        print(f"{c.clip:4d}  {c.mean_shift:10.4f}  {c.ciede:5.2f}")
