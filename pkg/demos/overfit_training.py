"""Overfit 64 synthetic images with the desk-scale model.

Run: python3 demos/overfit_training.py [out_dir]
"""

import sys

from moa.data import synth_dataset
from moa.model import desk_config
from moa.training import Recipe, train

out = sys.argv[1] if len(sys.argv) > 1 else "runs/overfit"
data = synth_dataset(4, 16, 16, 16, seed=0)
recipe = Recipe(epochs=30, batch_size=16, lr=0.003, warmup_epochs=2, seed=42)
result = train(desk_config(), data, recipe, out_dir=out)
for line in result.log_lines:
    print(line)
print(f"{result.steps} steps; checkpoint and metrics in {out}")
