"""
Training on the synthetic set
=============================

Generates a reduced copy of the synthetic dataset, trains the dual-branch
model and the frame-only variant for a few epochs and compares them.
Pass ``--full`` for the 200/100 per-category set and 8 epochs (about five
minutes per model on one core).
"""

# %%
import sys
import tempfile
import time

import numpy as np

from evmamba.config import Config, DataConfig
from evmamba.harness import evaluate, generate_dataset, load_split, train

full = "--full" in sys.argv
root = tempfile.mkdtemp(prefix="evmamba_demo_")
data_cfg = DataConfig() if full else DataConfig(train_per_category=60, test_per_category=30)
t = time.perf_counter()
n = generate_dataset(data_cfg, root)
print(f"{n} samples under {root} in {time.perf_counter() - t:.1f}s")

# %% [markdown]
# Featurize once; both variants read the same frames and tokens.

# %%
cfg = Config()
data = load_split(root, "train", cfg.model) + load_split(root, "test", cfg.model)
print("frames", data[0][0].frames.shape, "tokens", data[0][0].tokens.shape)

# %%
results = {}
for rep in ("both", "frame"):
    c = Config()
    c.model.representation = rep
    c.train.epochs = 8 if full else 4
    print(f"-- representation={rep}")
    history, model = train(c, root, data=data, on_epoch=lambda r: print(
        f"epoch {r['epoch']}  loss {r['mean_loss']:.3f}  top-1 {r['test_top1']:.3f}"
        f"  ({r['seconds']:.0f}s)"))
    results[rep] = evaluate(model, data[2], data[3])

# %%
for rep, report in results.items():
    print(rep, "top-1", round(report.top1, 3), "top-5", round(report.top5, 3))
    print(np.array(report.confusion))
