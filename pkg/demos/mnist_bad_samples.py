"""
Bad samples on MNIST
====================

Trains the reduced network (784-256-128-10) with 100 labels and writes a
10x10 PGM grid of kept bad samples, the analogue of looking at the images a
generator would have produced. Needs the four MNIST IDX files:

    FATSSL_DATA_DIR=/path/to/mnist python demos/mnist_bad_samples.py [epochs]
"""

import sys
from pathlib import Path

import numpy as np

from fatssl import cli
from fatssl.badgen import generate_bad_samples, write_pgm_grid
from fatssl.data import mnist_dir
from fatssl.trainer import evaluate, train

if mnist_dir() is None:
    sys.exit("set FATSSL_DATA_DIR to the directory holding the MNIST IDX files")

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
settings = cli.resolve_settings(overrides={"dataset": "mnist", "epochs": epochs})
data = cli.load_dataset(settings)
cfg = cli.fat_config(settings, data.diameter())
result = train(cfg, data, on_epoch_end=lambda e, m, met: print(f"epoch {e} test {met.test_acc:.4f}"))
print("best-validation test accuracy", evaluate(result.best_model, data.test_X, data.test_y))

# %%
# Bad samples for the first thousand unlabeled images.
batch = generate_bad_samples(result.last_model, data.unlabeled_X[:1000], cfg.vat_hyper,
                             cfg.badgen_hyper, np.random.default_rng(0))
out = Path("mnist_bad_samples.pgm")
n = write_pgm_grid(batch.kept_points, out)
print(f"{batch.kept.mean():.2f} of candidates kept; {n} tiles written to {out}")
