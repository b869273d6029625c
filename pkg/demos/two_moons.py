"""
VAT and FAT on two moons
========================

A thousand unlabeled points, four labels per class, a 100-100 ReLU network.
Both methods end up separating the moons; FAT usually gets there in fewer
epochs because its bad samples push the boundary out of the dense regions
early. Run from the repository root:

    python demos/two_moons.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from fatssl import cli
from fatssl.badgen import generate_bad_samples, write_bad_csv
from fatssl.data import export_csv
from fatssl.trainer import epochs_to_reach, train, write_metrics_csv

out = Path(sys.argv[1] if len(sys.argv) > 1 else "two_moons_out")
out.mkdir(exist_ok=True)

# the CLI defaults are the settings used for the synthetic acceptance run
settings = cli.resolve_settings(overrides={"seed": 0})
data = cli.load_dataset(settings)
export_csv(data, out / "data.csv")
print(data.description)

# %%
# Train both methods on the same data and seed.
results = {}
for method in ("vat", "fat"):
    cfg = cli.fat_config(dict(settings, method=method), data.diameter())
    results[method] = train(cfg, data)
    write_metrics_csv(results[method].metrics, out / f"metrics_{method}.csv")
    trace = [m.test_acc for m in results[method].metrics]
    print(f"{method}: final unlabeled accuracy {trace[-1]:.3f}, "
          f"epochs to 0.95: {epochs_to_reach(results[method].metrics, 0.95)}")

# %%
# Where do the bad samples sit? Dump them for the final FAT model; the CSV
# plots directly (origin columns against point columns, coloured by kept).
cfg = cli.fat_config(dict(settings, method="fat"), data.diameter())
batch = generate_bad_samples(results["fat"].last_model, data.unlabeled_X, cfg.vat_hyper,
                             cfg.badgen_hyper, np.random.default_rng(0))
write_bad_csv(batch, out / "bad_samples_final.csv")
print(f"kept {batch.kept.sum()} of {len(batch)} candidates; files in {out}/")
