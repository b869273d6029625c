"""
Adversarial directions and the decision boundary
================================================

Three checks, each against an oracle that does not share code with the
power iteration:

1. on a logistic model the adversarial direction is the normal of the
   boundary, pointing toward it, so a small step shrinks the distance;
2. on a small trained 2D network the one-step direction nearly maximizes
   the KL over a 720-direction grid;
3. points of a trained ReLU network are "normal": walking down the score
   gradient reaches the boundary.
"""

import numpy as np

from fatssl.geometry import (LinearLogistic, grid_direction_oracle, invariance_measure,
                             logistic_adv_direction_closed_form, normal_region_check, prop2_check)
from fatssl.vat import VatHyper, adversarial_directions
from fatssl.verify import trained_2d_models

rng = np.random.default_rng(0)

# %%
# A logistic model in five dimensions.
m = LinearLogistic(rng.normal(size=5), 0.4)
X = rng.normal(size=(500, 5))
eps = 0.1 * np.abs(m.margin(X)) / np.linalg.norm(m.w)
report = prop2_check(m, X, eps)
closed = np.array([logistic_adv_direction_closed_form(m, x) for x in X])
print("linear: fraction of samples moved closer to the boundary", report.fraction_decreased)
print("linear: worst cosine distance to the closed form", float(np.max(1 - (report.directions * closed).sum(1))))

# %%
# A trained 2D network (two moons) against the brute-force grid.
model, data = trained_2d_models(2, seed=0)[1]
probes = data.unlabeled_X[:50]
adv = adversarial_directions(model, probes, VatHyper(0.05, 1e-6, 1), rng)
ratios = np.array([adv.kl_values[i] / max(grid_direction_oracle(model, x, 0.05)[1], 1e-300)
                   for i, x in enumerate(probes)])
print(f"moons net: median KL ratio to grid maximum {np.median(ratios):.3f}, "
      f"{np.mean(ratios >= 0.9):.2f} of probes above 0.9")

# %%
# Normal points and the invariance measure, which grows with the radius.
pts = rng.uniform(-1.5, 2.5, size=(200, 2))
flags = [normal_region_check(model, x, max_ray=10.0) for x in pts]
print("moons net: fraction of normal points", np.mean([f for f in flags if f is not None]))
for e in (0.05, 0.1, 0.2, 0.4):
    print(f"  invariance measure at eps={e}: {invariance_measure(model, data.unlabeled_X[:200], e, resolution=0.01):.3f}")
