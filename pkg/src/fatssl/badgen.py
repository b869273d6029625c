"""Bad samples along adversarial directions, plus the true/fake losses.

The fake class is an implicit (K+1)-th logit pinned at zero, so a K-output
network doubles as a (K+1)-class discriminator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ConfigurationError, MlpModel, ShapeError, backprop, forward, softmax
from .vat import AdvBatch, VatHyper, adversarial_directions


@dataclass(frozen=True)
class BadGenHyper:
    capital_c: float = 2.0
    alpha: float = 0.01

    def __post_init__(self):
        if not self.capital_c > 0:
            raise ConfigurationError(f"capital_c must be > 0, got {self.capital_c}")
        if not 0 < self.alpha <= 1:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")


@dataclass
class BadSample:
    origin: np.ndarray
    point: np.ndarray
    confidence: float
    kept: bool
    reason: str = ""  # "degenerate" when no direction could be found


@dataclass
class BadBatch:
    origins: np.ndarray
    points: np.ndarray
    confidence: np.ndarray
    kept: np.ndarray
    degenerate: np.ndarray

    @property
    def kept_points(self) -> np.ndarray:
        return self.points[self.kept]

    def __len__(self):
        return len(self.points)

    def samples(self) -> list[BadSample]:
        return [
            BadSample(o, p, float(c), bool(k), "degenerate" if dg else "")
            for o, p, c, k, dg in zip(self.origins, self.points, self.confidence, self.kept,
                                      self.degenerate)
        ]


def keep_mask(confidence, alpha) -> np.ndarray:
    # a candidate is dropped when its top-class probability exceeds 1 - alpha
    return np.asarray(confidence) <= 1.0 - alpha


def place_bad_samples(model_snapshot: MlpModel, X, adv: AdvBatch, hyper: BadGenHyper) -> BadBatch:
    """Push each row of ``X`` a distance C along its adversarial direction and filter."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    points = X + hyper.capital_c * adv.directions
    confidence = softmax(forward(model_snapshot, points, "eval")[0]).max(axis=1)
    kept = keep_mask(confidence, hyper.alpha) & ~adv.degenerate
    return BadBatch(X, points, confidence, kept, adv.degenerate.copy())


def generate_bad_samples(model_snapshot: MlpModel, X, vat_hyper: VatHyper,
                         badgen_hyper: BadGenHyper, rng) -> BadBatch:
    adv = adversarial_directions(model_snapshot, X, vat_hyper, rng)
    return place_bad_samples(model_snapshot, X, adv, badgen_hyper)


def generate_bad_sample(model_snapshot: MlpModel, x, vat_hyper: VatHyper,
                        badgen_hyper: BadGenHyper, seed=0) -> BadSample:
    x = np.asarray(x, dtype=np.float64)
    batch = generate_bad_samples(model_snapshot, x[None, :], vat_hyper, badgen_hyper,
                                 np.random.default_rng(seed))
    return batch.samples()[0]


def _augmented_logsumexp(g):
    """log(1 + sum_k exp(g_k)) row-wise, overflow-safe."""
    m = np.maximum(g.max(axis=1, keepdims=True), 0.0)
    return (m + np.log(np.exp(-m) + np.exp(g - m).sum(axis=1, keepdims=True)))[:, 0]


def l_fake_rows(g):
    """Per-row ln(1 + sum exp g) and its gradient (the real-class probabilities)."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    lse = _augmented_logsumexp(g)
    return lse, np.exp(g - lse[:, None])


def l_true_rows(g):
    """Per-row entropy over the real classes of the (K+1)-way softmax, with gradient."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    lse = _augmented_logsumexp(g)
    logq = g - lse[:, None]
    q = np.exp(logq)
    value = -(q * logq).sum(axis=1)
    q_fake = np.exp(-lse)[:, None]
    grad = -q * (logq + value[:, None] + q_fake)
    return value, grad


def l_true(g):
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise ShapeError("l_true takes a single pre-softmax vector")
    value, grad = l_true_rows(g[None, :])
    return float(value[0]), grad[0]


def l_fake(g):
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise ShapeError("l_fake takes a single pre-softmax vector")
    value, grad = l_fake_rows(g[None, :])
    return float(value[0]), grad[0]


def true_term(model: MlpModel, X):
    """Mean l_true over clean unlabeled rows and its parameter gradient."""
    z, cache = forward(model, X, "eval")
    value, grad = l_true_rows(z)
    n = len(value)
    grads, _ = backprop(model, cache, grad / n)
    return float(value.mean()), grads


def fake_term(model: MlpModel, points):
    """Mean l_fake over kept bad samples; ``(0.0, None)`` when there are none."""
    if len(points) == 0:
        return 0.0, None
    z, cache = forward(model, points, "eval")
    value, grad = l_fake_rows(z)
    n = len(value)
    grads, _ = backprop(model, cache, grad / n)
    return float(value.mean()), grads


def write_bad_csv(batch: BadBatch, path) -> None:
    d = batch.origins.shape[1]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"origin{i + 1}" for i in range(d)] + [f"point{i + 1}" for i in range(d)]
                   + ["confidence", "kept"])
        for o, p, c, k in zip(batch.origins, batch.points, batch.confidence, batch.kept):
            w.writerow([repr(float(v)) for v in o] + [repr(float(v)) for v in p]
                       + [repr(float(c)), int(k)])


def write_pgm_grid(images, path, side=28, grid=10) -> int:
    """Tile up to grid*grid square images (flattened, roughly [0,1]) into one binary PGM.

    Returns the number of tiles drawn.
    """
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))[: grid * grid]
    if images.shape[1] != side * side and len(images):
        raise ShapeError(f"expected {side * side}-pixel images, got {images.shape[1]}")
    canvas = np.zeros((grid * side, grid * side), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, grid)
        tile = np.clip(img.reshape(side, side), 0.0, 1.0)
        canvas[r * side:(r + 1) * side, c * side:(c + 1) * side] = np.round(tile * 255)
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii"))
        fh.write(canvas.tobytes())
    return len(images)
