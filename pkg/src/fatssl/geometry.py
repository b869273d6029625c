"""Geometric oracles: closed-form logistic directions, grid search, boundary probes.

These are deliberately independent of the power-iteration path in
:mod:`fatssl.vat` so that they can check it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ConfigurationError, Layer, MlpModel, ShapeError, backprop, forward
from .vat import DegenerateDirectionError, VatHyper, adversarial_directions, kl_from_logits


@dataclass
class LinearLogistic:
    """p(y=1|x) = sigmoid(b + w.x)."""

    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = float(self.b)
        if not np.any(self.w):
            raise ConfigurationError("w must not be all zero")

    def margin(self, X):
        return np.atleast_2d(X) @ self.w + self.b

    def to_mlp(self) -> MlpModel:
        """Two-logit network (0, b + w.x) with the same class probabilities."""
        W = np.column_stack([np.zeros_like(self.w), self.w])
        return MlpModel([Layer(W, np.array([0.0, self.b]), "identity")])


@dataclass
class BoundaryReport:
    before: np.ndarray
    after: np.ndarray
    fraction_decreased: float
    fraction_normal: float | None = None
    directions: np.ndarray | None = None

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "distance_before", "distance_after", "decreased"])
            for i, (a, b) in enumerate(zip(self.before, self.after)):
                w.writerow([i, repr(float(a)), repr(float(b)), int(b < a)])


def _as_model(model):
    return model.to_mlp() if isinstance(model, LinearLogistic) else model


def boundary_distance_linear(m: LinearLogistic, x) -> float:
    return float(abs(m.b + m.w @ np.asarray(x, dtype=np.float64)) / np.linalg.norm(m.w))


def logistic_adv_direction_closed_form(m: LinearLogistic, x, epsilon=None) -> np.ndarray:
    """Unit vector pointing from x toward the decision boundary.

    For small enough radius this is the KL-maximizing perturbation direction;
    ``epsilon`` is accepted for interface symmetry and does not change it.
    """
    s = m.b + m.w @ np.asarray(x, dtype=np.float64)
    if s == 0:
        raise DegenerateDirectionError("x lies on the decision boundary")
    return -np.sign(s) * m.w / np.linalg.norm(m.w)


def grid_direction_oracle(model, x, epsilon, n_grid=720):
    """Brute-force argmax of the KL over ``n_grid`` evenly spaced 2D unit directions."""
    model = _as_model(model)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,) or model.input_dim != 2:
        raise ShapeError("the grid oracle only handles 2D inputs")
    angles = 2 * np.pi * np.arange(n_grid) / n_grid
    dirs = np.column_stack([np.cos(angles), np.sin(angles)])
    clean = forward(model, x[None, :])[0]
    pert = forward(model, x + epsilon * dirs)[0]
    kl = kl_from_logits(np.repeat(clean, n_grid, axis=0), pert)
    i = int(np.argmax(kl))
    return dirs[i], float(kl[i])


def prop2_check(m: LinearLogistic, samples, epsilon, *, use_power_iteration=True, seed=0,
                xi=1e-6) -> BoundaryReport:
    """Check that stepping along the adversarial direction approaches the boundary.

    ``epsilon`` may be a scalar or one radius per sample. With
    ``use_power_iteration`` the direction comes from :func:`adversarial_directions`
    on the equivalent network; otherwise the closed form is used.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (len(X),))
    before = np.abs(m.margin(X)) / np.linalg.norm(m.w)
    if use_power_iteration:
        dirs = np.empty_like(X)
        rng = np.random.default_rng(seed)
        net = m.to_mlp()
        for i, x in enumerate(X):
            if eps[i] == 0:
                dirs[i] = 0.0
                continue
            adv = adversarial_directions(net, x[None, :], VatHyper(float(eps[i]), xi, 1), rng)
            dirs[i] = adv.directions[0]
    else:
        dirs = np.array([logistic_adv_direction_closed_form(m, x) for x in X])
    after = np.abs(m.margin(X + eps[:, None] * dirs)) / np.linalg.norm(m.w)
    frac = float(np.mean(after < before)) if len(X) else 0.0
    return BoundaryReport(before, after, frac, directions=dirs)


def binary_score(model: MlpModel, X):
    """Scalar decision function g (positive means class 1) and its input gradient."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    z, cache = forward(model, X)
    if model.output_dim == 1:
        up = np.ones_like(z)
        score = z[:, 0]
    elif model.output_dim == 2:
        up = np.tile([-1.0, 1.0], (len(X), 1))
        score = z[:, 1] - z[:, 0]
    else:
        raise ConfigurationError("binary score needs a model with one or two outputs")
    _, grad = backprop(model, cache, up)
    return score, grad


def normal_region_check(model, x, max_ray, n_steps=200):
    """March from x along -sign(g) grad g; True iff g changes sign within ``max_ray``.

    Returns None when the gradient at x vanishes (indeterminate).
    """
    model = _as_model(model)
    x = np.asarray(x, dtype=np.float64)
    score, grad = binary_score(model, x)
    s, g = score[0], grad[0]
    norm = np.linalg.norm(g)
    if norm == 0:
        return None
    u = -np.sign(s) * g / norm
    ts = max_ray * np.arange(1, n_steps + 1) / n_steps
    along, _ = binary_score(model, x + ts[:, None] * u)
    return bool(np.any(np.sign(along) != np.sign(s)) or np.any(along == 0))


def _top_margin(model, X, cls):
    z = forward(model, np.atleast_2d(X))[0]
    own = z[np.arange(len(z)), cls]
    z = z.copy()
    z[np.arange(len(z)), cls] = -np.inf
    return own - z.max(axis=1)


def first_crossing(model: MlpModel, x, u, max_t, n_steps=200, bisect_iters=60):
    """Smallest t in (0, max_t] where the argmax at x + t u stops being the class at x.

    Coarse march then bisection. Returns inf if no change is found.
    """
    x = np.asarray(x, dtype=np.float64)
    cls = int(np.argmax(forward(model, x[None, :])[0][0]))
    ts = max_t * np.arange(1, n_steps + 1) / n_steps
    margins = _top_margin(model, x + ts[:, None] * u, np.full(n_steps, cls))
    hit = np.flatnonzero(margins <= 0)
    if len(hit) == 0:
        return np.inf
    k = hit[0]
    lo, hi = (ts[k - 1] if k > 0 else 0.0), ts[k]
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        if _top_margin(model, x + mid * u, np.array([cls]))[0] <= 0:
            hi = mid
        else:
            lo = mid
    return hi


def ray_boundary_distance(model, point, direction, max_dist, n_steps=200) -> float:
    """Distance from ``point`` to the decision boundary along the line through it.

    Searches both ways along ``direction`` up to ``max_dist``; inf if nothing found.
    """
    model = _as_model(model)
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    return float(min(first_crossing(model, point, u, max_dist, n_steps),
                     first_crossing(model, point, -u, max_dist, n_steps)))


def invariance_measure(model, samples, epsilon, n_probe=16, seed=0, *, resolution=None,
                       min_margin=0.0, xi=1e-6) -> float:
    """Fraction of samples for which some perturbation of norm below ``epsilon`` flips the class.

    Probes are ``n_probe`` random rays plus both signs of the power-iteration
    direction; each ray is checked at every multiple of ``resolution`` inside
    the open ball. With a fixed ``resolution`` the probe set grows with
    ``epsilon``, so the estimate is nondecreasing in it. ``min_margin`` keeps
    only samples whose top-two probability gap exceeds it.
    """
    model = _as_model(model)
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = X.shape
    h = epsilon / 64 if resolution is None else resolution
    n_steps = int(np.ceil(epsilon / h))
    ts = h * np.arange(1, n_steps + 1)
    ts = ts[ts < epsilon]
    rng = np.random.default_rng(seed)
    rays = rng.standard_normal((n_probe, d))
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    z = forward(model, X)[0]
    cls = np.argmax(z, axis=1)
    p = np.sort(np.exp(z - z.max(axis=1, keepdims=True)), axis=1)
    p /= p.sum(axis=1, keepdims=True)
    use = (p[:, -1] - p[:, -2]) > min_margin if z.shape[1] > 1 else np.ones(n, bool)
    if not np.any(use):
        return 0.0
    adv = adversarial_directions(model, X, VatHyper(epsilon, xi, 1), np.random.default_rng(seed + 1))
    flips = 0
    for i in np.flatnonzero(use):
        probe_dirs = rays
        if not adv.degenerate[i]:
            probe_dirs = np.vstack([rays, adv.directions[i], -adv.directions[i]])
        if len(ts) == 0:
            continue
        pts = X[i] + (ts[None, :, None] * probe_dirs[:, None, :]).reshape(-1, d)
        pred = np.argmax(forward(model, pts)[0], axis=1)
        flips += bool(np.any(pred != cls[i]))
    return flips / int(use.sum())
