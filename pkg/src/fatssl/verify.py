"""Self-contained property suites behind the ``verify`` command."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .badgen import l_fake, l_true
from .data import make_clusters
from .geometry import (LinearLogistic, grid_direction_oracle, logistic_adv_direction_closed_form,
                       normal_region_check, prop2_check)
from .trainer import FatConfig, train, warmup_lambda
from .vat import VatHyper, adversarial_directions, kl_divergence

SUITES = ("gradients", "prop2", "oracle_agreement", "normal_regions", "losses")


@dataclass
class SuiteResult:
    name: str
    passed: bool = True
    lines: list[str] = field(default_factory=list)
    counterexample: dict | None = None

    def check(self, ok, line, **example):
        self.lines.append(("PASS " if ok else "FAIL ") + line)
        if not ok:
            self.passed = False
            if self.counterexample is None:
                self.counterexample = {"check": line, **example}
        return ok


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def random_small_model(rng, seed, max_dim=16):
    n_hidden = int(rng.integers(1, 4))
    dims = [int(rng.integers(1, max_dim + 1)) for _ in range(n_hidden + 1)] + [int(rng.integers(2, max_dim + 1))]
    act = ["relu", "leaky_relu"][seed % 2]
    model = nn.he_init(dims, act, seed=seed)
    for layer in model.layers:
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    return model


def gradient_errors(model, X, w):
    """Max relative error of parameter and input gradients against central differences."""
    def loss():
        return float(np.sum(w * nn.forward(model, X)[0]))

    _, cache = nn.forward(model, X)
    grads, gx = nn.backprop(model, cache, w)
    scale = max(float(np.max(np.abs(g))) for g in grads + [gx])
    worst = 0.0
    for analytic, arr in [(gx, X)] + list(zip(grads, model.parameters())):
        num = _fd_grad(loss, arr)
        worst = max(worst, float(np.max(np.abs(analytic - num))) / max(scale, 1e-12))
    return worst


def suite_gradients(n_models=20, seed=0) -> SuiteResult:
    res = SuiteResult("gradients")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_models):
        model = random_small_model(rng, seed + i)
        X = rng.normal(size=(3, model.input_dim))
        w = rng.normal(size=(3, model.output_dim))
        err = gradient_errors(model, X, w)
        worst = max(worst, err)
        if err >= 1e-5:
            res.check(False, f"model {i} dims {model.dims}: relative error {err:.3e}",
                      dims=model.dims, error=err)
    res.check(worst < 1e-5, f"{n_models} models, max relative error {worst:.3e} < 1e-5")
    return res


def random_logistic(rng, d):
    return LinearLogistic(rng.normal(size=d), float(rng.normal()))


def suite_prop2(n_models=10, n_samples=1000, seed=0) -> SuiteResult:
    res = SuiteResult("prop2")
    rng = np.random.default_rng(seed)
    worst_cos = 0.0
    for i in range(n_models):
        d = int(rng.integers(2, 9))
        m = random_logistic(rng, d)
        X = rng.normal(size=(n_samples, d))
        X = X[np.abs(m.margin(X)) > 1e-6]
        dist = np.abs(m.margin(X)) / np.linalg.norm(m.w)
        eps = 0.1 * dist
        report = prop2_check(m, X, eps, use_power_iteration=True, seed=seed + i)
        closed = np.array([logistic_adv_direction_closed_form(m, x) for x in X])
        cos_dist = 1.0 - np.sum(report.directions * closed, axis=1)
        worst_cos = max(worst_cos, float(cos_dist.max()))
        bad = np.flatnonzero(report.after >= report.before)
        res.check(report.fraction_decreased == 1.0,
                  f"model {i} (d={d}): fraction decreased {report.fraction_decreased:.4f} over {len(X)} samples",
                  model=i, sample=X[bad[0]].tolist() if len(bad) else None)
        j = int(np.argmax(cos_dist))
        if cos_dist[j] >= 1e-6:
            res.check(False, f"model {i}: cosine distance {cos_dist[j]:.3e}", model=i, sample=X[j].tolist())
    res.check(worst_cos < 1e-6, f"power vs closed-form max cosine distance {worst_cos:.3e} < 1e-6")
    return res


def trained_2d_models(n_models=5, seed=0, epochs=40):
    """Small supervised 2D ReLU nets on well-labeled cluster data, for oracle checks."""
    layouts = [("gaussian_blobs", 2), ("two_moons", 2), ("gaussian_blobs", 3),
               ("gaussian_ring", 2), ("gaussian_blobs", 4)]
    out = []
    for i in range(n_models):
        layout, K = layouts[i % len(layouts)]
        spread = {"two_moons": 0.1, "gaussian_ring": 0.15}.get(layout, 0.5)
        ds = make_clusters(K, 400, 100 // K, spread, layout, seed=seed + i, n_validation=0)
        cfg = FatConfig(method="supervised", epochs=epochs, hidden=(32, 32), labeled_batch=32,
                        unlabeled_batch=40, lr=3e-3, seed=seed + i)
        out.append((train(cfg, ds).last_model, ds))
    return out


def oracle_agreement(model, X, epsilon, n_grid=720, seed=0, power_iters=1):
    """Ratio of power-iteration KL to the grid-oracle maximum for each probe point."""
    adv = adversarial_directions(model, X, VatHyper(epsilon, 1e-6, power_iters),
                                 np.random.default_rng(seed))
    ratios = np.empty(len(X))
    for i, x in enumerate(X):
        _, best = grid_direction_oracle(model, x, epsilon, n_grid)
        ratios[i] = adv.kl_values[i] / best if best > 0 else 1.0
    return ratios


def suite_oracle_agreement(n_models=5, n_probe=100, epsilon=0.05, power_iters=2, seed=0) -> SuiteResult:
    # with K >= 3 the local KL Hessian in 2D can have rank 2, where a single
    # power step from a random start is not enough; the one-step figure is
    # still reported for reference
    res = SuiteResult("oracle_agreement")
    rng = np.random.default_rng(seed)
    for i, (model, ds) in enumerate(trained_2d_models(n_models, seed)):
        X = ds.unlabeled_X[rng.choice(len(ds.unlabeled_X), n_probe, replace=False)]
        ratios = oracle_agreement(model, X, epsilon, seed=seed + i, power_iters=power_iters)
        frac = float(np.mean(ratios >= 0.9))
        worst = int(np.argmin(ratios))
        res.check(frac >= 0.95,
                  f"model {i} (K={ds.n_classes}): {frac:.3f} of {n_probe} probes reach 0.9 x grid max "
                  f"at eps={epsilon}, {power_iters} power iterations (min ratio {ratios[worst]:.3f})",
                  model=i, probe=X[worst].tolist())
        if power_iters != 1:
            one = float(np.mean(oracle_agreement(model, X, epsilon, seed=seed + i) >= 0.9))
            res.lines.append(f"INFO model {i}: {one:.3f} with a single power iteration")
    return res


def suite_normal_regions(n_points=400, seed=0) -> SuiteResult:
    res = SuiteResult("normal_regions")
    ds = make_clusters(2, 600, 100, 0.5, "gaussian_blobs", seed=seed, n_validation=0)
    cfg = FatConfig(method="supervised", epochs=30, hidden=(32, 32), labeled_batch=32,
                    unlabeled_batch=40, lr=3e-3, seed=seed)
    model = train(cfg, ds).last_model
    rng = np.random.default_rng(seed)
    lo, hi = ds.unlabeled_X.min(axis=0) - 1, ds.unlabeled_X.max(axis=0) + 1
    pts = rng.uniform(lo, hi, size=(n_points, 2))
    flags = [normal_region_check(model, x, max_ray=20.0, n_steps=400) for x in pts]
    determinate = [f for f in flags if f is not None]
    frac = float(np.mean(determinate)) if determinate else 0.0
    res.check(frac >= 0.95, f"{frac:.3f} of {len(determinate)} sampled points are normal (>= 0.95)")
    linear = LinearLogistic(np.array([1.0, -2.0]), 0.5)
    ok = all(normal_region_check(linear, x, max_ray=10.0) for x in pts[:50] if abs(linear.margin(x)[0]) > 1e-9)
    res.check(ok, "linear model: every off-boundary point is normal")
    return res


def suite_losses() -> SuiteResult:
    res = SuiteResult("losses")
    v, _ = l_fake(np.zeros(10))
    res.check(abs(v - math.log(11)) <= 1e-12, f"l_fake(0, K=10) = {v!r} vs ln 11")
    v, _ = l_true(np.zeros(10))
    res.check(abs(v - 10 / 11 * math.log(11)) <= 1e-12, f"l_true(0, K=10) = {v!r} vs (10/11) ln 11")
    cases = [((0.5, 0.5), (0.5, 0.5), 0.0), ((1.0, 0.0), (0.5, 0.5), math.log(2)),
             ((0.5, 0.5), (0.9, 0.1), 0.5 * math.log(25 / 9))]
    for p, q, want in cases:
        got = kl_divergence(p, q)
        res.check(abs(got - want) <= 1e-9, f"KL({p} || {q}) = {got:.12f} vs {want:.12f}")
    cfg = FatConfig()
    for epoch, want in [(0, 0.0), (3, 0.3), (15, 1.0)]:
        got = warmup_lambda(epoch, cfg)
        res.check(abs(got - want) <= 1e-12, f"warm-up lambda at epoch {epoch} = {got!r} vs {want}")
    return res


RUNNERS = {
    "gradients": suite_gradients,
    "prop2": suite_prop2,
    "oracle_agreement": suite_oracle_agreement,
    "normal_regions": suite_normal_regions,
    "losses": suite_losses,
}


def run_suite(name) -> SuiteResult:
    if name not in RUNNERS:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return RUNNERS[name]()
