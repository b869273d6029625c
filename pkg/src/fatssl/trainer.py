"""Training loop for the supervised, VAT and FAT objectives."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .badgen import BadGenHyper, fake_term, place_bad_samples, true_term
from .data import SslDataset
from .nn import AdamState, ConfigurationError, MlpModel
from .vat import VatHyper, adversarial_directions, vat_term

log = logging.getLogger(__name__)

METHODS = ("supervised", "vat", "fat")
METRICS_HEADER = ["epoch", "lambda", "loss_ce", "loss_vat", "loss_true", "loss_fake",
                  "val_acc", "test_acc", "bad_kept_frac", "seconds"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, model=None, epoch=None, step=None):
        super().__init__(message)
        self.model = model
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class FatConfig:
    vat_hyper: VatHyper = field(default_factory=VatHyper)
    badgen_hyper: BadGenHyper = field(default_factory=BadGenHyper)
    lambda_max: float = 1.0
    lambda_step: float = 0.1
    epochs: int = 10
    labeled_batch: int = 32
    unlabeled_batch: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    method: str = "fat"
    hidden: tuple = (100, 100)
    activation: str = "relu"
    batch_norm: bool = False
    record_time: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lambda_step < 0 or self.lambda_max < 0:
            raise ConfigurationError("lambda_step and lambda_max must be >= 0")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigurationError("invalid Adam settings")

    def adam_state(self, model: MlpModel) -> AdamState:
        return AdamState.for_model(model, self.lr, self.beta1, self.beta2, self.adam_eps)


@dataclass
class EpochMetrics:
    epoch: int
    lam: float
    loss_ce: float
    loss_vat: float
    loss_true: float
    loss_fake: float
    val_acc: float
    test_acc: float
    bad_kept_frac: float
    seconds: float

    def row(self) -> list:
        return [self.epoch] + [repr(float(v)) for v in (
            self.lam, self.loss_ce, self.loss_vat, self.loss_true, self.loss_fake,
            self.val_acc, self.test_acc, self.bad_kept_frac, self.seconds)]


@dataclass
class StepResult:
    loss_ce: float = 0.0
    loss_vat: float = 0.0
    loss_true: float = 0.0
    loss_fake: float = 0.0
    vat_entropy: float = 0.0
    n_candidates: int = 0
    n_kept: int = 0
    n_degenerate: int = 0
    lam: float = 0.0
    term_grads: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.loss_ce + self.loss_vat + self.lam * (self.loss_true + self.loss_fake)


@dataclass
class TrainResult:
    best_model: MlpModel
    last_model: MlpModel
    metrics: list[EpochMetrics]
    best_epoch: int | None


def warmup_lambda(epoch: int, cfg: FatConfig) -> float:
    return min(cfg.lambda_max, epoch * cfg.lambda_step)


def _add(acc, grads, weight=None):
    if grads is None:
        return acc
    if weight is not None:
        grads = [weight * g for g in grads]
    if acc is None:
        return list(grads)
    return [a + g for a, g in zip(acc, grads)]


def fat_gradients(model: MlpModel, xl, yl, xu, lam: float, cfg: FatConfig, rng):
    """Loss terms and the summed parameter gradient for one step.

    ``model`` doubles as the frozen snapshot: directions, the KL's first
    argument and the bad-sample filter all read it, and nothing here mutates it.
    Returns ``(total_grads, StepResult, caches)``; per-term gradients sit in
    ``StepResult.term_grads``.
    """
    res = StepResult()
    mode = "train" if cfg.batch_norm else "eval"
    z, cache_l = nn.forward(model, xl, mode)
    res.loss_ce, dz = nn.cross_entropy(z, yl)
    g_ce, _ = nn.backprop(model, cache_l, dz)
    res.term_grads["ce"] = g_ce
    caches = [cache_l]
    total = _add(None, g_ce)
    if cfg.method == "supervised":
        return total, res, caches

    if cfg.batch_norm:
        caches.append(nn.forward(model, xu, "train")[1])
    adv = adversarial_directions(model, xu, cfg.vat_hyper, rng)
    logp_hat = nn.log_softmax(nn.forward(model, xu, "eval")[0])
    res.vat_entropy = float(-(np.exp(logp_hat) * logp_hat).sum(axis=1).mean())
    res.n_degenerate = int(adv.degenerate.sum())
    x_adv = xu + cfg.vat_hyper.epsilon * adv.directions
    res.loss_vat, g_vat = vat_term(model, logp_hat, x_adv, active=~adv.degenerate)
    res.term_grads["vat"] = g_vat
    total = _add(total, g_vat)
    if cfg.method == "vat":
        return total, res, caches

    bad = place_bad_samples(model, xu, adv, cfg.badgen_hyper)
    res.n_candidates = len(bad)
    res.n_kept = int(bad.kept.sum())
    loss_true, g_true = true_term(model, xu)
    loss_fake, g_fake = fake_term(model, bad.kept_points)
    res.loss_true, res.loss_fake, res.lam = loss_true, loss_fake, lam
    bad_grads = _add(g_true, g_fake)
    res.term_grads["true"] = g_true
    res.term_grads["fake"] = g_fake
    total = _add(total, bad_grads, lam)
    return total, res, caches


def fat_step(model: MlpModel, state: AdamState, xl, yl, xu, lam: float, cfg: FatConfig, rng):
    """One optimizer step on the configured objective. Returns (model, state, StepResult)."""
    if not 0 <= lam <= max(cfg.lambda_max, 0.0):
        raise ConfigurationError(f"lambda {lam} outside [0, {cfg.lambda_max}]")
    grads, res, caches = fat_gradients(model, xl, yl, xu, lam, cfg, rng)
    new_model, new_state = nn.adam_step(model, grads, state)
    if cfg.batch_norm:
        for cache in caches:
            nn.update_running_stats(new_model, cache)
    return new_model, new_state, res


def evaluate(model: MlpModel, X, y) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty set")
    if len(X) != len(y):
        raise nn.ShapeError(f"{len(X)} inputs for {len(y)} labels")
    return float(np.mean(nn.predict(model, X) == y))


def _maybe_eval(model, X, y):
    return evaluate(model, X, y) if len(y) else float("nan")


class _LabeledCycler:
    """Endless reshuffled pass over the labeled set."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            j = min(self.n - self.pos, k - len(out))
            out.extend(self.order[self.pos:self.pos + j])
            self.pos += j
        return np.asarray(out)


def init_model(cfg: FatConfig, data: SslDataset) -> MlpModel:
    dims = [data.input_dim, *cfg.hidden, data.n_classes]
    return nn.he_init(dims, cfg.activation, cfg.seed, batch_norm=cfg.batch_norm)


def train(cfg: FatConfig, data: SslDataset, on_epoch_end=None, model: MlpModel | None = None) -> TrainResult:
    """Run ``cfg.epochs`` passes over the unlabeled set.

    ``on_epoch_end(epoch, model, metrics)`` is called after each epoch. The
    returned best model is the one with the highest validation accuracy
    (earliest wins ties); without a validation set it is the last model.
    """
    model = init_model(cfg, data) if model is None else model
    state = cfg.adam_state(model)
    rng = np.random.default_rng(cfg.seed)
    cycler = _LabeledCycler(len(data.labeled_y), rng)
    n_u = len(data.unlabeled_X)
    metrics: list[EpochMetrics] = []
    best_model, best_acc, best_epoch = model, -np.inf, None

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lam = warmup_lambda(epoch, cfg) if cfg.method == "fat" else 0.0
        order = rng.permutation(n_u)
        sums = np.zeros(4)
        steps = kept = candidates = 0
        for start in range(0, n_u, cfg.unlabeled_batch):
            xu = data.unlabeled_X[order[start:start + cfg.unlabeled_batch]]
            li = cycler.take(cfg.labeled_batch)
            model, state, res = fat_step(model, state, data.labeled_X[li], data.labeled_y[li],
                                         xu, lam, cfg, rng)
            losses = (res.loss_ce, res.loss_vat, res.loss_true, res.loss_fake)
            if not np.all(np.isfinite(losses)):
                raise TrainingDiverged(f"non-finite loss {losses} at epoch {epoch} step {steps}",
                                       model, epoch, steps)
            sums += losses
            steps += 1
            kept += res.n_kept
            candidates += res.n_candidates
        if not all(np.all(np.isfinite(p)) for p in model.parameters()):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", model, epoch, steps)
        means = sums / max(steps, 1)
        val_acc = _maybe_eval(model, data.val_X, data.val_y)
        m = EpochMetrics(
            epoch=epoch, lam=lam, loss_ce=means[0], loss_vat=means[1], loss_true=means[2],
            loss_fake=means[3], val_acc=val_acc,
            test_acc=_maybe_eval(model, data.test_X, data.test_y),
            bad_kept_frac=kept / candidates if candidates else 0.0,
            seconds=time.perf_counter() - t0 if cfg.record_time else 0.0,
        )
        metrics.append(m)
        log.debug("epoch %d lambda %.2f ce %.4f vat %.4f val %.4f test %.4f", epoch, lam,
                  m.loss_ce, m.loss_vat, m.val_acc, m.test_acc)
        if np.isfinite(val_acc) and val_acc > best_acc:
            best_model, best_acc, best_epoch = model, val_acc, epoch
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, m)

    if best_epoch is None:
        best_model = model
    return TrainResult(best_model, model, metrics, best_epoch)


def write_metrics_csv(metrics, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow(m.row())


def epochs_to_reach(metrics, threshold, attr="test_acc"):
    """First epoch (1-based count) whose ``attr`` reaches ``threshold``; None if never."""
    for i, m in enumerate(metrics):
        if getattr(m, attr) >= threshold:
            return i + 1
    return None
