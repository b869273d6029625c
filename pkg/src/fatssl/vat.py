"""Virtual adversarial directions and the VAT consistency loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConfigurationError, MlpModel, ShapeError, backprop, forward, log_softmax

DEGENERATE_NORM = 1e-12


class DegenerateDirectionError(ArithmeticError):
    """The KL gradient vanished: the classifier is locally constant at x."""


@dataclass(frozen=True)
class VatHyper:
    epsilon: float = 1.5
    xi: float = 1e-6
    power_iters: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.xi > 0:
            raise ConfigurationError(f"xi must be > 0, got {self.xi}")
        if int(self.power_iters) < 1:
            raise ConfigurationError(f"power_iters must be >= 1, got {self.power_iters}")


@dataclass
class AdvDirection:
    direction: np.ndarray
    kl_value: float
    iterations_used: int
    flipped: bool = False


@dataclass
class AdvBatch:
    """Row-wise adversarial directions for a batch.

    Degenerate rows carry a zero direction and zero KL.
    """

    directions: np.ndarray
    kl_values: np.ndarray
    degenerate: np.ndarray
    flipped: np.ndarray
    iterations_used: int


def kl_divergence(p, q) -> float:
    """KL(p || q) for two probability vectors, with 0 ln 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch {p.shape} vs {q.shape}")
    if np.any(q <= 0):
        raise ValueError("q must be strictly positive")
    mask = p > 0
    return float(max(0.0, np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


def kl_rows(logp, logq) -> np.ndarray:
    """Row-wise KL between distributions given as log-probabilities."""
    p = np.exp(logp)
    return np.maximum((p * (logp - logq)).sum(axis=1), 0.0)


def kl_from_logits(clean_logits, pert_logits) -> np.ndarray:
    """Row-wise KL(softmax(clean) || softmax(pert)) computed from logit shifts.

    Centering the shift under p keeps precision when one class dominates and
    the divergence sits far below machine epsilon of the probabilities.
    """
    clean = np.atleast_2d(clean_logits)
    pert = np.atleast_2d(pert_logits)
    logp = log_softmax(clean)
    p = np.exp(logp)
    delta = pert - clean
    centered = delta - (p * delta).sum(axis=1, keepdims=True)
    with np.errstate(over="ignore", invalid="ignore"):
        kl = np.log1p((p * (np.expm1(centered) - centered)).sum(axis=1))
    fallback = ~np.isfinite(kl)
    if np.any(fallback):
        kl[fallback] = kl_rows(logp[fallback], log_softmax(pert[fallback]))
    return np.maximum(kl, 0.0)


def _kl_grad_at_logits(logp_hat, clean_logits, pert_logits):
    # softmax(pert) - p_hat, formed as p_hat * expm1(...) so it keeps relative
    # precision when the perturbation is tiny
    delta = pert_logits - clean_logits
    delta = delta - delta.max(axis=1, keepdims=True)
    p_hat = np.exp(logp_hat)
    em = np.expm1(delta)
    c = np.log1p((p_hat * em).sum(axis=1, keepdims=True))
    return p_hat * np.expm1(delta - c)


def _normalize_rows(v):
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(norms > 0, norms, 1.0), norms[:, 0]


def adversarial_directions(model: MlpModel, X, hyper: VatHyper, rng) -> AdvBatch:
    """Sign-corrected power-iteration directions for every row of ``X``.

    ``model`` is the frozen snapshot. Rows never interact, so each row's
    result depends only on its own starting vector.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if model.output_dim < 2:
        raise ConfigurationError("adversarial directions need at least two classes")
    n, d = X.shape
    clean, _ = forward(model, X, "eval")
    logp_hat = log_softmax(clean)

    direction, _ = _normalize_rows(rng.standard_normal((n, d)))
    degenerate = np.zeros(n, dtype=bool)
    for _ in range(int(hyper.power_iters)):
        pert, cache = forward(model, X + hyper.xi * direction, "eval")
        # each row only contributes a direction, so rescale the upstream
        # gradient row-wise; otherwise confident rows fall under the
        # degeneracy threshold purely because the KL is tiny there
        up = _kl_grad_at_logits(logp_hat, clean, pert)
        peak = np.abs(up).max(axis=1, keepdims=True)
        _, g = backprop(model, cache, up / np.where(peak > 0, peak, 1.0))
        direction, norms = _normalize_rows(g)
        degenerate |= norms < DEGENERATE_NORM
    direction[degenerate] = 0.0

    kl_plus = kl_from_logits(clean, forward(model, X + hyper.epsilon * direction)[0])
    kl_minus = kl_from_logits(clean, forward(model, X - hyper.epsilon * direction)[0])
    flipped = (kl_minus > kl_plus) & ~degenerate
    direction[flipped] *= -1.0
    kl = np.where(flipped, kl_minus, kl_plus)
    kl[degenerate] = 0.0
    return AdvBatch(direction, kl, degenerate, flipped, int(hyper.power_iters))


def adversarial_direction(model: MlpModel, x, hyper: VatHyper, seed=0) -> AdvDirection:
    """Adversarial direction for a single input vector.

    Raises :class:`DegenerateDirectionError` when the KL gradient vanishes.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    batch = adversarial_directions(model, x[None, :], hyper, np.random.default_rng(seed))
    if batch.degenerate[0]:
        raise DegenerateDirectionError("KL gradient is zero at x")
    return AdvDirection(batch.directions[0], float(batch.kl_values[0]), batch.iterations_used,
                        bool(batch.flipped[0]))


def vat_term(model: MlpModel, logp_hat, X_adv, active=None):
    """Mean KL(p_hat || p(.|x_adv; theta)) over the batch and its parameter gradient.

    ``logp_hat`` is held constant. Rows with ``active == False`` contribute zero
    loss but still count in the mean.
    """
    X_adv = np.atleast_2d(np.asarray(X_adv, dtype=np.float64))
    n = X_adv.shape[0]
    z, cache = forward(model, X_adv, "eval")
    logq = log_softmax(z)
    per_row = kl_rows(logp_hat, logq)
    dz = np.exp(logq) - np.exp(logp_hat)
    if active is not None:
        per_row = np.where(active, per_row, 0.0)
        dz = dz * np.asarray(active, dtype=np.float64)[:, None]
    grads, _ = backprop(model, cache, dz / n)
    return float(per_row.sum() / n), grads


def vat_loss(model_snapshot: MlpModel, model: MlpModel, x, r_adv):
    """KL(p(.|x; snapshot) || p(.|x + r_adv; model)) with gradient through ``model`` only.

    Returns ``(loss, param_grads, entropy_constant)``; the last term is the
    snapshot entropy, which differs from the cross-entropy form only by a
    constant with no parameter gradient.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    r_adv = np.atleast_2d(np.asarray(r_adv, dtype=np.float64))
    if x.shape != r_adv.shape:
        raise ShapeError(f"x {x.shape} and r_adv {r_adv.shape} differ")
    logp_hat = log_softmax(forward(model_snapshot, x, "eval")[0])
    loss, grads = vat_term(model, logp_hat, x + r_adv)
    entropy = float(-(np.exp(logp_hat) * logp_hat).sum(axis=1).mean())
    return loss, grads, entropy
