"""Dense multilayer perceptron with exact reverse-mode gradients.

Everything here works on float64 numpy arrays. A model is a list of
:class:`Layer` objects; ``forward`` returns logits plus a cache that
``backprop`` consumes to produce gradients for every parameter and for the
input batch itself (the latter drives the adversarial direction search).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "identity")
CHECKPOINT_VERSION = 1
BN_EPS = 1e-5


class ConfigurationError(ValueError):
    """Invalid hyperparameter or structural setting."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class CacheMismatchError(RuntimeError):
    """A cache was handed to backprop for a model it was not produced by."""


@dataclass
class BatchNorm:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1


@dataclass
class Layer:
    weight: np.ndarray  # fan_in x fan_out
    bias: np.ndarray
    activation: str = "relu"
    slope: float = 0.1  # only used by leaky_relu
    norm: BatchNorm | None = None

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpModel:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise ShapeError(f"layer chain broken: {a.fan_out} -> {b.fan_in}")
        if self.layers[-1].activation != "identity":
            raise ConfigurationError("last layer must be identity (pre-softmax output)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.fan_out for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (weights, biases, norm scale/shift)."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
            if layer.norm is not None:
                out += [layer.norm.scale, layer.norm.shift]
        return out

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def with_parameters(self, params: list[np.ndarray]) -> "MlpModel":
        """New model sharing structure and norm statistics, with ``params`` swapped in."""
        new = self.copy()
        it = iter(params)
        for layer in new.layers:
            layer.weight = next(it)
            layer.bias = next(it)
            if layer.norm is not None:
                layer.norm.scale = next(it)
                layer.norm.shift = next(it)
        return new


@dataclass
class ForwardCache:
    model_id: int
    mode: str
    inputs: list  # per-layer input activations
    pre: list  # per-layer linear outputs z = h W + b
    norm: list  # per-layer (zhat, inv_std) or None
    post: list  # per-layer values fed to the activation


def he_init(layer_dims, activation="relu", seed=0, *, batch_norm=False, slope=0.1) -> MlpModel:
    """Zero-mean Gaussian weights with variance 2/fan_in, zero biases."""
    layer_dims = list(layer_dims)
    if len(layer_dims) < 2 or any(int(d) < 1 for d in layer_dims):
        raise ConfigurationError(f"invalid layer dims {layer_dims}")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    n = len(layer_dims) - 1
    for i, (fi, fo) in enumerate(zip(layer_dims, layer_dims[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / fi), size=(fi, fo))
        last = i == n - 1
        norm = None
        if batch_norm and not last:
            norm = BatchNorm(np.ones(fo), np.zeros(fo), np.zeros(fo), np.ones(fo))
        layers.append(
            Layer(w, np.zeros(fo), "identity" if last else activation, slope, norm)
        )
    return MlpModel(layers)


def _activate(layer: Layer, a: np.ndarray) -> np.ndarray:
    if layer.activation == "relu":
        return np.maximum(a, 0.0)
    if layer.activation == "leaky_relu":
        return np.where(a > 0, a, layer.slope * a)
    return a


def _activate_grad(layer: Layer, a: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if layer.activation == "relu":
        return upstream * (a > 0)
    if layer.activation == "leaky_relu":
        return upstream * np.where(a > 0, 1.0, layer.slope)
    return upstream


def forward(model: MlpModel, batch, mode="eval"):
    """Run ``batch`` (n x d) through the model.

    Returns ``(logits, cache)``. In ``train`` mode normalization layers use
    batch statistics; in ``eval`` mode they use the stored running statistics,
    which makes every row independent of the others.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected (n, {model.input_dim}) input, got {x.shape}")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    cache = ForwardCache(id(model), mode, [], [], [], [])
    h = x
    for layer in model.layers:
        cache.inputs.append(h)
        z = h @ layer.weight + layer.bias
        cache.pre.append(z)
        if layer.norm is not None:
            bn = layer.norm
            if mode == "train":
                mean, var = z.mean(axis=0), z.var(axis=0)
            else:
                mean, var = bn.running_mean, bn.running_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mean) * inv_std
            cache.norm.append((zhat, inv_std))
            a = bn.scale * zhat + bn.shift
        else:
            cache.norm.append(None)
            a = z
        cache.post.append(a)
        h = _activate(layer, a)
    return h, cache


def logits(model: MlpModel, batch) -> np.ndarray:
    return forward(model, batch, "eval")[0]


def backprop(model: MlpModel, cache: ForwardCache, loss_grad_at_logits):
    """Gradients of a scalar loss given its gradient at the logits.

    Returns ``(param_grads, input_grads)``; ``param_grads`` is ordered like
    ``model.parameters()``.
    """
    if cache.model_id != id(model) or len(cache.inputs) != len(model.layers):
        raise CacheMismatchError("cache was produced by a different model")
    up = np.asarray(loss_grad_at_logits, dtype=np.float64)
    if up.ndim == 1:
        up = up[None, :]
    n = cache.inputs[0].shape[0]
    if up.shape != (n, model.output_dim):
        raise ShapeError(f"expected ({n}, {model.output_dim}) logit gradient, got {up.shape}")
    grads: list[list[np.ndarray]] = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        da = _activate_grad(layer, cache.post[i], up)
        if layer.norm is not None:
            zhat, inv_std = cache.norm[i]
            d_scale = (da * zhat).sum(axis=0)
            d_shift = da.sum(axis=0)
            dzhat = da * layer.norm.scale
            if cache.mode == "train":
                dz = inv_std / n * (
                    n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0)
                )
            else:
                dz = dzhat * inv_std
            extra = [d_scale, d_shift]
        else:
            dz = da
            extra = []
        h = cache.inputs[i]
        grads.append([h.T @ dz, dz.sum(axis=0)] + extra)
        up = dz @ layer.weight.T
    flat = [g for layer_grads in reversed(grads) for g in layer_grads]
    return flat, up


def update_running_stats(model: MlpModel, cache: ForwardCache) -> None:
    """Fold the batch statistics of a train-mode pass into the running averages."""
    if cache.mode != "train":
        return
    for layer, z in zip(model.layers, cache.pre):
        bn = layer.norm
        if bn is None:
            continue
        m = bn.momentum
        bn.running_mean = (1 - m) * bn.running_mean + m * z.mean(axis=0)
        bn.running_var = (1 - m) * bn.running_var + m * z.var(axis=0)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: MlpModel, batch) -> np.ndarray:
    # np.argmax returns the first maximal index, so ties go to the lowest class
    return np.argmax(logits(model, batch), axis=1)


def cross_entropy(logit_batch, labels):
    """Mean negative log-likelihood and its gradient at the logits."""
    z = np.asarray(logit_batch, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    n = z.shape[0]
    logp = log_softmax(z)
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: MlpModel, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_step(model: MlpModel, grads, state: AdamState):
    """One bias-corrected Adam update. Returns a new ``(model, state)`` pair."""
    params = model.parameters()
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("gradient / optimizer state does not mirror the model parameters")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"shape mismatch {g.shape} vs {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
    return model.with_parameters(new_params), new_state


def save_checkpoint(model: MlpModel, path) -> None:
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "dims": np.array(model.dims, dtype=np.int64),
        "activations": np.array([layer.activation for layer in model.layers]),
        "slopes": np.array([layer.slope for layer in model.layers]),
        "has_norm": np.array([layer.norm is not None for layer in model.layers]),
    }
    for i, layer in enumerate(model.layers):
        arrays[f"W{i}"] = layer.weight
        arrays[f"b{i}"] = layer.bias
        if layer.norm is not None:
            bn = layer.norm
            arrays[f"bn{i}"] = np.stack([bn.scale, bn.shift, bn.running_mean, bn.running_var])
            arrays[f"bnm{i}"] = np.array(bn.momentum)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> MlpModel:
    with np.load(Path(path), allow_pickle=False) as f:
        version = int(f["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        dims = [int(d) for d in f["dims"]]
        layers = []
        for i in range(len(dims) - 1):
            norm = None
            if bool(f["has_norm"][i]):
                s, sh, rm, rv = f[f"bn{i}"]
                norm = BatchNorm(s.copy(), sh.copy(), rm.copy(), rv.copy(), float(f[f"bnm{i}"]))
            layers.append(Layer(f[f"W{i}"].copy(), f[f"b{i}"].copy(), str(f["activations"][i]),
                                float(f["slopes"][i]), norm))
    model = MlpModel(layers)
    if model.dims != dims:
        raise ShapeError("checkpoint dims disagree with stored arrays")
    return model
