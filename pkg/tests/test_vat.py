import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, rel_error
from fatssl.geometry import LinearLogistic, grid_direction_oracle, logistic_adv_direction_closed_form
from fatssl.nn import ConfigurationError, Layer, MlpModel, ShapeError, forward, he_init, softmax
from fatssl.vat import (DegenerateDirectionError, VatHyper, adversarial_direction,
                        adversarial_directions, kl_divergence, kl_from_logits, vat_loss, vat_term)


def test_kl_of_identical_distributions_is_zero():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0


def test_kl_point_mass_against_uniform():
    assert abs(kl_divergence([1.0, 0.0], [0.5, 0.5]) - math.log(2)) < 1e-12


def test_kl_uniform_against_skewed():
    want = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert abs(kl_divergence([0.5, 0.5], [0.9, 0.1]) - want) < 1e-12
    assert abs(want - 0.5 * math.log(25 / 9)) < 1e-15


def test_kl_errors():
    with pytest.raises(ShapeError):
        kl_divergence([0.5, 0.5], [1 / 3] * 3)
    with pytest.raises(ValueError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8),
       st.lists(st.floats(-20, 20), min_size=2, max_size=8))
def test_kl_from_logits_matches_probability_form(a, b):
    n = min(len(a), len(b))
    za, zb = np.array(a[:n]), np.array(b[:n])
    want = kl_divergence(softmax(za), softmax(zb))
    got = kl_from_logits(za, zb)[0]
    assert got >= 0
    assert abs(got - want) <= 1e-9 * max(1.0, want)


def test_kl_from_logits_resolves_tiny_divergence():
    # the naive sum cancels to zero here; second order expansion gives the answer
    z = np.array([[12.0, 0.0]])
    d = 1e-7
    p = softmax(z)[0]
    want = 0.5 * p[0] * p[1] * d * d
    got = kl_from_logits(z, z + np.array([[0.0, d]]))[0]
    assert got == pytest.approx(want, rel=1e-4)


@pytest.mark.parametrize("bad", [dict(epsilon=0), dict(xi=-1.0), dict(power_iters=0)])
def test_vat_hyper_validation(bad):
    with pytest.raises(ConfigurationError):
        VatHyper(**bad)


def test_linear_direction_points_at_boundary():
    m = LinearLogistic(np.array([1.0, 0.0]), 0.0)
    adv = adversarial_direction(m.to_mlp(), np.array([2.0, 0.0]), VatHyper(0.1, 1e-6, 1), seed=3)
    assert np.linalg.norm(adv.direction - np.array([-1.0, 0.0])) < 1e-6
    closed = logistic_adv_direction_closed_form(m, np.array([2.0, 0.0]))
    assert 1 - adv.direction @ closed < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_direction_has_unit_norm(seed, small_model):
    x = np.random.default_rng(seed).normal(size=3)
    adv = adversarial_direction(small_model, x, VatHyper(0.5, 1e-6, 1), seed=seed)
    assert abs(np.linalg.norm(adv.direction) - 1) < 1e-12


def test_sign_dominance(small_model):
    X = np.random.default_rng(4).normal(size=(50, 3))
    hyper = VatHyper(0.7, 1e-6, 1)
    adv = adversarial_directions(small_model, X, hyper, np.random.default_rng(0))
    clean = forward(small_model, X)[0]
    other = kl_from_logits(clean, forward(small_model, X - hyper.epsilon * adv.directions)[0])
    assert np.all(adv.kl_values >= other)


def test_constant_model_is_degenerate():
    model = MlpModel([Layer(np.zeros((2, 3)), np.array([1.0, 0.0, -1.0]), "identity")])
    with pytest.raises(DegenerateDirectionError):
        adversarial_direction(model, np.array([0.3, 0.4]), VatHyper())
    batch = adversarial_directions(model, np.ones((4, 2)), VatHyper(), np.random.default_rng(0))
    assert batch.degenerate.all() and not batch.directions.any() and not batch.kl_values.any()


def test_confident_linear_sample_is_not_degenerate():
    # gradient of the KL is tiny here, but the direction is still well defined
    m = LinearLogistic(np.array([3.0, 1.0, -2.0]), 0.5)
    x = np.array([4.0, 2.0, -3.0])
    adv = adversarial_direction(m.to_mlp(), x, VatHyper(0.1, 1e-6, 1))
    assert 1 - adv.direction @ logistic_adv_direction_closed_form(m, x) < 1e-6


def test_xi_rescaling_leaves_direction_unchanged():
    m = LinearLogistic(np.array([1.0, 2.0]), -0.3)
    x = np.array([0.4, 0.9])
    a = adversarial_direction(m.to_mlp(), x, VatHyper(0.1, 1e-6, 1), seed=1)
    b = adversarial_direction(m.to_mlp(), x, VatHyper(0.1, 1e-5, 1), seed=1)
    assert np.linalg.norm(a.direction - b.direction) < 1e-6


def _smooth_like_model():
    # leaky units with a wide hidden layer, away from kinks at the probe points
    return he_init([2, 30, 3], "leaky_relu", seed=11)


def test_direction_close_to_grid_oracle():
    model = _smooth_like_model()
    ratios = []
    for x in np.random.default_rng(2).normal(size=(20, 2)):
        adv = adversarial_directions(model, x[None], VatHyper(0.05, 1e-6, 3), np.random.default_rng(0))
        _, best = grid_direction_oracle(model, x, 0.05)
        ratios.append(adv.kl_values[0] / best)
    assert np.mean(np.array(ratios) >= 0.9) >= 0.95


def test_rows_are_independent(small_model):
    X = np.random.default_rng(8).normal(size=(6, 3))
    hyper = VatHyper(0.3, 1e-6, 2)
    a = adversarial_directions(small_model, X, hyper, np.random.default_rng(5))
    start = np.random.default_rng(5).standard_normal((6, 3))
    for i in range(6):
        class FixedStart:
            def standard_normal(self, shape, row=start[i]):
                return row[None, :].copy()
        one = adversarial_directions(small_model, X[i:i + 1], hyper, FixedStart())
        assert np.allclose(one.directions[0], a.directions[i], atol=1e-12)


def test_vat_loss_zero_at_identical_models(small_model):
    x = np.random.default_rng(0).normal(size=(4, 3))
    loss, grads, _ = vat_loss(small_model, small_model, x, np.zeros_like(x))
    assert abs(loss) < 1e-15
    assert all(np.max(np.abs(g)) < 1e-15 for g in grads)


def test_vat_loss_matches_independent_kl(small_model):
    rng = np.random.default_rng(1)
    x, r = rng.normal(size=(1, 3)), 0.3 * rng.normal(size=(1, 3))
    other = he_init([3, 7, 5, 4], "relu", seed=9)
    loss, _, _ = vat_loss(small_model, other, x, r)
    want = kl_divergence(softmax(forward(small_model, x)[0][0]), softmax(forward(other, x + r)[0][0]))
    assert loss == pytest.approx(want, abs=1e-12)


def test_vat_loss_gradient_matches_finite_differences(small_model):
    rng = np.random.default_rng(6)
    x, r = rng.normal(size=(5, 3)), 0.2 * rng.normal(size=(5, 3))
    model = he_init([3, 7, 5, 4], "relu", seed=4)
    _, grads, _ = vat_loss(small_model, model, x, r)
    for p, g in zip(model.parameters(), grads):
        num = central_difference(lambda: vat_loss(small_model, model, x, r)[0], p)
        assert rel_error(g, num, floor=1e-8) < 1e-5


def test_stop_gradient_when_model_is_its_own_snapshot():
    model = he_init([3, 7, 5, 4], "relu", seed=4)
    frozen = model.copy()
    rng = np.random.default_rng(7)
    x, r = rng.normal(size=(3, 3)), 0.1 * rng.normal(size=(3, 3))
    _, grads, _ = vat_loss(model, model, x, r)
    # finite differences move only the trainable side; the target stays frozen
    for p, g in zip(model.parameters(), grads):
        num = central_difference(lambda: vat_loss(frozen, model, x, r)[0], p)
        assert rel_error(g, num, floor=1e-8) < 1e-5


def test_entropy_constant_links_kl_and_cross_entropy(small_model):
    rng = np.random.default_rng(3)
    x, r = rng.normal(size=(4, 3)), 0.2 * rng.normal(size=(4, 3))
    model = he_init([3, 7, 5, 4], "relu", seed=4)
    loss, _, entropy = vat_loss(small_model, model, x, r)
    p = softmax(forward(small_model, x)[0])
    logq = np.log(softmax(forward(model, x + r)[0]))
    cross = float(-(p * logq).sum(axis=1).mean())
    assert loss == pytest.approx(cross - entropy, abs=1e-12)


def test_vat_term_inactive_rows_contribute_nothing(small_model):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(4, 3))
    logp = np.log(softmax(forward(small_model, X)[0]))
    model = he_init([3, 7, 5, 4], "relu", seed=4)
    full, _ = vat_term(model, logp, X + 0.1)
    masked, _ = vat_term(model, logp, X + 0.1, active=np.array([True, True, False, False]))
    head, _ = vat_term(model, logp[:2], X[:2] + 0.1)
    assert masked == pytest.approx(head / 2, abs=1e-15)
    assert masked <= full


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_vat_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a = he_init([3, 6, 4], "relu", seed=seed)
    b = he_init([3, 6, 4], "relu", seed=seed + 1)
    x = rng.normal(size=(3, 3))
    loss, _, _ = vat_loss(a, b, x, rng.normal(size=(3, 3)))
    assert loss >= 0
