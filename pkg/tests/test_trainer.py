import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fatssl import nn
from fatssl.badgen import BadGenHyper, fake_term, place_bad_samples, true_term
from fatssl.data import make_clusters
from fatssl.nn import ConfigurationError, Layer, MlpModel, he_init
from fatssl.trainer import (METRICS_HEADER, FatConfig, TrainingDiverged, _LabeledCycler,
                            epochs_to_reach, evaluate, fat_gradients, fat_step, train,
                            warmup_lambda, write_metrics_csv)
from fatssl.vat import VatHyper, adversarial_directions, vat_term


def _cfg(**kw):
    base = dict(vat_hyper=VatHyper(0.3, 1e-6, 1), badgen_hyper=BadGenHyper(0.6, 0.01), epochs=2,
                labeled_batch=4, unlabeled_batch=25, lr=2e-3, hidden=(16, 16), seed=3)
    base.update(kw)
    return FatConfig(**base)


@pytest.fixture(scope="module")
def moons():
    return make_clusters(2, 100, 4, 0.1, "two_moons", seed=0, n_validation=40)


def _batches(ds, seed=0):
    rng = np.random.default_rng(seed)
    return ds.labeled_X[:4], ds.labeled_y[:4], ds.unlabeled_X[rng.choice(100, 20, replace=False)]


@pytest.mark.parametrize("epoch, want", [(0, 0.0), (3, 0.3), (15, 1.0)])
def test_warmup_examples(epoch, want):
    assert abs(warmup_lambda(epoch, FatConfig()) - want) < 1e-12


@given(st.integers(0, 200), st.floats(0, 0.5), st.floats(0, 3))
def test_warmup_nondecreasing_and_clipped(epoch, step, top):
    cfg = FatConfig(lambda_step=step, lambda_max=top)
    a, b = warmup_lambda(epoch, cfg), warmup_lambda(epoch + 1, cfg)
    assert 0 <= a <= b <= top


@pytest.mark.parametrize("bad", [dict(lambda_step=-0.1), dict(labeled_batch=0), dict(method="gan"),
                                 dict(lr=0.0), dict(epochs=-1)])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        FatConfig(**bad)


def test_supervised_uses_cross_entropy_only(moons):
    model = he_init([2, 16, 16, 2], seed=0)
    xl, yl, xu = _batches(moons)
    total, res, _ = fat_gradients(model, xl, yl, xu, 0.0, _cfg(method="supervised"), np.random.default_rng(0))
    z, cache = nn.forward(model, xl)
    loss, dz = nn.cross_entropy(z, yl)
    want, _ = nn.backprop(model, cache, dz)
    assert res.loss_ce == loss and res.loss_vat == 0.0
    assert all(np.array_equal(a, b) for a, b in zip(total, want))


def test_total_gradient_is_sum_of_isolated_terms(moons):
    model = he_init([2, 16, 16, 2], seed=1)
    xl, yl, xu = _batches(moons)
    cfg, lam = _cfg(), 0.7
    total, res, _ = fat_gradients(model, xl, yl, xu, lam, cfg, np.random.default_rng(5))

    z, cache = nn.forward(model, xl)
    _, dz = nn.cross_entropy(z, yl)
    g_ce, _ = nn.backprop(model, cache, dz)
    adv = adversarial_directions(model, xu, cfg.vat_hyper, np.random.default_rng(5))
    logp = nn.log_softmax(nn.forward(model, xu)[0])
    _, g_vat = vat_term(model, logp, xu + cfg.vat_hyper.epsilon * adv.directions, ~adv.degenerate)
    _, g_true = true_term(model, xu)
    bad = place_bad_samples(model, xu, adv, cfg.badgen_hyper)
    _, g_fake = fake_term(model, bad.kept_points)
    assert bad.kept.any()
    for i, t in enumerate(total):
        want = g_ce[i] + g_vat[i] + lam * (g_true[i] + g_fake[i])
        assert np.max(np.abs(t - want)) < 1e-10
    assert res.total == pytest.approx(res.loss_ce + res.loss_vat + lam * (res.loss_true + res.loss_fake))


def test_lambda_zero_step_equals_vat(moons):
    model = he_init([2, 16, 16, 2], seed=2)
    xl, yl, xu = _batches(moons)
    fat_cfg, vat_cfg = _cfg(method="fat", lambda_max=0.0), _cfg(method="vat", lambda_max=0.0)
    a = fat_step(model, fat_cfg.adam_state(model), xl, yl, xu, 0.0, fat_cfg, np.random.default_rng(1))
    b = fat_step(model, vat_cfg.adam_state(model), xl, yl, xu, 0.0, vat_cfg, np.random.default_rng(1))
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a[0].parameters(), b[0].parameters()))
    assert a[2].loss_ce == b[2].loss_ce and a[2].loss_vat == b[2].loss_vat


def test_step_leaves_snapshot_untouched(moons):
    model = he_init([2, 16, 16, 2], seed=4)
    before = [p.copy() for p in model.parameters()]
    xl, yl, xu = _batches(moons)
    cfg = _cfg()
    new, _, _ = fat_step(model, cfg.adam_state(model), xl, yl, xu, 0.5, cfg, np.random.default_rng(0))
    assert all(np.array_equal(p, q) for p, q in zip(before, model.parameters()))
    assert new is not model


def test_all_excluded_gives_zero_fake_term(moons):
    model = he_init([2, 16, 16, 2], seed=4)
    xl, yl, xu = _batches(moons)
    cfg = _cfg(badgen_hyper=BadGenHyper(0.6, 1.0))
    _, res, _ = fat_gradients(model, xl, yl, xu, 1.0, cfg, np.random.default_rng(0))
    assert res.n_kept == 0 and res.loss_fake == 0.0 and res.term_grads["fake"] is None


def test_lambda_outside_range_rejected(moons):
    model = he_init([2, 16, 16, 2], seed=4)
    cfg = _cfg(lambda_max=1.0)
    with pytest.raises(ConfigurationError):
        fat_step(model, cfg.adam_state(model), *_batches(moons), 1.5, cfg, np.random.default_rng(0))


def test_zero_epochs_returns_initial_model(moons):
    result = train(_cfg(epochs=0), moons)
    assert result.metrics == [] and result.best_epoch is None
    init = he_init([2, 16, 16, 2], seed=3)
    assert all(np.array_equal(p, q) for p, q in zip(init.parameters(), result.last_model.parameters()))


@pytest.mark.parametrize("method", ["supervised", "vat", "fat"])
def test_training_is_deterministic(moons, method):
    a = train(_cfg(method=method), moons)
    b = train(_cfg(method=method), moons)
    assert [m.row() for m in a.metrics] == [m.row() for m in b.metrics]
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.last_model.parameters(), b.last_model.parameters()))


def test_metrics_are_sane(moons, tmp_path):
    result = train(_cfg(epochs=3), moons)
    assert [m.epoch for m in result.metrics] == [0, 1, 2]
    assert [m.lam for m in result.metrics] == [0.0, 0.1, 0.2]
    for m in result.metrics:
        assert 0 <= m.val_acc <= 1 and 0 <= m.test_acc <= 1 and 0 <= m.bad_kept_frac <= 1
        assert all(np.isfinite([m.loss_ce, m.loss_vat, m.loss_true, m.loss_fake]))
        assert m.seconds == 0.0
    path = tmp_path / "metrics.csv"
    write_metrics_csv(result.metrics, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER) and len(lines) == 4


def test_best_model_tracks_validation(moons):
    seen = []
    result = train(_cfg(epochs=4), moons, on_epoch_end=lambda e, m, met: seen.append((m, met.val_acc)))
    accs = [a for _, a in seen]
    assert result.best_epoch == int(np.argmax(accs))
    assert result.best_model is seen[result.best_epoch][0]


def test_divergence_raises(moons):
    model = he_init([2, 16, 16, 2], seed=0)
    model.layers[0].weight[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(_cfg(), moons, model=model)
    assert err.value.epoch == 0 and err.value.model is not None


def test_evaluate_examples():
    ident = MlpModel([Layer(np.eye(3), np.zeros(3), "identity")])
    X = np.array([[3.0, 1.0, 0.0], [0.0, 2.0, 1.0], [0.0, 0.0, 1.0]])
    assert evaluate(ident, X, [0, 1, 2]) == 1.0
    assert evaluate(ident, X, [0, 1, 0]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        evaluate(ident, np.empty((0, 3)), [])


def test_evaluate_permuted_labels_is_chance():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4000, 2))
    y = (X[:, 0] > 0).astype(int)
    model = MlpModel([Layer(np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros(2), "identity")])
    assert evaluate(model, X, y) == 1.0
    assert abs(evaluate(model, X, rng.permutation(y)) - 0.5) < 0.05


def test_labeled_cycler_covers_each_label_per_pass():
    cyc = _LabeledCycler(5, np.random.default_rng(0))
    taken = np.concatenate([cyc.take(3) for _ in range(5)])
    for k in range(3):
        assert sorted(taken[5 * k:5 * k + 5].tolist()) == [0, 1, 2, 3, 4]


def test_epochs_to_reach():
    class M:
        def __init__(self, a):
            self.test_acc = a
    ms = [M(0.5), M(0.96), M(0.9)]
    assert epochs_to_reach(ms, 0.95) == 2
    assert epochs_to_reach(ms, 0.99) is None


def test_batch_norm_training_runs(moons):
    result = train(_cfg(batch_norm=True, epochs=2), moons)
    assert all(np.isfinite(m.loss_ce) for m in result.metrics)
    norm = result.last_model.layers[0].norm
    assert norm is not None and not np.allclose(norm.running_mean, 0.0)
