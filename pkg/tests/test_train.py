import mpmath as mp
import numpy as np
import pytest

from vaue.data import Batch, gen_synthetic_domains, split_train_val, SyntheticSpec
from vaue.model import ExtractorSpec, LayerSpec, Model, parameter_checksum
from vaue.numcore import Rng, Tensor
from vaue.train import (
    AdamState,
    EmaState,
    TrainConfig,
    TrainingAborted,
    domain_loss,
    ema_update,
    evaluate,
    fit,
    leave_one_out_alpha,
    objective,
    optimizer_step,
)

mp.mp.dps = 40


def _flat_model(biases, dim=1, num_classes=2):
    """Linear extractor with zero weights: every head sees a zero feature, logits equal its bias."""
    spec = ExtractorSpec((dim,), (LayerSpec("linear", dim, act="none"),))
    model = Model.init(spec, num_classes, len(biases), Rng(0))
    for t in model.parameters():
        t.data = np.zeros(t.shape)
    for head, b in zip(model.heads, biases):
        head.bias.data = np.asarray(b, dtype=np.float64)
    return model


# -- independent oracle --------------------------------------------------------


def _ece_oracle(alpha, y, lam=0.01):
    alpha = [mp.mpf(a) for a in alpha]
    s = sum(alpha)
    fit_term = sum(yj * (mp.digamma(s) - mp.digamma(a)) for yj, a in zip(y, alpha))
    at = [yj + (1 - yj) * a for yj, a in zip(y, alpha)]
    st = sum(at)
    kl = mp.loggamma(st) - mp.loggamma(len(at)) - sum(mp.loggamma(a) for a in at)
    kl += sum((a - 1) * (mp.digamma(a) - mp.digamma(st)) for a in at)
    return fit_term + lam * kl


def _fused_alpha_oracle(evidences):
    """Reduced Dempster fold over opinions written out by hand."""
    c = len(evidences[0])
    ops = []
    for e in evidences:
        e = [mp.mpf(x) for x in e]
        s = sum(e) + c
        ops.append(([x / s for x in e], mp.mpf(c) / s))
    b, u = ops[0]
    for b2, u2 in ops[1:]:
        k = sum(b[i] * b2[j] for i in range(c) for j in range(c) if i != j)
        b = [(b[i] * b2[i] + b[i] * u2 + b2[i] * u) / (1 - k) for i in range(c)]
        u = u * u2 / (1 - k)
    s = c / u
    return [bi * s + 1 for bi in b]


def _domain_loss_oracle(biases, labels_by_domain, cross=True):
    ev_heads = [[mp.e ** mp.mpf(v) for v in b] for b in biases]
    c = len(biases[0])
    terms = []
    for i, labels in labels_by_domain.items():
        vals = []
        for lab in labels:
            y = [1 if j == lab else 0 for j in range(c)]
            vals.append(_ece_oracle([e + 1 for e in ev_heads[i]], y))
        term = sum(vals) / len(vals)
        if cross:
            alpha = _fused_alpha_oracle([ev_heads[j] for j in range(len(biases)) if j != i])
            term += sum(_ece_oracle(alpha, [1 if j == lab else 0 for j in range(c)]) for lab in labels) / len(labels)
        terms.append(term)
    return sum(terms) / len(terms)


# -- fusion helpers ----------------------------------------------------------------


def test_leave_one_out_two_heads_is_the_other_head():
    e1, e2 = np.array([2.0, 0.5]), np.array([0.1, 4.0])
    alpha = leave_one_out_alpha([e1, e2], 0)
    np.testing.assert_allclose(alpha.alpha, e2 + 1.0, rtol=1e-12)


def test_leave_one_out_vacuous_others():
    alpha = leave_one_out_alpha([np.array([5.0, 1.0]), np.zeros(2), np.zeros(2)], 0)
    np.testing.assert_allclose(alpha.alpha, [1.0, 1.0], atol=1e-12)


def test_leave_one_out_worked_pair():
    # two (1/4, 1/4 | 1/2) opinions: K = 1/8, b = 5/14, u = 2/7, so S = 7
    alpha = leave_one_out_alpha([np.array([9.0, 0.0]), np.ones(2), np.ones(2)], 0)
    np.testing.assert_allclose(alpha.alpha, [3.5, 3.5], rtol=1e-12)


def test_leave_one_out_rejects_bad_input():
    with pytest.raises(ValueError):
        leave_one_out_alpha([np.ones(2)], 0)
    with pytest.raises(IndexError):
        leave_one_out_alpha([np.ones(2), np.ones(2)], 2)


# -- domain loss against the oracle --------------------------------------------------


def test_near_vacuous_heads_give_one_per_term():
    model = _flat_model([[-10.0, -10.0]] * 3)
    batch = Batch(np.zeros((4, 1)), np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]))
    loss, skipped = domain_loss(batch, model, TrainConfig())
    assert skipped == 0
    assert loss.item() == pytest.approx(2.0, abs=1e-3)
    solo, _ = domain_loss(batch, model, TrainConfig(use_cross_domain=False))
    assert solo.item() == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("cross", [True, False])
def test_micro_case_matches_oracle(cross):
    biases = [[np.log(3.0), 0.0], [0.0, np.log(3.0)], [0.5, -0.25]]
    labels = np.array([0, 1, 1, 0, 1])
    domains = np.array([0, 0, 1, 1, 2])
    model = _flat_model(biases)
    loss, _ = domain_loss(Batch(np.zeros((5, 1)), labels, domains), model, TrainConfig(use_cross_domain=cross))
    by_domain = {0: [0, 1], 1: [1, 0], 2: [1]}
    assert loss.item() == pytest.approx(float(_domain_loss_oracle(biases, by_domain, cross)), rel=1e-10)


def test_single_feature_total_equals_domain_loss():
    model = _flat_model([[0.3, -0.2], [0.1, 0.4]])
    batch = Batch(np.zeros((4, 1)), np.array([0, 1, 1, 0]), np.array([0, 0, 1, 1]))
    cfg = TrainConfig(use_va=False)
    total, report = objective(batch, model, cfg)
    assert report.decor == 0.0
    assert total.item() == pytest.approx(domain_loss(batch, model, cfg)[0].item(), rel=1e-14)


def test_average_fusion_variant_differs_from_dempster():
    biases = [[1.0, 0.0], [0.0, 1.0], [2.0, 0.5]]
    model = _flat_model(biases)
    batch = Batch(np.zeros((2, 1)), np.array([0, 1]), np.array([0, 0]))
    a = domain_loss(batch, model, TrainConfig())[0].item()
    b = domain_loss(batch, model, TrainConfig(use_dempster=False))[0].item()
    assert a != pytest.approx(b, rel=1e-6)


# -- optimiser and EMA ------------------------------------------------------------


def test_adamw_zero_weight_decay_zero_grad_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), True)
    state = AdamState.zeros_like([p])
    optimizer_step([p], [np.zeros(2)], state, TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_constant_gradient_step_is_learning_rate():
    p = Tensor(np.zeros(3), True)
    state = AdamState.zeros_like([p])
    cfg = TrainConfig(learning_rate=0.01, weight_decay=0.0)
    prev = p.data.copy()
    for _ in range(50):
        optimizer_step([p], [np.array([1.0, -3.0, 0.5])], state, cfg)
        step = p.data - prev
        prev = p.data.copy()
        np.testing.assert_allclose(np.abs(step), 0.01, rtol=1e-5)


def test_adamw_decay_is_decoupled_geometric():
    p = Tensor(np.array([2.0, -4.0]), True)
    state = AdamState.zeros_like([p])
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
    for _ in range(10):
        optimizer_step([p], [np.zeros(2)], state, cfg)
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * 0.95**10, rtol=1e-12)


def test_adamw_shape_checks():
    p = Tensor(np.zeros(2), True)
    with pytest.raises(ValueError):
        optimizer_step([p], [np.zeros(3)], AdamState.zeros_like([p]), TrainConfig())


def test_ema_fixed_point_and_geometric_decay():
    ema = EmaState.from_params([np.full(2, 5.0)], momentum=0.9)
    for _ in range(20):
        ema_update(ema, [np.full(2, 5.0)])
    np.testing.assert_allclose(ema.shadow[0], 5.0, rtol=1e-15)
    ema = EmaState.from_params([np.ones(1)], momentum=0.999)
    for _ in range(4605):
        ema_update(ema, [np.zeros(1)])
    assert ema.shadow[0][0] == pytest.approx(0.999**4605, rel=1e-9)
    assert ema.shadow[0][0] == pytest.approx(0.01, abs=1e-4)


def test_ema_zero_momentum_tracks_params():
    ema = EmaState.from_params([np.zeros(3)], momentum=0.0)
    ema_update(ema, [np.array([1.0, 2.0, 3.0])])
    np.testing.assert_array_equal(ema.shadow[0], [1.0, 2.0, 3.0])


def test_ema_warmup_ramps_momentum():
    ema = EmaState.from_params([np.zeros(1)], momentum=0.999, warmup=True)
    assert ema.effective_momentum == pytest.approx(0.1)
    ema.updates = 10_000
    assert ema.effective_momentum == 0.999


# -- the loop -------------------------------------------------------------------


def _vector_sources(seed=0, n=120):
    spec = SyntheticSpec(generator="rotated-wedges", num_classes=2, num_domains=3, samples_per_domain=n, vector_dim=2, semantic_noise=0.2, style_noise=0.0)
    doms = gen_synthetic_domains(spec, Rng(seed))
    splits = [split_train_val(d, 0.8, Rng(seed).fork("split", d.domain_id)) for d in doms[1:]]
    return [s[0] for s in splits], [s[1] for s in splits], doms[0]


def _mlp_model(n_heads, rng):
    spec = ExtractorSpec((2,), (LayerSpec("linear", 8), LayerSpec("linear", 4, act="none")))
    return Model.init(spec, 2, n_heads, rng)


def test_loss_decreases_on_separable_data():
    train, val, test = _vector_sources()
    model = _mlp_model(2, Rng(1))
    cfg = TrainConfig(iterations=200, eval_interval=200, batch_per_domain=16, learning_rate=1e-2, use_va=False)
    result = fit(model, train, val, test, cfg, Rng(2))
    assert np.mean(result.losses[-20:]) < 0.7 * np.mean(result.losses[:20])
    assert result.best_val_acc > 0.9


def test_erm_variant_learns_the_smoke_data():
    train, val, test = _vector_sources()
    model = _mlp_model(2, Rng(1))
    cfg = TrainConfig(iterations=200, eval_interval=50, batch_per_domain=16, learning_rate=1e-2, use_va=False, use_evidential=False, use_decor=False)
    result = fit(model, train, val, test, cfg, Rng(2))
    assert evaluate(test, model.with_params(result.best_state), cfg)["accuracy"] >= 0.95
    assert [r["iteration"] for r in result.rows] == [50, 100, 150, 200]


def test_fit_is_deterministic():
    train, val, test = _vector_sources()
    cfg = TrainConfig(iterations=30, eval_interval=10, batch_per_domain=8, use_va=False)
    a = fit(_mlp_model(2, Rng(1)), train, val, test, cfg, Rng(2))
    b = fit(_mlp_model(2, Rng(1)), train, val, test, cfg, Rng(2))
    assert parameter_checksum(a.best_state) == parameter_checksum(b.best_state)
    assert a.rows == b.rows


def test_fit_aborts_on_non_finite():
    train, val, test = _vector_sources()
    model = _mlp_model(2, Rng(1))
    model.layer_params[0][0].data[0, 0] = np.nan
    with pytest.raises(TrainingAborted, match="iteration 1"):
        fit(model, train, val, test, TrainConfig(iterations=5, batch_per_domain=4, use_va=False), Rng(0))


def test_fit_validates_heads_and_splits():
    train, val, test = _vector_sources()
    with pytest.raises(ValueError):
        fit(_mlp_model(3, Rng(1)), train, val, test, TrainConfig(), Rng(0))
    with pytest.raises(ValueError):
        fit(_mlp_model(2, Rng(1)), train, [], test, TrainConfig(), Rng(0))
