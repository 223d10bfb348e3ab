import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fractalnet import droppath
from fractalnet.dataio import synth_splits
from fractalnet.engine import ParameterStore, backward, forward, init_params, update_running_stats
from fractalnet.topology import assemble_network, column_view, structural_stats
from fractalnet.trainer import (
    MetricsRecord,
    TrainingDiverged,
    TrainPlan,
    anytime_profile,
    default_dropout,
    evaluate,
    lr_schedule,
    monitor_columns,
    sgd_momentum_step,
    train,
)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_splits(0, 10, 4, 8)


def tiny_net(C=3, B=2, ch=(4, 4)):
    return assemble_network(C, B, ch, 4, input_channels=1, input_size=8)


def quick_plan(**kw):
    base = dict(epochs=2, batch_size=8, record_time=False)
    return TrainPlan(**(base | kw))


def one_param_store(w, v=None):
    return ParameterStore({"w": np.array(w, float)}, {}, {"w": np.array(v if v is not None else np.zeros_like(w), float)})


# -- SGD ----------------------------------------------------------------------------

def test_first_step_moves_by_lr_times_grad():
    s = one_param_store([1.0, 2.0])
    sgd_momentum_step(s, {"w": np.array([0.5, -1.0])}, lr=0.1, momentum=0.9)
    np.testing.assert_array_equal(s.params["w"], [1.0 - 0.05, 2.0 + 0.1])


def test_zero_gradient_decays_velocity():
    s = one_param_store([0.0], [1.0])
    sgd_momentum_step(s, {"w": np.zeros(1)}, lr=0.1, momentum=0.9)
    assert s.velocity["w"][0] == 0.9 and s.params["w"][0] == -0.9
    sgd_momentum_step(s, {"w": np.zeros(1)}, lr=0.1, momentum=0.9)
    assert s.velocity["w"][0] == pytest.approx(0.81) and s.params["w"][0] == pytest.approx(-1.71)


def test_two_steps_constant_gradient():
    lr, m, g = 0.1, 0.9, 2.0
    s = one_param_store([0.0])
    for _ in range(2):
        sgd_momentum_step(s, {"w": np.array([g])}, lr, m)
    assert s.params["w"][0] == pytest.approx(-lr * g * (2 + m), rel=1e-15)


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_momentum_step(one_param_store([0.0, 0.0]), {"w": np.zeros(3)}, 0.1, 0.9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.floats(0, 0.99))
def test_zero_lr_never_moves_weights(seed, m):
    rng = np.random.default_rng(seed)
    s = one_param_store(rng.normal(size=4))
    before = s.params["w"].copy()
    for _ in range(3):
        sgd_momentum_step(s, {"w": rng.normal(size=4) * 1e3}, 0.0, m)
    np.testing.assert_array_equal(s.params["w"], before)


# -- learning-rate schedule ------------------------------------------------------------

def test_schedule_e400():
    got = [lr_schedule(e, 400, 0.02) for e in range(400)]
    want = [0.02] * 200 + [0.002] * 100 + [2e-4] * 50 + [2e-5] * 25 + [2e-6] * 25
    assert got == want
    assert len(set(got)) == 5


def test_schedule_starts_at_base():
    assert all(lr_schedule(0, e, 0.3) == 0.3 for e in (1, 2, 7, 400))


def test_explicit_milestones():
    got = [lr_schedule(e, 70, 0.1, (50, 65)) for e in range(70)]
    drops = [e for e in range(1, 70) if got[e] < got[e - 1]]
    assert drops == [50, 65]
    assert got[-1] == pytest.approx(0.001)


@settings(max_examples=50, deadline=None)
@given(E=st.integers(1, 1000), data=st.data())
def test_schedule_is_non_increasing(E, data):
    e = data.draw(st.integers(0, E - 2)) if E > 1 else 0
    assert lr_schedule(e + 1, E, 0.02) <= lr_schedule(e, E, 0.02)


# -- plan --------------------------------------------------------------------------

def test_default_dropout_b5():
    assert default_dropout(5) == (0.0, 0.1, 0.2, 0.3, 0.4)
    assert TrainPlan().dropout_rates(5) == (0.0, 0.1, 0.2, 0.3, 0.4)


@pytest.mark.parametrize("kw", [dict(dropout=(0.1,)), dict(dropout=(0.0, 1.0)),
                                dict(batch_size=0), dict(local_drop_rate=1.0), dict(precision="f16")])
def test_plan_validation(kw):
    with pytest.raises(ValueError):
        quick_plan(**kw).validate(2)


def test_metrics_record_json_fields():
    rec = MetricsRecord(3, 0.02, 1.5, 1.2, 40.0, [1.0, 2.0], [10.0, 20.0], 0.14, 0.0)
    d = json.loads(rec.to_json())
    assert set(d) == {"epoch", "lr", "train_loss", "test_loss", "test_error_pct", "per_column_loss",
                      "per_column_error_pct", "effective_local_drop_rate", "wall_seconds"}


# -- train -------------------------------------------------------------------------

def test_identical_seeds_identical_results(tiny_data):
    tr, te = tiny_data
    net = tiny_net()
    a, ra = train(net, quick_plan(), tr, te)
    b, rb = train(net, quick_plan(), tr, te)
    assert a.equal(b)
    assert [r.to_json() for r in ra] == [r.to_json() for r in rb]
    c, _ = train(net, quick_plan(seed=1), tr, te)
    assert not a.equal(c)


def test_records_have_per_column_entries(tiny_data):
    tr, te = tiny_data
    _, recs = train(tiny_net(), quick_plan(epochs=3), tr, te)
    assert [r.epoch for r in recs] == [0, 1, 2]
    for r in recs:
        assert len(r.per_column_loss) == len(r.per_column_error_pct) == 3
        assert all(0 <= e <= 100 for e in r.per_column_error_pct if e is not None)
        assert math.isfinite(r.train_loss)


def test_effective_local_rate_is_recorded(tiny_data):
    tr, _ = tiny_data
    _, recs = train(tiny_net(C=4, ch=(2, 2)), quick_plan(epochs=1, batch_size=1, local_fraction=1.0), tr)
    assert 0.10 < recs[0].effective_local_drop_rate < 0.15


def test_zero_lr_keeps_parameters(tiny_data):
    tr, _ = tiny_data
    net = tiny_net()
    start = init_params(net, np.random.default_rng(0))
    store, _ = train(net, quick_plan(base_lr=0.0), tr, store=start.copy())
    for k, v in start.params.items():
        assert v.tobytes() == store.params[k].tobytes()


def test_all_active_masks_reduce_to_plain_training(tiny_data):
    tr, _ = tiny_data
    net = tiny_net()
    plain, _ = train(net, quick_plan(droppath=False, dropout=(0.0, 0.0)), tr)
    masked, _ = train(net, quick_plan(local_fraction=1.0, local_drop_rate=0.0, dropout=(0.0, 0.0)), tr)
    assert plain.equal(masked)


def test_simultaneous_mode_averages_all_masks(tiny_data):
    tr, _ = tiny_data
    net = tiny_net(C=2, B=1, ch=(3,))
    plan = quick_plan(epochs=1, batch_size=len(tr), simultaneous=True, dropout=(0.0,), precision="f64")
    got, _ = train(net, plan, tr)

    init_ss, order_ss, mask_ss, _, _ = np.random.SeedSequence(plan.seed).spawn(5)
    store = init_params(net, np.random.default_rng(init_ss), "f64")
    idx = np.random.default_rng(order_ss).permutation(len(tr))
    x, y = tr.images[idx], tr.labels[idx]
    masks = droppath.simultaneous_samples(net, np.random.default_rng(mask_ss), plan.local_drop_rate)
    grads = [backward(net, store, forward(net, store, x, y, m)) for m in masks]
    mean = {k: sum(g[k] for g in grads) / len(grads) for k in grads[0]}
    for k, w in store.params.items():
        np.testing.assert_allclose(got.params[k], w - plan.base_lr * mean[k], rtol=1e-12, atol=1e-15)


def test_overfits_small_set_without_regularization():
    tr, _ = synth_splits(0, 50, 4, 16)
    net = assemble_network(2, 2, (8, 16), 4, input_channels=1, input_size=16)
    plan = TrainPlan(epochs=50, droppath=False, dropout=(0.0, 0.0), monitor=False, record_time=False)
    _, recs = train(net, plan, tr)
    assert min(r.train_loss for r in recs) < 0.05


def test_divergence_raises_with_last_good(tiny_data):
    tr, te = tiny_data
    with pytest.raises(TrainingDiverged) as info:
        train(tiny_net(), quick_plan(base_lr=1e8, epochs=4), tr, te)
    good = info.value.last_good
    assert all(np.isfinite(v).all() for v in good.params.values())


def test_shape_mismatch_rejected(tiny_data):
    tr, _ = tiny_data
    net = assemble_network(2, 1, (2,), 4, input_channels=3, input_size=8)
    with pytest.raises(ValueError):
        train(net, quick_plan(dropout=(0.0,)), tr)


# -- evaluate / monitor / anytime -------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tiny_data):
    tr, te = tiny_data
    net = tiny_net(C=3, ch=(4, 4))
    store, _ = train(net, quick_plan(epochs=3, batch_size=4), tr)
    return net, store, te


def test_evaluate_is_repeatable(trained):
    net, store, te = trained
    assert evaluate(net, store, te) == evaluate(net, store, te)


def test_monitor_entries_match_column_views(trained):
    net, store, te = trained
    rows = monitor_columns(net, store, te)
    assert [r["column"] for r in rows] == [1, 2, 3, "full"]
    for c in (1, 2, 3):
        view = column_view(net, c)
        r = evaluate(view, store.transplant(view), te)
        assert (rows[c - 1]["loss"], rows[c - 1]["error_pct"]) == (r.loss, r.error_pct)
    assert rows[-1]["loss"] == evaluate(net, store, te).loss


def test_single_column_monitor_equals_full(tiny_data):
    tr, te = tiny_data
    net = assemble_network(1, 2, (4, 4), 4, input_channels=1, input_size=8)
    store, _ = train(net, quick_plan(), tr)
    rows = monitor_columns(net, store, te)
    assert len(rows) == 2
    assert (rows[0]["loss"], rows[0]["error_pct"]) == (rows[1]["loss"], rows[1]["error_pct"])


def test_anytime_rows(trained):
    net, store, te = trained
    rows = anytime_profile(net, store, te)
    flops = [r["flops"] for r in rows]
    assert flops == sorted(set(flops))
    r = evaluate(net, store, te, droppath.global_mask(net, 3))
    assert (rows[-1]["loss"], rows[-1]["error_pct"]) == (r.loss, r.error_pct)
    assert [r["depth"] for r in rows] == [2, 4, 8]


def test_flop_ratio_near_two_for_uniform_channels():
    net = assemble_network(4, 5, (16,) * 5, 10, input_channels=16, input_size=32)
    flops = [structural_stats(column_view(net, c)).flop_count for c in range(1, 5)]
    ratios = [b / a for a, b in zip(flops, flops[1:])]
    assert all(1.8 < q <= 2.0 for q in ratios)


def test_untrained_network_predicts_uniformly_on_average():
    # Random init is symmetric across classes: over seeds the mean predicted
    # distribution is uniform, so its cross-entropy is ln K and error is (K-1)/K.
    tr, te = synth_splits(0, 50, 4, 16)
    net = assemble_network(3, 2, (8, 16), 4, input_channels=1, input_size=16)
    probs, errors = [], []
    for seed in range(20):
        store = init_params(net, np.random.default_rng(seed), "f64")
        update_running_stats(store, forward(net, store, tr.images[:100]), momentum=0.0)
        logits = forward(net, store, te.images, mode="eval").logits
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs.append(p / p.sum(axis=1, keepdims=True))
        errors.append(evaluate(net, store, te).error_pct)
    mean_p = np.mean(probs, axis=0)
    loss = -np.mean(np.log(mean_p[np.arange(len(te)), te.labels]))
    assert abs(loss - math.log(4)) < 0.1
    assert abs(np.mean(errors) - 75.0) < 5.0


def test_untrained_monitor_entries_near_log_k():
    tr, te = synth_splits(1, 25, 4, 8)
    net = tiny_net(C=3, ch=(4, 4))
    store = init_params(net, np.random.default_rng(0), "f64")
    for c in range(1, 4):
        update_running_stats(store, forward(net, store, tr.images, mask=droppath.global_mask(net, c)), 0.0)
    rows = monitor_columns(net, store, te)
    assert len(rows) == 4
    # per seed the Xavier head adds logit variance on top of ln K
    assert all(math.log(4) - 0.1 < r["loss"] < math.log(4) + 1.5 for r in rows)
