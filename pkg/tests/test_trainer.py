import dataclasses

import numpy as np
import pytest

from emaprune import model as M
from emaprune.data import Dataset, generate_gaussian_mixture, split_dataset
from emaprune.errors import PreconditionError, TrainingAbort
from emaprune.pruning import keep_count
from emaprune.trainer import EpochRecord, TrainConfig, evaluate, train

from conftest import regression_data


def strip_time(records):
    return [dataclasses.replace(r, wall_time_seconds=0.0) for r in records]


def cfg(**kw):
    base = dict(learning_rate=0.1, epochs=3, batch_size=16, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_ratio_zero_matches_plain_sgd(small_data, small_spec):
    init = M.init_params(small_spec, 1)
    c = cfg(pruning_ratio=0.0)
    res = train(small_data, c, small_spec, init)
    # plain mini-batch SGD replayed with the trainer's shuffle stream
    shuffle = np.random.default_rng(np.random.SeedSequence(c.seed).spawn(2)[0])
    tr = small_data.split_ids("train")
    theta = init.copy()
    for _ in range(c.epochs):
        order = tr[shuffle.permutation(len(tr))]
        for i in range(0, len(order), c.batch_size):
            ids = order[i:i + c.batch_size]
            _, g = M.mean_gradient(theta, small_data.X[ids], small_data.y[ids], small_spec)
            theta = theta - c.learning_rate * g
    assert np.array_equal(res.pair.online, theta)
    other = train(small_data, cfg(pruning_ratio=0.0, scorer="soft_random"), small_spec, init)
    assert np.array_equal(other.pair.online, theta)


def test_soft_random_reproducible(small_data, small_spec):
    init = M.init_params(small_spec, 1)
    c = cfg(pruning_ratio=0.5, scorer="soft_random")
    a = train(small_data, c, small_spec, init)
    b = train(small_data, c, small_spec, init)
    assert strip_time(a.records) == strip_time(b.records)
    assert np.array_equal(a.pair.online, b.pair.online)


@pytest.mark.parametrize("mode", ["batch", "epoch"])
@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_reproducible_across_modes(small_data, small_spec, mode, optimizer):
    init = M.init_params(small_spec, 2)
    c = cfg(pruning_ratio=0.4, selection_mode=mode, optimizer=optimizer,
            learning_rate=0.1 if optimizer == "sgd" else 0.01)
    a = train(small_data, c, small_spec, init)
    b = train(small_data, c, small_spec, init)
    if optimizer == "sgd":
        assert strip_time(a.records) == strip_time(b.records)
    else:
        np.testing.assert_allclose(a.pair.online, b.pair.online, rtol=0, atol=1e-12)


def test_single_step_hand_replay(small_data, small_spec):
    init = M.init_params(small_spec, 5)
    c = cfg(pruning_ratio=0.5, epochs=1, batch_size=10, learning_rate=0.2)
    res = train(small_data, c, small_spec, init, max_steps=1, instrument=True)
    step = res.instrumentation.steps[0]
    ids = step.batch_ids
    # theta_0 == xi_0, so every score is 0 and the tie-break keeps the 5 smallest ids
    assert np.all(step.scores == 0.0)
    kept = np.sort(ids)[:5]
    g = M.batch_gradient(init, [small_data.sample(i) for i in kept], small_spec)
    assert np.array_equal(np.sort(ids[step.selected]), kept)
    np.testing.assert_allclose(res.pair.online, init - 0.2 * g, rtol=0, atol=1e-15)
    assert res.steps == 1


def test_epoch_record_fields(small_data, small_spec):
    res = train(small_data, cfg(pruning_ratio=0.3), small_spec, M.init_params(small_spec, 0))
    assert [r.epoch for r in res.records] == [0, 1, 2]
    n_train = len(small_data.split_ids("train"))
    full, rest = divmod(n_train, 16)
    expected = full * keep_count(16, 0.7) + (keep_count(rest, 0.7) if rest else 0)
    for r in res.records:
        assert isinstance(r, EpochRecord)
        assert r.selected_count == expected
        assert r.wall_time_seconds > 0
        lo, mean, hi = r.delta_stats
        assert 0 <= lo <= mean <= hi
        assert 0 <= r.val_metric <= 1 and 0 <= r.test_metric <= 1


def test_decisions_reported(small_data, small_spec):
    seen = []
    train(small_data, cfg(pruning_ratio=0.6, epochs=1), small_spec, M.init_params(small_spec, 0),
          on_decision=seen.append)
    assert seen
    for d in seen:
        assert len(d.selected_ids) == keep_count(len(d.scores), 0.4)
        assert d.delta == min(d.scores[i] for i in d.selected_ids)


def test_epoch_mode_first_epoch_takes_lowest_ids(small_data, small_spec):
    seen = []
    train(small_data, cfg(pruning_ratio=0.5, epochs=2, selection_mode="epoch"), small_spec,
          M.init_params(small_spec, 0), on_decision=seen.append)
    tr = small_data.split_ids("train")
    k = keep_count(len(tr), 0.5)
    assert len(seen) == 2
    assert sorted(seen[0].selected_ids) == np.sort(tr)[:k].tolist()
    assert len(seen[1].selected_ids) == k


def test_epoch_mode_updates_only_trained_scores(small_data, small_spec):
    res = train(small_data, cfg(pruning_ratio=0.5, epochs=1, selection_mode="epoch"), small_spec,
                M.init_params(small_spec, 0))
    tr = small_data.split_ids("train")
    untouched = np.sort(tr)[keep_count(len(tr), 0.5):]
    assert np.all(res.scores[untouched] == 1.0)


def test_regression_uses_mae():
    ds = regression_data()
    spec = M.ModelSpec(4, (), 1, "regression")
    res = train(ds, cfg(pruning_ratio=0.2, learning_rate=0.05, epochs=20), spec, np.zeros(5))
    assert res.records[-1].test_metric < res.records[0].test_metric
    te = ds.split_ids("test")
    assert res.records[-1].test_metric == evaluate(res.pair.online, ds.X[te], ds.y[te], spec, "mae")


def test_binary_uses_roc_auc():
    means = np.array([[1.0, 0.0], [-1.0, 0.0]])
    ds = split_dataset(generate_gaussian_mixture(0, 200, 2, 2, means, 1.0), seed=0)
    spec = M.ModelSpec(2, (), 2)
    res = train(ds, cfg(epochs=2), spec, M.init_params(spec, 0))
    te = ds.split_ids("test")
    assert res.records[-1].test_metric == evaluate(res.pair.online, ds.X[te], ds.y[te], spec, "roc_auc")


def test_divergence_aborts_with_location():
    X = np.array([[1e3], [-1e3], [2e3], [5e2]] * 10)
    ds = split_dataset(Dataset(X=X, y=X[:, 0] * 1e3, task="regression"), seed=0)
    spec = M.ModelSpec(1, (), 1, "regression")
    with pytest.raises(TrainingAbort) as e:
        train(ds, cfg(learning_rate=10.0, epochs=50, batch_size=4), spec, np.zeros(2))
    assert e.value.epoch is not None and e.value.batch is not None


@pytest.mark.parametrize("bad", [dict(pruning_ratio=1.0), dict(beta=1.5), dict(learning_rate=-1.0),
                                 dict(optimizer="lbfgs"), dict(selection_mode="static"),
                                 dict(scorer="nope"), dict(epochs=0)])
def test_invalid_config(bad, small_data, small_spec):
    with pytest.raises(PreconditionError):
        train(small_data, cfg(**bad), small_spec, M.init_params(small_spec, 0))


def test_unsplit_dataset_rejected(small_spec):
    ds = Dataset(X=np.zeros((4, 5)), y=np.zeros(4), num_classes=3)
    with pytest.raises(PreconditionError):
        train(ds, cfg(), small_spec, M.init_params(small_spec, 0))


def test_instrumentation_displacement(small_data, small_spec):
    res = train(small_data, cfg(pruning_ratio=0.5, history_tol=0.0), small_spec,
                M.init_params(small_spec, 0), instrument=True, max_steps=12)
    inst = res.instrumentation
    for s in inst.steps:
        np.testing.assert_allclose(s.xi - s.theta, inst.alpha * s.v_ema, rtol=0, atol=1e-15)
    assert len(inst.steps) == 12 == res.steps
