import numpy as np
import pytest

from emaprune import experiment as E
from emaprune import model as M
from emaprune import theory as T
from emaprune.data import generate_gaussian_mixture, split_dataset
from emaprune.trainer import TrainConfig, train

from conftest import regression_data


def run(ds, spec, init, steps=60, **kw):
    base = dict(learning_rate=0.05, beta=0.5, pruning_ratio=0.5, epochs=100, batch_size=32,
                history_tol=0.0, seed=0)
    base.update(kw)
    return train(ds, TrainConfig(**base), spec, init, instrument=True, max_steps=steps).instrumentation


@pytest.fixture(scope="module")
def mixture():
    rng = np.random.default_rng(1)
    ds = generate_gaussian_mixture(2, 800, 6, 3, rng.standard_normal((3, 6)) * 1.5, 1.0)
    ds = split_dataset(ds, seed=0)
    spec = M.ModelSpec(6, (8,), 3, "classification", "tanh")
    return ds, spec, M.init_params(spec, 0)


@pytest.fixture(scope="module")
def inst(mixture):
    return run(*mixture)


def test_step_zero_is_exactly_zero(inst):
    r = T.check_first_order(inst, 0)
    assert np.all(r.loss_discrepancy == 0.0) and np.all(r.first_order_term == 0.0)
    assert r.displacement_norm == 0.0


def test_identity_and_displacement(inst):
    assert T.displacement_identity_residuals(inst).max() <= 1e-12
    for s in range(len(inst.steps)):
        assert T.check_first_order(inst, s).displacement_error <= 1e-12


@pytest.mark.parametrize("beta", [0.25, 0.5, 0.9])
def test_drift_bound(mixture, beta):
    r = run(*mixture, beta=beta)
    assert T.drift_bound_margins(r).min() >= 0.0
    assert T.drift_bound_margins(r, form="sum").min() >= -1e-15


def test_drift_closed_form_undefined_at_zero_beta(mixture):
    r = run(*mixture, steps=5, beta=0.0)
    with pytest.raises(T.UnsupportedRunError):
        T.drift_bound_margins(r)


def test_quadratic_model_trapezoid_exact():
    ds = regression_data()
    spec = M.ModelSpec(4, (), 1, "regression")
    r = run(ds, spec, np.zeros(5), steps=20, learning_rate=0.02)
    for s in range(1, 20):
        rep = T.check_first_order(r, s)
        scale = np.abs(rep.loss_discrepancy).max()
        assert np.abs(rep.trapezoid_residual).max() <= 1e-10 * max(scale, 1e-12)
        # the plain first-order residual is the (non-zero) second-order term
        assert np.abs(rep.residual).max() > 0


def test_residual_scaling_ratio(mixture):
    full = run(*mixture, steps=40, learning_rate=1e-4)
    half = run(*mixture, steps=40, learning_rate=5e-5)
    ratio = T.residual_scaling_ratio(full, half)
    assert ratio >= 3.5
    assert ratio <= 4.5


def test_projection_first_order_signs(inst):
    present = 0
    for s in range(1, 51):
        r = T.check_projection(inst, s, "first_order")
        assert r.a_ok is not False and r.b_ok is not False
        present += r.a_coefficient is not None
    assert present > 40


def test_projection_keep_all_is_zero(mixture):
    r = run(*mixture, steps=10, pruning_ratio=0.0)
    for s in range(1, 10):
        rep = T.check_projection(r, s, "recorded")
        # an empty group is reported as absent rather than 0
        assert rep.a_coefficient == (0.0 if rep.n_plus else None)
        assert rep.b_coefficient == (0.0 if rep.n_minus else None)
        assert rep.n_plus == rep.n_plus_selected and rep.n_minus == rep.n_minus_selected


def test_projection_absent_at_step_zero(inst):
    rep = T.check_projection(inst, 0)
    assert rep.a_coefficient is None and rep.b_coefficient is None and rep.a_ok is None


def test_projection_recorded_within_budget(inst):
    reps = [T.check_projection(inst, s, "recorded") for s in range(1, len(inst.steps))]
    ok = [r.a_ok is not False and r.b_ok is not False for r in reps if r.tau is not None]
    assert np.mean(ok) >= 0.95


def test_perpendicular_sign_test_shape(inst):
    reps = [T.check_projection(inst, s) for s in range(1, len(inst.steps))]
    out = T.perpendicular_sign_test(reps)
    assert out["n"] > 0 and 0.0 <= out["p_value"] <= 1.0
    assert T.perpendicular_sign_test([])["p_value"] is None


def test_cauchy_schwarz_and_lower_bound(inst):
    for s in range(len(inst.steps)):
        g = T.check_grand_bound(inst, s, samples="all")
        assert g.violations == 0
        assert T.check_grand_bound(inst, s).bound_violations == 0
    g0 = T.check_grand_bound(inst, 0)
    assert g0.implied_lower_bound is None and np.all(g0.dot == 0)


def test_adam_run_rejected(mixture):
    r = run(*mixture, steps=3, optimizer="adam", learning_rate=1e-3)
    for fn in (T.displacement_identity_residuals, lambda i: T.check_first_order(i, 1), lambda i: T.check_projection(i, 1)):
        with pytest.raises(T.UnsupportedRunError):
            fn(r)


def test_relative_error_floor():
    assert T.relative_error(1e-9, 2e-9).item() == pytest.approx(1e-6)
    assert T.relative_error(2.0, 1.0).item() == 0.5


# --- verify end to end on a small recipe ---------------------------------------

def small_cfg(**train):
    over = {"data": {"generate": {"source_samples": 2000, "target_samples": 800}},
            "pretrain": {"epochs": 2},
            "verify": {"steps": 40, "projection_steps": 30},
            "train": train}
    return E.resolve_config(overrides=over)


def test_verify_frozen_training():
    cfg = small_cfg()
    cfg["verify"]["learning_rate"] = 0.0
    rep = E.cmd_verify(cfg)
    assert rep["run"]["max_score"] == 0.0 and rep["run"]["max_abs_residual"] == 0.0
    assert rep["checks"]["displacement_identity"]["passed"]


def test_verify_full_pace_skips_drift_bound():
    rep = E.cmd_verify(small_cfg(beta=1.0))
    drift = rep["checks"]["drift_bound"]["per_beta"]["1.0"]
    assert drift["passed"] is None and "skipped" in drift["notice"]
    assert rep["checks"]["residual_scaling"]["passed"] is None
    assert rep["passed"]


def test_verify_forces_sgd_with_notice():
    rep = E.cmd_verify(small_cfg(optimizer="adam"))
    assert any("sgd" in n for n in rep["notices"])
