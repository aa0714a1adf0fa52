import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldmlplus.dataset import MultiViewPairSet, ScaleParams
from ldmlplus.errors import ContractError, InputError, NumericalError
from ldmlplus.metric import PsdMetric, identity_metric, psd_project
from ldmlplus.objective import HyperParams, ViewWeights, baseline_objective, objective_mv
from ldmlplus.optimizer import (
    StepSizeState,
    TrainConfig,
    grad_baseline,
    grad_m,
    grad_p,
    solve_view_weights,
    step_metric,
    train,
    train_baseline_ldml,
)
from ldmlplus.pipeline import make_pair_set
from ldmlplus.synth import SynthConfig, generate

from conftest import random_pair_set, random_psd


def _fd_matrix(fun, mat, h=1e-6):
    g = np.zeros_like(mat)
    for i in range(mat.shape[0]):
        for j in range(mat.shape[1]):
            e = np.zeros_like(mat)
            e[i, j] = h
            g[i, j] = (fun(mat + e) - fun(mat - e)) / (2 * h)
    return g


def test_grad_m_finite_difference(rng):
    ps = random_pair_set(rng, dims=(3, 4))
    hp = HyperParams(lam=0.1)
    metrics = [random_psd(rng, 3), random_psd(rng, 4)]
    p = random_psd(rng, 4)
    w, betas = ViewWeights((0.4, 0.6)), ScaleParams((1.2, 0.8))

    def j_of(mm, m=1):
        ms = list(metrics)
        ms[m] = mm
        return objective_mv(ps, ms, p, w, betas, hp)

    g = grad_m(ps, 1, metrics[1], p, betas[1], w, hp)
    np.testing.assert_allclose(g, _fd_matrix(j_of, metrics[1]), rtol=1e-6, atol=1e-9)


def test_grad_p_finite_difference(rng):
    ps = random_pair_set(rng, dims=(3, 2))
    hp = HyperParams(lam=0.3)
    metrics = [random_psd(rng, 3), random_psd(rng, 2)]
    p = random_psd(rng, 4)
    w, betas = ViewWeights((0.25, 0.75)), ScaleParams((1.0, 2.0))
    g = grad_p(ps, metrics, p, betas, w, hp)
    fd = _fd_matrix(lambda pp: objective_mv(ps, metrics, pp, w, betas, hp), p)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_grad_baseline_finite_difference(rng):
    ps = random_pair_set(rng)
    m = random_psd(rng, 3)
    g = grad_baseline(ps, m, 0.7)
    fd = _fd_matrix(lambda mm: baseline_objective(ps, mm, 0.7), m)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_scalar_backtracking_trace():
    # J(m) = (m - 1)^2 from m = 4 with eta = 8: 4 - 8*6 = -44 projects to 0
    current = PsdMetric(np.array([[4.0]]), np.array([[2.0]]))
    grad = np.array([[6.0]])
    tried = []

    def accept(c):
        val = (c.matrix[0, 0] - 1.0) ** 2
        tried.append(c.matrix[0, 0])
        return val < 9.0

    res = step_metric(current, grad, StepSizeState(8.0, cap_factor=32.0), accept)
    assert res.accepted
    assert tried == [0.0]
    assert res.metric.matrix[0, 0] == 0.0 and res.metric.rank == 0
    assert res.state.eta == 16.0 and res.state.eta_first == 8.0


def test_step_halves_until_accepted():
    current = PsdMetric(np.array([[4.0]]), np.array([[2.0]]))
    seen = []

    def accept(c):
        seen.append(c.matrix[0, 0])
        return c.matrix[0, 0] > 3.0

    res = step_metric(current, np.array([[1.0]]), StepSizeState(4.0), accept)
    np.testing.assert_allclose(seen, [0.0, 2.0, 3.0, 3.5], rtol=1e-15)
    assert res.state.eta == 1.0 and res.state.eta_first == 0.5


def test_step_growth_cap_and_fixed_state():
    current = identity_metric(1)
    state = StepSizeState(1.0, cap_factor=4.0)
    for _ in range(6):
        res = step_metric(current, np.array([[1e-3]]), state, lambda c: True)
        state = res.state
    assert state.eta == 4.0
    fixed = step_metric(current, np.array([[1e-3]]), StepSizeState(2.0, growable=False), lambda c: True)
    assert fixed.state.eta == 2.0


def test_step_stall():
    current = identity_metric(2)
    res = step_metric(current, np.zeros((2, 2)), StepSizeState(1.0), lambda c: True)
    assert not res.accepted and res.metric is current
    res = step_metric(current, np.eye(2), StepSizeState(1.0), lambda c: False, min_eta=1e-3)
    assert not res.accepted and res.state.eta == 1.0
    with pytest.raises(ContractError):
        step_metric(current, np.eye(3), StepSizeState(1.0), lambda c: True)


def _grid_best(f, r, step=1e-3):
    a = np.arange(0, 1 + step / 2, step)
    b = 1.0 - a
    keep = b >= -1e-12
    vals = a[keep] ** r * f[0] + np.clip(b[keep], 0, None) ** r * f[1]
    return vals.min()


def test_view_weights_hand_case():
    w = solve_view_weights([1.0, 8.0], 3.0)
    np.testing.assert_allclose(w.weights, [0.738796, 0.261204], atol=1e-6)
    f = np.array([1.0, 8.0])
    assert np.sum(np.asarray(w.weights) ** 3 * f) <= _grid_best(f, 3.0) + 1e-15


def test_view_weights_validation():
    with pytest.raises(InputError):
        solve_view_weights([1.0, 0.0], 3.0)
    with pytest.raises(InputError):
        solve_view_weights([1.0, 2.0], 1.0)
    assert solve_view_weights([5.0], 2.0).weights == (1.0,)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.sampled_from([2.0, 3.0, 5.0]))
def test_view_weights_beat_grid(f1, f2, r):
    f = np.array([f1, f2])
    w = np.asarray(solve_view_weights(f, r).weights)
    assert np.sum(w ** r * f) <= _grid_best(f, r) * (1 + 1e-12)


def _synth_pair_set(seed=0, n_ids=20):
    d = generate(SynthConfig(n_ids=n_ids, seed=seed))
    tr = d.train
    return make_pair_set(tr.ids, tr.cams, tr.views, tr.privileged)


def test_train_history_monotone_and_psd():
    ps = _synth_pair_set()
    events = []
    model = train(ps, TrainConfig(max_iters=40), callback=events.append)
    h = np.array(model.history)
    assert np.all(np.diff(h) <= 0)
    assert model.mode == "mvldml+" and model.n_views == 2
    assert abs(sum(model.view_weights.weights) - 1) < 1e-12
    assert {e["block"] for e in events} == {"M0", "M1", "P"}
    for e in events:
        assert e["metric"].min_eigenvalue() >= -1e-10
    for name in ("M0", "M1"):
        assert max(model.eta_trace[name]) <= 32 * model.eta_first[name]


def test_single_view_mode_and_no_beta():
    ps = _synth_pair_set().single_view(0)
    model = train(ps, TrainConfig(max_iters=5, use_beta=False))
    assert model.mode == "ldml+"
    assert model.betas.betas == (1.0,)
    assert model.view_weights.weights == (1.0,)


def test_train_requires_privileged():
    ps = _synth_pair_set().with_privileged(None)
    with pytest.raises(InputError):
        train(ps)


def test_baseline_sigma_one():
    ps = _synth_pair_set().single_view(0)
    model = train_baseline_ldml(ps, TrainConfig(max_iters=10), sigma_policy=1.0)
    assert model.sigma == 1.0 and model.mode == "ldml"
    assert model.privileged_metric is None
    assert np.all(np.diff(model.history) <= 0)


def test_identical_features_stall_without_crash():
    labels = [1, -1, -1]
    ps = MultiViewPairSet.from_diffs([np.zeros((3, 2))], np.ones((3, 2)), labels)
    model = train_baseline_ldml(ps, TrainConfig(max_iters=5), sigma_policy=1.0)
    assert model.history[0] == model.history[-1]


def test_non_finite_objective_is_numerical_error():
    ps = MultiViewPairSet.from_diffs([np.full((2, 1), 1e200)], None, [1, -1])
    with pytest.raises(NumericalError):
        train_baseline_ldml(ps, sigma_policy=1.0)


def test_training_is_deterministic():
    ps = _synth_pair_set(seed=4)
    a = train(ps, TrainConfig(max_iters=15))
    b = train(ps, TrainConfig(max_iters=15))
    assert a.history == b.history
    assert a.metrics[0] == b.metrics[0] and a.privileged_metric == b.privileged_metric


def test_config_validation():
    with pytest.raises(InputError):
        TrainConfig(cap_s=1.0)
    with pytest.raises(InputError):
        TrainConfig(max_iters=0)
    with pytest.raises(InputError):
        StepSizeState(0.0)


def test_project_of_negative_step_removes_directions():
    m = psd_project(np.eye(2) - 2.0 * np.diag([1.0, 0.0]))
    np.testing.assert_allclose(m.matrix, np.diag([0.0, 1.0]))
