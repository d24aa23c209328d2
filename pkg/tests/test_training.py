import math

import numpy as np
import pytest
from conftest import random_forcing, store_scaling

from mcpgraph.architectures import build, init_params
from mcpgraph.core import ScalingSet, simulate
from mcpgraph.forcing import ForcingSeries, Subset, split_timesteps
from mcpgraph.synthetic import synthetic_forcing, twin_observations
from mcpgraph.training import (
    AdamState,
    AllRunsFailed,
    Problem,
    TrainConfig,
    TrainRun,
    adam_step,
    finite_difference_gradient,
    gradient,
    groundwater_initial_state,
    loss_eval,
    preliminary_stage,
    select_best,
    stage_setup,
    train,
    train_multi_seed,
)

SHORT = TrainConfig(epochs=40, seeds=2)


@pytest.fixture(scope="module")
def twin():
    f = synthetic_forcing(8, seed=3)
    g = build("MA2")
    sc = ScalingSet.from_forcing(f, {"soil": (60.0, 30.0)})
    true = init_params(g, 21).values
    data = twin_observations(g, true, f, sc, noise=0.0)
    return g, true, sc, data, split_timesteps(data)


def test_adam_zero_gradient_is_fixed_point():
    p = np.array([0.3, -1.2])
    new, st = adam_step(AdamState.zeros(2), p, np.zeros(2), 0.25)
    np.testing.assert_array_equal(new, p)
    assert st.t == 1


def test_adam_first_step_closed_form():
    p = np.array([0.0, 1.0, -2.0])
    g = np.array([3.0, -0.01, 1e-3])
    new, _ = adam_step(AdamState.zeros(3), p, g, 0.25)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(new - p, -0.25 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.all(np.sign(new - p) == -np.sign(g))
    again, _ = adam_step(AdamState.zeros(3), p, g, 0.25)
    assert again.tobytes() == new.tobytes()


def test_learning_rate_schedule():
    c = TrainConfig()
    assert (c.learning_rate(1), c.learning_rate(300), c.learning_rate(301), c.learning_rate(2000)) == (
        0.25,
        0.25,
        0.125,
        0.125,
    )
    assert (c.epochs, c.seeds, c.beta1, c.beta2, c.eps) == (2000, 10, 0.9, 0.999, 1e-8)


def test_loss_zero_at_truth(twin):
    g, true, sc, data, masks = twin
    assert loss_eval(g, true, data, masks, sc) == pytest.approx(0.0, abs=1e-12)


def test_loss_finite_nonnegative(twin):
    g, _, sc, data, masks = twin
    for seed in range(5):
        v = loss_eval(g, init_params(g, seed), data, masks, sc)
        assert math.isfinite(v) and v >= 0


def test_gradient_matches_finite_differences_ma2():
    f = random_forcing(200, seed=5)
    g = build("MA2")
    labels = np.full(len(f), Subset.TRAIN)
    sc = store_scaling(f)
    pr = Problem(g, f, labels, sc, {"soil": 30.0})
    for seed in range(3):
        p = init_params(g, seed).values
        _, grad = pr.loss_and_grad(p)
        fd = finite_difference_gradient(pr.loss, p)
        assert np.max(np.abs(grad - fd)) / np.max(np.abs(fd)) < 1e-5


def test_gradient_deterministic(twin):
    g, _, sc, data, masks = twin
    p = init_params(g, 4)
    a = gradient(g, p, data, masks, sc)
    b = gradient(g, p, data, masks, sc)
    assert a.tobytes() == b.tobytes()


def test_inactive_bp1_has_zero_gradient():
    f = random_forcing(200, seed=2)
    g = build("MA1", bypass="BP1")
    p = init_params(g, 0).values
    p[g.slot("soil", "bypass")] = 10.0  # capacity of 500 e^10 mm never binds
    grad = gradient(g, p, f, np.full(len(f), Subset.TRAIN), store_scaling(f), {"soil": 20.0})
    assert grad[g.slot("soil", "bypass")][0] == 0.0


def test_spinup_poisoning_does_not_change_loss(twin):
    g, _, sc, data, masks = twin
    q = data.q_obs.copy()
    q[: data.spinup_len] = 1e6
    poisoned = ForcingSeries(data.dates, data.precip, data.pet, q, data.water_year, data.spinup_len)
    p = init_params(g, 1)
    a = Problem(g, data, masks, sc)
    b = Problem(g, poisoned, masks, sc)
    assert a.loss_and_grad(p)[1].tobytes() == b.loss_and_grad(p)[1].tobytes()
    assert a.score(p) == b.score(p)
    assert a.score(p, Subset.TEST) == b.score(p, Subset.TEST)


def test_training_reduces_loss_and_is_reproducible(twin, tmp_path):
    g, _, sc, data, masks = twin
    pr = Problem(g, data, masks, sc)
    r1 = train(pr, init_params(g, 0), SHORT, 0)
    r2 = train(pr, init_params(g, 0), SHORT, 0)
    assert r1.loss_history[-1] < r1.loss_history[0]
    assert r1.loss_history == r2.loss_history
    assert r1.final.tobytes() == r2.final.tobytes()
    path = tmp_path / "run.json"
    r1.save(path)
    back = TrainRun.load(path)
    assert back.final.tobytes() == r1.final.tobytes()
    assert back.loss_history == r1.loss_history
    assert back.scaling == r1.scaling and back.graph == r1.graph


def test_single_seed_is_selected(twin):
    g, _, sc, data, masks = twin
    best, runs = train_multi_seed(g, data, masks, TrainConfig(epochs=5, seeds=1), sc)
    assert len(runs) == 1 and best is runs[0]


def _fake(seed, score, error=None):
    g = build("MA1")
    z = np.zeros(g.n_params)
    return TrainRun(seed, g, SHORT, z, z, [], score, ScalingSet(), np.zeros(3), error=error)


def test_selection_tie_goes_to_lower_seed():
    best = select_best([_fake(3, 0.9), _fake(1, 0.9), _fake(2, 0.5)])
    assert best.seed == 1
    assert select_best([_fake(0, -np.inf, "boom"), _fake(5, 0.1)]).seed == 5
    with pytest.raises(AllRunsFailed):
        select_best([_fake(0, -np.inf, "boom")])


def test_groundwater_initial_state():
    f = random_forcing(10)
    q = f.q_obs.copy()
    q[0] = 0.9
    f = ForcingSeries(f.dates, f.precip, f.pet, q, f.water_year, 0)
    assert groundwater_initial_state(f, 0.009) == pytest.approx(100.0)


def test_preliminary_stage(twin):
    _, _, _, data, masks = twin
    g = build("MA4")
    scaling, init, run = preliminary_stage(g, data, masks, TrainConfig(epochs=20))
    assert run.graph == build("MA4", gating="constant")
    trace = simulate(run.graph, run.final, data, None, ScalingSet.from_forcing(data))
    native = slice(data.spinup_len, None)
    assert scaling.state["soil"][0] == pytest.approx(trace.state("soil")[native].mean(), rel=1e-14)
    assert scaling.state["groundwater"][1] == pytest.approx(trace.state("groundwater")[native].std(), rel=1e-14)
    assert init["soil"] == 0.0 and init["routing"] == 0.0
    k_gw = 1 / (1 + math.exp(-run.final[run.graph.slot("groundwater", "out")][0]))
    assert init["groundwater"] == pytest.approx(data.q_obs[data.spinup_len] / k_gw)


def test_stage_setup_reuses_parent_scaling(twin):
    _, _, _, data, masks = twin
    cfg = TrainConfig(epochs=10, seeds=1)
    s1, i1, pre = stage_setup(build("MA1"), data, masks, cfg)
    assert pre is not None
    best1, _ = train_multi_seed(build("MA1"), data, masks, cfg, s1, i1)
    s2, _, pre2 = stage_setup(build("MA2"), data, masks, cfg, [best1])
    assert pre2 is None and s2.state["soil"] == s1.state["soil"]
    best2, _ = train_multi_seed(build("MA2"), data, masks, cfg, s2, lineage=[best1])
    assert best2.inherited.sum() == 7
    s4, i4, pre4 = stage_setup(build("MA4"), data, masks, cfg, [best2])
    assert pre4 is not None
    assert s4.state["soil"] == s1.state["soil"]
    assert i4["groundwater"] > 0
