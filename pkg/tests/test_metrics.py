import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mcpgraph.metrics import (
    PERCENTILE_LABELS,
    SQRT2,
    DegenerateObserved,
    DiagnosticReport,
    annual_kge_ss,
    aux_metrics,
    group_metrics,
    kge,
    kge_from_components,
    kge_loss_grad,
)

flows = arrays(np.float64, st.integers(3, 40), elements=st.floats(0.01, 100, allow_nan=False))


def test_identity():
    obs = np.array([1.0, 3.0, 2.0, 5.0])
    c = kge(obs, obs)
    assert (c.alpha, c.beta, c.rho, c.kge, c.kge_ss) == pytest.approx((1, 1, 1, 1, 1), abs=1e-15)


def test_mean_flow_benchmark():
    obs = np.array([1.0, 3.0, 2.0, 5.0, 0.5])
    c = kge(np.full(5, obs.mean()), obs)
    assert c.alpha == 0.0 and c.rho == 0.0
    assert c.beta == pytest.approx(1.0, abs=1e-15)
    assert c.kge == pytest.approx(1 - SQRT2, abs=1e-12)
    assert c.kge_ss == pytest.approx(0.0, abs=1e-12)


def test_hand_computed_case():
    c = kge([2.0, 4.0, 6.0], [1.0, 2.0, 3.0])
    assert (c.alpha, c.beta, c.rho) == pytest.approx((2.0, 2.0, 1.0), abs=1e-14)
    assert c.kge == pytest.approx(1 - SQRT2, abs=1e-14)


def test_degenerate_observed():
    with pytest.raises(DegenerateObserved):
        kge([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        kge([1.0], [1.0])


def test_aux_examples():
    assert aux_metrics([1.0, 1.0], [0.0, 2.0]) == pytest.approx((0.0, 1.0, 1.0))
    obs = np.array([1.0, 4.0, 2.0])
    assert aux_metrics(obs, obs) == (1.0, 0.0, 0.0)
    assert aux_metrics(np.full(3, obs.mean()), obs)[0] == pytest.approx(0.0, abs=1e-15)


def test_annual_two_years():
    obs1 = np.array([1.0, 2.0, 3.0, 4.0])
    obs2 = np.array([2.0, 1.0, 4.0, 3.0])
    # adding a constant moves beta only, so KGE_ss = 1 - |beta - 1| / sqrt(2)
    def shifted(o, target_ss):
        d = (1 - target_ss) * SQRT2
        return o + d * o.mean()

    sim = np.concatenate([shifted(obs1, 0.2), shifted(obs2, 0.8)])
    obs = np.concatenate([obs1, obs2])
    t = annual_kge_ss(sim, obs, np.repeat([2001, 2002], 4))
    assert t.years[2001].kge_ss == pytest.approx(0.2, abs=1e-12)
    assert t.percentiles["worst"]["kge_ss"] == pytest.approx(0.2, abs=1e-12)
    assert t.percentiles["50%"]["kge_ss"] == pytest.approx(0.5, abs=1e-12)
    assert tuple(t.percentiles) == PERCENTILE_LABELS


def test_annual_single_year_and_flagged():
    obs = np.array([1.0, 2.0, 3.0, 2.0, 2.0, 2.0])
    wy = np.array([1, 1, 1, 2, 2, 2])
    with pytest.warns(RuntimeWarning):
        t = annual_kge_ss(obs, obs, wy)
    assert t.flagged == [2]
    assert t.percentiles["worst"]["kge_ss"] == t.percentiles["50%"]["kge_ss"] == 1.0


def test_group_metrics_brute_force():
    rng = np.random.default_rng(2)
    obs = rng.gamma(2.0, 1.0, 10)
    sim = obs * rng.uniform(0.7, 1.3, 10)
    groups = np.array([1, 1, 2, 2, 2, 3, 3, 3, 3, 1])
    res = group_metrics(sim, obs, groups)
    for k in (1, 2, 3):
        o, s = obs[groups == k], sim[groups == k]
        alpha = np.sqrt(np.mean((s - s.mean()) ** 2)) / np.sqrt(np.mean((o - o.mean()) ** 2))
        beta = s.sum() / o.sum()
        rho = np.corrcoef(s, o)[0, 1]
        assert (res[k].alpha, res[k].beta, res[k].rho) == pytest.approx((alpha, beta, rho), rel=1e-12)
    doubled = group_metrics(2 * obs, obs, groups)
    for c in doubled.values():
        assert (c.alpha, c.beta, c.rho) == pytest.approx((2, 2, 1), abs=1e-12)


@given(flows, st.data())
def test_decomposition_and_affine(obs, data):
    assume(obs.std() > 1e-6)
    sim = data.draw(arrays(np.float64, len(obs), elements=st.floats(0.01, 100)))
    assume(sim.std() > 1e-6)
    c = kge(sim, obs)
    assert abs(kge_from_components(c.alpha, c.beta, c.rho) - c.kge) <= 1e-12
    assert c.kge_ss == pytest.approx(1 - (1 - c.kge) / SQRT2, abs=1e-12)
    assert (c.kge_ss - 0.0) == pytest.approx((c.kge - (1 - SQRT2)) / SQRT2, abs=1e-12)
    k = data.draw(st.floats(0.1, 10))
    c2 = kge(k * sim, obs)
    assert c2.alpha == pytest.approx(k * c.alpha, rel=1e-9)
    assert c2.beta == pytest.approx(k * c.beta, rel=1e-9)
    assert c2.rho == pytest.approx(c.rho, abs=1e-9)
    perm = np.random.default_rng(0).permutation(len(obs))
    c3 = kge(sim[perm], obs[perm])
    assert (c3.alpha, c3.beta, c3.rho) == pytest.approx((c.alpha, c.beta, c.rho), rel=1e-9, abs=1e-12)


@settings(max_examples=40)
@given(flows, st.data())
def test_loss_gradient_matches_finite_differences(obs, data):
    assume(obs.std() > 1e-3)
    sim = data.draw(arrays(np.float64, len(obs), elements=st.floats(0.1, 50)))
    assume(sim.std() > 1e-3)
    val, g = kge_loss_grad(sim, obs)
    assume(val > 1e-6)
    assert val == pytest.approx(1 - kge(sim, obs).kge, abs=1e-15)
    h = 1e-6
    for i in range(len(sim)):
        up, dn = sim.copy(), sim.copy()
        up[i] += h
        dn[i] -= h
        fd = (kge_loss_grad(up, obs)[0] - kge_loss_grad(dn, obs)[0]) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_report_exports():
    obs = np.random.default_rng(0).gamma(2, 1, 40)
    sim = obs * 1.1
    wy = np.repeat([1, 2, 3, 4], 10)
    report = DiagnosticReport(
        {"Test": kge(sim, obs)},
        annual_kge_ss(sim, obs, wy),
        group_metrics(sim, obs, np.repeat([1, 2], 20)),
        {"Test": dict(zip(("NSE", "RMSE", "MAE"), aux_metrics(sim, obs)))},
    )
    d = report.to_dict()
    assert set(d["annual"]["percentiles"]) == set(PERCENTILE_LABELS)
    txt = report.format_tables()
    assert "gamma" in txt
    for lab in PERCENTILE_LABELS:
        assert any(line.startswith(lab) for line in txt.splitlines())
    assert math.isclose(d["overall"]["Test"]["beta"], 1.1)
