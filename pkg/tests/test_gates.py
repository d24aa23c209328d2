import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcpgraph.gates import (
    ARITY,
    ArityMismatch,
    GateError,
    GateKind,
    GateSpec,
    MissingContext,
    bypass_bp1,
    bypass_bp2,
    constrain,
    constrain_loss_gate,
    gate_eval,
    logistic,
    mass_relax_flux,
    mr_equilibrium,
    unconstrain,
)

finite = st.floats(-30, 30, allow_nan=False)


def test_sigmoid_out3_zero_slope_is_half_kappa():
    raw = unconstrain(GateKind.SIGMOID_OUT3, kappa=0.5, a=1.0, b=0.0)
    raw[1] = -800.0  # exp underflows to a = 0
    for x in (-5.0, 0.0, 7.0):
        assert gate_eval(GateSpec("out", GateKind.SIGMOID_OUT3), raw, {"state": x}) == pytest.approx(0.25, abs=1e-15)


def test_sigmoid_out4_midpoint():
    raw = unconstrain(GateKind.SIGMOID_OUT4, g_lo=0.1, g_hi=0.9, a=1.0, b=0.0)
    assert gate_eval(GateKind.SIGMOID_OUT4, raw, {"state": 0.0}) == pytest.approx(0.5, abs=1e-14)


def test_constant_out_logistic():
    assert gate_eval(GateKind.CONSTANT_OUT, [0.0]) == 0.5
    vals = [gate_eval(GateKind.CONSTANT_OUT, [r]) for r in np.linspace(-5, 5, 21)]
    assert all(0 < v < 1 for v in vals)
    assert np.all(np.diff(vals) > 0)


def test_constrain_loss_gate_examples():
    assert constrain_loss_gate(0.3, 20.0, 100.0) == pytest.approx(0.2, abs=1e-15)
    assert constrain_loss_gate(0.3, 20.0, 100.0) * 100.0 == pytest.approx(20.0, abs=1e-12)
    assert constrain_loss_gate(0.1, 20.0, 100.0) == 0.1
    assert constrain_loss_gate(0.3, 0.0, 100.0) == 0.0
    assert constrain_loss_gate(0.3, 5.0, 0.0) == 0.3  # empty store: correction skipped


def test_bypass_bp1_examples():
    theta = math.log(100.0 / 500.0)
    gate, flux = bypass_bp1(theta, 90.0, 20.0)
    assert flux == pytest.approx(10.0, abs=1e-12)
    assert gate == pytest.approx(0.5, abs=1e-12)
    assert bypass_bp1(theta, 50.0, 20.0) == (0.0, 0.0)
    assert bypass_bp1(theta, 150.0, 0.0) == (0.0, 0.0)


def test_bypass_bp2_examples():
    assert bypass_bp2(0.0, 0.0, 3.0, 0.2) == 0.5
    assert bypass_bp2(1.0, 0.0, 0.4, 0.6) == pytest.approx(0.7310585786300049, abs=1e-12)
    assert bypass_bp2(1.0, -800.0, 0.4, 0.6) == 0.0


def test_mass_relax_equilibrium_gives_zero_flux():
    g, q = mass_relax_flux(0.3, 0.2, 0.7, 40.0, 0.7, 0.5, mean=10.0, std=5.0)
    assert g == 0.0 and q == 0.0


@pytest.mark.parametrize("f, expected", [(0.5, 0.3), (-0.4, -0.4)])
def test_mass_relax_clamp(f, expected):
    # tanh(a * d) = f / kappa with kappa = 0.8, a = 1
    d = math.atanh(f / 0.8)
    g, q = mass_relax_flux(math.log(4.0), 0.0, 0.0, 30.0, d, 0.3, mean=20.0, std=10.0)
    assert g == pytest.approx(expected, abs=1e-12)
    assert q == pytest.approx(g * abs(30.0 - 20.0), abs=1e-12)


def test_mr_equilibrium_floor():
    assert mr_equilibrium(-5.0, 10.0, 4.0) == (-2.5, 0.0)
    assert mr_equilibrium(1.0, 10.0, 4.0) == (1.0, 14.0)


def test_arity_and_context_errors():
    with pytest.raises(ArityMismatch):
        constrain(GateKind.SIGMOID_OUT3, [0.0, 0.0])
    with pytest.raises(MissingContext):
        gate_eval(GateKind.SIGMOID_LOSS4, [0, 0, 0, 0], {"state": 1.0})
    with pytest.raises(GateError):
        gate_eval(GateKind.MASS_RELAX, [0, 0, 0], {"state": 1.0})


@pytest.mark.parametrize("kind", [k for k in GateKind if k not in (GateKind.BYPASS_BP2,)])
def test_constrain_roundtrip(kind):
    rng = np.random.default_rng(3)
    raw = rng.uniform(-2, 2, ARITY[kind])
    vals = constrain(kind, raw)
    vals.pop("capacity", None)
    np.testing.assert_allclose(unconstrain(kind, **vals), raw, rtol=1e-12, atol=1e-12)


@given(st.lists(finite, min_size=4, max_size=4), finite, finite, st.floats(0, 1))
def test_gate_ranges(raw, x, pe, u):
    ctx = {"state": x, "pet": pe, "precip": u}
    for kind in (GateKind.SIGMOID_OUT3, GateKind.SIGMOID_OUT4, GateKind.SIGMOID_LOSS4, GateKind.SIGMOID_LOSS_PET3):
        v = gate_eval(kind, raw[: ARITY[kind]], ctx)
        assert 0.0 <= v <= 1.0
    assert 0.0 <= gate_eval(GateKind.BYPASS_BP2, raw[:2], ctx) <= 1.0


@given(st.floats(0, 1), st.floats(0, 50), st.floats(0, 1e4))
def test_constrained_loss_never_exceeds_pet(g, pet, state):
    c = constrain_loss_gate(g, pet, state)
    assert 0.0 <= c <= g
    assert c * state <= pet * (1 + 2 * np.finfo(float).eps)


@given(finite, st.floats(0, 1e3), st.floats(0, 200))
def test_bp1_bypass_bounded_by_precip(theta, state, precip):
    theta = max(min(theta, 5.0), -5.0)
    gate, flux = bypass_bp1(theta, state, precip)
    assert 0.0 <= gate <= 1.0
    assert 0.0 <= flux <= precip


@given(finite, finite, finite, st.floats(0, 500), st.floats(0, 1))
def test_mr_gate_keeps_state_nonnegative(kr, ar, cr, state, remember):
    ar = max(min(ar, 3.0), -3.0)
    mean, std = 50.0, 20.0
    g, q = mass_relax_flux(kr, ar, cr, state, (state - mean) / std, remember, mean, std)
    assert -1.0 < g <= remember + 1e-15
    # what remains after output (1 - remember) and the MR flux is non-negative
    c_mm = mr_equilibrium(cr, mean, std)[1]
    assert state * remember - q >= -1e-9 * max(1.0, state, c_mm)


def test_logistic_array_matches_scalar():
    x = np.array([-800.0, -3.0, 0.0, 2.5, 800.0])
    np.testing.assert_array_equal(logistic(x), [logistic(v) for v in x])
