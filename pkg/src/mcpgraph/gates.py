"""Gate primitives of the mass-conserving node.

Every gate is stored as a short vector of unconstrained ("raw") numbers.
The constraint transform maps raw numbers onto their admissible ranges:
saturation levels through the logistic function, slopes through ``exp``,
offsets unchanged.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

RELU_EPS = 1e-12  # mm/day; below this precipitation carries no bypass mass
BP1_SCALE = 500.0  # mm; capacity scale w_s for the saturation-excess bypass


class GateKind(str, enum.Enum):
    CONSTANT_OUT = "ConstantOut"
    SIGMOID_OUT3 = "SigmoidOut3"
    SIGMOID_OUT4 = "SigmoidOut4"
    SIGMOID_LOSS4 = "SigmoidLoss4"
    SIGMOID_LOSS_PET3 = "SigmoidLossPET3"
    BYPASS_BP1 = "BypassBP1"
    BYPASS_BP2 = "BypassBP2"
    MASS_RELAX = "MassRelax"


ARITY = {
    GateKind.CONSTANT_OUT: 1,
    GateKind.SIGMOID_OUT3: 3,
    GateKind.SIGMOID_OUT4: 4,
    GateKind.SIGMOID_LOSS4: 4,
    GateKind.SIGMOID_LOSS_PET3: 3,
    GateKind.BYPASS_BP1: 1,
    GateKind.BYPASS_BP2: 2,
    GateKind.MASS_RELAX: 3,
}

# which scaled signals each kind reads
CONTEXT = {
    GateKind.CONSTANT_OUT: (),
    GateKind.SIGMOID_OUT3: ("state",),
    GateKind.SIGMOID_OUT4: ("state",),
    GateKind.SIGMOID_LOSS4: ("state", "pet"),
    GateKind.SIGMOID_LOSS_PET3: ("pet",),
    GateKind.BYPASS_BP1: (),
    GateKind.BYPASS_BP2: ("state", "precip"),
    GateKind.MASS_RELAX: ("state",),
}

PARAM_NAMES = {
    GateKind.CONSTANT_OUT: ("k",),
    GateKind.SIGMOID_OUT3: ("kappa", "a", "b"),
    GateKind.SIGMOID_OUT4: ("g_lo", "g_hi", "a", "b"),
    GateKind.SIGMOID_LOSS4: ("kappa", "a_x", "a_pe", "b"),
    GateKind.SIGMOID_LOSS_PET3: ("kappa", "a_pe", "b"),
    GateKind.BYPASS_BP1: ("theta_c",),
    GateKind.BYPASS_BP2: ("a", "b"),
    GateKind.MASS_RELAX: ("kappa", "a", "c"),
}


class GateError(ValueError):
    pass


class ArityMismatch(GateError):
    pass


class MissingContext(GateError):
    pass


@dataclass(frozen=True)
class GateSpec:
    name: str
    kind: GateKind

    @property
    def arity(self) -> int:
        return ARITY[self.kind]

    @property
    def context(self) -> tuple[str, ...]:
        return CONTEXT[self.kind]


def logistic(x):
    """Numerically stable logistic function (scalar or array)."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def relu(x: float) -> float:
    return x if x > 0.0 else 0.0


def constrain(kind: GateKind, raw) -> dict[str, float]:
    """Map raw numbers of one gate to its constrained parameter values."""
    kind = GateKind(kind)
    raw = [float(r) for r in raw]
    if len(raw) != ARITY[kind]:
        raise ArityMismatch(f"{kind.value} takes {ARITY[kind]} raw parameters, got {len(raw)}")
    if kind is GateKind.CONSTANT_OUT:
        return {"k": logistic(raw[0])}
    if kind is GateKind.SIGMOID_OUT3:
        return {"kappa": logistic(raw[0]), "a": math.exp(raw[1]), "b": raw[2]}
    if kind is GateKind.SIGMOID_OUT4:
        g_lo = logistic(raw[0])
        return {"g_lo": g_lo, "g_hi": g_lo + (1.0 - g_lo) * logistic(raw[1]), "a": math.exp(raw[2]), "b": raw[3]}
    if kind is GateKind.SIGMOID_LOSS4:
        return {"kappa": logistic(raw[0]), "a_x": math.exp(raw[1]), "a_pe": math.exp(raw[2]), "b": raw[3]}
    if kind is GateKind.SIGMOID_LOSS_PET3:
        return {"kappa": logistic(raw[0]), "a_pe": math.exp(raw[1]), "b": raw[2]}
    if kind is GateKind.BYPASS_BP1:
        return {"theta_c": raw[0], "capacity": BP1_SCALE * math.exp(raw[0])}
    if kind is GateKind.BYPASS_BP2:
        return {"a": raw[0], "b": raw[1]}
    return {"kappa": logistic(raw[0]), "a": math.exp(raw[1]), "c": raw[2]}


def unconstrain(kind: GateKind, **values: float) -> np.ndarray:
    """Inverse of :func:`constrain` for the kinds whose values are all invertible."""
    kind = GateKind(kind)
    if kind is GateKind.CONSTANT_OUT:
        return np.array([logit(values["k"])])
    if kind is GateKind.SIGMOID_OUT3:
        return np.array([logit(values["kappa"]), math.log(values["a"]), values["b"]])
    if kind is GateKind.SIGMOID_OUT4:
        g_lo, g_hi = values["g_lo"], values["g_hi"]
        return np.array([logit(g_lo), logit((g_hi - g_lo) / (1.0 - g_lo)), math.log(values["a"]), values["b"]])
    if kind is GateKind.SIGMOID_LOSS4:
        return np.array([logit(values["kappa"]), math.log(values["a_x"]), math.log(values["a_pe"]), values["b"]])
    if kind is GateKind.SIGMOID_LOSS_PET3:
        return np.array([logit(values["kappa"]), math.log(values["a_pe"]), values["b"]])
    if kind is GateKind.BYPASS_BP1:
        if "capacity" in values:
            return np.array([math.log(values["capacity"] / BP1_SCALE)])
        return np.array([values["theta_c"]])
    if kind is GateKind.BYPASS_BP2:
        return np.array([values["a"], values["b"]])
    return np.array([logit(values["kappa"]), math.log(values["a"]), values["c"]])


def gate_eval(spec: GateSpec | GateKind, raw_params, context: dict | None = None) -> float:
    """Value of an output, loss or BP2 input gate.

    ``context`` holds the scaled signals the gate is wired to: ``state``
    (standardized cell state), ``pet`` (standardized PET) and ``precip``
    (precipitation over its record maximum).
    """
    kind = spec.kind if isinstance(spec, GateSpec) else GateKind(spec)
    if kind in (GateKind.BYPASS_BP1, GateKind.MASS_RELAX):
        raise GateError(f"{kind.value} has a dedicated evaluator")
    context = context or {}
    missing = [c for c in CONTEXT[kind] if c not in context]
    if missing:
        raise MissingContext(f"{kind.value} needs context {missing}")
    c = constrain(kind, raw_params)
    if kind is GateKind.CONSTANT_OUT:
        return c["k"]
    if kind is GateKind.SIGMOID_OUT3:
        return c["kappa"] * logistic(c["a"] * context["state"] + c["b"])
    if kind is GateKind.SIGMOID_OUT4:
        return c["g_lo"] + (c["g_hi"] - c["g_lo"]) * logistic(c["a"] * context["state"] + c["b"])
    if kind is GateKind.SIGMOID_LOSS4:
        return c["kappa"] * logistic(c["a_x"] * context["state"] + c["a_pe"] * context["pet"] + c["b"])
    if kind is GateKind.SIGMOID_LOSS_PET3:
        return c["kappa"] * logistic(c["a_pe"] * context["pet"] + c["b"])
    return bypass_bp2(c["a"], c["b"], context["state"], context["precip"])


def constrain_loss_gate(g_loss: float, pet: float, state: float) -> float:
    """Cap the loss gate so that the loss flux never exceeds PET."""
    if state <= 0.0:
        return g_loss
    cap = pet / state
    # g - relu(g - cap), written without the cancellation
    return cap if g_loss > cap else g_loss


def bypass_bp1(theta_c: float, state: float, precip: float, w_s: float = BP1_SCALE) -> tuple[float, float]:
    """Saturation-excess bypass: returns (gate value, bypass flux)."""
    capacity = w_s * math.exp(theta_c)
    flux = min(relu(precip + state - capacity), precip)
    if precip <= RELU_EPS:
        return 0.0, 0.0
    return flux / precip, flux


def bypass_bp2(a: float, b: float, state_scaled: float, precip_norm: float) -> float:
    return logistic(b + a * (state_scaled + precip_norm))


def mr_equilibrium(c_scaled: float, mean: float, std: float) -> tuple[float, float]:
    """Equilibrium state in scaled and physical units, floored at 0 mm."""
    c_scaled = max(c_scaled, -mean / std)
    return c_scaled, mean + std * c_scaled


def mass_relax_flux(
    kappa_raw: float,
    a_raw: float,
    c_raw: float,
    state: float,
    state_scaled: float,
    remember_gate: float,
    mean: float = 0.0,
    std: float = 1.0,
) -> tuple[float, float]:
    """Signed mass-relaxation gate and flux (positive leaves the node).

    The gate is clamped to the remember gate so the node can never lose more
    water than it holds; inflows are never clamped.
    """
    kappa = logistic(kappa_raw)
    a = math.exp(a_raw)
    c_scaled, c_mm = mr_equilibrium(c_raw, mean, std)
    f = kappa * math.tanh(a * (state_scaled - c_scaled))
    g = f - relu(f - remember_gate)
    return g, g * abs(state - c_mm)
