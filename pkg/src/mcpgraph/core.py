"""Node update, graph simulation and trace export."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel as K
from .architectures import GraphSpec, ParamBlock
from .forcing import ForcingSeries
from .gates import (
    BP1_SCALE,
    GateKind,
    bypass_bp1,
    constrain_loss_gate,
    gate_eval,
    mass_relax_flux,
)

NODES = ("soil", "routing", "groundwater")
GATE_SUM_EPS = 1e-9

_KIND_CODE = {
    GateKind.CONSTANT_OUT: K.K_CONST,
    GateKind.SIGMOID_OUT3: K.K_OUT3,
    GateKind.SIGMOID_OUT4: K.K_OUT4,
    GateKind.SIGMOID_LOSS4: K.K_LOSS4,
    GateKind.SIGMOID_LOSS_PET3: K.K_LOSSPET3,
    GateKind.BYPASS_BP1: K.K_BP1,
    GateKind.BYPASS_BP2: K.K_BP2,
    GateKind.MASS_RELAX: K.K_MR,
}
_SLOT = {
    ("soil", "out"): K.G_OUT,
    ("soil", "recharge"): K.G_RCH,
    ("soil", "quick"): K.G_QUICK,
    ("soil", "loss"): K.G_LOSS,
    ("soil", "bypass"): K.G_BYPASS,
    ("routing", "out"): K.G_RT,
    ("groundwater", "out"): K.G_GW,
    ("groundwater", "mr"): K.G_MR,
}


class GateSumViolation(ValueError):
    pass


class NonFiniteState(FloatingPointError):
    def __init__(self, step: int, node: str, value: float):
        super().__init__(f"non-finite {node} state ({value}) at step {step}")
        self.step = step
        self.node = node


@dataclass(frozen=True)
class ScalingSet:
    """Standardization constants for the gate context signals."""

    state: dict = field(default_factory=lambda: {n: (0.0, 1.0) for n in NODES})  # node -> (mean, std)
    precip_max: float = 1.0
    pet_mean: float = 0.0
    pet_std: float = 1.0
    w_s: float = BP1_SCALE

    @classmethod
    def from_forcing(cls, forcing: ForcingSeries, state: dict | None = None) -> ScalingSet:
        """PET moments and precipitation maximum over the native record."""
        native = forcing.native_slice
        pet = forcing.pet[native]
        std = float(pet.std())
        st = {n: (0.0, 1.0) for n in NODES}
        st.update(state or {})
        return cls(
            st,
            float(forcing.precip[native].max()) or 1.0,
            float(pet.mean()),
            std if std > 0 else 1.0,
        )

    def with_state(self, node: str, mean: float, std: float) -> ScalingSet:
        st = dict(self.state)
        st[node] = (float(mean), float(std))
        return ScalingSet(st, self.precip_max, self.pet_mean, self.pet_std, self.w_s)

    def vector(self) -> np.ndarray:
        s = self.state
        return np.array(
            [
                *s["soil"],
                *s.get("routing", (0.0, 1.0)),
                *s.get("groundwater", (0.0, 1.0)),
                self.pet_mean,
                self.pet_std,
                self.precip_max,
                self.w_s,
            ],
            dtype=float,
        )

    def to_dict(self) -> dict:
        return {
            "state": {k: list(v) for k, v in self.state.items()},
            "precip_max": self.precip_max,
            "pet_mean": self.pet_mean,
            "pet_std": self.pet_std,
            "w_s": self.w_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScalingSet:
        return cls(
            {k: tuple(v) for k, v in d["state"].items()}, d["precip_max"], d["pet_mean"], d["pet_std"], d["w_s"]
        )


def compile_graph(graph: GraphSpec) -> tuple[np.ndarray, np.ndarray]:
    """Gate offsets and kind codes in the kernel's fixed slot order."""
    off = np.full(8, -1, dtype=np.int64)
    kind = np.zeros(8, dtype=np.int64)
    for (node, gate), sl in graph.layout.items():
        i = _SLOT[(node, gate)]
        off[i] = sl.start
        kind[i] = _KIND_CODE[graph.gate_kind(node, gate)]
    return off, kind


def _as_vector(graph: GraphSpec, params) -> np.ndarray:
    p = params.values if isinstance(params, ParamBlock) else np.asarray(params, dtype=float)
    if p.shape != (graph.n_params,):
        raise ValueError(f"{graph.name} takes {graph.n_params} parameters, got {p.shape}")
    return np.ascontiguousarray(p, dtype=float)


def _init_vector(init_states) -> np.ndarray:
    if init_states is None:
        return np.zeros(3)
    if isinstance(init_states, dict):
        v = np.array([float(init_states.get(n, 0.0)) for n in NODES])
    else:
        v = np.asarray(init_states, dtype=float)
    if v.shape != (3,) or np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError(f"initial states must be 3 finite non-negative values, got {v}")
    return v


@dataclass(frozen=True)
class FluxStep:
    state_before: dict
    state_after: dict
    gates: dict
    fluxes: dict
    streamflow: float


@dataclass(frozen=True, eq=False)
class SimTrace:
    graph: GraphSpec
    dates: np.ndarray
    states: np.ndarray  # (T + 1, 3) soil, routing, groundwater; row t is the state entering step t
    gates: np.ndarray  # (T, len(GATE_COLUMNS))
    fluxes: np.ndarray  # (T, len(FLUX_COLUMNS))
    streamflow: np.ndarray
    n_rescaled: int
    config_hash: str

    def __len__(self) -> int:
        return len(self.streamflow)

    def gate(self, name: str) -> np.ndarray:
        return self.gates[:, K.GATE_COLUMNS.index(name)]

    def flux(self, name: str) -> np.ndarray:
        return self.fluxes[:, K.FLUX_COLUMNS.index(name)]

    def state(self, node: str) -> np.ndarray:
        """States entering each step (length T)."""
        return self.states[:-1, NODES.index(node)]

    def active_columns(self) -> tuple[list[str], list[str], list[str]]:
        nodes = [n.name for n in self.graph.nodes]
        gates = [c for c in K.GATE_COLUMNS if _column_active(self.graph, c)]
        fluxes = [c for c in K.FLUX_COLUMNS if _column_active(self.graph, c)]
        return nodes, gates, fluxes

    def step(self, t: int) -> FluxStep:
        nodes, gates, fluxes = self.active_columns()
        return FluxStep(
            {n: float(self.states[t, NODES.index(n)]) for n in nodes},
            {n: float(self.states[t + 1, NODES.index(n)]) for n in nodes},
            {g: float(self.gate(g)[t]) for g in gates},
            {f: float(self.flux(f)[t]) for f in fluxes},
            float(self.streamflow[t]),
        )

    @property
    def steps(self) -> list[FluxStep]:
        return [self.step(t) for t in range(len(self))]

    def balance_residuals(self) -> dict[str, np.ndarray]:
        """Per-node |state change - (inflow - outflow)| at every step."""
        d = np.diff(self.states, axis=0)
        f = self.flux
        out = {
            "soil": d[:, 0]
            - (
                f("soil.infiltration")
                - f("soil.out")
                - f("soil.recharge")
                - f("soil.quick")
                - f("soil.loss")
            )
        }
        if self.graph.has("routing"):
            out["routing"] = d[:, 1] - (f("soil.out") - f("routing.out"))
        if self.graph.has("groundwater"):
            out["groundwater"] = d[:, 2] - (f("soil.recharge") - f("groundwater.out") - f("groundwater.mr"))
        return {k: np.abs(v) for k, v in out.items()}

    def write_csv(self, path, precision: int = 17) -> None:
        """One row per timestep: date, states, gate values, fluxes, streamflow."""
        nodes, gates, fluxes = self.active_columns()
        header = ["date"] + [f"state.{n}" for n in nodes] + [f"gate.{g}" for g in gates] + [f"flux.{x}" for x in fluxes]
        header.append("streamflow")
        cols = (
            [self.state(n) for n in nodes] + [self.gate(g) for g in gates] + [self.flux(x) for x in fluxes]
        )
        cols.append(self.streamflow)
        data = np.column_stack(cols)
        fmt = f"{{:.{precision}g}}"
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for d, row in zip(self.dates, data):
                w.writerow([str(d)] + [fmt.format(v) for v in row])


def _column_active(graph: GraphSpec, column: str) -> bool:
    node, what = column.split(".")
    if not graph.has(node):
        return False
    n = graph.node(node)
    if what in ("remember", "infiltration", "loss_unconstrained"):
        return True
    return n.gate(what) is not None


def config_hash(graph: GraphSpec, params: np.ndarray, scaling: ScalingSet, init: np.ndarray) -> str:
    blob = json.dumps(
        {
            "graph": graph.to_dict(),
            "params": [repr(float(v)) for v in params],
            "scaling": scaling.to_dict(),
            "init": [repr(float(v)) for v in init],
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def simulate(
    graph: GraphSpec,
    params,
    forcing: ForcingSeries,
    init_states=None,
    scaling: ScalingSet | None = None,
) -> SimTrace:
    """Run the graph over every timestep of ``forcing`` (spin-up included).

    Parameters
    ----------
    graph : GraphSpec
    params : ParamBlock or array of raw parameters
    forcing : ForcingSeries
    init_states : dict or length-3 array, optional
        Initial soil, routing and groundwater storage in mm (default 0).
    scaling : ScalingSet, optional
        Context standardization; defaults to ``ScalingSet.from_forcing``.
    """
    p = _as_vector(graph, params)
    init = _init_vector(init_states)
    scaling = scaling or ScalingSet.from_forcing(forcing)
    off, kind = compile_graph(graph)
    states, gates, fluxes, q, n_rescaled = K.forward(
        p, off, kind, scaling.vector(), np.ascontiguousarray(forcing.precip), np.ascontiguousarray(forcing.pet), init
    )
    check_finite(graph, states)
    return SimTrace(graph, forcing.dates, states, gates, fluxes, q, int(n_rescaled), config_hash(graph, p, scaling, init))


def check_finite(graph: GraphSpec, states: np.ndarray) -> None:
    bad = ~np.isfinite(states)
    if bad.any():
        t, j = np.argwhere(bad)[0]
        raise NonFiniteState(int(t) - 1, NODES[j], float(states[t, j]))


# ----------------------------------------------------------------------------
# scalar reference path


def node_step(
    node, state: float, inflow: float, pet: float, gate_values: dict, rescale: bool = True
) -> tuple[float, dict]:
    """Advance one node by one step from already-evaluated gate values.

    ``gate_values`` maps release-gate names (outputs and ``loss``) to values.
    Two optional entries are not release gates: ``bypass`` is the fraction of
    the inflow diverted past the node, and ``mr`` is the signed
    mass-relaxation flux in mm/day (positive leaves the node).

    On an ET-constrained node the loss gate is first capped at PET. Release
    gates summing above one are rescaled to sum to one, or raise
    :class:`GateSumViolation` when ``rescale`` is False.

    Returns the next state and a dict of fluxes keyed like the gates, plus
    ``bypass``, ``mr`` and the derived ``remember`` gate.
    """
    releases = {k: v for k, v in gate_values.items() if k not in ("bypass", "mr")}
    if "loss" in releases and node.et_constrained:
        releases["loss"] = constrain_loss_gate(releases["loss"], pet, state)
    total = sum(releases.values())
    if total > 1.0 + GATE_SUM_EPS and not rescale:
        raise GateSumViolation(f"gates sum to {total} > 1 on node {node.name}")
    if total > 1.0:
        releases = {k: v / total for k, v in releases.items()}
        total = 1.0
    fluxes = {k: v * state for k, v in releases.items()}
    trimmed = 0.0
    if "loss" in fluxes and node.et_constrained and fluxes["loss"] > pet:
        trimmed, fluxes["loss"] = fluxes["loss"] - pet, pet
    bypass = gate_values.get("bypass", 0.0) * inflow
    mr = gate_values.get("mr", 0.0)
    nxt = (1.0 - total) * state + trimmed + (inflow - bypass) - mr
    fluxes["bypass"] = bypass
    fluxes["mr"] = mr
    fluxes["remember"] = 1.0 - total
    return nxt, fluxes


def simulate_reference(graph: GraphSpec, params, forcing: ForcingSeries, init_states=None, scaling=None) -> np.ndarray:
    """Streamflow from the scalar primitives; slow, used to cross-check the kernel."""
    p = _as_vector(graph, params)
    scaling = scaling or ScalingSet.from_forcing(forcing)
    S, R, G = _init_vector(init_states)
    block = ParamBlock(graph, p)
    soil = graph.node("soil")
    rt = graph.node("routing")
    gw = graph.node("groundwater")
    ms, ss = scaling.state["soil"]
    out = np.empty(len(forcing))
    for t in range(len(forcing)):
        u, pe_raw = float(forcing.precip[t]), float(forcing.pet[t])
        ctx = {"state": (S - ms) / ss, "pet": (pe_raw - scaling.pet_mean) / scaling.pet_std}
        gv = {}
        for g in soil.gates:
            if g.name == "bypass":
                continue
            gv[g.name] = gate_eval(g, block.gate("soil", g.name), ctx)
        bp = soil.gate("bypass")
        if bp is not None:
            if bp.kind is GateKind.BYPASS_BP1:
                gv["bypass"], _ = bypass_bp1(block.gate("soil", "bypass")[0], S, u, scaling.w_s)
            else:
                ctx_bp = dict(ctx, precip=u / scaling.precip_max)
                gv["bypass"] = gate_eval(bp, block.gate("soil", "bypass"), ctx_bp)
        S_next, f = node_step(soil, S, u, pe_raw, gv)
        q = f["bypass"] + f.get("quick", 0.0)
        to_rt = f["out"] if rt else 0.0
        to_gw = f.get("recharge", 0.0) if gw else 0.0
        if not rt:
            q += f["out"]
        if not gw:
            q += f.get("recharge", 0.0)
        if rt:
            mr_, sr_ = scaling.state["routing"]
            g_rt = gate_eval(rt.gates[0], block.gate("routing", "out"), {"state": (R - mr_) / sr_})
            R_next, fr = node_step(rt, R, to_rt, pe_raw, {"out": g_rt})
            q += fr["out"]
            R = R_next
        if gw:
            mg, sg = scaling.state["groundwater"]
            xg = (G - mg) / sg
            g_gw = gate_eval(gw.gates[0], block.gate("groundwater", "out"), {"state": xg})
            vals = {"out": g_gw}
            if gw.gate("mr") is not None:
                k_raw, a_raw, c_raw = block.gate("groundwater", "mr")
                _, vals["mr"] = mass_relax_flux(k_raw, a_raw, c_raw, G, xg, 1.0 - g_gw, mg, sg)
            G_next, fg = node_step(gw, G, to_gw, pe_raw, vals)
            q += fg["out"]
            G = G_next
        S = S_next
        if not (math.isfinite(S) and math.isfinite(R) and math.isfinite(G)):
            raise NonFiniteState(t, "soil" if not math.isfinite(S) else "routing", S)
        out[t] = q
    return out


__all__ = [
    "FluxStep",
    "GateSumViolation",
    "NonFiniteState",
    "ScalingSet",
    "SimTrace",
    "compile_graph",
    "node_step",
    "simulate",
    "simulate_reference",
]
