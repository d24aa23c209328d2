"""Builders for the six MCP graph architectures and their variants.

Node and gate layout (``soil`` is always first):

=====  ===========================================  =====================
arch   soil gates                                   downstream stores
=====  ===========================================  =====================
MA1    out, loss                                    -
MA2    out, recharge, loss                          -
MA3    out, loss                                    routing (fed by out)
MA4    out, recharge, loss                          groundwater (recharge)
MA5    out, recharge, loss                          routing, groundwater
MA6    out, recharge, quick, loss                   routing, groundwater
=====  ===========================================  =====================

A soil ``out`` flux feeds the routing node when one exists, otherwise it is
streamflow; ``recharge`` likewise feeds groundwater. ``quick`` and bypass
fluxes always go straight to streamflow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gates import GateKind, GateSpec, constrain

ARCH_IDS = ("MA1", "MA2", "MA3", "MA4", "MA5", "MA6")
STREAMFLOW = "streamflow"

_TOPOLOGY = {
    # arch: (soil output gates, routing, groundwater)
    "MA1": (("out",), False, False),
    "MA2": (("out", "recharge"), False, False),
    "MA3": (("out",), True, False),
    "MA4": (("out", "recharge"), False, True),
    "MA5": (("out", "recharge"), True, True),
    "MA6": (("out", "recharge", "quick"), True, True),
}

# parents each architecture inherits from, with the nodes taken from each
LINEAGE = {
    "MA2": (("MA1", None),),
    "MA3": (("MA1", None),),
    "MA4": (("MA2", None),),
    "MA5": (("MA2", ("soil",)), ("MA3", ("routing",)), ("MA4", ("groundwater",))),
    "MA6": (("MA5", None),),
}


class InvalidOption(ValueError):
    pass


class IncompatibleLineage(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    name: str  # soil | routing | groundwater
    kind: str  # SoilMoisture | Store
    gates: tuple[GateSpec, ...]
    et_constrained: bool = False

    def gate(self, name: str) -> GateSpec | None:
        return next((g for g in self.gates if g.name == name), None)


@dataclass(frozen=True)
class Edge:
    node: str
    gate: str
    target: str  # node name or STREAMFLOW


@dataclass(frozen=True)
class GraphSpec:
    arch_id: str
    bypass: str | None = None  # None | "BP1" | "BP2"
    mass_relax: bool = False
    gating: str = "sigmoid"  # sigmoid | constant
    nodes: tuple[NodeSpec, ...] = ()
    edges: tuple[Edge, ...] = ()
    layout: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    @property
    def name(self) -> str:
        s = self.arch_id
        if self.bypass:
            s += self.bypass
        if self.mass_relax:
            s += "MR"
        if self.gating == "constant":
            s += "-const"
        return s

    def node(self, name: str) -> NodeSpec | None:
        return next((n for n in self.nodes if n.name == name), None)

    def has(self, node: str) -> bool:
        return self.node(node) is not None

    @property
    def n_params(self) -> int:
        return sum(g.arity for n in self.nodes for g in n.gates)

    def slot(self, node: str, gate: str) -> slice:
        return self.layout[(node, gate)]

    def gate_kind(self, node: str, gate: str) -> GateKind:
        return self.node(node).gate(gate).kind

    def base(self) -> GraphSpec:
        """The same architecture without bypass / mass relaxation options."""
        return build(self.arch_id, gating=self.gating)

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "options": {"bypass": self.bypass, "mass_relax": self.mass_relax, "gating": self.gating},
            "n_params": self.n_params,
            "nodes": [
                {
                    "name": n.name,
                    "kind": n.kind,
                    "et_constrained": n.et_constrained,
                    "gates": [
                        {
                            "name": g.name,
                            "kind": g.kind.value,
                            "slots": [self.layout[(n.name, g.name)].start, self.layout[(n.name, g.name)].stop],
                        }
                        for g in n.gates
                    ],
                }
                for n in self.nodes
            ],
            "edges": [[e.node, e.gate, e.target] for e in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> GraphSpec:
        o = d["options"]
        return build(d["arch_id"], bypass=o["bypass"], mass_relax=o["mass_relax"], gating=o["gating"])


def build(arch_id: str, bypass: str | None = None, mass_relax: bool = False, gating: str = "sigmoid") -> GraphSpec:
    """Wire one architecture variant.

    ``gating="constant"`` makes every output gate a time constant; the loss
    gate then depends on PET only.
    """
    arch_id = arch_id.upper()
    if arch_id not in _TOPOLOGY:
        raise InvalidOption(f"unknown architecture {arch_id!r}")
    if bypass not in (None, "BP1", "BP2"):
        raise InvalidOption(f"bypass must be None, 'BP1' or 'BP2', got {bypass!r}")
    if gating not in ("sigmoid", "constant"):
        raise InvalidOption(f"gating must be 'sigmoid' or 'constant', got {gating!r}")
    outs, has_rt, has_gw = _TOPOLOGY[arch_id]
    if mass_relax and not has_gw:
        raise InvalidOption(f"mass relaxation needs a groundwater node; {arch_id} has none")

    const = gating == "constant"
    soil_out = GateKind.CONSTANT_OUT if const else GateKind.SIGMOID_OUT3
    store_out = GateKind.CONSTANT_OUT if const else GateKind.SIGMOID_OUT4
    loss = GateKind.SIGMOID_LOSS_PET3 if const else GateKind.SIGMOID_LOSS4

    soil_gates = [GateSpec(g, soil_out) for g in outs] + [GateSpec("loss", loss)]
    if bypass:
        soil_gates.append(GateSpec("bypass", GateKind.BYPASS_BP1 if bypass == "BP1" else GateKind.BYPASS_BP2))
    nodes = [NodeSpec("soil", "SoilMoisture", tuple(soil_gates), et_constrained=True)]
    edges = []
    if has_rt:
        nodes.append(NodeSpec("routing", "Store", (GateSpec("out", store_out),)))
    if has_gw:
        gw_gates = [GateSpec("out", store_out)]
        if mass_relax:
            gw_gates.append(GateSpec("mr", GateKind.MASS_RELAX))
        nodes.append(NodeSpec("groundwater", "Store", tuple(gw_gates)))

    edges.append(Edge("soil", "out", "routing" if has_rt else STREAMFLOW))
    if "recharge" in outs:
        edges.append(Edge("soil", "recharge", "groundwater" if has_gw else STREAMFLOW))
    if "quick" in outs:
        edges.append(Edge("soil", "quick", STREAMFLOW))
    if bypass:
        edges.append(Edge("soil", "bypass", STREAMFLOW))
    if has_rt:
        edges.append(Edge("routing", "out", STREAMFLOW))
    if has_gw:
        edges.append(Edge("groundwater", "out", STREAMFLOW))

    layout = {}
    i = 0
    for n in nodes:
        for g in n.gates:
            layout[(n.name, g.name)] = slice(i, i + g.arity)
            i += g.arity
    return GraphSpec(arch_id, bypass, mass_relax, gating, tuple(nodes), tuple(edges), layout)


def parse_name(name: str) -> GraphSpec:
    """``"MA5BP2"``, ``"MA5MR"``, ``"MA3-const"`` style names to a GraphSpec."""
    s = name.upper().replace("_", "").replace(" ", "")
    gating = "sigmoid"
    if s.endswith("-CONST"):
        gating, s = "constant", s[: -len("-CONST")]
    s = s.replace("-", "")
    arch, rest = s[:3], s[3:]
    bypass = None
    if rest.startswith("BP1") or rest.startswith("BP2"):
        bypass, rest = rest[:3], rest[3:]
    mr = False
    if rest in ("MR", "MRGW"):
        mr, rest = True, ""
    if rest:
        raise InvalidOption(f"cannot parse architecture name {name!r}")
    return build(arch, bypass=bypass, mass_relax=mr, gating=gating)


def param_count(spec: GraphSpec) -> int:
    return spec.n_params


@dataclass
class ParamBlock:
    spec: GraphSpec
    values: np.ndarray
    inherited: np.ndarray | None = None  # bool mask of copied slots

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.values) != self.spec.n_params:
            raise ValueError(f"{self.spec.name} takes {self.spec.n_params} parameters, got {len(self.values)}")

    def __len__(self) -> int:
        return len(self.values)

    def gate(self, node: str, gate: str) -> np.ndarray:
        return self.values[self.spec.slot(node, gate)]

    def constrained(self) -> dict[str, dict[str, float]]:
        out = {}
        for n in self.spec.nodes:
            for g in n.gates:
                out[f"{n.name}.{g.name}"] = constrain(g.kind, self.gate(n.name, g.name))
        return out

    def copy(self) -> ParamBlock:
        inh = None if self.inherited is None else self.inherited.copy()
        return ParamBlock(self.spec, self.values.copy(), inh)


def init_params(spec: GraphSpec, seed: int) -> ParamBlock:
    """Every raw parameter uniform on [-1, 1] from a seeded generator."""
    rng = np.random.default_rng(seed)
    return ParamBlock(spec, rng.uniform(-1.0, 1.0, spec.n_params), np.zeros(spec.n_params, dtype=bool))


def _allowed_parents(child: GraphSpec) -> dict[str, tuple | None]:
    if child.bypass or child.mass_relax:
        return {child.base().name: None}
    return {build(a, gating=child.gating).name: nodes for a, nodes in LINEAGE.get(child.arch_id, ())}


def inherit_params(
    child: GraphSpec,
    parent: GraphSpec,
    parent_block: ParamBlock | np.ndarray,
    seed: int,
    nodes: tuple[str, ...] | None = None,
) -> ParamBlock:
    """Seed a child block from a trained parent.

    Gates present in both graphs with the same kind are copied; all other
    slots are drawn as in :func:`init_params`. ``nodes`` restricts copying
    to the named nodes (used for composite lineages).
    """
    return inherit_composite(child, [(parent, parent_block, nodes)], seed)


def inherit_composite(child: GraphSpec, sources, seed: int) -> ParamBlock:
    """Inherit from several parents, each contributing a set of nodes."""
    allowed = _allowed_parents(child)
    block = init_params(child, seed)
    for parent, pblock, nodes in sources:
        pvals = pblock.values if isinstance(pblock, ParamBlock) else np.asarray(pblock, dtype=float)
        if len(pvals) != parent.n_params:
            raise IncompatibleLineage(f"{parent.name} block has {len(pvals)} values, expected {parent.n_params}")
        if parent != child:
            if parent.name not in allowed:
                raise IncompatibleLineage(f"{child.name} does not inherit from {parent.name}")
            if nodes is None:
                nodes = allowed[parent.name]
        copied = 0
        for (node, gate), sl in parent.layout.items():
            if nodes is not None and node not in nodes:
                continue
            if (node, gate) not in child.layout:
                raise IncompatibleLineage(f"{parent.name} gate {node}.{gate} is absent from {child.name}")
            if child.gate_kind(node, gate) != parent.gate_kind(node, gate):
                raise IncompatibleLineage(f"gate {node}.{gate} changes kind between {parent.name} and {child.name}")
            csl = child.slot(node, gate)
            block.values[csl] = pvals[sl]
            block.inherited[csl] = True
            copied += 1
        if copied == 0:
            raise IncompatibleLineage(f"nothing to inherit from {parent.name}")
    return block


def all_variants(include_constant: bool = True) -> list[GraphSpec]:
    """Every legal architecture variant."""
    out = []
    gatings = ("sigmoid", "constant") if include_constant else ("sigmoid",)
    for gating in gatings:
        for arch in ARCH_IDS:
            for bp in (None, "BP1", "BP2"):
                for mr in (False, True):
                    if mr and not _TOPOLOGY[arch][2]:
                        continue
                    out.append(build(arch, bypass=bp, mass_relax=mr, gating=gating))
    return out
