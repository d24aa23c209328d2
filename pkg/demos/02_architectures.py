"""
The architecture family and its lineage
=======================================

Six base graphs grow from a single soil store to a soil, routing and
groundwater network. Each can take a bypass (BP1, BP2) or a mass-relaxation
(MR) variant, and any of them can use constant instead of sigmoid gates.
"""

from mcpgraph.architectures import LINEAGE, all_variants, build, init_params, inherit_params, param_count

for arch in ("MA1", "MA2", "MA3", "MA4", "MA5", "MA6"):
    row = [param_count(build(arch, bypass=bp)) for bp in (None, "BP1", "BP2")]
    print(arch, "plain/BP1/BP2 parameters:", row)
print("MA5MR parameters:", param_count(build("MA5", mass_relax=True)))
print("variants in the family:", len(all_variants()))

print("\nlineage (child <- parents)")
for child, parents in LINEAGE.items():
    links = [p if nodes is None else f"{p} ({', '.join(nodes)})" for p, nodes in parents]
    print(f"  {child:4s} <- {'; '.join(links)}")

# a child graph reuses trained parent blocks and initializes the rest
parent, child = build("MA2"), build("MA4")
block = inherit_params(child, parent, init_params(parent, seed=1).values, seed=2)
print("\nMA4 from MA2:", int(block.inherited.sum()), "inherited slots,", int((~block.inherited).sum()), "fresh")
for node in child.nodes:
    for gate in node.gates:
        flags = block.inherited[child.slot(node.name, gate.name)]
        print(f"  {node.name + '.' + gate.name:18s} {gate.kind.value:14s} {'inherited' if flags.all() else 'fresh'}")
