"""
The command-line workflow
=========================

``mcpgraph`` wraps the library in six subcommands. This script writes a
synthetic forcing file and drives ingest, train, evaluate, simulate and
report on it with a tiny training budget. Outputs go to a temporary folder.
"""

import json
import tempfile
from pathlib import Path

from mcpgraph.architectures import build, init_params
from mcpgraph.cli import main, write_forcing
from mcpgraph.core import ScalingSet
from mcpgraph.synthetic import synthetic_forcing, twin_observations

work = Path(tempfile.mkdtemp(prefix="mcpgraph_demo_"))
f = synthetic_forcing(8, seed=2)
g = build("MA2")
write_forcing(work / "forcing.csv", twin_observations(g, init_params(g, 8).values, f, ScalingSet.from_forcing(f, {"soil": (60.0, 30.0)})))

out = ["--output", str(work / "runs")]
budget = ["--epochs", "60", "--seeds", "2"]
main(["ingest", "--forcing", str(work / "forcing.csv"), *out])
main(["train", "--arch", "MA1", *budget, *out])
main(["train", "--arch", "MA2", "--lineage", str(work / "runs" / "runs" / "MA1"), *budget, *out])
main(["evaluate", "--run", str(work / "runs" / "runs" / "MA2"), *out])
main(["simulate", "--run", str(work / "runs" / "runs" / "MA2"), *out])
main(["report", *out])

selected = json.loads((work / "runs" / "runs" / "MA2" / "selected.json").read_text())
print("MA2 inherited slots:", selected["inherited_slots"])
print((work / "runs" / "report" / "summary.txt").read_text())
print("artifacts under", work)
