"""
Splitting a record into whole water years
=========================================

Water years (October to September) are dealt out 2:1:1 to Train, Select and
Test so the three flow distributions look alike. A few repeated years in
front act as model spin-up. Observed flows are then cut into five groups of
equal size by magnitude.
"""

import numpy as np

from mcpgraph.forcing import build_spinup, flow_groups, from_arrays, split_timesteps

dates = np.arange(np.datetime64("1948-10-01"), np.datetime64("1988-10-01"))
rng = np.random.default_rng(5)
q = rng.lognormal(0.0, 1.2, len(dates))
series = build_spinup(from_arrays(dates, np.ones(len(dates)), np.ones(len(dates)), q), 3)

mask = split_timesteps(series)
print("steps per subset:", {k.name: v for k, v in mask.counts.items()})
for label in ("TRAIN", "SELECT", "TEST"):
    years = sorted(y for y, s in mask.year_labels.items() if s.name == label)
    print(f"{label:6s}", years)

groups = flow_groups(series)
print("\nflow group sizes:", [int(np.sum(groups.group == k)) for k in range(1, 6)])
for k, (lo, hi) in enumerate(groups.ranges, start=1):
    print(f"  group {k}: {lo:8.3f} .. {hi:8.3f} mm/day")
