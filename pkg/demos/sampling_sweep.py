"""Back-end cost and accuracy as the registration sampling ratio shrinks.

Usage: python3 demos/sampling_sweep.py [output.csv]
"""

import sys
from collections import defaultdict

import numpy as np

from sdfgraph.io import MapperConfig
from sdfgraph.pipeline import sweep
from sdfgraph.sim import load_scenario


def main(out="sweep_demo.csv"):
    cfg = MapperConfig(voxel_size=0.2, esdf_max_distance=1.0)
    rows = sweep(load_scenario("sweep"), [1.0, 0.2, 0.05, 0.01], ["weighted", "uniform-unweighted"],
                 trials=2, cfg=cfg, output_csv=out, progress=True)
    table = defaultdict(list)
    for r in rows:
        table[r["strategy"], r["ratio"]].append((r["position_rmse"], r["solver_time"]))
    print(f"{'strategy':<20}{'ratio':>8}{'pos rmse [m]':>14}{'solver [s]':>12}")
    for (strategy, ratio), vals in sorted(table.items()):
        rmse, t = np.mean(vals, axis=0)
        print(f"{strategy:<20}{ratio:>8.3f}{rmse:>14.3f}{t:>12.2f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
