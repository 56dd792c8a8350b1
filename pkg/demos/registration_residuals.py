"""Point-to-SDF registration between two submaps of a wall, before and after an offset."""

import numpy as np

from sdfgraph.esdf import compute_esdf
from sdfgraph.pose_graph import registration_residuals
from sdfgraph.sim import SyntheticWorld, box, sample_sdf_grid
from sdfgraph.surface import extract_isosurface

world = SyntheticWorld([box((0, 0, 1), (2, 2, 1))])
tsdf = sample_sdf_grid(world, 0.1, (-3, -3, -1), (3, 3, 3), truncation=0.4)
esdf = compute_esdf(tsdf, max_distance=1.0)
iso = extract_isosurface(tsdf, with_mesh=False)
print(f"{len(iso.points)} isosurface points")

for dx in (0.0, 0.05, 0.2):
    q_i = np.array([dx, 0.0, 0.0, 0.0])
    r, _, ok = registration_residuals(iso.points, q_i, np.zeros(4), esdf)
    print(f"offset {dx:.2f} m: mean |r| {np.mean(np.abs(r[ok])):.4f} m over {ok.sum()} points")
