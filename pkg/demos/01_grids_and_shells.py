"""What the network sees: a voxel grid around one point, its shell and weights.

Run with ``python3 demos/01_grids_and_shells.py``.
"""

import numpy as np

from anomsal import scenes
from anomsal.pointcloud import build_index
from anomsal.voxelization import binarize, extract_grid, make_shell, make_weights, shell_mask

# A small terrain with one pit in the middle.
spec = scenes.SceneSpec(extent=(20.0, 20.0), density=32.0, noise=0.02,
                        anomalies=(scenes.Anomaly("pit", (10.0, 10.0), 2.0, 1.0),))
cloud, _ = scenes.generate(spec)
print(f"{cloud.n} points")

n, w, m = 16, 0.5, 3
index = build_index(cloud, n * w)

# Grid centred on the point nearest the pit centre, and one far away on flat ground.
for label, xy in [("pit", (10.0, 10.0)), ("flat", (3.0, 3.0))]:
    i = int(np.argmin(np.hypot(cloud.points[:, 0] - xy[0], cloud.points[:, 1] - xy[1])))
    counts = extract_grid(cloud, index, cloud.points[i], n, w).values
    occupied = binarize(counts, 2)
    shell = make_shell(occupied, m)
    weights = make_weights(counts)
    print(f"\n{label}: centre {np.round(cloud.points[i], 2)}")
    print(f"  points in grid        {int(counts.sum())}")
    print(f"  occupied voxels       {int(occupied.sum())}")
    print(f"  occupied on the shell {int(shell.sum())}  (hidden inside: {int(occupied.sum() - shell.sum())})")
    print(f"  single-point voxels   {int((weights == 0).sum())}  (ignored by the loss)")
    # occupancy per height layer, seen through the central column of voxels
    col = occupied[n // 2 - 1:n // 2 + 1, n // 2 - 1:n // 2 + 1].any(axis=(0, 1))
    print("  occupied z-layers at the centre:", np.nonzero(col)[0].tolist())

print(f"\nshell cells for n={n}, m={m}: {int(shell_mask(n, m).sum())} of {n ** 3}")
# The network only receives the shell and must guess the hidden interior.
# Flat ground is easy to extend inward; the pit is not, so its error is larger.
