"""Train a small network on a toy scene and compare it with the two baselines.

Run with ``python3 demos/02_train_and_compare.py`` (about a minute on one core).
"""

import numpy as np

from anomsal import scenes
from anomsal.baselines import handcrafted_map, plane_saliency_map
from anomsal.evaluation import compare_methods, region_members
from anomsal.inference import saliency_map
from anomsal.training import TrainConfig, train

spec = scenes.SceneSpec(
    extent=(40.0, 40.0), density=24.0, roughness=0.05, roughness_scale=2.0, noise=0.02, relief=0.4,
    anomalies=(scenes.Anomaly("pit", (10.0, 10.0), 2.0, 1.0), scenes.Anomaly("bump", (30.0, 10.0), 2.0, 1.0),
               scenes.Anomaly("bump", (10.0, 30.0), 2.0, 1.0), scenes.Anomaly("pit", (30.0, 30.0), 2.0, 1.0)),
    patches=((20.0, 10.0), (10.0, 20.0), (30.0, 20.0), (20.0, 30.0)),
    seed=1,
)
cloud, regions = scenes.generate(spec)
print(f"{cloud.n} points, regions:", ", ".join(f"{r.name}({r.role}{r.label})" for r in regions.regions))

# D regions steer early stopping, T regions are held out for the comparison.
cfg = TrainConfig(n=16, f=4, w=0.5, B=8, lr=1e-3, max_iters=150, validation_every=50, val_points=200)


def progress(it, loss, ratio):
    if ratio is not None:
        print(f"  iter {it:4d}  loss {loss:.4f}  validation ratio {ratio:.3f}")


params, log = train(cloud, regions, cfg, progress=progress)
print(f"best validation ratio {log.best_ratio:.3f} at iteration {log.best_iter}")

h, l_ = region_members(cloud, regions, "T")
subset = np.unique(np.concatenate(list(h.values()) + list(l_.values())))
maps = {
    "learned": saliency_map(params, cloud, cfg.grid, subset=subset),
    "plane": plane_saliency_map(cloud, cfg.grid, subset=subset),
    "handcrafted": handcrafted_map(cloud, cfg.w, 1.0, 4.0, subset=subset),
}
table = compare_methods(maps, cloud, regions, role="T")
print("\nsaliency ratio on the held-out regions (above 1 means anomalies stand out):")
print(table.to_text(), end="")
# 150 iterations is far too short for a good model; the acceptance suite
# trains for 1000 on the canned scenes.
