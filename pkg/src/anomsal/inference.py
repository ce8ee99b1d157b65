"""Per-point saliency from a trained reconstruction network."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import network
from .loss import loss_breakdown
from .pointcloud import PointCloud, SpatialIndex, atomic_write, build_index, write_cloud
from .voxelization import binarize, count_points, make_shell, make_weights

INFER_BATCH = 32


@dataclass
class SaliencyMap:
    """Scores aligned with ``indices`` into a point cloud."""

    indices: np.ndarray
    scores: np.ndarray
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.indices), dtype=bool)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        if not len(self.indices) == len(self.scores) == len(self.degenerate):
            raise ValueError("indices, scores and flags must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("saliency scores must be finite")

    def __len__(self):
        return len(self.indices)

    def dense(self, n_points: int, fill: float = np.nan) -> np.ndarray:
        out = np.full(n_points, fill, dtype=np.float64)
        out[self.indices] = self.scores
        return out

    def lookup(self, idx) -> np.ndarray:
        """Scores for point indices ``idx``; raises KeyError for unscored points."""
        idx = np.asarray(idx, dtype=np.int64)
        order = np.argsort(self.indices, kind="stable")
        sorted_idx = self.indices[order]
        pos = np.searchsorted(sorted_idx, idx)
        pos = np.clip(pos, 0, max(len(sorted_idx) - 1, 0))
        if len(sorted_idx) == 0 or np.any(sorted_idx[pos] != idx):
            raise KeyError("saliency map does not cover every requested point")
        return self.scores[order[pos]]

    @classmethod
    def from_cloud(cls, cloud: PointCloud, channel: str = "saliency") -> "SaliencyMap":
        return cls(np.arange(cloud.n), cloud.attributes[channel])


@dataclass(frozen=True)
class GridConfig:
    """What inference needs to rebuild the network input around a point."""

    n: int = 16
    w: float = 1.0
    m: int = 3
    t_b: int = 2


def prepare_batch(counts: np.ndarray, t_b: int, m: int):
    """Counts (B, n, n, n) -> shells (B, 1, n, n, n) float32, targets, weights."""
    target = binarize(counts, t_b)
    weights = make_weights(counts)
    shells = make_shell(target, m).astype(np.float32)[:, None]
    return shells, target, weights


def _grids_at(cloud: PointCloud, index: SpatialIndex, centers: np.ndarray, n: int, w: float) -> np.ndarray:
    out = np.empty((len(centers), n, n, n), dtype=np.int32)
    half = 0.5 * n * w
    for i, c in enumerate(centers):
        lower = c - half
        cand = index.query_box(lower, lower + n * w)
        out[i] = count_points(cloud.points[cand], lower, n, w)
    return out


def score_centers(params, cloud: PointCloud, index: SpatialIndex, centers: np.ndarray, cfg: GridConfig):
    """Reconstruction error and degenerate flag for grids centred at ``centers``."""
    counts = _grids_at(cloud, index, np.asarray(centers, dtype=np.float64).reshape(-1, 3), cfg.n, cfg.w)
    shells, target, weights = prepare_batch(counts, cfg.t_b, cfg.m)
    pred = network.forward(params, shells)[:, 0]
    bd = loss_breakdown(pred, target, weights)
    return bd.errors, bd.degenerate


def _check_params(params, cfg: GridConfig) -> None:
    if "conv1.weight" not in params:
        raise ValueError("parameters do not describe a reconstruction network")
    try:
        network.ArchitectureSpec(cfg.n, params["conv1.weight"].shape[0])
    except ValueError as exc:
        raise ValueError(f"network does not fit grid configuration: {exc}") from None


def saliency_for_point(params, cloud: PointCloud, index: SpatialIndex, point, cfg: GridConfig):
    """Saliency of a single location; returns ``(score, degenerate)``."""
    _check_params(params, cfg)
    err, deg = score_centers(params, cloud, index, np.asarray(point)[None], cfg)
    return float(err[0]), bool(deg[0])


def saliency_map(params, cloud: PointCloud, cfg: GridConfig, subset=None, index: SpatialIndex | None = None,
                 workers: int = 1, stride: int = 1, batch_size: int = INFER_BATCH) -> SaliencyMap:
    """Score every point of ``subset`` (default: the whole cloud).

    Points are processed in fixed-size batches, so the result does not depend
    on ``workers``. With ``stride > 1`` only every stride-th point is run
    through the network and the rest copy their nearest scored neighbour.
    """
    _check_params(params, cfg)
    if index is None:
        index = build_index(cloud, cfg.n * cfg.w)
    idx = np.arange(cloud.n) if subset is None else np.asarray(subset, dtype=np.int64)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    run = idx[::stride]
    chunks = [run[i:i + batch_size] for i in range(0, len(run), batch_size)]

    def job(chunk):
        return score_centers(params, cloud, index, cloud.points[chunk], cfg)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, chunks))
    else:
        results = [job(c) for c in chunks]
    scores = np.concatenate([r[0] for r in results]) if results else np.zeros(0)
    flags = np.concatenate([r[1] for r in results]) if results else np.zeros(0, dtype=bool)
    if stride > 1 and len(run) < len(idx):
        from scipy.spatial import cKDTree

        _, near = cKDTree(cloud.points[run]).query(cloud.points[idx])
        scores, flags = scores[near], flags[near]
    return SaliencyMap(idx, scores, flags)


def write_saliency(path, cloud: PointCloud, smap: SaliencyMap, format: str | None = None) -> None:
    """Write the scored points with a ``saliency`` channel (PLY, xyz-ascii or CSV)."""
    path = Path(path)
    fmt = format or {".csv": "csv", ".ply": "ply"}.get(path.suffix.lower(), "xyz-ascii")
    pts = cloud.points[smap.indices]
    if fmt == "csv":
        lines = ["index,x,y,z,saliency"]
        lines += [f"{i},{p[0]!r},{p[1]!r},{p[2]!r},{s!r}"
                  for i, p, s in zip(smap.indices.tolist(), pts.tolist(), smap.scores.tolist())]
        atomic_write(path, "\n".join(lines) + "\n")
        return
    out = PointCloud(pts, {"index": smap.indices.astype(np.float64), "saliency": smap.scores})
    write_cloud(path, out, format=fmt, precision=9)


def read_saliency(path) -> SaliencyMap:
    """Inverse of :func:`write_saliency` (indices from the ``index`` channel)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return SaliencyMap(data[:, 0].astype(np.int64), data[:, 4])
    from .pointcloud import load_cloud

    cloud = load_cloud(path)
    idx = cloud.attributes.get("index", np.arange(cloud.n))
    return SaliencyMap(np.asarray(idx).astype(np.int64), cloud.attributes["saliency"])
