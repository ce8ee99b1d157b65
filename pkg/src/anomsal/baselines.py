"""Reference saliency methods: plane-fit reconstruction and normal/curvature deviation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .inference import GridConfig, SaliencyMap, _grids_at
from .loss import loss_breakdown
from .pointcloud import PointCloud, SpatialIndex, build_index
from .voxelization import binarize, make_weights, shell_mask

CHUNK = 256


def orient(normals: np.ndarray) -> np.ndarray:
    """Flip unit normals into the +z half-space; horizontal ones towards +x, then +y."""
    normals = np.array(normals, dtype=np.float64, copy=True)
    key = np.where(normals[..., 2] != 0, normals[..., 2],
                   np.where(normals[..., 0] != 0, normals[..., 0], normals[..., 1]))
    normals[key < 0] *= -1
    return normals


# ---------------------------------------------------------------------------
# plane fit
# ---------------------------------------------------------------------------


@dataclass
class PlaneFit:
    normal: np.ndarray
    offset: float
    eigenvalues: np.ndarray
    centroid: np.ndarray

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.normal - self.offset


def fit_plane(pts: np.ndarray) -> PlaneFit:
    """Least-squares plane through ``pts`` (at least three, not collinear)."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 3:
        raise ValueError("a plane needs at least three points")
    c = pts.mean(axis=0)
    d = pts - c
    vals, vecs = np.linalg.eigh(d.T @ d / len(pts))
    normal = orient(vecs[:, 0])
    return PlaneFit(normal, float(normal @ c), vals, c)


def _local_centers(n: int, w: float) -> np.ndarray:
    i = (np.arange(n) - 0.5 * n + 0.5) * w
    return np.stack(np.meshgrid(i, i, i, indexing="ij"), axis=-1).reshape(-1, 3)


def _plane_batch(counts: np.ndarray, cfg: GridConfig):
    """Plane-fit errors for count grids (B, n, n, n); returns (errors, degenerate, normals)."""
    b, n = counts.shape[0], cfg.n
    target = binarize(counts, cfg.t_b)
    weights = make_weights(counts)
    occ = (target.reshape(b, -1) != 0) & shell_mask(n, cfg.m).reshape(1, -1)
    centers = _local_centers(n, cfg.w)
    k = occ.sum(axis=1)
    few = k < 3
    kk = np.maximum(k, 1)[:, None]
    occf = occ.astype(np.float64)
    mean = occf @ centers / kk
    second = np.einsum("bc,ci,cj->bij", occf, centers, centers) / kk[:, :, None]
    cov = second - mean[:, :, None] * mean[:, None, :]
    cov[few] = np.eye(3)
    _, vecs = np.linalg.eigh(cov)
    normals = orient(vecs[:, :, 0])
    dist = (centers[None] - mean[:, None]) @ normals[:, :, None]
    raster = (np.abs(dist[:, :, 0]) < 0.5 * cfg.w).astype(np.float64).reshape(counts.shape)
    bd = loss_breakdown(raster, target, weights)
    errors = np.where(few, 0.0, bd.errors)
    return errors, few | bd.degenerate, normals


def plane_saliency(cloud: PointCloud, index: SpatialIndex, point, cfg: GridConfig):
    """Plane-fit reconstruction error at ``point``; returns ``(xi, degenerate)``.

    Fewer than three occupied shell voxels give ``xi = 0`` with the flag set.
    """
    counts = _grids_at(cloud, index, np.asarray(point, dtype=np.float64)[None], cfg.n, cfg.w)
    err, deg, _ = _plane_batch(counts, cfg)
    return float(err[0]), bool(deg[0])


def plane_fit_at(cloud: PointCloud, index: SpatialIndex, point, cfg: GridConfig) -> PlaneFit | None:
    """The plane fitted to the occupied shell voxels around ``point`` (grid-local frame)."""
    counts = _grids_at(cloud, index, np.asarray(point, dtype=np.float64)[None], cfg.n, cfg.w)[0]
    occ = (binarize(counts, cfg.t_b) != 0) & shell_mask(cfg.n, cfg.m)
    pts = _local_centers(cfg.n, cfg.w)[occ.ravel()]
    return fit_plane(pts) if len(pts) >= 3 else None


def plane_saliency_map(cloud: PointCloud, cfg: GridConfig, subset=None, index: SpatialIndex | None = None,
                       batch_size: int = 64) -> SaliencyMap:
    index = index or build_index(cloud, cfg.n * cfg.w)
    idx = np.arange(cloud.n) if subset is None else np.asarray(subset, dtype=np.int64)
    scores, flags = [], []
    for s in range(0, len(idx), batch_size):
        chunk = idx[s:s + batch_size]
        err, deg, _ = _plane_batch(_grids_at(cloud, index, cloud.points[chunk], cfg.n, cfg.w), cfg)
        scores.append(err)
        flags.append(deg)
    if not scores:
        return SaliencyMap(idx, np.zeros(0))
    return SaliencyMap(idx, np.concatenate(scores), np.concatenate(flags))


# ---------------------------------------------------------------------------
# normals, curvature and their deviation
# ---------------------------------------------------------------------------


@dataclass
class LocalSurfaceStats:
    """Per-point normal and surface variation; ``valid`` is False where undefined."""

    normals: np.ndarray
    curvature: np.ndarray
    valid: np.ndarray
    radius: float


def _group_stats(pts: np.ndarray, groups: list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sizes = np.fromiter((len(g) for g in groups), dtype=np.int64, count=len(groups))
    normals = np.full((len(groups), 3), np.nan)
    curv = np.full(len(groups), np.nan)
    ok = sizes >= 3
    if not ok.any():
        return normals, curv, ok
    sel = [g for g, good in zip(groups, ok) if good]
    flat = np.concatenate(sel).astype(np.int64)
    sz = sizes[ok]
    starts = np.concatenate([[0], np.cumsum(sz)[:-1]])
    q = pts[flat]
    mean = np.add.reduceat(q, starts, axis=0) / sz[:, None]
    d = q - np.repeat(mean, sz, axis=0)
    cov = np.add.reduceat(d[:, :, None] * d[:, None, :], starts, axis=0) / sz[:, None, None]
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 0.0)
    total = vals.sum(axis=1)
    normals[ok] = orient(vecs[:, :, 0])
    curv[ok] = np.where(total > 0, vals[:, 0] / np.where(total > 0, total, 1.0), 0.0)
    return normals, curv, ok


def estimate_normals_curvature(cloud: PointCloud, radius: float, subset=None,
                               tree: cKDTree | None = None) -> LocalSurfaceStats:
    """PCA normal and ``lambda_min / sum(lambda)`` within ``radius`` of each point.

    With ``subset`` only those points are analysed; the rest stay invalid.
    Points with fewer than three neighbours (themselves included) are invalid.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    tree = tree or cKDTree(cloud.points)
    idx = np.arange(cloud.n) if subset is None else np.asarray(subset, dtype=np.int64)
    normals = np.full((cloud.n, 3), np.nan)
    curv = np.full(cloud.n, np.nan)
    valid = np.zeros(cloud.n, dtype=bool)
    for s in range(0, len(idx), 4 * CHUNK):
        chunk = idx[s:s + 4 * CHUNK]
        groups = tree.query_ball_point(cloud.points[chunk], radius)
        nm, cv, ok = _group_stats(cloud.points, list(groups))
        normals[chunk], curv[chunk], valid[chunk] = nm, cv, ok
    return LocalSurfaceStats(normals, curv, valid, radius)


def deviation_saliency(dn, dk) -> np.ndarray:
    """``2 - exp(-dn) - exp(-dk)``: 0 without deviation, approaching 2 as both grow."""
    return 2.0 - (np.exp(-np.asarray(dn, dtype=np.float64)) + np.exp(-np.asarray(dk, dtype=np.float64)))


def handcrafted_saliency(cloud: PointCloud, stats: LocalSurfaceStats, rho_min: float, rho_max: float,
                         subset=None, normalize: bool = True, tree: cKDTree | None = None) -> SaliencyMap:
    """Weighted normal-angle and curvature deviation over the annulus [rho_min, rho_max].

    Neighbour weights rise linearly from 0 at ``rho_min`` to 1 at ``rho_max``
    and are rescaled to sum to one unless ``normalize`` is False. Angles
    ignore normal orientation. Points whose annulus holds no valid neighbour
    (or whose own stats are undefined) score 0 and are flagged.
    """
    if not 0 < rho_min < rho_max:
        raise ValueError("need 0 < rho_min < rho_max")
    tree = tree or cKDTree(cloud.points)
    idx = np.arange(cloud.n) if subset is None else np.asarray(subset, dtype=np.int64)
    scores = np.zeros(len(idx))
    flags = np.ones(len(idx), dtype=bool)
    for s in range(0, len(idx), CHUNK):
        chunk = idx[s:s + CHUNK]
        groups = tree.query_ball_point(cloud.points[chunk], rho_max)
        sizes = np.fromiter((len(g) for g in groups), dtype=np.int64, count=len(groups))
        if sizes.sum() == 0:
            continue
        nb = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups])
        owner = np.repeat(np.arange(len(chunk)), sizes)
        me = chunk[owner]
        r = np.linalg.norm(cloud.points[nb] - cloud.points[me], axis=1)
        keep = (r >= rho_min) & (r <= rho_max) & stats.valid[nb] & stats.valid[me]
        nb, owner, me, r = nb[keep], owner[keep], me[keep], r[keep]
        u = (r - rho_min) / (rho_max - rho_min)
        usum = np.bincount(owner, weights=u, minlength=len(chunk))
        if normalize:
            u = u / np.where(usum > 0, usum, 1.0)[owner]
        cos = np.abs(np.einsum("ij,ij->i", stats.normals[me], stats.normals[nb]))
        ang = np.arccos(np.clip(cos, 0.0, 1.0))
        dn = np.bincount(owner, weights=u * ang, minlength=len(chunk))
        dk = np.bincount(owner, weights=u * np.abs(stats.curvature[me] - stats.curvature[nb]),
                         minlength=len(chunk))
        ok = usum > 0
        scores[s:s + len(chunk)] = np.where(ok, deviation_saliency(dn, dk), 0.0)
        flags[s:s + len(chunk)] = ~ok
    return SaliencyMap(idx, scores, flags)


def handcrafted_map(cloud: PointCloud, radius: float, rho_min: float, rho_max: float, subset=None,
                    normalize: bool = True) -> SaliencyMap:
    """Handcrafted saliency of ``subset``, analysing only the points it needs."""
    tree = cKDTree(cloud.points)
    idx = np.arange(cloud.n) if subset is None else np.asarray(subset, dtype=np.int64)
    if subset is None:
        need = idx
    else:
        found = [np.asarray(g, dtype=np.int64)
                 for s in range(0, len(idx), CHUNK)
                 for g in tree.query_ball_point(cloud.points[idx[s:s + CHUNK]], rho_max)]
        need = np.unique(np.concatenate(found + [idx]))
    stats = estimate_normals_curvature(cloud, radius, subset=need, tree=tree)
    return handcrafted_saliency(cloud, stats, rho_min, rho_max, subset=idx, normalize=normalize, tree=tree)
