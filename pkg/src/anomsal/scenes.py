"""Deterministic synthetic scenes with labelled salient / non-salient regions.

Two geometries are supported:

``terrain``
    a height field ``z = h(x, y)`` over ``[0, X] x [0, Y]`` with pits, bumps,
    gullies and blocks carved into it;
``tube``
    the inside of a horizontal cylinder (axis along x) with niches pushed
    into the wall and blocks sticking out of it, a stand-in for a cave.

Surface roughness is a band-limited Gaussian random field (random Fourier
features) with RMS ``roughness``; ``noise`` adds isotropic per-point jitter.
Point counts are Poisson-distributed with the requested areal density, and
``bands`` raise the density inside x-strips to mimic overlapping scanlines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud, Region, RegionSet

ANOMALY_TYPES = ("pit", "bump", "gully", "block", "niche")


@dataclass(frozen=True)
class Anomaly:
    """A carved feature.

    For terrain, ``position`` is ``(x, y)``; for tubes it is ``(x, theta)``
    with theta the angle around the axis (0 = +y wall, pi/2 = ceiling).
    ``size`` is the footprint radius (half-width for gullies and blocks) and
    ``height`` the signed amplitude magnitude in metres. ``length`` only
    applies to gullies, which run along ``angle``.
    """

    type: str
    position: tuple[float, float]
    size: float
    height: float
    length: float = 0.0
    angle: float = 0.0

    def __post_init__(self):
        if self.type not in ANOMALY_TYPES:
            raise ValueError(f"unknown anomaly type {self.type!r}")
        if self.size <= 0 or self.height <= 0:
            raise ValueError("anomaly size and height must be positive")

    @property
    def reach(self) -> float:
        """Radius of a disc enclosing the footprint."""
        if self.type == "gully":
            return math.hypot(0.5 * self.length, self.size)
        if self.type == "block":
            return self.size * math.sqrt(2.0)
        return self.size


@dataclass(frozen=True)
class SceneSpec:
    geometry: str = "terrain"
    extent: tuple[float, float] = (80.0, 80.0)
    radius: float = 6.0
    density: float = 32.0
    roughness: float = 0.0
    roughness_scale: float = 2.0
    noise: float = 0.0
    relief: float = 0.0
    relief_scale: float = 20.0
    anomalies: tuple[Anomaly, ...] = ()
    bands: tuple[tuple[float, float, float], ...] = ()
    patches: tuple[tuple[float, float], ...] = ()
    patch_size: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.geometry not in ("terrain", "tube"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.density <= 0:
            raise ValueError("density must be positive")
        for x0, x1, factor in self.bands:
            if x1 <= x0 or factor <= 0:
                raise ValueError(f"invalid density band {(x0, x1, factor)}")
        self.check_disjoint()

    def _surface_xy(self, pos) -> np.ndarray:
        if self.geometry == "terrain":
            return np.asarray(pos, dtype=np.float64)
        return np.array([pos[0], pos[1] * self.radius])

    def check_disjoint(self) -> None:
        feats = list(self.anomalies)
        for i in range(len(feats)):
            for j in range(i + 1, len(feats)):
                a, b = feats[i], feats[j]
                d = _surface_distance(self, a.position, b.position)
                if d < a.reach + b.reach:
                    raise ValueError(f"anomalies {i} and {j} overlap")
        for k, p in enumerate(self.patches):
            for i, a in enumerate(feats):
                if _surface_distance(self, p, a.position) < a.reach + self.patch_size * math.sqrt(0.5):
                    raise ValueError(f"patch {k} overlaps anomaly {i}")


def _surface_distance(spec: SceneSpec, p, q) -> float:
    if spec.geometry == "terrain":
        return math.hypot(p[0] - q[0], p[1] - q[1])
    dth = (p[1] - q[1] + math.pi) % (2 * math.pi) - math.pi
    return math.hypot(p[0] - q[0], dth * spec.radius)


def _random_field(rng: np.random.Generator, sigma: float, scale: float, modes: int = 96):
    """Callable ``f(u, v)`` sampling a stationary Gaussian-like field with RMS ``sigma``."""
    k = rng.normal(0.0, 2.0 * np.pi / scale, size=(modes, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=modes)
    amp = sigma * math.sqrt(2.0 / modes)

    def field_at(u, v):
        out = np.zeros(len(u))
        for j in range(0, modes, 16):
            arg = np.outer(u, k[j:j + 16, 0]) + np.outer(v, k[j:j + 16, 1]) + phase[j:j + 16]
            out += np.cos(arg).sum(axis=1)
        return amp * out

    return field_at


def _profile(a: Anomaly, du: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """Signed displacement of ``a`` at surface offsets (du, dv) from its centre.

    Positive means towards the open side (up for terrain, into the tube).
    """
    if a.type in ("pit", "bump", "niche"):
        r2 = (du ** 2 + dv ** 2) / a.size ** 2
        shape = np.where(r2 < 1.0, 1.0 - r2, 0.0)
        sign = 1.0 if a.type == "bump" else -1.0
        return sign * a.height * shape
    if a.type == "gully":
        c, s = math.cos(a.angle), math.sin(a.angle)
        along = du * c + dv * s
        across = -du * s + dv * c
        r2 = (across / a.size) ** 2
        inside = (np.abs(along) <= 0.5 * a.length) & (r2 < 1.0)
        return np.where(inside, -a.height * (1.0 - r2), 0.0)
    # block
    inside = (np.abs(du) < a.size) & (np.abs(dv) < a.size)
    return np.where(inside, a.height, 0.0)


def _sample_count(rng, spec: SceneSpec, area: float, extra: float = 1.0) -> int:
    return int(rng.poisson(spec.density * area * extra))


def _surface_samples(rng, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Surface parameters (u, v) in metres: (x, y) for terrain, (x, arc length) for tubes."""
    if spec.geometry == "terrain":
        width, depth = spec.extent
    else:
        width, depth = spec.extent[0], 2.0 * np.pi * spec.radius
    n = _sample_count(rng, spec, width * depth)
    u = [rng.uniform(0.0, width, n)]
    v = [rng.uniform(0.0, depth, n)]
    for x0, x1, factor in spec.bands:
        if factor <= 1.0:
            continue
        a, b = max(0.0, x0), min(width, x1)
        k = _sample_count(rng, spec, (b - a) * depth, factor - 1.0)
        u.append(rng.uniform(a, b, k))
        v.append(rng.uniform(0.0, depth, k))
    return np.concatenate(u), np.concatenate(v)


def generate(spec: SceneSpec) -> tuple[PointCloud, RegionSet]:
    """Sample the scene; returns the cloud and its D/T x H/L regions."""
    rng = np.random.default_rng(spec.seed)
    u, v = _surface_samples(rng, spec)
    rough = np.zeros(len(u))
    if spec.roughness > 0:
        field_at = _random_field(rng, spec.roughness, spec.roughness_scale)
        if spec.geometry == "terrain":
            rough = field_at(u, v)
        else:
            # wrap the arc coordinate so the field is continuous around the tube
            circ = 2.0 * np.pi * spec.radius
            th = v / spec.radius
            rough = field_at(u, circ / (2 * np.pi) * np.cos(th)) * 0.5 + field_at(u + 1e3, circ / (2 * np.pi) * np.sin(th)) * 0.5
            rough *= math.sqrt(2.0)
    if spec.relief > 0 and spec.geometry == "terrain":
        rough = rough + _random_field(rng, spec.relief, spec.relief_scale)(u, v)
    disp = rough
    labels = np.full(len(u), -1, dtype=np.int64)
    for i, a in enumerate(spec.anomalies):
        cu, cv = spec._surface_xy(a.position)
        du = u - cu
        dv = v - cv
        if spec.geometry == "tube":
            circ = 2.0 * np.pi * spec.radius
            dv = (dv + 0.5 * circ) % circ - 0.5 * circ
        prof = _profile(a, du, dv)
        labels[prof != 0] = i
        disp = disp + prof
    if spec.geometry == "terrain":
        pts = np.column_stack([u, v, disp])
    else:
        th = v / spec.radius
        r = spec.radius - disp
        pts = np.column_stack([u, r * np.cos(th), r * np.sin(th)])
    if spec.noise > 0:
        pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
    cloud = PointCloud(pts, {"anomaly": labels.astype(np.float64)})
    return cloud, scene_regions(spec)


def _split(i: int) -> str:
    # alternate, flipping phase every four entries so both roles see every
    # kind of a four-periodic anomaly list
    return "D" if (i + i // 4) % 2 == 0 else "T"


def scene_regions(spec: SceneSpec) -> RegionSet:
    """H regions on anomaly cores and L regions on the clean patches, alternating D/T."""
    regions = []
    for i, a in enumerate(spec.anomalies):
        name = f"H{i}_{a.type}"
        if spec.geometry == "terrain":
            regions.append(_terrain_core(name, _split(i), a))
        else:
            if a.type == "block":
                radial = (0.5 * a.height, a.height + 0.5)
            else:
                radial = (-a.height - 0.5, -0.4 * a.height)
            regions.append(_tube_box(spec, name, _split(i), "H", a.position, 0.5 * a.size, radial))
    for k, p in enumerate(spec.patches):
        name = f"L{k}"
        half = 0.5 * spec.patch_size
        if spec.geometry == "terrain":
            x, y = p
            regions.append(Region.box(name, _split(k), "L", (x - half, y - half, -math.inf),
                                      (x + half, y + half, math.inf)))
        else:
            margin = 4.0 * spec.roughness + 4.0 * spec.noise + 0.5
            regions.append(_tube_box(spec, name, _split(k), "L", p, half, radial=(-margin, margin)))
    return RegionSet(regions)


def _terrain_core(name: str, role: str, a: Anomaly) -> Region:
    cx, cy = a.position
    if a.type in ("pit", "bump", "niche"):
        r = 0.6 * a.size
        verts = [(cx + r * math.cos(t), cy + r * math.sin(t))
                 for t in np.linspace(0.0, 2 * math.pi, 12, endpoint=False)]
        return Region.polygon(name, role, "H", verts)
    if a.type == "gully":
        c, s = math.cos(a.angle), math.sin(a.angle)
        hl, hw = 0.4 * a.length, 0.6 * a.size
        corners = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        verts = [(cx + p * c - q * s, cy + p * s + q * c) for p, q in corners]
        return Region.polygon(name, role, "H", verts)
    r = 0.8 * a.size
    return Region.box(name, role, "H", (cx - r, cy - r, -math.inf), (cx + r, cy + r, math.inf))


def _tube_box(spec: SceneSpec, name: str, role: str, label: str, pos, half: float, radial) -> Region:
    """Axis-aligned box on the tube wall; ``theta`` must be a multiple of pi/2.

    ``radial`` is the (inward-negative) displacement range to cover, in metres,
    measured like :func:`_profile` (positive = into the tube).
    """
    x, theta = pos
    quarter = round(theta / (0.5 * math.pi))
    if not math.isclose(theta, quarter * 0.5 * math.pi, abs_tol=1e-9):
        raise ValueError("tube regions need theta on a multiple of pi/2")
    axis = (1, 2, 1, 2)[quarter % 4]
    sign = (1, 1, -1, -1)[quarter % 4]
    lo = [x - half, -math.inf, -math.inf]
    hi = [x + half, math.inf, math.inf]
    other = 3 - axis
    lo[other], hi[other] = -half, half
    # displacement d maps to radius R - d along the wall normal
    r_a, r_b = spec.radius - radial[1], spec.radius - radial[0]
    if sign > 0:
        lo[axis], hi[axis] = r_a, r_b
    else:
        lo[axis], hi[axis] = -r_b, -r_a
    return Region.box(name, role, label, lo, hi)


# ---------------------------------------------------------------------------
# Canned scenes
# ---------------------------------------------------------------------------


def _checkerboard(extent: float, slots: int):
    step = extent / slots
    anomaly_slots, patch_slots = [], []
    for i in range(slots):
        for j in range(slots):
            c = ((i + 0.5) * step, (j + 0.5) * step)
            (anomaly_slots if (i + j) % 2 == 0 else patch_slots).append(c)
    return anomaly_slots, patch_slots


def _terrain_anomalies(slots, scale: float = 1.0) -> tuple[Anomaly, ...]:
    kinds = [
        ("pit", 2.0, 1.0), ("gully", 1.2, 0.8), ("bump", 2.0, 1.0), ("block", 1.0, 0.8),
    ]
    out = []
    for i, pos in enumerate(slots):
        kind, size, height = kinds[i % len(kinds)]
        extra = {"length": 9.0, "angle": 0.3 + 0.7 * i} if kind == "gully" else {}
        out.append(Anomaly(kind, pos, size, height * scale, **extra))
    return tuple(out)


def smooth_scene(seed: int = 0) -> SceneSpec:
    """Gently rough plane, about 2e5 points (airborne-fan analogue)."""
    anomaly_slots, patch_slots = _checkerboard(80.0, 4)
    return SceneSpec(
        geometry="terrain", extent=(80.0, 80.0), density=32.0,
        roughness=0.03, roughness_scale=3.0, noise=0.02, relief=0.5,
        anomalies=_terrain_anomalies(anomaly_slots), patches=tuple(patch_slots),
        seed=seed,
    )


def rough_scene(seed: int = 0) -> SceneSpec:
    """Rough riverbed analogue with a density-doubled strip over x in [40, 60]."""
    anomaly_slots, patch_slots = _checkerboard(80.0, 4)
    return SceneSpec(
        geometry="terrain", extent=(80.0, 80.0), density=64.0,
        roughness=0.3, roughness_scale=1.5, noise=0.03, relief=0.5,
        anomalies=_terrain_anomalies(anomaly_slots, scale=1.2), patches=tuple(patch_slots),
        bands=((40.0, 60.0, 2.0),), seed=seed,
    )


def curved_scene(seed: int = 0) -> SceneSpec:
    """Inside of a rough tube with wall niches and floor blocks (cave analogue)."""
    half_pi = 0.5 * math.pi
    anomalies, patches = [], []
    angles = (0.0, half_pi, math.pi, 0.0, math.pi, half_pi, 0.0, math.pi)
    for i, th in enumerate(angles):
        x = 6.0 + 9.0 * i
        anomalies.append(Anomaly("niche", (x, th), 1.8, 1.0))
        patches.append((x, (th + math.pi) % (2 * math.pi) if th != half_pi else 1.5 * math.pi))
    return SceneSpec(
        geometry="tube", extent=(78.0, 0.0), radius=6.0, density=32.0,
        roughness=0.1, roughness_scale=2.0, noise=0.02,
        anomalies=tuple(anomalies), patches=tuple(patches), seed=seed,
    )


CANNED = {"smooth": smooth_scene, "rough": rough_scene, "curved": curved_scene}
