"""Point clouds, a uniform hash-grid index, and labelled regions.

Coordinates are metres with +z up. Two on-disk formats are supported:

* xyz-ascii: ``x y z [attr ...]`` per line, ``#`` lines are comments. When
  the first comment line reads ``# x y z name1 name2 ...`` the extra columns
  get those names, otherwise they are called ``attr0``, ``attr1``, ...
* PLY (ascii or binary little-endian) with a ``vertex`` element holding
  ``x``, ``y``, ``z`` and any number of extra scalar properties.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed point or region file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptyInputError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to ``path`` through a temp file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class PointCloud:
    points: np.ndarray
    attributes: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise EmptyInputError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts
        attrs = {}
        for name, values in self.attributes.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (len(pts),):
                raise ValueError(f"attribute {name!r} has shape {values.shape}, expected ({len(pts)},)")
            attrs[name] = values
        self.attributes = attrs

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(self.points[idx], {k: v[idx] for k, v in self.attributes.items()})

    def with_attribute(self, name: str, values) -> "PointCloud":
        attrs = dict(self.attributes)
        attrs[name] = values
        return PointCloud(self.points, attrs)


# ---------------------------------------------------------------------------
# xyz-ascii
# ---------------------------------------------------------------------------


def _parse_xyz(text: str) -> PointCloud:
    names = None
    rows = []
    width = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tokens = line[1:].split()
            if names is None and not rows and tokens[:3] == ["x", "y", "z"]:
                names = tokens[3:]
            continue
        fields = line.split()
        if len(fields) < 3:
            raise ParseError(f"expected at least 3 fields, got {len(fields)}", lineno)
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(f"expected {width} fields, got {len(fields)}", lineno)
        try:
            vals = [float(v) for v in fields]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not all(math.isfinite(v) for v in vals[:3]):
            raise ParseError("non-finite coordinate", lineno)
        rows.append(vals)
    if not rows:
        raise EmptyInputError("no points in input")
    data = np.array(rows, dtype=np.float64)
    extra = data.shape[1] - 3
    if names is None or len(names) != extra:
        names = [f"attr{i}" for i in range(extra)]
    return PointCloud(data[:, :3], {name: data[:, 3 + i] for i, name in enumerate(names)})


def _format_xyz(cloud: PointCloud, precision: int | None) -> str:
    names = list(cloud.attributes)
    cols = [cloud.points] + [cloud.attributes[k][:, None] for k in names]
    data = np.hstack(cols).astype(np.float64)
    lines = ["# " + " ".join(["x", "y", "z"] + names)]
    if precision is None:
        # shortest text that parses back to the same double
        lines.extend(" ".join(map(repr, row)) for row in data.tolist())
    else:
        fmt = " ".join([f"%.{precision}f"] * data.shape[1])
        lines.extend(fmt % tuple(row) for row in data)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply(data: bytes) -> PointCloud:
    if not data.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", 1)
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("missing end_header")
    nl = data.find(b"\n", end)
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for lineno, line in enumerate(header, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", lineno)
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list"))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown property type {tok[1]}", lineno)
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise ParseError("the first PLY element must be 'vertex'")
    _, count, props = elements[0]
    if any(t == "list" for _, t in props):
        raise ParseError("list properties on vertices are not supported")
    names = [p for p, _ in props]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis!r}")
    if count == 0:
        raise EmptyInputError("PLY has no vertices")
    if fmt == "ascii":
        lines = body.decode("ascii").splitlines()
        if len(lines) < count:
            raise ParseError(f"expected {count} vertex lines, found {len(lines)}")
        hdr_len = len(header) + 1
        rows = []
        for i in range(count):
            fields = lines[i].split()
            if len(fields) != len(props):
                raise ParseError(f"expected {len(props)} values, got {len(fields)}", hdr_len + i + 1)
            try:
                rows.append([float(v) for v in fields])
            except ValueError as exc:
                raise ParseError(str(exc), hdr_len + i + 1) from None
        table = np.array(rows, dtype=np.float64)
        columns = {name: table[:, j] for j, name in enumerate(names)}
    else:
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        if len(body) < count * dtype.itemsize:
            raise ParseError("truncated binary vertex data")
        rec = np.frombuffer(body, dtype=dtype, count=count)
        columns = {name: rec[name].astype(np.float64) for name in names}
    pts = np.column_stack([columns["x"], columns["y"], columns["z"]])
    if not np.all(np.isfinite(pts)):
        bad = int(np.argmax(~np.all(np.isfinite(pts), axis=1)))
        raise ParseError(f"non-finite coordinate in vertex {bad}")
    attrs = {k: v for k, v in columns.items() if k not in ("x", "y", "z")}
    return PointCloud(pts, attrs)


def _format_ply(cloud: PointCloud, binary: bool = True) -> bytes:
    names = ["x", "y", "z"] + list(cloud.attributes)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {cloud.n}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    cols = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    cols += [cloud.attributes[k] for k in cloud.attributes]
    if binary:
        rec = np.empty(cloud.n, dtype=[(name, "<f8") for name in names])
        for name, col in zip(names, cols):
            rec[name] = col
        return head + rec.tobytes()
    table = np.column_stack(cols)
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in table) + "\n"
    return head + body.encode("ascii")


def _guess_format(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "ply" if path.suffix.lower() == ".ply" else "xyz-ascii"


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Read a cloud from an xyz-ascii or PLY file (format guessed from suffix)."""
    path = Path(path)
    fmt = _guess_format(path, format)
    if fmt == "ply":
        return _parse_ply(path.read_bytes())
    if fmt == "xyz-ascii":
        return _parse_xyz(path.read_text())
    raise ValueError(f"unknown point format {fmt!r}")


def write_cloud(path, cloud: PointCloud, format: str | None = None, precision: int | None = 6,
                binary: bool = True) -> None:
    """Write PLY (binary doubles unless ``binary=False``) or ASCII xyz.

    ``precision`` is the number of decimals in xyz output; None writes
    every value losslessly.
    """
    path = Path(path)
    fmt = _guess_format(path, format)
    if fmt == "ply":
        atomic_write(path, _format_ply(cloud, binary=binary))
    elif fmt == "xyz-ascii":
        atomic_write(path, _format_xyz(cloud, precision))
    else:
        raise ValueError(f"unknown point format {fmt!r}")


def decimate(cloud: PointCloud, fraction: float, seed: int = 0) -> PointCloud:
    """Uniform random thinning to roughly ``fraction`` of the points (order kept)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = max(1, int(round(fraction * cloud.n)))
    idx = np.sort(sample_points(cloud, k, seed))
    return cloud.subset(idx)


# ---------------------------------------------------------------------------
# Spatial hash grid
# ---------------------------------------------------------------------------


class SpatialIndex:
    """Uniform grid over 3-D space mapping each occupied cell to its points."""

    def __init__(self, points: np.ndarray, cell: float):
        if not cell > 0:
            raise ValueError(f"cell size must be positive, got {cell}")
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell)
        keys = np.floor(self.points / self.cell).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        self.order = order
        sk = keys[order]
        if len(sk):
            change = np.any(np.diff(sk, axis=0) != 0, axis=1)
            starts = np.concatenate([[0], np.nonzero(change)[0] + 1])
        else:
            starts = np.zeros(0, dtype=np.int64)
        ends = np.append(starts[1:], len(sk))
        self.cell_keys = sk[starts] if len(sk) else np.zeros((0, 3), dtype=np.int64)
        self.cell_slices = np.column_stack([starts, ends])
        self.table = {tuple(k): i for i, k in enumerate(self.cell_keys.tolist())}
        if len(sk):
            self.key_min, self.key_max = sk.min(axis=0), sk.max(axis=0)
        else:
            self.key_min = self.key_max = np.zeros(3, dtype=np.int64)

    def _candidate_cells(self, lo, hi) -> np.ndarray:
        klo = np.maximum(np.floor(np.asarray(lo) / self.cell), self.key_min)
        khi = np.minimum(np.floor(np.asarray(hi) / self.cell), self.key_max)
        if np.any(khi < klo):
            return np.zeros(0, dtype=np.int64)
        klo, khi = klo.astype(np.int64), khi.astype(np.int64)
        span = khi - klo + 1
        if int(np.prod(span)) > len(self.cell_keys):
            inside = np.all((self.cell_keys >= klo) & (self.cell_keys <= khi), axis=1)
            return np.nonzero(inside)[0]
        found = []
        for kx in range(klo[0], khi[0] + 1):
            for ky in range(klo[1], khi[1] + 1):
                for kz in range(klo[2], khi[2] + 1):
                    i = self.table.get((kx, ky, kz))
                    if i is not None:
                        found.append(i)
        return np.asarray(found, dtype=np.int64)

    def query_box(self, lo, hi) -> np.ndarray:
        """Sorted indices of points with ``lo <= p <= hi`` on every axis."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        cells = self._candidate_cells(lo, hi)
        if len(cells) == 0:
            return np.zeros(0, dtype=np.int64)
        sl = self.cell_slices[cells]
        cand = np.concatenate([self.order[a:b] for a, b in sl])
        p = self.points[cand]
        keep = np.all((p >= lo) & (p <= hi), axis=1)
        return np.sort(cand[keep])


def build_index(cloud: PointCloud, cell: float) -> SpatialIndex:
    return SpatialIndex(cloud.points, cell)


def sample_points(cloud: PointCloud, k: int, seed: int) -> np.ndarray:
    """``k`` distinct random point indices, reproducible for a given seed."""
    if not 1 <= k <= cloud.n:
        raise ValueError(f"k must be in [1, {cloud.n}], got {k}")
    rng = np.random.default_rng(seed)
    return rng.choice(cloud.n, size=k, replace=False)


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------

ROLES = ("D", "T")
LABELS = ("H", "L")


@dataclass(frozen=True)
class Region:
    """Axis-aligned box or 2.5-D polygon, tagged with a role and a label.

    For boxes ``lo``/``hi`` are the corners. For polygons ``vertices`` is a
    (k, 2) footprint and ``lo[2]``/``hi[2]`` bound z (may be infinite).
    """

    name: str
    role: str
    label: str
    kind: str
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    vertices: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"region {self.name}: role must be D or T, got {self.role!r}")
        if self.label not in LABELS:
            raise ValueError(f"region {self.name}: label must be H or L, got {self.label!r}")
        if self.kind not in ("box", "polygon"):
            raise ValueError(f"region {self.name}: unknown geometry {self.kind!r}")
        if self.kind == "polygon" and len(self.vertices) < 3:
            raise ValueError(f"region {self.name}: polygon needs at least 3 vertices")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"region {self.name}: lower bound exceeds upper bound")

    @classmethod
    def box(cls, name, role, label, lo, hi) -> "Region":
        return cls(name, role, label, "box", tuple(map(float, lo)), tuple(map(float, hi)))

    @classmethod
    def polygon(cls, name, role, label, vertices, zmin=-math.inf, zmax=math.inf) -> "Region":
        verts = tuple((float(x), float(y)) for x, y in vertices)
        if len(verts) < 3:
            raise ValueError(f"region {name}: polygon needs at least 3 vertices")
        xs = [v[0] for v in verts]
        ys = [v[1] for v in verts]
        return cls(name, role, label, "polygon", (min(xs), min(ys), float(zmin)),
                   (max(xs), max(ys), float(zmax)), verts)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        if self.kind == "polygon" and inside.any():
            sub = np.nonzero(inside)[0]
            inside[sub] = _in_polygon(pts[sub, :2], np.asarray(self.vertices))
        return inside

    def to_record(self) -> str:
        head = f"region {self.name} {self.role} {self.label}"
        if self.kind == "box":
            return head + " box " + " ".join(_fmt(v) for v in self.lo + self.hi)
        coords = " ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in self.vertices)
        return head + f" polygon {_fmt(self.lo[2])} {_fmt(self.hi[2])} {coords}"


def _fmt(v: float) -> str:
    return repr(float(v))


def _in_polygon(xy: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd crossing test, vectorised over points."""
    x, y = xy[:, 0], xy[:, 1]
    inside = np.zeros(len(xy), dtype=bool)
    xj, yj = verts[-1]
    for xi, yi in verts:
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (xj - xi) * (y - yi) / (yj - yi) + xi
        inside ^= crosses & (x < xcross)
        xj, yj = xi, yi
    return inside


@dataclass
class RegionSet:
    regions: list[Region] = field(default_factory=list)

    def __iter__(self):
        return iter(self.regions)

    def __len__(self):
        return len(self.regions)

    def select(self, role: str | None = None, label: str | None = None) -> list[Region]:
        return [r for r in self.regions
                if (role is None or r.role == role) and (label is None or r.label == label)]

    def to_text(self) -> str:
        return "".join(r.to_record() + "\n" for r in self.regions)


def parse_regions(text: str) -> RegionSet:
    regions = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] != "region" or len(tok) < 5:
            raise ParseError("expected 'region <name> <D|T> <H|L> <box|polygon> ...'", lineno)
        name, role, label, kind = tok[1:5]
        try:
            nums = [float(v) for v in tok[5:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        try:
            if kind == "box":
                if len(nums) != 6:
                    raise ParseError("box needs 6 numbers", lineno)
                regions.append(Region.box(name, role, label, nums[:3], nums[3:]))
            elif kind == "polygon":
                if len(nums) < 8 or len(nums) % 2:
                    raise ParseError("polygon needs zmin zmax and at least 3 x y pairs", lineno)
                verts = list(zip(nums[2::2], nums[3::2]))
                regions.append(Region.polygon(name, role, label, verts, nums[0], nums[1]))
            else:
                raise ParseError(f"unknown geometry {kind!r}", lineno)
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return RegionSet(regions)


def load_regions(path) -> RegionSet:
    return parse_regions(Path(path).read_text())


def write_regions(path, regions: RegionSet) -> None:
    atomic_write(path, regions.to_text())


def points_in_region(cloud: PointCloud, region: Region, index: SpatialIndex | None = None) -> np.ndarray:
    """Sorted indices of the cloud points inside ``region``."""
    if index is not None:
        lo = np.maximum(region.lo, cloud.points.min(axis=0))
        hi = np.minimum(region.hi, cloud.points.max(axis=0))
        if np.any(hi < lo):
            return np.zeros(0, dtype=np.int64)
        cand = index.query_box(lo, hi)
        return cand[region.contains(cloud.points[cand])]
    return np.nonzero(region.contains(cloud.points))[0]
