"""Saliency ratios, significance tests, hyper-parameter sweeps and method tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .inference import SaliencyMap
from .pointcloud import PointCloud, RegionSet, SpatialIndex, atomic_write, points_in_region

CONFIDENCE = 0.85


@dataclass
class RatioReport:
    """Mean saliency of salient (H) over non-salient (L) regions.

    ``mean_h`` and ``mean_l`` pool every point of the respective label; the
    t-test compares the per-region means instead.
    """

    role: str
    ratio: float
    mean_h: float
    mean_l: float
    region_means: dict[str, float]
    region_labels: dict[str, str]
    t_stat: float
    p_value: float
    undefined: bool = False

    @property
    def significant(self) -> bool:
        return bool(self.p_value < 1.0 - CONFIDENCE)

    def to_text(self) -> str:
        lines = [f"role {self.role}",
                 f"ratio {_num(self.ratio)}",
                 f"mean_H {_num(self.mean_h)}",
                 f"mean_L {_num(self.mean_l)}",
                 f"t {_num(self.t_stat)}",
                 f"p {_num(self.p_value)}",
                 f"significant_at_{CONFIDENCE:g} {'yes' if self.significant else 'no'}"]
        if self.undefined:
            lines.append("ratio_undefined yes")
        for name in sorted(self.region_means):
            lines.append(f"region {name} {self.region_labels[name]} {_num(self.region_means[name])}")
        return "\n".join(lines) + "\n"


def _num(x: float) -> str:
    return repr(float(x))


def pooled_t_test(a, b) -> tuple[float, float]:
    """Two-sided equal-variance t-test of sample ``a`` against ``b``.

    Zero pooled variance gives ``t = 0, p = 1`` for equal means and
    ``t = +-inf, p = 0`` otherwise; fewer than three values give NaN.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) + len(b) < 3 or len(a) == 0 or len(b) == 0:
        return math.nan, math.nan
    diff = a.mean() - b.mean()
    spread = np.sum((a - a.mean()) ** 2) + np.sum((b - b.mean()) ** 2)
    if spread == 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    res = stats.ttest_ind(a, b, equal_var=True)
    return float(res.statistic), float(res.pvalue)


def ratio_from_groups(h_scores: dict[str, np.ndarray], l_scores: dict[str, np.ndarray], role: str) -> RatioReport:
    """Build a report from per-region score arrays."""
    if not h_scores or not l_scores:
        raise ValueError(f"role {role} needs at least one H and one L region")
    for name, s in {**h_scores, **l_scores}.items():
        if len(s) == 0:
            raise ValueError(f"region {name} contains no points")
    h_all = np.concatenate([np.asarray(s, dtype=np.float64) for s in h_scores.values()])
    l_all = np.concatenate([np.asarray(s, dtype=np.float64) for s in l_scores.values()])
    mean_h = math.fsum(h_all) / len(h_all)
    mean_l = math.fsum(l_all) / len(l_all)
    undefined = mean_l == 0.0
    ratio = math.nan if undefined else mean_h / mean_l
    means = {k: math.fsum(np.asarray(v, dtype=np.float64)) / len(v) for k, v in {**h_scores, **l_scores}.items()}
    labels = {**{k: "H" for k in h_scores}, **{k: "L" for k in l_scores}}
    t, p = pooled_t_test([means[k] for k in h_scores], [means[k] for k in l_scores])
    return RatioReport(role, ratio, mean_h, mean_l, means, labels, t, p, undefined)


def region_members(cloud: PointCloud, regions: RegionSet, role: str,
                   index: SpatialIndex | None = None) -> tuple[dict, dict]:
    """Point indices of each H and each L region of ``role``."""
    h = {r.name: points_in_region(cloud, r, index) for r in regions.select(role, "H")}
    l_ = {r.name: points_in_region(cloud, r, index) for r in regions.select(role, "L")}
    return h, l_


def saliency_ratio(smap: SaliencyMap, cloud: PointCloud, regions: RegionSet, role: str = "T",
                   members: tuple[dict, dict] | None = None) -> RatioReport:
    """Saliency ratio of ``smap`` over the regions of ``role``."""
    if role not in ("D", "T"):
        raise ValueError(f"role must be D or T, got {role!r}")
    h_idx, l_idx = members if members is not None else region_members(cloud, regions, role)
    try:
        h = {k: smap.lookup(v) for k, v in h_idx.items()}
        l_ = {k: smap.lookup(v) for k, v in l_idx.items()}
    except KeyError as exc:
        raise ValueError(str(exc.args[0])) from None
    return ratio_from_groups(h, l_, role)


# sweeps


@dataclass
class SweepCell:
    f: int
    n: int
    ratios: list[float] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        ok = [r for r in self.ratios if math.isfinite(r)]
        return math.fsum(ok) / len(ok) if ok else math.nan

    @property
    def std(self) -> float:
        ok = [r for r in self.ratios if math.isfinite(r)]
        if len(ok) < 2:
            return 0.0 if ok else math.nan
        return float(np.std(ok, ddof=1))


@dataclass
class SweepResult:
    f_list: list[int]
    n_list: list[int]
    runs: int
    cells: dict[tuple[int, int], SweepCell]

    @property
    def best(self) -> tuple[int, int] | None:
        scored = [(c.mean, -i, key) for i, (key, c) in enumerate(self.cells.items()) if math.isfinite(c.mean)]
        return max(scored)[2] if scored else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["f", "n", "runs", "mean", "std", "ratios", "errors"])
        for (f, n), c in self.cells.items():
            w.writerow([f, n, len(c.ratios), _num(c.mean), _num(c.std),
                        " ".join(_num(r) for r in c.ratios), " | ".join(c.errors)])
        return buf.getvalue()

    def to_text(self) -> str:
        """Grid with one row per f and one column per n, cells ``mean +- std``."""
        head = ["f \\ n"] + [str(n) for n in self.n_list]
        rows = [head]
        for f in self.f_list:
            row = [str(f)]
            for n in self.n_list:
                c = self.cells[(f, n)]
                row.append("failed" if not math.isfinite(c.mean) else f"{c.mean:.3f} +- {c.std:.3f}")
            rows.append(row)
        text = _align(rows)
        if self.best is not None:
            text += f"best f={self.best[0]} n={self.best[1]}\n"
        return text


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "".join("  ".join(c.rjust(wd) for c, wd in zip(r, widths)).rstrip() + "\n" for r in rows)


def sweep(cloud: PointCloud, regions: RegionSet, f_list, n_list, runs: int, base_cfg,
          trainer: Callable | None = None, workers: int = 1) -> SweepResult:
    """Train ``runs`` networks for every (f, n) and collect their validation ratios.

    ``trainer(cloud, regions, cfg) -> float`` may be injected; the default
    trains with :func:`anomsal.training.train` and returns the best r_D. Runs
    differ only in seed (``base_cfg.seed + run``). A failing run records its
    error without aborting the other cells.
    """
    import dataclasses

    f_list, n_list = list(f_list), list(n_list)
    if not f_list or not n_list:
        raise ValueError("f_list and n_list must be non-empty")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if trainer is None:
        from .training import train

        def trainer(c, r, cfg):
            return train(c, r, cfg)[1].best_ratio

    jobs = [(f, n, k) for f in f_list for n in n_list for k in range(runs)]

    def run(job):
        f, n, k = job
        cfg = dataclasses.replace(base_cfg, f=f, n=n, seed=base_cfg.seed + k)
        try:
            return float(trainer(cloud, regions, cfg)), None
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            return math.nan, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    cells = {(f, n): SweepCell(f, n) for f in f_list for n in n_list}
    for (f, n, _), (r, err) in zip(jobs, results):
        cells[(f, n)].ratios.append(r)
        if err:
            cells[(f, n)].errors.append(err)
    return SweepResult(f_list, n_list, runs, cells)


# method comparison


@dataclass
class ComparisonTable:
    rows: dict[str, RatioReport | float]

    def ratios(self) -> dict[str, float]:
        return {k: (v.ratio if isinstance(v, RatioReport) else float(v)) for k, v in self.rows.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "ratio"])
        for k, r in self.ratios().items():
            w.writerow([k, _num(r)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != ["method", "ratio"]:
            raise ValueError("not a comparison table")
        return cls({row[0]: float(row[1]) for row in reader if row})

    def to_text(self) -> str:
        rows = [["method", "ratio"]] + [[k, f"{r:.4f}"] for k, r in self.ratios().items()]
        return _align(rows)


def compare_methods(maps: dict[str, SaliencyMap], cloud: PointCloud, regions: RegionSet,
                    role: str = "T") -> ComparisonTable:
    """One saliency ratio per method, all over the same regions."""
    members = region_members(cloud, regions, role)
    return ComparisonTable({k: saliency_ratio(m, cloud, regions, role, members) for k, m in maps.items()})


# expectation files


def parse_expectations(text: str) -> list[tuple[str, str, float]]:
    """Lines ``name op value`` with op one of ``> >= < <=``; ``#`` starts a comment."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] not in _OPS:
            raise ValueError(f"line {lineno}: expected 'name op value', got {raw!r}")
        out.append((parts[0], parts[1], float(parts[2])))
    return out


_OPS = {">": lambda a, b: a > b, ">=": lambda a, b: a >= b,
        "<": lambda a, b: a < b, "<=": lambda a, b: a <= b}


def check_expectations(values: dict[str, float], expectations) -> list[str]:
    """Violated expectations as readable messages; missing names count as violations."""
    failures = []
    for name, op, bound in expectations:
        v = values.get(name)
        if v is None or not _OPS[op](v, bound):
            failures.append(f"{name} = {v} violates {op} {bound}")
    return failures


def write_report(path, text: str) -> None:
    atomic_write(path, text)
