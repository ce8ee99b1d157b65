import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anomsal.evaluation import (ComparisonTable, SweepCell, check_expectations, compare_methods,
                                parse_expectations, pooled_t_test, ratio_from_groups, saliency_ratio, sweep)
from anomsal.inference import SaliencyMap
from anomsal.pointcloud import PointCloud, Region, RegionSet
from anomsal.training import TrainConfig
from oracles import pooled_t, student_t_two_sided_p


@pytest.fixture
def four_regions():
    # one point per region, H regions at x=0,1 and L regions at x=2,3
    cloud = PointCloud(np.array([[0.5, 0.5, 0], [1.5, 0.5, 0], [2.5, 0.5, 0], [3.5, 0.5, 0]]))
    regions = RegionSet([
        Region.box("h1", "T", "H", (0, 0, -1), (1, 1, 1)),
        Region.box("h2", "T", "H", (1.1, 0, -1), (2, 1, 1)),
        Region.box("l1", "T", "L", (2.1, 0, -1), (3, 1, 1)),
        Region.box("l2", "T", "L", (3.1, 0, -1), (4, 1, 1)),
    ])
    return cloud, regions


def test_hand_built_ratio_and_t(four_regions):
    cloud, regions = four_regions
    rep = saliency_ratio(SaliencyMap(np.arange(4), [0.4, 0.6, 0.2, 0.3]), cloud, regions)
    assert rep.ratio == pytest.approx(2.0, abs=1e-15)
    assert abs(rep.t_stat - pooled_t([0.4, 0.6], [0.2, 0.3])) < 1e-12
    assert abs(rep.p_value - student_t_two_sided_p(rep.t_stat, 2)) < 1e-6
    assert rep.region_means == pytest.approx({"h1": 0.4, "h2": 0.6, "l1": 0.2, "l2": 0.3})
    assert "ratio 2.0" in rep.to_text()


def test_equal_scores(four_regions):
    cloud, regions = four_regions
    rep = saliency_ratio(SaliencyMap(np.arange(4), [0.3] * 4), cloud, regions)
    assert rep.ratio == 1.0 and rep.t_stat == 0.0 and not rep.significant


def test_zero_l_mean_is_undefined(four_regions):
    cloud, regions = four_regions
    rep = saliency_ratio(SaliencyMap(np.arange(4), [0.3, 0.2, 0, 0]), cloud, regions)
    assert rep.undefined and math.isnan(rep.ratio)
    assert "ratio_undefined yes" in rep.to_text()


def test_missing_coverage_and_roles(four_regions):
    cloud, regions = four_regions
    with pytest.raises(ValueError):
        saliency_ratio(SaliencyMap([0, 1], [0.1, 0.2]), cloud, regions)
    with pytest.raises(ValueError):
        saliency_ratio(SaliencyMap(np.arange(4), [0.1] * 4), cloud, regions, role="D")
    with pytest.raises(ValueError):
        saliency_ratio(SaliencyMap(np.arange(4), [0.1] * 4), cloud, regions, role="X")


def test_pooling_is_over_points_not_regions():
    rep = ratio_from_groups({"a": np.array([1.0, 1.0, 1.0]), "b": np.array([4.0])}, {"c": np.array([1.0])}, "T")
    assert rep.ratio == pytest.approx(7 / 4)


scores = st.lists(st.floats(0.01, 5), min_size=2, max_size=6)


@pytest.mark.filterwarnings("ignore:Precision loss occurred:RuntimeWarning")
@given(scores, scores, st.floats(0.1, 10))
def test_scaling_invariance_and_swap_symmetry(h, l_, k):
    hs = {f"h{i}": np.array([v]) for i, v in enumerate(h)}
    ls = {f"l{i}": np.array([v]) for i, v in enumerate(l_)}
    base = ratio_from_groups(hs, ls, "T")
    scaled = ratio_from_groups({a: b * k for a, b in hs.items()}, {a: b * k for a, b in ls.items()}, "T")
    assert scaled.ratio == pytest.approx(base.ratio, rel=1e-12)
    if math.isfinite(base.t_stat):
        assert scaled.t_stat == pytest.approx(base.t_stat, rel=1e-9, abs=1e-9)
    swapped = ratio_from_groups(ls, hs, "T")
    assert swapped.ratio == pytest.approx(1 / base.ratio, rel=1e-12)
    assert swapped.t_stat == pytest.approx(-base.t_stat, rel=1e-12, abs=1e-12) or (
        math.isinf(base.t_stat) and swapped.t_stat == -base.t_stat)
    assert (base.ratio > 1) == (base.mean_h > base.mean_l)


def test_t_test_against_textbook():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.random(rng.integers(2, 7)), rng.random(rng.integers(2, 7))
        t, p = pooled_t_test(a, b)
        assert abs(t - pooled_t(a.tolist(), b.tolist())) < 1e-12
        assert abs(p - student_t_two_sided_p(t, len(a) + len(b) - 2)) < 1e-6
    assert math.isnan(pooled_t_test([1.0], [2.0])[0])
    assert pooled_t_test([1.0, 1.0], [2.0, 2.0]) == (-math.inf, 0.0)


def test_sweep_statistics_with_injected_ratios():
    fake = iter([2.4, 2.5, 2.6])
    res = sweep(None, None, [8], [16], 3, TrainConfig(), trainer=lambda c, r, cfg: next(fake))
    cell = res.cells[(8, 16)]
    assert cell.mean == pytest.approx(2.5)
    assert cell.std == pytest.approx(0.1)
    assert "2.500 +- 0.100" in res.to_text()
    single = SweepCell(8, 16, [1.7])
    assert single.std == 0.0


def test_sweep_grid_seeds_and_errors():
    seen = []

    def trainer(c, r, cfg):
        seen.append((cfg.f, cfg.n, cfg.seed))
        if cfg.f == 16 and cfg.n == 24:
            raise RuntimeError("boom")
        return cfg.f / cfg.n + cfg.seed

    res = sweep(None, None, [8, 16, 32], [16, 24, 32], 2, TrainConfig(seed=10), trainer=trainer)
    assert len(res.cells) == 9
    assert {s for _, _, s in seen} == {10, 11}
    assert res.cells[(16, 24)].errors and math.isnan(res.cells[(16, 24)].mean)
    assert res.best == (32, 16)
    lines = res.to_text().splitlines()
    assert lines[0].split() == ["f", "\\", "n", "16", "24", "32"]
    assert len(lines) == 5 and "failed" in lines[2]
    again = sweep(None, None, [8, 16, 32], [16, 24, 32], 2, TrainConfig(seed=10), trainer=trainer, workers=4)
    assert again.to_csv() == res.to_csv()


def test_compare_methods_and_csv(four_regions):
    cloud, regions = four_regions
    m = SaliencyMap(np.arange(4), [0.4, 0.6, 0.2, 0.3])
    table = compare_methods({"ours": m, "copy": m}, cloud, regions)
    r = table.ratios()
    assert r["ours"] == r["copy"]
    back = ComparisonTable.from_csv(table.to_csv())
    assert back.ratios() == r
    with pytest.raises(ValueError):
        ComparisonTable.from_csv("a,b\n")


def test_expectations():
    exp = parse_expectations("# comment\nours > 1\nours >= plane  \n".replace("plane", "1.5"))
    assert exp == [("ours", ">", 1.0), ("ours", ">=", 1.5)]
    assert check_expectations({"ours": 2.0}, exp) == []
    assert len(check_expectations({"ours": 1.2}, exp)) == 1
    assert len(check_expectations({}, exp)) == 2
    with pytest.raises(ValueError, match="line 1"):
        parse_expectations("ours == 1")
