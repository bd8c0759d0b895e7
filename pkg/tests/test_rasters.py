import math
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pytest
from conftest import NODATA, make_grid

from povmap.geo import GeoPoint, WindowSpec, cell_window
from povmap.rasters import (
    EmptyWindowError,
    GridFormatError,
    RasterGrid,
    WindowOutOfGridError,
    max_pixel,
    read_grid,
    summarize,
    window_stats,
    window_sum,
    write_grid,
)


def _brute_values(grid: RasterGrid, center: GeoPoint, w: WindowSpec) -> list[float]:
    box = cell_window(center, w)
    out = []
    for r in range(grid.nrows):
        lat = grid.yll + (grid.nrows - r - 0.5) * grid.cellsize
        for c in range(grid.ncols):
            lon = grid.xll + (c + 0.5) * grid.cellsize
            v = float(grid.values[r, c])
            if box.contains(lat, lon) and math.isfinite(v) and v != grid.nodata:
                out.append(v)
    return out


def _random_grid(rng: np.random.Generator) -> RasterGrid:
    rows, cols = rng.integers(3, 14, size=2)
    levels = [0.0, 0.0, 1.0, 2.5, 7.0, 12.0]
    values: npt.NDArray[np.float64] = rng.choice(levels, size=(rows, cols))
    values[rng.random((rows, cols)) < 0.1] = NODATA
    return make_grid(values, xll=10.0, yll=-2.0, cellsize=0.005)


def test_grid_file_round_trip(tmp_path: Path) -> None:
    grid = make_grid(
        [[0.1, 2.0, NODATA], [3.25, 0.0, 1e-7]], xll=30.5, yll=-1.25, cellsize=0.0083
    )
    path = tmp_path / "grid.asc"
    write_grid(grid, path)
    assert read_grid(path) == grid


def test_read_grid_rejects_value_count_mismatch(tmp_path: Path) -> None:
    path = tmp_path / "bad.asc"
    path.write_text(
        "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2 3\n"
    )
    with pytest.raises(GridFormatError, match="declares"):
        read_grid(path)


def test_read_grid_rejects_wrong_header_key(tmp_path: Path) -> None:
    path = tmp_path / "bad.asc"
    path.write_text("ncols 1\nrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -1\n5\n")
    with pytest.raises(GridFormatError, match="nrows"):
        read_grid(path)


def test_summarize_hand_example() -> None:
    stats = summarize(np.array([3.0, 0.0, 4.0, 1.0, 0.0, 2.0]))
    assert stats.max == 4.0
    assert stats.mean == pytest.approx(10.0 / 6.0)
    assert stats.median == 1.0
    assert stats.zero_ratio == pytest.approx(2.0 / 6.0)
    assert stats.upper_third_mean == 3.5
    assert stats.lower_third_mean == 0.0


def test_all_zero_window_has_zero_ratio_one() -> None:
    grid = make_grid(np.zeros((5, 5)), cellsize=0.01)
    stats = window_stats(grid, GeoPoint(0.025, 0.025), WindowSpec(1.6))
    assert stats.zero_ratio == 1.0
    assert stats.max == 0.0


def test_window_stats_and_sum_match_brute_force() -> None:
    rng = np.random.default_rng(2024)
    w = WindowSpec(1.6)
    for _ in range(1000):
        grid = _random_grid(rng)
        ext = grid.extent
        center = GeoPoint(
            float(rng.uniform(ext.south, ext.north)), float(rng.uniform(ext.west, ext.east))
        )
        expected = _brute_values(grid, center, w)
        total = window_sum(grid, center, w)
        assert total.pixel_count == len(expected)
        assert total.total == math.fsum(expected)
        if not expected:
            with pytest.raises(EmptyWindowError):
                window_stats(grid, center, w)
            continue
        ordered = sorted(expected)
        n = len(ordered)
        k = math.ceil(n / 3)
        stats = window_stats(grid, center, w)
        assert stats.max == ordered[-1]
        assert stats.median == ordered[(n - 1) // 2]
        assert stats.mean == pytest.approx(sum(ordered) / n, rel=1e-12)
        assert stats.zero_ratio == ordered.count(0.0) / n
        assert stats.upper_third_mean == pytest.approx(sum(ordered[n - k :]) / k, rel=1e-12)
        assert stats.lower_third_mean == pytest.approx(sum(ordered[:k]) / k, rel=1e-12)


def test_window_outside_grid_raises() -> None:
    grid = make_grid(np.ones((3, 3)))
    with pytest.raises(WindowOutOfGridError):
        window_sum(grid, GeoPoint(5.0, 5.0), WindowSpec(1.6))


def test_window_of_only_nodata_is_empty() -> None:
    grid = make_grid(np.full((3, 3), NODATA))
    result = window_sum(grid, GeoPoint(0.015, 0.015), WindowSpec(5.0))
    assert result.empty
    with pytest.raises(EmptyWindowError):
        window_stats(grid, GeoPoint(0.015, 0.015), WindowSpec(5.0))


def test_max_pixel_ties_resolve_to_first_in_row_major_order() -> None:
    grid = make_grid([[1.0, 9.0], [9.0, NODATA]])
    found = max_pixel(grid, np.ones((2, 2), dtype=bool))
    assert found is not None
    point, value = found
    assert value == 9.0
    assert (point.lat, point.lon) == pytest.approx((0.015, 0.015))


def test_max_pixel_none_when_mask_selects_nothing_valid() -> None:
    grid = make_grid([[NODATA, 1.0]])
    assert max_pixel(grid, np.array([[True, False]])) is None
