"""
ASCII grid I/O and windowed zonal statistics for luminosity and population rasters.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import numpy.typing as npt

from povmap.errors import DataError
from povmap.geo import BBox, GeoPoint, WindowSpec, cell_window

logger = logging.getLogger(__name__)

HEADER_KEYS: tuple[str, ...] = (
    "ncols",
    "nrows",
    "xllcorner",
    "yllcorner",
    "cellsize",
    "NODATA_value",
)


class GridFormatError(DataError):
    """Raised for malformed grid files or inconsistent grid values."""

    pass


class WindowOutOfGridError(DataError):
    """Raised when a window does not overlap the grid extent."""

    pass


class EmptyWindowError(DataError):
    """Raised when a window holds no valid pixels but statistics are required."""

    pass


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """
    A north-up grid in geographic degrees.

    ``values`` has shape (nrows, ncols); row 0 is the northernmost row.
    """

    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float
    values: npt.NDArray[np.float64]

    def __post_init__(self) -> None:
        if self.ncols <= 0 or self.nrows <= 0:
            raise GridFormatError(
                f"Grid dimensions must be positive, got {self.ncols}x{self.nrows}"
            )
        if not self.cellsize > 0:
            raise GridFormatError(f"Cell size must be positive, got {self.cellsize}")
        if self.values.shape != (self.nrows, self.ncols):
            raise GridFormatError(
                f"Value array shape {self.values.shape} does not match "
                f"{self.nrows}x{self.ncols}"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (
            (self.ncols, self.nrows, self.xll, self.yll, self.cellsize)
            == (other.ncols, other.nrows, other.xll, other.yll, other.cellsize)
            and _same_float(self.nodata, other.nodata)
            and bool(np.array_equal(self.values, other.values, equal_nan=True))
        )

    @property
    def extent(self) -> BBox:
        return BBox(
            south=self.yll,
            west=self.xll,
            north=self.yll + self.nrows * self.cellsize,
            east=self.xll + self.ncols * self.cellsize,
        )

    def col_centers(self) -> npt.NDArray[np.float64]:
        return self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize

    def row_centers(self) -> npt.NDArray[np.float64]:
        return self.yll + (self.nrows - np.arange(self.nrows) - 0.5) * self.cellsize

    def valid_mask(self) -> npt.NDArray[np.bool_]:
        return np.isfinite(self.values) & (self.values != self.nodata)

    def has_data(self) -> bool:
        return bool(self.valid_mask().any())


def _same_float(a: float, b: float) -> bool:
    return a == b or (math.isnan(a) and math.isnan(b))


def read_grid(path: Path) -> RasterGrid:
    """Read an ESRI-ASCII-style grid file."""
    tokens = Path(path).read_text(encoding="utf-8").split()
    if len(tokens) < 2 * len(HEADER_KEYS):
        raise GridFormatError(f"{path}: truncated header")

    header: dict[str, str] = {}
    for i, expected in enumerate(HEADER_KEYS):
        key, value = tokens[2 * i], tokens[2 * i + 1]
        if key.lower() != expected.lower():
            raise GridFormatError(
                f"{path}: expected header key '{expected}', found '{key}'"
            )
        header[expected] = value

    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        xll = float(header["xllcorner"])
        yll = float(header["yllcorner"])
        cellsize = float(header["cellsize"])
        nodata = float(header["NODATA_value"])
    except ValueError as e:
        raise GridFormatError(f"{path}: malformed header value ({e})") from e

    body = tokens[2 * len(HEADER_KEYS) :]
    if len(body) != ncols * nrows:
        raise GridFormatError(
            f"{path}: header declares {ncols}x{nrows}={ncols * nrows} values, "
            f"found {len(body)}"
        )
    try:
        values = np.array([float(v) for v in body], dtype=np.float64)
    except ValueError as e:
        raise GridFormatError(f"{path}: non-numeric cell value ({e})") from e

    grid = RasterGrid(
        ncols=ncols,
        nrows=nrows,
        xll=xll,
        yll=yll,
        cellsize=cellsize,
        nodata=nodata,
        values=values.reshape(nrows, ncols),
    )
    logger.info(f"Read {ncols}x{nrows} grid from {path}")
    return grid


def write_grid(grid: RasterGrid, path: Path) -> None:
    """Write a grid using shortest round-trip decimal formatting."""
    lines = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {grid.xll!r}",
        f"yllcorner {grid.yll!r}",
        f"cellsize {grid.cellsize!r}",
        f"NODATA_value {float(grid.nodata)!r}",
    ]
    for row in grid.values:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class LuminosityStats:
    """Six summary statistics of the pixel values in one window."""

    max: float
    mean: float
    median: float
    zero_ratio: float
    upper_third_mean: float
    lower_third_mean: float

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (
            self.max,
            self.mean,
            self.median,
            self.zero_ratio,
            self.upper_third_mean,
            self.lower_third_mean,
        )


LUMINOSITY_STAT_NAMES: tuple[str, ...] = (
    "max",
    "mean",
    "median",
    "zero_ratio",
    "upper_third_mean",
    "lower_third_mean",
)


@dataclass(frozen=True)
class WindowSum:
    """Sum of valid pixels in a window; ``empty`` when none were valid."""

    total: float
    pixel_count: int

    @property
    def empty(self) -> bool:
        return self.pixel_count == 0


def box_block(
    grid: RasterGrid, box: BBox
) -> tuple[slice, slice]:
    """
    Row/column slices of the pixels whose centers fall inside ``box``.

    Raises WindowOutOfGridError when the box does not touch the grid extent.
    """
    if not grid.extent.intersects(box):
        raise WindowOutOfGridError(f"Window {box} does not overlap grid {grid.extent}")
    cols = np.flatnonzero((grid.col_centers() >= box.west) & (grid.col_centers() <= box.east))
    rows = np.flatnonzero(
        (grid.row_centers() >= box.south) & (grid.row_centers() <= box.north)
    )
    if cols.size == 0 or rows.size == 0:
        return slice(0, 0), slice(0, 0)
    return slice(int(rows[0]), int(rows[-1]) + 1), slice(int(cols[0]), int(cols[-1]) + 1)


def box_values(grid: RasterGrid, box: BBox) -> npt.NDArray[np.float64]:
    """Valid (non-nodata, finite) pixel values inside ``box``, in row-major order."""
    rows, cols = box_block(grid, box)
    block = grid.values[rows, cols]
    valid = np.isfinite(block) & (block != grid.nodata)
    return block[valid]


def summarize(values: npt.NDArray[np.float64]) -> LuminosityStats:
    """Compute the six window statistics over a non-empty value set."""
    n = int(values.size)
    if n == 0:
        raise EmptyWindowError("No valid pixels in window")
    ordered = np.sort(values, kind="stable")
    k = math.ceil(n / 3)
    return LuminosityStats(
        max=float(ordered[-1]),
        mean=math.fsum(ordered.tolist()) / n,
        median=float(ordered[(n - 1) // 2]),
        zero_ratio=int(np.count_nonzero(ordered == 0.0)) / n,
        upper_third_mean=math.fsum(ordered[n - k :].tolist()) / k,
        lower_third_mean=math.fsum(ordered[:k].tolist()) / k,
    )


def window_stats(grid: RasterGrid, center: GeoPoint, w: WindowSpec) -> LuminosityStats:
    """Luminosity statistics of the pixels centered inside the window around ``center``."""
    values = box_values(grid, cell_window(center, w))
    if values.size == 0:
        raise EmptyWindowError(
            f"No valid pixels in {w.side_km} km window at ({center.lat}, {center.lon})"
        )
    return summarize(values)


def window_sum(grid: RasterGrid, center: GeoPoint, w: WindowSpec) -> WindowSum:
    """Sum of valid pixels centered inside the window around ``center``."""
    values = box_values(grid, cell_window(center, w))
    return WindowSum(total=math.fsum(values.tolist()), pixel_count=int(values.size))


def max_pixel(
    grid: RasterGrid, mask: npt.NDArray[np.bool_]
) -> Optional[tuple[GeoPoint, float]]:
    """
    Center and value of the largest valid pixel selected by ``mask``.

    Ties resolve to the first pixel in row-major order. Returns None when the
    mask selects no valid pixel.
    """
    candidates = mask & grid.valid_mask()
    if not candidates.any():
        return None
    masked = np.where(candidates, grid.values, -np.inf)
    flat = int(np.argmax(masked))
    row, col = divmod(flat, grid.ncols)
    point = GeoPoint(float(grid.row_centers()[row]), float(grid.col_centers()[col]))
    return point, float(grid.values[row, col])
