"""
Place-level wealth map export: CSV, GeoJSON points and an SVG scatter map.
"""

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import geojson
import pandas as pd
from jinja2 import Environment, FileSystemLoader

from povmap.errors import DataError
from povmap.iwi import IWI_MAX, IWI_MIN
from povmap.places import PopulatedPlace

logger = logging.getLogger(__name__)

EXPORT_COLUMNS: tuple[str, ...] = (
    "place_id",
    "name",
    "lat",
    "lon",
    "admin1",
    "admin2",
    "pop_1p6",
    "iwi_pred",
)
EXPORT_STEM = "places_iwi"
SVG_WIDTH = 800
SVG_PADDING = 20
MARKER_RADIUS = 3.0

# red (poor) at 0, yellow at the median 50, blue (rich) at 100
_COLOR_STOPS: tuple[tuple[float, tuple[int, int, int]], ...] = (
    (0.0, (255, 0, 0)),
    (50.0, (255, 255, 0)),
    (100.0, (0, 0, 255)),
)

TEMPLATE_ENV = Environment(
    loader=FileSystemLoader(Path(__file__).parent / "templates"),
    autoescape=True,
    keep_trailing_newline=True,
)


class ExportError(DataError):
    def __init__(self, missing: Sequence[str]) -> None:
        self.missing = list(missing)
        shown = ", ".join(self.missing[:10])
        more = f" and {len(self.missing) - 10} more" if len(self.missing) > 10 else ""
        super().__init__(
            f"{len(self.missing)} place(s) have no prediction: {shown}{more}; "
            "pass --allow-partial to export the rest"
        )


class ExportFormat(str, Enum):
    csv = "csv"
    geojson = "geojson"
    svg = "svg"


@dataclass(frozen=True)
class ExportRow:
    place: PopulatedPlace
    iwi: float

    def properties(self) -> dict[str, Any]:
        p = self.place
        return {
            "place_id": p.place_id,
            "name": p.name or "",
            "lat": p.location.lat,
            "lon": p.location.lon,
            "admin1": p.admin1 or "",
            "admin2": p.admin2 or "",
            "pop_1p6": p.pop_1p6,
            "iwi_pred": self.iwi,
        }


def iwi_color(value: float) -> str:
    """Hex color on the red-yellow-blue ramp; values outside [0, 100] are clamped."""
    v = min(IWI_MAX, max(IWI_MIN, value))
    for (lo, c0), (hi, c1) in zip(_COLOR_STOPS, _COLOR_STOPS[1:]):
        if v <= hi:
            t = (v - lo) / (hi - lo)
            rgb = (round(a + (b - a) * t) for a, b in zip(c0, c1))
            return "#" + "".join(f"{c:02x}" for c in rgb)
    return "#0000ff"


def export_rows(
    predictions: Mapping[str, float],
    registry: Iterable[PopulatedPlace],
    allow_partial: bool = False,
) -> list[ExportRow]:
    """
    Join predictions onto the registry, clamped to the IWI range. Uncovered
    places abort unless ``allow_partial``.
    """
    rows = []
    missing = []
    for place in sorted(registry, key=lambda p: p.place_id):
        value = predictions.get(place.place_id)
        if value is None or not math.isfinite(value):
            missing.append(place.place_id)
            continue
        rows.append(ExportRow(place=place, iwi=min(IWI_MAX, max(IWI_MIN, float(value)))))
    if missing:
        if not allow_partial:
            raise ExportError(missing)
        logger.warning(f"Exporting without {len(missing)} uncovered place(s)")
    return rows


def write_csv(rows: Sequence[ExportRow], path: Path) -> Path:
    frame = pd.DataFrame([r.properties() for r in rows], columns=list(EXPORT_COLUMNS))
    frame.to_csv(path, index=False)
    return path


def write_geojson(rows: Sequence[ExportRow], path: Path) -> Path:
    features = [
        geojson.Feature(
            id=r.place.place_id,
            geometry=geojson.Point((r.place.location.lon, r.place.location.lat)),
            properties=r.properties(),
        )
        for r in rows
    ]
    collection = geojson.FeatureCollection(features)
    if not collection.is_valid:
        raise DataError(f"Invalid GeoJSON output: {collection.errors()}")
    path.write_text(geojson.dumps(collection, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_svg(rows: Sequence[ExportRow], path: Path, title: Optional[str] = None) -> Path:
    """Equirectangular scatter of the places, one colored circle each."""
    lats = [r.place.location.lat for r in rows]
    lons = [r.place.location.lon for r in rows]
    south, north = (min(lats), max(lats)) if rows else (0.0, 1.0)
    west, east = (min(lons), max(lons)) if rows else (0.0, 1.0)
    span_x = max(east - west, 1e-9)
    span_y = max(north - south, 1e-9)
    inner = SVG_WIDTH - 2 * SVG_PADDING
    scale = inner / max(span_x, span_y)
    height = int(math.ceil(span_y * scale)) + 2 * SVG_PADDING
    width = int(math.ceil(span_x * scale)) + 2 * SVG_PADDING
    markers = [
        {
            "place_id": r.place.place_id,
            "x": round(SVG_PADDING + (r.place.location.lon - west) * scale, 2),
            "y": round(SVG_PADDING + (north - r.place.location.lat) * scale, 2),
            "fill": iwi_color(r.iwi),
            "iwi": round(r.iwi, 2),
            "name": r.place.name or r.place.place_id,
        }
        for r in rows
    ]
    template = TEMPLATE_ENV.get_template("map.svg.jinja2")
    text = template.render(
        width=width,
        height=height,
        radius=MARKER_RADIUS,
        markers=markers,
        title=title or "Estimated wealth index by place",
    )
    path.write_text(text, encoding="utf-8")
    return path


def export_maps(
    predictions: Mapping[str, float],
    registry: Iterable[PopulatedPlace],
    out_dir: Path,
    formats: Sequence[ExportFormat] = (ExportFormat.csv, ExportFormat.geojson),
    allow_partial: bool = False,
) -> list[Path]:
    """Write ``places_iwi.<ext>`` for each requested format; returns the paths written."""
    rows = export_rows(predictions, registry, allow_partial)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        path = out / f"{EXPORT_STEM}.{fmt.value}"
        match fmt:
            case ExportFormat.csv:
                written.append(write_csv(rows, path))
            case ExportFormat.geojson:
                written.append(write_geojson(rows, path))
            case ExportFormat.svg:
                written.append(write_svg(rows, path))
    logger.info(f"Exported {len(rows)} places to {out} ({', '.join(f.value for f in formats)})")
    return written
