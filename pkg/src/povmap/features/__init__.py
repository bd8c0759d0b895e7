from povmap.features.extract import (
    BASE_COLUMNS,
    DISTANCE_CAP_M,
    FEATURE_COLUMNS,
    IMAGE_COLUMNS,
    FeatureExtractor,
    FeatureTable,
    FeatureVector,
    build_feature_vector,
    poi_stats,
    road_stats,
)
from povmap.features.junctions import detect_junctions
from povmap.features.layers import (
    POI_CATEGORIES,
    Building,
    LayerSet,
    Poi,
    Surface,
    Way,
    ingest_layers,
)
from povmap.features.spatial_index import PointIndex, SegmentIndex

__all__ = [
    "BASE_COLUMNS",
    "DISTANCE_CAP_M",
    "FEATURE_COLUMNS",
    "IMAGE_COLUMNS",
    "POI_CATEGORIES",
    "Building",
    "FeatureExtractor",
    "FeatureTable",
    "FeatureVector",
    "LayerSet",
    "PointIndex",
    "Poi",
    "SegmentIndex",
    "Surface",
    "Way",
    "build_feature_vector",
    "detect_junctions",
    "ingest_layers",
    "poi_stats",
    "road_stats",
]
