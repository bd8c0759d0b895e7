"""
Road junction detection.

A node is a junction when two or more distinct ways pass through it as an
interior node, or three or more distinct ways start or end there. Nodes are
identified by exact coordinate equality. A node that is interior to one way and
an endpoint of another (a plain T) satisfies neither clause and is not counted.
"""

import logging
from collections import defaultdict
from collections.abc import Iterable

from povmap.features.layers import Way
from povmap.geo import GeoPoint

logger = logging.getLogger(__name__)

MIN_CROSSING_WAYS = 2
MIN_STARTING_WAYS = 3


def detect_junctions(ways: Iterable[Way]) -> list[GeoPoint]:
    """Junction nodes, sorted by (lat, lon); independent of way order."""
    through: defaultdict[GeoPoint, set[str]] = defaultdict(set)
    ends: defaultdict[GeoPoint, set[str]] = defaultdict(set)
    for way in ways:
        for node in way.points[1:-1]:
            through[node].add(way.way_id)
        ends[way.points[0]].add(way.way_id)
        ends[way.points[-1]].add(way.way_id)

    nodes = {node for node, ids in through.items() if len(ids) >= MIN_CROSSING_WAYS}
    nodes.update(node for node, ids in ends.items() if len(ids) >= MIN_STARTING_WAYS)
    logger.debug(f"Detected {len(nodes)} junctions")
    return sorted(nodes)
