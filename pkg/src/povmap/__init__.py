"""povmap - village-level poverty mapping from geospatial features and imagery."""

from importlib.metadata import PackageNotFoundError
from importlib.metadata import version as _version

try:
    __version__ = _version("povmap")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.0.0"
