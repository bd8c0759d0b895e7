"""
Exception hierarchy shared by the pipeline modules.

The CLI maps these onto its exit codes: UsageError -> 1, DataError -> 2,
LeakageError -> 3.
"""

from typing import Any


class PovmapError(Exception):
    """Base exception for povmap failures."""

    pass


class UsageError(PovmapError):
    """Raised for invalid flags or manifests."""

    pass


class DataError(PovmapError):
    """Raised when input data cannot be processed."""

    pass


class LeakageError(PovmapError):
    """Raised when the leakage audit finds held-out data in a training path."""

    def __init__(self, report: Any) -> None:
        self.report = report
        violations = getattr(report, "violations", ())
        super().__init__(f"Leakage audit failed: {'; '.join(violations)}")
