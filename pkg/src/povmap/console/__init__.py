"""
Console subpackage: rich rendering of refinement progress, reports and errors.
"""

from povmap.console.rendering import (
    console,
    render_audit,
    render_error,
    render_event,
    render_history,
    render_report,
)

__all__ = [
    "console",
    "render_audit",
    "render_error",
    "render_event",
    "render_history",
    "render_report",
]
