"""
Co-training refinement: controller, state, checkpoints and the leakage audit.
"""

from povmap.refine.audit import leakage_audit
from povmap.refine.controller import (
    RefineConfig,
    RefineData,
    RefineError,
    SelectionError,
    refine,
    regression_stop,
    run_iteration,
    select_estimator,
)
from povmap.refine.events import EventSink, RefineEvent
from povmap.refine.state import AuditReport, Estimator, IterationMetrics, RefineState

__all__ = [
    "AuditReport",
    "Estimator",
    "EventSink",
    "IterationMetrics",
    "RefineConfig",
    "RefineData",
    "RefineError",
    "RefineEvent",
    "RefineState",
    "SelectionError",
    "leakage_audit",
    "refine",
    "regression_stop",
    "run_iteration",
    "select_estimator",
]
