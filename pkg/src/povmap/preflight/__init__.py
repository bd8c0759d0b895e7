"""
Preflight checks for the povmap CLI.
"""

from povmap.preflight.preflight import (
    PreflightCheckError,
    PreflightError,
    Stage,
    input_digests,
    run_preflight_checks,
    stage_inputs,
)

__all__ = [
    "run_preflight_checks",
    "input_digests",
    "stage_inputs",
    "Stage",
    "PreflightError",
    "PreflightCheckError",
]
