"""
Progress events emitted by the refinement controller.

The controller reports through a callback so the console layer can render
progress without the controller knowing about terminals.
"""

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Optional, Union


@dataclass
class IterationStarted:
    iteration: int
    active_columns: int
    training_clusters: int


@dataclass
class ProtocolScored:
    iteration: int
    protocol: str
    mean: Optional[float]
    units: Mapping[str, float] = field(default_factory=dict)


@dataclass
class EstimatorChosen:
    iteration: int
    country: str
    estimator: str
    single: Optional[float]
    cross: Optional[float]


@dataclass
class ClassifierTrained:
    iteration: int
    tiles: int
    warm_started: bool
    final_loss: Optional[float]


@dataclass
class NarrowingApplied:
    iteration: int
    narrowed: int
    skipped: int


@dataclass
class IterationFinished:
    iteration: int
    headline: Optional[float]
    violations: int


@dataclass
class RefineStopped:
    iteration: int
    reason: str


RefineEvent = Union[
    IterationStarted,
    ProtocolScored,
    EstimatorChosen,
    ClassifierTrained,
    NarrowingApplied,
    IterationFinished,
    RefineStopped,
]

EventSink = Callable[[RefineEvent], None]


def ignore_event(event: RefineEvent) -> None:
    pass
