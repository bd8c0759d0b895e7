"""
Refinement state, per-iteration metrics and checkpoint files.
"""

import hashlib
import json
import logging
import math
import shutil
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import pandas as pd

from povmap.clusters import CandidateSet, SurveyCluster
from povmap.models.gbt import GbtModel
from povmap.models.imgcls import ClassThresholds, CnnModel
from povmap.runtime_config import ProtocolChoice
from povmap.validate import ValidationReport, write_report

logger = logging.getLogger(__name__)

STATE_FORMAT_VERSION = 1


class Estimator(str, Enum):
    single = "single"
    cross = "cross"


@dataclass(frozen=True)
class FoldRun:
    """
    One fitted feature model.

    ``train_ids`` is the training partition the model could have drawn from (its
    bootstrap sample is a subset); ``search_ids`` are the rows read by a
    hyperparameter search, if one ran.
    """

    protocol: ProtocolChoice
    label: str
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    model: GbtModel
    search_ids: tuple[str, ...] = ()

    @property
    def key(self) -> str:
        return f"{self.protocol.value}/{self.label}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "search_ids": list(self.search_ids),
            "model_sha256": hashlib.sha256(self.model.dumps().encode("utf-8")).hexdigest(),
        }


@dataclass(frozen=True)
class IterationMetrics:
    iteration: int
    single: Mapping[str, float]
    cross: Mapping[str, float]
    pooled: Optional[float]
    choices: Mapping[str, Estimator]
    active_columns: int
    training_clusters: int
    pooled_ran: bool = True

    @staticmethod
    def _mean(values: Mapping[str, float]) -> Optional[float]:
        return math.fsum(values.values()) / len(values) if values else None

    @property
    def single_mean(self) -> Optional[float]:
        return self._mean(self.single)

    @property
    def cross_mean(self) -> Optional[float]:
        return self._mean(self.cross)

    @property
    def headline(self) -> Optional[float]:
        """Pooled R-squared when the pooled protocol scored, else the cross-country mean."""
        if self.pooled_ran and self.pooled is not None:
            return self.pooled
        if self.cross_mean is not None:
            return self.cross_mean
        return self.single_mean

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "single": dict(sorted(self.single.items())),
            "cross": dict(sorted(self.cross.items())),
            "single_mean": self.single_mean,
            "cross_mean": self.cross_mean,
            "pooled": self.pooled,
            "pooled_ran": self.pooled_ran,
            "headline": self.headline,
            "choices": {c: e.value for c, e in sorted(self.choices.items())},
            "active_columns": self.active_columns,
            "training_clusters": self.training_clusters,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "IterationMetrics":
        return cls(
            iteration=int(data["iteration"]),
            single={str(k): float(v) for k, v in data["single"].items()},
            cross={str(k): float(v) for k, v in data["cross"].items()},
            pooled=None if data.get("pooled") is None else float(data["pooled"]),
            choices={str(k): Estimator(v) for k, v in data["choices"].items()},
            active_columns=int(data["active_columns"]),
            training_clusters=int(data["training_clusters"]),
            pooled_ran=bool(data.get("pooled_ran", True)),
        )


@dataclass(frozen=True)
class AuditReport:
    iteration: int
    violations: tuple[str, ...]
    checked_runs: int
    checked_labels: int
    state_sha256: str

    @property
    def clean(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "violations": list(self.violations),
            "checked_runs": self.checked_runs,
            "checked_labels": self.checked_labels,
            "state_sha256": self.state_sha256,
        }


@dataclass(frozen=True, eq=False)
class RefineState:
    """
    Everything one refinement iteration leaves behind for the next.

    ``runs`` and ``reports`` belong to the last completed iteration, whose
    k-fold protocols used ``k`` folds.
    ``place_predictions`` come from the estimator chosen per country and
    ``prediction_sources`` names the runs that produced each of them. The
    image classifier's training labels of this iteration are ``cnn_labels``;
    ``label_sources`` and ``label_runs`` trace them back to the models of the
    previous iteration. ``history`` and ``audits`` only ever grow.
    """

    seed: int
    k: Optional[int] = None
    iteration: int = -1
    cluster_countries: Mapping[str, str] = field(default_factory=dict)
    candidate_sets: Mapping[str, CandidateSet] = field(default_factory=dict)
    runs: tuple[FoldRun, ...] = ()
    reports: Mapping[str, ValidationReport] = field(default_factory=dict)
    place_predictions: Mapping[str, float] = field(default_factory=dict)
    prediction_sources: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    place_estimators: Mapping[str, Estimator] = field(default_factory=dict)
    cnn: Optional[CnnModel] = None
    cnn_labels: Mapping[str, int] = field(default_factory=dict)
    label_sources: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    label_runs: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    thresholds: Optional[ClassThresholds] = None
    image_probs: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    history: tuple[IterationMetrics, ...] = ()
    audits: tuple[AuditReport, ...] = ()
    stopped: Optional[str] = None

    def run(self, key: str) -> FoldRun:
        for r in self.runs:
            if r.key == key:
                return r
        raise KeyError(key)

    def to_dict(self) -> dict[str, Any]:
        cnn_sha = (
            hashlib.sha256(
                json.dumps(self.cnn.to_dict(), sort_keys=True).encode("utf-8")
            ).hexdigest()
            if self.cnn is not None
            else None
        )
        return {
            "version": STATE_FORMAT_VERSION,
            "seed": self.seed,
            "k": self.k,
            "iteration": self.iteration,
            "stopped": self.stopped,
            "candidate_sets": {
                cid: {
                    "candidates": list(s.candidates),
                    "narrowed": list(s.narrowed) if s.narrowed is not None else None,
                    "provenance": s.provenance.value,
                    "group": s.group.value if s.group is not None else None,
                    "narrowing_skipped": s.narrowing_skipped,
                }
                for cid, s in sorted(self.candidate_sets.items())
            },
            "runs": [r.to_dict() for r in self.runs],
            "reports": {p: r.to_dict() for p, r in sorted(self.reports.items())},
            "place_predictions": dict(sorted(self.place_predictions.items())),
            "prediction_sources": {
                p: list(s) for p, s in sorted(self.prediction_sources.items())
            },
            "cnn_sha256": cnn_sha,
            "thresholds": list(self.thresholds.cuts) if self.thresholds else None,
            "cnn_labels": dict(sorted(self.cnn_labels.items())),
            "label_sources": {p: list(s) for p, s in sorted(self.label_sources.items())},
            "label_runs": {k: list(v) for k, v in sorted(self.label_runs.items())},
            "history": [m.to_dict() for m in self.history],
            "audits": [a.to_dict() for a in self.audits],
        }


def state_digest(state: RefineState) -> str:
    text = json.dumps(state.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def iteration_dir(root: Path, iteration: int) -> Path:
    return Path(root) / f"iter_{iteration}"


def _model_file(key: str) -> str:
    return key.replace("/", "__") + ".json"


def save_checkpoint(
    state: RefineState,
    clusters: Sequence[SurveyCluster],
    place_countries: Mapping[str, str],
    root: Path,
) -> Path:
    """
    Write ``iter_<k>/`` with the fold models, the image classifier, place and
    cluster predictions, validation reports and ``state.json``.
    """
    out = iteration_dir(root, state.iteration)
    (out / "gbt").mkdir(parents=True, exist_ok=True)
    for run in state.runs:
        run.model.save(out / "gbt" / _model_file(run.key))
    if state.cnn is not None:
        state.cnn.save(out / "cnn.json")

    places = sorted(state.place_predictions)
    pd.DataFrame(
        {
            "place_id": places,
            "country": [place_countries.get(p, "") for p in places],
            "estimator": [state.place_estimators[p].value for p in places],
            "iwi_pred": [state.place_predictions[p] for p in places],
        },
        columns=["place_id", "country", "estimator", "iwi_pred"],
    ).to_csv(out / "place_predictions.csv", index=False)

    rows: list[dict[str, Any]] = []
    for cluster in sorted(clusters, key=lambda c: c.cluster_id):
        if cluster.cluster_id not in state.candidate_sets:
            continue
        row: dict[str, Any] = {
            "cluster_id": cluster.cluster_id,
            "country": cluster.country,
            "iwi": cluster.iwi,
        }
        for protocol in ProtocolChoice:
            report = state.reports.get(protocol.value)
            row[protocol.value] = report.predictions.get(cluster.cluster_id) if report else None
            row[f"{protocol.value}_fold"] = (
                report.folds.get(cluster.cluster_id) if report else None
            )
        rows.append(row)
    columns = ["cluster_id", "country", "iwi"] + [
        c for p in ProtocolChoice for c in (p.value, f"{p.value}_fold")
    ]
    pd.DataFrame(rows, columns=columns).to_csv(out / "cluster_oof.csv", index=False)

    for protocol, report in state.reports.items():
        write_report(report, out / "reports", protocol)
    (out / "state.json").write_text(
        json.dumps(state.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(f"Checkpoint written to {out}")
    return out


def append_audit_log(report: AuditReport, path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("a", encoding="utf-8") as handle:
        handle.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")


def clear_checkpoints(root: Path) -> int:
    """Remove ``iter_<k>/`` folders left by an earlier run; returns how many."""
    stale = [p for p in Path(root).glob("iter_*") if p.is_dir()]
    for path in stale:
        shutil.rmtree(path)
    if stale:
        logger.info(f"Removed {len(stale)} stale checkpoint(s) under {root}")
    return len(stale)


def latest_iteration(root: Path) -> Optional[int]:
    """Highest ``iter_<k>`` holding a state file, or None."""
    found = []
    for path in Path(root).glob("iter_*/state.json"):
        suffix = path.parent.name.removeprefix("iter_")
        if suffix.isdigit():
            found.append(int(suffix))
    return max(found) if found else None


def read_history(root: Path) -> list[IterationMetrics]:
    """Metric history stored in the latest checkpoint."""
    latest = latest_iteration(root)
    if latest is None:
        return []
    data = json.loads((iteration_dir(root, latest) / "state.json").read_text(encoding="utf-8"))
    return [IterationMetrics.from_dict(m) for m in data["history"]]


def checkpoint_settings(root: Path) -> dict[str, Optional[int]]:
    """Seed and fold count behind the latest checkpoint's reports."""
    latest = latest_iteration(root)
    if latest is None:
        return {}
    data = json.loads((iteration_dir(root, latest) / "state.json").read_text(encoding="utf-8"))
    return {"seed": data.get("seed"), "k": data.get("k")}
