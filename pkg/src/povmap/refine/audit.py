"""
Leakage audit over a refinement state.

Checks that held-out rows never reach a training path:
- no cluster of a held-out country is in a cross-country model's training rows,
  and no k-fold model trained on its own test clusters;
- every place label the image classifier trained on comes from models that
  never trained on a cluster having that place as a candidate;
- hyperparameter searches read training rows only.
"""

import logging
from collections.abc import Mapping

from povmap.clusters import CandidateSet
from povmap.errors import LeakageError
from povmap.refine.state import AuditReport, RefineState, state_digest
from povmap.runtime_config import ProtocolChoice

logger = logging.getLogger(__name__)


def clusters_by_place(candidate_sets: Mapping[str, CandidateSet]) -> dict[str, set[str]]:
    """Clusters listing each place among their full candidate sets."""
    owners: dict[str, set[str]] = {}
    for cid, cset in candidate_sets.items():
        for pid in cset.candidates:
            owners.setdefault(pid, set()).add(cid)
    return owners


def _fold_violations(state: RefineState) -> list[str]:
    violations = []
    for run in state.runs:
        train = set(run.train_ids)
        if run.protocol is ProtocolChoice.cross:
            leaked = sorted(c for c in train if state.cluster_countries.get(c) == run.label)
            violations += [
                f"{run.key}: cluster {cid} of held-out country {run.label} in training rows"
                for cid in leaked
            ]
        else:
            violations += [
                f"{run.key}: test cluster {cid} in training rows"
                for cid in sorted(train & set(run.test_ids))
            ]
        violations += [
            f"{run.key}: hyperparameter search read non-training cluster {cid}"
            for cid in sorted(set(run.search_ids) - train)
        ]
    return violations


def _label_violations(state: RefineState) -> list[str]:
    owners = clusters_by_place(state.candidate_sets)
    violations = []
    for pid in sorted(state.cnn_labels):
        sources = state.label_sources.get(pid, ())
        if not sources:
            violations.append(f"label for {pid} has no recorded source model")
        for key in sources:
            if key not in state.label_runs:
                violations.append(f"label for {pid} from unknown model {key}")
                continue
            seen = sorted(set(state.label_runs[key]) & owners.get(pid, set()))
            violations += [
                f"label for {pid} from {key}, which trained on cluster {cid}" for cid in seen
            ]
    return violations


def leakage_audit(state: RefineState, raise_on_violation: bool = False) -> AuditReport:
    """Audit the last completed iteration. Never modifies ``state``."""
    violations = _fold_violations(state) + _label_violations(state)
    report = AuditReport(
        iteration=state.iteration,
        violations=tuple(violations),
        checked_runs=len(state.runs),
        checked_labels=len(state.cnn_labels),
        state_sha256=state_digest(state),
    )
    if violations:
        logger.error(
            f"Leakage audit found {len(violations)} violation(s) "
            f"at iteration {state.iteration}"
        )
        if raise_on_violation:
            raise LeakageError(report)
    else:
        logger.info(
            f"Leakage audit clean: {report.checked_runs} models, "
            f"{report.checked_labels} labels"
        )
    return report
