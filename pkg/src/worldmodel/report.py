"""Run reports: scores, traces, and accuracy versus ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .association import FP, WorldState
from .metrics import pairwise_scores, per_epoch_count_error
from .simulator import GroundTruth

__all__ = ["RunReport", "labels_from_state", "labels_from_truth", "accuracy_block"]


@dataclass
class RunReport:
    """Outcome of one inference invocation.

    The wall time is reported on the console only; serialized reports stay
    byte-identical across reruns with the same seed.
    """

    algorithm: str
    seed: int
    map_score: float
    final_score: float
    score_trace: list
    track_count_per_epoch: dict
    iterations: int
    wall_time_s: float | None = None
    accuracy: dict | None = None

    def to_json_dict(self) -> dict:
        doc = {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "map_score": self.map_score,
            "final_score": self.final_score,
            "iterations": self.iterations,
            "score_trace": [float(x) for x in self.score_trace],
            "track_count_per_epoch": {str(t): int(c)
                                      for t, c in sorted(self.track_count_per_epoch.items())},
        }
        if self.accuracy is not None:
            doc["accuracy"] = self.accuracy
        return doc

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def labels_from_state(state: WorldState) -> dict:
    """Observation ref -> track id (None for clutter)."""
    out = {}
    for (t, v), lam in state.assignments.items():
        if lam is None:
            continue
        for i, a in enumerate(lam):
            out[(t, v, i)] = None if a == FP else a
    return out


def labels_from_assignment_map(amap: dict) -> dict:
    out = {}
    for (t, v), lam in amap.items():
        entries = lam.assignments if hasattr(lam, "assignments") else lam
        for i, a in enumerate(entries):
            out[(t, v, i)] = None if a == FP else a
    return out


def labels_from_truth(truth: GroundTruth) -> dict:
    out = {}
    for (t, v), sources in truth.sources.items():
        for i, src in enumerate(sources):
            out[(t, v, i)] = None if src == 0 else src
    return out


def accuracy_block(pred_labels: dict, truth: GroundTruth) -> dict:
    true_labels = labels_from_truth(truth)
    scores = pairwise_scores(pred_labels, true_labels)
    counts = per_epoch_count_error(pred_labels, true_labels)
    return {
        "pairwise": {
            "pooled": scores["pooled"],
            "per_epoch": {str(t): s for t, s in scores["per_epoch"].items()},
        },
        "count_error": {
            "per_epoch": {str(t): e for t, e in counts["per_epoch"].items()},
            "mean": counts["mean"],
        },
    }


def track_count_per_epoch(state: WorldState) -> dict:
    counts = {t: 0 for t in range(1, state.dataset.num_epochs + 1)}
    for tr in state.tracks.values():
        for t in tr.instantiated_epochs:
            counts[t] += 1
    return counts
