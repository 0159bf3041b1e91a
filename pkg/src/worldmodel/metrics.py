"""Association accuracy metrics against ground truth."""

from __future__ import annotations

from collections import Counter
from itertools import combinations

__all__ = ["pairwise_scores", "per_epoch_count_error"]


def _pairs_same_label(labels_by_ref: dict) -> set:
    by_label: dict = {}
    for ref, label in labels_by_ref.items():
        if label is not None:
            by_label.setdefault(label, []).append(ref)
    pairs = set()
    for refs in by_label.values():
        refs.sort()
        pairs.update(combinations(refs, 2))
    return pairs


def pairwise_scores(pred_labels: dict, true_labels: dict, epochs: bool = True) -> dict:
    """Precision/recall/F1 over co-assignment pairs of observations.

    Both arguments map observation refs (epoch, view, index) to a label or
    None for clutter.  A pair counts as positive when both members share a
    non-clutter label.  Returns pooled scores plus per-epoch scores over
    same-epoch pairs when ``epochs`` is set.
    """
    pred_pairs = _pairs_same_label(pred_labels)
    true_pairs = _pairs_same_label(true_labels)
    out = {"pooled": _prf(pred_pairs, true_pairs)}
    if epochs:
        per_epoch = {}
        all_epochs = sorted({ref[0] for ref in true_labels} | {ref[0] for ref in pred_labels})
        for t in all_epochs:
            pp = {p for p in pred_pairs if p[0][0] == t and p[1][0] == t}
            tp = {p for p in true_pairs if p[0][0] == t and p[1][0] == t}
            per_epoch[t] = _prf(pp, tp)
        out["per_epoch"] = per_epoch
    return out


def _prf(pred_pairs: set, true_pairs: set) -> dict:
    tp = len(pred_pairs & true_pairs)
    precision = tp / len(pred_pairs) if pred_pairs else 1.0
    recall = tp / len(true_pairs) if true_pairs else 1.0
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) else 0.0
    return {"precision": precision, "recall": recall, "f1": f1,
            "pred_pairs": len(pred_pairs), "true_pairs": len(true_pairs)}


def per_epoch_count_error(pred_labels: dict, true_labels: dict) -> dict:
    """|number of predicted clusters - number of true objects| per epoch,
    counting only clusters/objects with at least one observation there."""
    pred_counts = Counter()
    true_counts = Counter()
    for ref, label in pred_labels.items():
        if label is not None:
            pred_counts[(ref[0], label)] = 1
    for ref, label in true_labels.items():
        if label is not None:
            true_counts[(ref[0], label)] = 1
    epochs = sorted({t for t, _ in pred_counts} | {t for t, _ in true_counts})
    errors = {}
    for t in epochs:
        np_t = sum(1 for (tt, _) in pred_counts if tt == t)
        nt_t = sum(1 for (tt, _) in true_counts if tt == t)
        errors[t] = abs(np_t - nt_t)
    mean = sum(errors.values()) / len(errors) if errors else 0.0
    return {"per_epoch": errors, "mean": mean}
