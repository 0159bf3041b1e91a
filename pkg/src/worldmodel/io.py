"""On-disk formats: dataset JSONL, assignments JSONL, track/report/config JSON.

The dataset format is line-oriented (one view per line) so files stream and
diff cleanly:

    {"epoch": 1, "view": 1, "region": {"min": [..], "max": [..]},
     "detections": [{"type": 2, "pose": [..]}, ...]}

Floats serialize with Python's shortest round-trip repr.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import Dataset, ModelConfig, Observation, Region, ViewFrame
from .simulator import GroundTruth, ObjectTruth

__all__ = [
    "write_dataset_jsonl", "read_dataset_jsonl",
    "write_assignments_jsonl", "read_assignments_jsonl",
    "write_truth_json", "read_truth_json",
    "tracks_report", "write_tracks_json", "read_tracks_json",
    "load_model_config", "save_model_config",
    "DataInconsistencyError",
]


class DataInconsistencyError(ValueError):
    """Files disagree with each other or with the model configuration."""


def _floats(x) -> list:
    return [float(v) for v in np.asarray(x).ravel()]


def write_dataset_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vf in dataset.views():
            rec = {
                "epoch": vf.epoch,
                "view": vf.view_index,
                "region": {"min": _floats(vf.region.min), "max": _floats(vf.region.max)},
                "detections": [
                    {"type": obs.type_obs, "pose": _floats(obs.pose_obs)}
                    for obs in vf.observations
                ],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_dataset_jsonl(path, num_types: int | None = None) -> Dataset:
    by_epoch: dict[int, list] = {}
    max_type = 1
    pose_dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            region = Region(min=np.array(rec["region"]["min"], dtype=float),
                            max=np.array(rec["region"]["max"], dtype=float))
            obs = []
            for det in rec["detections"]:
                o = Observation(type_obs=int(det["type"]),
                                pose_obs=np.array(det["pose"], dtype=float))
                max_type = max(max_type, o.type_obs)
                pose_dim = len(det["pose"]) if pose_dim is None else pose_dim
                obs.append(o)
            if pose_dim is None:
                pose_dim = len(rec["region"]["min"])
            vf = ViewFrame(epoch=int(rec["epoch"]), view_index=int(rec["view"]),
                           region=region, observations=tuple(obs))
            by_epoch.setdefault(vf.epoch, []).append(vf)
    if not by_epoch:
        raise DataInconsistencyError("dataset file holds no views")
    T = max(by_epoch)
    if sorted(by_epoch) != list(range(1, T + 1)):
        raise DataInconsistencyError("epochs are not contiguous from 1")
    epochs = tuple(tuple(by_epoch[t]) for t in range(1, T + 1))
    return Dataset(epochs=epochs, num_types=num_types or max_type, pose_dim=pose_dim)


def write_assignments_jsonl(assignments: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (t, v) in sorted(assignments):
            lam = assignments[(t, v)]
            entries = list(lam.assignments) if hasattr(lam, "assignments") else list(lam)
            fh.write(json.dumps({"epoch": t, "view": v, "lambda": entries},
                                separators=(",", ":")) + "\n")


def read_assignments_jsonl(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out[(int(rec["epoch"]), int(rec["view"]))] = [int(a) for a in rec["lambda"]]
    return out


def write_truth_json(truth: GroundTruth, path) -> None:
    doc = {
        "objects": [
            {
                "id": o.id, "type": o.attr, "birth": o.birth, "death": o.death,
                "poses": {str(t): _floats(p) for t, p in sorted(o.poses.items())},
            }
            for o in truth.objects
        ],
        "sources": [
            {"epoch": t, "view": v, "sources": list(src)}
            for (t, v), src in sorted(truth.sources.items())
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_truth_json(path) -> GroundTruth:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    objects = [
        ObjectTruth(
            id=int(o["id"]), attr=int(o["type"]), birth=int(o["birth"]),
            death=int(o["death"]),
            poses={int(t): np.array(p, dtype=float) for t, p in o["poses"].items()},
        )
        for o in doc["objects"]
    ]
    sources = {(int(r["epoch"]), int(r["view"])): tuple(r["sources"])
               for r in doc["sources"]}
    return GroundTruth(objects=objects, sources=sources)


def tracks_report(state) -> list:
    """Serializable per-track report: lifetime, type posterior, smoothed chain."""
    out = []
    for k in sorted(state.tracks):
        tr = state.tracks[k]
        beliefs = tr.smoothed()
        out.append({
            "id": k,
            "birth": tr.birth,
            "death": tr.death,
            "type_pmf": _floats(tr.psi().pmf),
            "epochs": [
                {
                    "epoch": b.epoch,
                    "count": b.obs_count,
                    "mean": _floats(b.smooth_mean),
                    "cov": _floats(b.smooth_cov),  # row-major
                }
                for b in beliefs
            ],
        })
    return out


def write_tracks_json(state, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"tracks": tracks_report(state)}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_tracks_json(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)["tracks"]


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------

def load_model_config(path) -> ModelConfig:
    """Read a model configuration document.

    Schema: {"alpha": f, "type_prior": [f..], "confusion": [[f..]..],
    "sense_cov": [[f..]..], "trans_cov": [[f..]] | {"1": [[f..]], ...},
    "survival": f | {"1": f, ...}, "p_fn": f | {...}, "p_fp": f,
    "world_volume": f | null, "pose_dim": i}.  Scalar survival/p_fn/trans_cov
    broadcast over all types.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        trans = doc["trans_cov"]
        if isinstance(trans, dict):
            trans = {int(k): np.array(v, dtype=float) for k, v in trans.items()}
        else:
            trans = np.array(trans, dtype=float)
        for key in ("survival", "p_fn"):
            if isinstance(doc[key], dict):
                doc[key] = {int(k): float(v) for k, v in doc[key].items()}
        return ModelConfig(
            alpha=float(doc["alpha"]),
            type_prior=np.array(doc["type_prior"], dtype=float),
            confusion=np.array(doc["confusion"], dtype=float),
            sense_cov=np.array(doc["sense_cov"], dtype=float),
            trans_cov=trans,
            survival=doc["survival"],
            p_fn=doc["p_fn"],
            p_fp=float(doc["p_fp"]),
            world_volume=None if doc.get("world_volume") is None else float(doc["world_volume"]),
            pose_dim=int(doc["pose_dim"]),
        )
    except KeyError as exc:
        raise DataInconsistencyError(f"model config missing field {exc}") from exc


def save_model_config(cfg: ModelConfig, path) -> None:
    doc = {
        "alpha": cfg.alpha,
        "type_prior": _floats(cfg.type_prior),
        "confusion": [list(map(float, row)) for row in cfg.confusion],
        "sense_cov": [list(map(float, row)) for row in cfg.sense_cov],
        "trans_cov": {str(a): [list(map(float, row)) for row in q]
                      for a, q in cfg.trans_cov.items()},
        "survival": {str(a): v for a, v in cfg.survival.items()},
        "p_fn": {str(a): v for a, v in cfg.p_fn.items()},
        "p_fp": cfg.p_fp,
        "world_volume": cfg.world_volume,
        "pose_dim": cfg.pose_dim,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
