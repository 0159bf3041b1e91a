"""Trajectory figures: observations, track means, and covariance ellipses.

Figures render through matplotlib's SVG backend; every track's trajectory
polyline carries a ``track-<id>`` group id in the SVG so reports remain
machine-checkable.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "worldmodel"  # deterministic SVG ids

import matplotlib.pyplot as plt
from matplotlib.patches import Ellipse

__all__ = ["render_tracks_svg", "UnsupportedDimensionError", "type_color"]

_TYPE_CMAP = plt.get_cmap("tab10")


class UnsupportedDimensionError(ValueError):
    """Plotting supports 2-D poses only."""


def type_color(attr: int):
    return _TYPE_CMAP((attr - 1) % 10)


def _check_2d(vecs) -> None:
    for v in vecs:
        if len(v) != 2:
            raise UnsupportedDimensionError("plotting supports 2-D poses only")


def _cov_ellipse(mean, cov, n_sigma=2.0, **kwargs) -> Ellipse:
    cov = np.asarray(cov, dtype=float).reshape(2, 2)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    angle = float(np.degrees(np.arctan2(vecs[1, 1], vecs[0, 1])))
    width, height = 2.0 * n_sigma * np.sqrt(vals[1]), 2.0 * n_sigma * np.sqrt(vals[0])
    return Ellipse(xy=mean, width=width, height=height, angle=angle, **kwargs)


def render_tracks_svg(
    path,
    tracks: list,
    dataset=None,
    truth=None,
    epochs: tuple | None = None,
    title: str | None = None,
) -> None:
    """Write one SVG panel covering the epoch range ``epochs`` (lo, hi).

    ``tracks`` is the report structure produced by ``io.tracks_report``.
    Observations are drawn as dots; when ground truth is present, clutter
    observations become crosses.  Track means form one polyline per track
    with 2-sigma ellipses colored by the most likely type.
    """
    lo, hi = epochs if epochs is not None else (1, None)
    fig, ax = plt.subplots(figsize=(7.0, 7.0))

    def in_range(t):
        return t >= lo if hi is None else lo <= t <= hi

    if dataset is not None:
        tp_x, tp_y, fp_x, fp_y = [], [], [], []
        for vf in dataset.views():
            if not in_range(vf.epoch):
                continue
            sources = truth.sources.get((vf.epoch, vf.view_index)) if truth else None
            for i, obs in enumerate(vf.observations):
                _check_2d([obs.pose_obs])
                is_fp = sources is not None and sources[i] == 0
                (fp_x if is_fp else tp_x).append(obs.pose_obs[0])
                (fp_y if is_fp else tp_y).append(obs.pose_obs[1])
        if tp_x:
            ax.plot(tp_x, tp_y, ".", color="0.55", markersize=3, label="detections")
        if fp_x:
            ax.plot(fp_x, fp_y, "x", color="0.7", markersize=4, label="clutter")

    for tr in tracks:
        pts = [(e["epoch"], e["mean"], e["cov"]) for e in tr["epochs"] if in_range(e["epoch"])]
        if not pts:
            continue
        _check_2d([m for _, m, _ in pts])
        attr = int(np.argmax(tr["type_pmf"])) + 1
        color = type_color(attr)
        xs = [m[0] for _, m, _ in pts]
        ys = [m[1] for _, m, _ in pts]
        line, = ax.plot(xs, ys, "-o", color=color, linewidth=2.0, markersize=4)
        line.set_gid(f"track-{tr['id']}")
        for _, mean, cov in pts:
            ell = _cov_ellipse(mean, cov, n_sigma=2.0, facecolor="none",
                               edgecolor=color, linewidth=1.8, alpha=0.85)
            ax.add_patch(ell)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    ax.set_aspect("equal", adjustable="datalim")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
