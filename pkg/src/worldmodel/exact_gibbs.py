"""Optional exact (un-collapsed) Gibbs mode.

Instead of integrating cluster parameters out, this mode instantiates an
explicit type and per-epoch pose chain for every track and evaluates the
five-case assignment conditional against those parameters: instantiated,
revival from the past, in-lifetime Gaussian bridge, backward extension with
a survival factor, and fresh cluster.  Parameters are redrawn by
forward-filter backward-sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    NEG_INF,
    InvalidInputError,
    ModelConfig,
    Observation,
    mvn_log_density,
)
from .tracks import Track, kalman_filter, rts_smooth

__all__ = ["TrackParams", "exact_gibbs_case_weights", "sample_track_params", "bridge_distribution"]


@dataclass
class TrackParams:
    """Explicit parameters of one track: fixed type and per-epoch poses."""

    attr: int
    poses: dict  # epoch -> pose vector, defined on the instantiated epochs
    count: int   # observations currently assigned (excluding the one being sampled)


def bridge_distribution(
    pose_prev: np.ndarray, pose_next: np.ndarray, gap_prev: int, gap_next: int, q: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional of a random-walk state given its neighbours.

    For gaps g1 (since the previous instantiation) and g2 (until the next),
    the in-between pose is Gaussian with mean interpolated inversely to the
    gaps and covariance (g1 g2 / (g1 + g2)) Q.
    """
    g1, g2 = float(gap_prev), float(gap_next)
    mean = (g2 * np.asarray(pose_prev, float) + g1 * np.asarray(pose_next, float)) / (g1 + g2)
    cov = (g1 * g2 / (g1 + g2)) * q
    return mean, cov


def exact_gibbs_case_weights(
    obs: Observation, params: TrackParams | None, t: int, cfg: ModelConfig
) -> tuple[int, float]:
    """(case id, log weight) for assigning ``obs`` at epoch ``t``.

    ``params=None`` is the fresh-cluster case (weight carries the
    concentration prefactor and the uniform world-volume pose factor).
    """
    if params is None:
        from .model import fp_obs_log_density

        return 5, float(np.log(cfg.alpha)) + fp_obs_log_density(obs, cfg)
    a = params.attr
    log_conf = cfg._log_confusion[a - 1, obs.type_obs - 1]
    if log_conf == NEG_INF:
        # the weight is -inf in all four existing-track cases
        pass
    epochs = sorted(params.poses)
    t_b, t_d = epochs[0], epochs[-1]
    q = cfg.trans_cov[a]
    prefactor = float(np.log(params.count))
    if t in params.poses:
        pose = params.poses[t]
        w = prefactor + log_conf + mvn_log_density(obs.pose_obs, pose, cfg.sense_cov)
        return 1, float(w)
    if t > t_d:
        gap = t - t_d
        if cfg.survival[a] <= 0:
            return 2, NEG_INF
        w = prefactor + gap * np.log(cfg.survival[a]) + log_conf + mvn_log_density(
            obs.pose_obs, params.poses[t_d], gap * q + cfg.sense_cov)
        return 2, float(w)
    if t < t_b:
        gap = t_b - t
        if cfg.survival[a] <= 0:
            return 4, NEG_INF
        # base-distribution ratio is 1: flat pose prior, identical type factor
        w = prefactor + gap * np.log(cfg.survival[a]) + log_conf + mvn_log_density(
            obs.pose_obs, params.poses[t_b], gap * q + cfg.sense_cov)
        return 4, float(w)
    tau_prev = max(tt for tt in epochs if tt < t)
    tau_next = min(tt for tt in epochs if tt > t)
    if not (tau_prev < t < tau_next):
        raise InvalidInputError("bridge case requires an instantiation on both sides")
    mean, cov = bridge_distribution(
        params.poses[tau_prev], params.poses[tau_next], t - tau_prev, tau_next - t, q)
    w = prefactor + log_conf + mvn_log_density(obs.pose_obs, mean, cov + cfg.sense_cov)
    return 3, float(w)


def sample_track_params(track: Track, rng: np.random.Generator, cfg: ModelConfig) -> TrackParams:
    """Forward-filter backward-sample a pose chain; draw the type from its
    posterior.  Deterministic given the generator state."""
    psi = track.psi()
    attr = int(rng.choice(cfg.num_types, p=psi.pmf / psi.pmf.sum())) + 1
    beliefs = kalman_filter(track.evidence(), attr, cfg)
    q = cfg.trans_cov[attr]
    poses: dict[int, np.ndarray] = {}
    last = beliefs[-1]
    poses[last.epoch] = rng.multivariate_normal(last.filt_mean, last.filt_cov)
    for i in range(len(beliefs) - 2, -1, -1):
        b = beliefs[i]
        gain = b.filt_cov @ np.linalg.inv(b.filt_cov + q)
        mean = b.filt_mean + gain @ (poses[beliefs[i + 1].epoch] - b.filt_mean)
        cov = b.filt_cov - gain @ (b.filt_cov + q) @ gain.T
        cov = 0.5 * (cov + cov.T)
        # clip tiny negative eigenvalues from the downdate
        w, v = np.linalg.eigh(cov)
        cov = (v * np.clip(w, 0.0, None)) @ v.T
        poses[b.epoch] = rng.multivariate_normal(mean, cov)
    return TrackParams(attr=attr, poses=poses, count=track.total_count)
