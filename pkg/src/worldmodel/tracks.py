"""Per-track sufficient statistics and closed-form posterior computations.

A track owns a discrete type posterior and a Gaussian pose chain.  Multiple
observations of one epoch are folded into their sample mean (the sample mean
of N draws has covariance ``sense_cov / N``), so the filter state per epoch is
the pooled count, the pooled mean, and a scalar spread statistic.

Filtered beliefs are maintained incrementally (recomputed from birth on any
change, tracks are short); smoothed beliefs are produced lazily by an RTS
backward pass, which also yields the in-gap bridge beliefs for epochs with no
observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .model import (
    NEG_INF,
    InvalidInputError,
    ModelConfig,
    Observation,
    mvn_log_density,
)

__all__ = [
    "TypePosterior",
    "PoseBelief",
    "Track",
    "DegeneratePosteriorError",
    "type_posterior_update",
    "type_predictive",
    "kalman_filter",
    "rts_smooth",
    "track_marginal_loglik",
    "predictive_instantiated",
    "predictive_dormant",
    "predictive_new",
    "predictive_log_density",
    "pose_chain_log_marginal",
]


class DegeneratePosteriorError(ValueError):
    """All type hypotheses have zero posterior mass."""


@dataclass(frozen=True)
class TypePosterior:
    """Discrete posterior over object types, stored as log-probabilities."""

    log_pmf: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_pmf, dtype=float)
        object.__setattr__(self, "log_pmf", lp)

    @property
    def pmf(self) -> np.ndarray:
        return np.exp(self.log_pmf)

    def argmax_type(self) -> int:
        """Most likely type id (1-based); ties broken toward the lowest id."""
        return int(np.argmax(self.log_pmf)) + 1


@dataclass
class PoseBelief:
    """Gaussian pose belief at one epoch: predicted, filtered and smoothed."""

    epoch: int
    pred_mean: np.ndarray
    pred_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    obs_count: int
    obs_mean: np.ndarray | None
    smooth_mean: np.ndarray | None = None
    smooth_cov: np.ndarray | None = None


def _sym(m: np.ndarray) -> np.ndarray:
    # re-enforce symmetry after every covariance update to control drift
    return 0.5 * (m + m.T)


def type_posterior_update(type_counts, cfg: ModelConfig) -> TypePosterior:
    """Posterior over the fixed type from a multiset of observed type ids.

    ``type_counts`` is either an iterable of observed 1-based type ids or a
    length-A count vector.  The empty multiset returns the prior.
    """
    counts = _as_type_counts(type_counts, cfg.num_types)
    # sum_y counts_y * log phi(y|a); columns with zero count must contribute 0
    # even where log phi is -inf, so mask them out of the product.
    nz = counts > 0
    contrib = cfg._log_confusion[:, nz] @ counts[nz] if nz.any() else np.zeros(cfg.num_types)
    log_post = cfg._log_type_prior + contrib
    norm = logsumexp(log_post)
    if norm == NEG_INF or np.isnan(norm):
        raise DegeneratePosteriorError("zero posterior mass for every type")
    return TypePosterior(log_pmf=log_post - norm)


def _as_type_counts(type_counts, num_types: int) -> np.ndarray:
    arr = np.asarray(type_counts)
    if arr.ndim == 1 and arr.shape[0] == num_types and np.issubdtype(arr.dtype, np.number):
        return arr.astype(float)
    counts = np.zeros(num_types)
    for y in np.atleast_1d(arr):
        counts[int(y) - 1] += 1
    return counts


def type_predictive(psi: TypePosterior, y_d: int, cfg: ModelConfig) -> float:
    """log P(next observed type = y_d) under the type posterior ``psi``."""
    if not 1 <= y_d <= cfg.num_types:
        raise InvalidInputError(f"type id {y_d} outside [1, {cfg.num_types}]")
    return float(logsumexp(psi.log_pmf + cfg._log_confusion[:, y_d - 1]))


# ---------------------------------------------------------------------------
# Kalman filter / RTS smoother over pooled per-epoch evidence
# ---------------------------------------------------------------------------

def kalman_filter(
    evidence: dict,
    attr: int,
    cfg: ModelConfig,
    init_cov: np.ndarray | None = None,
) -> list[PoseBelief]:
    """Forward filtering over the contiguous epoch range spanned by evidence.

    ``evidence`` maps epoch -> (count, sample mean); epochs missing from the
    map inside the spanned range are treated as gaps (no correction).  The
    first epoch must carry at least one observation.

    With ``init_cov=None`` the filter starts from the noninformative-prior
    closed form (mean = first sample mean, cov = sense_cov / count).  An
    explicit ``init_cov`` starts from a zero-mean Gaussian prior instead.
    """
    if not evidence:
        return []
    q = cfg.trans_cov[attr]
    epochs = sorted(evidence)
    t_b, t_d = epochs[0], epochs[-1]
    n_b, ybar_b = evidence[t_b]
    if n_b < 1:
        raise InvalidInputError("first epoch of a track must have at least one observation")
    beliefs: list[PoseBelief] = []
    d = cfg.pose_dim
    if init_cov is None:
        filt_mean = np.asarray(ybar_b, dtype=float).copy()
        filt_cov = cfg.sense_cov / n_b
        pred_mean = np.zeros(d)
        pred_cov = np.full((d, d), np.inf)
    else:
        pred_mean = np.zeros(d)
        pred_cov = _sym(np.asarray(init_cov, dtype=float) + q)
        filt_mean, filt_cov = _correct(pred_mean, pred_cov, n_b, ybar_b, cfg, t_b)
    beliefs.append(
        PoseBelief(t_b, pred_mean, pred_cov, filt_mean, filt_cov, int(n_b),
                   np.asarray(ybar_b, dtype=float))
    )
    for t in range(t_b + 1, t_d + 1):
        pred_mean = beliefs[-1].filt_mean
        pred_cov = _sym(beliefs[-1].filt_cov + q)
        if t in evidence and evidence[t][0] > 0:
            n_t, ybar_t = evidence[t]
            filt_mean, filt_cov = _correct(pred_mean, pred_cov, n_t, ybar_t, cfg, t)
            obs_mean = np.asarray(ybar_t, dtype=float)
        else:
            n_t, obs_mean = 0, None
            filt_mean, filt_cov = pred_mean, pred_cov
        beliefs.append(PoseBelief(t, pred_mean, pred_cov, filt_mean, filt_cov, int(n_t), obs_mean))
    return beliefs


def _correct(pred_mean, pred_cov, n, ybar, cfg, epoch):
    ybar = np.asarray(ybar, dtype=float)
    innov_cov = pred_cov + cfg.sense_cov / n
    try:
        gain = pred_cov @ np.linalg.inv(innov_cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular innovation covariance at epoch {epoch}") from exc
    filt_mean = pred_mean + gain @ (ybar - pred_mean)
    filt_cov = _sym((np.eye(cfg.pose_dim) - gain) @ pred_cov)
    return filt_mean, filt_cov


def rts_smooth(filtered: list[PoseBelief], attr: int, cfg: ModelConfig) -> list[PoseBelief]:
    """Backward smoothing pass; fills the smoothed fields in place and returns
    the same list.  At the final epoch smoothed equals filtered."""
    if not filtered:
        return filtered
    q = cfg.trans_cov[attr]
    last = filtered[-1]
    last.smooth_mean = last.filt_mean.copy()
    last.smooth_cov = last.filt_cov.copy()
    for i in range(len(filtered) - 2, -1, -1):
        cur, nxt = filtered[i], filtered[i + 1]
        try:
            gain = cur.filt_cov @ np.linalg.inv(cur.filt_cov + q)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"singular smoothing covariance at epoch {cur.epoch}") from exc
        cur.smooth_mean = cur.filt_mean + gain @ (nxt.smooth_mean - cur.filt_mean)
        cur.smooth_cov = _sym(
            cur.filt_cov + gain @ (nxt.smooth_cov - cur.filt_cov - q) @ gain.T)
    return filtered


# ---------------------------------------------------------------------------
# Predictive densities
# ---------------------------------------------------------------------------

def predictive_log_density(
    psi: TypePosterior, mean: np.ndarray, cov: np.ndarray, obs: Observation, cfg: ModelConfig
) -> float:
    """Collapsed predictive of one observation against a Gaussian pose belief."""
    type_part = type_predictive(psi, obs.type_obs, cfg)
    if type_part == NEG_INF:
        return NEG_INF
    return type_part + mvn_log_density(obs.pose_obs, mean, cov + cfg.sense_cov)


def predictive_new(obs: Observation, cfg: ModelConfig) -> float:
    """Predictive of an observation under a brand-new cluster.

    Numerically identical to the clutter density: type-marginal times a
    uniform density over the world volume (stand-in for the flat pose prior).
    """
    from .model import fp_obs_log_density

    return fp_obs_log_density(obs, cfg)


# ---------------------------------------------------------------------------
# Track
# ---------------------------------------------------------------------------

@dataclass
class Track:
    """One hypothesized object and the evidence currently assigned to it.

    Mutable and owned by exactly one inference chain.  ``refs`` are opaque
    (epoch, view, index) triples identifying the assigned observations.
    """

    id: int
    cfg: ModelConfig
    obs_by_epoch: dict = field(default_factory=dict)  # t -> list[(ref, Observation)]
    type_counts: np.ndarray = None
    _n: dict = field(default_factory=dict)        # t -> count
    _sum: dict = field(default_factory=dict)      # t -> sum of poses
    _sumq: dict = field(default_factory=dict)     # t -> sum of y' Prec y (spread stat)
    _filtered: list = None
    _smoothed_valid: bool = False
    _psi: TypePosterior = None
    version: int = 0

    def __post_init__(self):
        if self.type_counts is None:
            self.type_counts = np.zeros(self.cfg.num_types)

    # -- evidence bookkeeping ------------------------------------------------

    def add_obs(self, ref, obs: Observation) -> None:
        t = ref[0]
        self.obs_by_epoch.setdefault(t, []).append((ref, obs))
        self.type_counts[obs.type_obs - 1] += 1
        self._n[t] = self._n.get(t, 0) + 1
        y = obs.pose_obs
        self._sum[t] = self._sum.get(t, 0.0) + y
        self._sumq[t] = self._sumq.get(t, 0.0) + float(y @ self.cfg._sense_prec @ y)
        self._invalidate()

    def remove_obs(self, ref, obs: Observation) -> None:
        entries = self.obs_by_epoch[ref[0]]
        for j, (r, _) in enumerate(entries):
            if r == ref:
                entries.pop(j)
                break
        else:
            raise KeyError(f"observation {ref} not assigned to track {self.id}")
        t = ref[0]
        if not entries:
            del self.obs_by_epoch[t]
        self.type_counts[obs.type_obs - 1] -= 1
        self._n[t] -= 1
        if self._n[t] == 0:
            del self._n[t], self._sum[t], self._sumq[t]
        else:
            y = obs.pose_obs
            self._sum[t] = self._sum[t] - y
            self._sumq[t] = self._sumq[t] - float(y @ self.cfg._sense_prec @ y)
        self._invalidate()

    def _invalidate(self):
        self._filtered = None
        self._smoothed_valid = False
        self._psi = None
        self.version += 1

    # -- derived statistics ----------------------------------------------------

    @property
    def total_count(self) -> int:
        return int(sum(self._n.values()))

    def count_through(self, t: int) -> int:
        """Assignments at epochs <= t."""
        return int(sum(n for tt, n in self._n.items() if tt <= t))

    def count_before(self, t: int) -> int:
        return int(sum(n for tt, n in self._n.items() if tt < t))

    @property
    def instantiated_epochs(self) -> list[int]:
        return sorted(self._n)

    @property
    def birth(self) -> int:
        return min(self._n)

    @property
    def death(self) -> int:
        return max(self._n)

    def last_instantiated_before(self, t: int) -> int | None:
        prev = [tt for tt in self._n if tt < t]
        return max(prev) if prev else None

    def first_instantiated_after(self, t: int) -> int | None:
        nxt = [tt for tt in self._n if tt > t]
        return min(nxt) if nxt else None

    def evidence(self) -> dict:
        """Pooled per-epoch evidence: t -> (count, sample mean)."""
        return {t: (self._n[t], self._sum[t] / self._n[t]) for t in self._n}

    def epoch_spread(self, t: int) -> float:
        """sum_i (y_i - ybar)' sense_prec (y_i - ybar) at epoch t."""
        n = self._n[t]
        s = self._sum[t]
        return float(self._sumq[t] - (s @ self.cfg._sense_prec @ s) / n)

    def psi(self) -> TypePosterior:
        if self._psi is None:
            self._psi = type_posterior_update(self.type_counts, self.cfg)
        return self._psi

    def a_hat(self) -> int:
        return self.psi().argmax_type()

    # -- beliefs ---------------------------------------------------------------

    def filtered(self) -> list[PoseBelief]:
        if self._filtered is None:
            self._filtered = kalman_filter(self.evidence(), self.a_hat(), self.cfg)
            self._smoothed_valid = False
        return self._filtered

    def smoothed(self) -> list[PoseBelief]:
        beliefs = self.filtered()
        if not self._smoothed_valid:
            rts_smooth(beliefs, self.a_hat(), self.cfg)
            self._smoothed_valid = True
        return beliefs

    def belief_at(self, t: int, smoothed: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """(mean, cov) of the pose belief at epoch t.

        Inside the lifetime this is the filtered (or smoothed) belief; beyond
        the last instantiated epoch the belief is propagated forward by the
        random walk of the most likely type.
        """
        beliefs = self.smoothed() if smoothed else self.filtered()
        t_b, t_d = beliefs[0].epoch, beliefs[-1].epoch
        if t < t_b:
            gap = t_b - t
            b = beliefs[0]
            mean = b.smooth_mean if smoothed else b.filt_mean
            cov = b.smooth_cov if smoothed else b.filt_cov
            return mean, cov + gap * self.cfg.trans_cov[self.a_hat()]
        if t > t_d:
            gap = t - t_d
            b = beliefs[-1]
            return b.filt_mean, b.filt_cov + gap * self.cfg.trans_cov[self.a_hat()]
        b = beliefs[t - t_b]
        if smoothed:
            return b.smooth_mean, b.smooth_cov
        return b.filt_mean, b.filt_cov

    def detected_views(self) -> dict:
        """Epoch -> set of view indices in which this track has observations."""
        out: dict[int, set] = {}
        for t, entries in self.obs_by_epoch.items():
            out[t] = {ref[1] for ref, _ in entries}
        return out

    def clone(self, new_id: int | None = None) -> "Track":
        tr = Track(self.id if new_id is None else new_id, self.cfg)
        for t, entries in self.obs_by_epoch.items():
            for ref, obs in entries:
                tr.add_obs(ref, obs)
        return tr


# ---------------------------------------------------------------------------
# Marginal likelihood and spec-level predictives
# ---------------------------------------------------------------------------

def track_marginal_loglik(track: Track, cfg: ModelConfig) -> float:
    """Association-scoring likelihood of a track's observations.

    Every observation is evaluated against the smoothed belief of its epoch
    (pose part) and the full type posterior (type part); an empty track
    contributes zero.
    """
    if track.total_count == 0:
        return 0.0
    beliefs = track.smoothed()
    t_b = beliefs[0].epoch
    psi = track.psi()
    total = 0.0
    for t, entries in track.obs_by_epoch.items():
        b = beliefs[t - t_b]
        marg_cov = b.smooth_cov + cfg.sense_cov
        for _, obs in entries:
            total += type_predictive(psi, obs.type_obs, cfg)
            total += mvn_log_density(obs.pose_obs, b.smooth_mean, marg_cov)
    return float(total)


def predictive_instantiated(track: Track, t: int, obs: Observation, cfg: ModelConfig) -> float:
    """Predictive for an epoch the track is currently instantiated at, using
    the filtered belief of that epoch."""
    if t not in track._n:
        raise InvalidInputError(f"track {track.id} not instantiated at epoch {t}")
    beliefs = track.filtered()
    b = beliefs[t - beliefs[0].epoch]
    return predictive_log_density(track.psi(), b.filt_mean, b.filt_cov, obs, cfg)


def predictive_dormant(track: Track, t: int, obs: Observation, cfg: ModelConfig) -> float:
    """Predictive for an epoch after the track's last instantiation, with the
    belief dispersed by the most-likely-type random walk.  The survival weight
    for the gap is applied by the caller as part of the case weight."""
    tau_prev = track.last_instantiated_before(t)
    if tau_prev is None:
        raise InvalidInputError(f"track {track.id} has no instantiation before epoch {t}")
    beliefs = track.filtered()
    b = beliefs[tau_prev - beliefs[0].epoch]
    gap_cov = b.filt_cov + (t - tau_prev) * cfg.trans_cov[track.a_hat()]
    return predictive_log_density(track.psi(), b.filt_mean, gap_cov, obs, cfg)


def pose_chain_log_marginal(
    evidence: list,
    spreads: dict,
    q: np.ndarray,
    cfg: ModelConfig,
) -> float:
    """Exact log marginal of a track's pose observations.

    ``evidence`` is a sorted list of (epoch, count, sample mean); ``spreads``
    maps epoch to the within-epoch spread statistic.  The flat pose prior is
    realized as a single ``-log V`` factor on the first observation; all other
    factors form the proper chain-rule product, so differences between
    configurations are exact.
    """
    if not evidence:
        return 0.0
    d = cfg.pose_dim
    log_v = cfg.log_world_volume
    sense_logdet = float(np.linalg.slogdet(cfg.sense_cov)[1])
    total = -log_v
    prev_t = None
    filt_mean = None
    filt_cov = None
    for t, n, ybar in evidence:
        # within-epoch factor: n observations collapse onto their sample mean
        total += -0.5 * (d * (n - 1) * np.log(2.0 * np.pi)
                         + (n - 1) * sense_logdet
                         + d * np.log(n)
                         + spreads.get(t, 0.0))
        if prev_t is None:
            filt_mean = ybar
            filt_cov = cfg.sense_cov / n
        else:
            gap = t - prev_t
            pred_cov = filt_cov + gap * q
            total += mvn_log_density(ybar, filt_mean, pred_cov + cfg.sense_cov / n)
            gain = pred_cov @ np.linalg.inv(pred_cov + cfg.sense_cov / n)
            filt_mean = filt_mean + gain @ (ybar - filt_mean)
            filt_cov = _sym((np.eye(d) - gain) @ pred_cov)
        prev_t = t
    return float(total)
