"""Constrained blocked collapsed Gibbs sampling and configuration scoring.

The global score is one consistent joint log-probability of (observations,
assignments): cluster-prior weights (concentration, counts, survival gaps),
collapsed observation marginals per track, per-observation clutter factors,
Bernoulli false-positive rate factors, and detection/miss factors over each
track's lifetime.  The per-view conditionals used by the sampler and by ICM
are exact ratios of that joint, so blocked Gibbs targets it and per-view
maximization ascends it.

Where the conditional needs a track's belief at an epoch excluding the view
being resampled, the RTS pass over the track's remaining evidence supplies
it: filtered=smoothed at the trailing epoch for forward revivals, in-gap
bridge beliefs for interior epochs, and backward propagation ahead of birth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp, ndtr

from .model import (
    NEG_INF,
    Dataset,
    InvalidInputError,
    ModelConfig,
    Observation,
    Region,
    ViewFrame,
    fp_obs_log_density,
    mvn_log_density,
)
from .tracks import (
    Track,
    TypePosterior,
    pose_chain_log_marginal,
    predictive_dormant,
    predictive_instantiated,
    predictive_log_density,
    predictive_new,
    type_posterior_update,
)

__all__ = [
    "CorrespondenceVector",
    "WorldState",
    "DetectionContext",
    "detection_prob",
    "case_log_weights",
    "view_joint_log_prob",
    "sample_view",
    "gibbs_sweep",
    "global_log_score",
    "track_log_score",
    "state_from_assignments",
    "ViewConditional",
    "FP",
    "NEW",
]

FP = 0     # assignment code for clutter
NEW = -1   # placeholder for "fresh track" before an id is allocated

# Enumeration limits for exact blocked sampling of one view.
MAX_ENUM_OBS = 6
MAX_ENUM_TRACKS = 12
# Squared-Mahalanobis gate (99.9% chi-square for d<=3, rounded up).
GATE_MAHALANOBIS_SQ = 27.0
SMALL_TRACK_SET = 4


@dataclass(frozen=True)
class CorrespondenceVector:
    """Joint assignment of all observations in one view.

    Entries: 0 for clutter, an existing track id, or a fresh id for a new
    track.  No two entries may share a nonzero id.
    """

    assignments: tuple

    def __post_init__(self):
        ids = tuple(int(a) for a in self.assignments)
        object.__setattr__(self, "assignments", ids)
        nonzero = [a for a in ids if a != FP and a != NEW]
        if len(nonzero) != len(set(nonzero)):
            raise InvalidInputError("cannot-link violation: duplicate track id in one view")

    def __iter__(self):
        return iter(self.assignments)

    def __len__(self):
        return len(self.assignments)


@dataclass
class DetectionContext:
    """Alive tracks at a view and their detection probabilities."""

    epoch: int
    view_index: int
    alive_ids: list
    detect_prob: dict  # track id -> P(detected in this view)


# ---------------------------------------------------------------------------
# Detection probabilities
# ---------------------------------------------------------------------------

def _region_cdf(mean: np.ndarray, cov: np.ndarray, region: Region) -> float:
    """P(pose in region) under a diagonal approximation of the belief."""
    sd = np.sqrt(np.clip(np.diag(cov), 1e-300, None))
    upper = ndtr((region.max - mean) / sd)
    lower = ndtr((region.min - mean) / sd)
    return float(np.prod(upper - lower))


def _miss_prob_from(mean, cov, psi_log: np.ndarray, region: Region, cfg: ModelConfig) -> float:
    """1 - P(delta = 1) for a belief/type-posterior pair."""
    p_fn_bar = float(np.exp(psi_log) @ cfg._p_fn_arr)
    return 1.0 - (1.0 - p_fn_bar) * _region_cdf(mean, cov, region)


def detection_prob(track: Track, region: Region, t: int, cfg: ModelConfig,
                   smoothed: bool = False) -> float:
    """P(track produces a detection in a view with this region at epoch t)."""
    mean, cov = track.belief_at(t, smoothed=smoothed)
    p_fn_bar = float(track.psi().pmf @ cfg._p_fn_arr)
    return (1.0 - p_fn_bar) * _region_cdf(mean, cov, region)


def _log(p: float) -> float:
    return math.log(p) if p > 0.0 else NEG_INF


# ---------------------------------------------------------------------------
# World state
# ---------------------------------------------------------------------------

class WorldState:
    """Full association state: tracks, per-view assignments, clutter count.

    Owned by exactly one inference chain; mutation is single-threaded.
    """

    def __init__(self, dataset: Dataset, cfg: ModelConfig):
        if cfg.world_volume is None:
            cfg = cfg.with_world_volume(dataset.bounding_volume())
        self.dataset = dataset
        self.cfg = cfg
        self.tracks: dict[int, Track] = {}
        self.assignments: dict[tuple, CorrespondenceVector] = {}
        self.fp_count = 0
        self.next_id = 1
        self.views_by_epoch: dict[int, list] = {}
        for vf in dataset.views():
            self.views_by_epoch.setdefault(vf.epoch, []).append(vf)
            self.assignments[(vf.epoch, vf.view_index)] = CorrespondenceVector(
                tuple([FP] * len(vf.observations)))
        self.fp_count = dataset.num_observations()
        self._score_cache: dict[int, tuple[int, float]] = {}

    # -- structure edits -----------------------------------------------------

    def fresh_id(self) -> int:
        k = self.next_id
        self.next_id += 1
        return k

    def detach_view(self, view: ViewFrame) -> CorrespondenceVector:
        """Remove the view's assignments from all statistics; empty tracks die."""
        key = (view.epoch, view.view_index)
        lam = self.assignments[key]
        for i, a in enumerate(lam):
            if a == FP:
                self.fp_count -= 1
            else:
                tr = self.tracks[a]
                tr.remove_obs((view.epoch, view.view_index, i), view.observations[i])
                if tr.total_count == 0:
                    del self.tracks[a]
                    self._score_cache.pop(a, None)
        # while detached the view contributes nothing, not even clutter
        self.assignments[key] = None
        return lam

    def attach_view(self, view: ViewFrame, lam) -> CorrespondenceVector:
        """Install a correspondence vector, allocating ids for NEW entries."""
        entries = list(lam.assignments if isinstance(lam, CorrespondenceVector) else lam)
        realized = []
        for i, a in enumerate(entries):
            if a == NEW:
                a = self.fresh_id()
            realized.append(int(a))
        vec = CorrespondenceVector(tuple(realized))
        for i, a in enumerate(vec):
            if a == FP:
                self.fp_count += 1
                continue
            if a < 0:
                raise InvalidInputError(f"unknown track id {a}")
            tr = self.tracks.get(a)
            if tr is None:
                tr = Track(a, self.cfg)
                self.tracks[a] = tr
                self.next_id = max(self.next_id, a + 1)
            tr.add_obs((view.epoch, view.view_index, i), view.observations[i])
        self.assignments[(view.epoch, view.view_index)] = vec
        return vec

    # Detached views briefly leave observations unaccounted; fp_count counts
    # only attached FP entries.

    def alive_ids_at(self, t: int) -> list:
        return [k for k, tr in self.tracks.items() if tr.birth <= t <= tr.death]

    def rebuild_consistency_check(self) -> None:
        """Assert that incremental statistics match a from-scratch rebuild."""
        fresh = state_from_assignments(self.dataset, self.cfg,
                                       {k: v for k, v in self.assignments.items()})
        assert fresh.fp_count == self.fp_count, "fp count drifted"
        assert set(fresh.tracks) == set(self.tracks), "track id sets differ"
        for k, tr in self.tracks.items():
            other = fresh.tracks[k]
            assert np.array_equal(tr.type_counts, other.type_counts)
            assert tr._n == other._n
            for t in tr._n:
                assert np.allclose(tr._sum[t], other._sum[t])

    # -- scoring ---------------------------------------------------------------

    def track_score(self, k: int) -> float:
        tr = self.tracks[k]
        cached = self._score_cache.get(k)
        if cached is not None and cached[0] == tr.version:
            return cached[1]
        val = track_log_score(tr, self.views_by_epoch, self.cfg)
        self._score_cache[k] = (tr.version, val)
        return val

    def fp_part(self) -> float:
        total = self.fp_count * _log(self.cfg.p_fp) if self.fp_count else 0.0
        if self.fp_count > 0:
            total += math.log(self.cfg.alpha) + gammaln(self.fp_count)
        for (t, v), lam in self.assignments.items():
            if lam is None:
                continue
            vf = self.dataset.view(t, v)
            for i, a in enumerate(lam):
                if a == FP:
                    total += fp_obs_log_density(vf.observations[i], self.cfg)
        return float(total)

    def log_score(self) -> float:
        return float(sum(self.track_score(k) for k in self.tracks) + self.fp_part())


def state_from_assignments(dataset: Dataset, cfg: ModelConfig, assignments: dict) -> WorldState:
    """Build a WorldState from a map (epoch, view) -> iterable of assignments."""
    state = WorldState(dataset, cfg)
    for vf in dataset.views():
        key = (vf.epoch, vf.view_index)
        lam = assignments.get(key)
        if lam is None:
            continue
        state.detach_view(vf)
        state.attach_view(vf, lam)
    return state


# ---------------------------------------------------------------------------
# Global score
# ---------------------------------------------------------------------------

def track_log_score(track, views_by_epoch: dict, cfg: ModelConfig) -> float:
    """Joint log-probability contribution of one track.

    Prior weight (concentration, count factorials, survival over the
    lifetime), the collapsed type and pose marginals of its observations,
    the per-observation (1 - p_fp) factors, and the detection/miss factors
    for every view overlapping the lifetime.
    """
    n = track.total_count
    if n == 0:
        return 0.0
    a_hat = track.a_hat()
    t_b, t_d = track.birth, track.death
    total = math.log(cfg.alpha) + float(gammaln(n))
    if t_d > t_b:
        q = cfg.survival[a_hat]
        total += (t_d - t_b) * _log(q)
    total += n * _log(1.0 - cfg.p_fp)
    # exact type marginal: logsumexp_a [ log pi(a) + sum_y counts_y log phi(y|a) ]
    counts = track.type_counts
    nz = counts > 0
    contrib = cfg._log_confusion[:, nz] @ counts[nz] if nz.any() else np.zeros(cfg.num_types)
    total += float(logsumexp(cfg._log_type_prior + contrib))
    ev = track.evidence()
    ev_sorted = [(t, ev[t][0], ev[t][1]) for t in sorted(ev)]
    spreads = {t: track.epoch_spread(t) for t in ev}
    total += pose_chain_log_marginal(ev_sorted, spreads, cfg.trans_cov[a_hat], cfg)
    # detection/miss factors across the lifetime
    psi_log = track.psi().log_pmf
    detected = track.detected_views()
    for t in range(t_b, t_d + 1):
        views = views_by_epoch.get(t, ())
        if not views:
            continue
        mean, cov = track.belief_at(t, smoothed=True)
        seen = detected.get(t, ())
        for vf in views:
            miss = _miss_prob_from(mean, cov, psi_log, vf.region, cfg)
            if vf.view_index in seen:
                total += _log(1.0 - miss)
            else:
                total += _log(miss)
    return float(total)


def global_log_score(state: WorldState, cfg: ModelConfig | None = None) -> float:
    """Joint log-probability of the full association configuration."""
    return state.log_score()


# ---------------------------------------------------------------------------
# Spec-level per-observation case weights (forward flavor)
# ---------------------------------------------------------------------------

def case_log_weights(obs: Observation, view: ViewFrame, state: WorldState,
                     cfg: ModelConfig) -> dict:
    """Forward-style assignment weights for one observation.

    The state must already exclude the view being resampled.  Candidates are
    every existing track (instantiated or revivable-from-the-past), a fresh
    track, and clutter; weights follow the count/concentration prefactors
    with the false-positive rate attached per case.
    """
    t = view.epoch
    out: dict = {}
    log_not_fp = _log(1.0 - cfg.p_fp)
    for k, tr in state.tracks.items():
        if t in tr._n:
            w = math.log(tr.count_through(t)) + predictive_instantiated(tr, t, obs, cfg)
        else:
            tau_prev = tr.last_instantiated_before(t)
            if tau_prev is None:
                continue  # track lives entirely in the future; not offered here
            gap = t - tau_prev
            q = cfg.survival[tr.a_hat()]
            w = gap * _log(q) + math.log(tr.count_before(t)) + predictive_dormant(tr, t, obs, cfg)
        out[k] = w + log_not_fp
    out[NEW] = math.log(cfg.alpha) + predictive_new(obs, cfg) + log_not_fp
    fp_prefactor = math.log(state.fp_count) if state.fp_count > 0 else math.log(cfg.alpha)
    out[FP] = fp_prefactor + fp_obs_log_density(obs, cfg) + _log(cfg.p_fp)
    return out


# ---------------------------------------------------------------------------
# Exact view conditional
# ---------------------------------------------------------------------------

@dataclass
class _TrackCandidate:
    track_id: int
    prefactor: float          # counts, survival, revival penalties, 1 - p_fp
    psi: TypePosterior
    mean: np.ndarray
    cov: np.ndarray           # pose belief at the view's epoch (without sense cov)
    alive: bool
    log_hit: float            # log P(detected in this view)
    log_miss: float           # log P(missed in this view); only used when alive


class ViewConditional:
    """Weights over correspondence vectors for one view, given everything else.

    Built against a state from which the view's observations are detached.

    In ``exact`` mode (the sampler's default) the weights are exact
    log-ratios of the global score: total counts, smoothed beliefs excluding
    the view, in-gap bridge and backward-extension candidates, and the
    detection/miss bookkeeping for every view a revival or birth would newly
    cover.  Blocked resampling then leaves the score distribution invariant
    whenever detection probabilities do not depend on pose beliefs (they are
    belief-dependent in general; that dependence is the documented
    approximation).

    With ``exact=False`` the weights follow the forward/payoff convention
    instead: counts up to the view's epoch, filtered beliefs, forward
    revivals only, and detection factors gated on currently-alive tracks.
    Coordinate ascent uses this flavor; it is the paper-style surrogate that
    keeps single-view moves from being crushed by lifetime-wide miss factors.
    """

    def __init__(self, state: WorldState, view: ViewFrame, exact: bool = True):
        self.state = state
        self.view = view
        self.exact = exact
        self.cfg = cfg = state.cfg
        t = view.epoch
        self.log_p_fp = _log(cfg.p_fp)
        self.log_not_fp = _log(1.0 - cfg.p_fp)
        self._other_views: dict[int, list] = {}  # epoch -> views except this one
        for tt, views in state.views_by_epoch.items():
            self._other_views[tt] = [vf for vf in views
                                     if not (tt == t and vf.view_index == view.view_index)]
        self.base = 0.0
        self.forced_ids: set = set()  # alive tracks that cannot be missed here
        self.detection_context = DetectionContext(
            epoch=t, view_index=view.view_index,
            alive_ids=[k for k, tr in state.tracks.items() if tr.birth <= t <= tr.death],
            detect_prob={},
        )
        self.track_info: dict[int, _TrackCandidate] = {}
        for k, tr in state.tracks.items():
            cand = self._track_candidate(k, tr)
            if cand is not None:
                self.track_info[k] = cand

    def _track_candidate(self, k: int, tr: Track) -> _TrackCandidate | None:
        cfg = self.cfg
        t = self.view.epoch
        psi = tr.psi()
        psi_log = psi.log_pmf
        t_b, t_d = tr.birth, tr.death
        alive = t_b <= t <= t_d

        if self.exact:
            mean, cov = tr.belief_at(t, smoothed=True)
            w = math.log(tr.total_count) + self.log_not_fp
        elif t in tr._n:
            b = tr.filtered()[t - t_b]
            mean, cov = b.filt_mean, b.filt_cov
            w = math.log(tr.count_through(t)) + self.log_not_fp
        else:
            tau_prev = tr.last_instantiated_before(t)
            if tau_prev is None:
                return None  # lives entirely in the future; not offered here
            b = tr.filtered()[tau_prev - t_b]
            gap = t - tau_prev
            mean = b.filt_mean
            cov = b.filt_cov + gap * cfg.trans_cov[tr.a_hat()]
            w = (math.log(tr.count_before(t)) + gap * _log(cfg.survival[tr.a_hat()])
                 + self.log_not_fp)

        miss_here = _miss_prob_from(mean, cov, psi_log, self.view.region, cfg)
        log_hit = _log(1.0 - miss_here)
        if alive:
            # the base carries this view's miss factor for every alive track;
            # assigning swaps it for a hit
            if miss_here > 0.0:
                self.base += _log(miss_here)
            else:
                self.forced_ids.add(k)  # a vector leaving this track unassigned is impossible
            self.detection_context.detect_prob[k] = 1.0 - miss_here
        elif self.exact:
            # revival extends the lifetime: survival weight (exact mode adds
            # it above only for spec mode), a hit here, and miss factors for
            # every other newly covered view
            gap = (t - t_d) if t > t_d else (t_b - t)
            w += gap * _log(cfg.survival[tr.a_hat()])
            lo, hi = (t_d + 1, t) if t > t_d else (t, t_b - 1)
            for tt in range(lo, hi + 1):
                others = (self._other_views.get(tt, ()) if tt == t
                          else self.state.views_by_epoch.get(tt, ()))
                if not others:
                    continue
                m_t, c_t = tr.belief_at(tt, smoothed=True)
                for vf in others:
                    w += _log(_miss_prob_from(m_t, c_t, psi_log, vf.region, cfg))
        else:
            # forward convention: detection factors are gated on alive tracks
            log_hit = 0.0
        return _TrackCandidate(k, w, psi, mean, cov, alive, log_hit, _log(miss_here))

    # -- per-observation pieces ----------------------------------------------

    def new_track_log_weight(self, obs: Observation) -> float:
        cfg = self.cfg
        t = self.view.epoch
        w = math.log(cfg.alpha) + predictive_new(obs, cfg) + self.log_not_fp
        if self.exact:
            # a fresh track is alive at this epoch: it is detected here and
            # missed in every sibling view
            psi_log = type_posterior_update([obs.type_obs], cfg).log_pmf
            mean, cov = obs.pose_obs, cfg.sense_cov
            w += _log(1.0 - _miss_prob_from(mean, cov, psi_log, self.view.region, cfg))
            for vf in self._other_views.get(t, ()):
                w += _log(_miss_prob_from(mean, cov, psi_log, vf.region, cfg))
        return w

    def fp_log_weight(self, obs: Observation) -> float:
        # count prefactor is added per vector, it depends on earlier FPs
        return fp_obs_log_density(obs, self.cfg) + self.log_p_fp

    def fp_prefactor(self, n_prior_fps: int) -> float:
        n = self.state.fp_count + n_prior_fps
        return math.log(n) if n > 0 else math.log(self.cfg.alpha)

    def track_obs_payoff(self, k: int, obs: Observation) -> float:
        """Prefactor + predictive + hit factor (the payoff-matrix obs cell)."""
        info = self.track_info[k]
        return info.prefactor + info.log_hit + predictive_log_density(
            info.psi, info.mean, info.cov, obs, self.cfg)

    def track_obs_log_weight(self, k: int, obs: Observation) -> float:
        """Weight relative to the all-miss base (used in vector weights)."""
        info = self.track_info[k]
        w = self.track_obs_payoff(k, obs)
        if info.alive and k not in self.forced_ids:
            w -= info.log_miss
        return w

    def gated_track_ids(self, obs: Observation) -> list:
        if len(self.track_info) <= SMALL_TRACK_SET:
            return list(self.track_info)
        out = []
        for k, info in self.track_info.items():
            marg = info.cov + self.cfg.sense_cov
            diff = obs.pose_obs - info.mean
            try:
                maha = float(diff @ np.linalg.solve(marg, diff))
            except np.linalg.LinAlgError:
                continue
            if maha <= GATE_MAHALANOBIS_SQ:
                out.append(k)
        return out

    # -- whole-vector weights --------------------------------------------------

    def lambda_log_prob(self, lam, frozen_fp_prefactor: bool = False) -> float:
        """Exact conditional log-weight of one correspondence vector.

        ``frozen_fp_prefactor`` reproduces the linear-assignment convention
        where every clutter entry uses the view-entry clutter count.
        """
        entries = list(lam.assignments if isinstance(lam, CorrespondenceVector) else lam)
        obs_list = self.view.observations
        if len(entries) != len(obs_list):
            raise InvalidInputError("correspondence vector length mismatch")
        used = set()
        total = self.base
        n_fp = 0
        for i, a in enumerate(entries):
            obs = obs_list[i]
            if a == FP:
                total += self.fp_prefactor(0 if frozen_fp_prefactor else n_fp)
                total += self.fp_log_weight(obs)
                n_fp += 1
                continue
            if a == NEW:
                total += self.new_track_log_weight(obs)
                continue
            if a < 0:
                raise InvalidInputError(f"unknown track id {a}")
            if a in used:
                return NEG_INF
            used.add(a)
            if a in self.track_info:
                total += self.track_obs_log_weight(a, obs)
            else:
                # fresh id chosen by the caller
                total += self.new_track_log_weight(obs)
        if self.forced_ids - used:
            return NEG_INF
        return float(total)

    def enumerate_vectors(self):
        """All CLC-valid vectors with their log-weights (candidates gated)."""
        obs_list = self.view.observations
        cand_lists = []
        for obs in obs_list:
            cands = [(FP, self.fp_log_weight(obs)), (NEW, self.new_track_log_weight(obs))]
            for k in self.gated_track_ids(obs):
                cands.append((k, self.track_obs_log_weight(k, obs)))
            cand_lists.append(cands)
        results = []

        def rec(i, used, n_fp, acc, chosen):
            if i == len(obs_list):
                if not (self.forced_ids - used):
                    results.append((tuple(chosen), acc))
                return
            for a, w in cand_lists[i]:
                if a == FP:
                    rec(i + 1, used, n_fp + 1, acc + self.fp_prefactor(n_fp) + w,
                        chosen + [a])
                elif a == NEW:
                    rec(i + 1, used, n_fp, acc + w, chosen + [a])
                elif a not in used:
                    used.add(a)
                    rec(i + 1, used, n_fp, acc + w, chosen + [a])
                    used.remove(a)

        rec(0, set(), 0, self.base, [])
        return results

    def can_enumerate(self) -> bool:
        return (len(self.view.observations) <= MAX_ENUM_OBS
                and len(self.track_info) <= MAX_ENUM_TRACKS)

    def sample(self, rng: np.random.Generator):
        obs_list = self.view.observations
        if not obs_list:
            return CorrespondenceVector(())
        if self.can_enumerate():
            vectors = self.enumerate_vectors()
            logw = np.array([w for _, w in vectors]) if vectors else np.array([])
            if logw.size and np.isfinite(logw.max()):
                probs = np.exp(logw - logsumexp(logw))
                probs /= probs.sum()
                idx = int(rng.choice(len(vectors), p=probs))
                return CorrespondenceVector(vectors[idx][0])
        # sequential fallback: per-observation draws with a used-id mask
        chosen = []
        used = set()
        n_fp = 0
        for i, obs in enumerate(obs_list):
            cands = [(FP, self.fp_prefactor(n_fp) + self.fp_log_weight(obs)),
                     (NEW, self.new_track_log_weight(obs))]
            for k in self.gated_track_ids(obs):
                if k not in used:
                    cands.append((k, self.track_obs_log_weight(k, obs)))
            logw = np.array([w for _, w in cands])
            probs = np.exp(logw - logsumexp(logw))
            probs /= probs.sum()
            pick = cands[int(rng.choice(len(cands), p=probs))][0]
            chosen.append(pick)
            if pick == FP:
                n_fp += 1
            elif pick != NEW:
                used.add(pick)
        return CorrespondenceVector(tuple(chosen))


def view_joint_log_prob(lam, view: ViewFrame, state: WorldState, cfg: ModelConfig,
                        exact: bool = True) -> float:
    """Conditional log-weight of a correspondence vector for a view.

    ``state`` must exclude the view's own assignments.  Returns -inf for
    vectors violating the cannot-link constraint.
    """
    try:
        vec = lam if isinstance(lam, CorrespondenceVector) else CorrespondenceVector(tuple(lam))
    except InvalidInputError:
        return NEG_INF
    return ViewConditional(state, view, exact=exact).lambda_log_prob(vec)


def sample_view(view: ViewFrame, state: WorldState, rng: np.random.Generator,
                exact: bool = True):
    """Draw a correspondence vector for the view from its conditional."""
    return ViewConditional(state, view, exact=exact).sample(rng)


def gibbs_sweep(state: WorldState, rng: np.random.Generator) -> WorldState:
    """One pass of blocked resampling over every view, in (epoch, view) order."""
    for vf in state.dataset.views():
        state.detach_view(vf)
        lam = sample_view(vf, state, rng)
        state.attach_view(vf, lam)
    return state
