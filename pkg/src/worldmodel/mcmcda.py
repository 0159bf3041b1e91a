"""Metropolis-Hastings sampling over associations, and the two-stage pipeline.

The chain state is a partition of association items (single observations, or
per-epoch cluster summaries from a first ICM stage) into tracks plus a
clutter pool.  Eight move types (birth, death, split, merge, extension,
reduction, swap, point-update) with computable forward/reverse probabilities
drive the chain; the target is the same global score used everywhere else,
evaluated incrementally per touched track.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .model import Dataset, ModelConfig, Observation, fp_obs_log_density
from .tracks import TypePosterior, kalman_filter, rts_smooth, type_posterior_update
from .association import FP, WorldState, state_from_assignments, track_log_score, _log
from .icm import icm_until_convergence

__all__ = [
    "ClusterSummary",
    "AssocItem",
    "PooledTrack",
    "Partition",
    "TrackPartitionSystem",
    "ChainState",
    "Proposal",
    "propose",
    "mh_step",
    "run_mcmcda",
    "two_stage",
    "McmcdaResult",
    "items_from_dataset",
    "items_from_summaries",
    "assignment_map_from_partition",
]

P_CONT = 0.5  # geometric continuation probability of the birth construction
MOVE_TYPES = ("birth", "death", "split", "merge", "extension", "reduction", "swap", "update")


@dataclass(frozen=True)
class ClusterSummary:
    """Pooled evidence of one non-clutter per-epoch cluster from stage 1."""

    epoch: int
    type_counts: np.ndarray      # pooled multiset of observed type ids
    n: int
    mean: np.ndarray
    source_track: int
    sumq: float                  # sum of y' sense_prec y over members
    member_refs: tuple           # ((epoch, view, index), ...)
    fp_log_density: float        # sum of member clutter densities

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a cluster summary needs at least one observation")


@dataclass(frozen=True)
class AssocItem:
    """One unit the sampler can move: an observation or a cluster summary."""

    idx: int
    epoch: int
    group: tuple                 # cannot-link granularity key
    n: int
    mean: np.ndarray
    sumq: float
    type_counts: np.ndarray
    fp_log_density: float
    views: tuple                 # ((epoch, view_index), ...)
    member_refs: tuple


class PooledTrack:
    """Scoring adapter: a set of items pooled into per-epoch evidence."""

    def __init__(self, items: list, cfg: ModelConfig):
        self.cfg = cfg
        self._by_epoch: dict[int, list] = {}
        counts = np.zeros(cfg.num_types)
        total = 0
        views: dict[int, set] = {}
        for it in items:
            slot = self._by_epoch.setdefault(it.epoch, [0, 0.0, 0.0])
            slot[0] += it.n
            slot[1] = slot[1] + it.n * it.mean
            slot[2] += it.sumq
            counts += it.type_counts
            total += it.n
            for (t, v) in it.views:
                views.setdefault(t, set()).add(v)
        self.type_counts = counts
        self._total = total
        self._views = views
        self._psi = None
        self._smoothed = None

    @property
    def total_count(self) -> int:
        return self._total

    @property
    def birth(self) -> int:
        return min(self._by_epoch)

    @property
    def death(self) -> int:
        return max(self._by_epoch)

    def psi(self) -> TypePosterior:
        if self._psi is None:
            self._psi = type_posterior_update(self.type_counts, self.cfg)
        return self._psi

    def a_hat(self) -> int:
        return self.psi().argmax_type()

    def evidence(self) -> dict:
        return {t: (slot[0], slot[1] / slot[0]) for t, slot in self._by_epoch.items()}

    def epoch_spread(self, t: int) -> float:
        n, s, sumq = self._by_epoch[t]
        return float(sumq - (s @ self.cfg._sense_prec @ s) / n)

    def detected_views(self) -> dict:
        return self._views

    def belief_at(self, t: int, smoothed: bool = True):
        if self._smoothed is None:
            beliefs = kalman_filter(self.evidence(), self.a_hat(), self.cfg)
            rts_smooth(beliefs, self.a_hat(), self.cfg)
            self._smoothed = beliefs
        beliefs = self._smoothed
        t_b, t_d = beliefs[0].epoch, beliefs[-1].epoch
        q = self.cfg.trans_cov[self.a_hat()]
        if t < t_b:
            b = beliefs[0]
            base = b.smooth_mean if smoothed else b.filt_mean
            cov = b.smooth_cov if smoothed else b.filt_cov
            return base, cov + (t_b - t) * q
        if t > t_d:
            b = beliefs[-1]
            return b.filt_mean, b.filt_cov + (t - t_d) * q
        b = beliefs[t - t_b]
        return (b.smooth_mean, b.smooth_cov) if smoothed else (b.filt_mean, b.filt_cov)


# ---------------------------------------------------------------------------
# Partition state
# ---------------------------------------------------------------------------

class Partition:
    """Assignment of items to track labels (0 = clutter) with score caches."""

    def __init__(self, system: "TrackPartitionSystem"):
        self.system = system
        n = len(system.items)
        self.assignment = [FP] * n
        self.tracks: dict[int, list] = {}          # label -> sorted item idxs
        # label -> group key -> count; counts because multi-item edits pass
        # through transient states where two items of one group coexist
        self.groups: dict[int, dict] = {}
        self.next_label = 1
        self.fp_list = list(range(n))              # sorted idxs of clutter items
        self._tscore: dict[int, float] = {}

    # -- structural helpers ----------------------------------------------------

    def labels(self) -> list:
        return list(self.tracks)

    def tracks_ge2(self) -> list:
        return [k for k, members in self.tracks.items() if len(members) >= 2]

    def compat(self, label: int, item: AssocItem) -> bool:
        return self.groups[label].get(item.group, 0) == 0

    def fresh_label(self) -> int:
        k = self.next_label
        self.next_label += 1
        return k

    # -- edits -------------------------------------------------------------------

    def apply(self, edits: list) -> dict:
        """Apply (item, old_label, new_label) edits; returns a stash that
        ``revert`` uses to restore score caches exactly."""
        stash = {"scores": {}, "next_label": self.next_label}
        touched = set()
        for idx, old, new in edits:
            assert self.assignment[idx] == old, "stale edit"
            touched.add(old)
            touched.add(new)
            item = self.system.items[idx]
            if old == FP:
                self.fp_list.pop(bisect.bisect_left(self.fp_list, idx))
            else:
                members = self.tracks[old]
                members.pop(bisect.bisect_left(members, idx))
                g = self.groups[old]
                g[item.group] -= 1
                if g[item.group] == 0:
                    del g[item.group]
                if not members:
                    del self.tracks[old], self.groups[old]
            if new == FP:
                bisect.insort(self.fp_list, idx)
            else:
                if new not in self.tracks:
                    self.tracks[new] = []
                    self.groups[new] = {}
                    self.next_label = max(self.next_label, new + 1)
                bisect.insort(self.tracks[new], idx)
                g = self.groups[new]
                g[item.group] = g.get(item.group, 0) + 1
            self.assignment[idx] = new
        for label in touched:
            if label != FP:
                stash["scores"][label] = self._tscore.pop(label, None)
        return stash

    def revert(self, edits: list, stash: dict) -> None:
        inverse = [(idx, new, old) for idx, old, new in reversed(edits)]
        self.apply(inverse)
        for label, val in stash["scores"].items():
            if val is None:
                self._tscore.pop(label, None)
            else:
                self._tscore[label] = val
        self.next_label = stash["next_label"]

    # -- scoring ---------------------------------------------------------------

    def track_score(self, label: int) -> float:
        val = self._tscore.get(label)
        if val is None:
            pooled = PooledTrack([self.system.items[i] for i in self.tracks[label]],
                                 self.system.cfg)
            val = track_log_score(pooled, self.system.views_by_epoch, self.system.cfg)
            self._tscore[label] = val
        return val

    def fp_part(self) -> float:
        sys = self.system
        n_fp = sys.base_fp_obs + sum(sys.items[i].n for i in self.fp_list)
        dens = sys.base_fp_density + sum(sys.items[i].fp_log_density for i in self.fp_list)
        total = dens
        if n_fp > 0:
            total += n_fp * _log(sys.cfg.p_fp)
            total += math.log(sys.cfg.alpha) + float(gammaln(n_fp))
        return total

    def total_score(self) -> float:
        return float(sum(self.track_score(k) for k in self.tracks) + self.fp_part())


# ---------------------------------------------------------------------------
# Proposal machinery
# ---------------------------------------------------------------------------

@dataclass
class Proposal:
    move_type: str
    edits: list
    logq_fwd: float
    logq_rev: float


class TrackPartitionSystem:
    """Move construction and scoring for a partition of association items.

    Proposals are locality-driven: candidate picks inside birth, merge,
    extension and point-update moves are weighted by pose proximity on the
    random-walk scale, with a floor weight keeping every valid move
    proposable.  All weights are computable in both directions, so the
    Hastings ratios stay exact.
    """

    def __init__(self, items: list, cfg: ModelConfig, views_by_epoch: dict,
                 base_fp_obs: int = 0, base_fp_density: float = 0.0):
        self.items = items
        self.cfg = cfg
        self.views_by_epoch = views_by_epoch
        self.base_fp_obs = base_fp_obs
        self.base_fp_density = base_fp_density
        # per-epoch-gap squared scale of the locality weights
        q = cfg.trans_cov[1]
        self.q_scale = float(np.trace(q) / cfg.pose_dim)
        self.w_floor = 1e-4
        self.w_neutral = math.exp(-4.5)  # fresh/clutter reference weight

    def initial_state(self) -> Partition:
        return Partition(self)

    def score(self, state: Partition) -> float:
        return state.total_score()

    def apply(self, state: Partition, prop: Proposal) -> dict:
        return state.apply(prop.edits)

    def revert(self, state: Partition, prop: Proposal, stash: dict) -> None:
        state.revert(prop.edits, stash)

    # -- locality weights --------------------------------------------------------

    def _link_weight(self, item_a: AssocItem, item_b: AssocItem) -> float:
        gap = max(1, abs(item_b.epoch - item_a.epoch))
        d2 = float(np.sum((item_b.mean - item_a.mean) ** 2))
        return max(math.exp(-0.5 * d2 / (gap * self.q_scale)), self.w_floor)

    def _weighted_pick(self, rng, cands: list, weights: list):
        total = sum(weights)
        probs = np.asarray(weights) / total
        j = int(rng.choice(len(cands), p=probs))
        return cands[j], math.log(weights[j]) - math.log(total)

    # -- move constructors (return Proposal or None when infeasible) -----------

    def propose(self, state: Partition, rng: np.random.Generator) -> Proposal | None:
        for _ in range(len(MOVE_TYPES)):
            kind = MOVE_TYPES[int(rng.integers(len(MOVE_TYPES)))]
            prop = getattr(self, f"_move_{kind}")(state, rng)
            if prop is not None:
                return prop
        return None  # identity proposal

    # birth / death ------------------------------------------------------------

    def _birth_chain_candidates(self, state, last_idx, used_groups):
        return [j for j in state.fp_list
                if j > last_idx and self.items[j].group not in used_groups]

    def _chain_step_logq(self, cands: list, anchor: AssocItem, picked: int) -> float:
        weights = [self._link_weight(anchor, self.items[j]) for j in cands]
        return math.log(weights[cands.index(picked)]) - math.log(sum(weights))

    def _move_birth(self, state: Partition, rng) -> Proposal | None:
        if len(state.fp_list) < 2:
            return None
        f = state.fp_list
        u = f[int(rng.integers(len(f)))]
        logq = -math.log(len(f))
        chain = [u]
        used = {self.items[u].group}
        cands = self._birth_chain_candidates(state, u, used)
        if not cands:
            return None
        anchor = self.items[u]
        weights = [self._link_weight(anchor, self.items[j]) for j in cands]
        w, lp = self._weighted_pick(rng, cands, weights)
        logq += lp
        chain.append(w)
        used.add(self.items[w].group)
        while True:
            cands = self._birth_chain_candidates(state, chain[-1], used)
            if not cands:
                break
            if rng.random() < P_CONT:
                anchor = self.items[chain[-1]]
                weights = [self._link_weight(anchor, self.items[j]) for j in cands]
                j, lp = self._weighted_pick(rng, cands, weights)
                logq += math.log(P_CONT) + lp
                chain.append(j)
                used.add(self.items[j].group)
            else:
                logq += math.log(1.0 - P_CONT)
                break
        label = state.next_label
        edits = [(idx, FP, label) for idx in chain]
        n_ge2_after = len(state.tracks_ge2()) + 1
        logq_rev = -math.log(n_ge2_after)
        return Proposal("birth", edits, logq, logq_rev)

    def _death_reverse_logq(self, state: Partition, members: list) -> float:
        """Probability that a birth reconstructs exactly this item set, in the
        post-death state where the members are clutter again."""
        seq = sorted(members)
        logq = -math.log(len(state.fp_list))
        used = {self.items[seq[0]].group}
        for j in range(1, len(seq)):
            cands = self._birth_chain_candidates(state, seq[j - 1], used)
            if j >= 2:
                logq += math.log(P_CONT)
            logq += self._chain_step_logq(cands, self.items[seq[j - 1]], seq[j])
            used.add(self.items[seq[j]].group)
        if self._birth_chain_candidates(state, seq[-1], used):
            logq += math.log(1.0 - P_CONT)
        return logq

    def _move_death(self, state: Partition, rng) -> Proposal | None:
        t2 = state.tracks_ge2()
        if not t2:
            return None
        label = t2[int(rng.integers(len(t2)))]
        members = list(state.tracks[label])
        edits = [(idx, label, FP) for idx in members]
        logq = -math.log(len(t2))
        stash = state.apply(edits)
        logq_rev = self._death_reverse_logq(state, members)
        state.revert(edits, stash)
        return Proposal("death", edits, logq, logq_rev)

    # split / merge --------------------------------------------------------------

    def _merge_pairs(self, state: Partition) -> tuple[list, list]:
        labels = list(state.tracks)
        pairs = []
        weights = []
        for a in labels:
            ma = state.tracks[a]
            for b in labels:
                if a == b:
                    continue
                mb = state.tracks[b]
                if ma[-1] < mb[0] and not (state.groups[a].keys() & state.groups[b].keys()):
                    pairs.append((a, b))
                    weights.append(self._link_weight(self.items[ma[-1]], self.items[mb[0]]))
        return pairs, weights

    def _merge_pair_logq(self, state: Partition, a: int, b: int) -> float:
        pairs, weights = self._merge_pairs(state)
        return math.log(weights[pairs.index((a, b))]) - math.log(sum(weights))

    def _move_split(self, state: Partition, rng) -> Proposal | None:
        t2 = state.tracks_ge2()
        if not t2:
            return None
        label = t2[int(rng.integers(len(t2)))]
        members = state.tracks[label]
        cut = 1 + int(rng.integers(len(members) - 1))
        new_label = state.next_label
        edits = [(idx, label, new_label) for idx in members[cut:]]
        logq = -math.log(len(t2)) - math.log(len(members) - 1)
        stash = state.apply(edits)
        logq_rev = self._merge_pair_logq(state, label, new_label)
        state.revert(edits, stash)
        return Proposal("split", edits, logq, logq_rev)

    def _move_merge(self, state: Partition, rng) -> Proposal | None:
        pairs, weights = self._merge_pairs(state)
        if not pairs:
            return None
        (a, b), lp = self._weighted_pick(rng, pairs, weights)
        len_a = len(state.tracks[a])
        len_b = len(state.tracks[b])
        edits = [(idx, b, a) for idx in list(state.tracks[b])]
        logq = lp
        stash = state.apply(edits)
        logq_rev = -math.log(len(state.tracks_ge2())) - math.log(len_a + len_b - 1)
        state.revert(edits, stash)
        return Proposal("merge", edits, logq, logq_rev)

    # extension / reduction --------------------------------------------------------

    def _extension_candidates(self, state: Partition, label: int, side: int) -> list:
        members = state.tracks[label]
        groups = state.groups[label]
        if side == 0:  # front
            return [j for j in state.fp_list
                    if j < members[0] and self.items[j].group not in groups]
        return [j for j in state.fp_list
                if j > members[-1] and self.items[j].group not in groups]

    def _extension_logq(self, state: Partition, label: int, side: int, idx: int) -> float:
        cands = self._extension_candidates(state, label, side)
        members = state.tracks[label]
        anchor = self.items[members[0] if side == 0 else members[-1]]
        weights = [self._link_weight(anchor, self.items[j]) for j in cands]
        return math.log(weights[cands.index(idx)]) - math.log(sum(weights))

    def _move_extension(self, state: Partition, rng) -> Proposal | None:
        labels = state.labels()
        if not labels:
            return None
        label = labels[int(rng.integers(len(labels)))]
        side = int(rng.integers(2))
        cands = self._extension_candidates(state, label, side)
        if not cands:
            return None
        members = state.tracks[label]
        anchor = self.items[members[0] if side == 0 else members[-1]]
        weights = [self._link_weight(anchor, self.items[j]) for j in cands]
        idx, lp = self._weighted_pick(rng, cands, weights)
        edits = [(idx, FP, label)]
        logq = -math.log(len(labels)) - math.log(2) + lp
        stash = state.apply(edits)
        logq_rev = -math.log(len(state.tracks_ge2())) - math.log(2)
        state.revert(edits, stash)
        return Proposal("extension", edits, logq, logq_rev)

    def _move_reduction(self, state: Partition, rng) -> Proposal | None:
        t2 = state.tracks_ge2()
        if not t2:
            return None
        label = t2[int(rng.integers(len(t2)))]
        side = int(rng.integers(2))
        members = state.tracks[label]
        idx = members[0] if side == 0 else members[-1]
        edits = [(idx, label, FP)]
        logq = -math.log(len(t2)) - math.log(2)
        stash = state.apply(edits)
        logq_rev = (-math.log(len(state.labels())) - math.log(2)
                    + self._extension_logq(state, label, side, idx))
        state.revert(edits, stash)
        return Proposal("reduction", edits, logq, logq_rev)

    # swap / update ---------------------------------------------------------------

    def _move_swap(self, state: Partition, rng) -> Proposal | None:
        labels = state.labels()
        if len(labels) < 2:
            return None
        ia, ib = rng.choice(len(labels), size=2, replace=False)
        a, b = labels[int(ia)], labels[int(ib)]
        ma, mb = state.tracks[a], state.tracks[b]
        u = ma[int(rng.integers(len(ma)))]
        w = mb[int(rng.integers(len(mb)))]
        gu, gw = self.items[u].group, self.items[w].group
        if gu != gw:
            if gu in state.groups[b] or gw in state.groups[a]:
                return None
        edits = [(u, a, b), (w, b, a)]
        logq = -math.log(len(labels) * (len(labels) - 1)) - math.log(len(ma)) - math.log(len(mb))
        return Proposal("swap", edits, logq, logq)

    def _update_destinations(self, state: Partition, idx: int) -> tuple[list, list]:
        item = self.items[idx]
        cur = state.assignment[idx]
        dests = []
        weights = []
        if cur != FP:
            dests.append(FP)
            weights.append(self.w_neutral)
        for label in state.tracks:
            if label != cur and state.compat(label, item):
                members = state.tracks[label]
                # anchor at the member nearest in time
                anchor = min((self.items[j] for j in members),
                             key=lambda it: (abs(it.epoch - item.epoch), it.idx))
                dests.append(label)
                weights.append(self._link_weight(anchor, item))
        if cur == FP or len(state.tracks[cur]) >= 2:
            dests.append(state.next_label)  # fresh singleton
            weights.append(self.w_neutral)
        return dests, weights

    def _update_logq(self, state: Partition, idx: int, dest) -> float:
        dests, weights = self._update_destinations(state, idx)
        return math.log(weights[dests.index(dest)]) - math.log(sum(weights))

    def _move_update(self, state: Partition, rng) -> Proposal | None:
        n = len(self.items)
        idx = int(rng.integers(n))
        dests, weights = self._update_destinations(state, idx)
        if not dests:
            return None
        dest, lp = self._weighted_pick(rng, dests, weights)
        cur = state.assignment[idx]
        edits = [(idx, cur, dest)]
        logq = -math.log(n) + lp
        stash = state.apply(edits)
        rev_dest = cur if cur == FP or cur in state.tracks else state.next_label
        logq_rev = -math.log(n) + self._update_logq(state, idx, rev_dest)
        state.revert(edits, stash)
        return Proposal("update", edits, logq, logq_rev)


# ---------------------------------------------------------------------------
# Chain driver
# ---------------------------------------------------------------------------

@dataclass
class ChainState:
    system: object
    state: object
    rng: np.random.Generator
    log_score: float
    iteration: int = 0
    accepted: int = 0
    best_score: float = -math.inf
    best_assignment: tuple = ()

    def snapshot_best(self):
        if self.log_score > self.best_score:
            self.best_score = self.log_score
            self.best_assignment = tuple(self.state.assignment)


def propose(chain: ChainState, rng: np.random.Generator | None = None) -> Proposal | None:
    """One proposal from the chain's move family (None = identity)."""
    return chain.system.propose(chain.state, rng if rng is not None else chain.rng)


def mh_step(chain: ChainState, cfg: ModelConfig | None = None) -> bool:
    """One Metropolis-Hastings step; returns True when the move was accepted."""
    chain.iteration += 1
    prop = propose(chain)
    if prop is None:
        return True  # identity proposal always accepted
    pre = chain.log_score
    stash = chain.system.apply(chain.state, prop)
    post = chain.system.score(chain.state)
    if not np.isfinite(post):
        chain.system.revert(chain.state, prop, stash)
        return False
    log_acc = (post - pre) + (prop.logq_rev - prop.logq_fwd)
    if log_acc >= 0 or chain.rng.random() < math.exp(log_acc):
        chain.log_score = post
        chain.accepted += 1
        chain.snapshot_best()
        return True
    chain.system.revert(chain.state, prop, stash)
    return False


@dataclass
class McmcdaResult:
    samples: list            # (iteration, score, assignment tuple), thinned
    best_assignment: tuple
    best_score: float
    score_trace: np.ndarray  # score after every iteration
    accept_flags: np.ndarray
    items: list


def items_from_dataset(dataset: Dataset, cfg: ModelConfig) -> list:
    items = []
    for vf in dataset.views():
        for i, obs in enumerate(vf.observations):
            y = obs.pose_obs
            counts = np.zeros(cfg.num_types)
            counts[obs.type_obs - 1] = 1
            items.append(AssocItem(
                idx=len(items), epoch=vf.epoch, group=(vf.epoch, vf.view_index),
                n=1, mean=y, sumq=float(y @ cfg._sense_prec @ y), type_counts=counts,
                fp_log_density=fp_obs_log_density(obs, cfg),
                views=((vf.epoch, vf.view_index),),
                member_refs=((vf.epoch, vf.view_index, i),),
            ))
    return items


def items_from_summaries(summaries: list, cfg: ModelConfig) -> list:
    items = []
    for s in summaries:
        views = tuple(sorted({(t, v) for (t, v, _) in s.member_refs}))
        items.append(AssocItem(
            idx=len(items), epoch=s.epoch, group=(s.epoch,),
            n=s.n, mean=s.mean, sumq=s.sumq, type_counts=s.type_counts,
            fp_log_density=s.fp_log_density, views=views, member_refs=s.member_refs,
        ))
    return items


def assignment_map_from_partition(items: list, assignment, dataset: Dataset) -> dict:
    """Expand an item partition into per-view correspondence vectors."""
    out = {}
    for vf in dataset.views():
        out[(vf.epoch, vf.view_index)] = [FP] * len(vf.observations)
    for item, label in zip(items, assignment):
        if label == FP:
            continue
        for (t, v, i) in item.member_refs:
            out[(t, v)][i] = label
    return out


def run_mcmcda(
    dataset: Dataset,
    cfg: ModelConfig,
    n_samples: int,
    seed: int,
    summaries: list | None = None,
    base_fp_obs: int = 0,
    base_fp_density: float = 0.0,
    thin: int = 10,
) -> McmcdaResult:
    """MH over associations, initialized with everything assigned to clutter.

    ``n_samples`` counts chain states including the initialization, so
    ``n_samples=1`` returns the all-clutter configuration untouched.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if cfg.world_volume is None:
        cfg = cfg.with_world_volume(dataset.bounding_volume())
    if summaries is None:
        items = items_from_dataset(dataset, cfg)
    else:
        items = items_from_summaries(summaries, cfg)
    views_by_epoch: dict[int, list] = {}
    for vf in dataset.views():
        views_by_epoch.setdefault(vf.epoch, []).append(vf)
    system = TrackPartitionSystem(items, cfg, views_by_epoch,
                                  base_fp_obs=base_fp_obs, base_fp_density=base_fp_density)
    state = system.initial_state()
    rng = np.random.default_rng(seed)
    chain = ChainState(system=system, state=state, rng=rng, log_score=system.score(state))
    chain.snapshot_best()
    samples = [(0, chain.log_score, tuple(state.assignment))]
    trace = np.empty(n_samples)
    flags = np.zeros(n_samples, dtype=bool)
    trace[0] = chain.log_score
    flags[0] = True
    for it in range(1, n_samples):
        accepted = mh_step(chain)
        trace[it] = chain.log_score
        flags[it] = accepted
        if it % thin == 0:
            samples.append((it, chain.log_score, tuple(state.assignment)))
    return McmcdaResult(
        samples=samples,
        best_assignment=chain.best_assignment,
        best_score=chain.best_score,
        score_trace=trace,
        accept_flags=flags,
        items=items,
    )


# ---------------------------------------------------------------------------
# Two-stage pipeline
# ---------------------------------------------------------------------------

def _epoch_subdataset(dataset: Dataset, t: int) -> Dataset:
    from .model import ViewFrame as VF

    views = [VF(epoch=1, view_index=vf.view_index, region=vf.region,
                observations=vf.observations)
             for vf in dataset.epochs[t - 1]]
    return Dataset(epochs=(tuple(views),), num_types=dataset.num_types,
                   pose_dim=dataset.pose_dim)


def stage_one_summaries(dataset: Dataset, cfg: ModelConfig, max_sweeps: int = 50,
                        min_cluster_size: int = 2):
    """Per-epoch ICM clustering; returns (summaries, fixed_refs, fp_refs).

    Clusters below ``min_cluster_size`` do not enter the linking stage: they
    stay in the output as fixed singleton tracks (``fixed_refs``, a list of
    ref groups), since their score contribution is invariant under stage-3
    moves and folding them into the item set would dilute the sample budget.
    """
    summaries: list[ClusterSummary] = []
    fixed_refs: list = []
    fp_refs: list = []
    for t in range(1, dataset.num_epochs + 1):
        sub = _epoch_subdataset(dataset, t)
        if sub.num_observations() == 0:
            continue
        state = WorldState(sub, cfg)
        icm_until_convergence(state, cfg, max_sweeps=max_sweeps)
        for k, tr in state.tracks.items():
            refs = []
            n = 0
            mean_acc = 0.0
            sumq = 0.0
            fp_dens = 0.0
            for tt, entries in tr.obs_by_epoch.items():
                for (r_t, r_v, r_i), obs in entries:
                    refs.append((t, r_v, r_i))
                    n += 1
                    mean_acc = mean_acc + obs.pose_obs
                    sumq += float(obs.pose_obs @ cfg._sense_prec @ obs.pose_obs)
                    fp_dens += fp_obs_log_density(obs, cfg)
            if n < min_cluster_size:
                fixed_refs.append(tuple(sorted(refs)))
                continue
            summaries.append(ClusterSummary(
                epoch=t, type_counts=tr.type_counts.copy(), n=n, mean=mean_acc / n,
                source_track=k, sumq=sumq, member_refs=tuple(sorted(refs)),
                fp_log_density=fp_dens,
            ))
        for (tt, v), lam in state.assignments.items():
            vf = sub.view(tt, v)
            for i, a in enumerate(lam):
                if a == FP:
                    fp_refs.append((t, v, i))
    return summaries, fixed_refs, fp_refs


def two_stage(dataset: Dataset, cfg: ModelConfig, n_samples: int, seed: int,
              icm_max_sweeps: int = 50):
    """Per-epoch ICM, then track-level MCMC over the cluster summaries.

    Returns (map_state, mcmc_result, summaries); the map state is a full
    WorldState expanded back to per-observation assignments, with stage-1
    clutter frozen.
    """
    if cfg.world_volume is None:
        cfg = cfg.with_world_volume(dataset.bounding_volume())
    summaries, fixed_refs, fp_refs = stage_one_summaries(dataset, cfg,
                                                         max_sweeps=icm_max_sweeps)
    if not summaries and not fixed_refs:
        return WorldState(dataset, cfg), None, []
    fp_density = 0.0
    for (t, v, i) in fp_refs:
        fp_density += fp_obs_log_density(dataset.view(t, v).observations[i], cfg)
    if summaries:
        result = run_mcmcda(dataset, cfg, n_samples, seed, summaries=summaries,
                            base_fp_obs=len(fp_refs), base_fp_density=fp_density)
        amap = assignment_map_from_partition(result.items, result.best_assignment, dataset)
        next_label = max((lab for lab in result.best_assignment), default=0) + 1
    else:
        result = None
        amap = {(vf.epoch, vf.view_index): [FP] * len(vf.observations)
                for vf in dataset.views()}
        next_label = 1
    for refs in fixed_refs:
        label = next_label
        next_label += 1
        for (t, v, i) in refs:
            amap[(t, v)][i] = label
    state = state_from_assignments(dataset, cfg, amap)
    return state, result, summaries
