"""Approximate MAP inference by iterated conditional modes.

Each view's conditional is encoded as a square payoff matrix and solved as a
maximum-weight perfect matching; commits are guarded by an exact global-score
comparison, so the score trace is nondecreasing by construction.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import NEG_INF, InvalidInputError, ModelConfig, ViewFrame
from .association import (
    FP,
    NEW,
    CorrespondenceVector,
    ViewConditional,
    WorldState,
)

__all__ = ["PayoffMatrix", "build_payoff", "solve_assignment", "icm_until_convergence",
           "InfeasibleAssignmentError", "IcmInternalError"]

# large negative sentinel standing in for -inf inside the solver
SENTINEL = -1e18


class InfeasibleAssignmentError(ValueError):
    """A payoff row admits no finite assignment."""


class IcmInternalError(RuntimeError):
    """The guarded ascent observed a score decrease; indicates a state bug."""


@dataclass
class PayoffMatrix:
    """Square log-payoff matrix of side 2M + K.

    Rows: the K existing tracks, then M potential new tracks, then M clutter
    slots.  Columns: the M observations, then M + K missed-detection pads.
    """

    matrix: np.ndarray
    track_ids: list
    num_obs: int

    @property
    def side(self) -> int:
        return int(self.matrix.shape[0])

    def row_kind(self, r: int):
        k = len(self.track_ids)
        if r < k:
            return ("track", self.track_ids[r])
        if r < k + self.num_obs:
            return ("new", r - k)
        return ("fp", r - k - self.num_obs)


def build_payoff(view: ViewFrame, state: WorldState, cfg: ModelConfig,
                 engine: ViewConditional | None = None) -> PayoffMatrix:
    """Payoff matrix for one view against a state that excludes the view.

    Track-row observation cells carry the assignment weight, the rate factor
    and the detection factor; their miss cells carry the alive-gated miss
    probability.  New/clutter rows pad against zero-cost miss cells.
    """
    if engine is None:
        engine = ViewConditional(state, view, exact=False)
    obs_list = view.observations
    m = len(obs_list)
    # rows only for tracks inside the gate of at least one observation; a
    # gated-out alive track keeps its miss factor either way, which shifts
    # every matching's total by the same constant
    gated: set = set()
    per_obs_gate = []
    for obs in obs_list:
        ids = engine.gated_track_ids(obs)
        per_obs_gate.append(set(ids))
        gated.update(ids)
    track_ids = sorted(gated)
    k = len(track_ids)
    side = 2 * m + k
    mat = np.zeros((side, side))
    fp_prefactor = engine.fp_prefactor(0)  # frozen at view entry
    for r, tid in enumerate(track_ids):
        info = engine.track_info[tid]
        for i in range(m):
            if tid in per_obs_gate[i]:
                mat[r, i] = engine.track_obs_payoff(tid, obs_list[i])
            else:
                mat[r, i] = NEG_INF
        miss = info.log_miss if info.alive else 0.0
        mat[r, m:] = miss
    for i in range(m):
        mat[k: k + m, i] = engine.new_track_log_weight(obs_list[i])
        mat[k + m:, i] = fp_prefactor + engine.fp_log_weight(obs_list[i])
    return PayoffMatrix(matrix=mat, track_ids=track_ids, num_obs=m)


def solve_assignment(payoff: PayoffMatrix):
    """Maximum-total-payoff perfect matching.

    Returns (vector, fn_ids, total): the correspondence vector over the M
    observations (track id, NEW, or FP), the ids of tracks matched to miss
    columns, and the total payoff.  Ties broken toward the lexicographically
    smallest vector under the order FP < track ids ascending < NEW.
    """
    mat = payoff.matrix
    m = payoff.num_obs
    k = len(payoff.track_ids)
    work = np.where(np.isfinite(mat), mat, SENTINEL)
    for r in range(work.shape[0]):
        if work[r].max() <= SENTINEL:
            raise InfeasibleAssignmentError(f"payoff row {r} admits no finite assignment")
    rows, cols = linear_sum_assignment(-work)
    total = float(work[rows, cols].sum())
    if any(work[r, c] <= SENTINEL for r, c in zip(rows, cols)):
        raise InfeasibleAssignmentError("no feasible perfect matching")

    def induced(rr, cc):
        vec = [FP] * m
        fn = []
        for r, c in zip(rr, cc):
            kind = payoff.row_kind(r)
            if c < m:
                vec[c] = kind[1] if kind[0] == "track" else (NEW if kind[0] == "new" else FP)
            elif kind[0] == "track":
                fn.append(kind[1])
        return vec, sorted(fn)

    vec, fn = induced(rows, cols)
    if payoff.side > 24:
        # the refinement below costs one solve per candidate; on large views
        # the solver output (already deterministic) stands as-is
        return CorrespondenceVector(tuple(vec)), fn, total

    # representative row for candidate code c at observation i (the new/fp
    # rows are interchangeable, so the i-th one stands in without loss)
    def row_for(code, i):
        if code == FP:
            return k + m + i
        if code == NEW:
            return k + i
        return payoff.track_ids.index(code)

    # lexicographic tie-break: for each observation in order, commit the
    # smallest candidate (FP < track ids ascending < NEW) that preserves
    # the optimal total
    candidate_order = [FP] + list(payoff.track_ids) + [NEW]
    tol = 1e-9 * max(1.0, abs(total))
    forced: list = []
    for i in range(m):
        for code in candidate_order:
            if code == vec[i]:
                forced.append((row_for(code, i), i))
                break
            trial = work.copy()
            for fr, fc in forced:
                _force(trial, fr, fc)
            _force(trial, row_for(code, i), i)
            r2, c2 = linear_sum_assignment(-trial)
            t2 = float(trial[r2, c2].sum())
            if t2 <= SENTINEL / 2:
                continue
            if t2 >= total - tol:
                forced.append((row_for(code, i), i))
                vec, fn = induced(r2, c2)
                break
    return CorrespondenceVector(tuple(vec)), fn, total


def _force(mat: np.ndarray, r: int, c: int) -> None:
    keep = mat[r, c]
    mat[r, :] = SENTINEL
    mat[:, c] = SENTINEL
    mat[r, c] = keep


def _signature(lam, state: WorldState):
    """Assignment vector with ids unknown to the state mapped to NEW."""
    return tuple(a if a == FP or a in state.tracks else NEW for a in lam)


def icm_until_convergence(state: WorldState, cfg: ModelConfig, max_sweeps: int = 50,
                          dump_dir: str | None = None):
    """Coordinate ascent over views until a full sweep changes nothing.

    Returns (state, trace) where trace holds the global log score after each
    sweep.  Every commit is checked against the exact score; a proposed view
    assignment that does not improve it is rejected, so the trace is
    nondecreasing.
    """
    score = state.log_score()
    trace = [score]
    for sweep in range(1, max_sweeps + 1):
        changed = 0
        for vf in state.dataset.views():
            old_lam = state.detach_view(vf)
            engine = ViewConditional(state, vf, exact=False)
            payoff = build_payoff(vf, state, cfg, engine=engine)
            if dump_dir is not None:
                _dump_payoff(payoff, vf, dump_dir)
            try:
                vec, _, _ = solve_assignment(payoff)
            except InfeasibleAssignmentError:
                state.attach_view(vf, old_lam)
                continue
            old_sig = _signature(old_lam, state)
            new_sig = _signature(vec, state)
            if new_sig == old_sig:
                state.attach_view(vf, old_lam)
                continue
            state.attach_view(vf, vec)
            new_score = state.log_score()
            if new_score < score - 1e-9:
                # exact evaluation disagrees with the payoff surrogate: keep the old one
                state.detach_view(vf)
                state.attach_view(vf, old_lam)
                rolled_back = state.log_score()
                if rolled_back < score - 1e-6:
                    raise IcmInternalError(
                        f"score decreased after rollback at view {(vf.epoch, vf.view_index)}: "
                        f"{rolled_back} < {score}")
                score = rolled_back
            else:
                score = new_score
                changed += 1
        if trace and score < trace[-1] - 1e-6:
            raise IcmInternalError(f"sweep {sweep} decreased the score: {score} < {trace[-1]}")
        trace.append(score)
        if changed == 0:
            break
    return state, trace


def _dump_payoff(payoff: PayoffMatrix, vf: ViewFrame, dump_dir: str) -> None:
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, f"payoff_t{vf.epoch}_v{vf.view_index}.csv")
    m = payoff.num_obs
    k = len(payoff.track_ids)
    row_labels = [f"track{t}" for t in payoff.track_ids] + \
                 [f"new{j}" for j in range(m)] + [f"fp{j}" for j in range(m)]
    col_labels = [f"obs{i}" for i in range(m)] + [f"fn{j}" for j in range(m + k)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + col_labels)
        for label, row in zip(row_labels, payoff.matrix):
            writer.writerow([label] + [f"{x:.9g}" for x in row])
