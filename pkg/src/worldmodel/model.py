"""Core domain types and generative densities.

Everything downstream (Gibbs, ICM, MCMC, scoring) consumes the small set of
log-densities defined here: the observation noise model, the per-epoch
random-walk transition, the geometric survival weight, and the clutter
(false-positive) density.  All probability computation is done in log domain.

Object types are 1-based integers (``1..A``) to match the on-disk formats;
numpy arrays (type prior, confusion matrix rows) are indexed with ``a - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "ModelConfig",
    "Observation",
    "Region",
    "ViewFrame",
    "Dataset",
    "InvalidInputError",
    "obs_log_density",
    "fp_obs_log_density",
    "transition_log_density",
    "survival_prob",
    "mvn_log_density",
    "resolve_world_volume",
]

NEG_INF = float("-inf")


class InvalidInputError(ValueError):
    """Raised when an operation receives structurally invalid input."""


def _as_matrix(x, name: str) -> np.ndarray:
    m = np.asarray(x, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"{name} must be a square matrix, got shape {m.shape}")
    return m


def _check_spd(m: np.ndarray, name: str) -> None:
    if not np.allclose(m, m.T, atol=1e-10):
        raise InvalidInputError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(m)
    if eig.min() <= 0:
        raise InvalidInputError(f"{name} must be positive definite (min eigenvalue {eig.min():g})")


def _per_type(value, num_types: int, name: str) -> dict:
    """Broadcast a scalar/matrix to a per-type map, or validate a given map."""
    if isinstance(value, Mapping):
        out = {int(k): value[k] for k in value}
        missing = set(range(1, num_types + 1)) - set(out)
        if missing:
            raise InvalidInputError(f"{name} missing entries for types {sorted(missing)}")
        return out
    return {a: value for a in range(1, num_types + 1)}


@dataclass(frozen=True)
class ModelConfig:
    """Fixed hyperparameters of the world model.

    Attributes:
        alpha: concentration of the nonparametric cluster prior (> 0).
        type_prior: length-A probability vector over object types.
        confusion: A x A row-stochastic matrix; ``confusion[a-1, y-1]`` is the
            probability of observing type ``y`` for a true object of type ``a``.
        sense_cov: d x d SPD sensing-noise covariance.
        trans_cov: per-type d x d SPD random-walk covariance (map type -> matrix).
        survival: per-type epoch-to-epoch survival probability in [0, 1].
        p_fn: per-type missed-detection probability in [0, 1].
        p_fp: false-positive rate in [0, 1].
        world_volume: volume of the explored world (pose-space units^d); may be
            None until resolved against a dataset (see ``resolve_world_volume``).
        pose_dim: dimensionality d of the continuous pose.
    """

    alpha: float
    type_prior: np.ndarray
    confusion: np.ndarray
    sense_cov: np.ndarray
    trans_cov: Mapping[int, np.ndarray]
    survival: Mapping[int, float]
    p_fn: Mapping[int, float]
    p_fp: float
    world_volume: float | None
    pose_dim: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise InvalidInputError("alpha must be positive")
        if self.pose_dim < 1:
            raise InvalidInputError("pose_dim must be a positive integer")
        tp = np.asarray(self.type_prior, dtype=float)
        if abs(tp.sum() - 1.0) > 1e-12 or (tp < 0).any():
            raise InvalidInputError("type_prior must be a probability vector (sum 1 within 1e-12)")
        conf = _as_matrix(self.confusion, "confusion")
        if conf.shape[0] != tp.shape[0]:
            raise InvalidInputError("confusion and type_prior disagree on the number of types")
        if np.abs(conf.sum(axis=1) - 1.0).max() > 1e-12 or (conf < 0).any():
            raise InvalidInputError("every confusion row must sum to 1 within 1e-12")
        sc = _as_matrix(self.sense_cov, "sense_cov")
        if sc.shape[0] != self.pose_dim:
            raise InvalidInputError("sense_cov dimension does not match pose_dim")
        _check_spd(sc, "sense_cov")
        A = tp.shape[0]
        tc = _per_type(self.trans_cov, A, "trans_cov")
        for a, q in tc.items():
            q = _as_matrix(q, f"trans_cov[{a}]")
            if q.shape[0] != self.pose_dim:
                raise InvalidInputError(f"trans_cov[{a}] dimension does not match pose_dim")
            _check_spd(q, f"trans_cov[{a}]")
            tc[a] = q
        sv = _per_type(self.survival, A, "survival")
        fn = _per_type(self.p_fn, A, "p_fn")
        for name, mp in (("survival", sv), ("p_fn", fn)):
            for a, v in mp.items():
                if not 0.0 <= float(v) <= 1.0:
                    raise InvalidInputError(f"{name}[{a}]={v} outside [0, 1]")
        if not 0.0 <= self.p_fp <= 1.0:
            raise InvalidInputError("p_fp must lie in [0, 1]")
        if self.world_volume is not None and self.world_volume <= 0:
            raise InvalidInputError("world_volume must be positive")
        object.__setattr__(self, "type_prior", tp)
        object.__setattr__(self, "confusion", conf)
        object.__setattr__(self, "sense_cov", sc)
        object.__setattr__(self, "trans_cov", tc)
        object.__setattr__(self, "survival", {a: float(v) for a, v in sv.items()})
        object.__setattr__(self, "p_fn", {a: float(v) for a, v in fn.items()})
        # Cached derived quantities used in inner loops.
        object.__setattr__(self, "_log_type_prior", _safe_log(tp))
        object.__setattr__(self, "_log_confusion", _safe_log(conf))
        object.__setattr__(self, "_survival_arr", np.array([sv[a] for a in range(1, A + 1)]))
        object.__setattr__(self, "_p_fn_arr", np.array([fn[a] for a in range(1, A + 1)]))
        object.__setattr__(self, "_sense_prec", np.linalg.inv(sc))

    @property
    def num_types(self) -> int:
        return int(self.type_prior.shape[0])

    @property
    def log_world_volume(self) -> float:
        if self.world_volume is None:
            raise InvalidInputError("world_volume is unset; resolve it against a dataset first")
        return float(np.log(self.world_volume))

    def with_world_volume(self, volume: float) -> "ModelConfig":
        return ModelConfig(
            alpha=self.alpha, type_prior=self.type_prior, confusion=self.confusion,
            sense_cov=self.sense_cov, trans_cov=self.trans_cov, survival=self.survival,
            p_fn=self.p_fn, p_fp=self.p_fp, world_volume=volume, pose_dim=self.pose_dim,
        )


def _safe_log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


@dataclass(frozen=True)
class Observation:
    """A single detection: discrete type plus continuous pose."""

    type_obs: int
    pose_obs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pose_obs", np.asarray(self.pose_obs, dtype=float))
        if self.pose_obs.ndim != 1:
            raise InvalidInputError("pose_obs must be a flat vector")
        if self.type_obs < 1:
            raise InvalidInputError("type ids are 1-based")


@dataclass(frozen=True)
class Region:
    """Axis-aligned box (the visible region of a view)."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidInputError("region min/max must be vectors of equal length")
        if (lo > hi).any():
            raise InvalidInputError("region must satisfy min <= max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.max - self.min))

    def contains(self, point: np.ndarray) -> bool:
        p = np.asarray(point, dtype=float)
        return bool((p >= self.min).all() and (p <= self.max).all())


@dataclass(frozen=True)
class ViewFrame:
    """One sensing event: a bounded region and the detections made in it."""

    epoch: int
    view_index: int
    region: Region
    observations: tuple

    def __post_init__(self):
        if self.epoch < 1 or self.view_index < 1:
            raise InvalidInputError("epoch and view indices are 1-based")
        object.__setattr__(self, "observations", tuple(self.observations))


@dataclass(frozen=True)
class Dataset:
    """Ordered epochs of views; the immutable input to all inference."""

    epochs: tuple
    num_types: int
    pose_dim: int

    def __post_init__(self):
        epochs = tuple(tuple(views) for views in self.epochs)
        object.__setattr__(self, "epochs", epochs)
        for t, views in enumerate(epochs, start=1):
            seen = set()
            for vf in views:
                if vf.epoch != t:
                    raise InvalidInputError(f"view claims epoch {vf.epoch} but sits in block {t}")
                if vf.view_index in seen:
                    raise InvalidInputError(f"duplicate view index {vf.view_index} in epoch {t}")
                seen.add(vf.view_index)
                for obs in vf.observations:
                    if obs.pose_obs.shape[0] != self.pose_dim:
                        raise InvalidInputError("observation pose dimension mismatch")
                    if obs.type_obs > self.num_types:
                        raise InvalidInputError(f"type id {obs.type_obs} exceeds num_types")

    @property
    def num_epochs(self) -> int:
        return len(self.epochs)

    def views(self) -> Iterator[ViewFrame]:
        for views in self.epochs:
            yield from views

    def view(self, epoch: int, view_index: int) -> ViewFrame:
        for vf in self.epochs[epoch - 1]:
            if vf.view_index == view_index:
                return vf
        raise KeyError((epoch, view_index))

    def num_observations(self) -> int:
        return sum(len(vf.observations) for vf in self.views())

    def bounding_volume(self) -> float:
        """Volume of the bounding box of all view regions."""
        mins = np.min([vf.region.min for vf in self.views()], axis=0)
        maxs = np.max([vf.region.max for vf in self.views()], axis=0)
        return float(np.prod(maxs - mins))


def resolve_world_volume(cfg: ModelConfig, dataset: Dataset) -> ModelConfig:
    """Fill in ``world_volume`` from the dataset's region bounding box if unset."""
    if cfg.world_volume is not None:
        return cfg
    return cfg.with_world_volume(dataset.bounding_volume())


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def mvn_log_density(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log-density of a multivariate normal.

    Closed forms for d <= 2 (hot path), Cholesky otherwise.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    d = x.shape[0]
    if mean.shape[0] != d or cov.shape != (d, d):
        raise InvalidInputError("dimension mismatch in Gaussian evaluation")
    if d == 1:
        v = cov[0, 0]
        if v <= 0:
            raise np.linalg.LinAlgError("non-positive variance")
        r = x[0] - mean[0]
        return float(-0.5 * (_LOG_2PI + np.log(v) + r * r / v))
    if d == 2:
        a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
        det = a * c - b * b
        if det <= 0 or a <= 0:
            raise np.linalg.LinAlgError("covariance not positive definite")
        r0 = x[0] - mean[0]
        r1 = x[1] - mean[1]
        quad = (c * r0 * r0 - 2.0 * b * r0 * r1 + a * r1 * r1) / det
        return float(-0.5 * (2.0 * _LOG_2PI + np.log(det) + quad))
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, x - mean)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (d * _LOG_2PI + logdet + z @ z))


def obs_log_density(obs: Observation, attr: int, pose: np.ndarray, cfg: ModelConfig) -> float:
    """log p(observation | object of type ``attr`` at ``pose``).

    Discrete part is the confusion-matrix entry; continuous part is Gaussian
    sensing noise around the true pose.  Returns -inf when the confusion entry
    is exactly zero.
    """
    if not 1 <= attr <= cfg.num_types:
        raise InvalidInputError(f"type id {attr} outside [1, {cfg.num_types}]")
    pose = np.asarray(pose, dtype=float)
    if pose.shape[0] != cfg.pose_dim or obs.pose_obs.shape[0] != cfg.pose_dim:
        raise InvalidInputError("pose dimension mismatch")
    log_conf = cfg._log_confusion[attr - 1, obs.type_obs - 1]
    if log_conf == NEG_INF:
        return NEG_INF
    return float(log_conf + mvn_log_density(obs.pose_obs, pose, cfg.sense_cov))


def fp_obs_log_density(obs: Observation, cfg: ModelConfig) -> float:
    """log-density of a clutter observation.

    Type is drawn from the type-marginal of the confusion model; pose is
    uniform over the explored world volume.
    """
    if obs.pose_obs.shape[0] != cfg.pose_dim:
        raise InvalidInputError("pose dimension mismatch")
    type_marg = float(cfg.type_prior @ cfg.confusion[:, obs.type_obs - 1])
    if type_marg == 0.0:
        return NEG_INF
    return float(np.log(type_marg) - cfg.log_world_volume)


def transition_log_density(
    attr: int, pose_to: np.ndarray, pose_from: np.ndarray, dt: int, cfg: ModelConfig
) -> float:
    """log-density of the pose random walk over a gap of ``dt`` epochs."""
    if dt < 1:
        raise InvalidInputError("dt must be >= 1")
    if not 1 <= attr <= cfg.num_types:
        raise InvalidInputError(f"type id {attr} outside [1, {cfg.num_types}]")
    q = cfg.trans_cov[attr]
    return mvn_log_density(np.asarray(pose_to, float), np.asarray(pose_from, float), dt * q)


def survival_prob(attr: int, dt: int, cfg: ModelConfig) -> float:
    """Probability that an object of type ``attr`` survives ``dt`` epoch steps."""
    if dt < 1:
        raise InvalidInputError("dt must be >= 1")
    return float(cfg.survival[attr] ** dt)
