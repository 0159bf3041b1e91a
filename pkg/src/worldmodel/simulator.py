"""Ground-truth world simulation and a generative forward sampler.

The simulator produces semi-static worlds: objects with staggered lifetimes
random-walking (directly, or through a persistent velocity) between epochs,
observed through a confusion matrix, Gaussian location noise, missed
detections, and Poisson clutter.  The forward sampler draws synthetic
assignments straight from the clustering prior and is used as an inference
oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import Dataset, ModelConfig, Observation, Region, ViewFrame

__all__ = [
    "SimConfig",
    "ObjectTruth",
    "GroundTruth",
    "simulate",
    "generative_ddpmm_sample",
    "sim_default",
    "robot_style",
    "default_model_config",
    "confusion_matrix",
    "PRESETS",
]


@dataclass(frozen=True)
class SimConfig:
    """Configuration of one simulated world."""

    seed: int
    domain_min: tuple = (0.0, 0.0)
    domain_max: tuple = (100.0, 100.0)
    num_epochs: int = 10
    views_per_epoch: int = 5
    region_policy: str = "full"            # "full" or "random" sub-boxes
    fp_rate: float = 5.0                   # Poisson clutter mean per view
    p_miss: float = 0.1
    num_types: int = 4
    p_correct_type: float = 0.6            # off-diagonal mass spread uniformly
    location_noise_sd: float = 1.0
    dynamics: str = "velocity"             # "velocity" or "location"
    velocity_noise_sd: float = 5.0
    step_sd: float = 0.1
    survival: float = 0.9
    num_objects: int = 5

    def __post_init__(self):
        for p in (self.p_miss, self.p_correct_type, self.survival):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be nonnegative")
        if self.dynamics not in ("velocity", "location"):
            raise ValueError("dynamics must be 'velocity' or 'location'")
        if self.region_policy not in ("full", "random"):
            raise ValueError("region_policy must be 'full' or 'random'")

    @property
    def pose_dim(self) -> int:
        return len(self.domain_min)


def sim_default(seed: int) -> SimConfig:
    return SimConfig(seed=seed)


def robot_style(seed: int) -> SimConfig:
    return SimConfig(
        seed=seed,
        domain_min=(0.0, 0.0), domain_max=(1.2, 0.6),
        num_epochs=6, views_per_epoch=3,
        fp_rate=0.1, p_miss=0.1,
        num_types=4, p_correct_type=0.6,
        location_noise_sd=0.03,
        dynamics="location", step_sd=0.1,
        survival=0.5, num_objects=8,
    )


PRESETS = {"sim-default": sim_default, "robot-style": robot_style}


def confusion_matrix(num_types: int, p_correct: float) -> np.ndarray:
    if num_types == 1:
        return np.ones((1, 1))
    off = (1.0 - p_correct) / (num_types - 1)
    m = np.full((num_types, num_types), off)
    np.fill_diagonal(m, p_correct)
    return m


def default_model_config(sim: SimConfig, alpha: float = 30.0,
                         p_fp: float = 0.003, p_fn: float = 0.6,
                         trans_sd: float | None = None) -> ModelConfig:
    """Inference model matched to a simulator configuration.

    The velocity-dynamics mismatch is intentional: inference always uses a
    location random walk, so ``trans_sd`` should roughly cover the typical
    per-epoch displacement.

    The concentration, clutter rate and miss rate are calibrated jointly, not
    copied from the simulator: single-view cluster proposals are viable only
    while alpha (1 - p_fp) stays above p_fp times the clutter count, and a
    soft miss prior keeps a track's undetected sibling views from crushing
    the proposal before a second observation can join it.
    """
    d = sim.pose_dim
    if trans_sd is None:
        if sim.dynamics == "velocity":
            # displacement per epoch is the integrated velocity; cover a few
            # epochs of accumulated drift
            trans_sd = 3.0 * sim.velocity_noise_sd
        else:
            trans_sd = max(3.0 * sim.step_sd, 1e-3)
    volume = float(np.prod(np.asarray(sim.domain_max) - np.asarray(sim.domain_min)))
    return ModelConfig(
        alpha=alpha,
        type_prior=np.full(sim.num_types, 1.0 / sim.num_types),
        confusion=confusion_matrix(sim.num_types, sim.p_correct_type),
        sense_cov=sim.location_noise_sd ** 2 * np.eye(d),
        trans_cov=trans_sd ** 2 * np.eye(d),
        survival=sim.survival,
        p_fn=p_fn,
        p_fp=p_fp,
        world_volume=volume,
        pose_dim=d,
    )


@dataclass
class ObjectTruth:
    id: int
    attr: int
    birth: int
    death: int
    poses: dict          # epoch -> pose
    velocities: dict = field(default_factory=dict)


@dataclass
class GroundTruth:
    objects: list
    sources: dict        # (epoch, view) -> tuple of source object ids (0 = clutter)

    def object_map(self) -> dict:
        return {o.id: o for o in self.objects}


def _sample_lifetime(rng: np.random.Generator, T: int, survival: float,
                     force_early: bool) -> tuple[int, int]:
    birth = 1 if force_early else int(rng.integers(1, T + 1))
    death = birth
    while death < T and rng.random() < survival:
        death += 1
    return birth, death


def simulate(sim: SimConfig) -> tuple[Dataset, GroundTruth]:
    """Generate a dataset and its ground truth; deterministic given the seed."""
    rng = np.random.default_rng(sim.seed)
    d = sim.pose_dim
    lo = np.asarray(sim.domain_min, dtype=float)
    hi = np.asarray(sim.domain_max, dtype=float)
    conf = confusion_matrix(sim.num_types, sim.p_correct_type)
    type_marginal = conf.mean(axis=0)  # uniform prior over true types

    objects = []
    for oid in range(1, sim.num_objects + 1):
        birth, death = _sample_lifetime(rng, sim.num_epochs, sim.survival,
                                        force_early=(oid % 2 == 1))
        attr = int(rng.integers(1, sim.num_types + 1))
        pose = rng.uniform(lo, hi)
        poses = {birth: pose.copy()}
        velocities = {}
        if sim.dynamics == "velocity":
            vel = rng.normal(0.0, sim.velocity_noise_sd, size=d)
            velocities[birth] = vel.copy()
        for t in range(birth + 1, death + 1):
            if sim.dynamics == "velocity":
                vel = vel + rng.normal(0.0, sim.velocity_noise_sd, size=d)
                pose = pose + vel
                velocities[t] = vel.copy()
            else:
                pose = pose + rng.normal(0.0, sim.step_sd, size=d)
            poses[t] = pose.copy()
        objects.append(ObjectTruth(id=oid, attr=attr, birth=birth, death=death,
                                   poses=poses, velocities=velocities))

    epochs = []
    sources = {}
    for t in range(1, sim.num_epochs + 1):
        views = []
        for v in range(1, sim.views_per_epoch + 1):
            if sim.region_policy == "full":
                region = Region(min=lo, max=hi)
            else:
                a = rng.uniform(lo, hi)
                b = rng.uniform(lo, hi)
                region = Region(min=np.minimum(a, b), max=np.maximum(a, b))
            emitted = []  # (source id, Observation)
            for obj in objects:
                if not (obj.birth <= t <= obj.death):
                    continue
                pose = obj.poses[t]
                if not region.contains(pose):
                    continue
                if rng.random() < sim.p_miss:
                    continue
                y_type = int(rng.choice(sim.num_types, p=conf[obj.attr - 1])) + 1
                y_pose = pose + rng.normal(0.0, sim.location_noise_sd, size=d)
                emitted.append((obj.id, Observation(type_obs=y_type, pose_obs=y_pose)))
            n_fp = int(rng.poisson(sim.fp_rate))
            for _ in range(n_fp):
                y_type = int(rng.choice(sim.num_types, p=type_marginal / type_marginal.sum())) + 1
                y_pose = rng.uniform(region.min, region.max)
                emitted.append((0, Observation(type_obs=y_type, pose_obs=y_pose)))
            order = rng.permutation(len(emitted))
            emitted = [emitted[i] for i in order]
            views.append(ViewFrame(epoch=t, view_index=v, region=region,
                                   observations=tuple(o for _, o in emitted)))
            sources[(t, v)] = tuple(src for src, _ in emitted)
        epochs.append(tuple(views))
    dataset = Dataset(epochs=tuple(epochs), num_types=sim.num_types, pose_dim=d)
    return dataset, GroundTruth(objects=objects, sources=sources)


# ---------------------------------------------------------------------------
# Generative forward sampler (inference oracle)
# ---------------------------------------------------------------------------

def generative_ddpmm_sample(
    cfg: ModelConfig,
    T: int,
    obs_per_epoch: int,
    seed: int,
    domain: Region | None = None,
):
    """Draw assignments and observations from the clustering prior itself.

    New clusters appear with weight alpha (pose uniform over the domain),
    instantiated clusters with their accumulated counts, and dormant clusters
    with survival-discounted counts and a dispersed transitioned pose.
    Returns (assignments, clusters, observations): per-epoch assignment lists,
    the cluster parameter record, and per-epoch observation lists.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    d = cfg.pose_dim
    if domain is None:
        side = (cfg.world_volume or 1.0) ** (1.0 / d)
        domain = Region(min=np.zeros(d), max=np.full(d, side))
    clusters: dict[int, dict] = {}  # id -> {"attr", "poses": {t: pose}, "count"}
    assignments = []
    observations = []
    sense_chol = np.linalg.cholesky(cfg.sense_cov)
    next_id = 1
    for t in range(1, T + 1):
        assign_t = []
        obs_t = []
        for _ in range(obs_per_epoch):
            cand_ids = [0]  # 0 stands for "new cluster"
            weights = [cfg.alpha]
            for k, cl in clusters.items():
                last = max(cl["poses"])
                if last == t:
                    cand_ids.append(k)
                    weights.append(cl["count"])
                else:
                    gap = t - last
                    q = cfg.survival[cl["attr"]] ** gap
                    if q > 0:
                        cand_ids.append(k)
                        weights.append(q * cl["count"])
            w = np.asarray(weights)
            pick = int(rng.choice(len(cand_ids), p=w / w.sum()))
            k = cand_ids[pick]
            if k == 0:
                k = next_id
                next_id += 1
                attr = int(rng.choice(cfg.num_types, p=cfg.type_prior)) + 1
                pose = rng.uniform(domain.min, domain.max)
                clusters[k] = {"attr": attr, "poses": {t: pose}, "count": 0}
            else:
                cl = clusters[k]
                last = max(cl["poses"])
                if last < t:
                    gap = t - last
                    q_cov = gap * cfg.trans_cov[cl["attr"]]
                    pose = rng.multivariate_normal(cl["poses"][last], q_cov)
                    cl["poses"][t] = pose
            cl = clusters[k]
            cl["count"] += 1
            attr = cl["attr"]
            y_type = int(rng.choice(cfg.num_types, p=cfg.confusion[attr - 1])) + 1
            y_pose = cl["poses"][t] + sense_chol @ rng.standard_normal(d)
            assign_t.append(k)
            obs_t.append(Observation(type_obs=y_type, pose_obs=y_pose))
        assignments.append(assign_t)
        observations.append(obs_t)
    return assignments, clusters, observations
