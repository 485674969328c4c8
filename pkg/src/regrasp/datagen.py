"""Self-supervised grasp-trial collection.

Each trial probes the object near its fitted bounding cylinder, takes one
adjustment action (random or chosen by a trained predictor), lifts, and records
the pre-action state, the action, and the lift outcome.  Every recorded trial
is augmented into three records: the original, the post-action grip paired with
a zero action, and the post-probe released state paired with the original
action.  Episodes replay bit-identically from the collection config and the
episode id.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from regrasp.core import (
    FORCE_MAX,
    FORCE_MIN,
    MAX_ROTATION,
    MAX_TRANSLATION,
    Action,
    Dataset,
    GraspState,
    Pose,
    TrialRecord,
    ZERO_ACTION,
    clamp_action,
)
from regrasp.simworld import (
    InvalidTrialError,
    WorldState,
    apply_action,
    attempt_lift,
    builtin_library,
    fit_bounding_cylinder,
    load_library,
    observe,
    place_gripper,
    release,
    replace_object,
    spawn_scene,
)

log = logging.getLogger(__name__)

_SALT_SCENE = 151
_SALT_EPISODE = 157
_SALT_POLICY = 163

_EPISODE_ID_RE = re.compile(r"^s(-?\d+)-e(\d+)-w(\d+)$")

# Chooser maps (closed-grip world, its observation, per-trial seed) to the
# adjustment action; None means uniform random.
TrialChooser = Callable[[WorldState, GraspState, tuple[int, ...]], Action]


@dataclass(frozen=True)
class CollectConfig:
    n_trials: int = 6000
    object_set: str = "train"
    perturbation_scale: float = 0.03
    force_range: tuple[float, float] = (FORCE_MIN, FORCE_MAX)
    seed: int = 0
    policy: str = "random"
    checkpoint: str | None = None
    trials_per_episode: int = 25
    max_retries: int = 20

    def __post_init__(self) -> None:
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.perturbation_scale <= 0.0:
            raise ValueError("perturbation_scale must be positive")
        lo, hi = self.force_range
        if not (FORCE_MIN <= lo < hi <= FORCE_MAX):
            raise ValueError(f"force_range must be an interval within [{FORCE_MIN}, {FORCE_MAX}]")
        if self.policy not in ("random", "on_policy"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.trials_per_episode < 1 or self.max_retries < 1:
            raise ValueError("trials_per_episode and max_retries must be >= 1")


def resolve_object_set(name: str):
    """Builtin set name, or a path to a JSON object library."""
    library = builtin_library()
    if name in library:
        return library[name]
    try:
        return load_library(name)
    except OSError as exc:
        raise ValueError(f"unknown object set {name!r}") from exc


def make_episode_id(seed: int, episode_index: int, scene_seed: int) -> str:
    return f"s{seed}-e{episode_index:05d}-w{scene_seed}"


def parse_episode_id(episode_id: str) -> tuple[int, int, int]:
    """(collection seed, episode index, scene seed) encoded in the id."""
    m = _EPISODE_ID_RE.match(episode_id)
    if m is None:
        raise ValueError(f"malformed episode id {episode_id!r}")
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


def _scene_seed(seed: int, episode_index: int) -> int:
    return int(
        np.random.SeedSequence((seed, episode_index, _SALT_SCENE)).generate_state(1)[0]
    )


def _episode_rng(seed: int, episode_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((seed, episode_index, _SALT_EPISODE))
    )


def sample_initial_grasp(
    w: WorldState,
    rng: np.random.Generator,
    perturbation_scale: float = 0.03,
    force_range: tuple[float, float] = (FORCE_MIN, FORCE_MAX),
) -> tuple[Pose, float]:
    """Probe pose from the bounding-cylinder heuristic with a disc perturbation.

    Centre offset is uniform over a disc whose radius is the perturbation scale
    clipped to half the fitted cylinder radius; height uniform over the
    cylinder, yaw uniform, force uniform over force_range.
    """
    cyl = fit_bounding_cylinder(w)
    radius = min(perturbation_scale, 0.5 * cyl.radius)
    r = radius * math.sqrt(rng.uniform())
    theta = rng.uniform(0.0, 2.0 * math.pi)
    x = cyl.center[0] + r * math.cos(theta)
    y = cyl.center[1] + r * math.sin(theta)
    z = rng.uniform(0.0, cyl.height)
    yaw = rng.uniform(-math.pi, math.pi)
    force = rng.uniform(*force_range)
    return Pose(x, y, z, yaw), float(force)


def initialize_episode(
    w: WorldState,
    rng: np.random.Generator,
    perturbation_scale: float = 0.03,
    force_range: tuple[float, float] = (FORCE_MIN, FORCE_MAX),
) -> WorldState:
    """Move the open gripper to a probe pose without closing (policy episodes)."""
    pose, force = sample_initial_grasp(w, rng, perturbation_scale, force_range)
    return place_gripper(w, pose, force, close=False)


def random_action(
    rng: np.random.Generator,
    current_force: float,
    force_range: tuple[float, float] = (FORCE_MIN, FORCE_MAX),
) -> Action:
    a = Action(
        dx=float(rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION)),
        dy=float(rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION)),
        dz=float(rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION)),
        dyaw=float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)),
        dforce=float(rng.uniform(*force_range) - current_force),
    )
    return clamp_action(a, current_force)


def run_trial(
    w: WorldState,
    cfg: CollectConfig,
    rng: np.random.Generator,
    episode_id: str,
    trial_seed: tuple[int, ...],
    chooser: TrialChooser | None = None,
) -> tuple[TrialRecord | None, WorldState]:
    """One probe/act/lift trial.  Probes that fail to grip (nothing between
    the fingers, or a jaw jammed by a protruding footprint) are resampled up
    to max_retries; persistent failure skips the trial (None record).  The
    post-action close is never resampled: a bad adjustment that loses the
    object is a legitimate negative example."""
    for _ in range(cfg.max_retries):
        pose, force = sample_initial_grasp(w, rng, cfg.perturbation_scale, cfg.force_range)
        try:
            w0 = place_gripper(w, pose, force, close=True)
        except InvalidTrialError:
            continue
        if not w0.in_contact:
            continue
        s0 = observe(w0)
        released = observe(release(w0))
        if chooser is None:
            a = random_action(rng, w0.commanded_force, cfg.force_range)
        else:
            a = clamp_action(chooser(w0, s0, trial_seed), w0.commanded_force)
        w1 = apply_action(w0, a)
        s1 = observe(w1)
        outcome = attempt_lift(w1)
        record = TrialRecord(
            state=s0,
            action=a,
            outcome=outcome,
            object_id=w.object.name,
            episode_id=episode_id,
            grip_snapshot=s1,
            release_snapshot=released,
        )
        if outcome:
            w_next = replace_object(release(w1), rng)
        else:
            w_next = release(w1)
        return record, w_next
    return None, w


def augment(records: Sequence[TrialRecord]) -> list[TrialRecord]:
    """Expand each trial into three records.

    Per original: (i) the post-action grip paired with a zero action and
    (ii) the post-probe released state paired with the original action, both
    inheriting the outcome.  Records missing snapshots pass through unchanged
    with a warning.  Output keeps episode locality: original, (i), (ii).
    """
    out: list[TrialRecord] = []
    for rec in records:
        out.append(rec)
        if rec.grip_snapshot is None or rec.release_snapshot is None:
            log.warning("record in %s lacks snapshots; not augmented", rec.episode_id)
            continue
        out.append(
            TrialRecord(
                state=rec.grip_snapshot,
                action=ZERO_ACTION,
                outcome=rec.outcome,
                object_id=rec.object_id,
                episode_id=rec.episode_id,
            )
        )
        out.append(
            TrialRecord(
                state=rec.release_snapshot,
                action=rec.action,
                outcome=rec.outcome,
                object_id=rec.object_id,
                episode_id=rec.episode_id,
            )
        )
    return out


def _policy_chooser(cfg: CollectConfig, bundle) -> TrialChooser:
    from regrasp.policy import SearchConfig, select_action

    search = SearchConfig(seed=cfg.seed)

    def choose(w: WorldState, s: GraspState, trial_seed: tuple[int, ...]) -> Action:
        a, _ = select_action(bundle, s, search, seed=trial_seed)
        return a

    return choose


def collect(
    cfg: CollectConfig,
    objects: Sequence | None = None,
    bundle=None,
) -> tuple[Dataset, dict]:
    """Run cfg.n_trials trials and return the 3x-augmented dataset plus a manifest.

    Trials are grouped into fixed-length episodes; each episode spawns a fresh
    scene whose seed is encoded in the episode id for replay.  For on-policy
    collection pass a loaded model bundle (or set cfg.checkpoint and let the
    caller load it).
    """
    if objects is None:
        objects = resolve_object_set(cfg.object_set)
    objects = list(objects)
    if not objects:
        raise ValueError("empty object set")
    chooser: TrialChooser | None = None
    if cfg.policy == "on_policy":
        if bundle is None:
            if cfg.checkpoint is None:
                raise ValueError("on_policy collection needs a model bundle or checkpoint")
            from regrasp.model import load_model

            bundle = load_model(cfg.checkpoint)
        chooser = _policy_chooser(cfg, bundle)

    records: list[TrialRecord] = []
    episode_index = 0
    skipped = 0
    while len(records) < cfg.n_trials:
        scene_seed = _scene_seed(cfg.seed, episode_index)
        spec = objects[episode_index % len(objects)]
        w = spawn_scene(spec, scene_seed)
        rng = _episode_rng(cfg.seed, episode_index)
        episode_id = make_episode_id(cfg.seed, episode_index, scene_seed)
        for t in range(cfg.trials_per_episode):
            if len(records) >= cfg.n_trials:
                break
            rec, w = run_trial(
                w, cfg, rng, episode_id, (cfg.seed, episode_index, t, _SALT_POLICY), chooser
            )
            if rec is None:
                skipped += 1
                log.warning("episode %s trial %d skipped after retries", episode_id, t)
                if skipped > cfg.n_trials:
                    raise RuntimeError("collection stalled: too many skipped trials")
                continue
            records.append(rec)
        episode_index += 1

    augmented = augment(records)
    registry = sorted({r.object_id for r in augmented})
    dataset = Dataset(records=tuple(augmented), registry=tuple(registry))
    manifest = {
        "schema_version": 1,
        "n_trials": len(records),
        "n_records": len(augmented),
        "n_skipped": skipped,
        "n_episodes": episode_index,
        "positive_rate": float(np.mean([r.outcome for r in augmented])) if augmented else 0.0,
        "objects": registry,
        "object_set": cfg.object_set,
        "seed": cfg.seed,
        "policy": cfg.policy,
        "checkpoint": cfg.checkpoint,
        "trials_per_episode": cfg.trials_per_episode,
        "perturbation_scale": cfg.perturbation_scale,
        "force_range": list(cfg.force_range),
    }
    return dataset, manifest


def replay_episode(
    cfg: CollectConfig,
    episode_id: str,
    objects: Sequence | None = None,
    bundle=None,
) -> list[TrialRecord]:
    """Regenerate one episode's primary (pre-augmentation) records.

    The config must match the original collection run; the scene seed in the
    id is cross-checked against the one derived from (seed, episode index).
    """
    seed, episode_index, scene_seed = parse_episode_id(episode_id)
    if seed != cfg.seed:
        raise ValueError(f"episode {episode_id!r} was collected with seed {seed}, not {cfg.seed}")
    expected = _scene_seed(cfg.seed, episode_index)
    if scene_seed != expected:
        raise ValueError(f"scene seed mismatch for {episode_id!r}: derived {expected}")
    if objects is None:
        objects = resolve_object_set(cfg.object_set)
    objects = list(objects)
    chooser: TrialChooser | None = None
    if cfg.policy == "on_policy":
        if bundle is None:
            if cfg.checkpoint is None:
                raise ValueError("on_policy replay needs a model bundle or checkpoint")
            from regrasp.model import load_model

            bundle = load_model(cfg.checkpoint)
        chooser = _policy_chooser(cfg, bundle)
    spec = objects[episode_index % len(objects)]
    w = spawn_scene(spec, scene_seed)
    rng = _episode_rng(cfg.seed, episode_index)
    out: list[TrialRecord] = []
    for t in range(cfg.trials_per_episode):
        rec, w = run_trial(
            w, cfg, rng, episode_id, (cfg.seed, episode_index, t, _SALT_POLICY), chooser
        )
        if rec is not None:
            out.append(rec)
    return out
