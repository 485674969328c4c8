"""Closed-loop regrasp control: stochastic action search over the learned predictor.

select_action maximizes predicted success over a sampled candidate set (uniform
candidates plus a pure force sweep); the min-force variant minimizes resulting
force among candidates clearing the probability threshold, falling back to the
plain argmax when none qualifies.  Episodes loop select/apply until the chosen
candidate's predicted probability clears the lift threshold, then lift; a
bounded number of regrasps forces a terminal lift.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from regrasp.core import (
    FORCE_MAX,
    FORCE_MIN,
    MAX_ROTATION,
    MAX_TRANSLATION,
    Action,
    GraspState,
    Pose,
    clamp_action,
)
from regrasp.simworld import (
    InvalidTrialError,
    WorldState,
    apply_action,
    attempt_lift,
    fit_bounding_cylinder,
    observe,
    place_gripper,
)

_SALT_CANDIDATES = 131


class Predictor(Protocol):
    """Anything scoring candidate actions against one observed state."""

    def predict_batch(self, state: GraspState, actions: Sequence[Action]) -> np.ndarray: ...


@dataclass(frozen=True)
class SearchConfig:
    n_random: int = 4900
    n_force_sweep: int = 100
    lift_threshold: float = 0.9
    max_regrasps: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_random < 0 or self.n_force_sweep < 0:
            raise ValueError("candidate counts must be >= 0")
        if self.n_random + self.n_force_sweep < 1:
            raise ValueError("need at least one candidate")
        if not (0.0 <= self.lift_threshold < 1.0):
            raise ValueError("lift_threshold must lie in [0, 1)")
        if self.max_regrasps < 1:
            raise ValueError("max_regrasps must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    """One regrasp step: the action (None for absolute placements), its predicted
    probability (None for non-predictive policies), the resulting commanded force."""

    action: Action | None
    probability: float | None
    force: float


@dataclass(frozen=True)
class RegraspResult:
    episode_id: str
    method: str
    object_id: str
    world_seed: int
    init_seed: int
    policy_seed: int
    steps: tuple[StepRecord, ...]
    outcome: int | None
    aborted: bool = False

    def __post_init__(self) -> None:
        if self.aborted and self.outcome is not None:
            raise ValueError("aborted episodes carry no outcome")
        if not self.aborted and self.outcome not in (0, 1):
            raise ValueError("completed episodes need a binary outcome")

    @property
    def actions(self) -> list[Action | None]:
        return [s.action for s in self.steps]

    @property
    def forces(self) -> list[float]:
        return [s.force for s in self.steps]

    @property
    def final_force(self) -> float | None:
        return self.steps[-1].force if self.steps else None

    def to_obj(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "method": self.method,
            "object_id": self.object_id,
            "world_seed": self.world_seed,
            "init_seed": self.init_seed,
            "policy_seed": self.policy_seed,
            "steps": [
                {
                    "action": list(s.action.as_tuple()) if s.action is not None else None,
                    "probability": s.probability,
                    "force": s.force,
                }
                for s in self.steps
            ],
            "outcome": self.outcome,
            "aborted": self.aborted,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "RegraspResult":
        steps = tuple(
            StepRecord(
                action=Action(*s["action"]) if s["action"] is not None else None,
                probability=s["probability"],
                force=s["force"],
            )
            for s in obj["steps"]
        )
        return cls(
            episode_id=obj["episode_id"],
            method=obj["method"],
            object_id=obj["object_id"],
            world_seed=obj["world_seed"],
            init_seed=obj["init_seed"],
            policy_seed=obj["policy_seed"],
            steps=steps,
            outcome=obj["outcome"],
            aborted=obj["aborted"],
        )


def save_traces(path: str | Path, results: Sequence[RegraspResult]) -> None:
    with Path(path).open("w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_obj(), sort_keys=True, separators=(",", ":")) + "\n")


def load_traces(path: str | Path) -> list[RegraspResult]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(RegraspResult.from_obj(json.loads(line)))
    return out


# --- candidate sampling ------------------------------------------------------


def sample_candidates(
    current_force: float, cfg: SearchConfig, seed: int | tuple[int, ...] | None = None
) -> list[Action]:
    """n_random uniform legal actions plus a zero-motion force sweep over [4, 25] N."""
    entropy = cfg.seed if seed is None else seed
    if isinstance(entropy, int):
        entropy = (entropy,)
    rng = np.random.default_rng(np.random.SeedSequence((*entropy, _SALT_CANDIDATES)))
    out: list[Action] = []
    if cfg.n_random:
        t = rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION, size=(cfg.n_random, 3))
        yaw = rng.uniform(-MAX_ROTATION, MAX_ROTATION, size=cfg.n_random)
        force = rng.uniform(FORCE_MIN, FORCE_MAX, size=cfg.n_random)
        for i in range(cfg.n_random):
            out.append(
                Action(
                    dx=float(t[i, 0]),
                    dy=float(t[i, 1]),
                    dz=float(t[i, 2]),
                    dyaw=float(yaw[i]),
                    dforce=float(force[i] - current_force),
                )
            )
    if cfg.n_force_sweep:
        for f in np.linspace(FORCE_MIN, FORCE_MAX, cfg.n_force_sweep):
            out.append(Action(0.0, 0.0, 0.0, 0.0, float(f - current_force)))
    return out


def score_candidates(
    predictor: Predictor, state: GraspState, candidates: Sequence[Action]
) -> np.ndarray:
    return np.asarray(predictor.predict_batch(state, candidates), dtype=float)


def select_action(
    predictor: Predictor,
    state: GraspState,
    cfg: SearchConfig,
    seed: int | tuple[int, ...] | None = None,
) -> tuple[Action, float]:
    """Candidate with the highest predicted success; first maximizer wins ties."""
    candidates = sample_candidates(state.force, cfg, seed)
    probs = score_candidates(predictor, state, candidates)
    idx = int(np.argmax(probs))
    return candidates[idx], float(probs[idx])


def pick_min_force(
    candidates: Sequence[Action],
    probs: np.ndarray,
    current_force: float,
    threshold: float,
) -> int | None:
    """Index of the minimum-resulting-force candidate with p >= threshold.

    Force ties break toward higher probability, then sampling order.  None when
    no candidate qualifies.
    """
    probs = np.asarray(probs, dtype=float)
    qualified = np.flatnonzero(probs >= threshold)
    if len(qualified) == 0:
        return None
    forces = np.array(
        [current_force + candidates[i].dforce for i in qualified], dtype=float
    )
    order = np.lexsort((qualified, -probs[qualified], forces))
    return int(qualified[order[0]])


def select_action_min_force(
    predictor: Predictor,
    state: GraspState,
    cfg: SearchConfig,
    seed: int | tuple[int, ...] | None = None,
) -> tuple[Action, float]:
    """Least-force candidate clearing the threshold, else plain argmax fallback."""
    candidates = sample_candidates(state.force, cfg, seed)
    probs = score_candidates(predictor, state, candidates)
    idx = pick_min_force(candidates, probs, state.force, cfg.lift_threshold)
    if idx is None:
        idx = int(np.argmax(probs))
    return candidates[idx], float(probs[idx])


# --- episodes ----------------------------------------------------------------


Chooser = Callable[[WorldState, GraspState, SearchConfig, tuple[int, ...]], tuple[Action, float]]


def predictor_chooser(predictor: Predictor, objective: str = "max_success") -> Chooser:
    if objective not in ("max_success", "min_force"):
        raise ValueError(f"unknown objective {objective!r}")
    select = select_action if objective == "max_success" else select_action_min_force

    def choose(w: WorldState, s: GraspState, cfg: SearchConfig, seed: tuple[int, ...]):
        return select(predictor, s, cfg, seed)

    return choose


def oracle_chooser() -> Chooser:
    """Scores candidates with simulator ground truth; an upper-bound reference."""

    def choose(w: WorldState, s: GraspState, cfg: SearchConfig, seed: tuple[int, ...]):
        candidates = sample_candidates(s.force, cfg, seed)
        best_idx, best_p = 0, -1.0
        for i, a in enumerate(candidates):
            try:
                w2 = apply_action(w, a)
                o = float(attempt_lift(w2))
            except InvalidTrialError:
                o = 0.0
            if o > best_p:
                best_idx, best_p = i, o
        return candidates[best_idx], best_p

    return choose


def regrasp_episode(
    world: WorldState,
    chooser: Chooser,
    cfg: SearchConfig,
    episode_id: str = "ep",
    method: str = "fusion",
    world_seed: int = 0,
    init_seed: int = 0,
    policy_seed: int | None = None,
) -> tuple[RegraspResult, WorldState]:
    """Run one closed-loop episode from an initialized (fingers-open) world.

    The caller is responsible for gripper initialization (the collection
    initializer places it near the fitted cylinder without closing).
    """
    policy_seed = cfg.seed if policy_seed is None else policy_seed
    w = world
    steps: list[StepRecord] = []
    aborted = False
    outcome: int | None = None
    for step in range(cfg.max_regrasps):
        s = observe(w)
        a, p = chooser(w, s, cfg, (policy_seed, step))
        try:
            w = apply_action(w, a)
        except InvalidTrialError:
            aborted = True
            break
        steps.append(StepRecord(action=a, probability=p, force=w.commanded_force))
        if p >= cfg.lift_threshold:
            break
    if not aborted:
        outcome = attempt_lift(w)
    result = RegraspResult(
        episode_id=episode_id,
        method=method,
        object_id=world.object.name,
        world_seed=world_seed,
        init_seed=init_seed,
        policy_seed=policy_seed,
        steps=tuple(steps),
        outcome=outcome,
        aborted=aborted,
    )
    return result, w


def random_episode(
    world: WorldState,
    cfg: SearchConfig,
    episode_id: str = "ep",
    world_seed: int = 0,
    init_seed: int = 0,
    policy_seed: int = 0,
) -> tuple[RegraspResult, WorldState]:
    """One uniformly random adjustment then an immediate lift (collection policy)."""
    rng = np.random.default_rng(np.random.SeedSequence((policy_seed, _SALT_CANDIDATES)))
    a = Action(
        dx=float(rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION)),
        dy=float(rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION)),
        dz=float(rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION)),
        dyaw=float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)),
        dforce=float(rng.uniform(FORCE_MIN, FORCE_MAX) - world.commanded_force),
    )
    a = clamp_action(a, world.commanded_force)
    steps: list[StepRecord] = []
    aborted = False
    outcome: int | None = None
    try:
        w = apply_action(world, a)
        steps.append(StepRecord(action=a, probability=None, force=w.commanded_force))
        outcome = attempt_lift(w)
    except InvalidTrialError:
        aborted = True
        w = world
    return (
        RegraspResult(
            episode_id=episode_id,
            method="random",
            object_id=world.object.name,
            world_seed=world_seed,
            init_seed=init_seed,
            policy_seed=policy_seed,
            steps=tuple(steps),
            outcome=outcome,
            aborted=aborted,
        ),
        w,
    )


def cylinder_baseline_episode(
    world: WorldState,
    episode_id: str = "ep",
    world_seed: int = 0,
) -> tuple[RegraspResult, WorldState]:
    """Grasp the fitted cylinder's centre at mid-height with a constant 10 N."""
    cyl = fit_bounding_cylinder(world)
    pose = Pose(cyl.center[0], cyl.center[1], cyl.height / 2.0, 0.0)
    steps: list[StepRecord] = []
    aborted = False
    outcome: int | None = None
    try:
        w = place_gripper(world, pose, 10.0, close=True)
        steps.append(StepRecord(action=None, probability=None, force=10.0))
        outcome = attempt_lift(w)
    except InvalidTrialError:
        aborted = True
        w = world
    return (
        RegraspResult(
            episode_id=episode_id,
            method="cylinder",
            object_id=world.object.name,
            world_seed=world_seed,
            init_seed=0,
            policy_seed=0,
            steps=tuple(steps),
            outcome=outcome,
            aborted=aborted,
        ),
        w,
    )
