"""Action-conditioned late-fusion success predictor built on the nn engine.

Each modality runs through its own branch (vision conv stack, per-finger
tactile conv stacks with tied weights, an action MLP); branch activations are
concatenated in the fixed order vision, tactile_left, tactile_right, action
(restricted to the branches a variant uses) and fused through a dense head
ending in a sigmoid.  Training minimizes binary cross-entropy; the pre-sigmoid
fusion score feeds Platt calibration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from regrasp import nn
from regrasp.core import (
    ACTION_FEATURE_DIM,
    Action,
    Dataset,
    GraspState,
    TrialRecord,
    action_to_feature,
)

VARIANTS = ("fusion", "vision_only", "tactile_only", "no_action")

_SALT_TRAIN = 71
_SALT_FOLD = 83


@dataclass(frozen=True)
class ModelConfig:
    """Topology knobs; defaults are the desk-scale widths."""

    variant: str = "fusion"
    vision_size: int = 64
    tactile_size: int = 32
    vision_channels: tuple[int, ...] = (8, 16, 16)
    vision_kernels: tuple[int, ...] = (5, 3, 3)
    vision_strides: tuple[int, ...] = (2, 2, 2)
    tactile_channels: tuple[int, ...] = (8, 16)
    tactile_kernels: tuple[int, ...] = (5, 3)
    tactile_strides: tuple[int, ...] = (2, 2)
    branch_units: int = 64
    action_units: int = 64
    fusion_units: int = 128
    tie_tactile: bool = True

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @classmethod
    def small(cls, variant: str = "fusion") -> "ModelConfig":
        """Reduced widths for fast test-scale training on real renders."""
        return cls(
            variant=variant,
            vision_channels=(4, 8, 8),
            tactile_channels=(4, 8),
            branch_units=32,
            action_units=32,
            fusion_units=64,
        )

    @classmethod
    def tiny(cls, variant: str = "fusion") -> "ModelConfig":
        """Sub-10k-parameter topology on synthetic 8x8 inputs, for gradient checks."""
        return cls(
            variant=variant,
            vision_size=8,
            tactile_size=8,
            vision_channels=(2,),
            vision_kernels=(3,),
            vision_strides=(2,),
            tactile_channels=(2,),
            tactile_kernels=(3,),
            tactile_strides=(2,),
            branch_units=8,
            action_units=8,
            fusion_units=8,
        )


@dataclass(frozen=True)
class TrainSchedule:
    """Batch/iteration schedule; lr drops by lr_drop_factor at lr_drop_iteration."""

    batch_size: int = 16
    total_iterations: int = 9000
    lr_drop_iteration: int = 7000
    lr_drop_factor: float = 10.0
    base_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if self.lr_drop_iteration <= 0:
            raise ValueError("lr_drop_iteration must be positive")
        # total_iterations == 0 is a degenerate no-op run; otherwise the drop
        # must land strictly inside the run.
        if self.total_iterations > 0 and self.lr_drop_iteration >= self.total_iterations:
            raise ValueError("lr_drop_iteration must lie strictly inside the run")
        if self.lr_drop_factor <= 0 or self.base_lr <= 0:
            raise ValueError("lr_drop_factor and base_lr must be positive")


@dataclass(frozen=True)
class Calibration:
    """Platt scaler on the pre-sigmoid score: p = 1 / (1 + exp(A*z + B))."""

    a: float
    b: float

    def apply(self, z: np.ndarray) -> np.ndarray:
        u = self.a * np.asarray(z, dtype=float) + self.b
        e = np.exp(-np.abs(u))  # evaluate only the decaying exponential
        return np.where(u >= 0, e / (1.0 + e), 1.0 / (1.0 + e))


class FusionNet:
    """Layer chains and branch wiring for one ModelConfig."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        self.vision_net = self._conv_stack(
            "vision", c.vision_channels, c.vision_kernels, c.vision_strides, c.branch_units
        )
        left_ns = "tactile" if c.tie_tactile else "tactile_left"
        right_ns = "tactile" if c.tie_tactile else "tactile_right"
        self.tactile_left_net = self._conv_stack(
            left_ns, c.tactile_channels, c.tactile_kernels, c.tactile_strides, c.branch_units
        )
        self.tactile_right_net = self._conv_stack(
            right_ns, c.tactile_channels, c.tactile_kernels, c.tactile_strides, c.branch_units
        )
        self.action_net = [
            nn.Dense("action.fc0", c.action_units),
            nn.Relu(),
            nn.Dense("action.fc1", c.action_units),
        ]
        self.branches = {
            "fusion": ("vision", "tactile_left", "tactile_right", "action"),
            "vision_only": ("vision", "action"),
            "tactile_only": ("tactile_left", "tactile_right", "action"),
            "no_action": ("vision", "tactile_left", "tactile_right"),
        }[c.variant]
        widths = {
            "vision": c.branch_units,
            "tactile_left": c.branch_units,
            "tactile_right": c.branch_units,
            "action": c.action_units,
        }
        self.branch_widths = [widths[b] for b in self.branches]
        # final sigmoid applied outside the chain so the raw score is available
        self.fusion_net = [
            nn.Dense("fusion.fc0", c.fusion_units),
            nn.Relu(),
            nn.Dense("fusion.out", 1),
        ]

    @staticmethod
    def _conv_stack(ns, channels, kernels, strides, out_units) -> list[nn.LayerSpec]:
        specs: list[nn.LayerSpec] = []
        for i, (ch, k, s) in enumerate(zip(channels, kernels, strides)):
            specs.append(nn.Conv(f"{ns}.conv{i}", ch, k, s))
            specs.append(nn.Relu())
        specs.append(nn.Flatten())
        specs.append(nn.Dense(f"{ns}.fc", out_units))
        return specs

    def _branch(self, name: str) -> tuple[list[nn.LayerSpec], tuple[int, ...]]:
        c = self.config
        if name == "vision":
            return self.vision_net, (1, c.vision_size, c.vision_size)
        if name == "tactile_left":
            return self.tactile_left_net, (1, c.tactile_size, c.tactile_size)
        if name == "tactile_right":
            return self.tactile_right_net, (1, c.tactile_size, c.tactile_size)
        if name == "action":
            return self.action_net, (ACTION_FEATURE_DIM,)
        raise KeyError(name)

    def init(self, seed: int) -> nn.ParamStore:
        store: nn.ParamStore | None = None
        for b in self.branches:
            net, shape = self._branch(b)
            store = nn.init_params(net, shape, seed, into=store)
        concat = sum(self.branch_widths)
        store = nn.init_params(self.fusion_net, (concat,), seed, into=store)
        return store

    def forward(
        self, params: nn.ParamStore, batch: dict[str, np.ndarray], want_cache: bool = False
    ):
        """Returns (p, z) plus per-branch caches when requested."""
        acts, caches = [], {}
        for b in self.branches:
            net, _ = self._branch(b)
            y, cache = nn.forward(net, params, batch[b])
            acts.append(y)
            caches[b] = cache
        concat = np.concatenate(acts, axis=1)
        z2, fusion_cache = nn.forward(self.fusion_net, params, concat)
        z = z2[:, 0]
        p = _sigmoid(z)
        if want_cache:
            return p, z, caches, fusion_cache
        return p, z

    def loss_and_grads(
        self, params: nn.ParamStore, batch: dict[str, np.ndarray], labels: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
        p, z, caches, fusion_cache = self.forward(params, batch, want_cache=True)
        y = np.asarray(labels, dtype=float)
        n = len(y)
        loss = float(np.mean(np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))))
        dz = ((p - y) / n)[:, None]
        grads: dict[str, np.ndarray] = {}
        _, dconcat = nn.backward(self.fusion_net, params, fusion_cache, dz, grads)
        offset = 0
        for b, width in zip(self.branches, self.branch_widths):
            net, _ = self._branch(b)
            nn.backward(net, params, caches[b], dconcat[:, offset : offset + width], grads)
            offset += width
        return loss, grads, p

    def score_actions(
        self,
        params: nn.ParamStore,
        state_batch: dict[str, np.ndarray],
        action_feats: np.ndarray,
    ) -> np.ndarray:
        """Raw scores for many candidate actions against one held-fixed state.

        State branch activations are computed once and broadcast across the
        candidate set; only the action branch and fusion head see all rows.
        """
        acts = []
        n = len(action_feats)
        for b in self.branches:
            net, _ = self._branch(b)
            if b == "action":
                y, _ = nn.forward(net, params, action_feats)
            else:
                y1, _ = nn.forward(net, params, state_batch[b])
                y = np.broadcast_to(y1, (n, y1.shape[1]))
            acts.append(y)
        concat = np.concatenate(acts, axis=1)
        z2, _ = nn.forward(self.fusion_net, params, concat)
        return z2[:, 0]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def build(config: ModelConfig, seed: int) -> nn.ParamStore:
    return FusionNet(config).init(seed)


# --- feature plumbing --------------------------------------------------------


class FeatureBank:
    """Per-record raster references plus dense action features and labels."""

    def __init__(self, records: Sequence[TrialRecord]):
        self.visions = [r.state.vision for r in records]
        self.tls = [r.state.tactile_left for r in records]
        self.trs = [r.state.tactile_right for r in records]
        self.actions = np.stack(
            [action_to_feature(r.action, r.state.pose) for r in records]
        ) if records else np.zeros((0, ACTION_FEATURE_DIM))
        self.labels = np.array([r.outcome for r in records], dtype=float)
        self.object_ids = [r.object_id for r in records]

    def __len__(self) -> int:
        return len(self.visions)

    def gather(self, idx: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        batch = {
            "vision": np.stack([self.visions[i] for i in idx])[:, None],
            "tactile_left": np.stack([self.tls[i] for i in idx])[:, None],
            "tactile_right": np.stack([self.trs[i] for i in idx])[:, None],
            "action": self.actions[idx],
        }
        return batch, self.labels[idx]


def state_batch(state: GraspState) -> dict[str, np.ndarray]:
    return {
        "vision": state.vision[None, None],
        "tactile_left": state.tactile_left[None, None],
        "tactile_right": state.tactile_right[None, None],
    }


# --- training ----------------------------------------------------------------


def train(
    config: ModelConfig,
    dataset: Dataset,
    schedule: TrainSchedule,
    val_dataset: Dataset | None = None,
) -> tuple[nn.ParamStore, dict]:
    """Train from scratch; returns final params and a JSON-ready report."""
    net = FusionNet(config)
    params = net.init(schedule.seed)
    bank = FeatureBank(dataset.records)
    if len(bank) == 0:
        raise ValueError("cannot train on an empty dataset")
    warnings: list[str] = []
    if len(np.unique(bank.labels)) < 2:
        warnings.append("dataset contains a single outcome class; model will be degenerate")

    rng = np.random.default_rng(np.random.SeedSequence((schedule.seed, _SALT_TRAIN)))
    opt_state = nn.new_adam_state()
    order = rng.permutation(len(bank))
    cursor = 0
    loss_curve: list[tuple[int, float]] = []
    for it in range(schedule.total_iterations):
        if cursor + schedule.batch_size > len(order):
            order = rng.permutation(len(bank))
            cursor = 0
            while len(order) < schedule.batch_size:  # tiny datasets: cycle
                order = np.concatenate([order, rng.permutation(len(bank))])
        idx = order[cursor : cursor + schedule.batch_size]
        cursor += schedule.batch_size
        batch, labels = bank.gather(idx)
        loss, grads, _ = net.loss_and_grads(params, batch, labels)
        lr = schedule.base_lr
        if it >= schedule.lr_drop_iteration:
            lr = schedule.base_lr / schedule.lr_drop_factor
        params, opt_state = nn.optimizer_step(params, grads, opt_state, lr)
        if it % 100 == 0:
            loss_curve.append((it, loss))

    report = {
        "variant": config.variant,
        "seed": schedule.seed,
        "n_records": len(bank),
        "positive_rate": float(bank.labels.mean()),
        "loss_curve": [[int(i), float(l)] for i, l in loss_curve],
        "final_train_accuracy": eval_accuracy(config, params, dataset),
        "final_val_accuracy": (
            eval_accuracy(config, params, val_dataset) if val_dataset is not None else None
        ),
        "schedule": {
            "batch_size": schedule.batch_size,
            "total_iterations": schedule.total_iterations,
            "lr_drop_iteration": schedule.lr_drop_iteration,
            "lr_drop_factor": schedule.lr_drop_factor,
            "base_lr": schedule.base_lr,
        },
        "warnings": warnings,
    }
    return params, report


def eval_accuracy(
    config: ModelConfig, params: nn.ParamStore, dataset: Dataset, batch_size: int = 256
) -> float:
    """Accuracy at threshold 0.5 (uncalibrated probabilities)."""
    net = FusionNet(config)
    bank = FeatureBank(dataset.records)
    if len(bank) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(bank), batch_size):
        idx = np.arange(start, min(start + batch_size, len(bank)))
        batch, labels = bank.gather(idx)
        p, _ = net.forward(params, batch)
        correct += int(np.sum((p >= 0.5) == (labels >= 0.5)))
    return correct / len(bank)


def scores(
    config: ModelConfig, params: nn.ParamStore, dataset: Dataset, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """(pre-sigmoid scores, labels) over a dataset."""
    net = FusionNet(config)
    bank = FeatureBank(dataset.records)
    zs = []
    for start in range(0, len(bank), batch_size):
        idx = np.arange(start, min(start + batch_size, len(bank)))
        batch, _ = bank.gather(idx)
        _, z = net.forward(params, batch)
        zs.append(z)
    return (np.concatenate(zs) if zs else np.zeros(0)), bank.labels


# --- K-fold evaluation -------------------------------------------------------


@dataclass(frozen=True)
class KFoldResult:
    variant: str
    fold_accuracies: tuple[float, ...]
    fold_objects: tuple[tuple[str, ...], ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def stderr(self) -> float:
        a = np.asarray(self.fold_accuracies)
        if len(a) < 2:
            return 0.0
        return float(np.std(a, ddof=1) / math.sqrt(len(a)))


def fold_partition(object_ids: Sequence[str], k: int, seed: int) -> list[list[str]]:
    """Deterministic object-level partition into k near-equal groups."""
    ids = sorted(set(object_ids))
    if k < 2 or k > len(ids):
        raise ValueError(f"k={k} incompatible with {len(ids)} objects")
    rng = np.random.default_rng(np.random.SeedSequence((seed, _SALT_FOLD)))
    perm = [ids[i] for i in rng.permutation(len(ids))]
    return [list(part) for part in np.array_split(perm, k)]


def kfold_eval(
    config_or_chance: ModelConfig | str,
    dataset: Dataset,
    k: int = 3,
    seed: int = 0,
    schedule: TrainSchedule | None = None,
) -> KFoldResult:
    """Object-partitioned cross-validation; pass "chance" for the majority baseline."""
    chance = isinstance(config_or_chance, str)
    if chance and config_or_chance != "chance":
        raise ValueError(f"unknown baseline {config_or_chance!r}")
    folds = fold_partition([r.object_id for r in dataset.records], k, seed)
    schedule = schedule or TrainSchedule()
    accs: list[float] = []
    for fi, held_out in enumerate(folds):
        held = set(held_out)
        train_idx = [i for i, r in enumerate(dataset.records) if r.object_id not in held]
        test_idx = [i for i, r in enumerate(dataset.records) if r.object_id in held]
        train_ds = dataset.subset(train_idx)
        test_ds = dataset.subset(test_idx)
        test_labels = np.array([r.outcome for r in test_ds.records], dtype=float)
        if chance:
            train_labels = np.array([r.outcome for r in train_ds.records], dtype=float)
            majority = 1.0 if train_labels.mean() >= 0.5 else 0.0
            accs.append(float(np.mean(test_labels == majority)))
            continue
        fold_schedule = replace(schedule, seed=int(np.random.SeedSequence(
            (schedule.seed, fi, _SALT_FOLD)).generate_state(1)[0]))
        params, _ = train(config_or_chance, train_ds, fold_schedule)
        accs.append(eval_accuracy(config_or_chance, params, test_ds))
    return KFoldResult(
        variant="chance" if chance else config_or_chance.variant,
        fold_accuracies=tuple(accs),
        fold_objects=tuple(tuple(f) for f in folds),
    )


# --- calibration -------------------------------------------------------------


def platt_fit(z: np.ndarray, labels: np.ndarray, max_iter: int = 100) -> Calibration:
    """Fit Platt scaling on raw scores with smoothed targets, damped Newton."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(z) == 0 or len(z) != len(y):
        raise ValueError("platt_fit needs matching non-empty scores and labels")
    n_pos = float(np.sum(y > 0.5))
    n_neg = float(len(y) - n_pos)
    t = np.where(y > 0.5, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def loss_at(a: float, b: float) -> float:
        u = a * z + b
        # t*softplus(u) + (1-t)*softplus(-u), stable form
        return float(np.sum(np.maximum(u, 0.0) - u * (1.0 - t) + np.log1p(np.exp(-np.abs(u)))))

    a, b = -1.0, 0.0
    cur = loss_at(a, b)
    for _ in range(max_iter):
        u = a * z + b
        p = _sigmoid(-u)
        g = np.array([np.sum((t - p) * z), np.sum(t - p)])
        w = p * (1.0 - p)
        h = np.array(
            [[np.sum(w * z * z) + 1e-12, np.sum(w * z)], [np.sum(w * z), np.sum(w) + 1e-12]]
        )
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        scale = 1.0
        for _ in range(25):
            na, nb = a - scale * step[0], b - scale * step[1]
            nl = loss_at(na, nb)
            if nl <= cur + 1e-12:
                break
            scale *= 0.5
        else:
            break
        moved = max(abs(na - a), abs(nb - b))
        a, b, cur = na, nb, nl
        if moved < 1e-10:
            break
    return Calibration(a=float(a), b=float(b))


def fit_calibration(
    config: ModelConfig, params: nn.ParamStore, validation: Dataset
) -> Calibration:
    """Platt-fit on a trained model's raw validation scores.

    The validation set must contain both outcome classes; a single-class set
    cannot constrain the scaler and raises ValueError.
    """
    z, labels = scores(config, params, validation)
    if len(labels) == 0 or labels.min() == labels.max():
        raise ValueError("calibration needs both outcome classes in validation data")
    return platt_fit(z, labels)


def ece(probs: np.ndarray, labels: np.ndarray, bins: int = 10) -> float:
    """Expected calibration error over equal-width probability bins."""
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(p) == 0:
        return 0.0
    edges = np.linspace(0.0, 1.0, bins + 1)
    total = 0.0
    for i in range(bins):
        lo, hi = edges[i], edges[i + 1]
        mask = (p >= lo) & (p < hi) if i < bins - 1 else (p >= lo) & (p <= hi)
        if not np.any(mask):
            continue
        total += mask.mean() * abs(p[mask].mean() - y[mask].mean())
    return float(total)


# --- bundle / persistence ----------------------------------------------------


@dataclass(frozen=True)
class ModelBundle:
    """Everything inference needs: topology config, weights, optional calibration."""

    config: ModelConfig
    params: nn.ParamStore
    calibration: Calibration | None = None

    def net(self) -> FusionNet:
        return FusionNet(self.config)

    def predict_batch(self, state: GraspState, actions: Sequence[Action]) -> np.ndarray:
        """Success probabilities for candidate actions from one observed state."""
        feats = np.stack([action_to_feature(a, state.pose) for a in actions])
        z = self.net().score_actions(self.params, state_batch(state), feats)
        if self.calibration is not None:
            return self.calibration.apply(z)
        return _sigmoid(z)

    def predict(self, state: GraspState, action: Action) -> float:
        return float(self.predict_batch(state, [action])[0])


def save_model(path: str | Path, bundle: ModelBundle, opt_state: dict | None = None,
               step: int = 0, report: dict | None = None) -> None:
    cfg = bundle.config
    extra = {
        "config": {
            "variant": cfg.variant,
            "vision_size": cfg.vision_size,
            "tactile_size": cfg.tactile_size,
            "vision_channels": list(cfg.vision_channels),
            "vision_kernels": list(cfg.vision_kernels),
            "vision_strides": list(cfg.vision_strides),
            "tactile_channels": list(cfg.tactile_channels),
            "tactile_kernels": list(cfg.tactile_kernels),
            "tactile_strides": list(cfg.tactile_strides),
            "branch_units": cfg.branch_units,
            "action_units": cfg.action_units,
            "fusion_units": cfg.fusion_units,
            "tie_tactile": cfg.tie_tactile,
        },
        "calibration": (
            {"a": bundle.calibration.a, "b": bundle.calibration.b}
            if bundle.calibration is not None
            else None
        ),
    }
    if report is not None:
        extra["report"] = report
    nn.save_checkpoint(path, bundle.params, opt_state, step=step, extra=extra)


def load_model(path: str | Path) -> ModelBundle:
    params, _, _, extra = nn.load_checkpoint(path)
    c = extra["config"]
    config = ModelConfig(
        variant=c["variant"],
        vision_size=c["vision_size"],
        tactile_size=c["tactile_size"],
        vision_channels=tuple(c["vision_channels"]),
        vision_kernels=tuple(c["vision_kernels"]),
        vision_strides=tuple(c["vision_strides"]),
        tactile_channels=tuple(c["tactile_channels"]),
        tactile_kernels=tuple(c["tactile_kernels"]),
        tactile_strides=tuple(c["tactile_strides"]),
        branch_units=c["branch_units"],
        action_units=c["action_units"],
        fusion_units=c["fusion_units"],
        tie_tactile=c["tie_tactile"],
    )
    calib = extra.get("calibration")
    calibration = Calibration(a=calib["a"], b=calib["b"]) if calib else None
    return ModelBundle(config=config, params=params, calibration=calibration)
