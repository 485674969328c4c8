"""Predictor-level checks: topology/parameter accounting, batched action scoring
against the plain forward pass, training on separable synthetic data, fold
partitioning, Platt recovery and calibration error arithmetic."""

import numpy as np
import pytest

from regrasp.core import Action, Dataset, GraspState, Pose, TrialRecord, action_to_feature
from regrasp.model import (
    Calibration,
    FusionNet,
    KFoldResult,
    ModelBundle,
    ModelConfig,
    TrainSchedule,
    build,
    ece,
    eval_accuracy,
    fit_calibration,
    fold_partition,
    kfold_eval,
    load_model,
    platt_fit,
    save_model,
    scores,
    state_batch,
    train,
)

# small real-size topology that still trains in a couple of seconds
FAST = ModelConfig(
    vision_channels=(2,), vision_kernels=(5,), vision_strides=(4,),
    tactile_channels=(2,), tactile_kernels=(5,), tactile_strides=(4,),
    branch_units=8, action_units=8, fusion_units=16,
)


def _state(rng=None, force=10.0):
    if rng is None:
        v = np.zeros((64, 64))
        t = np.zeros((32, 32))
    else:
        v = rng.uniform(size=(64, 64))
        t = rng.uniform(size=(32, 32))
        t = np.round(t, 4)
        v = np.round(v, 4)
    return GraspState(
        vision=v, tactile_left=t, tactile_right=np.array(t), pose=Pose(0.0, 0.0, 0.03, 0.1),
        force=force,
    )


def _action(rng):
    return Action(
        dx=float(rng.uniform(-0.02, 0.02)),
        dy=float(rng.uniform(-0.02, 0.02)),
        dz=float(rng.uniform(-0.02, 0.02)),
        dyaw=float(rng.uniform(-0.29, 0.29)),
        dforce=float(rng.uniform(-6.0, 6.0)),
    )


def synth_dataset(n=120, seed=0, objects=("a", "b", "c"), rule=None):
    """Labels depend only on the action (dforce sign by default)."""
    if rule is None:
        rule = lambda a: a.dforce > 0.0
    rng = np.random.default_rng(seed)
    s = _state()
    records = []
    for i in range(n):
        a = _action(rng)
        records.append(
            TrialRecord(
                state=s, action=a, outcome=int(rule(a)),
                object_id=objects[i % len(objects)], episode_id=f"ep{i // 10}",
            )
        )
    return Dataset(records=tuple(records), registry=tuple(objects))


class TestTopology:
    def test_default_fusion_parameter_count(self):
        assert build(ModelConfig(), seed=0).n_params() == 116_945

    def test_variant_parameter_counts(self):
        counts = {v: build(ModelConfig(variant=v), 0).n_params() for v in
                  ("fusion", "vision_only", "tactile_only", "no_action")}
        assert counts == {
            "fusion": 116_945, "vision_only": 62_257,
            "tactile_only": 68_129, "no_action": 103_761,
        }
        assert build(ModelConfig(tie_tactile=False), 0).n_params() == 155_249

    def test_variant_branch_membership(self):
        store = build(ModelConfig(variant="no_action"), 0)
        assert "action.fc0.W" not in store
        assert "vision.conv0.W" in store and "tactile.conv0.W" in store
        store = build(ModelConfig(variant="vision_only"), 0)
        assert "tactile.conv0.W" not in store and "action.fc0.W" in store
        store = build(ModelConfig(variant="tactile_only"), 0)
        assert "vision.conv0.W" not in store

    def test_tactile_tying(self):
        tied = FusionNet(ModelConfig())
        assert tied.tactile_left_net == tied.tactile_right_net
        untied = FusionNet(ModelConfig(tie_tactile=False))
        store = untied.init(0)
        assert "tactile_left.conv0.W" in store and "tactile_right.conv0.W" in store
        assert not np.array_equal(store["tactile_left.conv0.W"], store["tactile_right.conv0.W"])

    def test_branch_order_fixed(self):
        assert FusionNet(ModelConfig()).branches == (
            "vision", "tactile_left", "tactile_right", "action"
        )
        assert FusionNet(ModelConfig(variant="tactile_only")).branches == (
            "tactile_left", "tactile_right", "action"
        )
        assert FusionNet(ModelConfig(variant="no_action")).branches == (
            "vision", "tactile_left", "tactile_right"
        )

    def test_tiny_fits_grad_check_budget(self):
        assert build(ModelConfig.tiny(), 0).n_params() < 10_000

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="audio")


class TestScoring:
    def test_score_actions_matches_plain_forward(self):
        rng = np.random.default_rng(4)
        net = FusionNet(FAST)
        params = net.init(3)
        state = _state(rng)
        actions = [_action(rng) for _ in range(7)]
        feats = np.stack([action_to_feature(a, state.pose) for a in actions])
        z_fast = net.score_actions(params, state_batch(state), feats)
        sb = state_batch(state)
        batch = {b: np.repeat(sb[b], 7, axis=0) for b in sb}
        batch["action"] = feats
        p, z_ref = net.forward(params, batch)
        assert np.allclose(z_fast, z_ref, atol=1e-12)
        assert np.allclose(p, 1.0 / (1.0 + np.exp(-z_ref)))

    def test_predict_batch_applies_calibration(self):
        rng = np.random.default_rng(5)
        net = FusionNet(FAST)
        params = net.init(9)
        state = _state(rng)
        actions = [_action(rng) for _ in range(5)]
        feats = np.stack([action_to_feature(a, state.pose) for a in actions])
        z = net.score_actions(params, state_batch(state), feats)
        raw = ModelBundle(config=FAST, params=params)
        assert np.allclose(raw.predict_batch(state, actions), 1.0 / (1.0 + np.exp(-z)))
        cal = Calibration(a=-1.7, b=0.3)
        cooked = ModelBundle(config=FAST, params=params, calibration=cal)
        assert np.allclose(cooked.predict_batch(state, actions), cal.apply(z))
        assert cooked.predict(state, actions[0]) == pytest.approx(cal.apply(z[:1])[0])

    def test_calibration_apply_stable_at_extremes(self):
        cal = Calibration(a=-2.0, b=0.5)
        p = cal.apply(np.array([-1e6, -1.0, 0.0, 1.0, 1e6]))
        assert np.all(np.isfinite(p)) and np.all((p >= 0) & (p <= 1))
        assert np.all(np.diff(p) >= 0)  # a < 0: higher score, higher probability


class TestTraining:
    def test_learns_action_separable_rule(self):
        ds = synth_dataset(n=160, seed=1)
        sched = TrainSchedule(batch_size=16, total_iterations=400, lr_drop_iteration=300,
                              base_lr=3e-3, seed=2)
        params, report = train(FAST, ds, sched)
        assert report["final_train_accuracy"] >= 0.95
        assert report["variant"] == "fusion"
        assert report["n_records"] == 160
        assert not report["warnings"]
        # loss curve is sampled every 100 iterations, starting at 0
        assert [i for i, _ in report["loss_curve"]] == [0, 100, 200, 300]

    def test_zero_iterations_returns_init(self):
        ds = synth_dataset(n=20)
        sched = TrainSchedule(total_iterations=0, lr_drop_iteration=5, seed=11)
        params, report = train(FAST, ds, sched)
        assert params.equal(build(FAST, seed=11))
        assert report["loss_curve"] == []

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(FAST, Dataset(records=(), registry=()), TrainSchedule())

    def test_single_class_warning(self):
        ds = synth_dataset(n=24, rule=lambda a: True)
        sched = TrainSchedule(batch_size=8, total_iterations=5, lr_drop_iteration=4)
        _, report = train(FAST, ds, sched)
        assert report["warnings"]

    def test_deterministic_given_seed(self):
        ds = synth_dataset(n=40, seed=3)
        sched = TrainSchedule(batch_size=8, total_iterations=30, lr_drop_iteration=20, seed=5)
        p1, _ = train(FAST, ds, sched)
        p2, _ = train(FAST, ds, sched)
        assert p1.equal(p2)

    @pytest.mark.parametrize(
        "kw",
        [
            {"batch_size": 0},
            {"total_iterations": -1},
            {"lr_drop_iteration": 0},
            {"total_iterations": 100, "lr_drop_iteration": 100},
            {"lr_drop_factor": 0.0},
            {"base_lr": 0.0},
        ],
    )
    def test_schedule_validation(self, kw):
        with pytest.raises(ValueError):
            TrainSchedule(**kw)

    def test_eval_accuracy_empty(self):
        assert eval_accuracy(FAST, build(FAST, 0), Dataset(records=(), registry=())) == 0.0


class TestFolds:
    def test_partition_properties(self):
        ids = [f"o{i}" for i in range(10)]
        folds = fold_partition(ids * 3, k=4, seed=7)
        flat = [x for f in folds for x in f]
        assert sorted(flat) == sorted(ids)  # disjoint cover, duplicates collapsed
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1
        assert folds == fold_partition(ids, k=4, seed=7)
        assert folds != fold_partition(ids, k=4, seed=8)

    def test_partition_bad_k(self):
        with pytest.raises(ValueError):
            fold_partition(["a", "b"], k=1, seed=0)
        with pytest.raises(ValueError):
            fold_partition(["a", "b"], k=3, seed=0)

    def test_chance_baseline_hand_case(self):
        # objects: a all-positive, b all-negative, c all-positive.  each fold
        # holds out one object; the training majority is positive every time.
        records = []
        for oid, label in (("a", 1), ("b", 0), ("c", 1)):
            for i in range(10):
                records.append(
                    TrialRecord(state=_state(), action=Action(0, 0, 0, 0, 0),
                                outcome=label, object_id=oid, episode_id=f"{oid}{i}")
                )
        ds = Dataset(records=tuple(records), registry=("a", "b", "c"))
        res = kfold_eval("chance", ds, k=3, seed=0)
        assert res.variant == "chance"
        assert sorted(res.fold_accuracies) == [0.0, 1.0, 1.0]
        assert res.mean == pytest.approx(2.0 / 3.0)

    def test_kfold_trains_on_held_in_objects_only(self):
        ds = synth_dataset(n=180, seed=4, objects=tuple(f"o{i}" for i in range(6)))
        sched = TrainSchedule(batch_size=16, total_iterations=150, lr_drop_iteration=120,
                              base_lr=3e-3, seed=1)
        res = kfold_eval(FAST, ds, k=3, seed=2, schedule=sched)
        assert len(res.fold_accuracies) == 3
        flat = [o for f in res.fold_objects for o in f]
        assert sorted(flat) == sorted(f"o{i}" for i in range(6))
        assert all(len(f) == 2 for f in res.fold_objects)
        # the rule is object-independent, so held-out accuracy should be high
        assert res.mean > 0.8

    def test_unknown_baseline_rejected(self):
        with pytest.raises(ValueError):
            kfold_eval("coin", synth_dataset(n=10), k=2)

    def test_stderr_arithmetic(self):
        r = KFoldResult(variant="x", fold_accuracies=(0.5, 0.7, 0.9), fold_objects=((), (), ()))
        assert r.mean == pytest.approx(0.7)
        assert r.stderr == pytest.approx(np.std([0.5, 0.7, 0.9], ddof=1) / np.sqrt(3))
        assert KFoldResult("x", (0.5,), ((),)).stderr == 0.0


class TestCalibration:
    def test_platt_recovers_known_scaler(self):
        rng = np.random.default_rng(0)
        z = rng.normal(0.0, 2.0, size=4000)
        true = Calibration(a=-1.5, b=0.4)
        labels = (rng.uniform(size=z.size) < true.apply(z)).astype(float)
        fit = platt_fit(z, labels)
        assert fit.a == pytest.approx(true.a, abs=0.15)
        assert fit.b == pytest.approx(true.b, abs=0.15)

    def test_platt_input_validation(self):
        with pytest.raises(ValueError):
            platt_fit(np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            platt_fit(np.zeros(3), np.zeros(2))

    def test_fit_calibration_rejects_single_class(self):
        ds = synth_dataset(n=20, rule=lambda a: True)
        with pytest.raises(ValueError):
            fit_calibration(FAST, build(FAST, 0), ds)

    def test_platt_repairs_miscalibrated_scores(self):
        # scores whose plain sigmoid is overconfident: true p = sigmoid of a
        # shrunk, shifted score.  fitting recovers most of the gap.
        rng = np.random.default_rng(8)
        z = rng.normal(0.0, 3.0, size=3000)
        true = Calibration(a=-0.4, b=0.6)
        labels = (rng.uniform(size=z.size) < true.apply(z)).astype(float)
        raw_p = 1.0 / (1.0 + np.exp(-z))
        cal = platt_fit(z, labels)
        assert ece(cal.apply(z), labels) < ece(raw_p, labels)
        assert ece(cal.apply(z), labels) < 0.05

    def test_ece_hand_values(self):
        assert ece(np.array([0.95, 0.95]), np.array([1.0, 0.0])) == pytest.approx(0.45)
        p = np.array([0.05, 0.05, 0.05, 0.05, 0.85, 0.85, 0.85, 0.85])
        y = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
        assert ece(p, y) == pytest.approx(0.5 * 0.05 + 0.5 * 0.35)
        assert ece(np.array([0.5, 0.5]), np.array([0.0, 1.0])) == pytest.approx(0.0)
        assert ece(np.array([1.0]), np.array([1.0])) == pytest.approx(0.0)
        assert ece(np.zeros(0), np.zeros(0)) == 0.0


class TestBundle:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        params = build(FAST, seed=4)
        bundle = ModelBundle(config=FAST, params=params, calibration=Calibration(-1.2, 0.1))
        path = tmp_path / "model.json"
        save_model(path, bundle, step=42, report={"note": 1})
        loaded = load_model(path)
        assert loaded.config == FAST
        assert loaded.params.equal(params)
        assert loaded.calibration == bundle.calibration
        state = _state(rng)
        actions = [_action(rng) for _ in range(4)]
        assert np.array_equal(loaded.predict_batch(state, actions),
                              bundle.predict_batch(state, actions))

    def test_no_calibration_round_trip(self, tmp_path):
        bundle = ModelBundle(config=ModelConfig.tiny(), params=build(ModelConfig.tiny(), 1))
        path = tmp_path / "m.json"
        save_model(path, bundle)
        assert load_model(path).calibration is None
