"""Experiment drivers: collection, training, calibration, and evaluations.

Every command is a plain function taking a merged config dict and an output
directory; it writes deterministic artifacts (JSON reports, CSV tables,
whitespace-delimited .dat curves for gnuplot) and returns a JSON-ready summary.
Published hardware numbers are printed alongside desk-scale results strictly as
labelled references; nothing here asserts against them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from regrasp.core import (
    FORCE_MAX,
    FORCE_MIN,
    MAX_ROTATION,
    MAX_TRANSLATION,
    Action,
    Dataset,
    GraspState,
    merge_datasets,
)
from regrasp.datagen import (
    CollectConfig,
    collect,
    initialize_episode,
    parse_episode_id,
    replay_episode,
    resolve_object_set,
)
from regrasp.model import (
    Calibration,
    ModelBundle,
    ModelConfig,
    TrainSchedule,
    ece,
    fit_calibration,
    kfold_eval,
    load_model,
    save_model,
    scores,
    train,
    _sigmoid,
)
from regrasp.policy import (
    RegraspResult,
    SearchConfig,
    cylinder_baseline_episode,
    load_traces,
    oracle_chooser,
    predictor_chooser,
    random_episode,
    regrasp_episode,
    save_traces,
)
from regrasp.simworld import builtin_library, observe, place_gripper, spawn_scene

log = logging.getLogger(__name__)

_SALT_WORLD = 211
_SALT_INIT = 223
_SALT_POLICY = 227
_SALT_STATES = 229

# Published results from the original hardware study, printed for orientation
# only.  Desk-scale simulated numbers are not comparable and are never checked
# against these.
REFERENCE_KFOLD = {
    "chance": (62.80, 0.85),
    "vision_only": (73.03, 0.24),
    "tactile_only": (79.34, 0.66),
    "fusion": (80.28, 0.68),
    "no_action": (76.43, 0.42),
}
REFERENCE_POLICY = {
    "easy": {"vision_only": 63.2, "fusion": 94.0, "cylinder": 75.9},
    "hard": {"vision_only": 50.0, "fusion": 73.6, "cylinder": 66.8},
}
REFERENCE_MIN_FORCE = {
    "fusion": {"success_max": 95.0, "success_min": 94.0, "force_max": 20.0, "force_min": 10.0},
    "vision_only": {"success_max": 76.0, "success_min": 76.0, "force_max": 18.0, "force_min": 6.0},
}

SWEEP_TOL = 0.02


class ConfigError(ValueError):
    """Missing or malformed command configuration."""


class ReplayMismatch(RuntimeError):
    """A replayed episode diverged from its recorded trace."""


def _derive(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


def _require(config: dict, key: str, command: str):
    if key not in config or config[key] in (None, ""):
        raise ConfigError(f"{command} requires config key {key!r}")
    return config[key]


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def write_dat(path: Path, columns: Sequence[str], rows: Sequence[Sequence[float]]) -> None:
    """Whitespace-delimited table with a commented header, gnuplot-ready."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for row in rows:
            fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")


def print_reference(lines: Sequence[str]) -> None:
    for line in lines:
        print(f"[reference, original hardware] {line}")


def _model_config(config: dict) -> ModelConfig:
    section = dict(config.get("model", {}))
    preset = section.pop("preset", "full")
    variant = section.pop("variant", "fusion")
    if preset == "small":
        base = ModelConfig.small(variant)
    elif preset == "tiny":
        base = ModelConfig.tiny(variant)
    elif preset == "full":
        base = ModelConfig(variant=variant)
    else:
        raise ConfigError(f"unknown model preset {preset!r}")
    if section:
        from dataclasses import replace as dc_replace

        tuple_keys = {
            "vision_channels", "vision_kernels", "vision_strides",
            "tactile_channels", "tactile_kernels", "tactile_strides",
        }
        section = {k: tuple(v) if k in tuple_keys else v for k, v in section.items()}
        base = dc_replace(base, **section)
    return base


def _schedule(config: dict, seed: int) -> TrainSchedule:
    section = dict(config.get("schedule", {}))
    section.setdefault("seed", seed)
    return TrainSchedule(**section)


def _search(config: dict, seed: int) -> SearchConfig:
    section = dict(config.get("search", {}))
    section.setdefault("seed", seed)
    return SearchConfig(**section)


def _collect_config(config: dict, seed: int) -> CollectConfig:
    keys = {
        "n_trials", "object_set", "perturbation_scale", "force_range",
        "policy", "checkpoint", "trials_per_episode", "max_retries",
    }
    kwargs = {k: config[k] for k in keys if k in config}
    if "force_range" in kwargs:
        kwargs["force_range"] = tuple(kwargs["force_range"])
    return CollectConfig(seed=seed, **kwargs)


# --- reports -----------------------------------------------------------------


@dataclass
class EvalReport:
    """Aggregated policy evaluation for one method."""

    method: str
    per_object: dict = field(default_factory=dict)
    successes: int = 0
    trials: int = 0
    aborted: int = 0
    regrasp_counts: dict = field(default_factory=dict)
    success_forces: list = field(default_factory=list)

    def add(self, result: RegraspResult) -> None:
        obj = self.per_object.setdefault(result.object_id, [0, 0])
        obj[1] += 1
        self.trials += 1
        steps = len(result.steps)
        self.regrasp_counts[steps] = self.regrasp_counts.get(steps, 0) + 1
        if result.aborted:
            self.aborted += 1
            return
        if result.outcome == 1:
            obj[0] += 1
            self.successes += 1
            if result.final_force is not None:
                self.success_forces.append(result.final_force)

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    @property
    def mean_success_force(self) -> float | None:
        if not self.success_forces:
            return None
        return float(np.mean(self.success_forces))

    def to_obj(self) -> dict:
        if self.successes > self.trials:
            raise ValueError("successes exceed trials")
        return {
            "method": self.method,
            "per_object": {
                k: {"successes": v[0], "trials": v[1], "rate": v[0] / v[1] if v[1] else 0.0}
                for k, v in sorted(self.per_object.items())
            },
            "successes": self.successes,
            "trials": self.trials,
            "success_rate": self.success_rate,
            "aborted": self.aborted,
            "regrasp_counts": {str(k): v for k, v in sorted(self.regrasp_counts.items())},
            "mean_success_force": self.mean_success_force,
            "n_success_forces": len(self.success_forces),
        }


# --- commands ----------------------------------------------------------------


def cmd_collect(config: dict, seed: int, out: Path) -> dict:
    cfg = _collect_config(config, seed)
    bundle = None
    if cfg.policy == "on_policy" and cfg.checkpoint is not None:
        bundle = load_model(cfg.checkpoint)
    dataset, manifest = collect(cfg, bundle=bundle)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "dataset.jsonl"
    dataset.save_jsonl(data_path)
    manifest["files"] = {"dataset.jsonl": sha256_file(data_path)}
    write_json(out / "manifest.json", manifest)
    return {
        "command": "collect",
        "n_trials": manifest["n_trials"],
        "n_records": manifest["n_records"],
        "positive_rate": manifest["positive_rate"],
        "dataset": str(data_path),
    }


def cmd_train(config: dict, seed: int, out: Path) -> dict:
    paths = _require(config, "dataset", "train")
    if isinstance(paths, str):
        paths = [paths]
    dataset = merge_datasets([Dataset.load_jsonl(p) for p in paths])
    model_cfg = _model_config(config)
    schedule = _schedule(config, seed)
    val = None
    if config.get("validation"):
        val = Dataset.load_jsonl(config["validation"])
    params, report = train(model_cfg, dataset, schedule, val_dataset=val)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    save_model(ckpt, ModelBundle(config=model_cfg, params=params), report=report)
    write_json(out / "training_report.json", report)
    write_dat(out / "loss_curve.dat", ["iteration", "loss"], report["loss_curve"])
    return {
        "command": "train",
        "variant": model_cfg.variant,
        "final_train_accuracy": report["final_train_accuracy"],
        "final_val_accuracy": report["final_val_accuracy"],
        "checkpoint": str(ckpt),
    }


def cmd_calibrate(config: dict, seed: int, out: Path) -> dict:
    bundle = load_model(_require(config, "checkpoint", "calibrate"))
    val = Dataset.load_jsonl(_require(config, "validation", "calibrate"))
    calibration = fit_calibration(bundle.config, bundle.params, val)
    z, labels = scores(bundle.config, bundle.params, val)
    pre = ece(_sigmoid(z), labels)
    post = ece(calibration.apply(z), labels)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    save_model(ckpt, ModelBundle(bundle.config, bundle.params, calibration))
    summary = {
        "command": "calibrate",
        "a": calibration.a,
        "b": calibration.b,
        "ece_pre": pre,
        "ece_post": post,
        "n_validation": int(len(labels)),
        "checkpoint": str(ckpt),
    }
    write_json(out / "calibration.json", summary)
    return summary


def cmd_eval_model(config: dict, seed: int, out: Path) -> dict:
    dataset = Dataset.load_jsonl(_require(config, "dataset", "eval-model"))
    variants = config.get(
        "variants", ["chance", "fusion", "no_action", "vision_only", "tactile_only"]
    )
    k = int(config.get("k", 3))
    schedule = _schedule(config, seed)
    results = {}
    for variant in variants:
        if variant == "chance":
            res = kfold_eval("chance", dataset, k=k, seed=seed, schedule=schedule)
        else:
            cfg = _model_config({"model": {**config.get("model", {}), "variant": variant}})
            res = kfold_eval(cfg, dataset, k=k, seed=seed, schedule=schedule)
        results[variant] = res
        log.info("kfold %s: %.4f +- %.4f", variant, res.mean, res.stderr)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        [v, f"{r.mean:.6f}", f"{r.stderr:.6f}"] + [f"{a:.6f}" for a in r.fold_accuracies]
        for v, r in results.items()
    ]
    write_csv(
        out / "eval_model.csv",
        ["variant", "mean_accuracy", "stderr"] + [f"fold{i}" for i in range(k)],
        rows,
    )
    report = {
        "command": "eval-model",
        "k": k,
        "n_records": len(dataset.records),
        "results": {
            v: {
                "mean_accuracy": r.mean,
                "stderr": r.stderr,
                "fold_accuracies": list(r.fold_accuracies),
                "fold_objects": [list(f) for f in r.fold_objects],
            }
            for v, r in results.items()
        },
        "reference": {
            v: {"mean_percent": m, "stderr_percent": s} for v, (m, s) in REFERENCE_KFOLD.items()
        },
    }
    write_json(out / "eval_model.json", report)
    print_reference(
        [f"kfold {v}: {m:.2f} +- {s:.2f} %" for v, (m, s) in REFERENCE_KFOLD.items()]
    )
    summary = {v: r.mean for v, r in results.items()}
    return {"command": "eval-model", "mean_accuracy": summary, "out": str(out)}


def _episode_worlds(spec, obj_idx: int, ep_idx: int, seed: int):
    """Shared world and initializer seeds so every method sees the same scene."""
    world_seed = _derive(seed, obj_idx, ep_idx, _SALT_WORLD)
    init_seed = _derive(seed, obj_idx, ep_idx, _SALT_INIT)
    policy_seed = _derive(seed, obj_idx, ep_idx, _SALT_POLICY)
    return world_seed, init_seed, policy_seed


def run_policy_episode(
    method: str,
    spec,
    world_seed: int,
    init_seed: int,
    policy_seed: int,
    search: SearchConfig,
    bundle: ModelBundle | None,
    episode_id: str,
    oracle_search: SearchConfig | None = None,
    perturbation_scale: float = 0.03,
) -> RegraspResult:
    w = spawn_scene(spec, world_seed)
    if method == "cylinder":
        result, _ = cylinder_baseline_episode(w, episode_id=episode_id, world_seed=world_seed)
        return result
    rng = np.random.default_rng(np.random.SeedSequence((init_seed,)))
    w0 = initialize_episode(w, rng, perturbation_scale=perturbation_scale)
    if method == "random":
        result, _ = random_episode(
            w0, search, episode_id=episode_id, world_seed=world_seed,
            init_seed=init_seed, policy_seed=policy_seed,
        )
        return result
    if method == "oracle":
        chooser = oracle_chooser()
        cfg = oracle_search if oracle_search is not None else search
    else:
        if bundle is None:
            raise ConfigError(f"method {method!r} needs a model checkpoint")
        objective = "min_force" if method == "min_force" else "max_success"
        chooser = predictor_chooser(bundle, objective)
        cfg = search
    result, _ = regrasp_episode(
        w0, chooser, cfg, episode_id=episode_id, method=method,
        world_seed=world_seed, init_seed=init_seed, policy_seed=policy_seed,
    )
    return result


def cmd_eval_policy(config: dict, seed: int, out: Path) -> dict:
    objects = resolve_object_set(config.get("objects", "test_hard"))
    episodes = int(config.get("episodes_per_object", 50))
    methods = list(config.get("methods", ["fusion", "cylinder", "random"]))
    search = _search(config, seed)
    bundles: dict[str, ModelBundle | None] = {}
    checkpoints = dict(config.get("checkpoints", {}))
    if config.get("checkpoint"):
        checkpoints.setdefault("fusion", config["checkpoint"])
    for method in methods:
        if method in ("cylinder", "random", "oracle"):
            bundles[method] = None
        else:
            if method not in checkpoints:
                raise ConfigError(f"eval-policy method {method!r} needs a checkpoint")
            bundles[method] = load_model(checkpoints[method])
    oracle_search = None
    if "oracle" in methods:
        oracle_search = SearchConfig(
            n_random=int(config.get("oracle_candidates", 48)),
            n_force_sweep=12,
            lift_threshold=search.lift_threshold,
            max_regrasps=search.max_regrasps,
            seed=search.seed,
        )
    reports = {m: EvalReport(method=m) for m in methods}
    traces: dict[str, list[RegraspResult]] = {m: [] for m in methods}
    for obj_idx, spec in enumerate(objects):
        for ep in range(episodes):
            world_seed, init_seed, policy_seed = _episode_worlds(spec, obj_idx, ep, seed)
            for method in methods:
                episode_id = f"{method}-{spec.name}-{ep:03d}"
                result = run_policy_episode(
                    method, spec, world_seed, init_seed, policy_seed,
                    search, bundles[method], episode_id, oracle_search,
                )
                reports[method].add(result)
                traces[method].append(result)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for method in methods:
        rep = reports[method]
        for name, (succ, trials) in sorted(rep.per_object.items()):
            rows.append([method, name, succ, trials, f"{succ / trials:.6f}"])
        rows.append([method, "ALL", rep.successes, rep.trials, f"{rep.success_rate:.6f}"])
    write_csv(out / "eval_policy.csv", ["method", "object", "successes", "trials", "rate"], rows)
    for method in methods:
        save_traces(out / f"traces_{method}.jsonl", traces[method])
        rep = reports[method]
        if rep.success_forces:
            counts, edges = np.histogram(
                rep.success_forces, bins=8, range=(FORCE_MIN, FORCE_MAX)
            )
            centers = 0.5 * (edges[:-1] + edges[1:])
            write_dat(
                out / f"force_hist_{method}.dat",
                ["force_bin_center", "count"],
                [[c, float(n)] for c, n in zip(centers, counts)],
            )
    report = {
        "command": "eval-policy",
        "objects": [s.name for s in objects],
        "episodes_per_object": episodes,
        "methods": {m: reports[m].to_obj() for m in methods},
        "reference": REFERENCE_POLICY,
    }
    write_json(out / "eval_policy.json", report)
    set_key = "hard" if "hard" in config.get("objects", "test_hard") else "easy"
    print_reference(
        [
            f"policy average on {set_key} set, {m}: {v:.1f} %"
            for m, v in REFERENCE_POLICY[set_key].items()
        ]
    )
    return {
        "command": "eval-policy",
        "success_rates": {m: reports[m].success_rate for m in methods},
        "out": str(out),
    }


def cmd_eval_min_force(config: dict, seed: int, out: Path) -> dict:
    bundle = load_model(_require(config, "checkpoint", "eval-min-force"))
    object_name = config.get("object", "easy_cube")
    episodes = int(config.get("episodes", 100))
    search = _search(config, seed)
    spec = _find_object(object_name, config.get("objects"))
    reports = {m: EvalReport(method=m) for m in ("max_success", "min_force")}
    traces: dict[str, list[RegraspResult]] = {m: [] for m in reports}
    for ep in range(episodes):
        world_seed, init_seed, policy_seed = _episode_worlds(spec, 0, ep, seed)
        for method in reports:
            result = run_policy_episode(
                method, spec, world_seed, init_seed, policy_seed,
                search, bundle, f"{method}-{spec.name}-{ep:03d}",
            )
            reports[method].add(result)
            traces[method].append(result)
    out.mkdir(parents=True, exist_ok=True)
    for method, tr in traces.items():
        save_traces(out / f"traces_{method}.jsonl", tr)
        rep = reports[method]
        if rep.success_forces:
            counts, edges = np.histogram(
                rep.success_forces, bins=8, range=(FORCE_MIN, FORCE_MAX)
            )
            centers = 0.5 * (edges[:-1] + edges[1:])
            write_dat(
                out / f"force_hist_{method}.dat",
                ["force_bin_center", "count"],
                [[c, float(n)] for c, n in zip(centers, counts)],
            )
    fmax = reports["max_success"].mean_success_force
    fmin = reports["min_force"].mean_success_force
    reduction = None
    if fmax and fmin:
        reduction = 1.0 - fmin / fmax
    report = {
        "command": "eval-min-force",
        "object": spec.name,
        "episodes": episodes,
        "max_success": reports["max_success"].to_obj(),
        "min_force": reports["min_force"].to_obj(),
        "force_reduction": reduction,
        "reference": REFERENCE_MIN_FORCE,
    }
    write_json(out / "eval_min_force.json", report)
    ref = REFERENCE_MIN_FORCE["fusion"]
    print_reference(
        [
            f"min-force study, fusion: success {ref['success_max']:.0f} vs "
            f"{ref['success_min']:.0f} %, mean force {ref['force_max']:.0f} vs "
            f"{ref['force_min']:.0f} N",
            "min-force study, vision only: success 76 vs 76 %, mean force 18 vs 6 N",
        ]
    )
    return {
        "command": "eval-min-force",
        "success_rates": {m: reports[m].success_rate for m in reports},
        "mean_success_force": {"max_success": fmax, "min_force": fmin},
        "force_reduction": reduction,
        "out": str(out),
    }


def _find_object(name: str, object_set: str | None):
    if object_set is not None:
        pool = list(resolve_object_set(object_set))
    else:
        library = builtin_library()
        pool = [s for group in library.values() for s in group]
    for spec in pool:
        if spec.name == name:
            return spec
    raise ConfigError(f"unknown object {name!r}")


# --- model-introspection sweeps ----------------------------------------------


def sample_contact_states(
    objects,
    seed: int,
    n_stable: int,
    n_corner: int,
    max_attempts: int = 20000,
    perturbation_scale: float = 0.05,
) -> tuple[list[GraspState], list[GraspState]]:
    """Probe random scenes and bucket closed-jaw states by contact quality.

    Stable: both fingers contacting away from polygon corners.  Corner: both
    contacting with at least one patch near a corner, the configuration where
    squeezing harder tends to eject the object.
    """
    from regrasp.datagen import sample_initial_grasp
    from regrasp.simworld import InvalidTrialError

    stable: list[GraspState] = []
    corner: list[GraspState] = []
    attempt = 0
    while (len(stable) < n_stable or len(corner) < n_corner) and attempt < max_attempts:
        spec = objects[attempt % len(objects)]
        w = spawn_scene(spec, _derive(seed, attempt, _SALT_STATES))
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt, _SALT_STATES)))
        attempt += 1
        pose, force = sample_initial_grasp(w, rng, perturbation_scale=perturbation_scale)
        try:
            wc = place_gripper(w, pose, force, close=True)
        except InvalidTrialError:
            continue
        if not wc.in_contact:
            continue
        is_corner = wc.contact_left.corner or wc.contact_right.corner
        if is_corner and len(corner) < n_corner:
            corner.append(observe(wc))
        elif not is_corner and len(stable) < n_stable:
            stable.append(observe(wc))
    if len(stable) < n_stable or len(corner) < n_corner:
        raise RuntimeError(
            f"state sampling exhausted: {len(stable)}/{n_stable} stable, "
            f"{len(corner)}/{n_corner} corner"
        )
    return stable, corner


def force_sweep_curves(
    bundle: ModelBundle, states: Sequence[GraspState], n_points: int = 22
) -> tuple[np.ndarray, np.ndarray]:
    """(forces, per-state probability curves) for zero-motion force actions."""
    forces = np.linspace(FORCE_MIN, FORCE_MAX, n_points)
    curves = np.zeros((len(states), n_points))
    for i, s in enumerate(states):
        actions = [Action(0.0, 0.0, 0.0, 0.0, float(f - s.force)) for f in forces]
        curves[i] = bundle.predict_batch(s, actions)
    return forces, curves


def monotone_fraction(curves: np.ndarray, tol: float = SWEEP_TOL) -> float:
    """Fraction of curves that never drop more than tol between sweep points."""
    diffs = np.diff(curves, axis=1)
    ok = np.all(diffs >= -tol, axis=1)
    return float(np.mean(ok)) if len(curves) else 0.0


def peak_drop_fraction(curves: np.ndarray, tol: float = SWEEP_TOL) -> float:
    """Fraction of curves whose endpoint sits more than tol below their peak."""
    drop = curves.max(axis=1) - curves[:, -1]
    return float(np.mean(drop > tol)) if len(curves) else 0.0


def cmd_analyze_force_sweep(config: dict, seed: int, out: Path) -> dict:
    bundle = load_model(_require(config, "checkpoint", "analyze-force-sweep"))
    objects = list(resolve_object_set(config.get("objects", "train")))
    n_stable = int(config.get("n_stable", 40))
    n_corner = int(config.get("n_corner", 25))
    stable, corner = sample_contact_states(objects, seed, n_stable, n_corner)
    forces, stable_curves = force_sweep_curves(bundle, stable)
    _, corner_curves = force_sweep_curves(bundle, corner)
    out.mkdir(parents=True, exist_ok=True)
    for name, curves in (("stable", stable_curves), ("corner", corner_curves)):
        rows = [
            [
                forces[j],
                float(curves[:, j].mean()),
                float(np.quantile(curves[:, j], 0.1)),
                float(np.quantile(curves[:, j], 0.9)),
            ]
            for j in range(len(forces))
        ]
        write_dat(
            out / f"force_sweep_{name}.dat",
            ["force", "mean_p", "p10", "p90"],
            rows,
        )
    report = {
        "command": "analyze-force-sweep",
        "n_stable": len(stable),
        "n_corner": len(corner),
        "tolerance": SWEEP_TOL,
        "stable_monotone_fraction": monotone_fraction(stable_curves),
        "corner_peak_drop_fraction": peak_drop_fraction(corner_curves),
        "stable_mean_curve": [float(v) for v in stable_curves.mean(axis=0)],
        "corner_mean_curve": [float(v) for v in corner_curves.mean(axis=0)],
        "forces": [float(f) for f in forces],
    }
    write_json(out / "force_sweep.json", report)
    return {
        "command": "analyze-force-sweep",
        "stable_monotone_fraction": report["stable_monotone_fraction"],
        "corner_peak_drop_fraction": report["corner_peak_drop_fraction"],
        "out": str(out),
    }


def sample_height_states(
    objects,
    seed: int,
    n_top: int,
    n_bottom: int,
    max_attempts: int = 30000,
) -> tuple[list[GraspState], list[GraspState]]:
    """Closed-jaw states bucketed by grip height on the object.

    Top-edge: jaws near the object's top where only a thin band is held.
    Bottom: jaws near the table.
    """
    from regrasp.datagen import sample_initial_grasp
    from regrasp.simworld import InvalidTrialError

    top: list[GraspState] = []
    bottom: list[GraspState] = []
    attempt = 0
    while (len(top) < n_top or len(bottom) < n_bottom) and attempt < max_attempts:
        spec = objects[attempt % len(objects)]
        w = spawn_scene(spec, _derive(seed, attempt, _SALT_STATES, 1))
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt, _SALT_STATES, 1)))
        attempt += 1
        pose, force = sample_initial_grasp(w, rng)
        try:
            wc = place_gripper(w, pose, force, close=True)
        except InvalidTrialError:
            continue
        if not wc.in_contact:
            continue
        frac = wc.gripper.z / wc.object.height
        if frac >= 0.7 and len(top) < n_top:
            top.append(observe(wc))
        elif frac <= 0.25 and len(bottom) < n_bottom:
            bottom.append(observe(wc))
    if len(top) < n_top or len(bottom) < n_bottom:
        raise RuntimeError(
            f"state sampling exhausted: {len(top)}/{n_top} top, {len(bottom)}/{n_bottom} bottom"
        )
    return top, bottom


def height_sweep_curves(
    bundle: ModelBundle, states: Sequence[GraspState], n_points: int = 21
) -> tuple[np.ndarray, np.ndarray]:
    """(dz offsets including 0, per-state probability curves), motion-only dz."""
    dzs = np.linspace(-MAX_TRANSLATION, MAX_TRANSLATION, n_points)
    curves = np.zeros((len(states), n_points))
    for i, s in enumerate(states):
        actions = [Action(0.0, 0.0, float(dz), 0.0, 0.0) for dz in dzs]
        curves[i] = bundle.predict_batch(s, actions)
    return dzs, curves


def downward_preference_fraction(curves: np.ndarray) -> float:
    """Fraction of states scoring the full downward move above the full upward one."""
    if not len(curves):
        return 0.0
    return float(np.mean(curves[:, 0] > curves[:, -1]))


def cmd_analyze_height_sweep(config: dict, seed: int, out: Path) -> dict:
    bundle = load_model(_require(config, "checkpoint", "analyze-height-sweep"))
    objects = list(resolve_object_set(config.get("objects", "train")))
    n_top = int(config.get("n_top", 30))
    n_bottom = int(config.get("n_bottom", 30))
    top, bottom = sample_height_states(objects, seed, n_top, n_bottom)
    dzs, top_curves = height_sweep_curves(bundle, top)
    _, bottom_curves = height_sweep_curves(bundle, bottom)
    assert 0.0 in dzs
    out.mkdir(parents=True, exist_ok=True)
    for name, curves in (("top", top_curves), ("bottom", bottom_curves)):
        rows = [
            [dzs[j], float(curves[:, j].mean())] for j in range(len(dzs))
        ]
        write_dat(out / f"height_sweep_{name}.dat", ["dz", "mean_p"], rows)
    report = {
        "command": "analyze-height-sweep",
        "n_top": len(top),
        "n_bottom": len(bottom),
        "dz": [float(v) for v in dzs],
        "top_downward_fraction": downward_preference_fraction(top_curves),
        "bottom_downward_fraction": downward_preference_fraction(bottom_curves),
        "top_mean_curve": [float(v) for v in top_curves.mean(axis=0)],
        "bottom_mean_curve": [float(v) for v in bottom_curves.mean(axis=0)],
    }
    write_json(out / "height_sweep.json", report)
    return {
        "command": "analyze-height-sweep",
        "top_downward_fraction": report["top_downward_fraction"],
        "bottom_downward_fraction": report["bottom_downward_fraction"],
        "out": str(out),
    }


ACTION_HIST_BINS = 8
# signed panels use an odd count so zero-motion actions (the pure force
# adjustments from the sweep tail) fall in a bin centred on zero instead of
# being pushed to the positive side
ACTION_HIST_BINS_SIGNED = 9


def action_histograms(traces: Sequence[RegraspResult]) -> dict:
    """Four histograms over actions taken in successful episodes.

    Placement steps without a relative action (the cylinder baseline) are
    excluded; forces are the resulting commanded force of each step.
    """
    dz, dyaw, planar, force = [], [], [], []
    n_episodes = 0
    for result in traces:
        if result.outcome != 1:
            continue
        n_episodes += 1
        for step in result.steps:
            if step.action is None:
                continue
            dz.append(step.action.dz)
            dyaw.append(step.action.dyaw)
            planar.append(float(np.hypot(step.action.dx, step.action.dy)))
            force.append(step.force)
    panels = {}
    max_planar = float(np.hypot(MAX_TRANSLATION, MAX_TRANSLATION))
    for name, values, lo, hi in (
        ("dz", dz, -MAX_TRANSLATION, MAX_TRANSLATION),
        ("dyaw", dyaw, -MAX_ROTATION, MAX_ROTATION),
        ("planar", planar, 0.0, max_planar),
        ("force", force, FORCE_MIN, FORCE_MAX),
    ):
        n_bins = ACTION_HIST_BINS_SIGNED if lo < 0.0 else ACTION_HIST_BINS
        counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
        centers = 0.5 * (edges[:-1] + edges[1:])
        mode = float(centers[int(np.argmax(counts))]) if counts.sum() else None
        panels[name] = {
            "counts": [int(c) for c in counts],
            "edges": [float(e) for e in edges],
            "centers": [float(c) for c in centers],
            "mode_center": mode,
        }
        if int(sum(panels[name]["counts"])) != len(values):
            raise ValueError("histogram lost mass")
    panels["n_actions"] = len(dz)
    panels["n_successful_episodes"] = n_episodes
    return panels


def cmd_action_histogram(config: dict, seed: int, out: Path) -> dict:
    paths = config.get("traces")
    if not paths:
        raise ConfigError("action-hist requires config key 'traces'")
    if isinstance(paths, str):
        paths = [paths]
    traces: list[RegraspResult] = []
    for p in paths:
        traces.extend(load_traces(p))
    panels = action_histograms(traces)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("dz", "dyaw", "planar", "force"):
        panel = panels[name]
        write_dat(
            out / f"action_hist_{name}.dat",
            [f"{name}_bin_center", "count"],
            [[c, float(n)] for c, n in zip(panel["centers"], panel["counts"])],
        )
    report = {"command": "action-hist", **panels}
    write_json(out / "action_hist.json", report)
    return {
        "command": "action-hist",
        "n_actions": panels["n_actions"],
        "n_successful_episodes": panels["n_successful_episodes"],
        "dz_mode_center": panels["dz"]["mode_center"],
        "out": str(out),
    }


def cmd_replay(config: dict, seed: int, out: Path, episode_id: str) -> dict:
    if config.get("traces"):
        return _replay_trace(config, out, episode_id)
    if config.get("collect"):
        return _replay_collection(config, out, episode_id)
    raise ConfigError("replay needs either 'traces' or 'collect' in the config")


def _replay_trace(config: dict, out: Path, episode_id: str) -> dict:
    traces = load_traces(config["traces"])
    match = [t for t in traces if t.episode_id == episode_id]
    if not match:
        raise ConfigError(f"episode {episode_id!r} not found in {config['traces']}")
    original = match[0]
    spec = _find_object(original.object_id, config.get("objects"))
    bundle = None
    if original.method not in ("cylinder", "random", "oracle"):
        bundle = load_model(_require(config, "checkpoint", "replay"))
    search = _search(config, original.policy_seed)
    oracle_search = None
    if original.method == "oracle":
        oracle_search = SearchConfig(
            n_random=int(config.get("oracle_candidates", 48)),
            n_force_sweep=12,
            lift_threshold=search.lift_threshold,
            max_regrasps=search.max_regrasps,
            seed=search.seed,
        )
    redone = run_policy_episode(
        original.method, spec, original.world_seed, original.init_seed,
        original.policy_seed, search, bundle, episode_id, oracle_search,
    )
    match_ok = redone.to_obj() == original.to_obj()
    report = {
        "command": "replay",
        "episode_id": episode_id,
        "kind": "trace",
        "match": match_ok,
        "original_outcome": original.outcome,
        "replayed_outcome": redone.outcome,
    }
    write_json(out / "replay.json", report)
    if not match_ok:
        raise ReplayMismatch(f"episode {episode_id!r} diverged on replay")
    return report


def _replay_collection(config: dict, out: Path, episode_id: str) -> dict:
    section = dict(config["collect"])
    seed, _, _ = parse_episode_id(episode_id)
    cfg = _collect_config(section, section.get("seed", seed))
    bundle = None
    if cfg.policy == "on_policy" and cfg.checkpoint is not None:
        bundle = load_model(cfg.checkpoint)
    regenerated = replay_episode(cfg, episode_id, bundle=bundle)
    report = {
        "command": "replay",
        "episode_id": episode_id,
        "kind": "collection",
        "n_trials": len(regenerated),
        "outcomes": [r.outcome for r in regenerated],
    }
    if config.get("dataset"):
        dataset = Dataset.load_jsonl(config["dataset"])
        primaries = [
            r for i, r in enumerate(dataset.records)
            if i % 3 == 0 and r.episode_id == episode_id
        ]
        if not primaries:
            raise ConfigError(f"episode {episode_id!r} not found in {config['dataset']}")
        agree = all(a == b for a, b in zip(primaries, regenerated))
        report["match"] = agree and len(primaries) <= len(regenerated)
        report["n_dataset_records"] = len(primaries)
        write_json(out / "replay.json", report)
        if not report["match"]:
            raise ReplayMismatch(f"episode {episode_id!r} diverged on replay")
    else:
        write_json(out / "replay.json", report)
    return report
