"""Full-scale pilot of the two-phase pipeline; prints margin numbers.

Not part of the test suite; used to size datasets and check headroom before
freezing thresholds.  Phase 1 trains a seed model on random probes; phase 2
recollects on-policy with that model and retrains on the union, calibrating
on a half-random, half-on-policy validation set.
"""

import json
import sys
import time
from pathlib import Path

from regrasp.cli import main
from regrasp.core import Dataset, merge_datasets

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/pilot")
OUT.mkdir(parents=True, exist_ok=True)


def run(args):
    t0 = time.time()
    code = main(args)
    print(f"--- {' '.join(args[:1])} exited {code} in {time.time()-t0:.1f}s", flush=True)
    assert code == 0, args


def wjson(path, obj):
    path.write_text(json.dumps(obj))


t_start = time.time()

# phase 1: random probes
wjson(OUT / "collect_r1.json", {"n_trials": 6000, "object_set": "train"})
run(["collect", "--config", str(OUT / "collect_r1.json"), "--seed", "0",
     "--out", str(OUT / "r1")])
wjson(OUT / "train_r1.json", {
    "dataset": str(OUT / "r1/dataset.jsonl"),
    "model": {"preset": "full", "variant": "fusion"},
})
run(["train", "--config", str(OUT / "train_r1.json"), "--seed", "11",
     "--out", str(OUT / "model_r1")])

# phase 2: on-policy recollection with the seed model
wjson(OUT / "collect_r2.json", {
    "n_trials": 8500, "object_set": "train", "policy": "on_policy",
    "checkpoint": str(OUT / "model_r1/checkpoint.json"),
})
run(["collect", "--config", str(OUT / "collect_r2.json"), "--seed", "202",
     "--out", str(OUT / "r2")])

wjson(OUT / "collect_valr.json", {"n_trials": 320, "object_set": "train"})
run(["collect", "--config", str(OUT / "collect_valr.json"), "--seed", "303",
     "--out", str(OUT / "val_r")])
wjson(OUT / "collect_valp.json", {
    "n_trials": 320, "object_set": "train", "policy": "on_policy",
    "checkpoint": str(OUT / "model_r1/checkpoint.json"),
})
run(["collect", "--config", str(OUT / "collect_valp.json"), "--seed", "404",
     "--out", str(OUT / "val_p")])
val = merge_datasets([
    Dataset.load_jsonl(OUT / "val_r/dataset.jsonl"),
    Dataset.load_jsonl(OUT / "val_p/dataset.jsonl"),
])
val.save_jsonl(OUT / "val.jsonl")
print(f"val: {len(val)} records, positive rate {val.label_rate():.3f}", flush=True)

wjson(OUT / "train_final.json", {
    "dataset": [str(OUT / "r1/dataset.jsonl"), str(OUT / "r2/dataset.jsonl")],
    "validation": str(OUT / "val.jsonl"),
    "model": {"preset": "full", "variant": "fusion"},
})
run(["train", "--config", str(OUT / "train_final.json"), "--seed", "11",
     "--out", str(OUT / "model")])

wjson(OUT / "cal.json", {
    "checkpoint": str(OUT / "model/checkpoint.json"),
    "validation": str(OUT / "val.jsonl"),
})
run(["calibrate", "--config", str(OUT / "cal.json"), "--out", str(OUT / "cal")])

wjson(OUT / "evalp.json", {
    "checkpoint": str(OUT / "cal/checkpoint.json"),
    "objects": "test_hard",
    "episodes_per_object": 50,
    "methods": ["fusion", "cylinder", "random"],
})
run(["eval-policy", "--config", str(OUT / "evalp.json"), "--seed", "7",
     "--out", str(OUT / "evalp")])

wjson(OUT / "minf.json", {
    "checkpoint": str(OUT / "cal/checkpoint.json"),
    "object": "easy_cube",
    "episodes": 100,
})
run(["eval-min-force", "--config", str(OUT / "minf.json"), "--seed", "7",
     "--out", str(OUT / "minf")])

wjson(OUT / "fs.json", {"checkpoint": str(OUT / "cal/checkpoint.json")})
run(["analyze-force-sweep", "--config", str(OUT / "fs.json"), "--seed", "5",
     "--out", str(OUT / "fs")])
run(["analyze-height-sweep", "--config", str(OUT / "fs.json"), "--seed", "5",
     "--out", str(OUT / "hs")])
wjson(OUT / "ah.json", {"traces": str(OUT / "evalp/traces_fusion.jsonl")})
run(["action-hist", "--config", str(OUT / "ah.json"), "--out", str(OUT / "ah")])

wjson(OUT / "evalm.json", {
    "dataset": str(OUT / "r1/dataset.jsonl"),
    "variants": ["chance", "fusion", "no_action"],
    "k": 3,
})
run(["eval-model", "--config", str(OUT / "evalm.json"), "--seed", "3",
     "--out", str(OUT / "evalm")])

print(f"pilot done in {(time.time()-t_start)/60:.1f} min", flush=True)
