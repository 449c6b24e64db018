#!/usr/bin/env python3
"""End-to-end desk experiment driven through the CLI.

Generates data, trains the strong model, analyzes and modularizes it,
trains an overfitting weak model, then patches the weak model's worst
class with the strong model's module and prints the report.
"""

import argparse
import subprocess
import sys
from pathlib import Path

import numpy as np

from convmod import engine, patching, store

REPO = Path(__file__).resolve().parent.parent


def run(*cmd: str) -> None:
    print("+", " ".join(cmd))
    subprocess.run(cmd, check=True)


def worst_class(weak_spec_path: Path, weak_weights_path: Path, val_path: Path) -> int:
    spec = store.load_model_spec(weak_spec_path.read_text())
    weights = store.load_weights(weak_weights_path.read_bytes())
    val = store.load_dataset(val_path.read_bytes())
    pred = np.empty(len(val), dtype=np.int64)
    for start in range(0, len(val), 256):
        logits = engine.model_forward_batch(spec, weights, val.images[start:start + 256])
        pred[start:start + 256] = logits.argmax(axis=1)
    metrics = patching.class_metrics(pred, val.labels, val.num_classes)
    f1 = [(m.f1 if m.f1 is not None else 1.0) for m in metrics]
    tc = int(np.argmin(f1))
    print(f"weak per-class F1 on val: {[round(v, 3) for v in f1]} -> TC {tc}")
    return tc


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--work-dir", default="desk_run")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=4)
    args = parser.parse_args()

    work = Path(args.work_dir)
    data = work / "data"
    run(sys.executable, str(REPO / "scripts" / "make_desk_data.py"),
        "--out-dir", str(data), "--seed", str(args.seed))

    strong = work / "strong"
    run("convmod", "train",
        "--spec", str(REPO / "presets" / "simcnn_desk.spec"),
        "--dataset", str(data / "train.cnds"),
        "--out-dir", str(strong),
        "--lr", "0.05", "--epochs", "40", "--batch-size", "32",
        "--dropout", "0.1", "--seed", str(args.seed))
    run("convmod", "eval",
        "--spec", str(strong / "model.spec"),
        "--weights", str(strong / "weights.cnsp"),
        "--dataset", str(data / "val.cnds"))

    mods = work / "modules"
    run("convmod", "modularize",
        "--spec", str(strong / "model.spec"),
        "--weights", str(strong / "weights.cnsp"),
        "--train-dataset", str(data / "train.cnds"),
        "--val-dataset", str(data / "val.cnds"),
        "--out-dir", str(mods),
        "--population", "20", "--parents", "10", "--generations", "30",
        "--beam", "10", "--seed", str(args.seed), "--threads", str(args.threads))

    weak = work / "weak_overfit"
    run("convmod", "train",
        "--spec", str(REPO / "presets" / "simcnn_desk.spec"),
        "--dataset", str(data / "weak_train.cnds"),
        "--out-dir", str(weak),
        "--lr", "0.05", "--epochs", "60", "--batch-size", "16",
        "--weak", "overfit", "--seed", str(args.seed + 100))

    tc = worst_class(weak / "model.spec", weak / "weights.cnsp", data / "val.cnds")
    run("convmod", "patch",
        "--weak-spec", str(weak / "model.spec"),
        "--weak-weights", str(weak / "weights.cnsp"),
        "--module-spec", str(mods / f"module_class{tc}.spec"),
        "--module-weights", str(mods / f"module_class{tc}.cnsp"),
        "--tc", str(tc),
        "--train-dataset", str(data / "train.cnds"),
        "--test-dataset", str(data / "test.cnds"),
        "--out-dir", str(work / "patch"))

    run("convmod", "report",
        "--spec", str(mods / f"module_class{tc}.spec"),
        "--parent-spec", str(strong / "model.spec"))


if __name__ == "__main__":
    main()
