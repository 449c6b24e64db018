#!/usr/bin/env python3
"""Generate the desk-scale synthetic shape datasets as CNDS containers.

Writes train/val/test splits for the strong model plus a small, noisier
"weak" training split used to manufacture weak models.
"""

import argparse
from pathlib import Path

from convmod.store import save_dataset
from convmod.synth import make_shapes_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="data")
    parser.add_argument("--classes", type=int, default=3)
    parser.add_argument("--size", type=int, default=16)
    parser.add_argument("--train", type=int, default=1800)
    parser.add_argument("--val", type=int, default=450)
    parser.add_argument("--test", type=int, default=600)
    parser.add_argument("--weak-train", type=int, default=150)
    parser.add_argument("--noise", type=float, default=0.12)
    parser.add_argument("--weak-label-noise", type=float, default=0.15)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": make_shapes_dataset(args.train, args.classes, args.size,
                                     noise=args.noise, seed=args.seed),
        "val": make_shapes_dataset(args.val, args.classes, args.size,
                                   noise=args.noise, seed=args.seed + 1),
        "test": make_shapes_dataset(args.test, args.classes, args.size,
                                    noise=args.noise, seed=args.seed + 2),
        "weak_train": make_shapes_dataset(
            args.weak_train, args.classes, args.size, noise=args.noise,
            label_noise=args.weak_label_noise, seed=args.seed + 3),
    }
    for name, ds in splits.items():
        path = out / f"{name}.cnds"
        path.write_bytes(save_dataset(ds))
        print(f"wrote {path} ({len(ds)} samples, {ds.num_classes} classes)")


if __name__ == "__main__":
    main()
