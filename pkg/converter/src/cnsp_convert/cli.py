"""Converter CLI: ``convert`` a checkpoint, ``verify`` a container."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .container import read_weights
from .convert import (
    ConversionError,
    parse_map_file,
    convert_checkpoint,
    read_logits_csv,
    verify_container,
)
from .spec_text import parse_spec_template


def cmd_convert(args) -> int:
    mapping = None
    if args.map:
        mapping = parse_map_file(Path(args.map).read_text())
    container, spec_text = convert_checkpoint(
        args.checkpoint, Path(args.template).read_text(), mapping)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "weights.cnsp").write_bytes(container)
    (out / "model.spec").write_text(spec_text)
    tensors = read_weights(container)
    print(f"wrote {out / 'weights.cnsp'} ({len(tensors)} tensors) and "
          f"{out / 'model.spec'}")
    return 0


def cmd_verify(args) -> int:
    container = Path(args.weights).read_bytes()
    spec_text = Path(args.spec).read_text()
    inputs = _load_inputs(args.inputs, parse_spec_template(spec_text).input_dims)
    reference = read_logits_csv(Path(args.reference).read_text())
    runner = tuple(args.runner.split()) if args.runner else ("convmod",)
    report = verify_container(container, spec_text, inputs, reference,
                              tolerance=args.tolerance, runner=runner)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max abs logit deviation {report.max_abs_deviation:.3e} "
          f"over {report.samples} inputs (tolerance {report.tolerance:.1e})")
    return 0 if report.passed else 1


def _load_inputs(path: str, input_dims) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npz":
        with np.load(p) as archive:
            inputs = np.asarray(archive[archive.files[0]], dtype=np.float32)
    elif p.suffix == ".npy":
        inputs = np.load(p).astype(np.float32)
    else:
        raise ConversionError(f"inputs must be .npy/.npz, got {p.suffix!r}")
    if inputs.shape[1:] != tuple(input_dims):
        raise ConversionError(
            f"inputs have shape {inputs.shape[1:]}, template expects {input_dims}")
    return inputs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cnsp-convert",
        description="Convert state-dict checkpoints to CNSP weight containers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="checkpoint -> CNSP + spec text")
    p.add_argument("--checkpoint", required=True, help=".pt/.pth/.npz state dict")
    p.add_argument("--template", required=True, help="model-spec text file")
    p.add_argument("--map", help="explicit 'source -> target [transform]' lines")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("verify", help="compare container logits to a reference")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--inputs", required=True, help=".npy/.npz input batch")
    p.add_argument("--reference", required=True, help="label,logit* CSV")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--runner", help="toolkit command (default: convmod)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
