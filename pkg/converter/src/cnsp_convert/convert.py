"""Checkpoint-to-CNSP conversion and logit verification.

Checkpoints are state-dict style (tensor name -> array), read from torch
.pt/.pth files or numpy .npz archives. Conversion renames tensors to the
container's convN/fcN scheme, optionally transposing fc weights, and never
changes a numeric value: inputs must already be float32.

Verification runs the converted model through the modularization toolkit's
CLI (an external process; the container format plus the ``eval
--logits-out`` CSV are the only coupling) and compares against logits
computed in the source framework.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_weights, write_dataset, write_weights
from .spec_text import SpecTemplate, parse_spec_template

BATCHNORM_KEY_PARTS = ("running_mean", "running_var", "num_batches_tracked")
TRANSFORMS = ("none", "transpose")
DEFAULT_RUNNER = ("convmod",)


class ConversionError(Exception):
    pass


@dataclass(frozen=True)
class MapEntry:
    source: str
    target: str
    transform: str = "none"

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ConversionError(
                f"unsupported transform {self.transform!r} for {self.source!r}; "
                f"only layout changes are allowed: {TRANSFORMS}"
            )


def parse_map_file(text: str) -> list[MapEntry]:
    """One entry per line: ``source -> target [transform]``."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" not in line:
            raise ConversionError(f"map line {lineno}: expected 'source -> target'")
        source, rest = (p.strip() for p in line.split("->", 1))
        parts = rest.split()
        if not parts:
            raise ConversionError(f"map line {lineno}: missing target name")
        target = parts[0]
        transform = parts[1] if len(parts) > 1 else "none"
        entries.append(MapEntry(source, target, transform))
    return entries


# ---------------------------------------------------------------------------
# Checkpoint loading
# ---------------------------------------------------------------------------

def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as archive:
            return {name: np.asarray(archive[name]) for name in archive.files}
    if path.suffix in (".pt", ".pth"):
        try:
            import torch
        except ImportError as exc:
            raise ConversionError(
                f"reading {path.name} requires torch to be installed") from exc
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if hasattr(payload, "state_dict"):
            payload = payload.state_dict()
        if not isinstance(payload, dict):
            raise ConversionError(
                f"{path.name}: expected a state dict, got {type(payload).__name__}")
        out = {}
        for name, value in payload.items():
            out[name] = value.detach().cpu().numpy() if hasattr(value, "detach") \
                else np.asarray(value)
        return out
    raise ConversionError(
        f"unsupported checkpoint format {path.suffix!r}; use .pt, .pth, or .npz")


def reject_batchnorm(state: dict[str, np.ndarray]) -> None:
    for name in state:
        if any(part in name for part in BATCHNORM_KEY_PARTS):
            raise ConversionError(
                f"checkpoint carries a normalization tensor {name!r}; "
                f"batch-norm architectures are not expressible in a model spec"
            )


# ---------------------------------------------------------------------------
# Conversion
# ---------------------------------------------------------------------------

def _positional_map(state: dict[str, np.ndarray],
                    expected: dict[str, tuple[int, ...]]) -> list[MapEntry]:
    """Pair checkpoint tensors with spec tensors in stored order.

    Works for ordered state dicts (e.g. torch nn.Sequential) whose
    parameter order follows the layer chain; fc weights stored transposed
    are handled automatically.
    """
    sources = list(state)
    targets = list(expected)
    if len(sources) != len(targets):
        raise ConversionError(
            f"checkpoint has {len(sources)} tensors, template needs "
            f"{len(targets)}; pass an explicit --map file"
        )
    entries = []
    for source, target in zip(sources, targets):
        shape = tuple(state[source].shape)
        want = expected[target]
        if shape == want:
            entries.append(MapEntry(source, target))
        elif len(shape) == 2 and shape == want[::-1]:
            entries.append(MapEntry(source, target, "transpose"))
        else:
            raise ConversionError(
                f"tensor {source!r} has shape {shape}, but {target!r} needs "
                f"{want}; pass an explicit --map file"
            )
    return entries


def convert_checkpoint(
    checkpoint: str | Path,
    template_text: str,
    mapping: list[MapEntry] | None = None,
) -> tuple[bytes, str]:
    """Produce (CNSP bytes, spec text) from a checkpoint and spec template.

    Raises ConversionError naming the first missing tensor, shape mismatch,
    non-float32 tensor, or normalization tensor.
    """
    template = parse_spec_template(template_text)
    expected = template.expected_shapes()
    state = load_checkpoint(checkpoint)
    reject_batchnorm(state)
    if mapping is None:
        mapping = _positional_map(state, expected)

    produced: dict[str, np.ndarray] = {}
    for entry in mapping:
        if entry.source not in state:
            raise ConversionError(f"checkpoint is missing tensor {entry.source!r}")
        if entry.target not in expected:
            raise ConversionError(
                f"template has no tensor {entry.target!r} "
                f"(expected one of {sorted(expected)})")
        if entry.target in produced:
            raise ConversionError(f"tensor {entry.target!r} mapped twice")
        arr = state[entry.source]
        if entry.transform == "transpose":
            arr = arr.T
        if arr.dtype != np.float32:
            raise ConversionError(
                f"tensor {entry.source!r} has dtype {arr.dtype}; conversion is "
                f"float32 passthrough only"
            )
        if tuple(arr.shape) != expected[entry.target]:
            raise ConversionError(
                f"tensor {entry.source!r} -> {entry.target!r}: shape "
                f"{tuple(arr.shape)} does not match {expected[entry.target]}"
            )
        produced[entry.target] = arr

    missing = [name for name in expected if name not in produced]
    if missing:
        raise ConversionError(f"no checkpoint tensor mapped to {missing[0]!r}")
    # container order follows the template's layer order
    ordered = {name: produced[name] for name in expected}
    return write_weights(ordered), template.text


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class VerifyReport:
    max_abs_deviation: float
    tolerance: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.max_abs_deviation <= self.tolerance


def read_logits_csv(text: str) -> np.ndarray:
    lines = [line for line in text.strip().splitlines() if line]
    if not lines or not lines[0].startswith("label,"):
        raise ConversionError("reference logits file must be a label,logit* CSV")
    rows = [[float(v) for v in line.split(",")[1:]] for line in lines[1:]]
    return np.asarray(rows, dtype=np.float64)


def toolkit_logits(
    container: bytes,
    spec_text: str,
    inputs: np.ndarray,
    runner: tuple[str, ...] = DEFAULT_RUNNER,
) -> np.ndarray:
    """Logits for ``inputs`` computed by the toolkit CLI on the container."""
    template = parse_spec_template(spec_text)
    with tempfile.TemporaryDirectory(prefix="cnsp_verify_") as tmp:
        tmp_path = Path(tmp)
        (tmp_path / "model.spec").write_text(spec_text)
        (tmp_path / "weights.cnsp").write_bytes(container)
        labels = np.zeros(len(inputs), dtype=np.uint32)
        (tmp_path / "inputs.cnds").write_bytes(
            write_dataset(inputs, labels, template.num_classes))
        logits_path = tmp_path / "logits.csv"
        cmd = [*runner, "eval",
               "--spec", str(tmp_path / "model.spec"),
               "--weights", str(tmp_path / "weights.cnsp"),
               "--dataset", str(tmp_path / "inputs.cnds"),
               "--logits-out", str(logits_path)]
        result = subprocess.run(cmd, capture_output=True, text=True)
        if result.returncode != 0:
            raise ConversionError(
                f"toolkit evaluation failed (exit {result.returncode}): "
                f"{result.stderr.strip()}"
            )
        return read_logits_csv(logits_path.read_text())


def verify_container(
    container: bytes,
    spec_text: str,
    inputs: np.ndarray,
    reference_logits: np.ndarray,
    tolerance: float = 1e-4,
    runner: tuple[str, ...] = DEFAULT_RUNNER,
) -> VerifyReport:
    """Compare toolkit logits on the container against reference logits."""
    got = toolkit_logits(container, spec_text, inputs, runner)
    reference = np.asarray(reference_logits, dtype=np.float64)
    if got.shape != reference.shape:
        raise ConversionError(
            f"logit shapes differ: toolkit {got.shape} vs reference "
            f"{reference.shape}"
        )
    deviation = float(np.abs(got - reference).max()) if got.size else 0.0
    return VerifyReport(max_abs_deviation=deviation, tolerance=tolerance,
                        samples=len(reference))


def locate_deviation(container_a: bytes, container_b: bytes) -> str | None:
    """Name of the first tensor whose values differ between two containers."""
    a = read_weights(container_a)
    b = read_weights(container_b)
    for name in a:
        if name not in b or not np.array_equal(a[name], b[name]):
            return name
    for name in b:
        if name not in a:
            return name
    return None
