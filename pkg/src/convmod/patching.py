"""Patch a weak classifier's target class with a module from a strong model.

The weak model's logits pass through softmax; the module's own-class logit
is min-max normalized against its range on class-labelled training data
(clamped to [0, 1], since test-time logits can leave the training range)
and replaces the target-class entry of the softmaxed weak vector. Neither
model is retrained or modified.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .engine import model_forward_batch, softmax
from .store import LabeledDataset, ModelSpec, WeightStore, count_flops, count_kernels


class PatchError(Exception):
    pass


@dataclass(frozen=True)
class Calibration:
    """Range of a module's own-class logit over class-labelled training data."""

    min: float
    max: float
    class_id: int


@dataclass
class ClassMetrics:
    precision: float | None
    recall: float | None
    f1: float | None


@dataclass
class PatchReport:
    tc: int
    weak_metrics: list[ClassMetrics]
    patched_metrics: list[ClassMetrics]
    tc_precision_delta: float | None
    tc_recall_delta: float | None
    tc_f1_delta: float | None
    non_tc_accuracy_weak: float
    non_tc_accuracy_patched: float
    module_kernels: int
    module_flops: int


def calibrate_module(
    module_spec: ModelSpec,
    module_weights: WeightStore,
    train_dataset: LabeledDataset,
    class_id: int,
    batch_size: int = 256,
) -> Calibration:
    """Min/max of the module's class logit over class_id training samples."""
    idx = train_dataset.class_indices(class_id)
    if len(idx) == 0:
        raise PatchError(f"no training samples of class {class_id} to calibrate on")
    lo, hi = np.inf, -np.inf
    for start in range(0, len(idx), batch_size):
        xb = train_dataset.images[idx[start:start + batch_size]]
        logits = model_forward_batch(module_spec, module_weights, xb)
        col = logits[:, class_id]
        lo = min(lo, float(col.min()))
        hi = max(hi, float(col.max()))
    return Calibration(min=lo, max=hi, class_id=class_id)


def normalize_patch_logit(logit: np.ndarray | float, cal: Calibration) -> np.ndarray:
    """(x - min)/(max - min) clamped to [0, 1]; a degenerate range maps to 0.5."""
    x = np.asarray(logit, dtype=np.float64)
    if cal.max == cal.min:
        warnings.warn(
            f"degenerate calibration for class {cal.class_id} "
            f"(min == max == {cal.min}); normalized value fixed at 0.5",
            stacklevel=2,
        )
        return np.full_like(x, 0.5)
    return np.clip((x - cal.min) / (cal.max - cal.min), 0.0, 1.0)


def patched_scores_batch(
    weak_spec: ModelSpec,
    weak_weights: WeightStore,
    module_spec: ModelSpec,
    module_weights: WeightStore,
    cal: Calibration,
    x: np.ndarray,
) -> np.ndarray:
    """Softmaxed weak outputs with the TC entry replaced by the module's value."""
    weak_logits = model_forward_batch(weak_spec, weak_weights, x)
    module_logits = model_forward_batch(module_spec, module_weights, x)
    if weak_logits.shape[1] != module_logits.shape[1]:
        raise PatchError(
            f"weak model emits {weak_logits.shape[1]} logits, module "
            f"{module_logits.shape[1]}"
        )
    if not (0 <= cal.class_id < weak_logits.shape[1]):
        raise PatchError(f"target class {cal.class_id} out of range")
    scores = softmax(weak_logits).astype(np.float64)
    scores[:, cal.class_id] = normalize_patch_logit(
        module_logits[:, cal.class_id], cal
    )
    return scores


def patched_predict(
    weak_spec: ModelSpec,
    weak_weights: WeightStore,
    module_spec: ModelSpec,
    module_weights: WeightStore,
    cal: Calibration,
    x: np.ndarray,
) -> tuple[int, np.ndarray]:
    """(predicted class, patched score vector) for one input. Ties go low."""
    scores = patched_scores_batch(weak_spec, weak_weights, module_spec,
                                  module_weights, cal, np.asarray(x)[None])[0]
    return int(scores.argmax()), scores


def class_metrics(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> list[ClassMetrics]:
    """Per-class precision/recall/F1; classes absent from ``labels`` get None."""
    out = []
    for c in range(num_classes):
        actual = labels == c
        predicted = pred == c
        if not actual.any():
            out.append(ClassMetrics(None, None, None))
            continue
        tp = int((actual & predicted).sum())
        fp = int((~actual & predicted).sum())
        fn = int((actual & ~predicted).sum())
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn)
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        out.append(ClassMetrics(precision, recall, f1))
    return out


def evaluate_patch(
    weak_spec: ModelSpec,
    weak_weights: WeightStore,
    module_spec: ModelSpec,
    module_weights: WeightStore,
    cal: Calibration,
    test_dataset: LabeledDataset,
    tc: int,
    batch_size: int = 256,
) -> PatchReport:
    """Per-class precision/recall/F1 for weak vs patched, plus non-TC accuracy.

    Non-TC accuracy is measured with every TC-labelled sample removed; a
    class absent from the test set gets undefined (None) metrics.
    """
    labels = test_dataset.labels
    n = test_dataset.num_classes
    if not (0 <= tc < n):
        raise PatchError(f"target class {tc} out of range for {n} classes")
    if not (labels != tc).any():
        raise PatchError("test set contains only TC samples; nothing to protect")

    weak_pred = np.empty(len(labels), dtype=np.int64)
    patched_pred = np.empty(len(labels), dtype=np.int64)
    for start in range(0, len(labels), batch_size):
        xb = test_dataset.images[start:start + batch_size]
        weak_logits = model_forward_batch(weak_spec, weak_weights, xb)
        weak_pred[start:start + batch_size] = weak_logits.argmax(axis=1)
        scores = patched_scores_batch(weak_spec, weak_weights, module_spec,
                                      module_weights, cal, xb)
        patched_pred[start:start + batch_size] = scores.argmax(axis=1)

    weak_m = class_metrics(weak_pred, labels, n)
    patched_m = class_metrics(patched_pred, labels, n)

    def delta(attr: str) -> float | None:
        a, b = getattr(weak_m[tc], attr), getattr(patched_m[tc], attr)
        return None if a is None or b is None else b - a

    non_tc = labels != tc
    assert not (labels[non_tc] == tc).any()
    weak_acc = float((weak_pred[non_tc] == labels[non_tc]).mean())
    patched_acc = float((patched_pred[non_tc] == labels[non_tc]).mean())

    return PatchReport(
        tc=tc,
        weak_metrics=weak_m,
        patched_metrics=patched_m,
        tc_precision_delta=delta("precision"),
        tc_recall_delta=delta("recall"),
        tc_f1_delta=delta("f1"),
        non_tc_accuracy_weak=weak_acc,
        non_tc_accuracy_patched=patched_acc,
        module_kernels=count_kernels(module_spec),
        module_flops=count_flops(module_spec),
    )


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def _fmt(v: float | None) -> str:
    return "undefined" if v is None else f"{v:.4f}"


def report_to_csv(report: PatchReport) -> str:
    lines = ["class,metric,weak,patched"]
    for c, (w, p) in enumerate(zip(report.weak_metrics, report.patched_metrics)):
        for attr in ("precision", "recall", "f1"):
            lines.append(
                f"{c},{attr},{_fmt(getattr(w, attr))},{_fmt(getattr(p, attr))}"
            )
    lines.append(f"non_tc,accuracy,{report.non_tc_accuracy_weak!r},"
                 f"{report.non_tc_accuracy_patched!r}")
    return "\n".join(lines) + "\n"


def report_to_text(report: PatchReport) -> str:
    rows = [
        "patched-model report "
        "(normalized patch values clamp to [0,1]; degenerate ranges map to 0.5)",
        f"target class: {report.tc}",
        f"patch module: {report.module_kernels} kernels, {report.module_flops} FLOPs",
        "",
        f"{'class':>6} | {'prec weak':>10} {'prec patch':>10} | "
        f"{'rec weak':>10} {'rec patch':>10} | {'f1 weak':>10} {'f1 patch':>10}",
    ]
    for c, (w, p) in enumerate(zip(report.weak_metrics, report.patched_metrics)):
        marker = "*" if c == report.tc else " "
        rows.append(
            f"{c:>5}{marker} | {_fmt(w.precision):>10} {_fmt(p.precision):>10} | "
            f"{_fmt(w.recall):>10} {_fmt(p.recall):>10} | "
            f"{_fmt(w.f1):>10} {_fmt(p.f1):>10}"
        )
    rows.append("")
    rows.append(
        f"TC deltas: precision {_fmt(report.tc_precision_delta)}, "
        f"recall {_fmt(report.tc_recall_delta)}, f1 {_fmt(report.tc_f1_delta)}"
    )
    rows.append(
        f"non-TC accuracy: weak {report.non_tc_accuracy_weak:.4f}, "
        f"patched {report.non_tc_accuracy_patched:.4f}"
    )
    return "\n".join(rows) + "\n"
