"""Per-class kernel importance, importance-ordered grouping, and layer sensitivity.

Importance of a kernel for a class is the mean (over up to ``sample_cap``
samples of that class) of the spatial sum of the kernel's post-ReLU
feature map. Kernels of each conv layer are then partitioned into
importance-descending groups of near-equal size; groups are the unit a
genome bit addresses.

Residual-paired conv layers share a single genome segment: each layer
keeps its own importance ordering, but one run of bits drives group
removal in both, so the pair always drops the same number of kernels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .engine import activation_channel_sums, evaluate_accuracy
from .store import LabeledDataset, ModelSpec, WeightStore

DEFAULT_SAMPLE_CAP = 500
SENSITIVITY_RATIOS = tuple(r / 10 for r in range(1, 10))


class AnalysisError(Exception):
    pass


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def group_count(num_kernels: int) -> int:
    """Groups per layer: 10 below 256 kernels, 100 otherwise.

    Clamped to the kernel count so tiny layers never produce empty groups.
    """
    g = 10 if num_kernels < 256 else 100
    return min(g, num_kernels)


# ---------------------------------------------------------------------------
# Importance
# ---------------------------------------------------------------------------

@dataclass
class ImportanceTable:
    """scores[class][conv_ordinal] is a float64 vector, one score per kernel."""

    num_classes: int
    scores: dict[int, list[np.ndarray]]

    def class_agnostic(self) -> list[np.ndarray]:
        """Mean importance over classes, per conv ordinal."""
        if not self.scores:
            raise AnalysisError("importance table is empty")
        layers = len(next(iter(self.scores.values())))
        return [
            np.mean([self.scores[c][l] for c in sorted(self.scores)], axis=0)
            for l in range(layers)
        ]


def kernel_importance(
    spec: ModelSpec,
    weights: WeightStore,
    dataset: LabeledDataset,
    class_id: int,
    sample_cap: int = DEFAULT_SAMPLE_CAP,
    batch_size: int = 128,
) -> list[np.ndarray]:
    """Importance scores for one class, per conv ordinal."""
    idx = dataset.class_indices(class_id)
    if len(idx) == 0:
        raise AnalysisError(f"dataset has no samples of class {class_id}")
    idx = idx[: min(sample_cap, len(idx))]
    n_conv = len(spec.conv_layers())
    totals = [None] * n_conv
    for start in range(0, len(idx), batch_size):
        xb = dataset.images[idx[start:start + batch_size]]
        sums = activation_channel_sums(spec, weights, xb)
        for l, s in enumerate(sums):
            part = s.sum(axis=0)
            totals[l] = part if totals[l] is None else totals[l] + part
    return [t / len(idx) for t in totals]


def build_importance_table(
    spec: ModelSpec,
    weights: WeightStore,
    dataset: LabeledDataset,
    sample_cap: int = DEFAULT_SAMPLE_CAP,
) -> ImportanceTable:
    scores = {
        c: kernel_importance(spec, weights, dataset, c, sample_cap)
        for c in range(spec.num_classes)
    }
    return ImportanceTable(num_classes=spec.num_classes, scores=scores)


# ---------------------------------------------------------------------------
# Grouping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """One genome segment: a bit range driving one conv layer (or a residual pair)."""

    conv_ordinals: tuple[int, ...]
    offset: int
    group_count: int


@dataclass
class SegmentLayout:
    segments: list[Segment]

    @property
    def total_bits(self) -> int:
        return sum(s.group_count for s in self.segments)

    def segment_of_layer(self, conv_ordinal: int) -> Segment:
        for seg in self.segments:
            if conv_ordinal in seg.conv_ordinals:
                return seg
        raise AnalysisError(f"no segment covers conv ordinal {conv_ordinal}")


def build_segment_layout(spec: ModelSpec, groups_for=group_count) -> SegmentLayout:
    """One segment per conv layer, with residual pairs merged into one."""
    convs = spec.conv_layers()
    pair_of = {}
    for src, dst in spec.residual_pairs:
        pair_of[src] = (src, dst)
        pair_of[dst] = (src, dst)
    segments: list[Segment] = []
    offset = 0
    emitted: set[tuple[int, ...]] = set()
    for ordinal, (_, conv) in enumerate(convs):
        members = pair_of.get(ordinal, (ordinal,))
        if members in emitted:
            continue
        emitted.add(members)
        g = groups_for(conv.out_channels)
        segments.append(Segment(conv_ordinals=members, offset=offset, group_count=g))
        offset += g
    return SegmentLayout(segments=segments)


@dataclass
class GroupingMap:
    """Per class, per conv ordinal: ordered partition of kernel indices.

    ``groups[class][ordinal][g]`` is the (ascending) kernel-index array of
    group ``g``; group 0 holds the highest-importance kernels. All classes
    share one SegmentLayout, so genomes are interchangeable in length.
    """

    num_classes: int
    layout: SegmentLayout
    groups: dict[int, list[list[np.ndarray]]]
    mode: str = "importance"

    @property
    def total_bits(self) -> int:
        return self.layout.total_bits

    def kernel_counts(self) -> list[int]:
        any_class = self.groups[next(iter(self.groups))]
        return [sum(len(g) for g in layer) for layer in any_class]


def _partition_sizes(num_kernels: int, groups: int) -> list[int]:
    base, extra = divmod(num_kernels, groups)
    return [base + 1 if g < extra else base for g in range(groups)]


def _partition_order(order: np.ndarray, groups: int) -> list[np.ndarray]:
    sizes = _partition_sizes(len(order), groups)
    out = []
    pos = 0
    for s in sizes:
        out.append(np.sort(order[pos:pos + s]))
        pos += s
    return out


def build_grouping(
    importance: ImportanceTable,
    spec: ModelSpec,
    mode: str = "importance",
    seed: int = 0,
) -> GroupingMap:
    """Partition each layer's kernels into groups, per class.

    Modes: ``importance`` sorts by descending score (ties by ascending
    kernel index); ``random`` uses a seeded random order; ``none`` gives
    every kernel its own group in index order (the ungrouped search space).
    """
    if mode not in ("importance", "random", "none"):
        raise AnalysisError(f"unknown grouping mode {mode!r}")
    convs = spec.conv_layers()
    if mode == "none":
        layout = build_segment_layout(spec, groups_for=lambda n: n)
    else:
        layout = build_segment_layout(spec)

    rng = np.random.default_rng(np.random.PCG64(seed))
    groups: dict[int, list[list[np.ndarray]]] = {}
    for c in range(spec.num_classes):
        per_layer = []
        for ordinal, (_, conv) in enumerate(convs):
            n = conv.out_channels
            seg = layout.segment_of_layer(ordinal)
            if mode == "importance":
                scores = importance.scores[c][ordinal]
                if len(scores) != n:
                    raise AnalysisError(
                        f"class {c} conv{ordinal}: importance covers {len(scores)} "
                        f"kernels, layer has {n}"
                    )
                # descending score, ties by ascending kernel index
                order = np.lexsort((np.arange(n), -np.asarray(scores, dtype=np.float64)))
            elif mode == "random":
                order = rng.permutation(n)
            else:
                order = np.arange(n)
            per_layer.append(_partition_order(order, seg.group_count))
        groups[c] = per_layer
    return GroupingMap(num_classes=spec.num_classes, layout=layout,
                       groups=groups, mode=mode)


# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------

@dataclass
class SensitivityProfile:
    """Per conv layer: sensitive flag plus the accuracy-vs-drop-ratio curve."""

    baseline_accuracy: float
    sensitive: list[bool]
    curves: list[list[tuple[float, float]]]
    threshold: float

    def segment_sensitive(self, segment: Segment) -> bool:
        return any(self.sensitive[o] for o in segment.conv_ordinals)


def layer_sensitivity(
    spec: ModelSpec,
    weights: WeightStore,
    val_dataset: LabeledDataset,
    importance: ImportanceTable,
    threshold: float = 0.05,
) -> SensitivityProfile:
    """Probe each conv layer independently by zero-masking its weakest kernels.

    For drop ratios 10%..90%, the lowest-importance kernels (class-agnostic
    mean importance, ties by ascending index) have their output maps zeroed
    and validation accuracy is re-measured. A layer is sensitive iff the
    accuracy loss at the 90% ratio exceeds ``threshold``. Zero-masking is
    exactly equivalent to physically removing the kernels because the
    engine has no normalization layers.
    """
    baseline = evaluate_accuracy(spec, weights, val_dataset)
    agnostic = importance.class_agnostic()
    sensitive: list[bool] = []
    curves: list[list[tuple[float, float]]] = []
    for ordinal, (_, conv) in enumerate(spec.conv_layers()):
        n = conv.out_channels
        scores = np.asarray(agnostic[ordinal], dtype=np.float64)
        # ascending importance: weakest kernels drop first
        order = np.lexsort((np.arange(n), scores))
        curve = []
        for ratio in SENSITIVITY_RATIOS:
            k = round_half_up(ratio * n)
            keep = np.ones(n, dtype=bool)
            keep[order[:k]] = False
            acc = evaluate_accuracy(spec, weights, val_dataset,
                                    channel_masks={ordinal: keep})
            curve.append((ratio, acc))
        loss_at_max = baseline - curve[-1][1]
        sensitive.append(bool(loss_at_max > threshold))
        curves.append(curve)
    return SensitivityProfile(
        baseline_accuracy=baseline,
        sensitive=sensitive,
        curves=curves,
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# Text artifacts
# ---------------------------------------------------------------------------

def importance_to_json(table: ImportanceTable) -> str:
    payload = {
        "num_classes": table.num_classes,
        "scores": {
            str(c): [[float(v) for v in layer] for layer in layers]
            for c, layers in sorted(table.scores.items())
        },
    }
    return json.dumps(payload, indent=1, sort_keys=True)


def importance_from_json(text: str) -> ImportanceTable:
    payload = json.loads(text)
    scores = {
        int(c): [np.asarray(layer, dtype=np.float64) for layer in layers]
        for c, layers in payload["scores"].items()
    }
    return ImportanceTable(num_classes=payload["num_classes"], scores=scores)


def grouping_to_json(gm: GroupingMap) -> str:
    payload = {
        "num_classes": gm.num_classes,
        "mode": gm.mode,
        "segments": [
            {"conv_ordinals": list(s.conv_ordinals), "offset": s.offset,
             "group_count": s.group_count}
            for s in gm.layout.segments
        ],
        "groups": {
            str(c): [[[int(k) for k in grp] for grp in layer] for layer in layers]
            for c, layers in sorted(gm.groups.items())
        },
    }
    return json.dumps(payload, indent=1, sort_keys=True)


def grouping_from_json(text: str) -> GroupingMap:
    payload = json.loads(text)
    layout = SegmentLayout(segments=[
        Segment(conv_ordinals=tuple(s["conv_ordinals"]), offset=s["offset"],
                group_count=s["group_count"])
        for s in payload["segments"]
    ])
    groups = {
        int(c): [[np.asarray(grp, dtype=np.int64) for grp in layer] for layer in layers]
        for c, layers in payload["groups"].items()
    }
    return GroupingMap(num_classes=payload["num_classes"], layout=layout,
                       groups=groups, mode=payload.get("mode", "importance"))


def sensitivity_to_json(profile: SensitivityProfile) -> str:
    payload = {
        "baseline_accuracy": profile.baseline_accuracy,
        "threshold": profile.threshold,
        "sensitive": profile.sensitive,
        "curves": [[[r, a] for r, a in curve] for curve in profile.curves],
    }
    return json.dumps(payload, indent=1, sort_keys=True)


def sensitivity_from_json(text: str) -> SensitivityProfile:
    payload = json.loads(text)
    return SensitivityProfile(
        baseline_accuracy=payload["baseline_accuracy"],
        sensitive=[bool(b) for b in payload["sensitive"]],
        curves=[[(float(r), float(a)) for r, a in curve] for curve in payload["curves"]],
        threshold=payload["threshold"],
    )
