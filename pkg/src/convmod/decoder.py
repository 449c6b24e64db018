"""Turn kernel-group bit vectors into physically smaller runnable sub-models.

Decoding removes the kernels of every dropped group from each conv layer,
slices the matching input channels out of the next conv layer, and removes
the corresponding flattened-feature blocks from the first fc layer. For a
residual pair the shared genome segment is applied to each layer's own
grouping, so the two layers drop the same *number* of kernels (possibly at
different indices) and the surviving channels are added positionally.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .grouping import GroupingMap, SegmentLayout
from .store import (
    ConvLayer,
    FcLayer,
    ModelSpec,
    WeightStore,
    conv_weight_names,
    fc_weight_names,
    infer_shapes,
    save_weights,
    validate_weights,
)


class DecodeError(Exception):
    pass


@dataclass
class Genome:
    """Fixed-length bit vector over kernel groups; 1 keeps a group, 0 drops it."""

    bits: np.ndarray
    class_id: int

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1:
            raise DecodeError(f"genome bits must be 1-d, got shape {self.bits.shape}")
        if not np.isin(self.bits, (0, 1)).all():
            raise DecodeError("genome bits must be 0/1")

    def copy(self) -> "Genome":
        return Genome(self.bits.copy(), self.class_id)


@dataclass
class ModuleArtifact:
    """A decoded sub-model plus provenance back to its parent."""

    spec: ModelSpec
    weights: WeightStore
    retained_kernels: frozenset[int]
    parent_fingerprint: str
    class_id: int
    genome_bits: np.ndarray

    @property
    def kernel_count(self) -> int:
        return len(self.retained_kernels)


def weights_fingerprint(store: WeightStore) -> str:
    """sha256 over the canonical binary serialization of a weight store."""
    return hashlib.sha256(save_weights(store)).hexdigest()


def repair_bits(bits: np.ndarray, layout: SegmentLayout) -> np.ndarray:
    """Re-enable group 0 of any segment whose groups are all dropped.

    Returns the input array unchanged (same object) when no repair is
    needed, otherwise a repaired copy.
    """
    repaired = None
    for seg in layout.segments:
        view = bits[seg.offset:seg.offset + seg.group_count]
        if not view.any():
            if repaired is None:
                repaired = bits.copy()
            repaired[seg.offset] = 1
    return bits if repaired is None else repaired


def repair(genome: Genome, grouping: GroupingMap) -> Genome:
    bits = repair_bits(genome.bits, grouping.layout)
    return genome if bits is genome.bits else Genome(bits, genome.class_id)


def _check_length(bits: np.ndarray, grouping: GroupingMap) -> None:
    if len(bits) != grouping.total_bits:
        raise DecodeError(
            f"genome has {len(bits)} bits, grouping expects {grouping.total_bits}"
        )


def retained_indices(
    grouping: GroupingMap, class_id: int, bits: np.ndarray
) -> list[np.ndarray]:
    """Sorted kept kernel indices per conv ordinal for one genome."""
    _check_length(bits, grouping)
    layers = grouping.groups[class_id]
    kept: list[np.ndarray] = []
    for ordinal, layer_groups in enumerate(layers):
        seg = grouping.layout.segment_of_layer(ordinal)
        seg_bits = bits[seg.offset:seg.offset + seg.group_count]
        on = [layer_groups[g] for g in range(seg.group_count) if seg_bits[g]]
        if not on:
            raise DecodeError(
                f"class {class_id}: conv{ordinal} would lose every kernel group; "
                f"repair the genome first"
            )
        kept.append(np.sort(np.concatenate(on)))
    return kept


def retained_kernel_set(grouping: GroupingMap, genome: Genome) -> frozenset[int]:
    """Kept kernels as global (layer-offset) ids."""
    kept = retained_indices(grouping, genome.class_id, genome.bits)
    offsets = np.cumsum([0] + [sum(len(g) for g in layer)
                               for layer in grouping.groups[genome.class_id]][:-1])
    ids: list[int] = []
    for off, idx in zip(offsets, kept):
        ids.extend((int(off) + idx).tolist())
    return frozenset(ids)


def decode(
    spec: ModelSpec,
    weights: WeightStore,
    grouping: GroupingMap,
    genome: Genome,
    apply_repair: bool = True,
    parent_fingerprint: str | None = None,
) -> ModuleArtifact:
    """Materialize the genome's sub-model with sliced weights.

    The parent spec/weights are never mutated. With ``apply_repair`` off, a
    genome dropping every group of some layer raises DecodeError instead.
    """
    _check_length(genome.bits, grouping)
    bits = repair_bits(genome.bits, grouping.layout) if apply_repair else genome.bits
    kept = retained_indices(grouping, genome.class_id, bits)
    trace = infer_shapes(spec)

    new_layers = []
    conv_ord = 0
    for layer in spec.layers:
        if isinstance(layer, ConvLayer):
            new_layers.append(ConvLayer(
                out_channels=len(kept[conv_ord]),
                kernel_size=layer.kernel_size,
                stride=layer.stride,
                padding=layer.padding,
            ))
            conv_ord += 1
        else:
            new_layers.append(layer)
    module_spec = ModelSpec(
        name=f"{spec.name}.class{genome.class_id}",
        num_classes=spec.num_classes,
        input_dims=spec.input_dims,
        layers=new_layers,
        residual_pairs=list(spec.residual_pairs),
    )

    module_weights = WeightStore()
    n_conv = len(spec.conv_layers())
    for ordinal in range(n_conv):
        kname, bname = conv_weight_names(ordinal)
        kernels = weights.get(kname)
        bias = weights.get(bname)
        out_sel = kept[ordinal]
        sliced = kernels[out_sel]
        if ordinal > 0:
            sliced = sliced[:, kept[ordinal - 1], :, :]
        module_weights.put(kname, sliced)
        module_weights.put(bname, bias[out_sel])

    # first fc: drop the H*W feature block of every removed channel of the
    # last conv layer (channel-major flatten order)
    last_kept = kept[-1]
    _, fh, fw = trace.flatten_source_shape(spec)
    block = fh * fw
    cols = (last_kept[:, None] * block + np.arange(block)[None, :]).ravel()
    n_fc = sum(isinstance(l, FcLayer) for l in spec.layers)
    for fc_ord in range(n_fc):
        wname, bname = fc_weight_names(fc_ord)
        w = weights.get(wname)
        if fc_ord == 0:
            w = w[:, cols]
        module_weights.put(wname, w)
        module_weights.put(bname, weights.get(bname))

    validate_weights(module_spec, module_weights)

    offsets = spec.kernel_offsets()
    ids = frozenset(
        int(offsets[o]) + int(k) for o in range(n_conv) for k in kept[o]
    )
    if parent_fingerprint is None:
        parent_fingerprint = weights_fingerprint(weights)
    return ModuleArtifact(
        spec=module_spec,
        weights=module_weights,
        retained_kernels=ids,
        parent_fingerprint=parent_fingerprint,
        class_id=genome.class_id,
        genome_bits=bits.copy(),
    )


def retained_mask(grouping: GroupingMap, genome: Genome, total_kernels: int) -> np.ndarray:
    """Boolean keep-mask over global kernel ids (for fast Jaccard math)."""
    mask = np.zeros(total_kernels, dtype=bool)
    for gid in retained_kernel_set(grouping, genome):
        mask[gid] = True
    return mask


def channel_keep_masks(
    spec: ModelSpec, grouping: GroupingMap, genome: Genome
) -> dict[int, np.ndarray]:
    """Per conv ordinal boolean keep-vectors (the zero-mask view of a genome)."""
    kept = retained_indices(grouping, genome.class_id, genome.bits)
    masks = {}
    for ordinal, (_, conv) in enumerate(spec.conv_layers()):
        keep = np.zeros(conv.out_channels, dtype=bool)
        keep[kept[ordinal]] = True
        masks[ordinal] = keep
    return masks


# ---------------------------------------------------------------------------
# Genome sidecar text format
# ---------------------------------------------------------------------------

def genome_to_text(artifact_or_genome, parent_fingerprint: str | None = None) -> str:
    if isinstance(artifact_or_genome, ModuleArtifact):
        bits = artifact_or_genome.genome_bits
        class_id = artifact_or_genome.class_id
        parent = artifact_or_genome.parent_fingerprint
    else:
        bits = artifact_or_genome.bits
        class_id = artifact_or_genome.class_id
        parent = parent_fingerprint or ""
    bit_str = "".join("1" if b else "0" for b in bits)
    return f"class: {class_id}\nparent: {parent}\nbits: {bit_str}\n"


def genome_from_text(text: str) -> tuple[Genome, str]:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    try:
        class_id = int(fields["class"])
        bits = np.array([int(ch) for ch in fields["bits"]], dtype=np.uint8)
    except (KeyError, ValueError) as exc:
        raise DecodeError(f"malformed genome sidecar: {exc}") from exc
    return Genome(bits, class_id), fields.get("parent", "")
