"""Model architecture specs, binary weight/dataset containers, and cost accounting.

Binary layouts (all integers little-endian):

Weight container ("CNSP")
    magic b"CNSP" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name utf-8 | u8 ndim | ndim x u32 dims | f32 data

Dataset container ("CNDS")
    magic b"CNDS" | u32 count | u32 C | u32 H | u32 W | u32 num_classes
    count*C*H*W f32 pixels | count x u32 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

WEIGHT_MAGIC = b"CNSP"
WEIGHT_VERSION = 1
DATASET_MAGIC = b"CNDS"


class StoreError(Exception):
    """Base class for container and spec errors."""


class BadMagicError(StoreError):
    pass


class VersionError(StoreError):
    pass


class TruncatedError(StoreError):
    pass


class SpecError(StoreError):
    """Model spec text is malformed or internally inconsistent."""


class DatasetError(StoreError):
    pass


# ---------------------------------------------------------------------------
# Layer descriptors and model specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0

    kind = "conv"


@dataclass(frozen=True)
class MaxPoolLayer:
    window: int
    stride: int

    kind = "maxpool"


@dataclass(frozen=True)
class FlattenLayer:
    kind = "flatten"


@dataclass(frozen=True)
class FcLayer:
    out_features: int

    kind = "fc"


Layer = ConvLayer | MaxPoolLayer | FlattenLayer | FcLayer


@dataclass
class ModelSpec:
    """Ordered layer list plus residual wiring for a sequential conv net.

    ``residual_pairs`` holds (source, dest) indices over conv layers in
    order of appearance (conv ordinals, not positions in ``layers``). The
    source activation is added to the dest conv output before the dest
    ReLU; both layers must produce identical output shapes.
    """

    name: str
    num_classes: int
    input_dims: tuple[int, int, int]  # (C, H, W)
    layers: list[Layer]
    residual_pairs: list[tuple[int, int]] = field(default_factory=list)

    def conv_layers(self) -> list[tuple[int, ConvLayer]]:
        """(position-in-layers, layer) for each conv, in order."""
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, ConvLayer)]

    def conv_ordinal_of_position(self, pos: int) -> int:
        ords = {i: o for o, (i, _) in enumerate(self.conv_layers())}
        return ords[pos]

    def residual_dest_sources(self) -> dict[int, int]:
        """Map dest conv ordinal -> source conv ordinal."""
        return {d: s for s, d in self.residual_pairs}

    def kernel_offsets(self) -> list[int]:
        """Cumulative kernel-count offset per conv ordinal, for global kernel ids."""
        offsets = []
        total = 0
        for _, conv in self.conv_layers():
            offsets.append(total)
            total += conv.out_channels
        return offsets


def count_kernels(spec: ModelSpec) -> int:
    """Total convolution kernels: sum of conv out_channels."""
    return sum(conv.out_channels for _, conv in spec.conv_layers())


@dataclass(frozen=True)
class ShapeTrace:
    """Per-layer output shapes from shape inference.

    ``shapes[i]`` is the output of ``layers[i]``: (C, H, W) tuples before
    flatten, int feature counts after.
    """

    input_dims: tuple[int, int, int]
    shapes: list[tuple[int, int, int] | int]

    def conv_output_shapes(self, spec: ModelSpec) -> list[tuple[int, int, int]]:
        return [self.shapes[pos] for pos, _ in spec.conv_layers()]

    def flatten_source_shape(self, spec: ModelSpec) -> tuple[int, int, int]:
        """Shape entering the flatten layer (C, H, W)."""
        for i, layer in enumerate(spec.layers):
            if isinstance(layer, FlattenLayer):
                return self.input_dims if i == 0 else self.shapes[i - 1]
        raise SpecError(f"{spec.name}: no flatten layer")


def infer_shapes(spec: ModelSpec) -> ShapeTrace:
    """Validate the layer chain and compute every layer's output shape.

    Rejects specs the forward pass cannot execute: conv/pool after
    flatten, fc before flatten, kernel larger than its (padded) input,
    residual pairs whose endpoints mismatch in shape or share layers,
    or a final layer that is not fc(num_classes).
    """
    if spec.num_classes < 1:
        raise SpecError(f"{spec.name}: num_classes must be >= 1")
    c, h, w = spec.input_dims
    if min(c, h, w) < 1:
        raise SpecError(f"{spec.name}: input dims must be positive, got {spec.input_dims}")

    shapes: list[tuple[int, int, int] | int] = []
    cur: tuple[int, int, int] | int = (c, h, w)
    flattened = False
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayer):
            if flattened:
                raise SpecError(f"{spec.name}: layer {i}: conv after flatten")
            ci, hi, wi = cur
            if layer.out_channels < 1 or layer.kernel_size < 1:
                raise SpecError(f"{spec.name}: layer {i}: bad conv parameters")
            if layer.stride < 1 or layer.padding < 0:
                raise SpecError(f"{spec.name}: layer {i}: bad conv stride/padding")
            hp, wp = hi + 2 * layer.padding, wi + 2 * layer.padding
            if layer.kernel_size > hp or layer.kernel_size > wp:
                raise SpecError(
                    f"{spec.name}: layer {i}: kernel {layer.kernel_size} exceeds "
                    f"padded input {hp}x{wp}"
                )
            ho = (hp - layer.kernel_size) // layer.stride + 1
            wo = (wp - layer.kernel_size) // layer.stride + 1
            cur = (layer.out_channels, ho, wo)
        elif isinstance(layer, MaxPoolLayer):
            if flattened:
                raise SpecError(f"{spec.name}: layer {i}: maxpool after flatten")
            ci, hi, wi = cur
            if layer.window < 1 or layer.stride < 1:
                raise SpecError(f"{spec.name}: layer {i}: bad pool parameters")
            if layer.window > hi or layer.window > wi:
                raise SpecError(
                    f"{spec.name}: layer {i}: pool window {layer.window} exceeds "
                    f"input {hi}x{wi}"
                )
            ho = (hi - layer.window) // layer.stride + 1
            wo = (wi - layer.window) // layer.stride + 1
            cur = (ci, ho, wo)
        elif isinstance(layer, FlattenLayer):
            if flattened:
                raise SpecError(f"{spec.name}: layer {i}: duplicate flatten")
            ci, hi, wi = cur
            cur = ci * hi * wi
            flattened = True
        elif isinstance(layer, FcLayer):
            if not flattened:
                raise SpecError(f"{spec.name}: layer {i}: fc before flatten")
            if layer.out_features < 1:
                raise SpecError(f"{spec.name}: layer {i}: bad fc out_features")
            cur = layer.out_features
        else:
            raise SpecError(f"{spec.name}: layer {i}: unknown layer kind {layer!r}")
        shapes.append(cur)

    if not spec.layers or not isinstance(spec.layers[-1], FcLayer):
        raise SpecError(f"{spec.name}: last layer must be fc")
    if shapes[-1] != spec.num_classes:
        raise SpecError(
            f"{spec.name}: final fc emits {shapes[-1]} features, expected "
            f"num_classes={spec.num_classes}"
        )

    trace = ShapeTrace(input_dims=spec.input_dims, shapes=shapes)
    _validate_residual_pairs(spec, trace)
    return trace


def _validate_residual_pairs(spec: ModelSpec, trace: ShapeTrace) -> None:
    convs = spec.conv_layers()
    n_conv = len(convs)
    seen: set[int] = set()
    for src, dst in spec.residual_pairs:
        if not (0 <= src < n_conv and 0 <= dst < n_conv):
            raise SpecError(
                f"{spec.name}: residual pair ({src}, {dst}) references missing conv "
                f"layers (model has {n_conv})"
            )
        if src >= dst:
            raise SpecError(
                f"{spec.name}: residual pair ({src}, {dst}) must run forward "
                f"(source before dest)"
            )
        if src in seen or dst in seen:
            raise SpecError(
                f"{spec.name}: residual pair ({src}, {dst}) shares a conv layer with "
                f"another pair"
            )
        seen.update((src, dst))
        s_shape = trace.shapes[convs[src][0]]
        d_shape = trace.shapes[convs[dst][0]]
        if s_shape != d_shape:
            raise SpecError(
                f"{spec.name}: residual pair ({src}, {dst}) output shapes differ: "
                f"conv{src} -> {s_shape}, conv{dst} -> {d_shape}"
            )


# ---------------------------------------------------------------------------
# Model spec text format
# ---------------------------------------------------------------------------

def load_model_spec(text: str) -> ModelSpec:
    """Parse the key/value model spec format and run shape inference.

    Format (one statement per line, '#' starts a comment):

        name: simcnn-desk
        num_classes: 3
        input: 1 16 16
        layer: conv out=10 k=3 stride=1 pad=1
        layer: maxpool window=2 stride=2
        layer: flatten
        layer: fc out=3
        residual: 0 1          # conv ordinals: source dest
    """
    name = None
    num_classes = None
    input_dims = None
    layers: list[Layer] = []
    pairs: list[tuple[int, int]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise SpecError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, value = (part.strip() for part in line.split(":", 1))
        if key == "name":
            name = value
        elif key == "num_classes":
            num_classes = _parse_int(value, lineno, "num_classes")
        elif key == "input":
            parts = value.split()
            if len(parts) != 3:
                raise SpecError(f"line {lineno}: input expects 'C H W'")
            input_dims = tuple(_parse_int(p, lineno, "input") for p in parts)
        elif key == "layer":
            layers.append(_parse_layer(value, lineno))
        elif key == "residual":
            parts = value.split()
            if len(parts) != 2:
                raise SpecError(f"line {lineno}: residual expects 'source dest'")
            pairs.append(tuple(_parse_int(p, lineno, "residual") for p in parts))
        else:
            raise SpecError(f"line {lineno}: unknown key {key!r}")

    if name is None:
        raise SpecError("missing 'name'")
    if num_classes is None:
        raise SpecError("missing 'num_classes'")
    if input_dims is None:
        raise SpecError("missing 'input'")
    spec = ModelSpec(
        name=name,
        num_classes=num_classes,
        input_dims=input_dims,
        layers=layers,
        residual_pairs=pairs,
    )
    infer_shapes(spec)
    return spec


def _parse_int(token: str, lineno: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise SpecError(f"line {lineno}: {what}: not an integer: {token!r}") from None


def _parse_layer(value: str, lineno: int) -> Layer:
    parts = value.split()
    kind, args = parts[0], parts[1:]
    kv = {}
    for arg in args:
        if "=" not in arg:
            raise SpecError(f"line {lineno}: layer argument {arg!r} is not key=value")
        k, v = arg.split("=", 1)
        kv[k] = _parse_int(v, lineno, k)

    def take(keys: dict[str, int | None]) -> dict[str, int]:
        out = {}
        for k, default in keys.items():
            if k in kv:
                out[k] = kv.pop(k)
            elif default is not None:
                out[k] = default
            else:
                raise SpecError(f"line {lineno}: {kind} requires {k}=")
        if kv:
            raise SpecError(f"line {lineno}: {kind}: unknown arguments {sorted(kv)}")
        return out

    if kind == "conv":
        a = take({"out": None, "k": None, "stride": 1, "pad": 0})
        return ConvLayer(out_channels=a["out"], kernel_size=a["k"],
                         stride=a["stride"], padding=a["pad"])
    if kind == "maxpool":
        a = take({"window": None, "stride": None})
        return MaxPoolLayer(window=a["window"], stride=a["stride"])
    if kind == "flatten":
        take({})
        return FlattenLayer()
    if kind == "fc":
        a = take({"out": None})
        return FcLayer(out_features=a["out"])
    raise SpecError(f"line {lineno}: unknown layer kind {kind!r}")


def dump_model_spec(spec: ModelSpec) -> str:
    """Inverse of load_model_spec (round-trips up to comments/whitespace)."""
    lines = [
        f"name: {spec.name}",
        f"num_classes: {spec.num_classes}",
        f"input: {spec.input_dims[0]} {spec.input_dims[1]} {spec.input_dims[2]}",
    ]
    for layer in spec.layers:
        if isinstance(layer, ConvLayer):
            lines.append(
                f"layer: conv out={layer.out_channels} k={layer.kernel_size} "
                f"stride={layer.stride} pad={layer.padding}"
            )
        elif isinstance(layer, MaxPoolLayer):
            lines.append(f"layer: maxpool window={layer.window} stride={layer.stride}")
        elif isinstance(layer, FlattenLayer):
            lines.append("layer: flatten")
        else:
            lines.append(f"layer: fc out={layer.out_features}")
    for src, dst in spec.residual_pairs:
        lines.append(f"residual: {src} {dst}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Weight store
# ---------------------------------------------------------------------------

class WeightStore:
    """Ordered name -> float32 ndarray map with binary (de)serialization."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self.entries: dict[str, np.ndarray] = {}
        if entries:
            for name, tensor in entries.items():
                self.put(name, tensor)

    def put(self, name: str, tensor: np.ndarray) -> None:
        arr = np.ascontiguousarray(tensor, dtype=np.float32)
        self.entries[name] = arr

    def get(self, name: str) -> np.ndarray:
        if name not in self.entries:
            raise StoreError(f"weight store has no tensor {name!r}")
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightStore):
            return NotImplemented
        if list(self.entries) != list(other.entries):
            return False
        return all(
            a.shape == b.shape and np.array_equal(a, b, equal_nan=True)
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.entries.items()})


def conv_weight_names(ordinal: int) -> tuple[str, str]:
    return f"conv{ordinal}.kernels", f"conv{ordinal}.bias"


def fc_weight_names(ordinal: int) -> tuple[str, str]:
    return f"fc{ordinal}.weight", f"fc{ordinal}.bias"


def expected_weight_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes a store must carry for ``spec``."""
    trace = infer_shapes(spec)
    shapes: dict[str, tuple[int, ...]] = {}
    conv_ord = 0
    fc_ord = 0
    cur: tuple[int, int, int] | int = spec.input_dims
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayer):
            kname, bname = conv_weight_names(conv_ord)
            shapes[kname] = (layer.out_channels, cur[0], layer.kernel_size, layer.kernel_size)
            shapes[bname] = (layer.out_channels,)
            conv_ord += 1
        elif isinstance(layer, FcLayer):
            wname, bname = fc_weight_names(fc_ord)
            shapes[wname] = (layer.out_features, cur)
            shapes[bname] = (layer.out_features,)
            fc_ord += 1
        cur = trace.shapes[i]
    return shapes


def validate_weights(spec: ModelSpec, store: WeightStore) -> None:
    """Check the store holds exactly the tensors the spec requires."""
    expected = expected_weight_shapes(spec)
    for name, shape in expected.items():
        if name not in store:
            raise StoreError(f"{spec.name}: missing tensor {name!r}")
        got = store.get(name).shape
        if got != shape:
            raise StoreError(
                f"{spec.name}: tensor {name!r} has shape {got}, expected {shape}"
            )
    extra = set(store.entries) - set(expected)
    if extra:
        raise StoreError(f"{spec.name}: unexpected tensors {sorted(extra)}")


def save_weights(store: WeightStore) -> bytes:
    out = bytearray()
    out += WEIGHT_MAGIC
    out += struct.pack("<II", WEIGHT_VERSION, len(store.entries))
    for name, tensor in store.entries.items():
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise StoreError(f"tensor name too long: {name!r}")
        out += struct.pack("<H", len(name_bytes))
        out += name_bytes
        out += struct.pack("<B", tensor.ndim)
        out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        out += tensor.astype("<f4", copy=False).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"container truncated: needed {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_weights(data: bytes) -> WeightStore:
    r = _Reader(data)
    magic = r.read(4)
    if magic != WEIGHT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
    version, count = r.unpack("<II")
    if version != WEIGHT_VERSION:
        raise VersionError(f"unsupported container version {version}")
    store = WeightStore()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.read(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = r.read(4 * size)
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        store.entries[name] = arr
    if r.pos != len(data):
        raise TruncatedError(
            f"container has {len(data) - r.pos} trailing bytes after last tensor"
        )
    return store


# ---------------------------------------------------------------------------
# Labeled dataset
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Images in [0,1] with integer labels in [0, num_classes)."""

    images: np.ndarray  # (count, C, H, W) float32
    labels: np.ndarray  # (count,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (count, C, H, W), got {self.images.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise DatasetError(
                f"labels length {self.labels.shape} does not match "
                f"{len(self.images)} images"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.images)

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)

    def restrict_to_classes(self, classes: list[int]) -> "LabeledDataset":
        mask = np.isin(self.labels, classes)
        return self.subset(np.flatnonzero(mask))


def save_dataset(ds: LabeledDataset) -> bytes:
    count, c, h, w = ds.images.shape
    out = bytearray()
    out += DATASET_MAGIC
    out += struct.pack("<5I", count, c, h, w, ds.num_classes)
    out += ds.images.astype("<f4", copy=False).tobytes()
    out += ds.labels.astype("<u4").tobytes()
    return bytes(out)


def load_dataset(data: bytes) -> LabeledDataset:
    r = _Reader(data)
    magic = r.read(4)
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    count, c, h, w, num_classes = r.unpack("<5I")
    pixels = r.read(4 * count * c * h * w)
    images = np.frombuffer(pixels, dtype="<f4").reshape(count, c, h, w).copy()
    raw_labels = r.read(4 * count)
    labels = np.frombuffer(raw_labels, dtype="<u4").astype(np.int64)
    if r.pos != len(data):
        raise TruncatedError(
            f"container has {len(data) - r.pos} trailing bytes after labels"
        )
    if count and labels.max() >= num_classes:
        raise DatasetError(
            f"label {labels.max()} out of range for {num_classes} classes"
        )
    return LabeledDataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------

def count_flops(spec: ModelSpec, input_dims: tuple[int, int, int] | None = None) -> int:
    """FLOPs for one forward pass, counting multiplies and adds separately.

    Each conv layer contributes 2 * C_in * K^2 * H_out * W_out * C_out;
    each fc layer 2 * D_in * D_out. Pooling and activations are excluded.
    """
    if input_dims is not None and input_dims != spec.input_dims:
        spec = ModelSpec(spec.name, spec.num_classes, input_dims,
                         spec.layers, spec.residual_pairs)
    trace = infer_shapes(spec)
    total = 0
    cur: tuple[int, int, int] | int = spec.input_dims
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayer):
            c_in = cur[0]
            c_out, h_out, w_out = trace.shapes[i]
            total += 2 * c_in * layer.kernel_size ** 2 * h_out * w_out * c_out
        elif isinstance(layer, FcLayer):
            total += 2 * cur * layer.out_features
        cur = trace.shapes[i]
    return total
