"""Minimal model-spec text parsing: enough to know the tensors a model needs.

Implements the toolkit's spec text format from its documentation and
derives, per layer chain, the tensor names and shapes a matching CNSP
container must provide (convN.kernels/.bias, fcN.weight/.bias).
"""

from __future__ import annotations

from dataclasses import dataclass


class SpecTemplateError(Exception):
    pass


@dataclass
class SpecTemplate:
    name: str
    num_classes: int
    input_dims: tuple[int, int, int]
    layers: list[tuple]          # ("conv", out, k, stride, pad) etc.
    residual_pairs: list[tuple[int, int]]
    text: str                    # original text, re-emitted next to the container

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        """Tensor name -> shape, in layer order."""
        shapes: dict[str, tuple[int, ...]] = {}
        c, h, w = self.input_dims
        features = None
        conv_ord = fc_ord = 0
        for layer in self.layers:
            kind = layer[0]
            if kind == "conv":
                _, out, k, stride, pad = layer
                shapes[f"conv{conv_ord}.kernels"] = (out, c, k, k)
                shapes[f"conv{conv_ord}.bias"] = (out,)
                h = (h + 2 * pad - k) // stride + 1
                w = (w + 2 * pad - k) // stride + 1
                if h < 1 or w < 1:
                    raise SpecTemplateError(
                        f"conv{conv_ord}: kernel {k} does not fit its input")
                c = out
                conv_ord += 1
            elif kind == "maxpool":
                _, window, stride = layer
                h = (h - window) // stride + 1
                w = (w - window) // stride + 1
                if h < 1 or w < 1:
                    raise SpecTemplateError("pool window exceeds its input")
            elif kind == "flatten":
                features = c * h * w
            elif kind == "fc":
                _, out = layer
                if features is None:
                    raise SpecTemplateError("fc before flatten in template")
                shapes[f"fc{fc_ord}.weight"] = (out, features)
                shapes[f"fc{fc_ord}.bias"] = (out,)
                features = out
                fc_ord += 1
            else:
                raise SpecTemplateError(f"unsupported layer kind {kind!r}")
        if features != self.num_classes:
            raise SpecTemplateError(
                f"template emits {features} logits, expected {self.num_classes}")
        return shapes


def parse_spec_template(text: str) -> SpecTemplate:
    name = None
    num_classes = None
    input_dims = None
    layers: list[tuple] = []
    pairs: list[tuple[int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise SpecTemplateError(f"line {lineno}: expected 'key: value'")
        key, value = (p.strip() for p in line.split(":", 1))
        if key == "name":
            name = value
        elif key == "num_classes":
            num_classes = int(value)
        elif key == "input":
            input_dims = tuple(int(v) for v in value.split())
        elif key == "residual":
            src, dst = (int(v) for v in value.split())
            pairs.append((src, dst))
        elif key == "layer":
            parts = value.split()
            kind, kv = parts[0], dict(p.split("=") for p in parts[1:])
            if kind == "conv":
                layers.append(("conv", int(kv["out"]), int(kv["k"]),
                               int(kv.get("stride", 1)), int(kv.get("pad", 0))))
            elif kind == "maxpool":
                layers.append(("maxpool", int(kv["window"]), int(kv["stride"])))
            elif kind == "flatten":
                layers.append(("flatten",))
            elif kind == "fc":
                layers.append(("fc", int(kv["out"])))
            else:
                raise SpecTemplateError(
                    f"line {lineno}: unsupported layer kind {kind!r}")
        else:
            raise SpecTemplateError(f"line {lineno}: unknown key {key!r}")
    if name is None or num_classes is None or input_dims is None:
        raise SpecTemplateError("template needs name, num_classes, and input")
    return SpecTemplate(name=name, num_classes=num_classes,
                        input_dims=input_dims, layers=layers,
                        residual_pairs=pairs, text=text)
