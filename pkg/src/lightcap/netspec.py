"""Declarative network graphs and the structural parameter-reduction transform.

A network is an ordered tree of layer specs (conv / norm / linear /
scale-vector / attention / container). The reduction transform shrinks
every non-fixed channel dimension by an integer factor, repairs group
convolution configurations, and resizes the attached weights with
endpoint-aligned multi-dimensional linear interpolation so the reduced
model keeps the relative distribution of the original parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

LAYER_KINDS = ("conv", "norm", "linear", "scale_vector", "attention", "container")
CONTAINER_OPS = ("sequential", "convnext_block")


class SpecError(ValueError):
    """Malformed or inconsistent network spec."""


class WeightStoreError(KeyError):
    """Weight store is missing an entry a spec leaf requires."""


@dataclass
class LayerSpec:
    """One node of the layer graph.

    Leaf kinds carry dims; containers carry children. `fixed_input` /
    `fixed_output` exempt a dimension from reduction (stem channels,
    the projection into the transformer). Conv kernels never resize
    spatially.
    """

    name: str
    kind: str
    in_dim: int | None = None
    out_dim: int | None = None
    kernel: tuple[int, int] | None = None
    groups: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = True
    fixed_input: bool = False
    fixed_output: bool = False
    op: str = "sequential"
    children: list["LayerSpec"] = field(default_factory=list)

    def is_leaf(self) -> bool:
        return self.kind != "container"


@dataclass
class NetworkSpec:
    """Ordered root container plus declared input channels."""

    name: str
    input_channels: int
    layers: list[LayerSpec]

    def walk_leaves(self, prefix: str = ""):
        """Yield (qualified_name, leaf) in dataflow order."""
        yield from _walk(self.layers, prefix)


def _walk(layers, prefix):
    for layer in layers:
        qual = f"{prefix}{layer.name}"
        if layer.is_leaf():
            yield qual, layer
        else:
            yield from _walk(layer.children, qual + ".")


@dataclass
class ReductionConfig:
    """Integer reduction factor; 1 is the identity."""

    prf: int = 1

    def __post_init__(self):
        if self.prf < 1:
            raise SpecError(f"reduction factor must be >= 1, got {self.prf}")


def reduce_dim(d: int, prf: int) -> int:
    """Proportional shrink with a floor of one channel."""
    return max(1, d // prf)


# ---------------------------------------------------------------------
# validation


def validate(spec: NetworkSpec) -> list[str]:
    """Return a list of problems; empty means the spec is consistent."""
    errors: list[str] = []
    _validate_tree(spec.layers, "", errors)
    cur = spec.input_channels
    if cur < 1:
        errors.append(f"input_channels must be positive, got {cur}")
    for qual, leaf in spec.walk_leaves():
        if leaf.kind in ("conv", "linear"):
            if leaf.in_dim != cur:
                errors.append(f"{qual}: expects in={leaf.in_dim} but dataflow provides {cur}")
            cur = leaf.out_dim if leaf.out_dim else cur
        elif leaf.kind in ("norm", "scale_vector", "attention"):
            dim = leaf.out_dim or leaf.in_dim
            if dim != cur:
                errors.append(f"{qual}: dim {dim} does not match dataflow {cur}")
    return errors


def _validate_tree(layers, prefix, errors):
    names = set()
    for layer in layers:
        qual = f"{prefix}{layer.name}"
        if layer.name in names:
            errors.append(f"{qual}: duplicate sibling name")
        names.add(layer.name)
        if layer.kind not in LAYER_KINDS:
            errors.append(f"{qual}: unknown kind {layer.kind!r}")
            continue
        if layer.kind == "container":
            if not layer.children:
                errors.append(f"{qual}: container has no children")
            if layer.op not in CONTAINER_OPS:
                errors.append(f"{qual}: unknown container op {layer.op!r}")
            if layer.op == "convnext_block" and layer.children:
                first, last = layer.children[0], layer.children[-1]
                if (first.in_dim or 0) != (last.out_dim or first.in_dim or 0):
                    errors.append(f"{qual}: residual block input and output dims differ")
            _validate_tree(layer.children, qual + ".", errors)
            continue
        dims = [d for d in (layer.in_dim, layer.out_dim) if d is not None]
        if not dims or any(d < 1 for d in dims):
            errors.append(f"{qual}: missing or non-positive dims")
            continue
        if layer.kind == "conv":
            if layer.kernel is None or len(layer.kernel) != 2:
                errors.append(f"{qual}: conv needs a kernel (kH, kW)")
            g = layer.groups
            if g < 1 or layer.in_dim % g or layer.out_dim % g:
                errors.append(
                    f"{qual}: groups={g} does not divide in={layer.in_dim}, out={layer.out_dim}"
                )
        elif layer.kind in ("norm", "scale_vector", "attention"):
            if layer.in_dim is not None and layer.out_dim is not None and layer.in_dim != layer.out_dim:
                errors.append(f"{qual}: {layer.kind} must have equal in/out dims")


def validate_or_raise(spec: NetworkSpec) -> None:
    errors = validate(spec)
    if errors:
        raise SpecError("; ".join(errors))


# ---------------------------------------------------------------------
# parameter counting


def count_leaf_params(leaf: LayerSpec) -> int:
    if leaf.kind == "conv":
        kh, kw = leaf.kernel
        n = leaf.out_dim * (leaf.in_dim // leaf.groups) * kh * kw
        return n + (leaf.out_dim if leaf.bias else 0)
    if leaf.kind == "linear":
        return leaf.out_dim * leaf.in_dim + (leaf.out_dim if leaf.bias else 0)
    if leaf.kind == "norm":
        return 2 * (leaf.out_dim or leaf.in_dim)
    if leaf.kind == "scale_vector":
        return leaf.out_dim or leaf.in_dim
    if leaf.kind == "attention":
        d = leaf.out_dim or leaf.in_dim
        return (4 * d * d + 4 * d) + (8 * d * d + 5 * d)
    raise SpecError(f"cannot count parameters of kind {leaf.kind!r}")


def count_params(spec: NetworkSpec) -> int:
    """Closed-form parameter count over all leaves."""
    return sum(count_leaf_params(leaf) for _, leaf in spec.walk_leaves())


# ---------------------------------------------------------------------
# group repair and interpolation


def adjust_groups(new_in: int, new_out: int, old_groups: int, old_in: int, old_out: int) -> int:
    """Repair a conv group count after channel reduction.

    Depthwise layers stay depthwise; anything else falls back to the
    greatest common divisor, which always yields a valid configuration.
    """
    if old_groups == old_in == old_out:
        return new_in
    return math.gcd(math.gcd(old_groups, new_in), new_out)


def interp_resize(w: np.ndarray, new_shape, resizable_axes) -> np.ndarray:
    """Separable endpoint-aligned linear interpolation to `new_shape`.

    First and last source samples map to first and last target samples,
    so resizing to the original shape is the identity and constants are
    preserved exactly. A source axis of length 1 broadcasts. Axes not in
    `resizable_axes` must keep their size.
    """
    new_shape = tuple(int(n) for n in new_shape)
    if len(new_shape) != w.ndim:
        raise SpecError(f"rank mismatch: {w.shape} -> {new_shape}")
    resizable = set(resizable_axes)
    out = w
    for ax, (old, new) in enumerate(zip(w.shape, new_shape)):
        if new == old:
            continue
        if ax not in resizable:
            raise SpecError(f"axis {ax} is not resizable ({old} -> {new})")
        if new < 1:
            raise SpecError(f"axis {ax}: target size must be positive")
        if old == 1:
            out = np.repeat(out, new, axis=ax)
            continue
        if new == 1:
            # degenerate target: sample the midpoint of the source grid
            pos = np.array([(old - 1) / 2.0])
        else:
            pos = np.arange(new) * (old - 1) / (new - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, out.shape[ax] - 1)
        frac = (pos - lo).reshape([-1 if i == ax else 1 for i in range(w.ndim)])
        lo_vals = np.take(out, lo, axis=ax)
        hi_vals = np.take(out, hi, axis=ax)
        out = lo_vals * (1.0 - frac) + hi_vals * frac
    return np.ascontiguousarray(out.astype(w.dtype))


# ---------------------------------------------------------------------
# the reduction transform

# weight-entry suffixes per leaf kind, with the dim each axis tracks:
# conv   weight [out, in/groups, kH, kW], bias [out]
# linear weight [in, out], bias [out]
# norm   gamma/beta [d]; scale_vector gamma [d]


def expected_entries(qual: str, leaf: LayerSpec) -> list[str]:
    if leaf.kind == "conv":
        names = [f"{qual}.weight"]
        if leaf.bias:
            names.append(f"{qual}.bias")
        return names
    if leaf.kind == "linear":
        names = [f"{qual}.weight"]
        if leaf.bias:
            names.append(f"{qual}.bias")
        return names
    if leaf.kind == "norm":
        return [f"{qual}.gamma", f"{qual}.beta"]
    if leaf.kind == "scale_vector":
        return [f"{qual}.gamma"]
    if leaf.kind == "attention":
        names = []
        for proj in ("wq", "wk", "wv", "wo", "ff1", "ff2"):
            names += [f"{qual}.{proj}.weight", f"{qual}.{proj}.bias"]
        return names
    raise SpecError(f"kind {leaf.kind!r} has no weights")


def apply_prf(
    spec: NetworkSpec, weights: dict[str, np.ndarray], cfg: ReductionConfig
) -> tuple[NetworkSpec, dict[str, np.ndarray]]:
    """Shrink every non-fixed dimension by the reduction factor.

    Returns a fresh (spec, weights) pair; inputs are not mutated. With
    prf=1 the outputs are bit-identical copies. The reduced spec always
    validates.
    """
    validate_or_raise(spec)
    for qual, leaf in spec.walk_leaves():
        for entry in expected_entries(qual, leaf):
            if entry not in weights:
                raise WeightStoreError(f"missing weight entry {entry!r}")

    prf = cfg.prf
    new_weights: dict[str, np.ndarray] = {}

    def rebuild(layers, prefix):
        out = []
        for layer in layers:
            qual = f"{prefix}{layer.name}"
            if not layer.is_leaf():
                out.append(
                    replace(layer, children=rebuild(layer.children, qual + "."))
                )
                continue
            out.append(_reduce_leaf(qual, layer, prf, weights, new_weights))
        return out

    new_layers = rebuild(spec.layers, "")
    first_in = spec.input_channels
    for _, leaf in _walk(new_layers, ""):
        if leaf.kind in ("conv", "linear"):
            first_in = leaf.in_dim
            break
        if leaf.kind in ("norm", "scale_vector", "attention"):
            first_in = leaf.out_dim or leaf.in_dim
            break
    reduced = NetworkSpec(name=spec.name, input_channels=first_in, layers=new_layers)
    validate_or_raise(reduced)
    return reduced, new_weights


def _reduce_leaf(qual, leaf, prf, weights, new_weights):
    if leaf.kind == "conv":
        new_in = leaf.in_dim if leaf.fixed_input else reduce_dim(leaf.in_dim, prf)
        new_out = leaf.out_dim if leaf.fixed_output else reduce_dim(leaf.out_dim, prf)
        new_g = adjust_groups(new_in, new_out, leaf.groups, leaf.in_dim, leaf.out_dim)
        new_leaf = replace(leaf, in_dim=new_in, out_dim=new_out, groups=new_g)
        w = weights[f"{qual}.weight"]
        new_weights[f"{qual}.weight"] = interp_resize(
            w, (new_out, new_in // new_g) + w.shape[2:], resizable_axes=(0, 1)
        )
        if leaf.bias:
            new_weights[f"{qual}.bias"] = interp_resize(
                weights[f"{qual}.bias"], (new_out,), resizable_axes=(0,)
            )
        return new_leaf
    if leaf.kind == "linear":
        new_in = leaf.in_dim if leaf.fixed_input else reduce_dim(leaf.in_dim, prf)
        new_out = leaf.out_dim if leaf.fixed_output else reduce_dim(leaf.out_dim, prf)
        new_leaf = replace(leaf, in_dim=new_in, out_dim=new_out)
        new_weights[f"{qual}.weight"] = interp_resize(
            weights[f"{qual}.weight"], (new_in, new_out), resizable_axes=(0, 1)
        )
        if leaf.bias:
            new_weights[f"{qual}.bias"] = interp_resize(
                weights[f"{qual}.bias"], (new_out,), resizable_axes=(0,)
            )
        return new_leaf
    if leaf.kind in ("norm", "scale_vector"):
        d = leaf.out_dim or leaf.in_dim
        fixed = leaf.fixed_output or leaf.fixed_input
        new_d = d if fixed else reduce_dim(d, prf)
        new_leaf = replace(leaf, in_dim=new_d, out_dim=new_d)
        for entry in expected_entries(qual, leaf):
            new_weights[entry] = interp_resize(weights[entry], (new_d,), resizable_axes=(0,))
        return new_leaf
    if leaf.kind == "attention":
        d = leaf.out_dim or leaf.in_dim
        fixed = leaf.fixed_output or leaf.fixed_input
        new_d = d if fixed else reduce_dim(d, prf)
        new_leaf = replace(leaf, in_dim=new_d, out_dim=new_d)
        shapes = {
            "wq": (new_d, new_d), "wk": (new_d, new_d), "wv": (new_d, new_d),
            "wo": (new_d, new_d), "ff1": (new_d, 4 * new_d), "ff2": (4 * new_d, new_d),
        }
        for proj, shp in shapes.items():
            new_weights[f"{qual}.{proj}.weight"] = interp_resize(
                weights[f"{qual}.{proj}.weight"], shp, resizable_axes=(0, 1)
            )
            new_weights[f"{qual}.{proj}.bias"] = interp_resize(
                weights[f"{qual}.{proj}.bias"], (shp[1],), resizable_axes=(0,)
            )
        return new_leaf
    raise SpecError(f"cannot reduce kind {leaf.kind!r}")


# ---------------------------------------------------------------------
# weight initialization


def init_weights(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh weights for every leaf, seeded and He/GPT-style scaled."""
    out: dict[str, np.ndarray] = {}
    for qual, leaf in spec.walk_leaves():
        if leaf.kind == "conv":
            kh, kw = leaf.kernel
            fan_in = (leaf.in_dim // leaf.groups) * kh * kw
            out[f"{qual}.weight"] = (
                rng.normal(0.0, np.sqrt(2.0 / fan_in), (leaf.out_dim, leaf.in_dim // leaf.groups, kh, kw))
            ).astype(dtype)
            if leaf.bias:
                out[f"{qual}.bias"] = np.zeros(leaf.out_dim, dtype=dtype)
        elif leaf.kind == "linear":
            out[f"{qual}.weight"] = (
                rng.normal(0.0, np.sqrt(1.0 / leaf.in_dim), (leaf.in_dim, leaf.out_dim))
            ).astype(dtype)
            if leaf.bias:
                out[f"{qual}.bias"] = np.zeros(leaf.out_dim, dtype=dtype)
        elif leaf.kind == "norm":
            d = leaf.out_dim or leaf.in_dim
            out[f"{qual}.gamma"] = np.ones(d, dtype=dtype)
            out[f"{qual}.beta"] = np.zeros(d, dtype=dtype)
        elif leaf.kind == "scale_vector":
            d = leaf.out_dim or leaf.in_dim
            # small but not vanishing: keeps residual branches live at toy scale
            out[f"{qual}.gamma"] = np.full(d, 0.1, dtype=dtype)
        elif leaf.kind == "attention":
            d = leaf.out_dim or leaf.in_dim
            for proj, shp in (
                ("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)), ("wo", (d, d)),
                ("ff1", (d, 4 * d)), ("ff2", (4 * d, d)),
            ):
                out[f"{qual}.{proj}.weight"] = rng.normal(0.0, 0.02, shp).astype(dtype)
                out[f"{qual}.{proj}.bias"] = np.zeros(shp[1], dtype=dtype)
    return out


# ---------------------------------------------------------------------
# JSON round trip


def spec_to_json(spec: NetworkSpec) -> str:
    def enc(layer: LayerSpec):
        d = {"name": layer.name, "kind": layer.kind}
        if layer.in_dim is not None:
            d["in"] = layer.in_dim
        if layer.out_dim is not None:
            d["out"] = layer.out_dim
        if layer.kernel is not None:
            d["kernel"] = list(layer.kernel)
        if layer.groups != 1:
            d["groups"] = layer.groups
        if layer.stride != 1:
            d["stride"] = layer.stride
        if layer.padding != 0:
            d["padding"] = layer.padding
        if not layer.bias:
            d["bias"] = False
        if layer.fixed_input:
            d["fixed_input"] = True
        if layer.fixed_output:
            d["fixed_output"] = True
        if layer.op != "sequential":
            d["op"] = layer.op
        if layer.children:
            d["children"] = [enc(c) for c in layer.children]
        return d

    doc = {
        "name": spec.name,
        "input_channels": spec.input_channels,
        "layers": [enc(layer) for layer in spec.layers],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def spec_from_json(text: str) -> NetworkSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid spec JSON: {exc}") from exc

    def dec(d) -> LayerSpec:
        if "name" not in d or "kind" not in d:
            raise SpecError("layer entries need 'name' and 'kind'")
        kernel = d.get("kernel")
        return LayerSpec(
            name=d["name"],
            kind=d["kind"],
            in_dim=d.get("in"),
            out_dim=d.get("out"),
            kernel=tuple(kernel) if kernel else None,
            groups=d.get("groups", 1),
            stride=d.get("stride", 1),
            padding=d.get("padding", 0),
            bias=d.get("bias", True),
            fixed_input=d.get("fixed_input", False),
            fixed_output=d.get("fixed_output", False),
            op=d.get("op", "sequential"),
            children=[dec(c) for c in d.get("children", [])],
        )

    for key in ("name", "input_channels", "layers"):
        if key not in doc:
            raise SpecError(f"spec JSON missing {key!r}")
    return NetworkSpec(
        name=doc["name"],
        input_channels=int(doc["input_channels"]),
        layers=[dec(layer) for layer in doc["layers"]],
    )


def load_spec(path) -> NetworkSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_json(fh.read())


def save_spec(path, spec: NetworkSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec_to_json(spec))


# ---------------------------------------------------------------------
# default backbone


def convnext_block_spec(name: str, dim: int) -> LayerSpec:
    """Depthwise 7x7 -> norm -> expand 4x -> project -> layer scale."""
    return LayerSpec(
        name=name,
        kind="container",
        op="convnext_block",
        children=[
            LayerSpec("dwconv", "conv", dim, dim, kernel=(7, 7), groups=dim, padding=3, bias=False),
            LayerSpec("norm", "norm", dim, dim),
            LayerSpec("expand", "linear", dim, 4 * dim),
            LayerSpec("project", "linear", 4 * dim, dim),
            LayerSpec("scale", "scale_vector", dim, dim),
        ],
    )


def toy_backbone_spec(input_channels: int = 6, model_dim: int = 64) -> NetworkSpec:
    """Small ConvNeXt-style backbone: dims [16, 32, 64], depths [1, 1, 2].

    The stem input is pinned to the image channel count and the final
    projection output is pinned to the transformer width, so reduced
    variants stay plug-compatible with an unreduced encoder/decoder.
    """
    dims = (16, 32, 64)
    layers = [
        LayerSpec("stem", "conv", input_channels, dims[0], kernel=(4, 4), stride=4, fixed_input=True),
        LayerSpec("stem_norm", "norm", dims[0], dims[0]),
        convnext_block_spec("stage1_block1", dims[0]),
        LayerSpec("down1_norm", "norm", dims[0], dims[0]),
        LayerSpec("down1", "conv", dims[0], dims[1], kernel=(2, 2), stride=2),
        convnext_block_spec("stage2_block1", dims[1]),
        LayerSpec("down2_norm", "norm", dims[1], dims[1]),
        LayerSpec("down2", "conv", dims[1], dims[2], kernel=(2, 2), stride=2),
        convnext_block_spec("stage3_block1", dims[2]),
        convnext_block_spec("stage3_block2", dims[2]),
        LayerSpec("head_norm", "norm", dims[2], dims[2]),
        LayerSpec("proj", "linear", dims[2], model_dim, fixed_output=True),
    ]
    return NetworkSpec(name="toy_backbone", input_channels=input_channels, layers=layers)
