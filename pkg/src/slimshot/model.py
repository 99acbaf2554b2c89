"""Sequential model graphs with per-unit mask attachment and presets.

A ModelGraph is an ordered list of LayerSpecs plus parameter tensors.
Every prunable conv/linear layer owns one mask slot per output unit; a
masked forward multiplies the unit's activation right after the affine op
(before BN), which makes the mask gradient equal the summed per-weight
saliency of the unit. The mask value additionally gates the BN scale/shift
of the unit (gradient detached) so a zeroed unit contributes exactly
nothing downstream, matching physical removal.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCH_FORMAT = "slimshot-arch-v1"

VGG_BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
VGG_HIDDEN = (1024, 512)


class DisconnectionError(RuntimeError):
    """Raised when a prune decision removes every unit of a layer."""

    def __init__(self, layer_index):
        self.layer_index = layer_index
        super().__init__(f"all units of layer {layer_index} would be removed")


@dataclass
class LayerSpec:
    kind: str  # conv | bn | relu | maxpool | avgpool | flatten | linear
    out_channels: int = 0   # conv/bn
    kernel: int = 3
    padding: int = 1
    stride: int = 1
    units: int = 0          # linear
    out_hw: int = 2         # avgpool target grid
    prunable: bool = False

    def width(self):
        if self.kind == "conv":
            return self.out_channels
        if self.kind == "linear":
            return self.units
        return None

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(out_channels=self.out_channels, kernel=self.kernel,
                     padding=self.padding, stride=self.stride, prunable=self.prunable)
        elif self.kind == "bn":
            d.update(out_channels=self.out_channels)
        elif self.kind == "linear":
            d.update(units=self.units, prunable=self.prunable)
        elif self.kind == "avgpool":
            d.update(out_hw=self.out_hw)
        return d

    @staticmethod
    def from_dict(d):
        return LayerSpec(kind=d["kind"],
                         out_channels=d.get("out_channels", 0),
                         kernel=d.get("kernel", 3),
                         padding=d.get("padding", 1),
                         stride=d.get("stride", 1),
                         units=d.get("units", 0),
                         out_hw=d.get("out_hw", 2),
                         prunable=d.get("prunable", False))


@dataclass
class MaskSet:
    """Per prunable layer, a {0,1} vector over output units."""

    values: dict[int, np.ndarray]

    @staticmethod
    def ones(model, dtype=None):
        dtype = dtype or model.dtype
        return MaskSet({i: np.ones(n, dtype=dtype) for i, n in model.mask_lengths().items()})

    def validate(self, model):
        lengths = model.mask_lengths()
        if set(self.values) != set(lengths):
            raise ValueError("mask layers do not match the model's prunable layers")
        for i, v in self.values.items():
            if v.shape != (lengths[i],):
                raise ValueError(f"mask length mismatch at layer {i}")
            if not np.isin(v, (0.0, 1.0)).all():
                raise ValueError(f"mask at layer {i} has entries other than 0/1")

    def n_entries(self):
        return sum(v.size for v in self.values.values())

    def n_pruned(self):
        return int(sum((v == 0).sum() for v in self.values.values()))

    def kept_counts(self):
        return {i: int(v.sum()) for i, v in self.values.items()}

    def copy(self):
        return MaskSet({i: v.copy() for i, v in self.values.items()})

    def to_bitmap(self):
        return {str(i): [int(b) for b in v] for i, v in self.values.items()}

    @staticmethod
    def from_bitmap(d, dtype=np.float32):
        return MaskSet({int(i): np.asarray(v, dtype=dtype) for i, v in d.items()})


class ForwardResult:
    __slots__ = ("logits", "mask_leaves")

    def __init__(self, logits, mask_leaves):
        self.logits = logits
        self.mask_leaves = mask_leaves


class ModelGraph:
    """Ordered layers + parameters; immutable structure, mutable weights."""

    def __init__(self, specs, input_shape, dtype="float32"):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)  # (C, H, W)
        self.dtype = dtype
        self.layers = []  # one dict of named arrays/Tensors per spec
        np_dtype = np.dtype(dtype)
        for spec in self.specs:
            state = {}
            if spec.kind == "conv":
                cin = self._infer_cin(len(self.layers))
                state["weight"] = Tensor(np.zeros((spec.out_channels, cin, spec.kernel, spec.kernel), np_dtype), requires_grad=True)
                state["bias"] = Tensor(np.zeros(spec.out_channels, np_dtype), requires_grad=True)
            elif spec.kind == "bn":
                c = spec.out_channels
                state["gamma"] = Tensor(np.ones(c, np_dtype), requires_grad=True)
                state["beta"] = Tensor(np.zeros(c, np_dtype), requires_grad=True)
                state["running_mean"] = np.zeros(c, np_dtype)
                state["running_var"] = np.ones(c, np_dtype)
            elif spec.kind == "linear":
                fan_in = self._infer_fan_in(len(self.layers))
                state["weight"] = Tensor(np.zeros((spec.units, fan_in), np_dtype), requires_grad=True)
                state["bias"] = Tensor(np.zeros(spec.units, np_dtype), requires_grad=True)
            self.layers.append(state)
        self.shapes = self.infer_shapes()

    # -- shape bookkeeping -------------------------------------------------

    def _infer_cin(self, upto):
        c = self.input_shape[0]
        for spec in self.specs[:upto]:
            if spec.kind == "conv":
                c = spec.out_channels
            elif spec.kind == "linear":
                raise ValueError("conv after linear is not supported")
        return c

    def _infer_fan_in(self, upto):
        shape = self.input_shape
        for spec, s in zip(self.specs[:upto], self._shape_walk(upto)):
            shape = s
        return int(np.prod(shape)) if len(shape) > 1 else shape[0]

    def _shape_walk(self, upto=None):
        shape = self.input_shape  # (C, H, W) or (F,)
        out = []
        for spec in self.specs[:upto]:
            if spec.kind == "conv":
                c, h, w = shape
                if (h + 2 * spec.padding - spec.kernel) % spec.stride or \
                   (w + 2 * spec.padding - spec.kernel) % spec.stride:
                    raise ValueError("conv output extent is not exact")
                h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                shape = (spec.out_channels, h, w)
            elif spec.kind == "maxpool":
                c, h, w = shape
                if h % 2 or w % 2:
                    raise ValueError(f"maxpool needs even extent, got {h}x{w}")
                shape = (c, h // 2, w // 2)
            elif spec.kind == "avgpool":
                c, h, w = shape
                if h % spec.out_hw or w % spec.out_hw:
                    raise ValueError("avgpool target does not divide input extent")
                shape = (c, spec.out_hw, spec.out_hw)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "linear":
                shape = (spec.units,)
            out.append(shape)
        return out

    def infer_shapes(self):
        """Per-layer output shapes (without the batch dimension)."""
        return self._shape_walk()

    # -- parameters ----------------------------------------------------------

    def parameters(self):
        out = []
        for i, state in enumerate(self.layers):
            for name in ("weight", "bias", "gamma", "beta"):
                if name in state:
                    out.append((i, name, state[name]))
        return out

    def weight_parameters(self):
        """conv/linear kernels and biases only (no BN affine)."""
        return [(i, n, t) for i, n, t in self.parameters() if n in ("weight", "bias")]

    def zero_grad(self):
        for _, _, t in self.parameters():
            t.zero_grad()

    def param_count(self):
        return int(sum(t.data.size for _, _, t in self.parameters()))

    def clone(self):
        out = ModelGraph([copy.copy(s) for s in self.specs], self.input_shape, self.dtype)
        for src, dst in zip(self.layers, out.layers):
            for name, val in src.items():
                if isinstance(val, Tensor):
                    dst[name].data = val.data.copy()
                else:
                    dst[name][...] = val
        return out

    def astype(self, dtype):
        out = ModelGraph([copy.copy(s) for s in self.specs], self.input_shape, dtype)
        np_dtype = np.dtype(dtype)
        for src, dst in zip(self.layers, out.layers):
            for name, val in src.items():
                if isinstance(val, Tensor):
                    dst[name].data = val.data.astype(np_dtype)
                else:
                    dst[name][...] = val.astype(np_dtype)
        return out

    # -- masks ----------------------------------------------------------------

    def prunable_layers(self):
        return [i for i, s in enumerate(self.specs) if s.prunable]

    def mask_lengths(self):
        return {i: self.specs[i].width() for i in self.prunable_layers()}

    def widths(self):
        return {i: s.width() for i, s in enumerate(self.specs) if s.kind in ("conv", "linear")}

    # -- forward ----------------------------------------------------------------

    def apply(self, batch, mode="train", masks: MaskSet | None = None,
              update_running=True, trace=None) -> ForwardResult:
        """Run the network; returns logits and (if masked) the mask leaf tensors.

        Passing a list as ``trace`` records each layer's output shape.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        T._record(model_forwards=1)
        np_dtype = np.dtype(self.dtype)
        x = Tensor(np.ascontiguousarray(batch, dtype=np_dtype))
        mask_leaves: dict[int, Tensor] = {}
        if masks is not None:
            masks.validate(self)
            for i, v in masks.values.items():
                mask_leaves[i] = Tensor(v.astype(np_dtype), requires_grad=True)
        gate = None  # mask values of the live producer, for BN gating
        for i, (spec, state) in enumerate(zip(self.specs, self.layers)):
            if spec.kind == "conv":
                x = T.conv2d(x, state["weight"], state["bias"], spec.padding, spec.stride)
                gate = None
                if i in mask_leaves:
                    x = T.scale_channels(x, mask_leaves[i])
                    gate = mask_leaves[i].data
            elif spec.kind == "bn":
                gamma, beta = state["gamma"], state["beta"]
                if gate is not None:
                    # value-gate the affine so a zeroed unit stays exactly zero;
                    # the mask gradient flows only through the activation product
                    gamma = T.cmul(gamma, gate)
                    beta = T.cmul(beta, gate)
                x = T.batchnorm2d(x, gamma, beta, state["running_mean"], state["running_var"],
                                  mode=mode, update_running=update_running and mode == "train")
            elif spec.kind == "relu":
                x = T.relu(x)
            elif spec.kind == "maxpool":
                x = T.maxpool2d(x)
            elif spec.kind == "avgpool":
                x = T.avgpool_to(x, spec.out_hw)
            elif spec.kind == "flatten":
                x = T.flatten(x)
            elif spec.kind == "linear":
                x = T.linear(x, state["weight"], state["bias"])
                gate = None
                if i in mask_leaves:
                    x = T.scale_channels(x, mask_leaves[i])
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            if trace is not None:
                trace.append(x.data.shape[1:])
        return ForwardResult(x, mask_leaves)

    def forward(self, batch, mode="train", update_running=True) -> Tensor:
        return self.apply(batch, mode=mode, update_running=update_running).logits


def forward_masked(model: ModelGraph, masks: MaskSet, batch, mode="train") -> Tensor:
    """Masked evaluation; with all-ones masks this is bit-identical to forward."""
    return model.apply(batch, mode=mode, masks=masks, update_running=False).logits


# ---------------------------------------------------------------------------
# initialization and presets


def he_init(model: ModelGraph, seed: int) -> ModelGraph:
    """Kaiming-normal weights, zero biases, unit BN scale. In place."""
    rng = np.random.default_rng(seed)
    np_dtype = np.dtype(model.dtype)
    for spec, state in zip(model.specs, model.layers):
        if spec.kind == "conv":
            cout, cin, k, _ = state["weight"].data.shape
            std = np.sqrt(2.0 / (cin * k * k))
            state["weight"].data = rng.normal(0.0, std, size=state["weight"].data.shape).astype(np_dtype)
            state["bias"].data = np.zeros(cout, np_dtype)
        elif spec.kind == "linear":
            u, f = state["weight"].data.shape
            std = np.sqrt(2.0 / f)
            state["weight"].data = rng.normal(0.0, std, size=(u, f)).astype(np_dtype)
            state["bias"].data = np.zeros(u, np_dtype)
        elif spec.kind == "bn":
            c = spec.out_channels
            state["gamma"].data = np.ones(c, np_dtype)
            state["beta"].data = np.zeros(c, np_dtype)
            state["running_mean"][...] = 0.0
            state["running_var"][...] = 1.0
    return model


def build_model(specs, input_shape, seed=0, dtype="float32") -> ModelGraph:
    return he_init(ModelGraph(specs, input_shape, dtype), seed)


def conv_block(channels, prunable=True):
    return [LayerSpec("conv", out_channels=channels, kernel=3, padding=1, stride=1, prunable=prunable),
            LayerSpec("bn", out_channels=channels),
            LayerSpec("relu")]


def build_vgg19(num_classes=10, width_multiplier=1.0, in_channels=3, input_hw=32,
                seed=0, dtype="float32") -> ModelGraph:
    """VGG-style preset: five conv blocks (2-2-3-3-3 conv-BN-relu) with 2x2
    max-pooling between blocks, average pooling to 2x2, then a 3-layer head.

    Hidden widths scale by the multiplier (rounded up); the classifier output
    is never scaled and never prunable.
    """
    if width_multiplier <= 0:
        raise ValueError("width multiplier must be positive")
    widths = [int(np.ceil(width_multiplier * w)) for w, _ in VGG_BLOCKS]
    if any(w == 0 for w in widths):
        raise ValueError("width multiplier yields an empty layer")
    specs: list[LayerSpec] = []
    for b, ((_, n_convs), width) in enumerate(zip(VGG_BLOCKS, widths)):
        if b > 0:
            specs.append(LayerSpec("maxpool"))
        for _ in range(n_convs):
            specs.extend(conv_block(width))
    specs.append(LayerSpec("avgpool", out_hw=2))
    specs.append(LayerSpec("flatten"))
    for hidden in VGG_HIDDEN:
        h = int(np.ceil(width_multiplier * hidden))
        specs.append(LayerSpec("linear", units=h, prunable=True))
        specs.append(LayerSpec("relu"))
    specs.append(LayerSpec("linear", units=num_classes, prunable=False))
    return build_model(specs, (in_channels, input_hw, input_hw), seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# serialization: architecture JSON + flat little-endian parameter blob


def _param_manifest(model: ModelGraph):
    entries = []
    for i, state in enumerate(model.layers):
        for name in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
            if name in state:
                val = state[name]
                arr = val.data if isinstance(val, Tensor) else val
                entries.append({"layer": i, "name": name, "shape": list(arr.shape),
                                "dtype": str(arr.dtype)})
    return entries


def save_model(model: ModelGraph, arch_path, blob_path):
    arch = {
        "format": ARCH_FORMAT,
        "input_shape": list(model.input_shape),
        "dtype": model.dtype,
        "layers": [s.to_dict() for s in model.specs],
        "params": _param_manifest(model),
    }
    with open(arch_path, "w") as f:
        json.dump(arch, f, indent=1)
    with open(blob_path, "wb") as f:
        for entry in arch["params"]:
            val = model.layers[entry["layer"]][entry["name"]]
            arr = val.data if isinstance(val, Tensor) else val
            f.write(np.ascontiguousarray(arr, dtype="<" + np.dtype(arr.dtype).str[1:]).tobytes())


def load_model(arch_path, blob_path) -> ModelGraph:
    with open(arch_path) as f:
        arch = json.load(f)
    if arch.get("format") != ARCH_FORMAT:
        raise ValueError(f"unsupported architecture format {arch.get('format')!r}")
    specs = [LayerSpec.from_dict(d) for d in arch["layers"]]
    model = ModelGraph(specs, tuple(arch["input_shape"]), arch["dtype"])
    blob = open(blob_path, "rb").read()
    offset = 0
    for entry in arch["params"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = n * dt.itemsize
        if offset + nbytes > len(blob):
            raise ValueError(f"parameter blob truncated at byte {offset}")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype=dt).reshape(entry["shape"])
        arr = arr.astype(entry["dtype"])
        offset += nbytes
        val = model.layers[entry["layer"]][entry["name"]]
        if isinstance(val, Tensor):
            val.data = arr
        else:
            model.layers[entry["layer"]][entry["name"]] = arr
    if offset != len(blob):
        raise ValueError("parameter blob has trailing bytes")
    return model
