"""Threshold selection and model surgery.

Selection pools every score across layers, prunes exactly floor(p*N)
entries with a nearest-rank threshold (ties resolved by ascending
(layer, unit) index), and surgery physically removes the pruned units:
kernel output slices, biases, BN rows, and the matching input slices of
whatever consumes them, including the conv->avgpool->flatten->linear
feature blocks.
"""

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import DisconnectionError, LayerSpec, MaskSet, ModelGraph
from .saliency import ScoreSet


@dataclass
class PruneReport:
    criterion: str
    prune_ratio: float | None
    flop_target: float | None
    lam: float | None
    threshold: float | None
    per_layer: list = field(default_factory=list)  # {layer, kept, total}
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0
    prune_ms: float = 0.0
    finish: str = "none"
    disconnected_layer: int | None = None

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1)


def _selection_plan(scores: ScoreSet, p: float):
    if not 0.0 <= p < 1.0:
        raise ValueError("prune ratio must be in [0, 1)")
    layers, units, pooled = scores.pooled()
    n = pooled.size
    if n == 0:
        raise ValueError("empty score pool")
    prune_count = int(np.floor(p * n))
    if prune_count == 0:
        return None, np.zeros(0, dtype=int)
    order = np.argsort(pooled, kind="stable")  # ascending score, then (layer, unit)
    threshold = float(pooled[order[prune_count - 1]])
    below = pooled < threshold
    n_below = int(below.sum())
    pruned = list(np.flatnonzero(below))
    # ties at the threshold go in ascending (layer, unit) order
    at = np.flatnonzero(pooled == threshold)
    pruned.extend(at[: prune_count - n_below])
    return threshold, np.asarray(sorted(pruned), dtype=int)


def threshold_value(scores: ScoreSet, p: float):
    return _selection_plan(scores, p)[0]


def threshold_select(scores: ScoreSet, p: float, min_keep_per_layer: int = 0) -> MaskSet:
    """Keep entries with score >= global nearest-rank threshold.

    ``min_keep_per_layer`` optionally re-keeps the top units of a layer that
    selection emptied (guard against disconnection; prune count then falls
    short of floor(p*N) by the number of re-kept units).
    """
    threshold, pruned_idx = _selection_plan(scores, p)
    layers, units, pooled = scores.pooled()
    keep = np.ones(pooled.size, dtype=bool)
    keep[pruned_idx] = False
    values = {}
    pos = 0
    for i in sorted(scores.values):
        size = scores.values[i].size
        layer_keep = keep[pos:pos + size].copy()
        if min_keep_per_layer and layer_keep.sum() < min_keep_per_layer:
            short = min_keep_per_layer - int(layer_keep.sum())
            candidates = np.flatnonzero(~layer_keep)
            best = candidates[np.argsort(pooled[pos:pos + size][candidates], kind="stable")[::-1][:short]]
            layer_keep[best] = True
        values[i] = layer_keep.astype(np.float64)
        pos += size
    return MaskSet(values)


def _kept_indices(masks: MaskSet, layer: int):
    return np.flatnonzero(masks.values[layer] > 0.5)


def shrink(model: ModelGraph, masks: MaskSet) -> ModelGraph:
    """Rebuild the model with pruned units physically removed."""
    masks.validate(model)
    specs = [copy.copy(s) for s in model.specs]
    shapes = model.infer_shapes()
    new_states = []
    live = None          # surviving channel indices of the producing layer
    feat_keep = None     # surviving flattened feature indices
    for i, (spec, state) in enumerate(zip(specs, model.layers)):
        if spec.kind == "conv":
            w = state["weight"].data
            if live is not None:
                w = w[:, live]
            if spec.prunable and i in masks.values:
                keep = _kept_indices(masks, i)
                if keep.size == 0:
                    raise DisconnectionError(i)
            else:
                keep = np.arange(spec.out_channels)
            new_states.append({"weight": w[keep].copy(), "bias": state["bias"].data[keep].copy()})
            spec.out_channels = int(keep.size)
            live = keep
        elif spec.kind == "bn":
            keep = live if live is not None else np.arange(spec.out_channels)
            new_states.append({
                "gamma": state["gamma"].data[keep].copy(),
                "beta": state["beta"].data[keep].copy(),
                "running_mean": state["running_mean"][keep].copy(),
                "running_var": state["running_var"][keep].copy(),
            })
            spec.out_channels = int(keep.size)
        elif spec.kind == "flatten":
            if live is not None:
                c, h, w = shapes[i - 1]
                block = h * w
                feat_keep = (live[:, None] * block + np.arange(block)[None, :]).ravel()
            new_states.append({})
        elif spec.kind == "linear":
            w = state["weight"].data
            if feat_keep is not None:
                w = w[:, feat_keep]
            elif live is not None:
                w = w[:, live]
            if spec.prunable and i in masks.values:
                keep = _kept_indices(masks, i)
                if keep.size == 0:
                    raise DisconnectionError(i)
            else:
                keep = np.arange(spec.units)
            new_states.append({"weight": w[keep].copy(), "bias": state["bias"].data[keep].copy()})
            spec.units = int(keep.size)
            live = keep
            feat_keep = None
        else:
            new_states.append({})
    out = ModelGraph(specs, model.input_shape, model.dtype)
    for dst, src in zip(out.layers, new_states):
        for name, arr in src.items():
            if name in ("running_mean", "running_var"):
                dst[name] = arr
            else:
                dst[name].data = arr
    return out


def rescale(model: ModelGraph, original_widths: dict[int, int]) -> ModelGraph:
    """Multiply surviving weights by sqrt(original fan out / pruned fan out).

    Fan out is output units times kernel area, so the ratio reduces to the
    unit-count ratio per layer.
    """
    out = model.clone()
    for i, spec in enumerate(out.specs):
        if spec.kind not in ("conv", "linear"):
            continue
        width = spec.width()
        orig = original_widths.get(i, width)
        if width == 0:
            raise DisconnectionError(i)
        if orig != width:
            out.layers[i]["weight"].data *= np.sqrt(orig / width).astype(out.layers[i]["weight"].data.dtype)
    return out


def reinit(model: ModelGraph, seed: int) -> ModelGraph:
    """Fresh He initialization on the shrunken architecture."""
    from .model import he_init

    return he_init(model.clone(), seed)
