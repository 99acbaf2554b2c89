"""FLOP accounting: per-unit costs, smoothed normalization, model totals.

One multiply-accumulate counts as two FLOPs. Conv/linear MAC terms are the
quantities checked exactly against the runtime instrumentation counter;
bias adds, BN (2/element), relu (1/element) and pooling (window size per
output element) are added to the grand total under a fixed convention.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .model import MaskSet, ModelGraph


@dataclass
class CostTable:
    """Per prunable layer: raw per-unit FLOP cost and smoothed normalized cost."""

    raw: dict[int, float]
    smoothed: dict[int, float]
    lam: float
    geometry: dict[int, dict]


@dataclass
class LayerFlops:
    index: int
    kind: str
    units_total: int
    units_kept: int
    mac_flops: int
    other_flops: int

    @property
    def flops(self):
        return self.mac_flops + self.other_flops


@dataclass
class FlopsBreakdown:
    rows: list

    @property
    def total(self):
        return sum(r.flops for r in self.rows)

    @property
    def mac_total(self):
        return sum(r.mac_flops for r in self.rows)

    @property
    def other_total(self):
        return sum(r.other_flops for r in self.rows)


def unit_cost(kind, fan_in, out_h=1, out_w=1, kernel=1) -> float:
    """FLOPs charged to one output unit: 2*H*W*Cin*K^2 (conv) or 2*F (linear)."""
    if kind == "conv":
        return 2.0 * out_h * out_w * fan_in * kernel * kernel
    if kind == "linear":
        return 2.0 * fan_in
    raise ValueError(f"no unit cost for layer kind {kind!r}")


def layer_geometry(model: ModelGraph) -> dict[int, dict]:
    """Unpruned geometry snapshot per prunable layer: (Cin, H, W, K)."""
    shapes = model.infer_shapes()
    geo = {}
    live = model.input_shape[0]
    feat = None
    for i, spec in enumerate(model.specs):
        if spec.kind == "conv":
            _, oh, ow = shapes[i]
            if spec.prunable:
                geo[i] = {"kind": "conv", "cin": live, "out_h": oh, "out_w": ow,
                          "kernel": spec.kernel}
            live = spec.out_channels
        elif spec.kind == "flatten":
            feat = shapes[i][0]
        elif spec.kind == "linear":
            fan_in = feat if feat is not None else live
            if spec.prunable:
                geo[i] = {"kind": "linear", "cin": fan_in, "out_h": 1, "out_w": 1,
                          "kernel": 1}
            feat = spec.units
    return geo


def smooth_normalize(costs, lam: float) -> np.ndarray:
    """Laplace-smooth then normalize so the largest layer cost becomes 1."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0:
        raise ValueError("no layer costs to normalize")
    if lam < 0:
        raise ValueError("smoothing term must be non-negative")
    shifted = costs + lam
    cbar = shifted / shifted.sum()
    return cbar / cbar.max()


def cost_table(model: ModelGraph, lam: float = 0.0) -> CostTable:
    geo = layer_geometry(model)
    order = sorted(geo)
    raw = {i: unit_cost(**geo[i]) for i in order}
    smoothed_vec = smooth_normalize([raw[i] for i in order], lam)
    return CostTable(raw=raw, smoothed=dict(zip(order, smoothed_vec)), lam=lam,
                     geometry=geo)


def _flop_rows(model: ModelGraph, kept: dict[int, int] | None) -> list[LayerFlops]:
    kept = kept or {}
    shapes = model.infer_shapes()
    rows = []
    live = model.input_shape[0]  # channel (or feature) count flowing forward
    for i, spec in enumerate(model.specs):
        if spec.kind == "conv":
            _, oh, ow = shapes[i]
            cout = kept.get(i, spec.out_channels)
            mac = oh * ow * cout * live * spec.kernel * spec.kernel
            rows.append(LayerFlops(i, "conv", spec.out_channels, cout,
                                   2 * mac, oh * ow * cout))
            live = cout
        elif spec.kind == "bn":
            _, h, w = shapes[i]
            rows.append(LayerFlops(i, "bn", spec.out_channels, live, 0, 2 * live * h * w))
        elif spec.kind == "relu":
            shape = shapes[i]
            n = live * int(np.prod(shape[1:])) if len(shape) > 1 else live
            rows.append(LayerFlops(i, "relu", 0, 0, 0, n))
        elif spec.kind == "maxpool":
            _, oh, ow = shapes[i]
            rows.append(LayerFlops(i, "maxpool", 0, 0, 0, live * oh * ow * 3))
        elif spec.kind == "avgpool":
            cin, hin, win = shapes[i - 1] if i else model.input_shape
            _, oh, ow = shapes[i]
            window = (hin // oh) * (win // ow)
            rows.append(LayerFlops(i, "avgpool", 0, 0, 0, live * oh * ow * window))
        elif spec.kind == "flatten":
            _, h, w = shapes[i - 1] if i else model.input_shape
            live = live * h * w
            rows.append(LayerFlops(i, "flatten", 0, 0, 0, 0))
        elif spec.kind == "linear":
            units = kept.get(i, spec.units)
            mac = units * live
            rows.append(LayerFlops(i, "linear", spec.units, units, 2 * mac, units))
            live = units
    return rows


def flops_breakdown(model: ModelGraph, kept: dict[int, int] | None = None) -> FlopsBreakdown:
    return FlopsBreakdown(_flop_rows(model, kept))


def total_flops(model: ModelGraph, kept: dict[int, int] | None = None) -> int:
    """Closed-form per-example FLOPs of one forward pass."""
    return flops_breakdown(model, kept).total


def flops_with_masks(model: ModelGraph, masks: MaskSet) -> int:
    return total_flops(model, masks.kept_counts())


def flop_audit_rows(model: ModelGraph, masks: MaskSet | None = None) -> list[dict]:
    """Before/after audit per layer for the CSV report."""
    kept = masks.kept_counts() if masks is not None else {}
    before = _flop_rows(model, None)
    after = _flop_rows(model, kept)
    geo = layer_geometry(model)
    out = []
    for b, a in zip(before, after):
        out.append({
            "layer_index": b.index,
            "kind": b.kind,
            "units_total": b.units_total,
            "units_kept": a.units_kept,
            "unit_cost": unit_cost(**geo[b.index]) if b.index in geo else "",
            "layer_flops_before": b.flops,
            "layer_flops_after": a.flops,
        })
    return out


def write_flop_audit(path, model: ModelGraph, masks: MaskSet | None = None):
    rows = flop_audit_rows(model, masks)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
