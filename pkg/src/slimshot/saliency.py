"""Saliency criteria for pruning before training.

All criteria consume a single (images, labels) minibatch and leave the
model untouched: one masked forward plus one backward for the first-order
scores, two extra perturbed passes for the gradient-flow criterion.
Scores are stored so that higher always means keep.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .flops import CostTable
from .model import MaskSet, ModelGraph


@dataclass
class ScoreSet:
    """Per prunable layer, one score per output unit, plus provenance."""

    values: dict[int, np.ndarray]
    criterion: str
    batch_size: int | None = None
    temperature: float | None = None
    lam: float | None = None
    meta: dict = field(default_factory=dict)

    def n_entries(self):
        return sum(v.size for v in self.values.values())

    def pooled(self):
        """(layer, unit, score) triples in ascending (layer, unit) order."""
        order = sorted(self.values)
        layers = np.concatenate([np.full(self.values[i].size, i) for i in order])
        units = np.concatenate([np.arange(self.values[i].size) for i in order])
        scores = np.concatenate([np.asarray(self.values[i], dtype=np.float64) for i in order])
        return layers, units, scores


def mask_gradients(model: ModelGraph, batch, mode="train", temperature=1.0) -> dict[int, np.ndarray]:
    """Signed dL/dmask at mask=1 from one forward + one backward."""
    images, labels = batch
    masks = MaskSet.ones(model)
    res = model.apply(images, mode=mode, masks=masks, update_running=False)
    loss = T.softmax_cross_entropy(res.logits, labels, temperature=temperature)
    model.zero_grad()
    loss.backward()
    out = {}
    for i, leaf in res.mask_leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite mask gradient at layer {i}")
        out[i] = np.asarray(g, dtype=np.float64)
    model.zero_grad()
    return out


def score_3sp(model: ModelGraph, batch, mode="train", normalize=False) -> ScoreSet:
    """|dL/dmask| per unit; optionally normalized by the global score sum."""
    grads = mask_gradients(model, batch, mode=mode)
    values = {i: np.abs(g) for i, g in grads.items()}
    if normalize:
        total = sum(v.sum() for v in values.values())
        if total > 0:
            values = {i: v / total for i, v in values.items()}
    return ScoreSet(values=values, criterion="3sp", batch_size=len(batch[1]),
                    meta={"mode": mode, "normalized": normalize})


def weight_mask_gradients(model: ModelGraph, batch, mode="train", temperature=1.0):
    """Signed per-weight mask gradients w * dL/dw for conv/linear kernels."""
    images, labels = batch
    loss = T.softmax_cross_entropy(
        model.apply(images, mode=mode, update_running=False).logits,
        labels, temperature=temperature)
    model.zero_grad()
    loss.backward()
    out = {}
    for i, name, t in model.parameters():
        if name != "weight":
            continue
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite weight gradient at layer {i}")
        out[i] = np.asarray(t.data * g, dtype=np.float64)
    model.zero_grad()
    return out


def score_snip_unstructured(model: ModelGraph, batch, mode="train") -> dict[int, np.ndarray]:
    """|w * dL/dw| per kernel weight; baseline only, masks are never applied
    physically so no speedup is claimed for this criterion."""
    return {i: np.abs(v) for i, v in weight_mask_gradients(model, batch, mode=mode).items()}


# -- gradient-flow criterion ---------------------------------------------------


def hvp_central_diff(grad_fn, theta: list[np.ndarray], v: list[np.ndarray], eps_scale=1e-3):
    """(grad(theta + eps v) - grad(theta - eps v)) / (2 eps), eps = scale*|theta|/|v|.

    ``grad_fn`` evaluates gradients at the current parameter values; ``theta``
    are the live arrays, perturbed in place and restored bit-exactly.
    """
    theta_norm = np.sqrt(sum(float((t * t).sum()) for t in theta))
    v_norm = np.sqrt(sum(float((x * x).sum()) for x in v))
    if v_norm == 0:
        return [np.zeros_like(t) for t in theta]
    eps = eps_scale * max(theta_norm, 1e-12) / v_norm
    saved = [t.copy() for t in theta]
    try:
        for t, d in zip(theta, v):
            t += eps * d
        g_plus = grad_fn()
        for t, s, d in zip(theta, saved, v):
            t[...] = s - eps * d
        g_minus = grad_fn()
    finally:
        for t, s in zip(theta, saved):
            t[...] = s
    return [(gp - gm) / (2 * eps) for gp, gm in zip(g_plus, g_minus)]


def _weight_grad_arrays(model, batch, temperature):
    images, labels = batch
    loss = T.softmax_cross_entropy(
        model.apply(images, mode="train", update_running=False).logits,
        labels, temperature=temperature)
    model.zero_grad()
    loss.backward()
    grads = []
    for _, _, t in model.weight_parameters():
        grads.append(np.array(t.grad if t.grad is not None else np.zeros_like(t.data)))
    model.zero_grad()
    return grads


def score_grasp(model: ModelGraph, batch, temperature=200.0, granularity="structured"):
    """Gradient-flow saliency via a finite-difference Hessian-vector product.

    Structured: derivative of the squared weight-gradient norm w.r.t. each
    unit mask at mask=1. Unstructured: w * (H g) per kernel weight. Units
    with a large score contribute most to gradient flow and are kept; keep
    decisions use the usual high-score-keeps threshold.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    theta = [t.data for _, _, t in model.weight_parameters()]
    g = _weight_grad_arrays(model, batch, temperature)

    if granularity == "unstructured":
        hg = hvp_central_diff(lambda: _weight_grad_arrays(model, batch, temperature), theta, g)
        out = {}
        idx = 0
        for i, name, t in model.weight_parameters():
            if name == "weight":
                val = theta[idx] * hg[idx]
                if not np.isfinite(val).all():
                    raise FloatingPointError("non-finite Hessian-vector product")
                out[i] = np.asarray(val, dtype=np.float64)
            idx += 1
        return out
    if granularity != "structured":
        raise ValueError(f"unknown granularity {granularity!r}")

    def mask_grad_arrays():
        grads = mask_gradients(model, batch, mode="train", temperature=temperature)
        return [grads[i] for i in sorted(grads)]

    hg = hvp_central_diff(mask_grad_arrays, theta, g)
    order = sorted(model.mask_lengths())
    values = {}
    for i, arr in zip(order, hg):
        # d||g||^2/dmask = 2 * (d^2 L / dmask dw) . g
        val = 2.0 * arr
        if not np.isfinite(val).all():
            raise FloatingPointError("non-finite Hessian-vector product")
        values[i] = val
    return ScoreSet(values=values, criterion="grasp-structured",
                    batch_size=len(batch[1]), temperature=temperature)


# -- compute-aware and random baselines ----------------------------------------


def retention_scores(scores: ScoreSet, costs: CostTable) -> ScoreSet:
    """Loss impact per unit of compute removed: |score| / smoothed layer cost."""
    if set(scores.values) != set(costs.smoothed):
        raise ValueError("score layers do not align with cost table layers")
    values = {}
    for i, v in scores.values.items():
        c = costs.smoothed[i]
        if c <= 0:
            raise ValueError(f"non-positive smoothed cost at layer {i}")
        values[i] = np.abs(v) / c
    return ScoreSet(values=values, criterion=scores.criterion + "-ca",
                    batch_size=scores.batch_size, lam=costs.lam)


def uniform_mask(model: ModelGraph, p: float, seed: int, ensure_min_one=False) -> MaskSet:
    """Bernoulli keep mask: each entry pruned independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("prune probability must be in [0, 1]")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(model.dtype)
    values = {}
    for i, n in model.mask_lengths().items():
        keep = (rng.random(n) >= p).astype(dtype)
        if ensure_min_one and keep.sum() == 0:
            keep[0] = 1.0
        values[i] = keep
    return MaskSet(values)


def balanced_batch_indices(labels, size, seed):
    """Round-robin over classes from a seeded shuffle; falls back to plain
    sampling when a class runs out."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    by_class = {}
    for idx in order:
        by_class.setdefault(int(labels[idx]), []).append(idx)
    classes = sorted(by_class)
    picked = []
    while len(picked) < size and any(by_class[c] for c in classes):
        for c in classes:
            if by_class[c] and len(picked) < size:
                picked.append(by_class[c].pop())
    return np.asarray(picked[:size])


def write_score_dump(path, scores: ScoreSet, costs: CostTable | None = None,
                     masks: MaskSet | None = None):
    """CSV: layer_index, unit_index, raw_score, cost, retention_score, kept."""
    layers, units, raw = scores.pooled()
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer_index", "unit_index", "raw_score", "cost",
                         "retention_score", "kept"])
        for l, u, s in zip(layers, units, raw):
            cost = costs.smoothed[int(l)] if costs else ""
            retention = abs(s) / cost if costs else ""
            kept = int(masks.values[int(l)][int(u)]) if masks else ""
            writer.writerow([int(l), int(u), s, cost, retention, kept])
