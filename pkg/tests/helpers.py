"""Shared test utilities: finite-difference oracle and error metrics."""

import numpy as np


def numeric_grad(f, arr, h_scale=1e-4):
    """Central-difference gradient of scalar f() w.r.t. every entry of arr.

    Perturbs arr in place and restores it; f must re-run the forward pass
    and return a python float.
    """
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        h = h_scale * max(1.0, abs(orig))
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def numeric_grad_at(f, arr, indices, h_scale=1e-4):
    """Central differences only at the given multi-indices."""
    out = []
    for idx in indices:
        orig = arr[idx]
        h = h_scale * max(1.0, abs(orig))
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        out.append((fp - fm) / (2 * h))
    return np.asarray(out)


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def max_rel_err(a, b, floor=1e-6):
    return rel_err(a, b, floor=floor)


def random_tiny_net(seed, dtype="float64", classes=3, with_bn=True):
    """A small random conv stack for brute-force equivalence checks."""
    from slimshot.model import LayerSpec, build_model

    rng = np.random.default_rng(seed)
    cin = int(rng.integers(1, 4))
    n_blocks = int(rng.integers(1, 4))
    specs = []
    for b in range(n_blocks):
        width = int(rng.integers(2, 7))
        specs.append(LayerSpec("conv", out_channels=width, kernel=3, padding=1,
                               stride=1, prunable=True))
        if with_bn and rng.random() < 0.8:
            specs.append(LayerSpec("bn", out_channels=width))
        specs.append(LayerSpec("relu"))
    specs.append(LayerSpec("maxpool"))
    specs.append(LayerSpec("avgpool", out_hw=2))
    specs.append(LayerSpec("flatten"))
    if rng.random() < 0.7:
        hidden = int(rng.integers(3, 9))
        specs.append(LayerSpec("linear", units=hidden, prunable=True))
        specs.append(LayerSpec("relu"))
    specs.append(LayerSpec("linear", units=classes, prunable=False))
    model = build_model(specs, (cin, 8, 8), seed=seed + 1, dtype=dtype)
    return model


def random_batch(model, n, seed, classes=None):
    rng = np.random.default_rng(seed)
    c, h, w = model.input_shape
    if classes is None:
        classes = model.specs[-1].units
    x = rng.normal(size=(n, c, h, w)).astype(model.dtype)
    y = rng.integers(0, classes, size=n)
    return x, y


def unit_saliency_from_weights(model, layer_idx):
    """Sum of w * dL/dw + b * dL/db over one layer's units (signed)."""
    state = model.layers[layer_idx]
    w, b = state["weight"], state["bias"]
    axes = tuple(range(1, w.data.ndim))
    return (w.data * w.grad).sum(axis=axes) + b.data * b.grad
