"""Dense-tensor engine with reverse-mode autodiff for VGG-style networks.

Values are numpy arrays (float32 by default, float64 for verification).
Every op builds a tape node holding a backward closure; ``Tensor.backward``
walks the tape in reverse topological order and add-assigns into leaf
gradients, so repeated backward calls accumulate until grads are reset.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Instrument:
    """Counters filled in while an ``instrument()`` context is active."""

    macs: int = 0
    conv_calls: int = 0
    linear_calls: int = 0
    model_forwards: int = 0
    backward_calls: int = 0
    batch_rows: list = field(default_factory=list)


_ACTIVE_INSTRUMENTS: list[Instrument] = []


@contextmanager
def instrument():
    """Count multiply-accumulates and pass-level events inside the block."""
    inst = Instrument()
    _ACTIVE_INSTRUMENTS.append(inst)
    try:
        yield inst
    finally:
        _ACTIVE_INSTRUMENTS.remove(inst)


def _record(**kwargs):
    for inst in _ACTIVE_INSTRUMENTS:
        for key, val in kwargs.items():
            if key == "batch_rows":
                inst.batch_rows.append(val)
            else:
                setattr(inst, key, getattr(inst, key) + val)


class Tensor:
    """A numpy array plus tape bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate gradients of every reachable leaf with requires_grad."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss node")
        _record(backward_calls=1)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.add_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small elementwise API; enough for toy losses and tests. The network
    # layers below are the real workhorses.
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out = _node(self.data + other.data, (self, other))

        def backward(g):
            if self.requires_grad or self._parents:
                self.add_grad(_unbroadcast(g, self.data.shape))
            if other.requires_grad or other._parents:
                other.add_grad(_unbroadcast(g, other.data.shape))

        out._backward = backward
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out = _node(self.data * other.data, (self, other))

        def backward(g):
            if self.requires_grad or self._parents:
                self.add_grad(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad or other._parents:
                other.add_grad(_unbroadcast(g * self.data, other.data.shape))

        out._backward = backward
        return out

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self):
        out = _node(np.asarray(self.data.sum(), dtype=self.dtype).reshape(()), (self,))

        def backward(g):
            self.add_grad(np.broadcast_to(g, self.data.shape).astype(self.dtype, copy=True))

        out._backward = backward
        return out


def _node(data, parents):
    out = Tensor(data)
    out._parents = tuple(p for p in parents if p.requires_grad or p._parents)
    return out


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def cmul(x: Tensor, const) -> Tensor:
    """Multiply by a constant array; gradient flows to x only."""
    const = np.asarray(const, dtype=x.dtype)
    out = _node(x.data * const, (x,))

    def backward(g):
        if _needs_grad(x):
            x.add_grad(_unbroadcast(g * const, x.data.shape))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# im2col convolution


def im2col(x, kernel, padding, stride):
    # x: (N, C, H, W) -> (N*OH*OW, C*K*K), rows ordered by (n, oh, ow)
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = np.empty((n, c, kernel, kernel, oh, ow), dtype=x.dtype)
    for ky in range(kernel):
        y_max = ky + stride * oh
        for kx in range(kernel):
            x_max = kx + stride * ow
            col[:, :, ky, kx, :, :] = x[:, :, ky:y_max:stride, kx:x_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kernel * kernel)


def col2im(col, x_shape, kernel, padding, stride):
    n, c, h, w = x_shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    col = col.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=col.dtype)
    for ky in range(kernel):
        y_max = ky + stride * oh
        for kx in range(kernel):
            x_max = kx + stride * ow
            img[:, :, ky:y_max:stride, kx:x_max:stride] += col[:, :, ky, kx, :, :]
    if padding:
        return img[:, :, padding:-padding, padding:-padding]
    return img


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding=0, stride=1) -> Tensor:
    n, cin, h, w = x.data.shape
    cout, cin_w, k, k2 = weight.data.shape
    if k != k2:
        raise ValueError("only square kernels supported")
    if cin != cin_w:
        raise ValueError(f"conv input channels {cin} do not match kernel {cin_w}")
    if bias.data.shape != (cout,):
        raise ValueError("bias shape must be (out_channels,)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError("kernel larger than padded input")
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        raise ValueError("conv output extent is not exact for this padding/stride")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1

    cols = im2col(x.data, k, padding, stride)            # (N*OH*OW, Cin*K*K)
    w2 = weight.data.reshape(cout, -1)                    # (Cout, Cin*K*K)
    out_mat = cols @ w2.T + bias.data
    out = _node(out_mat.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2), (x, weight, bias))
    _record(macs=n * oh * ow * cout * cin * k * k, conv_calls=1, batch_rows=n)

    def backward(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, cout)  # (N*OH*OW, Cout)
        if _needs_grad(weight):
            weight.add_grad((g_mat.T @ cols).reshape(weight.data.shape))
        if _needs_grad(bias):
            bias.add_grad(g_mat.sum(axis=0))
        if _needs_grad(x):
            x.add_grad(col2im(g_mat @ w2, x.data.shape, k, padding, stride))

    out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    n, f = x.data.shape
    u, f_w = weight.data.shape
    if f != f_w:
        raise ValueError(f"linear input features {f} do not match weight {f_w}")
    out = _node(x.data @ weight.data.T + bias.data, (x, weight, bias))
    _record(macs=n * u * f, linear_calls=1, batch_rows=n)

    def backward(g):
        if _needs_grad(weight):
            weight.add_grad(g.T @ x.data)
        if _needs_grad(bias):
            bias.add_grad(g.sum(axis=0))
        if _needs_grad(x):
            x.add_grad(g @ weight.data)

    out._backward = backward
    return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                mode="train", momentum=0.1, eps=1e-5, update_running=True) -> Tensor:
    n, c, h, w = x.data.shape
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm train mode needs more than one element per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            # running variance uses the unbiased estimate, normalization the biased one
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / (m - 1))
    elif mode == "eval":
        mean = running_mean
        var = running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = _node(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None],
                (x, gamma, beta))

    def backward(g):
        if _needs_grad(beta):
            beta.add_grad(g.sum(axis=(0, 2, 3)))
        if _needs_grad(gamma):
            gamma.add_grad((g * xhat).sum(axis=(0, 2, 3)))
        if _needs_grad(x):
            dxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                m = n * h * w
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                dx = (dxhat - s1[None, :, None, None] / m
                      - xhat * s2[None, :, None, None] / m) * inv_std[None, :, None, None]
            else:
                dx = dxhat * inv_std[None, :, None, None]
            x.add_grad(dx)

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0), (x,))

    def backward(g):
        if _needs_grad(x):
            x.add_grad(g * (x.data > 0))

    out._backward = backward
    return out


def maxpool2d(x: Tensor) -> Tensor:
    # fixed 2x2 window, stride 2; ties resolve to the first index in
    # row-major window order (np.argmax convention) for deterministic grads
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool needs even spatial extent, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    arg = windows.argmax(axis=-1)
    out = _node(np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0], (x,))

    def backward(g):
        if not _needs_grad(x):
            return
        gw = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        x.add_grad(gw.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    out._backward = backward
    return out


def avgpool_to(x: Tensor, out_hw=2) -> Tensor:
    # average pooling down to a fixed out_hw x out_hw spatial grid
    n, c, h, w = x.data.shape
    if h % out_hw or w % out_hw:
        raise ValueError(f"avgpool target {out_hw} does not divide input {h}x{w}")
    wh, ww = h // out_hw, w // out_hw
    out = _node(x.data.reshape(n, c, out_hw, wh, out_hw, ww).mean(axis=(3, 5)), (x,))

    def backward(g):
        if _needs_grad(x):
            scale = 1.0 / (wh * ww)
            expanded = np.repeat(np.repeat(g, wh, axis=2), ww, axis=3) * scale
            x.add_grad(expanded)

    out._backward = backward
    return out


def flatten(x: Tensor) -> Tensor:
    n = x.data.shape[0]
    shape = x.data.shape
    out = _node(x.data.reshape(n, -1), (x,))

    def backward(g):
        if _needs_grad(x):
            x.add_grad(g.reshape(shape))

    out._backward = backward
    return out


def scale_channels(x: Tensor, m: Tensor) -> Tensor:
    """Per-unit multiplicative gate on axis 1 of a 2d or 4d activation."""
    c = x.data.shape[1]
    if m.data.shape != (c,):
        raise ValueError(f"mask length {m.data.shape} does not match {c} channels")
    shape = (1, c) + (1,) * (x.data.ndim - 2)
    out = _node(x.data * m.data.reshape(shape), (x, m))

    def backward(g):
        if _needs_grad(x):
            x.add_grad(g * m.data.reshape(shape))
        if _needs_grad(m):
            axes = (0,) + tuple(range(2, x.data.ndim))
            m.add_grad((g * x.data).sum(axis=axes))

    out._backward = backward
    return out


def softmax_cross_entropy(logits: Tensor, labels, temperature=1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("non-finite logits in cross entropy")
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("labels out of range")
    z = logits.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(n), labels]
    out = _node(np.asarray(nll.mean(), dtype=logits.dtype).reshape(()), (logits,))

    def backward(g):
        if _needs_grad(logits):
            p = np.exp(z - logsumexp[:, None])
            p[np.arange(n), labels] -= 1.0
            logits.add_grad(g * p / (n * temperature))

    out._backward = backward
    return out


def softmax(logits: np.ndarray, temperature=1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
