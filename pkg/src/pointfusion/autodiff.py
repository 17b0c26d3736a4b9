"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Just enough machinery for the point-cloud trunk and the two fusion heads:
matmul, elementwise arithmetic, concat, relu/sigmoid/log, reductions, a
max-over-axis with one-hot gradient routing, smooth-L1 and binary
cross-entropy losses, plus Adam and a finite-difference gradient checker.

Values are numpy float64 arrays. A ``Tensor`` owns its value, an optional
gradient accumulator, and backward closures linking it to its parents.
Graphs are acyclic; ``backward`` visits each node exactly once in reverse
topological order.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ShapeError


class Tensor:
    def __init__(self, values, requires_grad=False, parents=(), backward_fn=None,
                 op=""):
        self.values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"non-finite values in '{op or 'leaf'}'")
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def backward(self):
        """Populate ``grad`` on every requires_grad tensor reachable from here."""
        if self.values.size != 1:
            raise ShapeError("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def _accumulate(self, g):
        g = np.asarray(g, dtype=np.float64).reshape(self.values.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unary(x: Tensor, out_values, grad_fn, op) -> Tensor:
    out = Tensor(out_values, parents=(x,), op=op)
    if x.requires_grad:
        out._backward_fn = lambda g: x._accumulate(grad_fn(g))
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a bias broadcast over a's leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values + b.values, parents=(a, b), op="add")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward_fn = backward_fn
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values - b.values, parents=(a, b), op="sub")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    out._backward_fn = backward_fn
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with the same broadcasting rules as ``add``."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values * b.values, parents=(a, b), op="mul")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.shape))

    out._backward_fn = backward_fn
    return out


def scale(a: Tensor, k: float) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.values * k, lambda g: g * k, "scale")


def _unbroadcast(g, shape):
    """Sum a gradient over axes that were broadcast in the forward pass."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values @ b.values, parents=(a, b), op="matmul")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ g)

    out._backward_fn = backward_fn
    return out


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.values.T, lambda g: g.T, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.values.reshape(shape),
                  lambda g: g.reshape(a.shape), "reshape")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis),
                 parents=tuple(tensors), op="concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    out._backward_fn = backward_fn
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice of a 2D tensor."""
    a = as_tensor(a)
    out = Tensor(a.values[:, start:stop], parents=(a,), op="slice_cols")

    def backward_fn(g):
        full = np.zeros_like(a.values)
        full[:, start:stop] = g
        a._accumulate(full)

    if a.requires_grad:
        out._backward_fn = backward_fn
    return out


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Tile a (1, K) row to (n, K); backward sums over the copies."""
    a = as_tensor(a)
    row = a.values.reshape(1, -1)
    return _unary(a, np.repeat(row, n, axis=0),
                  lambda g: g.sum(axis=0).reshape(a.shape), "repeat_rows")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _unary(a, a.values * mask, lambda g: g * mask, "relu")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.values))
    return _unary(a, s, lambda g: g * s * (1.0 - s), "sigmoid")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # Out-of-domain inputs surface as the Tensor constructor's finite check,
    # not as a numpy warning.
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.log(a.values)
    return _unary(a, values, lambda g: g / a.values, "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient is zero outside [lo, hi]."""
    a = as_tensor(a)
    mask = (a.values >= lo) & (a.values <= hi)
    return _unary(a, np.clip(a.values, lo, hi), lambda g: g * mask, "clip")


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.values.sum(), lambda g: np.full(a.shape, float(g)), "sum")


def sum_over_axis(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.values.sum(axis=axis),
                  lambda g: np.repeat(np.expand_dims(g, axis),
                                      a.shape[axis], axis=axis),
                  "sum_axis")


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.values.size
    return _unary(a, a.values.mean(), lambda g: np.full(a.shape, float(g) / n),
                  "mean")


def max_over_axis(a: Tensor, axis: int = 0) -> Tensor:
    """Max reduction; backward routes gradient to the argmax only (first
    index on ties)."""
    a = as_tensor(a)
    arg = a.values.argmax(axis=axis)
    out_values = np.take_along_axis(a.values, np.expand_dims(arg, axis),
                                    axis=axis).squeeze(axis)

    def grad_fn(g):
        full = np.zeros_like(a.values)
        np.put_along_axis(full, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis=axis)
        return full

    return _unary(a, out_values, grad_fn, "max_axis")


def frobenius_sq(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.sum(a.values ** 2), lambda g: 2.0 * float(g) * a.values,
                  "frobenius_sq")


def smooth_l1(pred: Tensor, target: Tensor, delta: float = 1.0,
              reduction: str = "sum") -> Tensor:
    """Huber-style loss: 0.5 d^2/delta for |d| < delta, else |d| - 0.5 delta.

    ``reduction`` is "sum", "mean", or "none" (elementwise).
    """
    pred, target = as_tensor(pred), as_tensor(target)
    d = pred.values - target.values
    small = np.abs(d) < delta
    elem = np.where(small, 0.5 * d * d / delta, np.abs(d) - 0.5 * delta)
    dgrad = np.where(small, d / delta, np.sign(d))
    out = Tensor(_reduce(elem, reduction), parents=(pred, target),
                 op="smooth_l1")

    def backward_fn(g):
        ge = _spread(g, elem.shape, reduction)
        if pred.requires_grad:
            pred._accumulate(ge * dgrad)
        if target.requires_grad:
            target._accumulate(-ge * dgrad)

    out._backward_fn = backward_fn
    return out


def binary_cross_entropy(prob: Tensor, label: Tensor, eps: float = 1e-7,
                         reduction: str = "mean") -> Tensor:
    """-(y log p + (1-y) log(1-p)) with probabilities clamped to [eps, 1-eps]."""
    prob, label = as_tensor(prob), as_tensor(label)
    p = np.clip(prob.values, eps, 1.0 - eps)
    y = label.values
    elem = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    inside = (prob.values >= eps) & (prob.values <= 1.0 - eps)
    dgrad = ((p - y) / (p * (1.0 - p))) * inside
    out = Tensor(_reduce(elem, reduction), parents=(prob, label), op="bce")

    def backward_fn(g):
        ge = _spread(g, elem.shape, reduction)
        if prob.requires_grad:
            prob._accumulate(ge * dgrad)
        if label.requires_grad:
            label._accumulate(ge * (np.log(1.0 - p) - np.log(p)))

    out._backward_fn = backward_fn
    return out


def _reduce(elem, reduction):
    if reduction == "sum":
        return elem.sum()
    if reduction == "mean":
        return elem.mean()
    if reduction == "none":
        return elem
    raise ValueError(f"unknown reduction {reduction!r}")


def _spread(g, shape, reduction):
    if reduction == "sum":
        return np.full(shape, float(g))
    if reduction == "mean":
        return np.full(shape, float(g) / int(np.prod(shape)))
    return np.asarray(g).reshape(shape)


def im2col(x: Tensor, k: int, stride: int) -> Tensor:
    """Patch extraction for convolution-as-matmul.

    x is (H, W, C); output is (H'*W', k*k*C) with H' = (H-k)//stride + 1.
    Backward scatter-adds patch gradients back into the image.
    """
    x = as_tensor(x)
    H, W, C = x.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    rows = np.empty((Ho * Wo, k * k * C))
    coords = []
    for i in range(Ho):
        for j in range(Wo):
            hs, ws = i * stride, j * stride
            rows[i * Wo + j] = x.values[hs:hs + k, ws:ws + k, :].ravel()
            coords.append((hs, ws))

    def grad_fn(g):
        full = np.zeros_like(x.values)
        for idx, (hs, ws) in enumerate(coords):
            full[hs:hs + k, ws:ws + k, :] += g[idx].reshape(k, k, C)
        return full

    return _unary(x, rows, grad_fn, "im2col")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_init(params: dict) -> dict:
    """Fresh Adam state for a dict of name -> np.ndarray parameters."""
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place Adam update; missing gradients leave parameters untouched."""
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradient(fn, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between autodiff and finite-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor.
    """
    x = np.asarray(x, dtype=np.float64)
    t = Tensor(x.copy(), requires_grad=True)
    out = fn(t)
    out.backward()
    analytic = t.grad if t.grad is not None else np.zeros_like(x)
    numeric = finite_difference_grad(lambda arr: float(fn(Tensor(arr)).values),
                                     x, h)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# Checkpoints: flat binary of named float64 arrays + JSON manifest
# ---------------------------------------------------------------------------

def save_arrays(path, arrays: dict) -> None:
    """Write named float64 arrays as flat binary with a sidecar manifest.

    The manifest (``<path>.json``) records name, shape, and byte offset per
    array, in write order.
    """
    manifest = []
    offset = 0
    with open(path, "wb") as f:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name]).astype("<f8", copy=False)
            f.write(arr.tobytes())
            manifest.append({"name": name, "shape": list(arr.shape),
                             "offset": offset})
            offset += arr.nbytes
    with open(str(path) + ".json", "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def load_arrays(path) -> dict:
    with open(str(path) + ".json") as f:
        manifest = json.load(f)
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        raw = f.read()
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > size:
            raise ShapeError(f"manifest entry {entry['name']} exceeds file size")
        out[entry["name"]] = np.frombuffer(raw[start:end], dtype="<f8").reshape(
            shape).astype(np.float64)
    return out
