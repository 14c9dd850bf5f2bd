"""Reverse-mode automatic differentiation over dense numpy tensors.

Every differentiable primitive used by the pipeline lives here: elementwise
math, matmul, 3x3 convolution, nearest upsampling, concat/reshape/transpose,
reductions, softmax, cumsum, and bilinear grid sampling.  Tensors wrap numpy
arrays (float32 by default, float64 available for tight-tolerance checks) and
record a tape of parent links; ``backward`` walks the tape once in reverse
topological order.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# When True, tensor construction rejects NaN/Inf payloads.
CHECKED = False


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


def _as_array(value, dtype):
    arr = np.asarray(value, dtype=dtype)
    if CHECKED and not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values in tensor construction")
    return arr


class Tensor:
    """A node in the autodiff tape.

    ``data`` is a numpy array; ``grad`` is filled by ``backward``.  Tensors are
    treated as immutable values after construction.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype or (data.dtype if isinstance(data, np.ndarray)
                                              and data.dtype in (np.float32, np.float64)
                                              else DEFAULT_DTYPE))
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------
# elementwise primitives
# ----------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(a.data / b.data, (a, b), bw)


def power(a, p: float):
    a = _lift(a)
    p = float(p)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * p * np.power(a.data, p - 1.0))

    return _result(np.power(a.data, p), (a,), bw)


def exp(a):
    a = _lift(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _result(out_data, (a,), bw)


def log(a):
    a = _lift(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), bw)


def sqrt(a):
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (0.5 / out_data))

    return _result(out_data, (a,), bw)


def cos(a):
    a = _lift(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, -g * np.sin(a.data))

    return _result(np.cos(a.data), (a,), bw)


def sin(a):
    a = _lift(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * np.cos(a.data))

    return _result(np.sin(a.data), (a,), bw)


def sigmoid(a):
    a = _lift(a)
    s = _sigmoid_np(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * s * (1.0 - s))

    return _result(s, (a,), bw)


def _sigmoid_np(x):
    # stable for both signs: exp argument is always <= 0
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def softplus(a):
    a = _lift(a)
    # log(1 + e^x) computed stably as max(x, 0) + log1p(e^-|x|)
    out_data = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
    s = _sigmoid_np(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _result(out_data, (a,), bw)


def scaled_sigmoid(a, alpha: float):
    """(1/alpha) * sigmoid(alpha * x); range (0, 1/alpha), derivative at 0 is 1/4."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    a = _lift(a)
    s = _sigmoid_np(alpha * a.data)

    def bw(g):
        if a.requires_grad:
            # d/dx (1/a) sigma(a x) = sigma'(a x)
            _accum(a, g * s * (1.0 - s))

    return _result(s / alpha, (a,), bw)


def silu(a):
    a = _lift(a)
    s = _sigmoid_np(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _result(a.data * s, (a,), bw)


def clip(a, lo: float, hi: float):
    """Clamp with pass-through gradient inside [lo, hi], zero outside."""
    a = _lift(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _result(np.clip(a.data, lo, hi), (a,), bw)


# ----------------------------------------------------------------------
# shape / structural primitives
# ----------------------------------------------------------------------

def reshape(a, shape):
    a = _lift(a)
    old = a.data.shape

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(old))

    return _result(a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _result(a.data.transpose(axes), (a,), bw)


def getitem(a, key):
    a = _lift(a)

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            _accum(a, full)

    return _result(a.data[key], (a,), bw)


def concat(tensors: Iterable, axis=0):
    ts = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Iterable, axis=0):
    ts = [_lift(t) for t in tensors]

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for t, p in zip(ts, parts):
            if t.requires_grad:
                _accum(t, p)

    return _result(np.stack([t.data for t in ts], axis=axis), ts, bw)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    shape = a.data.shape

    def bw(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.broadcast_to(g, shape).astype(a.data.dtype, copy=True))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                _accum(a, np.broadcast_to(g, shape).astype(a.data.dtype, copy=True))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def cumsum(a, axis=-1):
    a = _lift(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return _result(np.cumsum(a.data, axis=axis), (a,), bw)


def softmax(a, axis=-1):
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            _accum(a, (g - (g * y).sum(axis=axis, keepdims=True)) * y)

    return _result(y, (a,), bw)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeError("matmul requires rank >= 1 operands")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul: inner dims mismatch {a.data.shape} @ {b.data.shape}")

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _result(np.matmul(a.data, b.data), (a, b), bw)


# ----------------------------------------------------------------------
# spatial primitives
# ----------------------------------------------------------------------

def _im2col3(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H*W, C*9) patches for a same-padded 3x3 window."""
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, 9, H, W), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, k] = xp[:, dy:dy + H, dx:dx + W]
            k += 1
    return cols.reshape(C * 9, H * W).T


def _col2im3(cols: np.ndarray, C: int, H: int, W: int) -> np.ndarray:
    """Adjoint of _im2col3: (H*W, C*9) -> (C, H, W)."""
    cols = cols.T.reshape(C, 9, H, W)
    xp = np.zeros((C, H + 2, W + 2), dtype=cols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + H, dx:dx + W] += cols[:, k]
            k += 1
    return xp[:, 1:1 + H, 1:1 + W]


def conv3x3(x, weight, bias=None):
    """Same-padded 3x3 convolution: (C_in, H, W) -> (C_out, H, W).

    weight: (C_out, C_in, 3, 3); bias: (C_out,) or None.
    """
    x, weight = _lift(x), _lift(weight)
    if x.data.ndim != 3:
        raise ShapeError(f"conv3x3: input must be (C,H,W), got {x.data.shape}")
    C_out, C_in, kh, kw = weight.data.shape
    if (kh, kw) != (3, 3) or C_in != x.data.shape[0]:
        raise ShapeError(
            f"conv3x3: weight {weight.data.shape} incompatible with input {x.data.shape}")
    C, H, W = x.data.shape
    cols = _im2col3(x.data)                       # (H*W, C*9)
    w2 = weight.data.reshape(C_out, C_in * 9)
    out = cols @ w2.T                             # (H*W, C_out)
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.T.reshape(C_out, H, W)

    def bw(g):
        g2 = g.reshape(C_out, H * W).T            # (H*W, C_out)
        if x.requires_grad:
            _accum(x, _col2im3(g2 @ w2, C, H, W))
        if weight.requires_grad:
            _accum(weight, (g2.T @ cols).reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))

    return _result(out, parents, bw)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of a (C, H, W) map."""
    x = _lift(x)
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2x: input must be (C,H,W), got {x.data.shape}")
    C, H, W = x.data.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def bw(g):
        if x.requires_grad:
            _accum(x, g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)))

    return _result(out, (x,), bw)


def grid_sample(plane, coords):
    """Bilinear sampling of a (C, R, R) plane at normalized coords.

    coords: (N, 2) pairs (cx, cy) in [-1, 1] under the align-corners
    convention (corner texel centers at +-1).  Out-of-range coords are clamped;
    their coordinate gradient is zero there.  Returns (N, C).
    """
    plane, coords = _lift(plane), _lift(coords)
    if plane.data.ndim != 3 or plane.data.shape[1] != plane.data.shape[2]:
        raise ShapeError(f"grid_sample: plane must be (C,R,R), got {plane.data.shape}")
    if coords.data.ndim != 2 or coords.data.shape[1] != 2:
        raise ShapeError(f"grid_sample: coords must be (N,2), got {coords.data.shape}")
    C, R, _ = plane.data.shape
    dt = plane.data.dtype
    inside = np.all(np.abs(coords.data) <= 1.0, axis=1)
    c = np.clip(coords.data, -1.0, 1.0)
    # align-corners: -1 -> texel 0 center, +1 -> texel R-1 center
    fxy = (c + 1.0) * (0.5 * (R - 1))             # continuous texel coords
    ix, iy = fxy[:, 0], fxy[:, 1]
    ix0 = np.clip(np.floor(ix).astype(np.int64), 0, R - 1)
    iy0 = np.clip(np.floor(iy).astype(np.int64), 0, R - 1)
    ix1 = np.minimum(ix0 + 1, R - 1)
    iy1 = np.minimum(iy0 + 1, R - 1)
    fx = (ix - ix0).astype(dt)
    fy = (iy - iy0).astype(dt)
    pf = plane.data.reshape(C, R * R)
    i00 = iy0 * R + ix0
    i01 = iy0 * R + ix1
    i10 = iy1 * R + ix0
    i11 = iy1 * R + ix1
    p00, p01 = pf[:, i00].T, pf[:, i01].T         # (N, C)
    p10, p11 = pf[:, i10].T, pf[:, i11].T
    w00 = ((1 - fy) * (1 - fx))[:, None]
    w01 = ((1 - fy) * fx)[:, None]
    w10 = (fy * (1 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    out = w00 * p00 + w01 * p01 + w10 * p10 + w11 * p11

    def bw(g):
        if plane.requires_grad:
            gp = np.zeros((C, R * R), dtype=dt)
            for ch in range(C):
                gc = g[:, ch]
                gp[ch] = (np.bincount(i00, weights=w00[:, 0] * gc, minlength=R * R)
                          + np.bincount(i01, weights=w01[:, 0] * gc, minlength=R * R)
                          + np.bincount(i10, weights=w10[:, 0] * gc, minlength=R * R)
                          + np.bincount(i11, weights=w11[:, 0] * gc, minlength=R * R))
            _accum(plane, gp.reshape(C, R, R))
        if coords.requires_grad:
            # d out / d fx and d fy, contracted with g over channels
            dfx = ((1 - fy)[:, None] * (p01 - p00) + fy[:, None] * (p11 - p10))
            dfy = ((1 - fx)[:, None] * (p10 - p00) + fx[:, None] * (p11 - p01))
            scale = 0.5 * (R - 1)
            gx = (g * dfx).sum(axis=1) * scale * inside
            gy = (g * dfy).sum(axis=1) * scale * inside
            _accum(coords, np.stack([gx, gy], axis=1).astype(dt))

    return _result(out.astype(dt, copy=False), (plane, coords), bw)


# ----------------------------------------------------------------------
# normalization composites
# ----------------------------------------------------------------------

def instance_stats(x, eps: float = 1e-5):
    """Per-channel mean and epsilon-regularized std of a (C, H, W) map.

    Variance is the biased (unbiased=False) estimator.  Returns (mean, std)
    tensors of shape (C, 1, 1).
    """
    mu = tmean(x, axis=(1, 2), keepdims=True)
    var = tmean((x - mu) * (x - mu), axis=(1, 2), keepdims=True)
    return mu, sqrt(var + eps)


def group_norm(x, num_groups: int, eps: float = 1e-5):
    """Group normalization of a (C, H, W) map without affine parameters."""
    C, H, W = x.data.shape
    if C % num_groups != 0:
        raise ShapeError(f"group_norm: {C} channels not divisible by {num_groups} groups")
    g = reshape(x, (num_groups, C // num_groups * H * W))
    mu = tmean(g, axis=1, keepdims=True)
    var = tmean((g - mu) * (g - mu), axis=1, keepdims=True)
    return reshape((g - mu) / sqrt(var + eps), (C, H, W))


def layer_norm(x, eps: float = 1e-5):
    """Normalize over the last axis (token-wise pre-normalization)."""
    mu = tmean(x, axis=-1, keepdims=True)
    var = tmean((x - mu) * (x - mu), axis=-1, keepdims=True)
    return (x - mu) / sqrt(var + eps)


# ----------------------------------------------------------------------
# graph / backward
# ----------------------------------------------------------------------

def backward(output: Tensor, seed=None):
    """One reverse pass from ``output``; fills ``.grad`` on reachable tensors."""
    if seed is None:
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(seed, dtype=output.data.dtype)
    if seed.shape != output.data.shape:
        raise ShapeError(
            f"backward: seed shape {seed.shape} != output shape {output.data.shape}")
    topo: list[Tensor] = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    output.grad = seed
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class Graph:
    """Named-leaf wrapper around one forward/backward pass.

    Leaves are registered via ``leaf``; after the caller builds the forward
    computation from them, ``backward`` returns a gradient per leaf (zero
    tensors for leaves the output does not reach).  A graph supports exactly
    one backward pass.
    """

    def __init__(self):
        self.leaves: dict[str, Tensor] = {}
        self._consumed = False

    def leaf(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.leaves[name] = t
        return t

    def backward(self, output: Tensor, seed=None) -> dict[str, np.ndarray]:
        if self._consumed:
            raise RuntimeError("graph already consumed by a previous backward pass")
        self._consumed = True
        backward(output, seed)
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in self.leaves.items()}


# ----------------------------------------------------------------------
# finite-difference gradient checking
# ----------------------------------------------------------------------

def grad_check(builder: Callable[[dict[str, Tensor]], Tensor],
               params: dict[str, np.ndarray],
               eps: float = 1e-4,
               tol: float = 1e-3,
               numeric_dtype=np.float64,
               sample: int | None = None,
               sample_seed: int = 0) -> dict:
    """Compare reverse-mode gradients of a scalar builder to central differences.

    ``builder`` maps a dict of leaf Tensors to a scalar output Tensor and must
    be deterministic; two forward passes that disagree raise.  The analytic
    gradient runs at the dtype of ``params``; the central-difference reference
    runs at ``numeric_dtype`` so finite-difference roundoff does not mask
    backward-pass bugs.  ``sample`` limits the check to that many randomly
    chosen elements per parameter (for large composites).  Returns a report
    with per-parameter max relative errors and an overall pass flag.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")

    def run(pvals):
        g = Graph()
        leaves = {k: g.leaf(k, v) for k, v in pvals.items()}
        out = builder(leaves)
        if out.data.size != 1:
            raise ShapeError("grad_check builder must return a scalar")
        return g, out

    g1, out1 = run(params)
    g2, out2 = run(params)
    if not np.array_equal(out1.data, out2.data):
        raise RuntimeError("non-deterministic builder: two forward passes disagree")
    grads = g1.backward(out1)

    pick = np.random.default_rng(sample_seed)
    report = {"per_param": {}, "tol": tol, "passed": True}
    for name, base in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64).ravel()
        flat = np.asarray(base, dtype=np.float64).ravel()
        if sample is not None and flat.size > sample:
            idx = pick.choice(flat.size, size=sample, replace=False)
        else:
            idx = np.arange(flat.size)
        # near-zero entries are judged against the gradient's overall scale,
        # not their own magnitude, so f32 rounding noise cannot dominate
        scale = max(1.0, float(np.abs(analytic).max()) if analytic.size else 0.0)
        floor = 1e-3 * scale
        max_rel = 0.0
        for i in idx:
            pv = {k: np.asarray(v, dtype=numeric_dtype).copy()
                  for k, v in params.items()}
            pv[name].ravel()[i] = flat[i] + eps
            _, fp = run(pv)
            pv[name].ravel()[i] = flat[i] - eps
            _, fm = run(pv)
            numeric = (float(fp.data) - float(fm.data)) / (2.0 * eps)
            denom = max(abs(numeric) + abs(analytic[i]), floor)
            max_rel = max(max_rel, abs(analytic[i] - numeric) / denom)
        report["per_param"][name] = max_rel
        if max_rel > tol:
            report["passed"] = False
    report["max_rel_err"] = max(report["per_param"].values(), default=0.0)
    return report


# ----------------------------------------------------------------------
# serialization: u32 rank, u32 extents..., little-endian f32 payload
# ----------------------------------------------------------------------

def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float32)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise ValueError("tensor buffer too short for header")
    (rank,) = struct.unpack_from("<I", buf, 0)
    if len(buf) < 4 + 4 * rank:
        raise ValueError("tensor buffer too short for extents")
    shape = struct.unpack_from(f"<{rank}I", buf, 4)
    n = int(np.prod(shape)) if rank else 1
    payload = buf[4 + 4 * rank:]
    if len(payload) != 4 * n:
        raise ValueError(f"tensor payload length {len(payload)} != expected {4 * n}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
