"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Covers exactly the operator set the collage video network needs: grouped and
dilated 2D cross-correlation, channel layer norm, GELU, global pooling, a
linear layer, softmax cross-entropy, and small elementwise/data-movement
helpers. Arrays are 32-bit by default; passing float64 inputs runs every op
in a 64-bit shadow mode used by the gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NumericsError, ShapeError

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf scan after each forward op; returns the old value."""
    global _FINITE_CHECKS
    old = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return old


def _as_float_array(data, dtype):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """Row-major dense array of reals (0 to 4 axes) with optional grad tracking.

    Data is immutable by convention after construction; only ``grad``
    accumulates. A tensor produced by an op keeps closures over its parents
    until ``backward`` consumes the tape (tapes are single-use).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = _as_float_array(data, dtype)
        if arr.ndim > 4:
            raise ShapeError(f"tensors support up to 4 axes, got shape {arr.shape}")
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"{what} contains NaN/Inf values")
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={'yes' if self.requires_grad else 'no'})"


def _from_op(data, parents, grad_fn, what):
    """Build an op output: tracks parents iff any of them requires grad."""
    # A single pairwise sum goes non-finite iff the array holds NaN/Inf, and
    # costs one pass instead of isfinite()'s bool temporary.
    if _FINITE_CHECKS and not np.isfinite(data.sum(dtype=np.float64)):
        if not np.all(np.isfinite(data)):
            raise NumericsError(f"{what} produced NaN/Inf values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _check_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes in op: {dt} vs {t.dtype}")
    return dt


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def backward(root: Tensor):
    """Reverse-mode accumulation from a scalar root through its tape.

    Populates ``.grad`` on every tracked tensor reachable from ``root``.
    Each tape is single-use; a second call on the same root raises.
    """
    if root.ndim != 0:
        raise ShapeError(f"backward root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not track gradients")
    if root._consumed:
        raise RuntimeError("backward already ran on this tape; rebuild the graph")
    root._consumed = True

    # Iterative topological sort over tracked nodes.
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones((), dtype=root.dtype)
    for node in reversed(topo):
        if node._grad_fn is None or node.grad is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match tensor shape {parent.data.shape}")
            if parent.grad is None:
                parent.grad = g.astype(parent.dtype, copy=True)
            else:
                parent.grad += g
        # Release the closure so saved activations can be freed.
        node._parents = ()
        node._grad_fn = None


# ---------------------------------------------------------------------------
# elementwise / movement ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _from_op(a.data * b.data, (a, b),
                    lambda g: (g * b.data, g * a.data), "mul")


def mul_const(x: Tensor, arr) -> Tensor:
    """Elementwise product with an untracked array (dropout / drop-path masks)."""
    arr = np.asarray(arr, dtype=x.dtype)
    return _from_op(x.data * arr, (x,), lambda g: (g * arr,), "mul_const")


def scale_channels(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply a (N, C, H, W) map by a learnable per-channel vector (C,)."""
    _check_same_dtype(x, alpha)
    if x.ndim != 4 or alpha.ndim != 1 or alpha.shape[0] != x.shape[1]:
        raise ShapeError(f"scale_channels: x {x.shape}, alpha {alpha.shape}")
    a4 = alpha.data[None, :, None, None]

    def grad_fn(g):
        return g * a4, np.einsum("nchw,nchw->c", g, x.data, optimize=True)

    return _from_op(x.data * a4, (x, alpha), grad_fn, "scale_channels")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _from_op(x.data.reshape(shape), (x,),
                    lambda g: (g.reshape(old),), "reshape")


def sum_all(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.full(x.shape, g, dtype=x.dtype),)
    return _from_op(x.data.sum(dtype=x.dtype), (x,), grad_fn, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def grad_fn(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)
    return _from_op(x.data.mean(dtype=x.dtype), (x,), grad_fn, "mean_all")


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2D cross-correlation: kernel/stride/dilation/padding/groups."""

    kernel: tuple
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1

    def out_extent(self, size: int, axis: int) -> int:
        k = self.kernel[axis]
        s = self.stride[axis]
        d = self.dilation[axis]
        p = self.padding[axis]
        return (size + 2 * p - d * (k - 1) - 1) // s + 1

    def validate(self, in_channels: int, out_channels: int):
        for name, pair in (("kernel", self.kernel), ("stride", self.stride),
                           ("dilation", self.dilation)):
            if len(pair) != 2 or any(int(v) < 1 for v in pair):
                raise ShapeError(f"ConvSpec {name} must be two positive ints, got {pair}")
        if len(self.padding) != 2 or any(int(v) < 0 for v in self.padding):
            raise ShapeError(f"ConvSpec padding must be two non-negative ints, got {self.padding}")
        if self.groups < 1:
            raise ShapeError(f"groups must be positive, got {self.groups}")
        if in_channels % self.groups or out_channels % self.groups:
            raise ShapeError(
                f"channels ({in_channels} -> {out_channels}) not divisible by groups={self.groups}")


def _pad_nchw(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _patch_view(xp, kh, kw, sh, sw, dh, dw, ho, wo):
    """Strided (N, C, kh, kw, Ho, Wo) window view over a padded input."""
    n, c = xp.shape[:2]
    s = xp.strides
    return as_strided(xp, shape=(n, c, kh, kw, ho, wo),
                      strides=(s[0], s[1], s[2] * dh, s[3] * dw, s[2] * sh, s[3] * sw))


def conv2d(x: Tensor, weight: Tensor, bias, spec: ConvSpec) -> Tensor:
    """2D cross-correlation NCHW -> NC'H'W' with stride/dilation/padding/groups.

    ``weight`` is (Cout, Cin/groups, kh, kw); ``bias`` is (Cout,) or None.
    Differentiable with respect to input, weight, and bias.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input/weight, got {x.shape} / {weight.shape}")
    n, cin, h, w = x.shape
    cout, cpg, kh, kw = weight.shape
    spec.validate(cin, cout)
    if (kh, kw) != tuple(spec.kernel):
        raise ShapeError(f"weight kernel {(kh, kw)} does not match spec {spec.kernel}")
    if cpg != cin // spec.groups:
        raise ShapeError(f"weight expects {cpg} channels/group, input gives {cin // spec.groups}")
    tensors = [x, weight] + ([bias] if bias is not None else [])
    _check_same_dtype(*tensors)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    ho = spec.out_extent(h, 0)
    wo = spec.out_extent(w, 1)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent not positive: {(ho, wo)} for input {(h, w)}")

    sh, sw = spec.stride
    dh, dw = spec.dilation
    ph, pw = spec.padding
    xp = _pad_nchw(x.data, ph, pw)

    if kh == 1 and kw == 1 and (sh, sw) == (1, 1) and (ph, pw) == (0, 0) and spec.groups == 1:
        y, grad_fn = _conv_pointwise(x, weight, bias, n, cin, cout, h, w)
    elif spec.groups == cin and cout == cin and cpg == 1:
        y, grad_fn = _conv_depthwise(x, weight, bias, xp, spec, ho, wo)
    elif spec.groups == 1:
        y, grad_fn = _conv_dense(x, weight, bias, xp, spec, ho, wo)
    else:
        y, grad_fn = _conv_grouped(x, weight, bias, xp, spec, ho, wo)

    if bias is not None:
        y += bias.data[None, :, None, None]  # y is freshly allocated above
    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _from_op(y, parents, grad_fn, "conv2d")


def _bias_grad(g):
    return g.sum(axis=(0, 2, 3))


def _conv_pointwise(x, weight, bias, n, cin, cout, h, w):
    # Unpadded 1x1 stride-1 kernels reduce to one batched matmul.
    xm = x.data.reshape(n, cin, h * w)
    w2 = weight.data.reshape(cout, cin)
    y = np.matmul(w2, xm).reshape(n, cout, h, w)

    def grad_fn(g):
        gm = g.reshape(n, cout, h * w)
        gx = np.matmul(w2.T, gm).reshape(x.shape)
        gw = np.einsum("nop,ncp->oc", gm, xm, optimize=True).reshape(weight.shape)
        gb = _bias_grad(g) if bias is not None else None
        return (gx, gw) + ((gb,) if bias is not None else ())

    return y, grad_fn


def _conv_depthwise(x, weight, bias, xp, spec, ho, wo):
    n, c = x.shape[:2]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    ph, pw = spec.padding
    w3 = weight.data.reshape(c, kh, kw)
    view = _patch_view(xp, kh, kw, sh, sw, dh, dw, ho, wo)
    y = np.einsum("ncijhw,cij->nchw", view, w3, optimize=True)

    def grad_fn(g):
        gview = _patch_view(xp, kh, kw, sh, sw, dh, dw, ho, wo)
        gw = np.einsum("nchw,ncijhw->cij", g, gview, optimize=True).reshape(weight.shape)
        if (sh, sw) == (1, 1):
            # Input grad of a stride-1 correlation is a correlation of the
            # padded upstream grad with the flipped kernel.
            full_h = dh * (kh - 1)
            full_w = dw * (kw - 1)
            gp = np.pad(g, ((0, 0), (0, 0), (full_h, full_h), (full_w, full_w)))
            gv = _patch_view(gp, kh, kw, 1, 1, dh, dw, xp.shape[2], xp.shape[3])
            gxp = np.einsum("ncijhw,cij->nchw", gv, w3[:, ::-1, ::-1], optimize=True)
        else:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    sl = gxp[:, :, i * dh: i * dh + (ho - 1) * sh + 1: sh,
                             j * dw: j * dw + (wo - 1) * sw + 1: sw]
                    sl += g * w3[:, i, j][None, :, None, None]
        gx = gxp[:, :, ph: ph + x.shape[2], pw: pw + x.shape[3]] if (ph or pw) else gxp
        gb = _bias_grad(g) if bias is not None else None
        return (gx, np.ascontiguousarray(gw)) + ((gb,) if bias is not None else ())

    return y, grad_fn


def _conv_dense(x, weight, bias, xp, spec, ho, wo):
    n, cin = x.shape[:2]
    cout = weight.shape[0]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    ph, pw = spec.padding
    k = cin * kh * kw
    cols = _patch_view(xp, kh, kw, sh, sw, dh, dw, ho, wo).reshape(n, k, ho * wo)
    w2 = weight.data.reshape(cout, k)
    y = np.matmul(w2, cols).reshape(n, cout, ho, wo)

    def grad_fn(g):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.einsum("nop,nkp->ok", gm, cols, optimize=True).reshape(weight.shape)
        gcols = np.matmul(w2.T, gm).reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = gxp[:, :, i * dh: i * dh + (ho - 1) * sh + 1: sh,
                         j * dw: j * dw + (wo - 1) * sw + 1: sw]
                sl += gcols[:, :, i, j]
        gx = gxp[:, :, ph: ph + x.shape[2], pw: pw + x.shape[3]] if (ph or pw) else gxp
        gb = _bias_grad(g) if bias is not None else None
        return (gx, gw) + ((gb,) if bias is not None else ())

    return y, grad_fn


def _conv_grouped(x, weight, bias, xp, spec, ho, wo):
    # Rarely-exercised generic path: run the dense kernel once per group.
    n, cin = x.shape[:2]
    cout = weight.shape[0]
    g_ = spec.groups
    cpg_in, cpg_out = cin // g_, cout // g_
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    ph, pw = spec.padding
    k = cpg_in * kh * kw
    y = np.empty((n, cout, ho, wo), dtype=x.dtype)
    cols_per_group = []
    for gi in range(g_):
        xg = xp[:, gi * cpg_in:(gi + 1) * cpg_in]
        cols = _patch_view(xg, kh, kw, sh, sw, dh, dw, ho, wo).reshape(n, k, ho * wo)
        cols_per_group.append(cols)
        wg = weight.data[gi * cpg_out:(gi + 1) * cpg_out].reshape(cpg_out, k)
        y[:, gi * cpg_out:(gi + 1) * cpg_out] = np.matmul(wg, cols).reshape(n, cpg_out, ho, wo)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for gi in range(g_):
            gm = g[:, gi * cpg_out:(gi + 1) * cpg_out].reshape(n, cpg_out, ho * wo)
            wg = weight.data[gi * cpg_out:(gi + 1) * cpg_out].reshape(cpg_out, k)
            gw[gi * cpg_out:(gi + 1) * cpg_out] = np.einsum(
                "nop,nkp->ok", gm, cols_per_group[gi], optimize=True).reshape(cpg_out, cpg_in, kh, kw)
            gcols = np.matmul(wg.T, gm).reshape(n, cpg_in, kh, kw, ho, wo)
            dst = gxp[:, gi * cpg_in:(gi + 1) * cpg_in]
            for i in range(kh):
                for j in range(kw):
                    sl = dst[:, :, i * dh: i * dh + (ho - 1) * sh + 1: sh,
                             j * dw: j * dw + (wo - 1) * sw + 1: sw]
                    sl += gcols[:, :, i, j]
        gx = gxp[:, :, ph: ph + x.shape[2], pw: pw + x.shape[3]] if (ph or pw) else gxp
        gb = _bias_grad(g) if bias is not None else None
        return (gx, gw) + ((gb,) if bias is not None else ())

    return y, grad_fn


# ---------------------------------------------------------------------------
# normalization / activation / pooling / head ops


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize a (N, C, H, W) map across C at every spatial position."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ShapeError(f"layer_norm_channels expects 4D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    _check_same_dtype(x, gamma, beta)

    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = np.multiply(xc, inv, out=xc)  # xc not needed past this point
    y = xhat * gamma.data[None, :, None, None]
    y += beta.data[None, :, None, None]

    def grad_fn(g):
        gxh = g * gamma.data[None, :, None, None]
        m1 = gxh.mean(axis=1, keepdims=True)
        m2 = (gxh * xhat).mean(axis=1, keepdims=True)
        gx = inv * (gxh - m1 - xhat * m2)
        ggamma = np.einsum("nchw,nchw->c", g, xhat, optimize=True)
        gbeta = g.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return _from_op(y, (x, gamma, beta), grad_fn, "layer_norm_channels")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor, exact: bool = False) -> Tensor:
    """Elementwise GELU; tanh approximation by default, erf variant on request."""
    if exact:
        from scipy.special import erf

        inv_sqrt2 = 1.0 / math.sqrt(2.0)
        cdf = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
        y = (x.data * cdf).astype(x.dtype)

        def grad_fn(g):
            pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
            return ((cdf + x.data * pdf).astype(x.dtype) * g,)
    else:
        u = x.data * x.data
        u *= x.data
        u *= _GELU_A
        u += x.data
        u *= _GELU_C
        th = np.tanh(u, out=u)
        y = th + 1.0
        y *= x.data
        y *= 0.5
        y = y.astype(x.dtype, copy=False)

        def grad_fn(g):
            sech2 = 1.0 - th * th
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * (x.data * x.data))
            d = 0.5 * (1.0 + th) + 0.5 * x.data * sech2 * du
            return (d.astype(x.dtype) * g,)

    return _from_op(y, (x,), grad_fn, "gelu")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) mean over the spatial axes."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4D input, got {x.shape}")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype, copy=True),)

    return _from_op(y, (x,), grad_fn, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias) -> Tensor:
    """(N, Cin) @ (Cout, Cin)^T + bias."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.shape} vs weight {weight.shape}")
    tensors = [x, weight] + ([bias] if bias is not None else [])
    _check_same_dtype(*tensors)
    y = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        y = y + bias.data

    def grad_fn(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw) + ((gb,) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _from_op(y, parents, grad_fn, "linear")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain ndarray softmax over the last axis (numerically stable)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple:
    """Mean negative log-likelihood over a batch.

    Returns ``(loss, probs)`` where loss is a scalar tensor on the tape and
    probs is a plain (N, K) ndarray with rows summing to 1.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    loss_val = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def grad_fn(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        return ((g / n) * gl.astype(logits.dtype),)

    loss = _from_op(loss_val, (logits,), grad_fn, "softmax_cross_entropy")
    return loss, probs
