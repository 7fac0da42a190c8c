"""Dense tensors with reverse-mode differentiation.

Only the layer set needed by the part-stacked network is provided:
convolution, max/average pooling, rectifier, affine maps, reshapes and the
two softmax losses. Every op is executed eagerly; calling ``backward`` on a
scalar output walks the recorded graph in reverse topological order.

Arrays keep the dtype they were created with, so a model cast to float64
can be pushed through the same ops for finite-difference checks.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, EvaluationError, NonFiniteError, ParameterError

__all__ = [
    "Tensor",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "adaptive_avgpool2d",
    "relu",
    "affine",
    "add",
    "scale",
    "reshape",
    "tensor_sum",
    "softmax_cross_entropy",
    "grad_check",
]


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    Args:
        data: array-like values. Non-float input is converted to float32.
        requires_grad: whether gradients should be accumulated into ``grad``.
        dtype: optional explicit dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # arithmetic sugar used by losses and tests
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, k):
        return scale(self, k)

    __rmul__ = __mul__

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match {self.data.shape}")
        _check_finite(g, f"backward into {self.op}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Back-propagate from this tensor.

        ``grad`` defaults to ones, which is only meaningful for scalars.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

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
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _result(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _out_side(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _windows(x, kh, kw, stride):
    """Strided view of all kh×kw windows: (N, C, Ho, Wo, kh, kw)."""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(dwin, shape, kh, kw, stride, dtype):
    """Adjoint of ``_windows``: sum window gradients back onto the grid."""
    out = np.zeros(shape, dtype=dtype)
    ho, wo = dwin.shape[2], dwin.shape[3]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[..., i, j]
    return out


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D cross-correlation over a batch.

    Args:
        x: Tensor[N, C, H, W].
        weight: Tensor[K, C, kh, kw].
        bias: Tensor[K] or None.
        stride: step between output units, ≥ 1.
        pad: zero padding added on every side.

    Returns:
        Tensor[N, K, H', W'] with H' = (H + 2·pad − kh) // stride + 1.
    """
    x, weight = _tensor(x), _tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d channel mismatch: input axis 1 is {c}, weight axis 1 is {wc}")
    if stride < 1 or pad < 0:
        raise ParameterError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad} (axes 2, 3)"
        )
    if bias is not None:
        bias = _tensor(bias)
        if bias.shape != (k,):
            raise DimensionError(f"conv2d bias must have shape ({k},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho, wo = _out_side(h, kh, stride, pad), _out_side(w, kw, stride, pad)
    win = _windows(xp, kh, kw, stride)
    # im2col: rows are output positions, columns are (C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        grads = []
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = _scatter_windows(dcols, xp.shape, kh, kw, stride, x.dtype)
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            grads.append((x, np.ascontiguousarray(dx)))
        if weight.requires_grad:
            grads.append((weight, (g2.T @ cols).reshape(weight.shape)))
        if bias is not None and bias.requires_grad:
            grads.append((bias, g2.sum(axis=0)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def maxpool2d(x, k, stride=None):
    """Max pooling; the backward pass routes to the first maximum in each window."""
    x = _tensor(x)
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ParameterError(f"maxpool2d needs k >= 1 and stride >= 1, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"maxpool2d window {k} exceeds spatial extents {h}x{w}")
    win = _windows(x.data, k, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((n, c, ho, wo, k * k), dtype=x.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = _scatter_windows(dwin.reshape(n, c, ho, wo, k, k), x.shape, k, k, stride, x.dtype)
        return [(x, dx)]

    return _result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def avgpool2d(x, k, stride=None):
    x = _tensor(x)
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ParameterError(f"avgpool2d needs k >= 1 and stride >= 1, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"avgpool2d window {k} exceeds spatial extents {h}x{w}")
    win = _windows(x.data, k, k, stride)
    out = win.mean(axis=(-2, -1))
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        share = (g / (k * k)).astype(x.dtype)
        dwin = np.broadcast_to(share[..., None, None], (n, c, ho, wo, k, k))
        return [(x, _scatter_windows(dwin, x.shape, k, k, stride, x.dtype))]

    return _result(np.ascontiguousarray(out), (x,), backward, "avgpool2d")


def _adaptive_bins(n, out):
    return [(i * n // out, -(-(i + 1) * n // out)) for i in range(out)]


def adaptive_avgpool2d(x, out_side):
    """Average pooling onto a fixed ``out_side``×``out_side`` grid.

    Bin i spans [floor(i·n/o), ceil((i+1)·n/o)), so bins may overlap when the
    input side is not a multiple of the output side. An output larger than the
    input is allowed; every bin still covers at least one input cell.
    """
    x = _tensor(x)
    n, c, h, w = x.shape
    if out_side < 1:
        raise DimensionError(f"cannot adaptively pool {h}x{w} onto {out_side}x{out_side}")
    rows, cols = _adaptive_bins(h, out_side), _adaptive_bins(w, out_side)
    out = np.empty((n, c, out_side, out_side), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        dx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                dx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
        return [(x, dx)]

    return _result(out, (x,), backward, "adaptive_avgpool2d")


# ---------------------------------------------------------------------------
# pointwise and dense ops
# ---------------------------------------------------------------------------


def relu(x):
    x = _tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _result(out, (x,), lambda g: [(x, g * mask)], "relu")


def affine(x, weight, bias=None):
    """x @ weight + bias for x: [N, D], weight: [D, E], bias: [E]."""
    x, weight = _tensor(x), _tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine inner dimension mismatch: {x.shape} @ {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        bias = _tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"affine bias must have shape ({weight.shape[1]},), got {bias.shape}")
        out = out + bias.data

    def backward(g):
        grads = [(x, g @ weight.data.T), (weight, x.data.T @ g)]
        if bias is not None:
            grads.append((bias, g.sum(axis=0)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "affine")


def add(a, b):
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: [(a, g), (b, g)], "add")


def scale(x, k):
    x = _tensor(x)
    k = float(k)
    return _result(x.data * x.dtype.type(k), (x,), lambda g: [(x, g * x.dtype.type(k))], "scale")


def reshape(x, shape):
    x = _tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (x,), lambda g: [(x, g.reshape(src))], "reshape")


def tensor_sum(x):
    x = _tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(out, (x,), lambda g: [(x, np.full(x.shape, g, dtype=x.dtype))], "sum")


def log_softmax(z, axis):
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    Args:
        logits: Tensor[N, C].
        labels: int array of length N.
    """
    logits = _tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n = logits.shape[0]
    logp = log_softmax(logits.data, axis=1)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return [(logits, (d * (g / n)).astype(logits.dtype))]

    return _result(out, (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(f, x, eps=1e-3, indices=None):
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. The check
    runs in float64. ``indices`` optionally restricts the coordinates probed
    (flat indices); by default every coordinate is checked.

    Returns:
        max over probed coordinates of
        |analytic − numeric| / max(1, |analytic|, |numeric|).
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ParameterError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    base = np.array(_tensor(x).data, dtype=np.float64)

    def evaluate(t):
        try:
            y = f(t)
        except NonFiniteError as exc:
            raise EvaluationError(str(exc)) from exc
        val = np.asarray(_tensor(y).data, dtype=np.float64)
        if val.size != 1:
            raise DimensionError("grad_check needs a scalar-valued function")
        if not np.isfinite(val).all():
            raise EvaluationError("function value is not finite")
        return y, float(val)

    leaf = Tensor(base.copy(), requires_grad=True)
    y, _ = evaluate(leaf)
    analytic = np.zeros_like(base)
    if isinstance(y, Tensor) and y.requires_grad:
        y.backward()
        if leaf.grad is not None:
            analytic = leaf.grad.astype(np.float64)

    flat = base.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in probe:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        _, fp = evaluate(Tensor(plus.reshape(base.shape)))
        _, fm = evaluate(Tensor(minus.reshape(base.shape)))
        numeric = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
