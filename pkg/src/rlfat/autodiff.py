"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: eager numpy forward passes, a DAG of
parent references, and per-node backward closures replayed in reverse
topological order.  Two element types are supported, float32 for training
speed and float64 for oracle-grade numerics.  Broadcasting is restricted to
scalar-tensor so every gradient rule stays auditable.

Convolution picks its accumulation strategy by dtype: float64 accumulates
one (u, v, c) kernel term at a time, so results are bitwise identical to a
plain nested loop; float32 uses an im2col matmul.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "apply_primitive",
    "backward",
    "trace",
    "conv2d",
    "max_pool2d",
    "cross_entropy",
    "kl_divergence",
    "squared_l2",
    "one_hot",
    "PRIMITIVES",
]

SUPPORTED_DTYPES = (np.float32, np.float64)


class AutodiffError(Exception):
    """Base error for the tensor engine."""


class ShapeError(AutodiffError):
    """Operand shapes (or dtypes) do not conform to the operation."""


class NonFiniteError(AutodiffError):
    """A primitive produced NaN or Inf from finite inputs."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt.type not in SUPPORTED_DTYPES:
        raise ShapeError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """N-dimensional array plus an optional gradient and graph linkage.

    ``data`` is always a numpy array of float32 or float64.  ``grad`` is
    populated by :func:`backward` and has the same shape and dtype as
    ``data``.  Non-leaf tensors keep references to their parents and a
    closure that scatters the incoming gradient back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype.type not in SUPPORTED_DTYPES:
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=_as_dtype(dtype))
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, op: str, backward_fn) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        if out.requires_grad:
            out.parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.parents = ()
            out._backward = None
        return out

    def detached(self) -> "Tensor":
        """Constant view sharing this tensor's data (no graph, no grad)."""
        return Tensor(self.data, requires_grad=False)

    # -- bookkeeping -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, op={self.op!r})"

    # -- elementwise arithmetic ------------------------------------------

    def _binary_operand(self, other, op: str):
        """Returns (tensor_or_none, scalar_or_none) for the second operand."""
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise ShapeError(f"{op}: shapes {self.shape} and {other.shape} differ")
            if other.dtype != self.dtype:
                raise ShapeError(f"{op}: dtypes {self.dtype} and {other.dtype} differ")
            return other, None
        if isinstance(other, (int, float, np.integer, np.floating)):
            return None, self.data.dtype.type(other)
        raise ShapeError(f"{op}: unsupported operand {type(other).__name__}")

    def __add__(self, other):
        t, s = self._binary_operand(other, "add")
        if t is not None:
            def back(g, a=self, b=t):
                if a.requires_grad:
                    a._accumulate(g)
                if b.requires_grad:
                    b._accumulate(g)
            return Tensor._from_op(self.data + t.data, (self, t), "add", back)

        def back(g, a=self):
            if a.requires_grad:
                a._accumulate(g)
        return Tensor._from_op(self.data + s, (self,), "add", back)

    __radd__ = __add__

    def __sub__(self, other):
        t, s = self._binary_operand(other, "subtract")
        if t is not None:
            def back(g, a=self, b=t):
                if a.requires_grad:
                    a._accumulate(g)
                if b.requires_grad:
                    b._accumulate(-g)
            return Tensor._from_op(self.data - t.data, (self, t), "subtract", back)

        def back(g, a=self):
            if a.requires_grad:
                a._accumulate(g)
        return Tensor._from_op(self.data - s, (self,), "subtract", back)

    def __neg__(self):
        def back(g, a=self):
            a._accumulate(-g)
        return Tensor._from_op(-self.data, (self,), "negate", back)

    def __mul__(self, other):
        t, s = self._binary_operand(other, "multiply")
        if t is not None:
            def back(g, a=self, b=t):
                if a.requires_grad:
                    a._accumulate(g * b.data)
                if b.requires_grad:
                    b._accumulate(g * a.data)
            return Tensor._from_op(self.data * t.data, (self, t), "multiply", back)

        def back(g, a=self, s=s):
            if a.requires_grad:
                a._accumulate(g * s)
        return Tensor._from_op(self.data * s, (self,), "scale", back)

    __rmul__ = __mul__

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float, np.integer, np.floating)):
            raise ShapeError("power: exponent must be a scalar")
        p = float(exponent)
        out_data = np.power(self.data, self.data.dtype.type(p))

        def back(g, a=self, p=p):
            a._accumulate(g * p * np.power(a.data, a.data.dtype.type(p - 1.0)))
        return Tensor._from_op(out_data, (self,), "power", back)

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            raise ShapeError("matmul: operand must be a Tensor")
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul: both operands must be 2-D")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul: inner dims {self.shape} @ {other.shape}")
        if other.dtype != self.dtype:
            raise ShapeError("matmul: dtype mismatch")

        def back(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        return Tensor._from_op(self.data @ other.data, (self, other), "matmul", back)

    # -- unary / shape primitives ----------------------------------------

    def relu(self):
        def back(g, a=self):
            a._accumulate(g * (a.data > 0))
        return Tensor._from_op(np.maximum(self.data, 0), (self,), "relu", back)

    def tanh(self):
        out_data = np.tanh(self.data)

        def back(g, a=self, out_data=out_data):
            a._accumulate(g * (1.0 - out_data * out_data))
        return Tensor._from_op(out_data, (self,), "tanh", back)

    def sign(self):
        # sign(0) = 0; derivative defined as 0 everywhere.
        def back(g, a=self):
            pass
        return Tensor._from_op(np.sign(self.data), (self,), "sign", back)

    def clamp(self, lo=None, hi=None):
        if lo is None and hi is None:
            raise ShapeError("clamp: need at least one bound")
        out_data = np.clip(self.data, lo, hi)
        inside = np.ones_like(self.data, dtype=bool)
        if lo is not None:
            inside &= self.data >= lo
        if hi is not None:
            inside &= self.data <= hi

        def back(g, a=self, inside=inside):
            a._accumulate(g * inside)
        return Tensor._from_op(out_data, (self,), "clamp", back)

    def reshape(self, shape):
        out_data = self.data.reshape(shape)
        orig = self.data.shape

        def back(g, a=self, orig=orig):
            a._accumulate(g.reshape(orig))
        return Tensor._from_op(out_data, (self,), "reshape", back)

    def sum(self, axis=None):
        out_data = np.asarray(self.data.sum(axis=axis))
        orig = self.data.shape

        def back(g, a=self, axis=axis, orig=orig):
            if axis is None:
                a._accumulate(np.broadcast_to(g, orig).copy())
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), orig).copy())
        return Tensor._from_op(out_data, (self,), "sum", back)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def amax(self, axis: int):
        """Max along one axis; gradient flows to the first argmax."""
        idx = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def back(g, a=self, axis=axis, idx=idx):
            gx = np.zeros_like(a.data)
            np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            a._accumulate(gx)
        return Tensor._from_op(out_data, (self,), "amax", back)

    def log_softmax(self, axis: int = -1):
        m = self.data.max(axis=axis, keepdims=True)
        shifted = self.data - m
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out_data = shifted - lse

        def back(g, a=self, out_data=out_data, axis=axis):
            soft = np.exp(out_data)
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))
        return Tensor._from_op(out_data, (self,), "log_softmax", back)

    def softmax(self, axis: int = -1):
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp(self.data - m)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def back(g, a=self, out_data=out_data, axis=axis):
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - inner))
        return Tensor._from_op(out_data, (self,), "softmax", back)

    def take_hw(self, row_map, col_map):
        """Reindex the last two axes by integer maps (both must be permutations)."""
        row_map = np.asarray(row_map, dtype=np.intp)
        col_map = np.asarray(col_map, dtype=np.intp)
        if row_map.shape != (self.shape[-2],) or col_map.shape != (self.shape[-1],):
            raise ShapeError("take_hw: index maps must match the last two extents")
        out_data = self.data[..., row_map[:, None], col_map[None, :]]
        inv_rows = np.argsort(row_map)
        inv_cols = np.argsort(col_map)

        def back(g, a=self, inv_rows=inv_rows, inv_cols=inv_cols):
            a._accumulate(g[..., inv_rows[:, None], inv_cols[None, :]])
        return Tensor._from_op(out_data, (self,), "take_hw", back)


# ---------------------------------------------------------------------------
# convolution / pooling

def _conv_shapes(x_shape, w_shape, stride, padding):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError("conv2d: x must be [B,C,H,W] and w [O,C,KH,KW]")
    b, c, h, w = x_shape
    o, c2, kh, kw = w_shape
    if c != c2:
        raise ShapeError(f"conv2d: channel mismatch {c} vs {c2}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1 or (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError("conv2d: kernel/stride/padding does not tile the input")
    return b, c, o, kh, kw, ho, wo


def _conv_forward_ordered(xp, w, stride, ho, wo):
    # One (u, v, c) term at a time, in that loop order, so the float
    # accumulation sequence is identical to a scalar nested loop.
    b = xp.shape[0]
    o, c, kh, kw = w.shape
    out = np.zeros((b, o, ho, wo), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
            for ci in range(c):
                out += xs[:, ci, None, :, :] * w[None, :, ci, u, v, None, None]
    return out


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over [B,C,H,W] with [O,C,KH,KW] kernels."""
    if not isinstance(x, Tensor) or not isinstance(weight, Tensor):
        raise ShapeError("conv2d: x and weight must be Tensors")
    if weight.dtype != x.dtype or (bias is not None and bias.dtype != x.dtype):
        raise ShapeError("conv2d: dtype mismatch")
    b, c, o, kh, kw, ho, wo = _conv_shapes(x.shape, weight.shape, stride, padding)
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    if x.dtype == np.float64:
        out_data = _conv_forward_ordered(xp, weight.data, stride, ho, wo)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        out_data = (cols @ weight.data.reshape(o, -1).T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
        out_data = np.ascontiguousarray(out_data)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g, x=x, weight=weight, bias=bias, xp=xp):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            cols_b = _im2col(xp, kh, kw, stride, ho, wo)
            gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
            weight._accumulate((gmat.T @ cols_b).reshape(weight.data.shape))
        if x.requires_grad:
            g2 = g.reshape(b, o, ho * wo)
            gx_pad = np.zeros(xp.shape, dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    # [B,O,Ho*Wo] x [O,C] -> [B,C,Ho,Wo] scattered at offset (u, v)
                    contrib = np.einsum("bop,oc->bcp", g2, weight.data[:, :, u, v]).reshape(b, c, ho, wo)
                    gx_pad[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += contrib
            if padding:
                gx_pad = gx_pad[:, :, padding:-padding, padding:-padding]
            x._accumulate(gx_pad)

    return Tensor._from_op(out_data, parents, "conv2d", back)


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial extents must divide the kernel."""
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d: expected [B,C,H,W]")
    b, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"max_pool2d: {h}x{w} not divisible by kernel {kernel}")
    ho, wo = h // kernel, w // kernel
    windows = x.data.reshape(b, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, ho, wo, kernel * kernel)
    idx = np.argmax(windows, axis=-1)
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def back(g, x=x, idx=idx):
        gw = np.zeros((b, c, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        x._accumulate(gx)

    return Tensor._from_op(out_data, (x,), "max_pool", back)


# ---------------------------------------------------------------------------
# losses

def one_hot(labels, classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("labels must be a 1-D index array")
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= classes):
        raise ShapeError(f"label out of range [0, {classes})")
    out = np.zeros((labels.shape[0], classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy: logits must be [batch, classes]")
    batch, classes = logits.shape
    oh = Tensor(one_hot(labels, classes, dtype=logits.dtype))
    return (logits.log_softmax(axis=-1) * oh).sum() * (-1.0 / batch)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over the batch of KL(softmax(p) || softmax(q))."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError("kl_divergence: shape mismatch")
    if p_logits.data.ndim != 2:
        raise ShapeError("kl_divergence: logits must be [batch, classes]")
    batch = p_logits.shape[0]
    p = p_logits.softmax(axis=-1)
    diff = p_logits.log_softmax(axis=-1) - q_logits.log_softmax(axis=-1)
    return (p * diff).sum() * (1.0 / batch)


def squared_l2(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences, averaged over batch rows (2-D and up)."""
    if a.shape != b.shape:
        raise ShapeError("squared_l2: shape mismatch")
    batch = a.shape[0] if a.data.ndim >= 2 else 1
    d = a - b
    return (d * d).sum() * (1.0 / batch)


# ---------------------------------------------------------------------------
# backward pass

def trace(root: Tensor) -> list[Tensor]:
    """Topologically ordered record of the graph below ``root``.

    Every tensor's parents appear before it; the root is last.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populates ``grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError("backward: loss must be a scalar")
    order = trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# generic primitive dispatch

def _prim_add(inputs, attrs):
    a, b = inputs
    return a + b


def _prim_subtract(inputs, attrs):
    a, b = inputs
    return a - b


def _prim_scale(inputs, attrs):
    (a,) = inputs
    return a * attrs["factor"]


def _prim_multiply(inputs, attrs):
    a, b = inputs
    return a * b


def _prim_matmul(inputs, attrs):
    a, b = inputs
    return a @ b


def _prim_conv2d(inputs, attrs):
    bias = inputs[2] if len(inputs) > 2 else None
    return conv2d(inputs[0], inputs[1], bias, stride=attrs.get("stride", 1), padding=attrs.get("padding", 0))


PRIMITIVES = {
    "add": _prim_add,
    "subtract": _prim_subtract,
    "scale": _prim_scale,
    "multiply": _prim_multiply,
    "matmul": _prim_matmul,
    "conv2d": _prim_conv2d,
    "relu": lambda inputs, attrs: inputs[0].relu(),
    "tanh": lambda inputs, attrs: inputs[0].tanh(),
    "sign": lambda inputs, attrs: inputs[0].sign(),
    "max_pool": lambda inputs, attrs: max_pool2d(inputs[0], kernel=attrs.get("kernel", 2)),
    "mean": lambda inputs, attrs: inputs[0].mean(axis=attrs.get("axis")),
    "sum": lambda inputs, attrs: inputs[0].sum(axis=attrs.get("axis")),
    "amax": lambda inputs, attrs: inputs[0].amax(axis=attrs["axis"]),
    "clamp": lambda inputs, attrs: inputs[0].clamp(attrs.get("lo"), attrs.get("hi")),
    "power": lambda inputs, attrs: inputs[0] ** attrs["exponent"],
    "log_softmax": lambda inputs, attrs: inputs[0].log_softmax(axis=attrs.get("axis", -1)),
    "softmax": lambda inputs, attrs: inputs[0].softmax(axis=attrs.get("axis", -1)),
    "reshape": lambda inputs, attrs: inputs[0].reshape(attrs["shape"]),
    "take_hw": lambda inputs, attrs: inputs[0].take_hw(attrs["row_map"], attrs["col_map"]),
}


def apply_primitive(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Applies a named primitive to ``inputs``; the result joins the graph."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ShapeError(f"unknown primitive {kind!r}") from None
    return fn(list(inputs), attrs or {})
