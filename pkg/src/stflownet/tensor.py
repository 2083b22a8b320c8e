"""Dense float64 tensors with tape-based reverse-mode differentiation.

Graph construction only happens while a :class:`Tape` is active; outside a
tape every op is a plain numpy computation.  That keeps inference cheap and
makes the set of recorded ops explicit.

Spike and quantization ops have two forward behaviours.  By default they are
the true discontinuous functions (Heaviside, floor) with a surrogate backward
pass.  Inside :func:`relaxed` their forward pass is replaced by the smooth
function whose exact derivative *is* that surrogate, which is what
finite-difference checks need.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "relaxed",
    "is_relaxed",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "sigmoid",
    "tanh_",
    "tanh",
    "sum_",
    "mean",
    "reshape",
    "concat",
    "conv2d",
    "bilinear_upsample",
    "upsample_matrix",
    "qcfs",
    "spike",
    "gather",
    "splat",
    "grad_check",
]

_TAPES: list["Tape"] = []
_RELAXED = False


class Tensor:
    """A real-valued array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(
            data, np.ndarray
        ) or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of the ops executed while it is active.

    Use as a context manager; :meth:`backward` replays the record in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()
        self.leaves: dict[int, Tensor] = {}
        # counters filled in by recurrent code (LIF state carried across steps)
        self.temporal_links = 0

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def _record(self, out: Tensor) -> None:
        self.nodes.append(out)
        self._ids.add(id(out))
        for p in out._parents:
            if p._backward is None and p.requires_grad:
                self.leaves.setdefault(id(p), p)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out._tape = tape
        tape._record(out)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf recorded by ``tape``.

    Leaves that the loss does not depend on receive a zero gradient.  Each
    call overwrites the previous gradients rather than accumulating.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise ValueError("loss was not produced under the given tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            target = leaf_grads if p._backward is None else grads
            key = id(p)
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg
    for key, leaf in tape.leaves.items():
        g = leaf_grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)


@contextlib.contextmanager
def relaxed(flag: bool = True):
    """Swap discontinuous forwards (spike, qcfs) for their smooth surrogates."""
    global _RELAXED
    prev = _RELAXED
    _RELAXED = flag
    try:
        yield
    finally:
        _RELAXED = prev


def is_relaxed() -> bool:
    return _RELAXED


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = ad**exponent
    return _make(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh_(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


tanh = tanh_


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(a.data[index], dtype=np.float64), (a,), bw)


def _is_fancy(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != ax
        ):
            raise ValueError(
                f"concat: shapes {ref} and {t.shape} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {cin} channels, "
            f"weight {weight.shape} expects {wcin}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {x.shape}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols).reshape(b, cout, ho, wo)
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(b, cout, ho * wo)
        gw = np.einsum("bop,bkp->ok", g2, cols).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2).reshape(b, cin, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    return _make(out, parents, bw)


def upsample_matrix(n: int, factor: int) -> np.ndarray:
    """Row-stochastic (n*factor, n) bilinear interpolation matrix, align-corners false."""
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_upsample(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be a positive int, got {factor}")
    if x.ndim != 4:
        raise ValueError(f"bilinear_upsample expects 4-D input, got {x.shape}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    ah = upsample_matrix(x.shape[2], factor)
    aw = upsample_matrix(x.shape[3], factor)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


# ---------------------------------------------------------------------------
# quantized / spiking nonlinearities
# ---------------------------------------------------------------------------


def qcfs(x, lam, levels: int, shift: float = 0.0) -> Tensor:
    """Quantization clip-floor activation ``lam * clip(floor(x*L/lam + shift)/L, 0, 1)``.

    Backward is straight-through: d/dx = 1 on [0, lam], d/dlam = 1 above lam.
    Under :func:`relaxed` the forward becomes ``clip(x, 0, lam)``, whose exact
    derivative is that straight-through rule.
    """
    x, lam = _as_tensor(x), _as_tensor(lam)
    if levels < 1:
        raise ValueError(f"QCFS level count must be >= 1, got {levels}")
    lv = lam.data
    if np.any(lv <= 0):
        raise ValueError("QCFS ceiling lambda must be positive")
    xd = x.data
    if _RELAXED:
        out = np.clip(xd, 0.0, lv)
    else:
        out = lv * np.clip(np.floor(xd * levels / lv + shift) / levels, 0.0, 1.0)
    inside = (xd >= 0.0) & (xd <= lv)
    above = xd > lv

    def bw(g):
        return (g * inside, _unbroadcast(g * above, lv.shape))

    return _make(out, (x, lam), bw)


def spike(x) -> Tensor:
    """Heaviside ``x >= 0`` with the arctan surrogate ``1/(1+pi^2 x^2)`` as derivative.

    Under :func:`relaxed` the forward is ``arctan(pi x)/pi + 1/2``.
    """
    x = _as_tensor(x)
    xd = x.data
    if _RELAXED:
        out = np.arctan(np.pi * xd) / np.pi + 0.5
    else:
        out = (xd >= 0.0).astype(np.float64)
    return _make(out, (x,), lambda g: (g / (1.0 + (np.pi * xd) ** 2),))


# ---------------------------------------------------------------------------
# event warping primitives
# ---------------------------------------------------------------------------


def gather(a, index: np.ndarray) -> Tensor:
    """Pick elements of the flattened ``a`` at integer ``index``."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape, n = a.shape, a.size
    out = a.data.reshape(-1)[index]
    return _make(
        out,
        (a,),
        lambda g: (np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=n).reshape(shape),),
    )


def _splat_corners(px: np.ndarray, py: np.ndarray, height: int, width: int):
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, dx, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cx, cy = x0 + dx, y0 + dy
        ok = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
        idx = np.where(ok, cy * width + cx, 0)
        corners.append((idx, ok, wgt))
    return corners, fx, fy


def splat(px, py, values, height: int, width: int) -> Tensor:
    """Bilinearly splat ``values`` at sub-pixel positions into an (H, W) image.

    Mass falling outside the frame is dropped.  Differentiable with respect to
    positions and values.
    """
    px, py, values = _as_tensor(px), _as_tensor(py), _as_tensor(values)
    pxd, pyd = px.data.reshape(-1), py.data.reshape(-1)
    vd = np.broadcast_to(values.data, pxd.shape).reshape(-1)
    n = height * width
    corners, fx, fy = _splat_corners(pxd, pyd, height, width)
    img = np.zeros(n)
    for idx, ok, wgt in corners:
        img += np.bincount(idx, weights=np.where(ok, wgt * vd, 0.0), minlength=n)

    def bw(g):
        gf = g.reshape(-1)
        gc = [np.where(ok, gf[idx], 0.0) for idx, ok, _ in corners]
        g00, g01, g10, g11 = gc
        gx = vd * ((g01 - g00) * (1 - fy) + (g11 - g10) * fy)
        gy = vd * ((g10 - g00) * (1 - fx) + (g11 - g01) * fx)
        gv = g00 * corners[0][2] + g01 * corners[1][2] + g10 * corners[2][2] + g11 * corners[3][2]
        return gx.reshape(px.shape), gy.reshape(py.shape), _unbroadcast(gv, values.shape)

    return _make(img.reshape(height, width), (px, py, values), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over input elements.

    ``fn``'s output is scalarized by summation.  With ``max_elements`` only a
    seeded random subset of each input's elements is perturbed.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
    with Tape() as tape:
        out = sum_(fn(*inputs))
    backward(out, tape)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def value() -> float:
        return float(np.sum(fn(*inputs).data))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idxs = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = value()
            flat[i] = orig - epsilon
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            err = abs(ga.reshape(-1)[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(math.sqrt(sum(float(np.sum(p.grad**2)) for p in params if p.grad is not None)))
