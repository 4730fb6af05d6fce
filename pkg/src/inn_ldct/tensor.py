"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations the denoiser needs are provided. Binary ops never
broadcast; shapes must match exactly. Every op output is checked for
finiteness so a NaN/Inf raises at the op that produced it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPES = (np.float32, np.float64)
_grad_enabled = True
_kink_log: list | None = None  # leaky_relu sign patterns, while a finite-difference probe runs


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d array with an optional gradient slot.

    Leaves are created directly; non-leaves carry their parents and a
    closure that maps the output gradient to one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# --- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp_bound(dtype) -> float:
    """Largest input for which exp stays finite in ``dtype`` (with a small margin)."""
    return float(np.log(np.finfo(dtype).max)) - 1.0


def exp(a: Tensor) -> Tensor:
    bound = exp_bound(a.dtype)
    top = a.data.max(initial=-np.inf)
    if top > bound:
        raise NonFiniteError(f"exp: input {top:.4g} exceeds safe bound {bound:.4g} for {a.dtype}")
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    alpha = a.dtype.type(alpha)
    pos = a.data > 0
    if _kink_log is not None:
        _kink_log.append(np.packbits(pos).tobytes())
    slope = np.where(pos, a.dtype.type(1.0), alpha)
    return _result(a.data * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = a.shape
    return _result(
        np.asarray(a.data.sum(dtype=a.dtype)), (a,),
        lambda g: (np.full(shape, g, dtype=a.dtype),), "sum",
    )


# --- channel plumbing --------------------------------------------------------

def channel_split(x: Tensor) -> tuple[Tensor, Tensor]:
    if x.data.ndim != 4:
        raise ShapeError(f"channel_split: expected [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"channel_split: channel count C={c} must be even")
    h = c // 2
    return channel_slice(x, 0, h), channel_slice(x, h, c)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[:, start:stop]), (x,), fn, "channel_slice")


def channel_concat(*parts: Tensor) -> Tensor:
    if len(parts) == 1 and isinstance(parts[0], (list, tuple)):
        parts = tuple(parts[0])
    ref = parts[0]
    for p in parts[1:]:
        if p.data.ndim != 4 or p.shape[0] != ref.shape[0] or p.shape[2:] != ref.shape[2:]:
            raise ShapeError(f"channel_concat: incompatible shapes {ref.shape} and {p.shape}")
        if p.dtype != ref.dtype:
            raise ShapeError(f"channel_concat: dtype mismatch {ref.dtype} vs {p.dtype}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, fn, "channel_concat")


# --- pixel (un)shuffle -------------------------------------------------------
# Layout: unshuffled channel index = c * r**2 + dy * r + dx.

def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    a = a.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a.reshape(n, c * r * r, h // r, w // r))


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    a = a.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a.reshape(n, c // (r * r), h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"pixel_unshuffle: expected [N,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: H={h}, W={w} not divisible by r={r}; pad the input")
    return _result(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),), "pixel_unshuffle")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"pixel_shuffle: expected [N,C,H,W], got {x.shape}")
    if x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: C={x.shape[1]} not divisible by r**2={r * r}")
    return _result(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),), "pixel_shuffle")


# --- convolution -------------------------------------------------------------
# The input is laid out channels-last on the zero-padded grid and flattened
# to rows. Tap (i, j) of the kernel is then a constant row offset
# i * Wp + j, so each tap is one GEMM on a contiguous slice (no im2col copy).
# Rows that straddle an image border land on padded-grid positions that are
# cropped away (forward) or carry a zero gradient (backward).

def _to_rows(a: np.ndarray, p: int, tail: int, head: int = 0) -> np.ndarray:
    n, c, h, w = a.shape
    hp, wp = h + 2 * p, w + 2 * p
    rows = np.zeros((head + n * hp * wp + tail, c), dtype=a.dtype)
    grid = rows[head:head + n * hp * wp].reshape(n, hp, wp, c)
    grid[:, p:p + h, p:p + w, :] = a.transpose(0, 2, 3, 1)
    return rows


def _taps(w: np.ndarray) -> np.ndarray:
    """[Cout,Cin,k,k] -> [k*k, Cin, Cout], contiguous per tap."""
    cout, cin, k, _ = w.shape
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k, cin, cout)


def _shift_gemm(rows: np.ndarray, taps: np.ndarray, offsets, length: int) -> np.ndarray:
    out = np.zeros((length, taps.shape[2]), dtype=rows.dtype)
    tmp = np.empty_like(out)
    for t, off in enumerate(offsets):
        np.matmul(rows[off:off + length], taps[t], out=tmp)
        out += tmp
    return out


def _im2col_gemm(a: np.ndarray, w: np.ndarray, p: int) -> np.ndarray:
    """Valid-output im2col, one GEMM; [N,Cout,Ho,Wo]. Cheaper than shifting when padding dominates the grid."""
    n, cin, h, wd = a.shape
    cout, _, k, _ = w.shape
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    grid = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=a.dtype)
    grid[:, p:p + h, p:p + wd] = a.transpose(0, 2, 3, 1)
    # [N,Ho,Wo,Cin,k,k] window view -> rows ordered (i, j, cin) like the taps
    cols = np.ascontiguousarray(sliding_window_view(grid, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3))
    out = cols.reshape(n * ho * wo, k * k * cin) @ _taps(w).reshape(k * k * cin, cout)
    return out.reshape(n, ho, wo, cout)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Stride-1 cross-correlation with zero padding."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,Cin,H,W], got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be [Cout,Cin,k,k], got {weight.shape}")
    cout, cin, k, _ = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size k={k} must be odd")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels Cin={x.shape[1]} but weight expects Cin={cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    if not 0 <= padding <= k - 1:
        raise ShapeError(f"conv2d: padding {padding} outside [0, {k - 1}]")
    n, _, h, w = x.shape
    p = padding
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = hp - k + 1, wp - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: spatial dims {x.shape[2:]} too small for kernel {k}")
    if x.dtype != weight.dtype or x.dtype != bias.dtype:
        raise ShapeError("conv2d: dtype mismatch between input, weight and bias")

    xd, wd = x.data, weight.data
    length = n * hp * wp
    span = (k - 1) * wp + (k - 1)
    offsets = [i * wp + j for i in range(k) for j in range(k)]

    if hp * wp > 1.5 * ho * wo:
        valid = _im2col_gemm(xd, wd, p)
    else:
        valid = _shift_gemm(_to_rows(xd, p, span), _taps(wd), offsets, length).reshape(n, hp, wp, cout)[:, :ho, :wo]
    valid += bias.data
    out = np.ascontiguousarray(valid.transpose(0, 3, 1, 2))

    def fn(g):
        # gradient on the padded grid, zero outside the valid output window
        gpad = np.zeros((span + length, cout), dtype=g.dtype)
        gpad[span:].reshape(n, hp, wp, cout)[:, :ho, :wo] = g.transpose(0, 2, 3, 1)
        gvalid = gpad[span:]
        rows = _to_rows(xd, p, span)
        gw = np.empty((k * k, cin, cout), dtype=g.dtype)
        for t, off in enumerate(offsets):
            np.matmul(rows[off:off + length].T, gvalid, out=gw[t])
        gw = gw.reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        gb = gvalid.sum(axis=0)
        # x-grad at row q collects g[q - off] @ W_t^T
        wt = np.ascontiguousarray(wd.transpose(2, 3, 0, 1)).reshape(k * k, cout, cin)
        back = [span - off for off in offsets]
        if cout <= 32:
            # narrow taps: one GEMM over stacked shifts beats k*k thin ones
            stacked = np.empty((length, k * k, cout), dtype=g.dtype)
            for t, off in enumerate(back):
                stacked[:, t] = gpad[off:off + length]
            gx_rows = stacked.reshape(length, -1) @ wt.reshape(-1, cin)
        else:
            gx_rows = _shift_gemm(gpad, wt, back, length)
        gx = gx_rows.reshape(n, hp, wp, cin)[:, p:p + h, p:p + w].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb

    return _result(out, (x, weight, bias), fn, "conv2d")


# --- backward ----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and release the graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg).reshape(parent.shape)
        node._parents = ()
        node._backward = None


# --- finite-difference checking ----------------------------------------------

def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def _worst(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest relative error over entries the difference quotient could resolve."""
    ok = np.isfinite(numeric)
    if not ok.any():
        return float("nan")
    return float(_rel_err(analytic[ok], numeric[ok]).max(initial=0.0))


def _probe(f: Callable[[], Tensor]) -> tuple[float, list]:
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        value = f().item()
        return value, _kink_log
    finally:
        _kink_log = prev


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float, coords=None, retries: int = 3) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. entries of ``x`` (mutated in place, restored).

    If any leaky-ReLU input changes sign between ``x - h`` and ``x + h`` the
    difference straddles a kink; ``h`` shrinks tenfold and the entry is
    retried. Entries still straddling after ``retries`` shrinks are NaN.
    """
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx))
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            h = eps
            out[j] = np.nan
            for _ in range(retries + 1):
                flat[i] = orig + h
                up = flat[i]
                hi, kinks_hi = _probe(f)
                flat[i] = orig - h
                down = flat[i]
                lo, kinks_lo = _probe(f)
                flat[i] = orig
                if kinks_hi == kinks_lo:
                    # divide by the step actually taken, not the nominal one
                    out[j] = (hi - lo) / (up - down)
                    break
                h /= 10.0
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, coords=None) -> float:
    """Worst relative error between backward() and central differences.

    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad.reshape(-1)
    if coords is not None:
        analytic = analytic[np.asarray(coords)]
    numeric = numeric_grad(lambda: f(leaf), leaf, eps, coords)
    return _worst(analytic, numeric)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-6,
    per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    skipped: dict[str, int] | None = None,
) -> dict[str, float]:
    """Check d(loss)/d(param) for every named parameter.

    With ``per_tensor`` set, that many flat entries are drawn per tensor
    (all entries when the tensor is smaller). Returns the worst relative
    error per parameter name. Entries left unresolved by kinks are counted
    into ``skipped`` when a dict is given.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    report = {}
    for name, p in params.items():
        n = p.data.size
        if per_tensor is None or per_tensor >= n:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=per_tensor, replace=False))
        analytic = p.grad.reshape(-1)[coords]
        numeric = numeric_grad(loss_fn, p, eps, coords)
        report[name] = _worst(analytic, numeric)
        if skipped is not None:
            skipped[name] = int(np.isnan(numeric).sum())
    return report
