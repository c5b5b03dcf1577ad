"""Reverse-mode automatic differentiation on numpy arrays.

A `Tensor` wraps a float64 ndarray. Ops build a dynamic graph; calling
`backward()` on a scalar walks it in reverse topological order and
accumulates gradients into every tensor whose `requires_grad` flag is
set. Gradients add up across backward calls until `sgd_step` (or
`zero_grads`) clears them.

Everything runs in double precision. Checkpoint files store float32,
which is exact to reload and re-save (see `save_checkpoint`).
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DataError, NumericError, ShapeError, StateError

CHECKPOINT_MAGIC = b"DWCKPT1\0"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf. Scalar only."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._parents != ()


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(_tracked(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape) if _tracked(a) else None,
        _unbroadcast(g, b.data.shape) if _tracked(b) else None,
    ))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape) if _tracked(a) else None,
        _unbroadcast(-g, b.data.shape) if _tracked(b) else None,
    ))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    return _make(data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape) if _tracked(a) else None,
        _unbroadcast(g * a.data, b.data.shape) if _tracked(b) else None,
    ))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    return _make(data, (a, b), lambda g: (
        g @ b.data.T if _tracked(a) else None,
        a.data.T @ g if _tracked(b) else None,
    ))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return [pc if _tracked(p) else None for p, pc in zip(parts, pieces)]

    return _make(data, tuple(parts), bwd)


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) slicing with gradient scatter-back."""
    a = _as_tensor(a)
    data = a.data[key]

    def bwd(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _make(data.copy(), (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,))


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(data, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.data.shape}/{bias.data.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if _tracked(gain) else None
        gbias = g.sum(axis=lead) if _tracked(bias) else None
        if _tracked(a):
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        else:
            gx = None
        return (gx, ggain, gbias)

    return _make(data, (a, gain, bias), bwd)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of `table` at integer `ids`; scatter-adds on backward."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DataError(
            f"embedding_lookup: index out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()} max={ids.max()}"
        )
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data.copy(), (table,), bwd)


def mean_squared_error(a, b) -> Tensor:
    """Scalar mean of squared elementwise differences."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mean_squared_error: shapes {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.asarray((diff * diff).sum() / n)

    def bwd(g):
        base = (2.0 / n) * diff * g
        return (
            base if _tracked(a) else None,
            -base if _tracked(b) else None,
        )

    return _make(data, (a, b), bwd)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood of `targets` under row softmax.

    logits: (N, V); targets: (N,) int ids; weights: (N,) nonnegative,
    defaults to all ones. Result = sum_i w_i * nll_i / sum_i w_i.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.data.shape} vs targets {targets.shape}"
        )
    n, v = logits.data.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise DataError(f"cross_entropy: target id out of range [0, {v})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise DataError("cross_entropy: weights sum to zero")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(z)).ravel()
    nll = lse - logits.data[np.arange(n), targets]
    data = np.asarray((w * nll).sum() / wsum)

    def bwd(g):
        p = e / z
        p[np.arange(n), targets] -= 1.0
        return (g * p * (w / wsum)[:, None],)

    return _make(data, (logits,), bwd)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis)
    shp = a.data.shape
    cnt = a.data.size if axis is None else shp[axis]

    def bwd(g):
        if axis is None:
            return (np.full(shp, float(g) / cnt),)
        return (np.broadcast_to(np.expand_dims(g, axis) / cnt, shp).copy(),)

    return _make(data, (a,), bwd)


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis)
    shp = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.full(shp, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shp).copy(),)

    return _make(data, (a,), bwd)


def stop_gradient(a) -> Tensor:
    """Forward identity, backward zero."""
    a = _as_tensor(a)
    return Tensor(a.data)


def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-D convolution.

    x: (C_in, L); w: (C_out, C_in, K); b: (C_out,) optional.
    Output: (C_out, floor((L - K) / stride) + 1).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 3 or x.data.shape[0] != w.data.shape[1]:
        raise ShapeError(f"conv1d: x {x.data.shape} vs w {w.data.shape}")
    c_in, length = x.data.shape
    c_out, _, k = w.data.shape
    if length < k:
        raise ShapeError(f"conv1d: input length {length} shorter than kernel {k}")
    l_out = (length - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)[:, ::stride, :]
    cols = windows.transpose(1, 0, 2).reshape(l_out, c_in * k)
    wmat = w.data.reshape(c_out, c_in * k)
    out = cols @ wmat.T
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {b.data.shape}, expected ({c_out},)")
        out = out + b.data
        parents.append(b)
    data = out.T.copy()

    def bwd(g):
        gt = g.T  # (l_out, c_out)
        gw = (gt.T @ cols).reshape(w.data.shape) if _tracked(w) else None
        gx = None
        if _tracked(x):
            dcols = (gt @ wmat).reshape(l_out, c_in, k).transpose(1, 0, 2)
            gx = np.zeros_like(x.data)
            top = (l_out - 1) * stride + 1
            for j in range(k):
                gx[:, j:j + top:stride] += dcols[:, :, j]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=1) if _tracked(b) else None)
        return grads

    return _make(data, tuple(parents), bwd)


def transpose_conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution (fractionally strided upsampling).

    x: (C_in, L); w: (C_in, C_out, K); output: (C_out, (L - 1) * stride + K).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 3 or x.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"transpose_conv1d: x {x.data.shape} vs w {w.data.shape}")
    c_in, length = x.data.shape
    _, c_out, k = w.data.shape
    l_out = (length - 1) * stride + k
    contrib = np.tensordot(x.data, w.data, axes=([0], [0]))  # (L, c_out, K)
    out = np.zeros((c_out, l_out))
    top = (length - 1) * stride + 1
    for j in range(k):
        out[:, j:j + top:stride] += contrib[:, :, j].T
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (c_out,):
            raise ShapeError(f"transpose_conv1d: bias shape {b.data.shape}, expected ({c_out},)")
        out = out + b.data[:, None]
        parents.append(b)

    def bwd(g):
        dcontrib = np.empty((length, c_out, k))
        for j in range(k):
            dcontrib[:, :, j] = g[:, j:j + top:stride].T
        gx = np.tensordot(dcontrib, w.data, axes=([1, 2], [1, 2])).T if _tracked(x) else None
        gw = np.tensordot(x.data, dcontrib, axes=([1], [0])) if _tracked(w) else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=1) if _tracked(b) else None)
        return grads

    return _make(out, tuple(parents), bwd)


# ---------------------------------------------------------------------------
# parameters, SGD, gradient checking
# ---------------------------------------------------------------------------


class ParamSet:
    """Named trainable tensors with stable (insertion) iteration order."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._tensors:
            raise StateError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._tensors[name] = t
        return t

    def adopt(self, name: str, tensor: Tensor) -> Tensor:
        """Register an existing tensor (shared, not copied)."""
        return self.add(name, tensor)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def subset(self, prefixes: Sequence[str]) -> "ParamSet":
        """New ParamSet sharing the tensors whose name starts with any prefix."""
        out = ParamSet()
        for name, t in self._tensors.items():
            if any(name == p or name.startswith(p + ".") for p in prefixes):
                out._tensors[name] = t
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._tensors.items():
            if name not in state:
                raise StateError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise StateError(
                    f"checkpoint parameter {name!r} has shape {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.copy()
            t.grad = None


def sgd_step(params: ParamSet, lr: float) -> None:
    """p <- p - lr * grad for every parameter, then clear gradients."""
    for name, t in params.items():
        if t.grad is None:
            raise StateError(f"sgd_step: parameter {name!r} has no gradient")
    for t in params.tensors():
        t.data = t.data - lr * t.grad
        t.grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: ParamSet,
    eps: float = 1e-5,
    sample: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central finite-difference grads.

    `f` rebuilds the forward pass from the current parameter values each
    call. At least `sample` coordinates are checked, drawn uniformly
    across all parameters (all coordinates if there are fewer). Relative
    error uses a 1e-6 floor so near-zero gradient pairs compare at
    absolute scale.
    """
    params.zero_grads()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite objective")
    out.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in params.items()}
    params.zero_grads()

    coords: list[tuple[str, tuple[int, ...]]] = []
    for name, t in params.items():
        for idx in np.ndindex(*t.data.shape or (1,)):
            coords.append((name, idx if t.data.shape else ()))
    rng = np.random.default_rng(seed)
    if len(coords) > sample:
        chosen = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[i] for i in sorted(chosen)]

    worst = 0.0
    for name, idx in coords:
        t = params[name]
        orig = t.data[idx] if idx else float(t.data)
        t.data[idx] = orig + eps
        f_plus = float(f().data)
        t.data[idx] = orig - eps
        f_minus = float(f().data)
        t.data[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("grad_check: non-finite objective during perturbation")
        fd = (f_plus - f_minus) / (2.0 * eps)
        an = analytic[name][idx] if idx else float(analytic[name])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays as float32 little-endian records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as float32 arrays (caller upcasts as needed)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    off = 8

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"{path}: truncated checkpoint")
        piece = blob[off:off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_items = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(dims)
        out[name] = data.copy()
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after checkpoint payload")
    return out
