"""Reverse-mode automatic differentiation over dense numpy arrays.

Minimal op set sized for a recurrent encoder-decoder with a log-space
dynamic program on top: matmuls, a fused GRU cell, gathers with scatter-add
backward, and overflow-safe log-space reductions that treat IEEE -inf as
"masked out" (zero gradient flows through masked entries).

Graphs are built implicitly: each tensor records its parents and a backward
closure.  Creation order is a valid topological order because an op's output
is always created after its inputs, so ``backward`` just replays tensors in
descending creation order.  A graph is single-writer; independent forward
passes may run on independent threads (grad mode is thread-local).

Also home to the checkpoint container: format version 1, a JSON document
mapping parameter name -> shape + base64 row-major little-endian payload,
with the float precision recorded in the header.
"""

from __future__ import annotations

import base64
import itertools
import json
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = float("-inf")

_counter = itertools.count()


class _GradMode(threading.local):
    enabled = True


_mode = _GradMode()


@contextmanager
def no_grad():
    prev = _mode.enabled
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def grad_enabled() -> bool:
    return _mode.enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._order = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def grad_array(self) -> np.ndarray:
        """Accumulated gradient; zeros if this leaf was never touched."""
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad over the recorded graph.

    The graph is released as it is consumed; a second backward over the same
    forward pass needs a fresh forward.  Gradients accumulate across calls
    until zero_grad.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._order, reverse=True)
    _acc(loss, np.ones((), dtype=loss.dtype))
    for node in nodes:
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None
            node._parents = ()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), back)


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """a @ b with a of rank 1..3 and b of rank 2 (optionally transposed)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 rhs, got shape {b.shape}")
    bm = b.data.T if transpose_b else b.data
    squeeze = a.ndim == 1
    ad = a.data[None, :] if squeeze else a.data
    out = ad @ bm
    if squeeze:
        out = out[0]

    def back(g):
        g2 = g[None, :] if squeeze else g
        _acc(a, _unbroadcast(g2 @ bm.T, a.data.shape))
        gb = ad.reshape(-1, ad.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
        _acc(b, gb.T if transpose_b else gb)

    return _make(out, (a, b), back)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched [B,K,N] @ [B,N,C] -> [B,K,C]."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.einsum("bkn,bnc->bkc", a.data, b.data)

    def back(g):
        _acc(a, np.einsum("bkc,bnc->bkn", g, b.data))
        _acc(b, np.einsum("bkn,bkc->bnc", a.data, g))

    return _make(out, (a, b), back)


def bmm_t(a: Tensor, b: Tensor) -> Tensor:
    """Batched [B,K,C] @ [B,N,C]^T -> [B,K,N]."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.einsum("bkc,bnc->bkn", a.data, b.data)

    def back(g):
        _acc(a, np.einsum("bkn,bnc->bkc", g, b.data))
        _acc(b, np.einsum("bkn,bkc->bnc", g, a.data))

    return _make(out, (a, b), back)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def back(g):
        offset = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            _acc(p, g[tuple(sl)])
            offset += s

    return _make(out, tuple(parts), back)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def back(g):
        for i, p in enumerate(parts):
            _acc(p, np.take(g, i, axis=axis))

    return _make(out, tuple(parts), back)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    t = as_tensor(t)
    sl = [slice(None)] * t.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = t.data[sl]

    def back(g):
        gt = np.zeros_like(t.data)
        gt[sl] = g
        _acc(t, gt)

    return _make(out, (t,), back)


def reshape(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    out = t.data.reshape(shape)

    def back(g):
        _acc(t, g.reshape(t.data.shape))

    return _make(out, (t,), back)


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _acc(t, np.broadcast_to(g, t.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(t, np.broadcast_to(g, t.data.shape).copy())

    return _make(out, (t,), back)


def sigmoid(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out = 1.0 / (1.0 + np.exp(-t.data))

    def back(g):
        _acc(t, g * out * (1.0 - out))

    return _make(out, (t,), back)


def tanh(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out = np.tanh(t.data)

    def back(g):
        _acc(t, g * (1.0 - out * out))

    return _make(out, (t,), back)


def exp(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out = np.exp(t.data)

    def back(g):
        _acc(t, g * out)

    return _make(out, (t,), back)


def dropout(t: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; exact identity when rate == 0 or train is False."""
    if not train or rate == 0.0:
        return as_tensor(t)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    t = as_tensor(t)
    mask = (rng.random(t.data.shape) >= rate) / (1.0 - rate)
    mask = mask.astype(t.dtype)
    out = t.data * mask

    def back(g):
        _acc(t, g * mask)

    return _make(out, (t,), back)


def masked_fill(t: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Set entries where mask is True to `value` (typically -inf).

    Gradient through filled entries is exactly zero.
    """
    t = as_tensor(t)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=t.dtype), t.data)

    def back(g):
        _acc(t, np.where(mask, 0.0, g))

    return _make(out, (t,), back)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Elementwise select; gradient routes only to the selected branch."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def back(g):
        _acc(a, _unbroadcast(np.where(mask, g, 0.0), a.data.shape))
        _acc(b, _unbroadcast(np.where(mask, 0.0, g), b.data.shape))

    return _make(out, (a, b), back)


# ---------------------------------------------------------------------------
# Gathers


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _acc(table, gt)

    return _make(out, (table,), back)


def take_last(t: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis: out[..., k] = t[..., idx[..., k]]."""
    t = as_tensor(t)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != t.data.shape[:-1]:
        raise ValueError(f"take_last index shape {idx.shape} does not match {t.data.shape}")
    out = np.take_along_axis(t.data, idx, axis=-1)

    def back(g):
        gt = np.zeros_like(t.data)
        flat = gt.reshape(-1, gt.shape[-1])
        rows = np.repeat(np.arange(flat.shape[0]), idx.shape[-1])
        np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))
        _acc(t, gt)

    return _make(out, (t,), back)


def take_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 1: out[b, p, ...] = t[b, idx[b, p], ...]."""
    t = as_tensor(t)
    idx = np.asarray(idx, dtype=np.int64)
    bsz = t.data.shape[0]
    rows = np.arange(bsz)[:, None]
    out = t.data[rows, idx]

    def back(g):
        gt = np.zeros_like(t.data)
        np.add.at(gt, (rows, idx), g)
        _acc(t, gt)

    return _make(out, (t,), back)


# ---------------------------------------------------------------------------
# Log-space reductions


def logsumexp(t: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Overflow-safe log-sum-exp; an all -inf slice reduces to -inf with
    zero gradient everywhere in that slice."""
    t = as_tensor(t)
    m = np.max(t.data, axis=axis, keepdims=True)
    m_safe = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        out_k = m_safe + np.log(np.sum(np.exp(t.data - m_safe), axis=axis, keepdims=True))
    out_k = np.where(np.isneginf(m), NEG_INF, out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(t.data - out_k)
        w = np.where(np.isneginf(t.data), 0.0, w)
        _acc(t, gk * w)

    return _make(out, (t,), back)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.data, b.data)

    def back(g):
        with np.errstate(invalid="ignore"):
            wa = np.exp(a.data - out)
            wb = np.exp(b.data - out)
        wa = np.where(np.isneginf(a.data), 0.0, wa)
        wb = np.where(np.isneginf(b.data), 0.0, wb)
        _acc(a, _unbroadcast(g * wa, a.data.shape))
        _acc(b, _unbroadcast(g * wb, b.data.shape))

    return _make(out, (a, b), back)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Normalize log scores along `axis`.  Raises if a slice is entirely
    -inf: that means no action is available, which is a caller bug."""
    t = as_tensor(t)
    m = np.max(t.data, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ValueError("log_softmax over a fully masked slice (no valid action)")
    shifted = t.data - m
    lse = m + np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = t.data - lse

    def back(g):
        s = np.sum(g, axis=axis, keepdims=True)
        _acc(t, g - np.exp(out) * s)

    return _make(out, (t,), back)


def cumlogsumexp(t: Tensor) -> Tensor:
    """Cumulative log-sum-exp along the last axis.

    out[..., j] = log sum_{i <= j} exp(t[..., i]).  This is what makes the
    span normalizer linear per step: scores factor as start[i] + end[j], so
    summing exp over all pairs i <= j is an inner product of exp(end) with
    the running prefix sums of exp(start), all kept in log space.
    """
    t = as_tensor(t)
    out = np.logaddexp.accumulate(t.data, axis=-1)

    def back(g):
        # d out_s / d t_i = exp(t_i - out_s) for i <= s; both exponents
        # below are <= 0 so this is overflow-safe.
        x = t.data[..., :, None]
        y = out[..., None, :]
        n = t.data.shape[-1]
        tri = np.triu(np.ones((n, n), dtype=bool))
        with np.errstate(invalid="ignore"):
            w = np.exp(np.minimum(x - y, 0.0))
        w = np.where(tri & np.isfinite(x - y), w, 0.0)
        _acc(t, np.einsum("...is,...s->...i", w, g))

    return _make(out, (t,), back)


# ---------------------------------------------------------------------------
# Fused GRU cell


def gru_cell(
    x: Tensor,
    h: Tensor,
    w_z: Tensor,
    w_r: Tensor,
    w_n: Tensor,
    u_z: Tensor,
    u_r: Tensor,
    u_n: Tensor,
    b_z: Tensor,
    b_r: Tensor,
    b_n: Tensor,
) -> Tensor:
    """One GRU step on a [B, in] input and [B, hid] state.

    z = sigmoid(x Wz^T + h Uz^T + bz)
    r = sigmoid(x Wr^T + h Ur^T + br)
    n = tanh(x Wn^T + r * (h Un^T) + bn)
    h' = (1 - z) * n + z * h

    Fused into a single graph node; the analytic backward below is checked
    against both a composition of primitive ops and finite differences.
    """
    xs, hs = x.data, h.data
    zi = xs @ w_z.data.T + hs @ u_z.data.T + b_z.data
    ri = xs @ w_r.data.T + hs @ u_r.data.T + b_r.data
    z = 1.0 / (1.0 + np.exp(-zi))
    r = 1.0 / (1.0 + np.exp(-ri))
    hu = hs @ u_n.data.T
    ni = xs @ w_n.data.T + r * hu + b_n.data
    n = np.tanh(ni)
    out = (1.0 - z) * n + z * hs

    def back(g):
        gn = g * (1.0 - z) * (1.0 - n * n)
        gz = g * (hs - n) * z * (1.0 - z)
        gr = gn * hu * r * (1.0 - r)
        gh = g * z + gz @ u_z.data + gr @ u_r.data + (gn * r) @ u_n.data
        gx = gz @ w_z.data + gr @ w_r.data + gn @ w_n.data
        _acc(x, gx)
        _acc(h, gh)
        _acc(w_z, gz.T @ xs)
        _acc(w_r, gr.T @ xs)
        _acc(w_n, gn.T @ xs)
        _acc(u_z, gz.T @ hs)
        _acc(u_r, gr.T @ hs)
        _acc(u_n, (gn * r).T @ hs)
        _acc(b_z, gz.sum(axis=0))
        _acc(b_r, gr.sum(axis=0))
        _acc(b_n, gn.sum(axis=0))

    return _make(out, (x, h, w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n), back)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between backward gradients and central differences.

    relative error = |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
    maximized over every coordinate of every parameter.
    """
    zero_grad(params.values())
    loss = f()
    if not np.isfinite(loss.data):
        raise ValueError(f"grad_check: non-finite loss {loss.data}")
    backward(loss)
    analytic = {k: p.grad_array().copy() for k, p in params.items()}
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            ga = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2.0 * eps)
                err = abs(ga[i] - num) / max(1e-8, abs(ga[i]) + abs(num))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(
    path,
    params: dict[str, "Tensor | np.ndarray"],
    header_extra: dict | None = None,
) -> None:
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}
    dtypes = {a.dtype for a in arrays.values()}
    if len(dtypes) > 1:
        raise CheckpointError(f"mixed parameter dtypes {sorted(map(str, dtypes))}")
    dtype = dtypes.pop() if dtypes else np.dtype(np.float64)
    precision = "float32" if dtype == np.float32 else "float64"
    wire = "<f4" if precision == "float32" else "<f8"
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "precision": precision,
        "params": {
            name: {
                "shape": list(arr.shape),
                "data": base64.b64encode(arr.astype(wire).tobytes(order="C")).decode("ascii"),
            }
            for name, arr in arrays.items()
        },
    }
    if header_extra:
        for k, v in header_extra.items():
            if k in doc:
                raise CheckpointError(f"header key {k!r} is reserved")
            doc[k] = v
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (name -> array, header dict without the params)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: not valid JSON: {e.msg}") from e
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError(f"{path}: missing format_version")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {doc['format_version']!r}, expected {CHECKPOINT_VERSION}"
        )
    precision = doc.get("precision")
    if precision not in ("float32", "float64"):
        raise CheckpointError(f"{path}: unsupported precision {precision!r}")
    wire = "<f4" if precision == "float32" else "<f8"
    target = np.float32 if precision == "float32" else np.float64
    params: dict[str, np.ndarray] = {}
    for name, entry in doc.get("params", {}).items():
        shape = tuple(entry["shape"])
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype=wire)
        expect = int(np.prod(shape)) if shape else 1
        if arr.size != expect:
            raise CheckpointError(f"{path}: param {name!r} payload size {arr.size} != shape {shape}")
        params[name] = arr.reshape(shape).astype(target)
    header = {k: v for k, v in doc.items() if k != "params"}
    return params, header
