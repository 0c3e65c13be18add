"""Small dense-tensor library with reverse-mode differentiation.

Every array in the translation models lives in a :class:`Tensor`.  Operations
record a backward closure when any input requires a gradient, and
:func:`backward` walks the recorded graph in reverse topological order.

The primitive set is deliberately closed: add/sub/mul (broadcasting), matmul,
linear, tanh, sigmoid, softmax, fused softmax cross-entropy, concat/stack,
sum/mean, slicing, reshape, embedding lookup and layer normalization.
"""
from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class NonFiniteError(FloatingPointError, ValueError):
    """A NaN or infinity reached an operation that cannot accept it."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; streams are identical across platforms."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(int(seed)))


class Tensor:
    grad = None
    requires_grad = False
    name = None
    _parents = None
    _backward = None

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind not in "fiub":
            raise TypeError(f"unsupported dtype {self.data.dtype}")
        if requires_grad:
            self.requires_grad = True
        if name is not None:
            self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


_new = object.__new__


def _result(data, parents, grad_fn) -> Tensor:
    out = _new(Tensor)
    out.data = data
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = grad_fn
                break
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const_like(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _const_like(b, a)
    else:
        b = as_tensor(b)
        a = _const_like(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const_like(b, a)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), grad_fn)


def _tanh_grad(y):
    return 1.0 - y * y


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    # the derivative helper is looked up at call time so tests can corrupt it
    return _result(y, (x,), lambda g: (g * _tanh_grad(y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy broadcasting; ``b`` may be a vector."""
    a = as_tensor(a)
    b = _const_like(b, a)
    ad, bd = a.data, b.data
    out = ad @ bd

    if bd.ndim == 1:
        def grad_fn(g):
            ga = g[..., None] * bd
            gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(ad.ndim - 1))))
            return ga, gb
    else:
        def grad_fn(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), grad_fn)


def linear(x, W, b=None) -> Tensor:
    """``x @ W.T (+ b)`` where ``W`` is stored as (out, in)."""
    x = as_tensor(x)
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is not None:
        out = out + b.data
        parents = (x, W, b)
    else:
        parents = (x, W)

    def grad_fn(g):
        gx = g @ Wd
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _result(out, parents, grad_fn)


# --------------------------------------------------------------------------
# normalisation / probabilities


def softmax(x, axis=-1, mask=None) -> Tensor:
    """Max-shifted softmax. Masked-out entries get exactly zero probability."""
    x = as_tensor(x, dtype=None if isinstance(x, Tensor) else float)
    d = x.data
    if d.size == 0 or d.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.isfinite(d).all():
        raise NonFiniteError("softmax input contains NaN or infinite values")
    if mask is None:
        e = np.exp(d - d.max(axis=axis, keepdims=True))
    else:
        m = np.asarray(mask, dtype=bool)
        shifted = np.where(m, d, -np.inf)
        e = np.exp(shifted - shifted.max(axis=axis, keepdims=True))
        e = np.where(m, e, 0.0).astype(d.dtype, copy=False)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), grad_fn)


def softmax_xent(logits, targets, mask=None) -> Tensor:
    """Summed negative log-likelihood of integer ``targets`` under softmax(logits).

    ``logits`` has shape (..., V); ``targets`` and ``mask`` have shape (...).
    """
    logits = as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=np.int64)
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    w = np.ones(t.shape, dtype=z.dtype) if mask is None else np.asarray(mask, dtype=z.dtype)
    loss = -(picked * w).sum()

    def grad_fn(g):
        p = np.exp(logp)
        np.put_along_axis(p, t[..., None],
                          np.take_along_axis(p, t[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (w[..., None] * g),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), grad_fn)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis with biased variance, then scale and shift."""
    x = as_tensor(x, dtype=None if isinstance(x, Tensor) else float)
    gain = _const_like(gain, x)
    bias = _const_like(bias, x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ValueError(f"layer_norm length mismatch: {x.shape}, {gain.shape}, {bias.shape}")
    d = x.data
    k = 1.0 / d.shape[-1]
    xc = d - d.sum(axis=-1, keepdims=True) * k
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * k + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def grad_fn(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.sum(axis=-1, keepdims=True) * k
                    - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * k))
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), grad_fn)


# --------------------------------------------------------------------------
# structural


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), grad_fn)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.size if axis is None else shape[axis]

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(np.asarray(x.data.mean(axis=axis)), (x,), grad_fn)


def getitem(x, idx) -> Tensor:
    """Basic (non-advanced) indexing."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] += g
        return (full,)

    return _result(x.data[idx], (x,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def embedding(W: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = W.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")

    def grad_fn(g):
        full = np.zeros(W.shape, dtype=W.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, W.shape[1]))
        return (full,)

    return _result(W.data[ids], (W,), grad_fn)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, Tensor(keep))


# --------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        if node._parents is not None:
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# parameters


def xavier_init(shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Glorot-uniform init for a (fan_out, fan_in) matrix; a vector counts as (1, n)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        fan_out, fan_in = 1, shape[0]
    elif len(shape) == 2:
        fan_out, fan_in = shape
    else:
        raise ValueError(f"xavier_init expects rank 1 or 2, got {shape}")
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"xavier_init needs positive fans, got {shape}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


CKPT_MAGIC = b"MMTL"


class ParamStore:
    """Ordered registry of named trainable tensors."""

    def __init__(self, seed=0, dtype=np.float32):
        self.entries: dict[str, Tensor] = {}
        self.rng_seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._rng = make_rng(seed)

    def add(self, name, shape, init="xavier", blocks=1) -> Tensor:
        """Register a tensor. ``blocks`` > 1 initialises equal row blocks
        (e.g. stacked GRU gates) as independent Xavier matrices."""
        if name in self.entries:
            raise KeyError(f"parameter {name!r} registered twice")
        if init == "xavier" and blocks > 1:
            rows = shape[0] // blocks
            parts = [xavier_init((rows,) + tuple(shape[1:]), self._rng, self.dtype).data
                     for _ in range(blocks)]
            t = Tensor(np.concatenate(parts, axis=0))
        elif init == "xavier":
            t = xavier_init(shape, self._rng, self.dtype)
        elif init == "zeros":
            t = Tensor(np.zeros(shape, dtype=self.dtype))
        elif init == "ones":
            t = Tensor(np.ones(shape, dtype=self.dtype))
        else:
            raise ValueError(f"unknown init {init!r}")
        t.requires_grad = True
        t.name = name
        self.entries[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def values(self):
        return self.entries.values()

    def count(self) -> int:
        return sum(t.size for t in self.entries.values())

    def zero_grad(self):
        for t in self.entries.values():
            t.grad = None

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.entries.items()}

    def load_state_dict(self, state: dict):
        for k, t in self.entries.items():
            arr = state[k]
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(self.rng_seed, dtype)
        for k, t in self.entries.items():
            nt = Tensor(t.data.astype(dtype), requires_grad=True, name=k)
            out.entries[k] = nt
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def save(self, path, meta: dict | None = None):
        """Write the binary checkpoint (version 1, or 2 with a JSON header)."""
        chunks = [CKPT_MAGIC]
        if meta is None:
            chunks.append(struct.pack("<I", 1))
        else:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            chunks.append(struct.pack("<II", 2, len(blob)))
            chunks.append(blob)
        chunks.append(struct.pack("<I", len(self.entries)))
        for name, t in self.entries.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<I", t.data.ndim))
            chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
            chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path, dtype=np.float32):
        """Read a checkpoint; returns ``(store, meta)`` where meta may be None."""
        buf = Path(path).read_bytes()
        if buf[:4] != CKPT_MAGIC:
            raise ValueError(f"{path}: not an MMTL checkpoint")
        pos = 4

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(buf):
                raise ValueError(f"{path}: truncated at byte {pos}")
            vals = struct.unpack_from(fmt, buf, pos)
            pos += size
            return vals

        (version,) = take("<I")
        meta = None
        if version == 2:
            (n,) = take("<I")
            if pos + n > len(buf):
                raise ValueError(f"{path}: truncated at byte {pos}")
            meta = json.loads(buf[pos:pos + n].decode("utf-8"))
            pos += n
        elif version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = take("<I")
        store = cls(dtype=dtype)
        for _ in range(count):
            (n,) = take("<I")
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = take("<I")
            dims = take(f"<{rank}I")
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise ValueError(f"{path}: truncated at byte {pos}")
            arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
            pos += nbytes
            t = Tensor(arr.astype(dtype), requires_grad=True, name=name)
            store.entries[name] = t
        return store, meta


# --------------------------------------------------------------------------
# gradient hygiene


def clip_global_norm(grads, threshold: float):
    """Scale ``grads`` in place so their joint L2 norm is at most ``threshold``.

    Returns ``(grads, norm_before_clipping)``.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    arrays = [g.grad if isinstance(g, Tensor) else g for g in grads]
    arrays = [a for a in arrays if a is not None]
    norm = math.sqrt(sum(float(np.vdot(a, a)) for a in arrays))
    if norm > threshold:
        scale = threshold / norm
        for a in arrays:
            a *= a.dtype.type(scale)
    return grads, norm


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def failed(self):
        return [k for k, e in self.errors.items() if not e < self.tol]

    @property
    def passed(self):
        return not self.failed

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = [f"{k:32s} {e:.3e} {'ok' if e < self.tol else 'FAIL'}"
                 for k, e in self.errors.items()]
        return "\n".join(lines)


def grad_check(model_fn, params: ParamStore, eps=1e-5, tol=1e-4, floor=1e-5,
               names=None) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``model_fn()`` must rebuild the scalar loss from ``params`` deterministically
    (dropout off). Per-entry error is ``|a - n| / max(|a| + |n|, floor)``; the
    floor sits well above the difference-quotient noise (~1e-16 * |f| / eps).
    """
    if eps <= 0 or tol <= 0:
        raise ValueError("eps and tol must be positive")
    with no_grad():
        f0 = float(model_fn().data)
        f1 = float(model_fn().data)
    if f0 != f1:
        raise ValueError("model_fn is not deterministic; disable dropout for gradient checks")

    params.zero_grad()
    backward(model_fn())
    report = GradCheckReport(tol=tol)
    for name in names or list(params):
        t = params[name]
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(model_fn().data)
                flat[i] = orig - eps
                fm = float(model_fn().data)
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)
        err = np.abs(a - numeric) / np.maximum(np.abs(a) + np.abs(numeric), floor)
        report.errors[name] = float(err.max()) if err.size else 0.0
    params.zero_grad()
    return report
