"""Dense float64 tensors with tape-based reverse-mode differentiation, Adam, and checkpoints.

Only the operations the network needs are provided. Shapes are explicit: the one
broadcast allowed is a bias whose shape matches the trailing dimensions of the
other operand.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


_active: list["Tape"] = []


class Tape:
    """Append-only record of differentiable operations, replayed in reverse by `backward`."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None:
                node._backward(node.grad)


def current_tape() -> Optional[Tape]:
    return _active[-1] if _active else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, grad: Optional[np.ndarray] = None, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = grad
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def _acc_at(self, index, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[index] += g

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        tape.nodes.append(out)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbias(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# --- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b, where b has a's shape or is a bias over a's trailing dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim :] != b.shape):
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} are not compatible")

    def backward(g):
        if a.requires_grad:
            a._acc(g)
        if b.requires_grad:
            b._acc(_unbias(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._acc(g)
        if b.requires_grad:
            b._acc(-g)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of equal shapes; `b` may be a constant array."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._acc(g * b.data)
        if b.requires_grad:
            b._acc(g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def scale_rows(x: Tensor, s) -> Tensor:
    """x[..., d] * s[...] with s broadcast over the last axis of x."""
    x, s = as_tensor(x), as_tensor(s)
    if x.shape[:-1] != s.shape:
        raise ShapeMismatch(f"scale_rows: shapes {x.shape} and {s.shape} are not compatible")
    sd = s.data[..., None]

    def backward(g):
        if x.requires_grad:
            x._acc(g * sd)
        if s.requires_grad:
            s._acc((g * x.data).sum(axis=-1))

    return _node(x.data * sd, (x, s), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        x._acc(g * c)

    return _node(x.data * c, (x,), backward)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def backward(g):
        x._acc(g)

    return _node(x.data + c, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._acc(g * (1.0 - y * y))

    return _node(y, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        x._acc(g * y * (1.0 - y))

    return _node(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    on = x.data > 0

    def backward(g):
        x._acc(g * on)

    return _node(x.data * on, (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        x._acc(g * y)

    return _node(y, (x,), backward)


def log(x: Tensor) -> Tensor:
    """Guarded natural log: log(max(x, 1e-12)); zero gradient below the floor."""
    xc = np.maximum(x.data, LOG_FLOOR)

    def backward(g):
        x._acc(np.where(x.data > LOG_FLOOR, g / xc, 0.0))

    return _node(np.log(xc), (x,), backward)


def norm_lastdim(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis (zero gradient at the origin)."""
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        x._acc(np.where(n[..., None] > 0, x.data / safe[..., None], 0.0) * g[..., None])

    return _node(n, (x,), backward)


# --- reductions and structure -------------------------------------------


def sum_axis(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        def backward(g):
            x._acc(np.broadcast_to(g, x.shape))

        return _node(np.asarray(x.data.sum()), (x,), backward)
    ax = axis % x.ndim

    def backward(g):
        x._acc(np.broadcast_to(np.expand_dims(g, ax), x.shape))

    return _node(x.data.sum(axis=ax), (x,), backward)


def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; entries with mask == 0 get probability exactly 0."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeMismatch(f"softmax mask: shapes {mask.shape} and {z.shape} differ")
        z = np.where(mask, z, -np.inf)
        empty = ~mask.any(axis=-1, keepdims=True)
        z = np.where(empty, 0.0, z)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    y = e / e.sum(axis=-1, keepdims=True)
    if mask is not None:
        y = np.where(empty, 0.0, y)

    def backward(g):
        x._acc(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or t.shape[:ax] + t.shape[ax + 1 :] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1 :]:
            raise ShapeMismatch(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    edges = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, edges[:-1], edges[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                t._acc(g[tuple(idx)])

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _check_same(tensors[0], t, "stack")
    ax = axis % (tensors[0].ndim + 1)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._acc(np.take(g, i, axis=ax))

    return _node(np.stack([t.data for t in tensors], axis=ax), tensors, backward)


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """x[..., index, ...] along `axis` (that axis removed)."""
    ax = axis % x.ndim
    idx = (slice(None),) * ax + (index,)

    def backward(g):
        x._acc_at(idx, g)

    return _node(x.data[idx], (x,), backward)


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    idx = (Ellipsis, slice(start, stop))

    def backward(g):
        x._acc_at(idx, g)

    return _node(x.data[idx], (x,), backward)


def take(x: Tensor, index) -> Tensor:
    """x[index] for any numpy index (fancy indices may repeat; gradients scatter-add)."""

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, index, g)

    return _node(x.data[index], (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        x._acc(g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        x._acc(g.transpose(inv))

    return _node(x.data.transpose(axes), (x,), backward)


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for a (..., k) with b (k, n), or batched a (..., m, k) with b (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        k, n = b.shape

        def backward(g):
            if a.requires_grad:
                a._acc(g @ b.data.T)
            if b.requires_grad:
                b._acc(a.data.reshape(-1, k).T @ g.reshape(-1, n))

        return _node(a.data @ b.data, (a, b), backward)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        if a.requires_grad:
            a._acc(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._acc(np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), backward)


def conv1d_full_height(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """K filters of height F, width 1, stride 1 over x (..., F, N) -> (..., K, N)."""
    if w.ndim != 2 or x.shape[-2] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv1d: input {x.shape}, filters {w.shape}, bias {b.shape}")
    out = np.einsum("kf,...fn->...kn", w.data, x.data) + b.data[:, None]

    def backward(g):
        if x.requires_grad:
            x._acc(np.einsum("kf,...kn->...fn", w.data, g))
        if w.requires_grad:
            F = x.shape[-2]
            w._acc(np.einsum("mkn,mfn->kf", g.reshape(-1, g.shape[-2], g.shape[-1]), x.data.reshape(-1, F, x.shape[-1])))
        if b.requires_grad:
            b._acc(g.reshape(-1, g.shape[-2], g.shape[-1]).sum(axis=(0, 2)))

    return _node(out, (x, w, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


# --- parameters ----------------------------------------------------------


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParamStore:
    """Named parameter tensors with gradient accumulators and Adam moments."""

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.step = 0

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = Param(value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value))
        return value

    def set(self, name: str, value) -> None:
        p = self.params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.value.shape:
            raise ShapeMismatch(f"set {name}: shapes {value.shape} and {p.value.shape} differ")
        p.value[...] = value

    def tensor(self, name: str) -> Tensor:
        p = self.params[name]
        return Tensor(p.value, requires_grad=True, grad=p.grad, name=name)

    def grad(self, name: str) -> np.ndarray:
        return self.params[name].grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def grad_norm(self, names: Optional[Iterable[str]] = None) -> float:
        names = self.names() if names is None else names
        return float(np.sqrt(sum(float((self.params[n].grad ** 2).sum()) for n in names)))

    def clip_grad_norm(self, max_norm: float, names: Optional[Iterable[str]] = None) -> float:
        names = list(self.names() if names is None else names)
        total = self.grad_norm(names)
        if total > max_norm:
            f = max_norm / (total + 1e-12)
            for n in names:
                self.params[n].grad *= f
        return total

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.step = self.step
        for n, p in self.params.items():
            out.params[n] = Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy())
        return out

    def allclose(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n], other[n]) for n in self.names()
        )


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def adam_step(
    store: ParamStore,
    lr: float = 0.0005,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: Optional[int] = None,
    names: Optional[Iterable[str]] = None,
) -> ParamStore:
    """Bias-corrected Adam update of `names` (default: all); every gradient is zeroed afterward."""
    store.step = store.step + 1 if t is None else t
    step = store.step
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for n in store.names() if names is None else names:
        p = store.params[n]
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
    store.zero_grad()
    return store


# --- checkpoint file ------------------------------------------------------

MAGIC = b"PRNCKPT\x00"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    parts = [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
    parts += [_U32.pack(d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(store: ParamStore, path, include_adam: bool = True, exclude: Iterable[str] = ()) -> None:
    """Binary checkpoint: magic, version, count, records; optional Adam block; CRC32 trailer."""
    skip = set(exclude)
    names = [n for n in store.names() if n not in skip]
    body = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(names))]
    body += [_record(n, store[n]) for n in names]
    if include_adam:
        adam = [("adam.step", np.array([float(store.step)]))]
        for n in names:
            adam.append((f"adam.m/{n}", store.params[n].m))
            adam.append((f"adam.v/{n}", store.params[n].v))
        body.append(_U32.pack(len(adam)))
        body += [_record(n, a) for n, a in adam]
    else:
        body.append(_U32.pack(0))
    blob = b"".join(body)
    Path(path).write_bytes(blob + _U32.pack(zlib.crc32(blob)))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptFile("checkpoint is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def record(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode()
        shape = tuple(self.u32() for _ in range(self.u32()))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, arr


def _read_records(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint (bad magic or too short)")
    payload, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
    r = _Reader(payload)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(payload) != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    params = dict(r.record() for _ in range(r.u32()))
    adam = dict(r.record() for _ in range(r.u32()))
    if r.pos != len(payload):
        raise CorruptFile(f"{path}: trailing bytes")
    return params, adam


def load_checkpoint(path) -> ParamStore:
    params, adam = _read_records(path)
    store = ParamStore()
    for n, arr in params.items():
        store.add(n, arr)
        if f"adam.m/{n}" in adam:
            store.params[n].m[...] = adam[f"adam.m/{n}"]
            store.params[n].v[...] = adam[f"adam.v/{n}"]
    if "adam.step" in adam:
        store.step = int(adam["adam.step"][0])
    return store


def load_into(store: ParamStore, path) -> list[str]:
    """Overwrite matching parameters of `store` from a checkpoint; returns names left at their init."""
    loaded = load_checkpoint(path)
    missing = []
    for n in store.names():
        if n in loaded:
            if loaded[n].shape != store[n].shape:
                raise ShapeMismatch(f"{n}: checkpoint shape {loaded[n].shape}, model shape {store[n].shape}")
            p, q = store.params[n], loaded.params[n]
            p.value[...] = q.value
            p.m[...] = q.m
            p.v[...] = q.v
        else:
            missing.append(n)
    if missing:
        warnings.warn(f"checkpoint lacks {len(missing)} parameters; kept fresh initialization for: {', '.join(missing)}")
    store.step = loaded.step
    return missing
