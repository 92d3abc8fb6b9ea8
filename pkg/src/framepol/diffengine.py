"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Value wraps an ndarray together with the closure that pushes gradients to
its parents; op functions build the graph eagerly and `backward` walks it in
reverse topological order. The op set is exactly what the message-passing
model needs (gather/scatter over edge lists, batched 3x3 rotations, a couple
of pointwise nonlinearities); there is no general broadcasting machinery
beyond bias-style alignment, and everything is float64.

Also here: the two-layer MLP block used throughout the model, Glorot-uniform
initialization, a named parameter store, Adam, and a central-difference
gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

DEFAULT_ADAM_BETAS = (0.9, 0.999)
DEFAULT_ADAM_EPS = 1e-8

# Optional finiteness check on every op output; tests enable it, training
# leaves it off because the loss is checked per step anyway.
CHECK_FINITE = False

_fast_malloc_done = False


def enable_fast_malloc() -> None:
    """Raise glibc's mmap threshold so multi-MB tape arrays reuse heap blocks.

    Every hot array here exceeds the default 128 KiB threshold, making each
    temporary an mmap/munmap pair plus page faults; lifting the threshold cuts
    step time substantially. No-op off glibc.
    """
    global _fast_malloc_done
    if _fast_malloc_done:
        return
    _fast_malloc_done = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 512 * 1024 * 1024)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


class Value:
    """Node in the computation graph: float64 data plus backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Value", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Value:
    return Value(data)


def _make(data: np.ndarray, parents: tuple[Value, ...], backward_fn) -> Value:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by a tape op")
    requires = any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=requires, parents=parents)
    if requires:
        out._backward_fn = backward_fn
        data.setflags(write=False)  # recorded forward values are immutable
    return out


def _ensure_grad(v: Value) -> np.ndarray:
    if v.grad is None:
        v.grad = np.zeros_like(v.data)
    return v.grad


def _accum(v: Value, piece: np.ndarray, own: bool) -> None:
    """Add a gradient contribution; claims `piece` when freshly allocated."""
    if v.grad is None:
        v.grad = piece if own else piece.copy()
    else:
        v.grad += piece


def _accum_unbroadcast(v: Value, g: np.ndarray) -> None:
    shape = v.data.shape
    if g.shape == shape:
        _accum(v, g, own=False)
        return
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    _accum(v, g, own=True)


def _scatter_add(out: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    if idx.size == 0:
        return
    if idx.size > 32:
        if not np.all(idx[:-1] <= idx[1:]):
            order = np.argsort(idx, kind="stable")
            idx = idx[order]
            src = src[order]
        # Contiguous-run reduce beats np.add.at on these sizes.
        starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
        out[idx[starts]] += np.add.reduceat(src, starts, axis=0)
    else:
        np.add.at(out, idx, src)


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into .grad across the reachable graph.

    Grads of reachable nodes are reset first, so repeated calls on the same
    graph produce identical results.
    """
    if root.data.size != 1:
        raise ValueError(f"backward expects a scalar, got shape {root.data.shape}")
    order: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# Ops


def _binary_shapes(a: Value, b: Value, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}") from None


def add(a: Value, b: Value) -> Value:
    _binary_shapes(a, b, "add")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum_unbroadcast(a, g)
        if b.requires_grad:
            _accum_unbroadcast(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Value, b: Value) -> Value:
    _binary_shapes(a, b, "sub")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum_unbroadcast(a, g)
        if b.requires_grad:
            _accum_unbroadcast(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Value, b: Value) -> Value:
    _binary_shapes(a, b, "mul")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum_unbroadcast(a, g * b.data)
        if b.requires_grad:
            _accum_unbroadcast(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def scale(a: Value, s: float) -> Value:
    s = float(s)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, s * g, own=True)

    return _make(s * a.data, (a,), bwd)


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T, own=True)
        if b.requires_grad:
            _accum(b, a.data.T @ g, own=True)

    return _make(a.data @ b.data, (a, b), bwd)


def affine(x: Value, w: Value, b: Value) -> Value:
    """x @ w + b with a fused forward; the workhorse of the MLP block."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"affine: incompatible shapes {x.data.shape} and {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(f"affine: bias shape {b.data.shape} does not match {w.data.shape}")
    y = x.data @ w.data
    y += b.data

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g @ w.data.T, own=True)
        if w.requires_grad:
            _accum(w, x.data.T @ g, own=True)
        if b.requires_grad:
            _accum(b, g.sum(axis=0), own=True)

    return _make(y, (x, w, b), bwd)


def bmm(a: Value, b: Value) -> Value:
    """Batched matmul over leading axis: [B,n,k] @ [B,k,m]."""
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.data.shape[0] != b.data.shape[0]
        or a.data.shape[2] != b.data.shape[1]
    ):
        raise ValueError(f"bmm: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.swapaxes(1, 2), own=True)
        if b.requires_grad:
            _accum(b, a.data.swapaxes(1, 2) @ g, own=True)

    return _make(a.data @ b.data, (a, b), bwd)


def tanh(a: Value) -> Value:
    y = np.tanh(a.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            piece = y * y
            np.subtract(1.0, piece, out=piece)
            piece *= g
            _accum(a, piece, own=True)

    return _make(y, (a,), bwd)


def logistic(a: Value) -> Value:
    # sigma(x) = e^x / (1 + e^x); the clip only touches the saturated range
    # where float64 sigma is exactly 0 or 1 anyway.
    z = np.exp(np.clip(a.data, -60.0, 60.0))
    y = z / (1.0 + z)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            piece = 1.0 - y
            piece *= y
            piece *= g
            _accum(a, piece, own=True)

    return _make(y, (a,), bwd)


def abs_(a: Value) -> Value:
    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * np.sign(a.data), own=True)

    return _make(np.abs(a.data), (a,), bwd)


def sqrt_(a: Value) -> Value:
    y = np.sqrt(a.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            # Subgradient 0 guard at exactly 0 (loss minimum of a norm).
            _accum(a, g * 0.5 / np.maximum(y, 1e-150), own=True)

    return _make(y, (a,), bwd)


def sum_along(a: Value, axis=None, keepdims: bool = False) -> Value:
    def bwd(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        if axis is None:
            _ensure_grad(a)[...] += g
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        gg = g
        if not keepdims:
            for ax in sorted(ax % a.data.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        _ensure_grad(a)[...] += gg

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def reshape(a: Value, shape: tuple[int, ...]) -> Value:
    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape), own=False)

    return _make(a.data.reshape(shape).copy(), (a,), bwd)


def transpose_last2(a: Value) -> Value:
    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, np.ascontiguousarray(g.swapaxes(-1, -2)), own=True)

    return _make(np.ascontiguousarray(a.data.swapaxes(-1, -2)), (a,), bwd)


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    if not values:
        raise ValueError("concat needs at least one input")
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g: np.ndarray) -> None:
        pieces = np.split(g, offsets, axis=axis)
        for v, piece in zip(values, pieces):
            if v.requires_grad:
                _accum(v, piece, own=False)

    return _make(np.concatenate([v.data for v in values], axis=axis), tuple(values), bwd)


def slice_axis(a: Value, axis: int, start: int, stop: int) -> Value:
    key = [slice(None)] * a.data.ndim
    key[axis] = slice(start, stop)
    key_t = tuple(key)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _ensure_grad(a)[key_t] += g

    return _make(a.data[key_t].copy(), (a,), bwd)


def gather(a: Value, idx) -> Value:
    """Select rows (axis 0) by integer index; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _scatter_add(_ensure_grad(a), idx, g)

    return _make(a.data[idx], (a,), bwd)


def gather_pair(a: Value, idx1, idx2, extras: Sequence[Value] = ()) -> Value:
    """Fused [a[idx1], a[idx2], *extras] row-concat along axis 1.

    Equivalent to two gathers plus a concat but with one allocation and no
    gradient copies; `extras` must be 2-d constants (not differentiated).
    """
    idx1 = np.asarray(idx1, dtype=np.int64)
    idx2 = np.asarray(idx2, dtype=np.int64)
    if any(e.requires_grad for e in extras):
        raise ValueError("gather_pair extras must be constants")
    c = a.data.shape[1]
    width = 2 * c + sum(e.data.shape[1] for e in extras)
    out = np.empty((idx1.size, width))
    out[:, :c] = a.data[idx1]
    out[:, c : 2 * c] = a.data[idx2]
    col = 2 * c
    for e in extras:
        w = e.data.shape[1]
        out[:, col : col + w] = e.data
        col += w

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            grad = _ensure_grad(a)
            _scatter_add(grad, idx1, g[:, :c])
            _scatter_add(grad, idx2, g[:, c : 2 * c])

    return _make(out, (a,) + tuple(extras), bwd)


def transport_pair_vec(cand: Value, idx1, idx2, rot: np.ndarray) -> Value:
    """Fused [cand[idx1], rot @ cand[idx2]] stack along the channel axis.

    `rot` holds per-row constant rotations [E,3,3] applied channel-wise to
    the second operand (row-vector convention, see rotate_vec).
    """
    idx1 = np.asarray(idx1, dtype=np.int64)
    idx2 = np.asarray(idx2, dtype=np.int64)
    rot = np.asarray(rot, dtype=np.float64)
    c = cand.data.shape[1]
    out = np.empty((idx1.size, 2 * c, 3))
    out[:, :c] = cand.data[idx1]
    np.matmul(cand.data[idx2], rot.swapaxes(1, 2), out=out[:, c:])

    def bwd(g: np.ndarray) -> None:
        if cand.requires_grad:
            grad = _ensure_grad(cand)
            _scatter_add(grad, idx1, g[:, :c])
            _scatter_add(grad, idx2, g[:, c:] @ rot)

    return _make(out, (cand,), bwd)


def transport_pair_mat(cand: Value, idx1, idx2, rot9: np.ndarray) -> Value:
    """Fused [cand[idx1], R @ cand[idx2] @ R^T] channel stack, flattened to
    [E, 2C, 9]; rot9 holds the constant Kronecker squares (see rotate_mat)."""
    idx1 = np.asarray(idx1, dtype=np.int64)
    idx2 = np.asarray(idx2, dtype=np.int64)
    rot9 = np.asarray(rot9, dtype=np.float64)
    n, c = idx1.size, cand.data.shape[1]
    flat = cand.data.reshape(cand.data.shape[0], c, 9)
    out = np.empty((n, 2 * c, 9))
    out[:, :c] = flat[idx1]
    np.matmul(flat[idx2], rot9.swapaxes(1, 2), out=out[:, c:])

    def bwd(g: np.ndarray) -> None:
        if cand.requires_grad:
            grad = _ensure_grad(cand).reshape(cand.data.shape[0], c, 9)
            _scatter_add(grad, idx1, g[:, :c])
            _scatter_add(grad, idx2, g[:, c:] @ rot9)

    return _make(out, (cand,), bwd)


def segment_sum(a: Value, segment_ids, num_segments: int) -> Value:
    """Sum rows into `num_segments` buckets; empty buckets stay zero."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.data.shape[0]:
        raise ValueError(
            f"segment_sum: ids shape {seg.shape} does not match rows {a.data.shape}"
        )
    out = np.zeros((num_segments,) + a.data.shape[1:])
    _scatter_add(out, seg, a.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g[seg], own=True)

    return _make(out, (a,), bwd)


def rotate_vec(a: Value, rot: np.ndarray) -> Value:
    """Per-row channel-wise vector rotation: out[n,c] = rot[n] @ a[n,c].

    `rot` is a constant [N,3,3] stack, not differentiated.
    """
    rot = np.asarray(rot, dtype=np.float64)
    y = a.data @ rot.swapaxes(1, 2)  # row vectors: (R v)^T = v^T R^T

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ rot, own=True)

    return _make(y, (a,), bwd)


def rotate_mat(a: Value, rot9: np.ndarray) -> Value:
    """Per-row channel-wise conjugation out[n,c] = R[n] @ a[n,c] @ R[n].T.

    Takes the precomputed constant Kronecker squares rot9[n] = R[n] (x) R[n]
    of shape [N,9,9], acting on row-major vectorized 3x3 channels; see
    `kron_rotations`.
    """
    rot9 = np.asarray(rot9, dtype=np.float64)
    n, c = a.data.shape[0], a.data.shape[1]
    flat = a.data.reshape(n, c, 9)
    y = (flat @ rot9.swapaxes(1, 2)).reshape(n, c, 3, 3)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            piece = (g.reshape(n, c, 9) @ rot9).reshape(n, c, 3, 3)
            _accum(a, piece, own=True)

    return _make(y, (a,), bwd)


def kron_rotations(rot: np.ndarray) -> np.ndarray:
    """Per-row Kronecker square: vec(R A R^T) = (R (x) R) vec(A), row-major."""
    rot = np.asarray(rot, dtype=np.float64)
    n = rot.shape[0]
    return np.einsum("nab,ncd->nacbd", rot, rot).reshape(n, 9, 9)


# ---------------------------------------------------------------------------
# Parameters, MLP block, Adam


class ParamStore:
    """Named trainable arrays with deterministic iteration order."""

    def __init__(self) -> None:
        self._values: dict[str, Value] = {}

    def add(self, name: str, data: np.ndarray) -> Value:
        if name in self._values:
            raise ValueError(f"duplicate parameter name '{name}'")
        v = Value(np.array(data, dtype=np.float64), requires_grad=True)
        self._values[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self) -> Iterator[tuple[str, Value]]:
        return iter(self._values.items())

    def param_count(self) -> int:
        return sum(v.data.size for v in self._values.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: v.data.copy() for name, v in self._values.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._values) - set(state)
        extra = set(state) - set(self._values)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, v in self._values.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != v.data.shape:
                raise ValueError(
                    f"parameter '{name}': shape {arr.shape} != expected {v.data.shape}"
                )
            v.data[...] = arr

    def clear_grads(self) -> None:
        for v in self._values.values():
            v.grad = None


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class MlpSpec:
    """Two-layer MLP: tanh hidden layer, optional logistic output gate."""

    in_dim: int
    hidden_dim: int
    out_dim: int
    output_gate: bool = False

    def __post_init__(self) -> None:
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError("mlp dims must be positive")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("w1", (self.in_dim, self.hidden_dim)),
            ("b1", (self.hidden_dim,)),
            ("w2", (self.hidden_dim, self.out_dim)),
            ("b2", (self.out_dim,)),
        ]

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator) -> None:
    for suffix, shape in spec.param_shapes():
        if len(shape) == 1:
            store.add(f"{prefix}.{suffix}", np.zeros(shape))
        else:
            store.add(f"{prefix}.{suffix}", glorot_uniform(rng, shape))


def mlp_forward(store: ParamStore, prefix: str, spec: MlpSpec, x: Value) -> Value:
    if x.data.shape[-1] != spec.in_dim:
        raise ValueError(
            f"mlp '{prefix}': input shape {x.data.shape} does not match in_dim {spec.in_dim}"
        )
    h = tanh(affine(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"]))
    y = affine(h, store[f"{prefix}.w2"], store[f"{prefix}.b2"])
    return logistic(y) if spec.output_gate else y


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam(store: ParamStore) -> AdamState:
    return AdamState(
        step=0,
        m={name: np.zeros_like(p.data) for name, p in store.items()},
        v={name: np.zeros_like(p.data) for name, p in store.items()},
    )


def adam_step(
    store: ParamStore,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = DEFAULT_ADAM_BETAS,
    eps: float = DEFAULT_ADAM_EPS,
) -> None:
    """One Adam update with bias correction, reading grads off the store."""
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in store.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        if g is None:
            m *= b1
            v *= b2
            continue
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter '{name}'")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass(frozen=True)
class GradCheck:
    max_abs_err: float
    rel_err: float
    n_checked: int


def finite_difference_gradients(
    loss_fn: Callable[[], Value],
    store: ParamStore,
    names: Iterable[str] | None = None,
    entries_per_param: int | None = None,
    h: float = 1e-5,
    seed: int = 0,
) -> dict[str, GradCheck]:
    """Central-difference check of d(loss)/d(param) against the tape.

    For each named parameter, either all entries or a seeded sample of
    `entries_per_param` entries are perturbed by +-h. The relative error is
    the worst |fd - analytic| over checked entries, measured against the
    larger of the two gradient magnitudes (floored at 1e-8).
    """
    loss = loss_fn()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in store.items()}
    rng = np.random.default_rng(seed)
    checked = list(names) if names is not None else store.names()
    results: dict[str, GradCheck] = {}
    for name in checked:
        p = store[name]
        flat = p.data.reshape(-1)
        size = flat.size
        if entries_per_param is None or size <= entries_per_param:
            entries = np.arange(size)
        else:
            entries = np.sort(rng.choice(size, size=entries_per_param, replace=False))
        an = analytic[name].reshape(-1)
        max_err = 0.0
        scale_ref = 1e-8
        for idx in entries:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(loss_fn().data)
            flat[idx] = orig - h
            f_minus = float(loss_fn().data)
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            max_err = max(max_err, abs(fd - an[idx]))
            scale_ref = max(scale_ref, abs(fd), abs(an[idx]))
        results[name] = GradCheck(max_err, max_err / scale_ref, len(entries))
    return results
