"""Small dense-tensor library with reverse-mode autodiff.

Every value is a float64 numpy array wrapped in :class:`Tensor`. Operations
record a closure that pushes the upstream gradient into their inputs;
:func:`backward` replays those closures in reverse topological order.

Parameters created through :class:`ParamStore` share one flat data buffer
and one flat gradient buffer, so the optimizer and clipping touch a single
contiguous array per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

MASK_FILL = -1e30


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Raised for invalid hyperparameter or configuration values."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


# Outer-product gradient contributions (vector x vector -> matrix) are queued
# per tensor and folded in with a single GEMM just before that tensor's grad
# is consumed. Decoding reuses the same weights at every step, so this turns
# T rank-1 updates into one matrix product.
_PENDING: dict[int, tuple[Tensor, list[np.ndarray], list[np.ndarray]]] = {}


def _defer_outer(t: Tensor, left: np.ndarray, right: np.ndarray) -> None:
    entry = _PENDING.get(id(t))
    if entry is None:
        _PENDING[id(t)] = (t, [left], [right])
    else:
        entry[1].append(left)
        entry[2].append(right)


def _flush(t: Tensor) -> None:
    entry = _PENDING.pop(id(t), None)
    if entry is None:
        return
    _, lefts, rights = entry
    if len(lefts) == 1:
        g = np.multiply.outer(lefts[0], rights[0])
    else:
        g = np.stack(lefts).T @ np.stack(rights)
    _accumulate(t, g)


def _flush_all() -> None:
    for t, _, _ in list(_PENDING.values()):
        _flush(t)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap `data`; attach the backward closure only if some parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(live)
    out._parents = live
    out._backward = fn if live else None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    loss.grad = np.ones_like(loss.data)
    _PENDING.clear()
    try:
        for node in reversed(order):
            if node._backward is None:
                continue
            _flush(node)
            if node.grad is None:
                continue
            node._backward(node.grad)
            # free the graph as we go; leaves keep their accumulated grads
            node._backward = None
            node._parents = ()
        _flush_all()
    finally:
        _PENDING.clear()


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def fn(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _result(a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def fn(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "elementwise_mul")

    def fn(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), fn)


elementwise_mul = mul


def scale(a: Tensor, c: float) -> Tensor:
    def fn(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), fn)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add vector ``v`` (n,) to every row of matrix ``a`` (m, n)."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rowvec: shape mismatch {a.shape} vs {v.shape}")

    def fn(g):
        if a.requires_grad:
            _accumulate(a, g)
        if v.requires_grad:
            _accumulate(v, g.sum(axis=0))

    return _result(a.data + v.data, (a, v), fn)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def fn(g):
        _accumulate(x, g * y * (1.0 - y))

    return _result(y, (x,), fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def fn(g):
        _accumulate(x, g * (1.0 - y * y))

    return _result(y, (x,), fn)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def fn(g):
        _accumulate(x, g * y)

    return _result(y, (x,), fn)


def square(x: Tensor) -> Tensor:
    def fn(g):
        _accumulate(x, 2.0 * g * x.data)

    return _result(x.data * x.data, (x,), fn)


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def fn(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum()), (x,), fn)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a matrix."""
    n = x.shape[0]

    def fn(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _result(x.data.mean(axis=0), (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                _accumulate(t, piece)

    return _result(data, tensors, fn)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    data = np.stack([t.data for t in tensors])

    def fn(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accumulate(t, g[i])

    return _result(data, tensors, fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {x.shape}")

    def fn(g):
        _accumulate(x, g.T)

    return _result(x.data.T, (x,), fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a matrix (or elements of a vector)."""
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")

    def fn(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[start:stop] += g

    return _result(x.data[start:stop], (x,), fn)


def sum_rows(x: Tensor) -> Tensor:
    """Sum over axis 0."""
    def fn(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(x.data.sum(axis=0), (x,), fn)


def pick(x: Tensor, index: int) -> Tensor:
    """Scalar element ``x[index]`` of a vector."""
    def fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)

    return _result(np.asarray(x.data[index]), (x,), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 1-D operands are treated as row/column vectors like numpy."""
    if a.data.ndim == 0 or b.data.ndim == 0 or a.data.ndim > 2 or b.data.ndim > 2:
        raise DimensionError(f"matmul: unsupported ranks {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def fn(g):
        if a.requires_grad:
            if B.ndim == 1 and A.ndim == 2:
                _defer_outer(a, g, B)
            else:
                _accumulate(a, g * B if B.ndim == 1 else g @ B.T)
        if b.requires_grad:
            if A.ndim == 1 and B.ndim == 2:
                _defer_outer(b, A, g)
            else:
                _accumulate(b, g * A if A.ndim == 1 else A.T @ g)

    return _result(A @ B, (a, b), fn)


def embedding_lookup(table: Tensor, index: int) -> Tensor:
    V = table.shape[0]
    if not 0 <= index < V:
        raise IndexError(f"embedding index {index} out of range for table of size V={V}")
    row = table.data[index].copy()

    def fn(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        table.grad[index] += g

    return _result(row, (table,), fn)


def bag_matrix(indices: np.ndarray, weights: np.ndarray, V: int) -> sparse.csr_matrix:
    """Sparse (n, V) matrix with ``weights[i, f]`` at column ``indices[i, f]``."""
    indices = np.asarray(indices, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if indices.shape != weights.shape or indices.ndim != 2:
        raise DimensionError(f"embedding_bag: indices {indices.shape} vs weights {weights.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= V):
        raise IndexError(f"embedding_bag index out of range for table of size V={V}")
    n, F = indices.shape
    return sparse.csr_matrix((weights.ravel(), indices.ravel(), np.arange(0, n * F + 1, F)), shape=(n, V))


def embedding_bag(table: Tensor, indices, weights=None) -> Tensor:
    """Weighted sum of table rows per slot.

    ``indices`` and ``weights`` are (n, F); row ``i`` of the result is
    ``sum_f weights[i, f] * table[indices[i, f]]``. A prebuilt
    :func:`bag_matrix` may be passed as ``indices`` instead.
    """
    S = indices if sparse.issparse(indices) else bag_matrix(indices, weights, table.shape[0])
    if S.shape[1] != table.shape[0]:
        raise DimensionError(f"embedding_bag: bag over {S.shape[1]} rows, table has {table.shape[0]}")
    out = np.asarray(S @ table.data)

    def fn(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        table.grad += S.T @ g

    return _result(out, (table,), fn)


# ---------------------------------------------------------------- probability


def masked_softmax(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the positions where ``mask`` is true; the rest are exactly 0.

    A 2-D ``logits`` is normalised row by row; a 1-D mask then applies to every row.
    """
    z = logits.data
    if z.ndim not in (1, 2):
        raise DimensionError(f"masked_softmax: unsupported rank {z.shape}")
    if mask is None:
        m = np.ones(z.shape[-1], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != z.shape and m.shape != z.shape[-1:]:
            raise DimensionError(f"masked_softmax: mask {m.shape} vs logits {z.shape}")
    m = np.broadcast_to(m, z.shape)
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: every position is masked")
    shifted = np.where(m, z, MASK_FILL)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e[~m] = 0.0
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        _accumulate(logits, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (logits,), fn)


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, None)


def nll(probs: Tensor, index: int, floor: float = 1e-12) -> Tensor:
    """``-log(max(probs[index], floor))``."""
    p = float(probs.data[index])
    clipped = p < floor
    value = -np.log(floor if clipped else p)

    def fn(g):
        if clipped:
            return
        full = np.zeros_like(probs.data)
        full[index] = -g / p
        _accumulate(probs, full)

    return _result(np.asarray(value), (probs,), fn)


def nll_rows(probs: Tensor, indices: Sequence[int], floor: float = 1e-12) -> Tensor:
    """``sum_t -log(max(probs[t, indices[t]], floor))`` over the rows of a 2-D ``probs``."""
    P = probs.data
    if P.ndim != 2 or len(indices) != P.shape[0]:
        raise DimensionError(f"nll_rows: {len(indices)} indices for probabilities of shape {P.shape}")
    rows = np.arange(P.shape[0])
    idx = np.asarray(indices, dtype=np.int64)
    p = P[rows, idx]
    kept = p >= floor
    value = -np.log(np.where(kept, p, floor)).sum()

    def fn(g):
        full = np.zeros_like(P)
        full[rows[kept], idx[kept]] = -g / p[kept]
        _accumulate(probs, full)

    return _result(np.asarray(value), (probs,), fn)


# ---------------------------------------------------------------- recurrent cell


def gru_cell(x: Tensor, h: Tensor, W_z: Tensor, W_r: Tensor, W_n: Tensor,
             U_z: Tensor, U_r: Tensor, U_n: Tensor,
             b_z: Tensor, b_r: Tensor, b_n: Tensor) -> Tensor:
    """One GRU step (row-vector convention)::

        z = sigmoid(x W_z + h U_z + b_z)
        r = sigmoid(x W_r + h U_r + b_r)
        n = tanh(x W_n + (r * h) U_n + b_n)
        h' = (1 - z) * n + z * h
    """
    xv, hv = x.data, h.data
    if xv.shape[0] != W_z.shape[0] or hv.shape[0] != U_z.shape[0]:
        raise DimensionError(f"gru_cell: input {xv.shape} / state {hv.shape} vs weights {W_z.shape}, {U_z.shape}")
    a_z = xv @ W_z.data + hv @ U_z.data + b_z.data
    a_r = xv @ W_r.data + hv @ U_r.data + b_r.data
    z = 0.5 * (np.tanh(0.5 * a_z) + 1.0)
    r = 0.5 * (np.tanh(0.5 * a_r) + 1.0)
    rh = r * hv
    n = np.tanh(xv @ W_n.data + rh @ U_n.data + b_n.data)
    out = (1.0 - z) * n + z * hv
    params = (x, h, W_z, W_r, W_n, U_z, U_r, U_n, b_z, b_r, b_n)

    def fn(g):
        d_n = g * (1.0 - z) * (1.0 - n * n)
        d_z = g * (hv - n) * z * (1.0 - z)
        d_rh = U_n.data @ d_n
        d_r = d_rh * hv * r * (1.0 - r)
        if x.requires_grad:
            _accumulate(x, W_z.data @ d_z + W_r.data @ d_r + W_n.data @ d_n)
        if h.requires_grad:
            _accumulate(h, g * z + U_z.data @ d_z + U_r.data @ d_r + d_rh * r)
        for w, inp, d in ((W_z, xv, d_z), (W_r, xv, d_r), (W_n, xv, d_n),
                          (U_z, hv, d_z), (U_r, hv, d_r), (U_n, rh, d_n)):
            if w.requires_grad:
                _defer_outer(w, inp, d)
        for b, d in ((b_z, d_z), (b_r, d_r), (b_n, d_n)):
            if b.requires_grad:
                _accumulate(b, d)

    return _result(out, params, fn)


# ---------------------------------------------------------------- randomness


class RngState:
    """Seeded random stream; equal seeds give equal draw sequences."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        self.counter += 1
        return self._gen.normal(mean, std, size)

    def uniform(self, size=None) -> np.ndarray:
        self.counter += 1
        return self._gen.random(size)

    def integers(self, low: int, high: int | None = None, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size)

    def choice(self, seq: Sequence, size=None, replace: bool = True):
        self.counter += 1
        idx = self._gen.choice(len(seq), size=size, replace=replace)
        if size is None:
            return seq[int(idx)]
        return [seq[int(i)] for i in idx]

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def spawn(self, salt: int) -> "RngState":
        """Independent child stream derived from this seed and ``salt``."""
        return RngState(int(np.random.SeedSequence([self.seed, salt]).generate_state(1, np.uint64)[0]))


def dropout(x: Tensor, rate: float, training: bool, rng: RngState | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= rate) / (1.0 - rate)

    def fn(g):
        _accumulate(x, g * keep)

    return _result(x.data * keep, (x,), fn)


# ---------------------------------------------------------------- initializers


def init_zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float64)


def init_normal(shape, rng: RngState, mean: float = 0.0, std: float = 0.01) -> np.ndarray:
    return rng.normal(shape, mean, std)


def init_orthogonal(shape, rng: RngState) -> np.ndarray:
    """QR of a standard-normal matrix with the sign of diag(R) folded into Q."""
    rows, cols = shape
    big, small = max(rows, cols), min(rows, cols)
    a = rng.normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return q if rows >= cols else q.T


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameters backed by one flat data buffer and one flat grad buffer."""

    def __init__(self, specs: Iterable[tuple[str, tuple[int, ...]]]):
        specs = list(specs)
        self.names = [n for n, _ in specs]
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("duplicate parameter names")
        sizes = [int(np.prod(s)) for _, s in specs]
        total = int(np.sum(sizes)) if sizes else 0
        self.flat = Tensor(np.zeros(total), requires_grad=True, name="<flat>")
        self.flat.grad = np.zeros(total)
        self.params: dict[str, Tensor] = {}
        offset = 0
        for (name, shape), size in zip(specs, sizes):
            t = Tensor.__new__(Tensor)
            t.data = self.flat.data[offset:offset + size].reshape(shape)
            t.grad = self.flat.grad[offset:offset + size].reshape(shape)
            t.requires_grad = True
            t._parents = ()
            t._backward = None
            t.name = name
            self.params[name] = t
            offset += size

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        self.flat.grad[...] = 0.0

    def snapshot(self) -> np.ndarray:
        return self.flat.data.copy()

    def restore(self, values: np.ndarray) -> None:
        self.flat.data[...] = values

    def num_parameters(self) -> int:
        return self.flat.data.size


def clip_global_norm(params: Sequence[Tensor], threshold: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``threshold``; return the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(np.sum([np.dot(g.ravel(), g.ravel()) for g in grads]))) if grads else 0.0
    if norm > threshold:
        factor = threshold / norm
        for g in grads:
            g *= factor
    return norm


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def _make_adam_kernel():
    # Fused single-pass update; same operation order as the numpy path.
    try:
        import numba
    except ImportError:  # pragma: no cover
        return None

    @numba.njit(cache=True, nogil=True)
    def kernel(p, g, m, v, b1, b2, c1, c2, eps, lr):
        a1, a2, step = 1.0 - b1, 1.0 - b2, lr / c1
        for i in range(p.shape[0]):
            gi = g[i]
            mi = m[i] * b1 + gi * a1
            vi = v[i] * b2 + (gi * gi) * a2
            m[i] = mi
            v[i] = vi
            p[i] -= (mi / (np.sqrt(vi / c2) + eps)) * step

    return kernel


_adam_kernel = _make_adam_kernel()


def adam_step(params: Sequence[Tensor], state: AdamState, grads: Sequence[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.first_moment):
        if p.data.shape != g.shape or m.shape != g.shape:
            raise DimensionError(f"adam_step: parameter {p.shape} vs grad {g.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if _adam_kernel is not None and p.data.flags.c_contiguous and g.flags.c_contiguous:
            _adam_kernel(p.data.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                         b1, b2, c1, c2, state.epsilon, state.learning_rate)
            continue
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.epsilon
        np.divide(m, tmp, out=tmp)
        tmp *= state.learning_rate / c1
        p.data -= tmp
