"""Dense float64 tensors with reverse-mode autodiff over an explicit op graph.

Each op runs eagerly on numpy arrays, records its parent nodes, and attaches
a backward closure; `backward` seeds a scalar root and walks the graph in
reverse topological order. Gradients are allocated lazily on first touch.
Every analytic gradient here is verifiable with `finite_diff_check` against
central finite differences.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """Node in the op graph: float64 data plus gradient accumulated by backward."""

    __slots__ = ("data", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, data, parents=(), op="leaf", requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """Trainable leaf."""
    return Tensor(data, op="parameter", requires_grad=True)


def constant(data) -> Tensor:
    """Non-trainable leaf (inputs, targets, precomputed tables)."""
    return Tensor(data, op="constant", requires_grad=False)


def scalar(value: float) -> Tensor:
    """Constant scalar, carried as a 1x1 tensor."""
    return constant(np.array([[float(value)]]))


def _acc(node: Tensor, delta: np.ndarray, own: bool = False) -> None:
    """Accumulate into node.grad; `own` marks a freshly allocated, unshared array."""
    if node.grad is None:
        node.grad = delta if own else delta.copy()
    else:
        node.grad += delta


def _topo_order(root: Tensor) -> list[Tensor]:
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
    return order  # parents precede children


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into .grad for every grad-requiring node.

    Grads of all nodes reachable from the root are reset first; leaves outside
    this graph keep whatever grad they had, so callers reusing parameters
    across graphs should clear them between passes.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar-sized, got shape {root.data.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.requires_grad and node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    values = tensors.values() if isinstance(tensors, dict) else tensors
    for t in values:
        t.grad = None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def _bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T, own=True)
        if b.requires_grad:
            _acc(b, a.data.T @ g, own=True)

    out._backward = _bw
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, (a, b), "add")

    def _bw(g):
        if a.requires_grad:
            _acc(a, g)
        if b.requires_grad:
            _acc(b, g)

    out._backward = _bw
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1xN row vector to every row of an MxN tensor."""
    if x.data.ndim != 2 or bias.shape != (1, x.shape[1]):
        raise ValueError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    out = Tensor(x.data + bias.data, (x, bias), "add_bias")

    def _bw(g):
        if x.requires_grad:
            _acc(x, g)
        if bias.requires_grad:
            _acc(bias, g.sum(axis=0, keepdims=True), own=True)

    out._backward = _bw
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c, (x,), "scale")

    def _bw(g):
        if x.requires_grad:
            _acc(x, g * c, own=True)

    out._backward = _bw
    return out


def mul_const(x: Tensor, arr) -> Tensor:
    """Elementwise multiply by a constant array broadcastable to x's shape."""
    arr = np.asarray(arr, dtype=np.float64)
    if np.broadcast_shapes(x.shape, arr.shape) != x.shape:
        raise ValueError(f"mul_const: {arr.shape} does not broadcast to {x.shape}")
    out = Tensor(x.data * arr, (x,), "mul_const")

    def _bw(g):
        if x.requires_grad:
            _acc(x, g * arr, own=True)

    out._backward = _bw
    return out


def emul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shaped tensors."""
    if a.shape != b.shape:
        raise ValueError(f"emul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, (a, b), "emul")

    def _bw(g):
        if a.requires_grad:
            _acc(a, g * b.data, own=True)
        if b.requires_grad:
            _acc(b, g * a.data, own=True)

    out._backward = _bw
    return out


def scale_rows(x: Tensor, col: Tensor) -> Tensor:
    """Multiply row i of an MxN tensor by col[i], col an Mx1 tensor."""
    if x.data.ndim != 2 or col.shape != (x.shape[0], 1):
        raise ValueError(f"scale_rows shape mismatch: {x.shape} * {col.shape}")
    out = Tensor(x.data * col.data, (x, col), "scale_rows")

    def _bw(g):
        if x.requires_grad:
            _acc(x, g * col.data, own=True)
        if col.requires_grad:
            _acc(col, (g * x.data).sum(axis=1, keepdims=True), own=True)

    out._backward = _bw
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got shape {x.shape}")
    out = Tensor(x.data.T.copy(), (x,), "transpose")

    def _bw(g):
        if x.requires_grad:
            _acc(x, g.T)

    out._backward = _bw
    return out


def masked_softmax_rows(scores: Tensor, mask, blocked: np.ndarray | None = None) -> Tensor:
    """Row softmax of scores + mask, with mask entries in {0, -inf}.

    Entries at -inf positions come out exactly 0.0 and never contribute to the
    row maximum or normalizer, so blocked positions cannot leak bits into
    unblocked outputs. `blocked` may carry the precomputed (mask == -inf)
    boolean array to skip re-validation of a cached mask.
    """
    if scores.data.ndim != 2:
        raise ValueError(f"masked_softmax_rows expects 2-d scores, got {scores.shape}")
    if blocked is None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != scores.shape:
            raise ValueError(f"masked_softmax_rows shape mismatch: {scores.shape} vs mask {mask.shape}")
        blocked = np.isneginf(mask)
        if not np.all((mask == 0.0) | blocked):
            raise ValueError("mask entries must be 0 or -inf")
        if blocked.all(axis=1).any():
            raise ValueError("row has no attendable positions")
    elif blocked.shape != scores.shape:
        raise ValueError(f"masked_softmax_rows shape mismatch: {scores.shape} vs mask {blocked.shape}")
    s = scores.data.copy()
    s[blocked] = -np.inf
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)  # exp(-inf) == 0.0 exactly
    p /= p.sum(axis=1, keepdims=True)
    out = Tensor(p, (scores,), "masked_softmax_rows")

    def _bw(g):
        if scores.requires_grad:
            _acc(scores, p * (g - (g * p).sum(axis=1, keepdims=True)), own=True)

    out._backward = _bw
    return out


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU, elementwise."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_K * (x.data + _GELU_C * x2 * x.data))
    out = Tensor(0.5 * x.data * (1.0 + t), (x,), "gelu")

    def _bw(g):
        if x.requires_grad:
            du = _GELU_K * (1.0 + 3.0 * _GELU_C * x2)
            _acc(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du), own=True)

    out._backward = _bw
    return out


def rmsnorm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale each row to unit RMS."""
    if x.data.ndim != 2:
        raise ValueError(f"rmsnorm_rows expects a 2-d tensor, got shape {x.shape}")
    ms = (x.data * x.data).mean(axis=1, keepdims=True) + eps
    s = ms**-0.5
    out = Tensor(x.data * s, (x,), "rmsnorm_rows")

    def _bw(g):
        if x.requires_grad:
            n = x.shape[1]
            xg = (x.data * g).sum(axis=1, keepdims=True)
            _acc(x, s * (g - (s * s / n) * x.data * xg), own=True)

    out._backward = _bw
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ValueError(f"slice_rows [{start}:{stop}] invalid for shape {x.shape}")
    out = Tensor(x.data[start:stop].copy(), (x,), "slice_rows")

    def _bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += g

    out._backward = _bw
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ValueError(f"slice_cols [{start}:{stop}] invalid for shape {x.shape}")
    out = Tensor(x.data[:, start:stop].copy(), (x,), "slice_cols")

    def _bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, start:stop] += g

    out._backward = _bw
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    cols = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise ValueError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0), tuple(parts), "concat_rows")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def _bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _acc(p, g[lo:hi])

    out._backward = _bw
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_cols needs at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ValueError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), tuple(parts), "concat_cols")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def _bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _acc(p, g[:, lo:hi])

    out._backward = _bw
    return out


def embed_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a VxD table; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ValueError(f"embed_rows expects VxD table and 1-d ids, got {table.shape} / {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embed_rows: id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids], (table,), "embed_rows")

    def _bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)  # ids may repeat

    out._backward = _bw
    return out


def permute_flat(x: Tensor, perm, out_shape) -> Tensor:
    """Reindex: out.flat[i] = x.flat[perm[i]], perm a permutation of x's elements."""
    perm = np.asarray(perm, dtype=np.int64)
    out_shape = tuple(int(s) for s in out_shape)
    if perm.size != x.data.size or perm.size != int(np.prod(out_shape)):
        raise ValueError(f"permute_flat size mismatch: {x.data.size} elements, {perm.size} indices, out {out_shape}")
    out = Tensor(x.data.reshape(-1)[perm].reshape(out_shape), (x,), "permute_flat")

    def _bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad.reshape(-1)[perm] += g.reshape(-1)  # perm indices are unique

    out._backward = _bw
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements, as a 1x1 tensor."""
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.array([[(diff * diff).sum() / n]]), (pred, target), "mse")

    def _bw(g):
        coeff = 2.0 * g.item() / n
        if pred.requires_grad:
            _acc(pred, coeff * diff.reshape(pred.shape), own=True)
        if target.requires_grad:
            _acc(target, -coeff * diff.reshape(target.shape), own=True)

    out._backward = _bw
    return out


def add_all(parts: Sequence[Tensor]) -> Tensor:
    """Sum a non-empty list of same-shaped tensors."""
    if not parts:
        raise ValueError("add_all needs at least one part")
    acc = parts[0]
    for p in parts[1:]:
        acc = add(acc, p)
    return acc


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild the graph from the given parameter tensors on every call;
    their .data is perturbed in place entry by entry. Relative error is
    |analytic - central| / max(1, |central|).
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    zero_grads(params)
    out = f()
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued graph, got shape {out.shape}")
    if not np.isfinite(out.item()):
        raise ValueError("non-finite forward value")
    backward(out)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = None if a is None else a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("non-finite forward value at perturbed parameters")
            central = (fp - fm) / (2.0 * h)
            an = 0.0 if aflat is None else aflat[i]
            err = abs(an - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
