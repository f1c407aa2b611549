"""Dense tensors with reverse-mode automatic differentiation.

Flat row-major numpy buffers and the handful of differentiable operations a
small encoder-decoder transformer needs: matmul, row-wise (masked) softmax,
layer normalization, embedding lookup, cross-entropy.  No general
broadcasting; the only implicit broadcast is a bias row added to every row
of a matrix.

Tensors are immutable after forward construction except for their ``grad``
buffers.  Gradients accumulate across backward calls until ``zero_grads``
resets them.  Graph recording can be suspended with ``no_grad()`` for
inference; the flag is a ``ContextVar`` so concurrent use on disjoint
graphs stays safe.
"""

from __future__ import annotations

import contextvars
import warnings
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ShapeError

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "qrewrite_grad_enabled", default=True
)


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._token = _grad_enabled.set(False)
        return self

    def __exit__(self, *exc):
        _grad_enabled.reset(self._token)
        return False


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """A dense numeric array with an optional backward-graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar for the most common compositions.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def backward(self) -> None:
        """Propagate gradients from this scalar into every reachable tensor.

        Gradients accumulate; call ``zero_grads`` between backward passes
        that should not sum.
        """
        if self.data.shape != ():
            raise ShapeError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise ShapeError("backward() on a tensor with no graph attached")

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        _accumulate(self, np.ones((), dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    # hot path: bypass Tensor.__init__ checks, op outputs are always float
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def zero_grads(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    tensors = params.values() if isinstance(params, Mapping) else params
    for t in tensors:
        t.grad = None


def detach(a: Tensor) -> Tensor:
    """Same values, no backward graph: a gradient stopper."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D bias added to every row of 2-D ``a``."""
    bias_row = b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]
    if not bias_row and a.shape != b.shape:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = _result(a.data + b.data, (a, b), None)
    if out.requires_grad:
        def bwd(g):
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=0) if bias_row else g)
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = _result(a.data * b.data, (a, b), None)
    if out.requires_grad:
        def bwd(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
        out._backward = bwd
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _result(a.data * s, (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * s)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors.

    Backward: dA = dC @ B^T, dB = A^T @ dC.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = _result(a.data @ b.data, (a, b), None)
    if out.requires_grad:
        def bwd(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        out._backward = bwd
    return out


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt: incompatible shapes {a.shape} x {b.shape}")
    out = _result(a.data @ b.data.T, (a, b), None)
    if out.requires_grad:
        def bwd(g):
            _accumulate(a, g @ b.data)
            _accumulate(b, g.T @ a.data)
        out._backward = bwd
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = _result(a.data.T.copy(), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g.T)
    return out


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors vertically; backward splits the gradient back."""
    if not tensors:
        raise ShapeError("concat_rows of an empty sequence")
    width = tensors[0].shape[1]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[1] != width:
            raise ShapeError("concat_rows: all blocks must share their width")
    out = _result(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), None)
    if out.requires_grad:
        offsets = np.cumsum([0] + [t.shape[0] for t in tensors])
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                _accumulate(t, g[lo:hi])
        out._backward = bwd
    return out


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_cols of an empty sequence")
    height = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != height:
            raise ShapeError("concat_cols: all blocks must share their height")
    out = _result(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), None)
    if out.requires_grad:
        offsets = np.cumsum([0] + [t.shape[1] for t in tensors])
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                _accumulate(t, g[:, lo:hi])
        out._backward = bwd
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] of shape {a.shape}")
    out = _result(a.data[start:stop].copy(), (a,), None)
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            full[start:stop] = g
            _accumulate(a, full)
        out._backward = bwd
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] of shape {a.shape}")
    out = _result(a.data[:, start:stop].copy(), (a,), None)
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accumulate(a, full)
        out._backward = bwd
    return out


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the used rows."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("embedding expects a non-empty 1-D id sequence")
    if table.data.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): {idx.min()}..{idx.max()}"
        )
    out = _result(table.data[idx], (table,), None)
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _accumulate(table, full)
        out._backward = bwd
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), (a,), None)
    if out.requires_grad:
        mask = a.data > 0
        out._backward = lambda g: _accumulate(a, g * mask)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax of a 1-D vector, computed with max subtraction."""
    if x.data.ndim != 1 or x.shape[0] == 0:
        raise ShapeError(f"softmax expects a non-empty vector, got {x.shape}")
    z = x.data - x.data.max()
    e = np.exp(z)
    y = e / e.sum()
    out = _result(y, (x,), None)
    if out.requires_grad:
        def bwd(g):
            _accumulate(x, y * (g - float(np.dot(g, y))))
        out._backward = bwd
    return out


def softmax_rows(x: Tensor, allow: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of a 2-D tensor with an optional boolean mask.

    Disallowed entries get probability exactly zero and receive no
    gradient; each row must keep at least one allowed entry.
    """
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"softmax_rows expects a non-empty matrix, got {x.shape}")
    if allow is None:
        z = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        allow = np.asarray(allow, dtype=bool)
        if allow.shape != x.shape:
            raise ShapeError("softmax_rows: mask shape differs from input")
        if not allow.any(axis=1).all():
            raise ShapeError("softmax_rows: a row has no permitted entries")
        masked = np.where(allow, x.data, -np.inf)
        z = masked - masked.max(axis=1, keepdims=True)
        e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, (x,), None)
    if out.requires_grad:
        def bwd(g):
            dot = (g * y).sum(axis=1, keepdims=True)
            _accumulate(x, y * (g - dot))
        out._backward = bwd
    return out


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of ``x`` to zero mean / unit variance, then affine."""
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"layer_norm expects a non-empty matrix, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the row width")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = _result(xhat * gain.data + bias.data, (x, gain, bias), None)
    if out.requires_grad:
        def bwd(g):
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            _accumulate(x, gx)
            _accumulate(gain, (g * xhat).sum(axis=0))
            _accumulate(bias, g.sum(axis=0))
        out._backward = bwd
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _result(np.asarray(a.data.sum()), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, np.full_like(a.data, float(g)))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _result(np.asarray(a.data.mean()), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, np.full_like(a.data, float(g) / n))
    return out


def cross_entropy(
    logits: Tensor,
    targets: Sequence[int],
    mask: Sequence[int] | None = None,
) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` is (T, V); ``targets`` holds T token ids; ``mask`` marks
    positions that count (1) or not (0).  Computed as log-softmax with max
    subtraction.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    t, v = logits.shape
    idx = np.asarray(targets, dtype=np.intp)
    if idx.shape != (t,):
        raise ShapeError(f"cross_entropy: {t} logit rows vs {idx.shape} targets")
    keep = np.ones(t, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != (t,):
        raise ShapeError("cross_entropy: mask length differs from targets")
    if not keep.any():
        raise ShapeError("cross_entropy: no unmasked positions")
    used = idx[keep]
    if used.min() < 0 or used.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = int(keep.sum())
    loss = -logp[np.arange(t), idx][keep].sum() / n
    out = _result(np.asarray(loss), (logits,), None)
    if out.requires_grad:
        def bwd(g):
            probs = np.exp(logp)
            grad = probs.copy()
            grad[np.arange(t), idx] -= 1.0
            grad[~keep] = 0.0
            _accumulate(logits, grad * (float(g) / n))
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# verification harness


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare ``backward`` gradients of ``f()`` against central differences.

    ``f`` must be a deterministic scalar function of ``params`` evaluated in
    double precision.  ``n_samples`` random coordinates are perturbed by
    ``eps`` in both directions; returns the maximum relative error
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if n_samples == 0:
        warnings.warn("grad_check called with n_samples=0; nothing checked")
        return 0.0
    rng = rng or np.random.default_rng(0)

    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    names = sorted(params)
    sizes = np.array([params[n].data.size for n in names])
    total = int(sizes.sum())
    worst = 0.0
    for flat in rng.choice(total, size=min(n_samples, total), replace=False):
        k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        offset = int(flat - np.concatenate(([0], np.cumsum(sizes)))[k])
        p = params[names[k]]
        original = p.data.flat[offset]
        p.data.flat[offset] = original + eps
        hi = f().item()
        p.data.flat[offset] = original - eps
        lo = f().item()
        p.data.flat[offset] = original
        numeric = (hi - lo) / (2.0 * eps)
        a = float(analytic[names[k]].flat[offset])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
