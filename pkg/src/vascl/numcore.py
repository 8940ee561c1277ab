"""Dense reverse-mode differentiation over 2-D float arrays.

Only the primitives the contrastive objectives need are provided. Every
value on a :class:`Tape` is a 2-D ``numpy`` array; scalars are ``(1, 1)``.
Leaves can be marked differentiable whether they are parameters or inputs,
so gradients with respect to an input perturbation come out of the same
backward pass as parameter gradients.

Also hosts Adam with per-group learning rates, seeded sampling helpers and
a central finite-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

DEFAULT_DTYPE = np.float64
NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """A NaN or Inf reached a checked boundary."""


class DegenerateInputError(ValueError):
    """A vector with (near) zero norm where a direction is required."""


class TapeError(RuntimeError):
    """Backward requested on something the tape never recorded."""


def as_matrix(value, dtype=DEFAULT_DTYPE, name: str = "value") -> np.ndarray:
    """Coerce to a finite 2-D array; 1-D input becomes a single row."""
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"{name}: expected at most 2 dims, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name}: contains NaN or Inf")
    return arr


class Node:
    __slots__ = ("tape", "index", "value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, tape, value, requires_grad, parents=(), backward_fn=None, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.index = -1

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        label = self.name or "node"
        return f"Node({label}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records primitive applications in execution order.

    A tape is single-use and single-threaded: build the graph with the
    module-level primitives, then call :meth:`backward` once.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.nodes: List[Node] = []
        self.backward_done = False

    def _push(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad: bool = False, name: Optional[str] = None) -> Node:
        """Add an input or parameter. ``requires_grad`` marks it differentiable."""
        arr = as_matrix(value, dtype=self.dtype, name=name or "leaf")
        return self._push(Node(self, arr, requires_grad, name=name))

    def constant(self, value, name: Optional[str] = None) -> Node:
        return self.leaf(value, requires_grad=False, name=name)

    def record(self, value: np.ndarray, parents: Sequence[Node], backward_fn, name: str) -> Node:
        for p in parents:
            if p.tape is not self:
                raise TapeError(f"{name}: operand recorded on a different tape")
        if not np.isfinite(value).all():
            raise NonFiniteError(f"{name}: produced NaN or Inf")
        requires = any(p.requires_grad for p in parents)
        return self._push(Node(self, value, requires, tuple(parents), backward_fn, name))

    def backward(self, output: Node, seed=None) -> None:
        """Propagate adjoints from ``output`` back to every differentiable leaf.

        ``seed`` defaults to ones when ``output`` is a (1, 1) scalar.
        """
        if output.tape is not self or output.index < 0 or self.nodes[output.index] is not output:
            raise TapeError("backward called on a node this tape did not record")
        if self.backward_done:
            raise TapeError("backward already ran on this tape")
        if seed is None:
            if output.value.shape != (1, 1):
                raise ShapeError(f"seed required for non-scalar output of shape {output.value.shape}")
            seed = np.ones((1, 1), dtype=self.dtype)
        else:
            seed = np.asarray(seed, dtype=self.dtype)
            if seed.shape != output.value.shape:
                raise ShapeError(f"seed shape {seed.shape} does not match output {output.value.shape}")
        for node in self.nodes:
            node.grad = None
        output.grad = seed.copy()
        for node in reversed(self.nodes[: output.index + 1]):
            if node.grad is None or node.backward_fn is None or not node.requires_grad:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        for node in self.nodes:
            if node.requires_grad and node.grad is None and node.backward_fn is None:
                node.grad = np.zeros_like(node.value)
        self.backward_done = True


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    out = grad
    for axis, size in enumerate(shape):
        if size == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    return out


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    """Elementwise sum with row/column broadcasting (e.g. a bias row)."""
    _check_broadcast(a, b, "add")
    return a.tape.record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)
    return a.tape.record(a.value * factor, (a,), lambda g: (g * factor,), "scale")


def multiply(a: Node, b: Node) -> Node:
    """Elementwise product (broadcasting as in :func:`add`)."""
    _check_broadcast(a, b, "multiply")
    return a.tape.record(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "multiply",
    )


def apply_mask(a: Node, mask: np.ndarray) -> Node:
    """Dropout with an explicit (already scaled) mask."""
    mask = np.asarray(mask, dtype=a.value.dtype)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout mask {mask.shape} does not match {a.shape}")
    return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,), "dropout")


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a.tape.record(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
        "matmul",
    )


def transpose(a: Node) -> Node:
    return a.tape.record(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def affine(x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
    """``x @ weight + bias`` for row-vector inputs."""
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} vs weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (1, weight.shape[1]):
            raise ShapeError(f"affine: bias {bias.shape} vs weight {weight.shape}")
        out = add(out, bias)
    return out


def relu(a: Node) -> Node:
    keep = a.value > 0
    return a.tape.record(np.where(keep, a.value, 0.0), (a,), lambda g: (g * keep,), "relu")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def identity(a: Node) -> Node:
    return a


ACTIVATIONS: Dict[str, Callable[[Node], Node]] = {"relu": relu, "tanh": tanh, "linear": identity}


def l2_normalize(a: Node, eps: float = NORM_EPS) -> Node:
    """Scale each row to unit L2 norm; rows with norm <= eps are an error."""
    norms = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] <= eps)
    if bad.size:
        raise DegenerateInputError(f"l2_normalize: rows {bad.tolist()[:8]} have near-zero norm")
    out = a.value / norms

    def backward(g):
        # d(x/|x|) = (g - u (u.g)) / |x|
        return ((g - out * np.sum(g * out, axis=1, keepdims=True)) / norms,)

    return a.tape.record(out, (a,), backward, "l2_normalize")


def row_dot(a: Node, b: Node) -> Node:
    """Row-wise dot products, shape (n, 1)."""
    if a.shape != b.shape:
        raise ShapeError(f"row_dot: {a.shape} vs {b.shape}")
    return a.tape.record(
        np.sum(a.value * b.value, axis=1, keepdims=True),
        (a, b),
        lambda g: (g * b.value, g * a.value),
        "row_dot",
    )


def cosine_matrix(a: Node, b: Node) -> Node:
    """All-pairs cosine similarity between rows of ``a`` and rows of ``b``."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: {a.shape} vs {b.shape}")
    an = l2_normalize(a)
    bn = an if b is a else l2_normalize(b)
    return matmul(an, transpose(bn))


def row_cosine(a: Node, b: Node) -> Node:
    """Cosine similarity of matching rows, shape (n, 1)."""
    return row_dot(l2_normalize(a), l2_normalize(b))


def concat_rows(parts: Sequence[Node]) -> Node:
    parts = list(parts)
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[k]: bounds[k + 1]] for k in range(len(parts)))

    return parts[0].tape.record(np.vstack([p.value for p in parts]), tuple(parts), backward, "concat_rows")


def take_rows(a: Node, index) -> Node:
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return a.tape.record(a.value[index], (a,), backward, "take_rows")


def take_per_row(a: Node, columns) -> Node:
    """Gather ``a[i, columns[i, j]]`` into an (n, k) matrix."""
    columns = np.asarray(columns, dtype=np.intp)
    if columns.ndim != 2 or columns.shape[0] != a.shape[0]:
        raise ShapeError(f"take_per_row: index {columns.shape} vs operand {a.shape}")
    rows = np.arange(a.shape[0])[:, None]

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, (np.broadcast_to(rows, columns.shape), columns), g)
        return (out,)

    return a.tape.record(a.value[rows, columns], (a,), backward, "take_per_row")


def logsumexp_rows(a: Node, mask: Optional[np.ndarray] = None) -> Node:
    """Stable row-wise log-sum-exp; ``mask`` (bool) selects the entries that count."""
    x = a.value
    valid = np.ones_like(x, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if valid.shape != x.shape:
        raise ShapeError(f"logsumexp mask {valid.shape} vs {x.shape}")
    if not np.all(valid.any(axis=1)):
        raise ValueError("logsumexp_rows: a row has no valid entries")
    shifted = np.where(valid, x, -np.inf)
    m = shifted.max(axis=1, keepdims=True)
    ex = np.where(valid, np.exp(shifted - m), 0.0)
    s = ex.sum(axis=1, keepdims=True)
    out = m + np.log(s)
    probs = ex / s
    return a.tape.record(out, (a,), lambda g: (g * probs,), "logsumexp")


def softmax_xent_rows(logits: Node, targets, mask: Optional[np.ndarray] = None) -> Node:
    """Per-row cross-entropy ``-log softmax(logits)[target]``, shape (n, 1).

    Entries where ``mask`` is False are excluded from the normalizer.
    """
    x = logits.value
    n = x.shape[0]
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"softmax_xent_rows: {targets.shape[0]} targets for {n} rows")
    valid = np.ones_like(x, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if valid.shape != x.shape:
        raise ShapeError(f"softmax_xent_rows: mask {valid.shape} vs logits {x.shape}")
    if not np.all(valid[np.arange(n), targets]):
        raise ValueError("softmax_xent_rows: a target entry is masked out")
    shifted = np.where(valid, x, -np.inf)
    m = shifted.max(axis=1, keepdims=True)
    ex = np.where(valid, np.exp(shifted - m), 0.0)
    s = ex.sum(axis=1, keepdims=True)
    lse = m + np.log(s)
    out = lse - x[np.arange(n), targets][:, None]
    probs = ex / s

    def backward(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        return (g * d,)

    return logits.tape.record(out, (logits,), backward, "softmax_xent")


def sum_all(a: Node) -> Node:
    return a.tape.record(
        np.array([[a.value.sum()]]), (a,), lambda g: (np.full_like(a.value, g[0, 0]),), "sum"
    )


def mean_all(a: Node) -> Node:
    return scale(sum_all(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments plus one learning rate per parameter group.

    ``groups`` maps a parameter name to its group; ``lrs`` maps a group to its
    learning rate. Parameters without an explicit group use ``"default"``.
    """

    lrs: Dict[str, float]
    groups: Dict[str, str] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        group = self.groups.get(name, "default")
        try:
            return self.lrs[group]
        except KeyError:
            raise KeyError(f"no learning rate for group {group!r} (parameter {name!r})") from None


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"{name}: non-finite gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr_for(name) * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def sample_gaussian(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Isotropic zero-mean Gaussian samples."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.normal(0.0, std, size=shape)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout keep mask: kept entries carry ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    worst_index: Tuple[int, ...]
    analytic: np.ndarray
    numeric: np.ndarray


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numeric_gradient(fn: Callable[[np.ndarray], float], point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = float(fn(x))
        x[idx] = orig - step
        fm = float(fn(x))
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function value non-finite near index {idx}")
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def grad_check(
    fn: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    point,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    value_fn: Optional[Callable[[np.ndarray], float]] = None,
) -> GradCheckReport:
    """Compare the analytic gradient of ``fn`` against central differences.

    ``fn(x)`` must return ``(value, gradient)``. The finite differences use
    ``value_fn`` when given (cheaper: no backward pass), else ``fn(x)[0]``.
    """
    x = np.array(point, dtype=np.float64)
    value, analytic = fn(x.copy())
    if not np.isfinite(value):
        raise NonFiniteError("function value non-finite at the check point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    numeric = numeric_gradient(value_fn or (lambda y: fn(y)[0]), x, step)
    err = relative_error(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckReport(max_err, max_err <= tolerance, tolerance, tuple(int(i) for i in worst), analytic, numeric)

