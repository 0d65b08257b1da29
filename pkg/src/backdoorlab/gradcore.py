"""Minimal dense/sparse reverse-mode gradient engine and optimizer.

Dense matrices are plain float64 numpy arrays.  Computations are built from a
small op vocabulary (sparse aggregation, affine maps, activations, softmax,
masked cross-entropy, cosine similarity, hinge, sums); every op records a
vector-Jacobian closure so a single backward pass yields exact gradients with
respect to parameters and input features.  All reductions run in fixed
row-major order, so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graphdata import SparseOperator

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class GradcoreError(ValueError):
    """Shape mismatch or non-finite intermediate inside a composed computation."""


@dataclass(frozen=True)
class TrainHyper:
    """Supervised training knobs shared by the selector, surrogate, and targets."""

    epochs: int = 200
    hidden_dim: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 5e-3
    activation: str = "relu"
    seed: int = 3407

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.activation not in ("relu", "softplus"):
            raise ValueError("activation must be 'relu' or 'softplus'")


class Tensor:
    """Node in the reverse-mode tape."""

    __slots__ = ("value", "grad", "parents", "vjp", "op")

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        if self.value.size != 1:
            raise GradcoreError("backward requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad = parent.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents, vjp, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise GradcoreError(f"non-finite result in op '{op}'")
    return Tensor(value, parents=parents, vjp=vjp, op=op)


# ---------------------------------------------------------------------------
# Op vocabulary
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape[-1] != b.value.shape[0]:
        raise GradcoreError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _make(out, (a, b), vjp, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise GradcoreError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise GradcoreError(f"sub shape mismatch {a.shape} vs {b.shape}")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise GradcoreError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return _make(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value), "mul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # log(1 + e^x) computed stably; derivative is the logistic sigmoid.
    out = np.logaddexp(0.0, a.value)
    sig = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def hinge(a) -> Tensor:
    """max(0, x), elementwise."""
    return relu(a)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sum(a.value), (a,), lambda g: (np.full_like(a.value, float(g)),), "sum")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return (out,)

    return _make(a.value[:, start:stop], (a,), vjp, "slice_cols")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), vjp, "gather_rows")


def pick(a, row: int, col: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[row, col] = float(g)
        return (out,)

    return _make(np.asarray(a.value[row, col]), (a,), vjp, "pick")


def embed_rows(base: np.ndarray, idx, rows) -> Tensor:
    """Constant matrix with variable rows written at `idx`."""
    rows = as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.array(base, dtype=np.float64, copy=True)
    out[idx] = rows.value
    return _make(out, (rows,), lambda g: (g[idx],), "embed_rows")


def put_vec(base: np.ndarray, idx, vals) -> Tensor:
    """Constant vector with variable entries written at `idx`."""
    vals = as_tensor(vals)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.array(base, dtype=np.float64, copy=True)
    out[idx] = vals.value
    return _make(out, (vals,), lambda g: (g[idx],), "put_vec")


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = np.sum(g * s, axis=1, keepdims=True)
        return (s * (g - inner),)

    return _make(s, (a,), vjp, "row_softmax")


def cross_entropy(logits, rows, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of selected logit rows against integer labels.

    `reduction` is 'mean' or 'sum' over the selected rows.
    """
    logits = as_tensor(logits)
    rows = np.asarray(rows, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if rows.shape != labels.shape or rows.ndim != 1 or rows.size == 0:
        raise GradcoreError("cross_entropy needs matching non-empty rows and labels")
    sel = logits.value[rows]
    zmax = sel.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(sel - zmax), axis=1))
    losses = lse - sel[np.arange(len(rows)), labels]
    denom = float(len(rows)) if reduction == "mean" else 1.0
    out = np.sum(losses) / denom

    def vjp(g):
        soft = np.exp(sel - zmax)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(len(rows)), labels] -= 1.0
        full = np.zeros_like(logits.value)
        np.add.at(full, rows, soft * (float(g) / denom))
        return (full,)

    return _make(np.asarray(out), (logits,), vjp, "cross_entropy")


def cos_pairs(x, pairs, zero_norm_warn: list | None = None) -> Tensor:
    """Cosine similarity of feature-row pairs; zero-norm rows yield cosine 0."""
    x = as_tensor(x)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    xa, xb = x.value[pairs[:, 0]], x.value[pairs[:, 1]]
    na = np.linalg.norm(xa, axis=1)
    nb = np.linalg.norm(xb, axis=1)
    ok = (na > 0) & (nb > 0)
    if zero_norm_warn is not None and not np.all(ok):
        zero_norm_warn.append(int(np.sum(~ok)))
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, np.sum(xa * xb, axis=1) / denom, 0.0)

    def vjp(g):
        out = np.zeros_like(x.value)
        ga = (xb / denom[:, None] - cos[:, None] * xa / np.where(ok, na * na, 1.0)[:, None])
        gb = (xa / denom[:, None] - cos[:, None] * xb / np.where(ok, nb * nb, 1.0)[:, None])
        ga = np.where(ok[:, None], ga, 0.0) * g[:, None]
        gb = np.where(ok[:, None], gb, 0.0) * g[:, None]
        np.add.at(out, pairs[:, 0], ga)
        np.add.at(out, pairs[:, 1], gb)
        return (out,)

    return _make(cos, (x,), vjp, "cos_pairs")


def ste_binarize(a) -> Tensor:
    """Threshold at zero in the forward pass; identity Jacobian in the backward pass."""
    a = as_tensor(a)
    return _make((a.value > 0).astype(np.float64), (a,), lambda g: (g,), "ste_binarize")


def spmm(op: SparseOperator, x) -> Tensor:
    """Apply a constant symmetric sparse operator to a dense matrix."""
    x = as_tensor(x)
    if x.value.shape[0] != op.n:
        raise GradcoreError(f"spmm shape mismatch: operator n={op.n}, x rows={x.value.shape[0]}")
    csr = op.csr()
    return _make(csr @ x.value, (x,), lambda g: (csr @ g,), "spmm")


def norm_adj_spmm(weights, x, edges: np.ndarray, base_deg: np.ndarray) -> Tensor:
    """Degree-normalized aggregation with differentiable edge weights.

    Builds P = D^{-1/2} (W + I) D^{-1/2} over the given undirected edge list,
    where deg_i = base_deg_i + sum of incident weights and base_deg carries the
    self-loop plus any degree mass outside the local view, then returns P @ x.
    Backward yields exact gradients for both the weights and the features.
    """
    weights, x = as_tensor(weights), as_tensor(x)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = x.value.shape[0]
    if weights.value.shape != (edges.shape[0],):
        raise GradcoreError("one weight per edge required")
    e0, e1 = edges[:, 0], edges[:, 1]
    deg = np.array(base_deg, dtype=np.float64, copy=True)
    np.add.at(deg, e0, weights.value)
    np.add.at(deg, e1, weights.value)
    if np.any(deg <= 0):
        raise GradcoreError("non-positive degree in normalized aggregation")
    dinv = 1.0 / np.sqrt(deg)
    p = np.zeros((n, n))
    w_norm = weights.value * dinv[e0] * dinv[e1]
    np.add.at(p, (e0, e1), w_norm)
    np.add.at(p, (e1, e0), w_norm)
    idx = np.arange(n)
    p[idx, idx] += 1.0 / deg
    y = p @ x.value

    def vjp(g):
        gx = p @ g
        direct = dinv[e0] * dinv[e1] * (
            np.einsum("ef,ef->e", g[e0], x.value[e1])
            + np.einsum("ef,ef->e", g[e1], x.value[e0])
        )
        row_gy = np.einsum("nf,nf->n", g, y)
        row_gxx = np.einsum("nf,nf->n", gx, x.value)
        through_deg = 0.5 * (
            (row_gy + row_gxx)[e0] / deg[e0] + (row_gy + row_gxx)[e1] / deg[e1]
        )
        return direct - through_deg, gx

    return _make(y, (weights, x), vjp, "norm_adj_spmm")


# ---------------------------------------------------------------------------
# Public gradient entry points
# ---------------------------------------------------------------------------


def forward_backward(
    fn: Callable[[dict, Tensor], Tensor],
    params: dict[str, np.ndarray],
    inputs: np.ndarray,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Evaluate a composed computation and return (loss, param grads, input grads).

    `fn` receives a dict of parameter tensors and the input-feature tensor and
    must return a scalar loss built from this module's ops.
    """
    param_t = {k: Tensor(v) for k, v in params.items()}
    input_t = Tensor(inputs)
    loss = fn(param_t, input_t)
    loss.backward()
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for k, t in param_t.items()
    }
    in_grad = input_t.grad if input_t.grad is not None else np.zeros_like(input_t.value)
    return float(loss.value), grads, in_grad


def input_gradient_fn(
    logits_fn: Callable[[Tensor], Tensor],
    features: np.ndarray,
    center: int,
    cls: int,
) -> np.ndarray:
    """Gradient of one node's class score with respect to every feature entry."""
    x = Tensor(features)
    logits = logits_fn(x)
    if not (0 <= center < logits.value.shape[0] and 0 <= cls < logits.value.shape[1]):
        raise GradcoreError("center or class index out of range")
    pick(logits, center, cls).backward()
    return x.grad if x.grad is not None else np.zeros_like(x.value)


# ---------------------------------------------------------------------------
# Optimizer and finite differences
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """Adaptive-moment optimizer state (decoupled weight decay)."""

    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float
    weight_decay: float


def init_optim_state(params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0) -> OptimState:
    zeros = lambda: {k: np.zeros_like(v) for k, v in params.items()}
    return OptimState(t=0, m=zeros(), v=zeros(), lr=lr, weight_decay=weight_decay)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    plain_descent: bool = False,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One optimizer step; functional, bit-deterministic.

    Decoupled decay scales each parameter by (1 - lr * wd) before the moment
    update.  With `plain_descent` the moments are bypassed and the update is
    -lr * grad.
    """
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for k in sorted(params):
        p, g = params[k], grads[k]
        if p.shape != g.shape:
            raise GradcoreError(f"gradient shape mismatch for '{k}'")
        p = p * (1.0 - state.lr * state.weight_decay)
        if plain_descent:
            new_params[k] = p - state.lr * g
            new_m[k], new_v[k] = state.m[k], state.v[k]
            continue
        m = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        new_params[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[k], new_v[k] = m, v
    return new_params, OptimState(t=t, m=new_m, v=new_v, lr=state.lr, weight_decay=state.weight_decay)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    xf = x.reshape(-1)
    for k in range(xf.size):
        step = np.zeros_like(xf)
        step[k] = eps
        hi = f((xf + step).reshape(x.shape))
        lo = f((xf - step).reshape(x.shape))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GradcoreError("non-finite function value in finite differences")
        flat[k] = (hi - lo) / (2.0 * eps)
    return out


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Plain numpy row softmax for prediction-time use."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


ACTIVATIONS = {"relu": relu, "softplus": softplus}
