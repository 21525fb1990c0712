# vadd_lab/diffgraph.py

"""
Differentiable Computation Core

Provides:
- Dense float64 tensors (numpy arrays) and the named ParamStore
- An append-only Graph recording the operations both networks need
- Reverse-mode backward pass over a recorded Graph
- Adam optimizer and cosine learning-rate schedule
- Central finite-difference gradient checking

A Graph is built for one forward pass and thrown away after backward;
the only state that survives a training step is the ParamStore
(parameters, Adam moments, step count).
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from vadd_lab.errors import ConfigurationError, UsageError

DTYPE = np.float64

# Added to an excluded logit before softmax; exp() underflows to exactly 0.
MASK_SENTINEL = -1e30

Tensor = np.ndarray


def as_tensor(values, shape=None) -> Tensor:
    array = np.asarray(values, dtype=DTYPE)
    if shape is not None:
        if int(np.prod(shape)) != array.size:
            raise ConfigurationError(
                f"cannot view {array.size} values as shape {tuple(shape)}"
            )
        array = array.reshape(shape)
    return array


# ============================================================
# Parameter Store
# ============================================================

@dataclass
class ParamStore:
    entries: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.entries:
            raise ConfigurationError(f"duplicate parameter name '{name}'")
        tensor = as_tensor(value).copy()
        self.entries[name] = tensor
        self.adam_m[name] = np.zeros_like(tensor)
        self.adam_v[name] = np.zeros_like(tensor)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self, prefix: str = ""):
        return [n for n in self.entries if n.startswith(prefix)]

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(self.entries[n].size for n in self.names(prefix)))

    def copy(self) -> "ParamStore":
        return ParamStore(
            entries={k: v.copy() for k, v in self.entries.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step_count=self.step_count,
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.entries.values())


# ============================================================
# Graph
# ============================================================

@dataclass
class Node:
    op: str
    inputs: tuple
    value: Tensor
    vjp: Optional[Callable] = None
    param: Optional[str] = None


def _check(condition, message):
    if not condition:
        raise ConfigurationError(message)


class Graph:
    """
    Append-only record of a forward computation.

    Node ids are list indices, so every node's inputs precede it and
    reversed(range(n)) is a reverse topological order.
    """

    def __init__(self, store: Optional[ParamStore] = None):
        self.store = store
        self.nodes = []
        self._param_ids = {}

    def _push(self, op, inputs, value, vjp=None, param=None) -> int:
        self.nodes.append(Node(op, tuple(inputs), value, vjp, param))
        return len(self.nodes) - 1

    def value(self, node: int) -> Tensor:
        return self.nodes[node].value

    def shape(self, node: int) -> tuple:
        return self.nodes[node].value.shape

    # ---------- leaves ----------

    def constant(self, values) -> int:
        return self._push("const", (), as_tensor(values))

    def param(self, name: str) -> int:
        if self.store is None:
            raise UsageError("graph has no ParamStore attached")
        if name not in self._param_ids:
            self._param_ids[name] = self._push(
                "param", (), self.store[name], param=name
            )
        return self._param_ids[name]

    # ---------- dense layers ----------

    def linear(self, x: int, W: int, b: int) -> int:
        xv, Wv, bv = self.value(x), self.value(W), self.value(b)
        _check(xv.ndim == 2 and Wv.ndim == 2 and bv.ndim == 1,
               f"linear expects x[B,m], W[m,n], b[n]; got {xv.shape}, {Wv.shape}, {bv.shape}")
        _check(xv.shape[1] == Wv.shape[0] and Wv.shape[1] == bv.shape[0],
               f"linear shape mismatch: {xv.shape} @ {Wv.shape} + {bv.shape}")
        out = xv @ Wv + bv

        def vjp(g):
            return g @ Wv.T, xv.T @ g, g.sum(axis=0)

        return self._push("linear", (x, W, b), out, vjp)

    def elu(self, x: int) -> int:
        xv = self.value(x)
        positive = xv > 0
        out = np.where(positive, xv, np.expm1(np.minimum(xv, 0.0)))

        def vjp(g):
            return (g * np.where(positive, 1.0, np.exp(np.minimum(xv, 0.0))),)

        return self._push("elu", (x,), out, vjp)

    def embed_sum(self, table: int, indices) -> int:
        """out[r] = sum_k table[indices[r, k]]"""
        tv = self.value(table)
        idx = np.asarray(indices, dtype=np.int64)
        _check(tv.ndim == 2 and idx.ndim == 2, "embed_sum expects table[R,D] and indices[B,K]")
        _check(idx.min(initial=0) >= 0 and idx.max(initial=0) < tv.shape[0],
               f"embedding index out of range for table with {tv.shape[0]} rows")
        out = tv[idx].sum(axis=1)

        def vjp(g):
            grad = np.zeros_like(tv)
            np.add.at(grad, idx.ravel(), np.repeat(g, idx.shape[1], axis=0))
            return (grad,)

        return self._push("embed_sum", (table,), out, vjp)

    def repeat_rows(self, x: int, n: int) -> int:
        """[B,D] -> [B*n,D] with row b*n+i equal to row b."""
        xv = self.value(x)
        _check(xv.ndim == 2, "repeat_rows expects a matrix")
        out = np.repeat(xv, n, axis=0)

        def vjp(g):
            return (g.reshape(xv.shape[0], n, xv.shape[1]).sum(axis=1),)

        return self._push("repeat_rows", (x,), out, vjp)

    def append_column(self, x: int, fill: float = 0.0) -> int:
        xv = self.value(x)
        _check(xv.ndim == 2, "append_column expects a matrix")
        out = np.concatenate([xv, np.full((xv.shape[0], 1), fill, dtype=DTYPE)], axis=1)

        def vjp(g):
            return (g[:, :-1],)

        return self._push("append_column", (x,), out, vjp)

    def columns(self, x: int, start: int, stop: int) -> int:
        xv = self.value(x)
        _check(xv.ndim == 2 and 0 <= start < stop <= xv.shape[1],
               f"column slice [{start}:{stop}] invalid for shape {xv.shape}")
        out = xv[:, start:stop].copy()

        def vjp(g):
            grad = np.zeros_like(xv)
            grad[:, start:stop] = g
            return (grad,)

        return self._push("columns", (x,), out, vjp)

    def log_softmax_rows(self, logits: int, excluded: Optional[int] = None) -> int:
        lv = self.value(logits)
        _check(lv.ndim == 2 and lv.shape[1] >= 2, "log_softmax_rows expects [N,C] with C >= 2")
        if excluded is not None:
            _check(0 <= excluded < lv.shape[1], f"excluded class {excluded} out of range")
            lv = lv.copy()
            lv[:, excluded] += MASK_SENTINEL
        shifted = lv - lv.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        probs = np.exp(out)

        def vjp(g):
            return (g - probs * g.sum(axis=1, keepdims=True),)

        return self._push("log_softmax_rows", (logits,), out, vjp)

    def pick(self, x: int, cols, weights, groups, n_groups: int) -> int:
        """out[k] = sum over rows r with groups[r] == k of weights[r] * x[r, cols[r]]"""
        xv = self.value(x)
        cols = np.asarray(cols, dtype=np.int64)
        weights = as_tensor(weights)
        groups = np.asarray(groups, dtype=np.int64)
        rows = np.arange(xv.shape[0])
        _check(cols.shape == weights.shape == groups.shape == rows.shape,
               "pick expects one (col, weight, group) per row")
        # Rows with zero weight may point at sentinel entries; keep them out of the sum.
        contrib = np.where(weights != 0.0, weights * xv[rows, cols], 0.0)
        out = np.zeros(n_groups, dtype=DTYPE)
        np.add.at(out, groups, contrib)

        def vjp(g):
            grad = np.zeros_like(xv)
            grad[rows, cols] = weights * g[groups]
            return (grad,)

        return self._push("pick", (x,), out, vjp)

    # ---------- elementwise ----------

    def add(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        _check(av.shape == bv.shape, f"add shape mismatch {av.shape} vs {bv.shape}")
        return self._push("add", (a, b), av + bv, lambda g: (g, g))

    def sub(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        _check(av.shape == bv.shape, f"sub shape mismatch {av.shape} vs {bv.shape}")
        return self._push("sub", (a, b), av - bv, lambda g: (g, -g))

    def mul(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        _check(av.shape == bv.shape, f"mul shape mismatch {av.shape} vs {bv.shape}")
        return self._push("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def scale(self, a: int, c: float) -> int:
        c = float(c)
        return self._push("scale", (a,), self.value(a) * c, lambda g: (g * c,))

    def add_scalar(self, a: int, c: float) -> int:
        return self._push("add_scalar", (a,), self.value(a) + float(c), lambda g: (g,))

    def exp(self, a: int) -> int:
        out = np.exp(self.value(a))
        return self._push("exp", (a,), out, lambda g: (g * out,))

    def square(self, a: int) -> int:
        av = self.value(a)
        return self._push("square", (a,), av * av, lambda g: (2.0 * g * av,))

    def clamp(self, a: int, lo: float, hi: float) -> int:
        av = self.value(a)
        inside = (av >= lo) & (av <= hi)
        out = np.clip(av, lo, hi)
        return self._push("clamp", (a,), out, lambda g: (g * inside,))

    # ---------- reductions ----------

    def row_sum(self, a: int) -> int:
        av = self.value(a)
        _check(av.ndim == 2, "row_sum expects a matrix")

        def vjp(g):
            return (np.repeat(g[:, None], av.shape[1], axis=1),)

        return self._push("row_sum", (a,), av.sum(axis=1), vjp)

    def sum_all(self, a: int) -> int:
        av = self.value(a)
        return self._push("sum_all", (a,), np.asarray(av.sum(), dtype=DTYPE),
                          lambda g: (np.full_like(av, g),))


# ============================================================
# Backward Pass
# ============================================================

def backward(g: Graph, loss_node: int) -> dict:
    """
    Reverse-mode sweep from a scalar loss node.

    Returns a gradient for every entry of the graph's ParamStore;
    parameters that did not take part get zeros.
    """
    loss = g.value(loss_node)
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads = [None] * (loss_node + 1)
    grads[loss_node] = np.ones_like(loss)

    for i in range(loss_node, -1, -1):
        grad = grads[i]
        node = g.nodes[i]
        if grad is None or node.vjp is None:
            continue
        for parent, parent_grad in zip(node.inputs, node.vjp(grad)):
            if g.nodes[parent].op == "const":
                continue
            if grads[parent] is None:
                grads[parent] = np.array(parent_grad, dtype=DTYPE, copy=True)
            else:
                grads[parent] += parent_grad

    result = {}
    store = g.store.entries if g.store is not None else {}
    for name, value in store.items():
        node_id = g._param_ids.get(name)
        grad = grads[node_id] if node_id is not None and node_id <= loss_node else None
        result[name] = grad.reshape(value.shape) if grad is not None else np.zeros_like(value)
    return result


# ============================================================
# Optimizer + LR Schedule
# ============================================================

def adam_step(store: ParamStore, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> ParamStore:
    """Bias-corrected Adam update applied in place."""
    for name in store.entries:
        if name not in grads:
            raise ConfigurationError(f"missing gradient for '{name}'")
        if grads[name].shape != store.entries[name].shape:
            raise ConfigurationError(
                f"gradient shape {grads[name].shape} does not match '{name}' {store.entries[name].shape}"
            )

    store.step_count += 1
    step = store.step_count
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step

    for name, param in store.entries.items():
        grad = grads[name]
        if weight_decay:
            grad = grad + weight_decay * param
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)

    return store


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    if step > total_steps:
        return 0.0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * max(step, 0) / total_steps))


# ============================================================
# Gradient Checking
# ============================================================

def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(forward: Callable, store: ParamStore, n_coords: int,
               rng: np.random.Generator, h: float = 1e-4, names=None,
               floor: float = 1e-6) -> float:
    """
    Compare autodiff against central differences at random coordinates.

    `forward(store)` must build a fresh Graph over `store` and return
    (graph, loss_node); it has to be deterministic (fix any noise inside).
    """
    g, loss = forward(store)
    grads = backward(g, loss)

    names = list(names) if names is not None else list(store.entries)
    sizes = np.array([store[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in rng.integers(0, offsets[-1], size=n_coords):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        coord = int(flat - offsets[k])
        values = store[name].reshape(-1)

        original = values[coord]
        values[coord] = original + h
        g_plus, l_plus = forward(store)
        f_plus = float(g_plus.value(l_plus))
        values[coord] = original - h
        g_minus, l_minus = forward(store)
        f_minus = float(g_minus.value(l_minus))
        values[coord] = original

        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(grads[name].reshape(-1)[coord])
        worst = max(worst, relative_error(analytic, numeric, floor))

    return worst
