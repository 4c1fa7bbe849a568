"""Small define-by-run reverse-mode engine with the handful of primitives the models use.

Parameters live in a :class:`ParamStore`; every forward pass records :class:`Node` objects
on a :class:`Tape`, and :meth:`Tape.backward` walks them in reverse, accumulating into
``ParamStore.grads``.  ``grl`` negates the upstream gradient, ``stop_grad`` blocks it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

PROB_CLAMP = 1e-7


class GraphError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class ParamStore:
    """Named dense tensors plus AdaGrad accumulators."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.accum: dict[str, np.ndarray] = {}
        self.frozen: dict[str, np.ndarray] = {}
        self.lr_scale: dict[str, float] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise GraphError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.accum[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def freeze(self, name: str, mask: Optional[np.ndarray] = None) -> None:
        """Exclude ``name`` (or the entries selected by ``mask``) from optimizer updates."""
        shape = self.values[name].shape
        self.frozen[name] = np.ones(shape, bool) if mask is None else np.broadcast_to(mask, shape).copy()

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for name in self.values:
            out.values[name] = self.values[name].copy()
            out.grads[name] = np.zeros_like(self.values[name])
            out.accum[name] = self.accum[name].copy()
        out.frozen = {k: v.copy() for k, v in self.frozen.items()}
        out.lr_scale = dict(self.lr_scale)
        return out

    def adagrad_step(self, lr: float, eps: float = 1e-10) -> None:
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)
        for name, g in self.grads.items():
            if name in self.frozen:
                g = np.where(self.frozen[name], 0.0, g)
            acc = self.accum[name]
            acc += g * g
            denom = np.sqrt(acc) + eps
            step = np.divide(g, denom, out=np.zeros_like(g), where=g != 0)
            self.values[name] -= lr * self.lr_scale.get(name, 1.0) * step
        self.zero_grad()


@dataclass(eq=False)
class Node:
    kind: str
    value: np.ndarray
    parents: tuple = ()
    backward_fn: Optional[Callable[[np.ndarray], tuple]] = None
    param: Optional[str] = None
    grad: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self):
        return self.value.shape


def _check_shape(kind: str, got, want) -> None:
    if tuple(got) != tuple(want):
        raise GraphError(f"{kind}: shape mismatch {tuple(got)} vs {tuple(want)}")


class Tape:
    """Records nodes in execution order; one tape per forward pass."""

    def __init__(self, store: ParamStore):
        self.store = store
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}

    def _push(self, kind, value, parents=(), backward_fn=None, param=None) -> Node:
        node = Node(kind, value, tuple(parents), backward_fn, param)
        self.nodes.append(node)
        return node

    # leaves
    def param(self, name: str) -> Node:
        if name not in self._params:
            if name not in self.store:
                raise GraphError(f"unknown parameter {name!r}")
            self._params[name] = self._push("param", self.store[name], param=name)
        return self._params[name]

    def const(self, value) -> Node:
        return self._push("const", np.asarray(value, dtype=self.store.dtype))

    # primitives
    def embed(self, table: Node, idx: np.ndarray, weights: Optional[np.ndarray] = None) -> Node:
        """Gather rows ``table[idx]`` (any index shape), optionally scaled by ``weights``."""
        idx = np.asarray(idx)
        n_rows = table.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
            raise GraphError(f"embed({table.param}): index out of range [0,{n_rows})")
        out = table.value[idx]
        if weights is not None:
            weights = np.asarray(weights, dtype=out.dtype)
            _check_shape(f"embed({table.param}) weights", weights.shape, idx.shape)
            out = out * weights[..., None]

        def back(g):
            if weights is not None:
                g = g * weights[..., None]
            dt = np.zeros_like(table.value)
            np.add.at(dt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
            return (dt,)

        return self._push("embed", out, (table,), back)

    def add(self, a: Node, b: Node) -> Node:
        _check_shape("add", a.shape, b.shape)
        return self._push("sum", a.value + b.value, (a, b), lambda g: (g, g))

    def sum(self, x: Node) -> Node:
        return self._push("sum", np.asarray(x.value.sum()), (x,),
                          lambda g: (np.broadcast_to(g, x.shape).copy(),))

    def mul(self, a: Node, b: Node) -> Node:
        _check_shape("elementwise-product", a.shape, b.shape)
        return self._push("elementwise-product", a.value * b.value, (a, b),
                          lambda g: (g * b.value, g * a.value))

    def scale(self, x: Node, c) -> Node:
        c = np.asarray(c, dtype=x.value.dtype)
        return self._push("scale", x.value * c, (x,), lambda g: (g * c,))

    def concat(self, xs: list[Node], axis: int = -1) -> Node:
        sizes = [x.shape[axis] for x in xs]
        value = np.concatenate([x.value for x in xs], axis=axis)
        cuts = np.cumsum(sizes)[:-1]

        def back(g):
            return tuple(np.split(g, cuts, axis=axis))

        return self._push("concat", value, xs, back)

    def slice(self, x: Node, start: int, stop: int) -> Node:
        """Columns ``start:stop`` of the last axis."""

        def back(g):
            out = np.zeros_like(x.value)
            out[..., start:stop] = g
            return (out,)

        return self._push("slice", x.value[..., start:stop], (x,), back)

    def bi_interaction(self, x: Node) -> Node:
        """``0.5 * ((sum_f v_f)^2 - sum_f v_f^2)`` over axis -2 of a (B, F, D) input."""
        if x.value.ndim != 3:
            raise GraphError(f"bi-interaction expects (B, F, D), got {x.shape}")
        s = x.value.sum(axis=1)
        value = 0.5 * (s * s - (x.value * x.value).sum(axis=1))

        def back(g):
            return (g[:, None, :] * (s[:, None, :] - x.value),)

        return self._push("bi-interaction", value, (x,), back)

    def affine(self, x: Node, w: Node, b: Optional[Node] = None) -> Node:
        if x.shape[-1] != w.shape[0]:
            raise GraphError(f"affine({w.param}): input width {x.shape[-1]} vs weight rows {w.shape[0]}")
        value = x.value @ w.value
        if b is not None:
            _check_shape(f"affine({b.param}) bias", b.shape, value.shape[-1:] if w.value.ndim > 1 else ())
            value = value + b.value

        def back(g):
            gw = x.value.T @ g
            gx = np.outer(g, w.value) if w.value.ndim == 1 else g @ w.value.T
            if b is None:
                return gx, gw
            gb = g.sum(axis=0) if g.ndim > 1 else np.asarray(g.sum())
            return gx, gw, gb

        parents = (x, w) if b is None else (x, w, b)
        return self._push("affine", value, parents, back)

    def sigmoid(self, x: Node) -> Node:
        value = 0.5 * (1.0 + np.tanh(0.5 * x.value))
        return self._push("sigmoid", value, (x,), lambda g: (g * value * (1.0 - value),))

    def grl(self, x: Node) -> Node:
        return self._push("grl", x.value, (x,), lambda g: (-g,))

    def stop_grad(self, x: Node) -> Node:
        return self._push("stop-grad", x.value, (x,), lambda g: (np.zeros_like(g),))

    def binary_xent(self, p: Node, y: np.ndarray, weights: Optional[np.ndarray] = None) -> Node:
        """Mean (optionally weighted) binary cross-entropy of probabilities ``p``."""
        y = np.asarray(y, dtype=p.value.dtype)
        _check_shape("binary-xent", p.shape, y.shape)
        pc = np.clip(p.value, PROB_CLAMP, 1.0 - PROB_CLAMP)
        per = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
        w = np.ones_like(per) if weights is None else np.asarray(weights, dtype=per.dtype)
        n = per.size
        value = np.asarray(np.sum(w.astype(np.float64) * per.astype(np.float64)) / n)

        def back(g):
            d = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * w / n
            return (g * d,)

        return self._push("binary-xent", value, (p,), back)

    def soft_xent(self, logits: Node, target: np.ndarray) -> Node:
        """Mean over rows of ``-sum_j t_j log softmax(z)_j``."""
        target = np.asarray(target, dtype=logits.value.dtype)
        _check_shape("softmax-xent", logits.shape, target.shape)
        z = logits.value - logits.value.max(axis=-1, keepdims=True)
        logsm = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        rows = 1 if logits.value.ndim == 1 else logits.shape[0]
        value = np.asarray(-np.sum(target.astype(np.float64) * logsm.astype(np.float64)) / rows)

        def back(g):
            sm = np.exp(logsm)
            return (g * (sm * target.sum(axis=-1, keepdims=True) - target) / rows,)

        return self._push("softmax-xent", value, (logits,), back)

    # reverse pass
    def backward(self, loss: Node) -> None:
        if loss.value.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            if node.param is not None:
                self.store.grads[node.param] += node.grad
                continue
            if node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                g = np.asarray(g).reshape(parent.shape)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g


def binary_xent(p: float, y: int) -> float:
    """Scalar helper with the same clamping as the tape primitive."""
    p = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)))


def soft_xent(logits, target) -> float:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    logsm = z - np.log(np.exp(z).sum())
    return float(-np.dot(np.asarray(target, dtype=np.float64), logsm))
