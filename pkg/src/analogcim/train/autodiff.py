"""A small reverse-mode differentiation engine over numpy arrays.

Only the operators needed by the network description are provided.  Every
op builds a ``Node`` holding its value and a closure that maps the output
gradient to the gradients of its parents; ``backward`` walks the graph in
reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..tensor_net import _im2col, col2im, conv_output_hw


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn: Optional[Callable] = None,
                 requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name or 'anon'}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name: str = "") -> Node:
    return Node(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)


def const(value) -> Node:
    return value if isinstance(value, Node) else Node(np.asarray(value))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Node, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node needing it."""
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents if p.requires_grad)
    root.grad = np.ones_like(root.value, dtype=np.float64) if grad is None else grad
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Node:
    a, b = const(a), const(b)
    return Node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    return Node(a.value * b.value, (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    return Node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def relu(x: Node, mask: Optional[np.ndarray] = None) -> Node:
    """Rectifier; an explicit ``mask`` replaces the sign test (used for replay)."""
    mask = x.value > 0 if mask is None else mask
    return Node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def reshape(x: Node, shape) -> Node:
    orig = x.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return Node(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def straight_through(x: Node, value: np.ndarray) -> Node:
    """Forward ``value`` but pass the incoming gradient to ``x`` unchanged."""
    return Node(value, (x,), lambda g: (g,))


def bias_add(y: Node, bias: Node) -> Node:
    """Add a per-channel bias to ``(N, C)`` or ``(N, C, H, W)`` activations."""
    shape = (1, -1) + (1,) * (y.value.ndim - 2)
    b = bias.value.reshape(shape)
    axes = tuple(i for i in range(y.value.ndim) if i != 1)
    return Node(y.value + b, (y, bias), lambda g: (g, g.sum(axis=axes).reshape(bias.shape)))


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Node, w: Node, kernel, stride, padding) -> Node:
    """``w`` has shape ``(out, C*kh*kw)``; output is NCHW."""
    n = x.shape[0]
    ho, wo = conv_output_hw(x.shape[2:], kernel, stride, padding)
    cols = _im2col(x.value, kernel, stride, padding)
    out = (w.value @ cols).reshape(w.shape[0], n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(w.shape[0], -1)
        gw = g2 @ cols.T
        gx = col2im(w.value.T @ g2, x.shape, kernel, stride, padding)
        return gx, gw

    return Node(out, (x, w), back)


def depthwise_conv2d(x: Node, w: Node, kernel, stride, padding) -> Node:
    """``w`` has shape ``(C*m, kh*kw)``."""
    n, c = x.shape[:2]
    k = kernel[0] * kernel[1]
    m = w.shape[0] // c
    ho, wo = conv_output_hw(x.shape[2:], kernel, stride, padding)
    cols = _im2col(x.value, kernel, stride, padding).reshape(c, k, -1)
    wr = w.value.reshape(c, m, k)
    out = np.einsum("cmk,ckl->cml", wr, cols).reshape(c * m, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c, m, -1)
        gw = np.einsum("cml,ckl->cmk", g2, cols).reshape(w.shape)
        gcols = np.einsum("cmk,cml->ckl", wr, g2).reshape(c * k, -1)
        gx = col2im(gcols, x.shape, kernel, stride, padding)
        return gx, gw

    return Node(out, (x, w), back)


def global_pool(x: Node, kind: str) -> Node:
    n, c, h, w = x.shape
    if kind == "avg_pool":
        return Node(x.value.mean(axis=(2, 3), keepdims=True), (x,),
                    lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))
    flat = x.value.reshape(n, c, -1)
    idx = flat.argmax(axis=2)

    def back(g):
        gx = np.zeros_like(flat, dtype=np.float64)
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(x.shape),)

    return Node(flat.max(axis=2).reshape(n, c, 1, 1), (x,), back)


def pool2d(x: Node, kind: str, kernel, stride, padding) -> Node:
    if kernel is None:
        return global_pool(x, kind)
    n, c, h, w = x.shape
    ho, wo = conv_output_hw((h, w), kernel, stride, padding)
    xs = (n * c, 1, h, w)
    cols = _im2col(x.value.reshape(xs), kernel, stride, padding)
    k = cols.shape[0]
    if kind == "avg_pool":
        out = cols.mean(axis=0)

        def back(g):
            gcols = np.broadcast_to(g.reshape(1, -1) / k, cols.shape)
            return (col2im(gcols, xs, kernel, stride, padding).reshape(x.shape),)
    else:
        idx = cols.argmax(axis=0)
        out = cols[idx, np.arange(cols.shape[1])]

        def back(g):
            gcols = np.zeros_like(cols, dtype=np.float64)
            gcols[idx, np.arange(cols.shape[1])] = g.reshape(-1)
            return (col2im(gcols, xs, kernel, stride, padding).reshape(x.shape),)

    return Node(out.reshape(n, c, ho, wo), (x,), back)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean cross-entropy of integer ``labels``."""
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return Node(np.asarray(loss), (logits,), back)
