"""DiffArray: a numpy array that records how it was produced.

Every op builds a node holding its parents and a closure mapping the output
adjoint to parent adjoints. ``backward`` walks the graph in reverse
topological order and accumulates into ``.grad`` of leaves that require it.
"""
from __future__ import annotations

import contextlib
import threading
from collections import Counter

import numpy as np

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new parameters and inputs."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


def current_scope() -> str:
    return _get("scope", "")


@contextlib.contextmanager
def scope(name: str):
    """Tag nodes created inside the block with a dotted scope name."""
    old = current_scope()
    _state.scope = f"{old}.{name}" if old else name
    try:
        yield
    finally:
        _state.scope = old


check_finite = True


class DiffArray:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op", "scope", "name",
                 "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, *,
                 parents: tuple = (), backward_fn=None, op: str = "leaf"):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.scope = current_scope()
        self.name = name

    # -- array-ish surface ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        rg = ", requires_grad" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}, op={self.op}{rg})"

    def detach(self) -> "DiffArray":
        return DiffArray(self.value)

    def zero_grad(self):
        self.grad = None

    # operators are bound in ops.py
    def backward(self, grad=None):
        backward(self, grad)


def as_array(x) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x))


def make_node(value, parents, backward_fn, op: str) -> DiffArray:
    """Wrap an op result, recording the graph edge when any parent needs it."""
    value = np.asarray(value)
    if check_finite and value.dtype.kind == "f" and not np.isfinite(value).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return DiffArray(value, op=op)
    return DiffArray(value, True, parents=tuple(parents), backward_fn=backward_fn, op=op)


def _toposort(root: DiffArray) -> list[DiffArray]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: DiffArray, grad=None) -> None:
    if not root.requires_grad:
        raise RuntimeError("backward() on an array that does not require grad")
    if grad is None:
        if root.size != 1:
            raise RuntimeError("grad must be given for non-scalar outputs")
        grad = np.ones_like(root.value)
    grads = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node.backward_fn(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def graph_inventory(root: DiffArray) -> Counter:
    """Count graph nodes by (scope, op); leaves are included."""
    inv = Counter()
    seen = set()
    stack = [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        inv[(n.scope, n.op)] += 1
        stack.extend(n.parents)
    return inv
